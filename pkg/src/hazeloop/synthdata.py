"""Procedural toy scenes: smooth backgrounds, bright blobs with known boxes,
smooth depth fields.  Everything needed to supervise the toy task heads is
generated alongside the images.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn.functional as F

from . import fileio, haze
from .errors import InputError

DEPTH_RANGE = (0.3, 1.8)  # keeps t >= 0.05 for beta <= 1.6
SEG_THRESHOLD = 0.5  # luma threshold defining the toy segmentation gt


def smooth_field(rng, h, w, low, high, grid=4):
    """Low-resolution uniform noise upsampled bilinearly to (h, w)."""
    coarse = torch.empty(1, 1, grid, grid).uniform_(low, high, generator=rng)
    field = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=True)
    return field[0, 0]


def make_scene(rng, size=32, max_blobs=3):
    """Return (clear image, depth map, blob boxes).

    Blobs are bright rectangles on a dim smooth background, so the
    brightness-threshold segmentation gt separates them cleanly.
    """
    h = w = size
    image = torch.stack([smooth_field(rng, h, w, 0.05, 0.45) for _ in range(3)])
    boxes = []
    n_blobs = int(torch.randint(1, max_blobs + 1, (1,), generator=rng))
    for _ in range(n_blobs):
        bw = int(torch.randint(max(3, w // 8), max(4, w // 3), (1,), generator=rng))
        bh = int(torch.randint(max(3, h // 8), max(4, h // 3), (1,), generator=rng))
        x = int(torch.randint(0, w - bw, (1,), generator=rng))
        y = int(torch.randint(0, h - bh, (1,), generator=rng))
        color = torch.empty(3).uniform_(0.75, 1.0, generator=rng)
        image[:, y : y + bh, x : x + bw] = color.view(3, 1, 1)
        boxes.append((float(x), float(y), float(bw), float(bh)))
    depth = smooth_field(rng, h, w, *DEPTH_RANGE)
    return image, depth, boxes


def seg_ground_truth(clear: torch.Tensor) -> torch.Tensor:
    """Per-pixel 2-class labels: 1 where luma exceeds the blob threshold."""
    luma = clear.mean(dim=0)
    return (luma > SEG_THRESHOLD).long()


def generate_dataset(out_dir, count, cfg, seed=0, size=32):
    """Write clear/hazy/depth/box files plus the manifest; returns its path.

    Per-image naming convention: NNNN_clear.png, NNNN_hazy.png,
    NNNN_depth.pgm, NNNN_boxes.csv.  The manifest lists clear and depth;
    siblings are derived from the clear path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = torch.Generator().manual_seed(seed)
    records = []
    for i in range(count):
        clear, depth, boxes = make_scene(rng, size=size)
        params = haze.sample_params(
            rng,
            beta_range=(cfg.haze_beta_min, cfg.haze_beta_max),
            a_range=(cfg.haze_a_min, cfg.haze_a_max),
        )
        hazy = haze.synthesize_haze(clear, depth, params)
        stem = f"{i:04d}"
        clear_path = out / f"{stem}_clear.png"
        fileio.save_image(clear_path, clear)
        fileio.save_image(out / f"{stem}_hazy.png", hazy)
        fileio.save_depth_pgm(out / f"{stem}_depth.pgm", depth)
        fileio.write_boxes(out / f"{stem}_boxes.csv", boxes)
        records.append((str(clear_path), str(out / f"{stem}_depth.pgm")))
    manifest = out / "manifest.tsv"
    fileio.write_manifest(manifest, records)
    return manifest


def sibling_paths(clear_path):
    clear_path = Path(clear_path)
    name = clear_path.name
    if "_clear" not in name:
        raise InputError(f"cannot derive siblings from {clear_path} (no '_clear' in name)")
    return (
        clear_path.with_name(name.replace("_clear", "_hazy")),
        clear_path.with_name(name.replace("_clear", "_boxes")).with_suffix(".csv"),
    )


class Sample:
    """One dataset record with everything loaded."""

    __slots__ = ("clear", "hazy", "depth", "boxes", "seg_labels", "image_id")

    def __init__(self, clear, hazy, depth, boxes, image_id):
        self.clear = clear
        self.hazy = hazy
        self.depth = depth
        self.boxes = boxes
        self.seg_labels = seg_ground_truth(clear)
        self.image_id = image_id


def load_dataset(manifest_path):
    samples = []
    for clear_path, depth_path in fileio.read_manifest(manifest_path):
        hazy_path, boxes_path = sibling_paths(clear_path)
        samples.append(
            Sample(
                clear=fileio.load_image(clear_path),
                hazy=fileio.load_image(hazy_path),
                depth=fileio.load_depth_pgm(depth_path),
                boxes=fileio.read_boxes(boxes_path),
                image_id=Path(clear_path).stem.replace("_clear", ""),
            )
        )
    return samples
