"""On-disk formats: images (PNG/PPM/PGM), manifests, checkpoints, embeddings.

Checkpoint container: magic "LLCKPT1\\0", u32 tensor count, then per tensor:
u32 name length + UTF-8 name, u32 rank, u32 shape entries, row-major
little-endian f32 payload.

Embedding container: magic "LLEMB1\\0", then per entry: u32 text length +
UTF-8 instruction, u32 dimension, little-endian f32 vector.  Entries run to
end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError

CHECKPOINT_MAGIC = b"LLCKPT1\x00"
EMBEDDING_MAGIC = b"LLEMB1\x00"


# ---------------------------------------------------------------------------
# images

def save_image(path, image: torch.Tensor):
    """Write a (3,H,W) tensor in [0,1] as 8-bit PNG or binary PPM (P6)."""
    arr = (image.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    arr = np.transpose(arr, (1, 2, 0))
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        h, w = arr.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(arr.tobytes())
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> torch.Tensor:
    """Read an 8-bit RGB image into a (3,H,W) float tensor in [0,1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        arr = _read_ppm(path)
    else:
        arr = np.asarray(Image.open(path).convert("RGB"))
    t = torch.from_numpy(arr.astype(np.float32) / 255.0)
    return t.permute(2, 0, 1).contiguous()


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, offset = _parse_pnm_header(data, path)
    if magic != b"P6":
        raise InputError(f"{path}: expected P6 PPM, got {magic!r}")
    if maxval != 255:
        raise InputError(f"{path}: only maxval 255 PPM supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    return pixels.reshape(h, w, 3)


def save_depth_pgm(path, depth: torch.Tensor):
    """Write an (H,W) depth map in meters as 16-bit PGM (value = mm)."""
    mm = (depth.numpy() * 1000.0).round()
    if mm.min() < 0 or mm.max() > 65535:
        raise InputError("depth out of range for 16-bit millimetre PGM")
    arr = mm.astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(arr.tobytes())


def load_depth_pgm(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, offset = _parse_pnm_header(data, path)
    if magic != b"P5":
        raise InputError(f"{path}: expected P5 PGM, got {magic!r}")
    if maxval != 65535:
        raise InputError(f"{path}: expected 16-bit PGM (maxval 65535)")
    arr = np.frombuffer(data, dtype=">u2", count=w * h, offset=offset).reshape(h, w)
    return torch.from_numpy(arr.astype(np.float32) / 1000.0)


def _parse_pnm_header(data: bytes, path):
    # magic, width, height, maxval separated by whitespace; '#' comments allowed
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise InputError(f"{path}: truncated PNM header")
        tokens.append(data[start:i])
    i += 1  # single whitespace after maxval
    magic = tokens[0]
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise InputError(f"{path}: bad PNM header") from exc
    return magic, w, h, maxval, i


# ---------------------------------------------------------------------------
# manifests and box annotations

def write_manifest(path, records):
    """records: iterable of (clear_path, depth_path)."""
    with open(path, "w", encoding="utf-8") as fh:
        for clear, depth in records:
            fh.write(f"{clear}\t{depth}\n")


def read_manifest(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected clear<TAB>depth")
            records.append((parts[0], parts[1]))
    return records


def write_boxes(path, boxes):
    """boxes: iterable of (x, y, w, h) in pixels."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, w, h in boxes:
            fh.write(f"{x},{y},{w},{h}\n")


def read_boxes(path):
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            x, y, w, h = (float(v) for v in line.split(","))
            boxes.append((x, y, w, h))
    return boxes


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, tensors: dict):
    """Write named f32 tensors in the LLCKPT1 container format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            arr = tensor.detach().cpu().to(torch.float32).numpy()
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        numel = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=numel, offset=offset)
        offset += 4 * numel
        tensors[name] = torch.from_numpy(arr.copy().reshape(shape))
    return tensors


# ---------------------------------------------------------------------------
# instruction embeddings

def save_embeddings(path, entries: dict):
    """entries: instruction string -> 1-D float tensor."""
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        for text, vec in entries.items():
            arr = vec.detach().cpu().to(torch.float32).numpy().ravel()
            encoded = text.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.size))
            fh.write(arr.astype("<f4").tobytes())


def load_embeddings(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise InputError(f"{path}: not an embedding file (bad magic)")
    offset = len(EMBEDDING_MAGIC)
    entries = {}
    while offset < len(data):
        (tlen,) = struct.unpack_from("<I", data, offset)
        offset += 4
        text = data[offset : offset + tlen].decode("utf-8")
        offset += tlen
        (dim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        arr = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
        entries[text] = torch.from_numpy(arr.copy())
    return entries
