"""Two-stage training and the closed-loop inference procedure.

Stage 1 trains the base dehazing network.  Stage 2 freezes it and trains
only the feedback (TFGA) and instruction (IGM) modules, pretraining the toy
task heads on clear images first.  Inference runs the loop: initial dehazing
-> task feedback -> feature modulation -> result update.
"""

from __future__ import annotations

import csv
import hashlib
import math
from pathlib import Path

import torch

from . import downstream, fileio, losses, quality, synthdata
from .config import Config
from .errors import ConfigError, InputError, NumericError, RoutingError
from .idn import IDN, ModulationBundle
from .igm import IGM, make_text_encoder
from .tfga import TFGA

TRAIN_LOG_HEADER = "epoch, split, l1, ratio, mcr, down, total, ordering_fraction"


# ---------------------------------------------------------------------------
# dataset plumbing

def resolve_dataset(dataset):
    """Accept a manifest path or a list of loaded samples."""
    if isinstance(dataset, (str, Path)):
        samples = synthdata.load_dataset(dataset)
    else:
        samples = list(dataset)
    if not samples:
        raise InputError("dataset is empty")
    return samples


def _batches(n, batch_size, rng):
    order = torch.randperm(n, generator=rng).tolist()
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _stack(samples, idx):
    hazy = torch.stack([samples[i].hazy for i in idx])
    clear = torch.stack([samples[i].clear for i in idx])
    return hazy, clear


def tensor_fingerprint(tensors: dict) -> str:
    """Order-independent byte hash of a named tensor collection."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(tensors[name].detach().cpu().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


def _check_finite(loss, context):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss ({float(loss)}) during {context}")


# ---------------------------------------------------------------------------
# checkpoint namespacing

def _namespaced(module, prefix):
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def _load_namespaced(module, tensors, prefix):
    state = {
        k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")
    }
    if not state:
        raise InputError(f"checkpoint has no '{prefix}.*' tensors")
    module.load_state_dict(state)
    return module


class ModelBundle:
    """Everything a closed-loop run needs, with checkpoint (de)serialization."""

    def __init__(self, cfg: Config, stage2: bool):
        self.cfg = cfg
        self.idn = IDN(cfg.model_channels)
        c1, c2, c3 = cfg.model_channels
        self.registry = downstream.build_registry()
        self.extractor = losses.make_extractor(cfg.perceptual_kind)
        self.text_encoder = make_text_encoder(cfg.text_kind)
        if stage2:
            feedback_channels = {
                "seg": 2,
                "depth": 1,
                "det": downstream.DetAdapter.feature_channels,
            }
            self.tfga = TFGA(c3, feedback_channels)
            self.igm = IGM(enc_channels=c3, dec_channels=c2)
        else:
            self.tfga = None
            self.igm = None

    @property
    def has_stage2(self):
        return self.tfga is not None or self.igm is not None

    def tensors(self) -> dict:
        out = _namespaced(self.idn, "idn")
        if self.tfga is not None:
            out.update(_namespaced(self.tfga, "tfga"))
        if self.igm is not None:
            out.update(_namespaced(self.igm, "igm"))
        if self.has_stage2:
            for name, adapter in self.registry.items():
                out.update(_namespaced(adapter, f"task.{name}"))
        return out

    def save(self, path):
        fileio.save_checkpoint(path, self.tensors())

    @classmethod
    def load(cls, path, cfg: Config):
        tensors = fileio.load_checkpoint(path)
        stage2 = any(k.startswith("tfga.") or k.startswith("igm.") for k in tensors)
        bundle = cls(cfg, stage2=stage2)
        _load_namespaced(bundle.idn, tensors, "idn")
        if stage2:
            if bundle.tfga is not None:
                _load_namespaced(bundle.tfga, tensors, "tfga")
            _load_namespaced(bundle.igm, tensors, "igm")
            for name, adapter in bundle.registry.items():
                _load_namespaced(adapter, tensors, f"task.{name}")
        bundle.eval()
        return bundle

    def eval(self):
        for m in (self.idn, self.tfga, self.igm, *self.registry.values()):
            if m is not None:
                m.eval()
        return self


# ---------------------------------------------------------------------------
# stage 1

def train_stage1(dataset, cfg: Config, ckpt_path, log=print):
    """Train the base network on hazy/clear pairs; writes 'idn.*' tensors."""
    samples = resolve_dataset(dataset)
    torch.manual_seed(cfg.train_seed)
    rng = torch.Generator().manual_seed(cfg.train_seed)
    model = IDN(cfg.model_channels)
    extractor = losses.make_extractor(cfg.perceptual_kind)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train_lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.train_epochs, eta_min=0.0)

    log(TRAIN_LOG_HEADER)
    epoch_losses = []
    for epoch in range(1, cfg.train_epochs + 1):
        model.train()
        tot_l1 = tot_ratio = tot_loss = 0.0
        n_batches = 0
        for idx in _batches(len(samples), cfg.train_batch, rng):
            hazy, clear = _stack(samples, idx)
            if torch.rand((), generator=rng) < 0.5:  # horizontal flip
                hazy, clear = hazy.flip(-1), clear.flip(-1)
            pred = model(hazy)
            l1 = losses.l1_loss(pred, clear)
            if cfg.loss_lambda > 0:
                ratio = losses.contrastive_ratio(clear, pred, hazy, extractor)
            else:
                ratio = l1.new_zeros(())
            loss = l1 + cfg.loss_lambda * ratio
            _check_finite(loss, f"stage-1 epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_l1 += float(l1.detach())
            tot_ratio += float(ratio.detach())
            tot_loss += float(loss.detach())
            n_batches += 1
        sched.step()
        mean_loss = tot_loss / n_batches
        epoch_losses.append(mean_loss)
        log(
            f"{epoch}, train, {tot_l1 / n_batches:.6f}, {tot_ratio / n_batches:.6f}, "
            f"0.000000, 0.000000, {mean_loss:.6f}, 0.000"
        )
    model.eval()
    fileio.save_checkpoint(ckpt_path, _namespaced(model, "idn"))
    return epoch_losses


# ---------------------------------------------------------------------------
# stage 2

def pretrain_adapters(samples, registry, seed=0, steps=200, batch=8, lr=1e-3, log=print):
    """Fit the toy task heads on clear images, then freeze them."""
    rng = torch.Generator().manual_seed(seed)
    for name, adapter in registry.items():
        adapter.train()
        opt = torch.optim.Adam(adapter.parameters(), lr=lr)
        for step in range(steps):
            idx = torch.randint(len(samples), (batch,), generator=rng).tolist()
            clear = torch.stack([samples[i].clear for i in idx])
            gt = torch.cat([adapter.ground_truth(samples[i]) for i in idx])
            loss = adapter.loss(adapter.run(clear), gt)
            _check_finite(loss, f"adapter '{name}' pretraining")
            opt.zero_grad()
            loss.backward()
            opt.step()
        adapter.eval()
        for p in adapter.parameters():
            p.requires_grad_(False)
        log(f"# adapter {name}: pretraining loss {float(loss.detach()):.4f}")
    return registry


def train_stage2(
    dataset,
    idn_ckpt,
    cfg: Config,
    ckpt_path,
    enable_tfga=True,
    enable_igm=True,
    log=print,
):
    """Freeze the base network and train the modulation modules end to end.

    Saves idn.* (byte-identical to the input checkpoint), tfga.*, igm.*,
    and the frozen task.* tensors.
    """
    if not (enable_tfga or enable_igm):
        raise ConfigError("stage 2 needs at least one of TFGA/IGM enabled")
    samples = resolve_dataset(dataset)
    torch.manual_seed(cfg.train_seed)
    rng = torch.Generator().manual_seed(cfg.train_seed + 1)

    idn_tensors = fileio.load_checkpoint(idn_ckpt)
    bundle = ModelBundle(cfg, stage2=True)
    _load_namespaced(bundle.idn, idn_tensors, "idn")
    bundle.idn.eval()
    for p in bundle.idn.parameters():
        p.requires_grad_(False)
    idn_hash_before = tensor_fingerprint(_namespaced(bundle.idn, "idn"))

    pretrain_adapters(samples, bundle.registry, seed=cfg.train_seed + 2, log=log)
    adapters = list(bundle.registry.values())
    if not adapters:
        raise ConfigError("adapter registry is empty")

    params = []
    if enable_tfga:
        params += list(bundle.tfga.parameters())
    if enable_igm:
        params += list(bundle.igm.parameters())
    opt = torch.optim.Adam(params, lr=cfg.train_lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.train_epochs, eta_min=0.0)

    log(TRAIN_LOG_HEADER)
    history = []
    batch_counter = 0
    for epoch in range(1, cfg.train_epochs + 1):
        agg = {"l1": 0.0, "ratio": 0.0, "mcr": 0.0, "down": 0.0, "total": 0.0}
        ordered = 0
        seen = 0
        n_batches = 0
        for idx in _batches(len(samples), cfg.train_batch, rng):
            adapter = adapters[batch_counter % len(adapters)]  # alternate tasks
            batch_counter += 1
            hazy, clear = _stack(samples, idx)
            gt = torch.cat([adapter.ground_truth(samples[i]) for i in idx])
            f_t = bundle.text_encoder.encode(adapter.instruction)

            with torch.no_grad():
                feats = bundle.idn.encode(hazy)
                initial = bundle.idn.decode(feats)
                feedback = adapter.feedback(initial)
                enc_exit, prev = bundle.idn.deep_context(feats)

            injection = None
            if enable_tfga:
                injection = bundle.tfga(
                    initial, feedback.kind, feedback.payload, enc_exit, prev
                )
            mod_enc = mod_dec = None
            if enable_igm:
                mod_enc, mod_dec = bundle.igm.modulators(f_t)
            modulated = bundle.idn.decode(
                feats, ModulationBundle(injection, mod_enc, mod_dec)
            )

            task_loss = adapter.loss(adapter.run(modulated), gt)
            total, breakdown = losses.total_loss(
                modulated,
                initial,
                clear,
                hazy,
                bundle.extractor,
                task_loss,
                lam=cfg.loss_lambda,
                beta1=cfg.loss_beta1,
                beta2=cfg.loss_beta2,
                gamma=cfg.loss_gamma,
            )
            _check_finite(total, f"stage-2 epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()

            with torch.no_grad():
                per_w = (modulated - clear).abs().mean(dim=(1, 2, 3))
                per_p = (initial - clear).abs().mean(dim=(1, 2, 3))
                per_h = (hazy - clear).abs().mean(dim=(1, 2, 3))
                ordered += int(((per_w < per_p) & (per_p < per_h)).sum())
                seen += len(idx)
            agg["l1"] += breakdown.l1
            agg["ratio"] += breakdown.ratio
            agg["mcr"] += breakdown.mcr
            agg["down"] += breakdown.down
            agg["total"] += breakdown.total
            n_batches += 1
        sched.step()
        frac = ordered / seen
        history.append({k: v / n_batches for k, v in agg.items()} | {"ordering": frac})
        log(
            f"{epoch}, train, {agg['l1'] / n_batches:.6f}, {agg['ratio'] / n_batches:.6f}, "
            f"{agg['mcr'] / n_batches:.6f}, {agg['down'] / n_batches:.6f}, "
            f"{agg['total'] / n_batches:.6f}, {frac:.3f}"
        )

    idn_hash_after = tensor_fingerprint(_namespaced(bundle.idn, "idn"))
    if idn_hash_before != idn_hash_after:
        raise NumericError("frozen base-network tensors changed during stage 2")

    out = dict(idn_tensors)  # byte-identical passthrough of the frozen net
    out.update(_namespaced(bundle.tfga, "tfga"))
    out.update(_namespaced(bundle.igm, "igm"))
    for name, adapter in bundle.registry.items():
        out.update(_namespaced(adapter, f"task.{name}"))
    fileio.save_checkpoint(ckpt_path, out)
    bundle.eval()
    return history


# ---------------------------------------------------------------------------
# inference

def route_instruction(text: str, registry) -> object:
    """Keyword-match the instruction against adapter vocabularies."""
    if not text or not text.strip():
        raise InputError("instruction must be a non-empty string")
    words = {w.strip(".,!?;:\"'()") for w in text.casefold().split()}
    for adapter in registry.values():
        if adapter.keywords & words:
            return adapter
    raise RoutingError(
        f"no task matches {text!r}; known tasks: {', '.join(registry)}"
    )


def closed_loop_infer(hazy, instruction, bundle: ModelBundle, k_max=1, sample=None):
    """Run the feedback loop on one image.

    Returns (modulated image, task output, per-iteration trace).  The base
    network's encoder activations are computed once and reused; its
    parameters never change.
    """
    if k_max < 1:
        raise InputError(f"k_max must be >= 1, got {k_max}")
    adapter = route_instruction(instruction, bundle.registry)
    single = hazy.dim() == 3
    batch = hazy.unsqueeze(0) if single else hazy
    with torch.no_grad():
        f_t = bundle.text_encoder.encode(instruction)
        feats = bundle.idn.encode(batch)
        current = bundle.idn.decode(feats)
        initial = current
        trace = []
        for k in range(1, k_max + 1):
            feedback = adapter.feedback(current)
            injection = None
            if bundle.tfga is not None:
                enc_exit, prev = bundle.idn.deep_context(feats)
                injection = bundle.tfga(
                    current, feedback.kind, feedback.payload, enc_exit, prev
                )
            mod_enc = mod_dec = None
            if bundle.igm is not None:
                mod_enc, mod_dec = bundle.igm.modulators(f_t)
            current = bundle.idn.decode(
                feats, ModulationBundle(injection, mod_enc, mod_dec)
            )
            entry = {"iteration": k, "task": adapter.name}
            if sample is not None:
                gt = adapter.ground_truth(sample)
                entry["task_loss"] = float(adapter.loss(adapter.run(current), gt))
                entry["psnr"] = quality.psnr(current[0], sample.clear)
                entry["ssim"] = quality.ssim(current[0], sample.clear)
            trace.append(entry)
        task_output = adapter.run(current)
    if single:
        return current[0], task_output, trace
    return current, task_output, trace


def open_loop_infer(hazy, bundle: ModelBundle):
    single = hazy.dim() == 3
    batch = hazy.unsqueeze(0) if single else hazy
    with torch.no_grad():
        out = bundle.idn(batch)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# evaluation

def _task_metrics(bundle, adapter, image, sample):
    with torch.no_grad():
        pred = adapter.run(image.unsqueeze(0))
    if adapter.name == "seg":
        return adapter.metric(pred, sample.seg_labels.unsqueeze(0))
    if adapter.name == "depth":
        return adapter.metric(pred, sample.depth.unsqueeze(0))
    return adapter.metric(pred, sample.boxes)


def evaluate(dataset, bundle: ModelBundle, out_csv, k_max=1):
    """Per-image quality and task metrics; closed-loop columns only when the
    bundle carries trained stage-2 modules.  Appends a mean row."""
    samples = resolve_dataset(dataset)
    closed = bundle.has_stage2
    columns = ["image_id", "psnr", "ssim", "perceptual", "seg_miou", "depth_absrel", "det_ap50"]
    if closed:
        columns += [
            "psnr_closed",
            "ssim_closed",
            "perceptual_closed",
            "seg_miou_closed",
            "depth_absrel_closed",
            "det_ap50_closed",
        ]
    rows = []
    for sample in samples:
        open_img = open_loop_infer(sample.hazy, bundle)
        row = {
            "image_id": sample.image_id,
            "psnr": quality.psnr(open_img, sample.clear),
            "ssim": quality.ssim(open_img, sample.clear),
            "perceptual": quality.perceptual_distance(open_img, sample.clear, bundle.extractor),
            "seg_miou": _task_metrics(bundle, bundle.registry["seg"], open_img, sample)["miou"],
            "depth_absrel": _task_metrics(bundle, bundle.registry["depth"], open_img, sample)["absrel"],
            "det_ap50": _task_metrics(bundle, bundle.registry["det"], open_img, sample)["ap50"],
        }
        if closed:
            closed_imgs = {}
            for name, adapter in bundle.registry.items():
                img, _, _ = closed_loop_infer(
                    sample.hazy, adapter.instruction, bundle, k_max=k_max, sample=None
                )
                closed_imgs[name] = img
            # image-quality closed columns use the first registry task's run
            first = closed_imgs[next(iter(bundle.registry))]
            row.update(
                {
                    "psnr_closed": quality.psnr(first, sample.clear),
                    "ssim_closed": quality.ssim(first, sample.clear),
                    "perceptual_closed": quality.perceptual_distance(
                        first, sample.clear, bundle.extractor
                    ),
                    "seg_miou_closed": _task_metrics(
                        bundle, bundle.registry["seg"], closed_imgs["seg"], sample
                    )["miou"],
                    "depth_absrel_closed": _task_metrics(
                        bundle, bundle.registry["depth"], closed_imgs["depth"], sample
                    )["absrel"],
                    "det_ap50_closed": _task_metrics(
                        bundle, bundle.registry["det"], closed_imgs["det"], sample
                    )["ap50"],
                }
            )
        rows.append(row)

    mean_row = {"image_id": "mean"}
    for col in columns[1:]:
        mean_row[col] = sum(r[col] for r in rows) / len(rows)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in rows + [mean_row]:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows, mean_row
