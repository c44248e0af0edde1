"""Train and evaluate a single RunConfig."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from ..adapt import (
    AdaptedModel,
    InputAdapter,
    StagedPlan,
    WarmupSchedule,
    adapt_conv,
    state_checksum,
    warmup_multiplier,
)
from ..channelizer import assemble_input, derive_foreground, estimate_noise, filter_edges, provide_masks
from ..data import DataError, PartTaxonomy, RasterDataset, SceneSpec, generate
from ..metrics import Evaluator, MetricReport, write_report_json
from ..model import build_model, load_checkpoint, predict, save_checkpoint, train_step
from .config import ConfigError, RunConfig

log = logging.getLogger(__name__)


class Diverged(RuntimeError):
    pass


@dataclass
class Split:
    x: torch.Tensor
    y: torch.Tensor
    gts: list[np.ndarray]
    noise: dict = field(default_factory=dict)


def load_splits(cfg: RunConfig) -> tuple[list, list, PartTaxonomy]:
    d = cfg.data
    if d.source == "synthetic":
        spec = SceneSpec(size=d.size, seed=d.seed)
        train, tax, _ = generate(spec, d.n_train)
        val, _, _ = generate(spec, d.n_val, offset=d.n_train)
        return train, val, tax
    root = Path(d.path)
    train = RasterDataset(root / "train", root / "taxonomy.yaml")
    val = RasterDataset(root / "val", root / "taxonomy.yaml")
    return list(train), list(val), train.taxonomy


def mask_seed(cfg: RunConfig, split: str, index: int, epoch: int = 0) -> int:
    # noise depends on the data seed only, so training seeds share the same degraded masks
    return (cfg.data.seed * 1_000_003 + index) * 2 + (split == "val") + epoch * 2**40


def build_split(samples, cfg: RunConfig, split: str, epoch: int = 0) -> Split:
    provider = cfg.channels.mask_provider()
    xs, ys, fg_noise, edge_noise = [], [], [], []
    for i, s in enumerate(samples):
        fg = edge = None
        if cfg.channels.k:
            fg, edge = provide_masks(s, provider, mask_seed(cfg, split, i, epoch))
            ref_fg = derive_foreground(s.objects)
            fg_noise.append(estimate_noise(fg, ref_fg))
            edge_noise.append(estimate_noise(edge, filter_edges(s.gt_edges, ref_fg)))
        stack = assemble_input(s.rgb, fg if cfg.channels.fg else None, edge if cfg.channels.edge else None)
        xs.append(stack.to_chw())
        ys.append(s.parts)
    noise = {}
    if fg_noise:
        noise = {"fg": float(np.mean(fg_noise)), "edge": float(np.mean(edge_noise))}
    y = np.stack(ys)
    return Split(torch.from_numpy(np.stack(xs)), torch.from_numpy(y.astype(np.int64)), list(y), noise)


def set_determinism(cfg: RunConfig) -> None:
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % 2**32)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)


def _load_into(model, state: dict) -> list[str]:
    """Load an LDF-free source into ``model``; returns the keys that were widened.

    Enabling LDF widens the layer that consumes its output. Those kernels keep the
    source slices and get zero slices for the LDF features, so the network's output
    is unchanged until training moves them.
    """
    own = model.state_dict()
    state = dict(state)
    grown = []
    for k, v in state.items():
        if k in own and own[k].shape != v.shape:
            t = own[k]
            if t.ndim != v.ndim or t.ndim < 2 or t.shape[0] != v.shape[0] or t.shape[2:] != v.shape[2:] \
                    or t.shape[1] < v.shape[1]:
                raise ConfigError(f"checkpoint tensor {k} has shape {tuple(v.shape)}, model needs {tuple(t.shape)}")
            wide = torch.zeros_like(t)
            wide[:, :v.shape[1]] = v
            state[k] = wide
            grown.append(k)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected:
        raise ConfigError(f"checkpoint keys not present in the model: {unexpected[:5]}")
    stray = [k for k in missing if "ldf" not in k]
    if stray:
        raise ConfigError(f"model keys missing from checkpoint: {stray[:5]}")
    return grown


def build_run_model(cfg: RunConfig, num_classes: int):
    """Model for ``cfg``, adapting a pretrained RGB checkpoint when one is configured."""
    m = cfg.model
    a = cfg.adapt
    if not a.init_checkpoint:
        return build_model(m.arch, cfg.in_channels, num_classes, m.ldf, tuple(m.widths)), None

    source, manifest = load_checkpoint(a.init_checkpoint)
    if manifest["K"] != num_classes:
        raise ConfigError(f"checkpoint has K={manifest['K']}, dataset has K={num_classes}")
    src_in = manifest["in_channels"]
    model = build_model(m.arch, src_in, num_classes, m.ldf, tuple(m.widths))
    grown = _load_into(model, source.state_dict())
    k_new = cfg.in_channels - src_in
    provenance = {"scheme": a.scheme, "seed": cfg.seed, "k_new": k_new,
                  "source_checksum": state_checksum(source.state_dict()),
                  "source": str(a.init_checkpoint), "widened": grown}
    if k_new == 0:
        return model, provenance
    if a.scheme == "none":
        raise ConfigError(f"checkpoint takes {src_in} channels, config needs {cfg.in_channels}; "
                          "set adapt.scheme")
    if a.scheme == "adapt-n-freeze":
        torch.manual_seed(cfg.seed)
        return AdaptedModel(InputAdapter(cfg.in_channels, a.adapter_width), model), provenance
    model.set_input_conv(adapt_conv(model.input_conv(), a.scheme, k_new, seed=cfg.seed))
    return model, provenance


def input_weight_shape(model) -> list[int]:
    if isinstance(model, AdaptedModel):
        return list(model.adapter.conv.weight.shape)
    return list(model.input_conv().weight.shape)


def evaluate(model, split: Split, tax: PartTaxonomy, batch_size: int = 25) -> MetricReport:
    ev = Evaluator(tax)
    preds = []
    for i in range(0, len(split.x), batch_size):
        preds.append(predict(model, split.x[i:i + batch_size]).numpy())
    for p, g in zip(np.concatenate(preds), split.gts):
        ev.add(p, g)
    return ev.report()


def _set_warmup_freeze(model, frozen: bool) -> None:
    keep = {id(p) for p in model.input_conv().parameters()}
    for name, p in model.named_parameters():
        p.requires_grad_(not frozen or id(p) in keep or "ldf" in name)


def _clean(v: float):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v


def train(cfg: RunConfig, write: bool = True) -> dict:
    """Train per ``cfg``; returns the run report (also written to ``output_dir``)."""
    cfg.validate()
    t0 = time.time()
    set_determinism(cfg)
    train_samples, val_samples, tax = load_splits(cfg)
    tr = build_split(train_samples, cfg, "train")
    va = build_split(val_samples, cfg, "val")

    torch.manual_seed(cfg.seed)
    model, provenance = build_run_model(cfg, tax.num_classes)
    o = cfg.optim
    params = list(model.parameters())
    if o.name == "adam":
        opt = torch.optim.Adam(params, lr=o.lr, weight_decay=o.weight_decay)
    else:
        opt = torch.optim.SGD(params, lr=o.lr, momentum=0.9, weight_decay=o.weight_decay)
    sched = WarmupSchedule(cfg.adapt.n_warm, o.lr, cfg.adapt.warmup_mode)
    plan = StagedPlan(model, max(cfg.adapt.n_warm, 1)) if isinstance(model, AdaptedModel) else None
    weights = torch.tensor(o.class_weights, dtype=torch.float32) if o.class_weights else None

    g = torch.Generator().manual_seed(cfg.seed)
    epoch_losses, first_epoch_steps, divergence, val_miou, stages = [], [], [], [], []
    best = (-1.0, -1, None)
    n = len(tr.x)
    resample = (cfg.channels.resample_noise and cfg.channels.provider == "synthetic-degraded"
                and cfg.channels.noise_level > 0 and cfg.channels.k > 0)
    for epoch in range(cfg.epochs):
        if resample and epoch > 0:
            tr = build_split(train_samples, cfg, "train", epoch)
        if plan is not None:
            stages.append(plan.apply(epoch))
        elif sched.mode == "freeze-backbone" and sched.n_warm > 0:
            _set_warmup_freeze(model, epoch < sched.n_warm)
        mult = warmup_multiplier(epoch, sched)
        order = torch.randperm(n, generator=g)
        losses = []
        for i in range(0, n, o.batch_size):
            idx = order[i:i + o.batch_size]
            losses.append(train_step(model, opt, tr.x[idx], tr.y[idx], o.lr, mult, weights))
        if epoch == 0:
            first_epoch_steps = losses
        finite = all(math.isfinite(v) for v in losses)
        epoch_losses.append(float(np.mean(losses)) if finite else None)
        if not finite:
            divergence.append(epoch)
            log.warning("non-finite loss in epoch %d", epoch)
            if cfg.abort_on_divergence:
                break
        report = evaluate(model, va, tax)
        val_miou.append(_clean(report.miou))
        log.info("epoch %d loss %.4f val mIoU %.4f", epoch, epoch_losses[-1] or float("nan"), report.miou)
        score = report.miou if math.isfinite(report.miou) else -1.0
        if score > best[0]:
            best = (score, epoch, copy.deepcopy(model.state_dict()))

    if best[2] is not None:
        model.load_state_dict(best[2])
    final = evaluate(model, va, tax)
    completed = not (divergence and cfg.abort_on_divergence)
    out = {
        "name": cfg.name,
        "config_checksum": cfg.checksum(),
        "code_version": __version__,
        "config": cfg.to_dict(),
        "epoch_losses": epoch_losses,
        "first_epoch_losses": first_epoch_steps,
        "val_miou": val_miou,
        "divergence_epochs": divergence,
        "diverged": bool(divergence),
        "completed": completed,
        "best_epoch": best[1],
        "metrics": {k: _clean(v) for k, v in final.headline().items()} if completed else None,
        "mask_noise": {"train": tr.noise, "val": va.noise},
        "input_weight_shape": input_weight_shape(model),
        "stages": stages,
        "provenance": provenance,
        "wall_time": time.time() - t0,
    }
    if write:
        write_run(cfg, model, final, out)
    return out


def write_run(cfg: RunConfig, model, final: MetricReport, report: dict) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    prov = dict(report.get("provenance") or {}, config_checksum=report["config_checksum"])
    save_checkpoint(out / "checkpoint", model, prov)
    final.write_per_class_csv(out / "per_class.csv", cfg.name)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    write_report_json(out / "metrics.json", final, variant=cfg.data.source, scheme=cfg.adapt.scheme)


def evaluate_checkpoint(checkpoint: str | Path, cfg: RunConfig, output_dir: str | Path | None = None) -> dict:
    """Evaluation-only pass over the validation split of ``cfg``."""
    cfg.validate()
    model, manifest = load_checkpoint(checkpoint)
    if manifest["in_channels"] != cfg.in_channels:
        raise ConfigError(f"checkpoint expects {manifest['in_channels']} input channels, "
                          f"config provides {cfg.in_channels}")
    _, val_samples, tax = load_splits(cfg)
    if manifest["K"] != tax.num_classes:
        raise DataError(f"checkpoint has K={manifest['K']}, dataset has K={tax.num_classes}")
    va = build_split(val_samples, cfg, "val")
    final = evaluate(model, va, tax)
    out = {
        "config_checksum": cfg.checksum(),
        "code_version": __version__,
        "checkpoint": str(checkpoint),
        "metrics": {k: _clean(v) for k, v in final.headline().items()},
        "mask_noise": {"val": va.noise},
    }
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        final.write_per_class_csv(output_dir / "per_class.csv", cfg.name)
        (output_dir / "eval_report.json").write_text(json.dumps(out, indent=2))
    return out


def load_or_train(cfg: RunConfig) -> dict:
    """Reuse ``output_dir/report.json`` when it was produced by an identical config."""
    path = Path(cfg.output_dir) / "report.json"
    if path.exists():
        report = json.loads(path.read_text())
        if report.get("config_checksum") == cfg.checksum() and report.get("completed"):
            log.info("reusing %s", path)
            return report
    return train(cfg)
