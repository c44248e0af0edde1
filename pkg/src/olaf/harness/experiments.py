"""Experiment grids built on single runs: ablation table, mask-noise sweep, adaptation comparison."""
from __future__ import annotations

import csv
import json
import logging
import statistics
from pathlib import Path

from ..adapt import SCHEMES
from .config import RunConfig, config_diff
from .runner import load_or_train

log = logging.getLogger(__name__)

METRICS = ("mIoU", "mAvg", "sqIoU", "sqAvg", "mIoU_small")

# (row name, LDF, edge map, fg/bg map)
ABLATION_ROWS = (
    ("none", False, False, False),
    ("ldf", True, False, False),
    ("edge", False, True, False),
    ("fg", False, False, True),
    ("edge+fg", False, True, True),
    ("olaf", True, True, True),
)

NOISE_LEVELS = (0.0, 0.05, 0.1, 0.2, 0.3)


def _median(values):
    values = [v for v in values if v is not None]
    return statistics.median(values) if values else None


def _assert_fair(cells: list[RunConfig], varied: set[str]) -> None:
    for c in cells[1:]:
        extra = set(config_diff(cells[0], c)) - varied
        if extra:
            raise AssertionError(f"grid cells differ in non-varied fields: {sorted(extra)}")


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def ablation_config(base: RunConfig, row: str, seed: int, out_dir: Path) -> RunConfig:
    _, ldf, edge, fg = next(r for r in ABLATION_ROWS if r[0] == row)
    return base.replace(**{
        "name": f"ablate-{row}-s{seed}",
        "model.ldf": ldf,
        "channels.edge": edge,
        "channels.fg": fg,
        "seed": seed,
        "output_dir": str(out_dir / row / f"seed{seed}"),
    })


def cmd_ablate(base: RunConfig, out_dir: str | Path, seeds=(0,), rows=None) -> list[dict]:
    """Run the ablation grid; writes ablation_runs.csv (per seed) and ablation.csv (seed medians)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = rows or [r[0] for r in ABLATION_ROWS]
    cells = [ablation_config(base, r, s, out_dir) for r in rows for s in seeds]
    _assert_fair(cells, {"name", "model.ldf", "channels.edge", "channels.fg", "seed", "output_dir"})

    reports = {}
    for cfg in cells:
        log.info("ablation cell %s", cfg.name)
        reports[cfg.name] = load_or_train(cfg)

    with open(out_dir / "ablation_runs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["setting", "seed", *METRICS, "diverged"])
        for r in rows:
            for s in seeds:
                rep = reports[f"ablate-{r}-s{s}"]
                m = rep["metrics"] or {}
                w.writerow([r, s, *(_fmt(m.get(k)) for k in METRICS), rep["diverged"]])

    table = []
    for name, ldf, edge, fg in ABLATION_ROWS:
        if name not in rows:
            continue
        reps = [reports[f"ablate-{name}-s{s}"] for s in seeds]
        row = {"setting": name, "LDF": ldf, "Edge-Map": edge, "Fg/Bg-Map": fg}
        for k in METRICS:
            row[k] = _median([(r["metrics"] or {}).get(k) for r in reps])
        table.append(row)
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["setting", "LDF", "Edge-Map", "Fg/Bg-Map", *METRICS])
        for row in table:
            w.writerow([row["setting"], int(row["LDF"]), int(row["Edge-Map"]), int(row["Fg/Bg-Map"]),
                        *(_fmt(row[k]) for k in METRICS)])
    return table


def noise_config(base: RunConfig, level: float, seed: int, out_dir: Path) -> RunConfig:
    return base.replace(**{
        "name": f"noise-{level:g}-s{seed}",
        "model.ldf": True,
        "channels.fg": True,
        "channels.edge": True,
        "channels.provider": "synthetic-degraded",
        "channels.noise_level": float(level),
        "seed": seed,
        "output_dir": str(out_dir / f"level{level:g}" / f"seed{seed}"),
    })


def cmd_noise_sweep(base: RunConfig, out_dir: str | Path, levels=NOISE_LEVELS, seeds=(0,),
                    plot: bool = True) -> list[dict]:
    """Train/evaluate the full recipe with degraded masks at each noise level."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [noise_config(base, lv, s, out_dir) for lv in levels for s in seeds]
    _assert_fair(cells, {"name", "channels.noise_level", "seed", "output_dir"})
    reports = {c.name: load_or_train(c) for c in cells}

    curve = []
    for lv in levels:
        reps = [reports[f"noise-{lv:g}-s{s}"] for s in seeds]
        noise = [r["mask_noise"]["val"] for r in reps]
        row = {
            "level": lv,
            "measured_fg_noise": noise[0]["fg"],
            "measured_edge_noise": noise[0]["edge"],
        }
        row["measured_noise"] = (row["measured_fg_noise"] + row["measured_edge_noise"]) / 2
        for k in METRICS:
            row[k] = _median([(r["metrics"] or {}).get(k) for r in reps])
        row["mIoU_per_seed"] = [(r["metrics"] or {}).get("mIoU") for r in reps]
        curve.append(row)

    with open(out_dir / "noise_sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["level", "measured_fg_noise", "measured_edge_noise", "measured_noise", *METRICS])
        for row in curve:
            w.writerow([row["level"], f"{row['measured_fg_noise']:.6f}", f"{row['measured_edge_noise']:.6f}",
                        f"{row['measured_noise']:.6f}", *(_fmt(row[k]) for k in METRICS)])
    if plot:
        plot_noise_curve(curve, out_dir / "noise_sweep.png")
    return curve


def plot_noise_curve(curve: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [100 * r["measured_noise"] for r in curve]
    ys = [r["mIoU"] for r in curve]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    for r, x, y in zip(curve, xs, ys):
        ax.annotate(f"{100 * r['level']:g}% req.\n{x:.2f}% meas.", (x, y), textcoords="offset points",
                    xytext=(4, 6), fontsize=7)
    ax.set_xlabel("measured mask noise (%)")
    ax.set_ylabel("mIoU")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def pretrain_config(base: RunConfig, out_dir: Path, epochs: int | None = None) -> RunConfig:
    """RGB-only source model trained on a disjoint synthetic draw, standing in for a pretrained backbone."""
    return base.replace(**{
        "name": "source-rgb",
        "data.seed": base.data.seed + 1000,
        "model.ldf": False,
        "channels.fg": False,
        "channels.edge": False,
        "adapt.scheme": "none",
        "adapt.init_checkpoint": None,
        "adapt.n_warm": 0,
        "epochs": epochs or base.epochs,
        "seed": 0,
        "output_dir": str(out_dir / "source"),
    })


def adapt_config(base: RunConfig, scheme: str, seed: int, source_ckpt: str, out_dir: Path,
                 n_warm: int = 5) -> RunConfig:
    return base.replace(**{
        "name": f"adapt-{scheme}-s{seed}",
        "model.ldf": True,
        "channels.fg": True,
        "channels.edge": True,
        "adapt.scheme": scheme,
        "adapt.init_checkpoint": source_ckpt,
        "adapt.n_warm": n_warm,
        "seed": seed,
        "output_dir": str(out_dir / scheme / f"seed{seed}"),
    })


def cmd_adapt_compare(base: RunConfig, out_dir: str | Path, seeds=(0, 1, 2), schemes=SCHEMES,
                      n_warm: int = 5, pretrain_epochs: int | None = None) -> list[dict]:
    """Fine-tune one pretrained RGB source under every input-layer adaptation scheme."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src_cfg = pretrain_config(base, out_dir, pretrain_epochs)
    src = load_or_train(src_cfg)
    source_ckpt = str(Path(src_cfg.output_dir) / "checkpoint")

    cells = [adapt_config(base, sc, s, source_ckpt, out_dir, n_warm) for sc in schemes for s in seeds]
    _assert_fair(cells, {"name", "adapt.scheme", "seed", "output_dir"})
    rows = []
    for cfg in cells:
        rep = load_or_train(cfg)
        rows.append({
            "scheme": cfg.adapt.scheme,
            "seed": cfg.seed,
            "first_epoch_losses": rep["first_epoch_losses"],
            "epoch_losses": rep["epoch_losses"],
            "divergence_count": len(rep["divergence_epochs"]),
            "mIoU": (rep["metrics"] or {}).get("mIoU"),
            "input_weight_shape": rep["input_weight_shape"],
        })

    with open(out_dir / "adapt_compare.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scheme", "seed", "divergence_count", "mIoU", "input_weight_shape",
                    "first_epoch_loss_start", "first_epoch_loss_end", "first_epoch_losses"])
        for r in rows:
            fl = r["first_epoch_losses"]
            w.writerow([r["scheme"], r["seed"], r["divergence_count"], _fmt(r["mIoU"]),
                        "x".join(map(str, r["input_weight_shape"])), _fmt(fl[0]), _fmt(fl[-1]),
                        json.dumps([round(v, 5) if v == v else None for v in fl])])
    manifest = {
        "seeds": list(seeds),
        "schemes": list(schemes),
        "n_warm": n_warm,
        "source_checkpoint": source_ckpt,
        "source_metrics": src["metrics"],
        "cell_checksums": {c.name: c.checksum() for c in cells},
    }
    (out_dir / "fairness_manifest.json").write_text(json.dumps(manifest, indent=2))
    return rows
