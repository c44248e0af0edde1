"""Fine-tune one RGB-pretrained source under each input-layer adaptation scheme.

    python scripts/run_adapt_compare.py --seeds 0,1,2 --out runs/adapt
"""
import argparse
import statistics
from dataclasses import dataclass

from _common import load_base, seeds

from olaf.adapt import SCHEMES
from olaf.harness.experiments import cmd_adapt_compare


@dataclass
class CompareSettings:
    config: str | None = None
    out: str = "runs/adapt"
    seeds: tuple[int, ...] = (0, 1, 2)
    n_warm: int = 5
    pretrain_epochs: int | None = None
    epochs: int | None = None


def main(s: CompareSettings) -> None:
    rows = cmd_adapt_compare(load_base(s.config, s.epochs), s.out, seeds=s.seeds, n_warm=s.n_warm,
                             pretrain_epochs=s.pretrain_epochs)
    print(f"{'scheme':16s} {'median mIoU':>12s} {'divergences':>12s} {'1st-epoch loss (first/last step)':>34s}")
    for sc in SCHEMES:
        mine = [r for r in rows if r["scheme"] == sc]
        vals = [r["mIoU"] for r in mine if r["mIoU"] is not None]
        med = statistics.median(vals) if vals else float("nan")
        div = sum(r["divergence_count"] for r in mine)
        fl = mine[0]["first_epoch_losses"]
        print(f"{sc:16s} {med:12.2f} {div:12d} {fl[0]:17.3f} / {fl[-1]:.3f}")
    print(f"\nwritten: {s.out}/adapt_compare.csv, {s.out}/fairness_manifest.json")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default=CompareSettings.out)
    ap.add_argument("--seeds", type=seeds, default=CompareSettings.seeds)
    ap.add_argument("--n-warm", dest="n_warm", type=int, default=CompareSettings.n_warm)
    ap.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    ap.add_argument("--epochs", type=int)
    main(CompareSettings(**vars(ap.parse_args())))
