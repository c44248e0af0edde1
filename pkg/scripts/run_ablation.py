"""Ablation grid (LDF / edge map / fg-bg map) on the synthetic desk benchmark.

    python scripts/run_ablation.py --seeds 0,1,2 --out runs/ablation
"""
import argparse
import csv
from dataclasses import dataclass

from _common import load_base, seeds

from olaf.harness.experiments import METRICS, cmd_ablate


@dataclass
class AblationSettings:
    config: str | None = None
    out: str = "runs/ablation"
    seeds: tuple[int, ...] = (0, 1, 2)
    rows: tuple[str, ...] | None = None
    epochs: int | None = None


def main(s: AblationSettings) -> None:
    table = cmd_ablate(load_base(s.config, s.epochs), s.out, seeds=s.seeds, rows=list(s.rows) if s.rows else None)
    print(f"{'setting':10s}" + "".join(f"{m:>12s}" for m in METRICS))
    for row in table:
        print(f"{row['setting']:10s}" + "".join(f"{row[m]:12.2f}" if row[m] is not None else f"{'n/a':>12s}"
                                               for m in METRICS))
    print(f"\nwritten: {s.out}/ablation.csv, {s.out}/ablation_runs.csv")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default=AblationSettings.out)
    ap.add_argument("--seeds", type=seeds, default=AblationSettings.seeds)
    ap.add_argument("--rows", type=lambda t: tuple(t.split(",")))
    ap.add_argument("--epochs", type=int)
    main(AblationSettings(**vars(ap.parse_args())))
