"""Shared helpers for the experiment scripts."""
import logging
from pathlib import Path

from olaf.harness import RunConfig

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"


def load_base(path: str | None, epochs: int | None = None) -> RunConfig:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = RunConfig.load(path or DEFAULT_CONFIG)
    return cfg.replace(epochs=epochs) if epochs else cfg


def seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(","))
