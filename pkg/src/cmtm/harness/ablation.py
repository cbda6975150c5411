"""Ablation grids over stream toggles and masking ratio.

Every cell trains on the same corpus with the same seed and differs from the
base configuration only in the ablated knobs; it is then scored on a
held-out corpus. A failing cell is recorded and the grid carries on.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .config import RunConfig
from .experiment import evaluate, heldout_corpus, train, train_corpus

logger = logging.getLogger(__name__)

ROMAN = ("I", "II", "III", "IV", "V", "VI")
# (appearance stream, motion stream, masking) per row
STREAM_VARIANTS = (
    (True, False, False),
    (True, False, True),
    (False, True, False),
    (False, True, True),
    (True, True, False),
    (True, True, True),
)
MASK_RATIOS = (0.0, 0.2, 0.4, 0.6, 0.8)
DEFAULT_MASK_RATIO = 0.4


@dataclass
class Cell:
    version: str
    config: RunConfig
    knobs: Dict[str, object]
    j: Optional[float] = None
    f: Optional[float] = None
    g: Optional[float] = None
    status: str = "pending"
    final_loss: Optional[float] = None

    def row(self) -> Dict[str, object]:
        out = {"version": self.version, **self.knobs}
        for key in ("j", "f", "g", "final_loss"):
            value = getattr(self, key)
            out[key.upper() if len(key) == 1 else key] = "" if value is None else f"{value:.6f}"
        out["status"] = self.status
        return out


def stream_cells(base: RunConfig) -> List[Cell]:
    ratio = base.mask_ratio if base.mask_ratio > 0 else DEFAULT_MASK_RATIO
    cells = []
    for version, (app, mo, mask) in zip(ROMAN, STREAM_VARIANTS):
        cfg = base.replace(apply_to_app=app, apply_to_mo=mo, mask_ratio=ratio if mask else 0.0)
        knobs = {"app": int(app), "mo": int(mo), "mask": int(mask)}
        cells.append(Cell(version, cfg, knobs))
    return cells


def ratio_cells(base: RunConfig) -> List[Cell]:
    return [
        Cell(version, base.replace(apply_to_app=True, apply_to_mo=True, mask_ratio=ratio), {"ratio": ratio})
        for version, ratio in zip(ROMAN, MASK_RATIOS)
    ]


def run_cells(cells: List[Cell], train_data=None, eval_data=None) -> List[Cell]:
    for cell in cells:
        try:
            ckpt, log = train(cell.config, train_data)
            report = evaluate(ckpt, eval_data, cell.config.tol_px)
            cell.j, cell.f, cell.g = report.j_mean, report.f_mean, report.g_mean
            cell.final_loss = log[-1]["loss"] if log else None
            cell.status = "ok"
        except Exception as exc:  # a failed cell must not stop the grid
            logger.warning("cell %s failed: %s", cell.version, exc)
            cell.status = f"failed: {type(exc).__name__}: {exc}"
        logger.info("cell %s %s J=%s", cell.version, cell.knobs, cell.j)
    return cells


def run_ablation(base: RunConfig, tables=(3, 4)) -> Dict[int, List[Cell]]:
    """Train and score every cell of the requested tables."""
    train_data = train_corpus(base)
    eval_data = heldout_corpus(base) if base.eval_sequences > 0 else train_data
    builders = {3: stream_cells, 4: ratio_cells}
    return {t: run_cells(builders[t](base), train_data, eval_data) for t in tables}


def write_csv(cells: List[Cell], path) -> Path:
    path = Path(path)
    rows = [c.row() for c in cells]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path
