"""Training and evaluation entry points built on :class:`CMTMSegmenter`."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..checkpoint import Checkpoint
from ..errors import LoadError
from ..estimator import CMTMSegmenter, pack_inputs
from ..metrics import MetricReport, evaluate_masks
from ..modulation import CmtmConfig, Mode
from ..params import load_state, state_dict
from ..segnet import SegModel, SegNetConfig, model_forward
from ..synthvid import load_corpus, make_corpus, stack_corpus
from .config import RunConfig

logger = logging.getLogger(__name__)

ARCH_KEY = "meta.arch"
_ARCH_FIELDS = ("channels", "blocks", "heads", "stage1", "stage2", "decoder_channels")


def train_corpus(cfg: RunConfig):
    return make_corpus(cfg.train_sequences, cfg.data_seed, cfg.scene_config())


def heldout_corpus(cfg: RunConfig):
    # distinct stream of scenes from the same data seed
    return make_corpus(cfg.eval_sequences, cfg.data_seed + 1_000_003, cfg.scene_config())


def model_to_checkpoint(model: SegModel, config: SegNetConfig) -> Checkpoint:
    arch = np.array([config.cmtm.channels, config.cmtm.blocks, config.cmtm.heads,
                     config.stage1, config.stage2, config.decoder_channels], dtype=np.float32)
    tensors = {ARCH_KEY: arch}
    tensors.update({k: np.array(v, dtype=np.float32) for k, v in state_dict(model).items()})
    return Checkpoint(tensors)


def checkpoint_to_model(ckpt: Checkpoint) -> Tuple[SegModel, SegNetConfig]:
    """Rebuild the network described by ``ckpt``; raises :class:`LoadError` on mismatch."""
    if ARCH_KEY not in ckpt.tensors:
        raise LoadError(f"checkpoint has no {ARCH_KEY!r} tensor", [ARCH_KEY])
    arch = ckpt.tensors[ARCH_KEY].ravel()
    if arch.size != len(_ARCH_FIELDS) or np.any(arch != np.round(arch)) or np.any(arch < 1):
        raise LoadError(f"malformed {ARCH_KEY!r}: {arch.tolist()}", [ARCH_KEY])
    dims = dict(zip(_ARCH_FIELDS, (int(a) for a in arch)))
    try:
        cmtm = CmtmConfig(channels=dims["channels"], blocks=dims["blocks"], heads=dims["heads"])
        config = SegNetConfig(dims["stage1"], dims["stage2"], dims["decoder_channels"], cmtm)
    except ValueError as exc:
        raise LoadError(f"{ARCH_KEY!r} describes an invalid network: {exc}", [ARCH_KEY]) from exc
    template = SegModel.init(config, seed=0)
    expected = {k: v.shape for k, v in state_dict(template).items()}
    found = {k: v.shape for k, v in ckpt.tensors.items() if k != ARCH_KEY}
    bad = sorted(
        [k for k in expected if k not in found]
        + [k for k in found if k not in expected]
        + [k for k in expected if k in found and found[k] != expected[k]]
    )
    if bad:
        raise LoadError("checkpoint does not fit its architecture: " + ", ".join(bad), bad)
    return load_state(template, ckpt.tensors), config


def train(cfg: RunConfig, corpus=None) -> Tuple[Checkpoint, List[dict]]:
    """Fit a fresh network; returns the checkpoint and one log record per step."""
    corpus = train_corpus(cfg) if corpus is None else corpus
    frames, flows, masks = stack_corpus(corpus)
    log: List[dict] = []
    est = CMTMSegmenter(**cfg.estimator_params())
    est.fit(pack_inputs(frames, flows), masks, callback=lambda s, l: log.append({"step": s, "loss": l}))
    return model_to_checkpoint(est.model_, est.config_), log


def predict_logits(model, config, frames, flows, rng=None, batch_size=16) -> np.ndarray:
    out = []
    for start in range(0, len(frames), batch_size):
        logits = model_forward(frames[start:start + batch_size], flows[start:start + batch_size],
                               model, config, Mode.EVAL, rng)
        out.append(logits.data)
    return np.concatenate(out, axis=0)


def evaluate(ckpt: Checkpoint, data, tol_px: int = 1, rng: Optional[np.random.Generator] = None) -> MetricReport:
    """Eval-mode metrics over every frame of ``data`` (a corpus or a corpus directory).

    ``rng`` is forwarded to the network only so callers can confirm it is never used.
    """
    model, config = checkpoint_to_model(ckpt)
    corpus = load_corpus(data) if isinstance(data, (str, Path)) else data
    frames, flows, masks = stack_corpus(corpus)
    preds = predict_logits(model, config, frames, flows, rng) > 0
    return evaluate_masks(preds, masks, tol_px)


def write_log(log: List[dict], path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def write_report(report: MetricReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.as_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path
