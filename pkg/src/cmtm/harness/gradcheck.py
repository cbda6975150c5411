"""Float64 central-difference verification of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from .. import tensor as T
from ..errors import ConfigError
from ..modulation import CmtmParams, Mode, cmtm_forward
from ..params import clone, named_tensors
from ..segnet import SegModel, model_forward, segmentation_loss
from .config import RunConfig

STEP = 1e-4
NETWORK_TOL = 1e-3
OP_TOL = 1e-4
MAX_SIDE = 8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - n| / max(|a|, |n|)`` in the 2-norm; 0 when both are below ``floor``."""
    a, n = np.ravel(analytic).astype(np.float64), np.ravel(numeric).astype(np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def central_difference(f: Callable[[], float], x: np.ndarray, step: float = STEP,
                       indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place, then restored).

    Only flat ``indices`` are probed when given; other entries are left 0.
    """
    grad = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(x.size) if indices is None else indices:
        saved = flat[i]
        flat[i] = saved + step
        fp = f()
        flat[i] = saved - step
        fm = f()
        flat[i] = saved
        grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "cmtm":
        rest = parts[1:]
    elif parts[0] == "module":
        rest = parts[1:]
    else:
        return parts[0]
    prefix = parts[0]
    if rest[0] == "blocks":
        leaf = rest[-1]
        if leaf in ("wq", "wk", "wv", "wo"):
            return f"{prefix}.projection"
        if leaf.startswith("ln"):
            return f"{prefix}.norm"
        return f"{prefix}.ffn"
    if rest[0].startswith("mask_token"):
        return f"{prefix}.mask_token"
    return f"{prefix}.modality_embedding"


@dataclass
class GradcheckReport:
    groups: Dict[str, float]
    tolerance: float
    entries_checked: int
    per_tensor: Dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> List[str]:
        return [g for g, err in self.groups.items() if not err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> List[str]:
        out = [f"{'PASS' if err < self.tolerance else 'FAIL'} {g} max_rel_err={err:.3e}"
               for g, err in self.groups.items()]
        out.append(f"{'PASS' if self.passed else 'FAIL'} overall tol={self.tolerance:g} "
                   f"entries={self.entries_checked}")
        return out


def _pick(size: int, max_entries: Optional[int], rng: np.random.Generator):
    if max_entries is None or size <= max_entries:
        return range(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def check_tensors(loss_fn: Callable[[], T.Tensor], named, max_entries=None, seed=0, step=STEP):
    """Compare backprop against central differences for each named tensor."""
    named = list(named)
    loss = loss_fn()
    T.backward(loss)
    analytic = {name: t.grad.copy() for name, t in named}
    rng = np.random.default_rng(seed)
    errors, count = {}, 0
    for name, t in named:
        idx = list(_pick(t.size, max_entries, rng))
        numeric = central_difference(lambda: float(loss_fn().item()), t.data, step, idx)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric.reshape(-1)[idx])
        count += len(idx)
    return errors, count


def gradcheck(cfg: RunConfig, max_entries: Optional[int] = None, tolerance: float = NETWORK_TOL) -> GradcheckReport:
    """Check every parameter of the full network and of a standalone token-modulation module.

    The network sees random ``cfg.height x cfg.width`` inputs (at most 8x8);
    the module sees 4x4 feature maps so that train-mode masking actually
    replaces tokens. Mask plans are replayed from a fixed seed so each loss
    evaluation is the same function.
    """
    if cfg.height > MAX_SIDE or cfg.width > MAX_SIDE:
        raise ConfigError(f"gradcheck needs inputs of at most {MAX_SIDE}x{MAX_SIDE}, got {cfg.height}x{cfg.width}")
    netcfg = cfg.segnet_config()
    model = clone(SegModel.init(netcfg, seed=cfg.seed), dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    image = rng.random((cfg.height, cfg.width, 3))
    flow = rng.random((cfg.height, cfg.width, 3))
    gt = rng.random((cfg.height, cfg.width)) > 0.5

    def net_loss():
        logits = model_forward(image, flow, model, netcfg, Mode.TRAIN, np.random.default_rng(cfg.seed + 17))
        return segmentation_loss(logits, gt)

    per_tensor, n_net = check_tensors(net_loss, named_tensors(model), max_entries, cfg.seed)

    ratio = cfg.mask_ratio if cfg.mask_ratio > 0 else 0.4
    mcfg = cfg.cmtm_config()
    mcfg.mask_ratio = ratio
    mcfg.apply_to_app = mcfg.apply_to_mo = True
    mparams = clone(CmtmParams.init(mcfg, np.random.default_rng(cfg.seed + 1)), dtype=np.float64)
    f_app = T.Tensor(rng.normal(size=(4, 4, cfg.channels)), requires_grad=True, dtype=np.float64)
    f_mo = T.Tensor(rng.normal(size=(4, 4, cfg.channels)), requires_grad=True, dtype=np.float64)
    w_app, w_mo = rng.normal(size=(4, 4, cfg.channels)), rng.normal(size=(4, 4, cfg.channels))

    def module_loss():
        out = cmtm_forward(f_app, f_mo, mcfg, mparams, Mode.TRAIN, np.random.default_rng(cfg.seed + 23))
        return T.add(T.sum(T.mul(out.app, w_app)), T.sum(T.mul(out.mo, w_mo)))

    named = [(f"module.{n}", t) for n, t in named_tensors(mparams)]
    named += [("module_input.app", f_app), ("module_input.mo", f_mo)]
    mod_errors, n_mod = check_tensors(module_loss, named, max_entries, cfg.seed + 1)
    per_tensor.update(mod_errors)

    groups: Dict[str, float] = {}
    for name, err in per_tensor.items():
        g = "module_input" if name.startswith("module_input") else _group(name)
        groups[g] = max(groups.get(g, 0.0), err)
    return GradcheckReport(groups, tolerance, n_net + n_mod, per_tensor)
