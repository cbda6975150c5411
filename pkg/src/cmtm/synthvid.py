"""Synthetic moving-shape videos with exact optical flow and masks.

A disk or rectangle translates at a constant velocity over a smoothly
textured background that itself translates at another constant velocity.
Because every pixel's motion is known analytically, the flow field is exact:
the shape's velocity on the mask and the background's everywhere else.

Distractor scenes add a static (background-attached) patch painted in the
foreground colour, so colour alone cannot separate object from clutter.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, CorruptFileError

SHAPES = ("disk", "rectangle")


@dataclass
class SceneConfig:
    height: int = 32
    width: int = 32
    shape: str = "disk"
    shape_size: float = 6.0  # radius, or half side for rectangles
    shape_velocity: Tuple[float, float] = (2.0, 0.0)  # (u right, v down) px/frame
    background_velocity: Tuple[float, float] = (0.0, 0.0)
    texture_seed: int = 0
    frames: int = 8
    distractor: bool = False
    flow_max_mag: float = 4.0
    start: Optional[Tuple[float, float]] = None  # (x, y) of the shape centre in frame 0

    def validate(self):
        if self.height < 4 or self.width < 4 or self.frames < 1:
            raise ConfigError(f"degenerate scene {self.height}x{self.width}x{self.frames}")
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.shape_size <= 0:
            raise ConfigError("shape_size must be positive")
        if self.flow_max_mag <= 0:
            raise ConfigError("flow_max_mag must be positive")
        _start_range(self, self.shape_size, self.shape_velocity)


@dataclass
class VideoSample:
    frame: np.ndarray  # (H, W, 3) in [0, 1]
    flow_field: np.ndarray  # (H, W, 2) px/frame, u right, v down
    flow_rgb: np.ndarray  # (H, W, 3)
    gt_mask: np.ndarray  # (H, W) bool
    distractor_mask: np.ndarray  # (H, W) bool, distractor pixels not covered by the shape


def flow_to_rgb(flow_field: np.ndarray, max_mag: float) -> np.ndarray:
    """Encode a 2-channel flow field as 3 channels in [0, 1].

    ``(u / 2m + 0.5, v / 2m + 0.5, |flow| / m)``, each clamped.
    """
    if max_mag <= 0:
        raise ConfigError("max_mag must be positive")
    flow = np.asarray(flow_field, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    rgb = np.stack([u / (2 * max_mag) + 0.5, v / (2 * max_mag) + 0.5, np.hypot(u, v) / max_mag], axis=-1)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def rasterize(shape: str, size: float, center, height: int, width: int) -> np.ndarray:
    """Hard-edged support at integer pixel centres (no anti-aliasing)."""
    ys, xs = np.mgrid[0:height, 0:width]
    cx, cy = center
    if shape == "disk":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= size**2
    return (np.abs(xs - cx) <= size) & (np.abs(ys - cy) <= size)


def _start_range(cfg: SceneConfig, half: float, velocity):
    span = cfg.frames - 1
    ranges = []
    for extent, vel in ((cfg.width, velocity[0]), (cfg.height, velocity[1])):
        travel = vel * span
        lo = half - min(0.0, travel)
        hi = extent - 1 - half - max(0.0, travel)
        if lo > hi:
            raise ConfigError(
                f"shape of half-size {half} moving {velocity} px/frame leaves a {cfg.height}x{cfg.width} frame"
            )
        ranges.append((lo, hi))
    return ranges


def _texture(rng: np.random.Generator, waves: int = 6):
    freq = rng.uniform(0.08, 0.5, size=(waves, 2)) * rng.choice([-1, 1], size=(waves, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(waves, 3))
    amp = rng.uniform(0.02, 0.06, size=(waves, 3))
    base = rng.uniform(0.15, 0.45, size=3)

    def sample(xs, ys):
        out = np.broadcast_to(base, xs.shape + (3,)).copy()
        for k in range(waves):
            arg = freq[k, 0] * xs + freq[k, 1] * ys
            out += amp[k] * np.sin(arg[..., None] + phase[k])
        return out

    return sample


def generate_sequence(cfg: SceneConfig, seed: int) -> List[VideoSample]:
    """Render ``cfg.frames`` samples; deterministic given ``(cfg, seed)``."""
    cfg.validate()
    rng = np.random.default_rng([seed, cfg.texture_seed])
    h, w = cfg.height, cfg.width
    texture = _texture(rng)
    fg_color = rng.uniform(0.7, 1.0, size=3)
    fg_texture = _texture(rng, waves=2)

    if cfg.start is None:
        (xlo, xhi), (ylo, yhi) = _start_range(cfg, cfg.shape_size, cfg.shape_velocity)
        start = (rng.uniform(xlo, xhi), rng.uniform(ylo, yhi))
    else:
        start = tuple(cfg.start)
        _check_inside(cfg, start)

    su, sv = cfg.shape_velocity
    bu, bv = cfg.background_velocity
    distractor_start = _place_distractor(cfg, start, rng) if cfg.distractor else None
    dhalf = _distractor_half(cfg)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    samples = []
    for t in range(cfg.frames):
        center = (start[0] + su * t, start[1] + sv * t)
        mask = rasterize(cfg.shape, cfg.shape_size, center, h, w)
        frame = texture(xs - bu * t, ys - bv * t)
        distractor = np.zeros((h, w), dtype=bool)
        if distractor_start is not None:
            dc = (distractor_start[0] + bu * t, distractor_start[1] + bv * t)
            distractor = rasterize("rectangle", dhalf, dc, h, w)
            frame[distractor] = fg_color + 0.5 * (fg_texture(xs - bu * t, ys - bv * t)[distractor] - 0.3)
        inside = fg_color + 0.5 * (fg_texture(xs - su * t, ys - sv * t) - 0.3)
        frame[mask] = inside[mask]
        frame = np.clip(frame, 0.0, 1.0).astype(np.float32)

        flow = np.empty((h, w, 2), dtype=np.float32)
        flow[...] = (bu, bv)
        flow[mask] = (su, sv)
        samples.append(VideoSample(
            frame=frame,
            flow_field=flow,
            flow_rgb=flow_to_rgb(flow, cfg.flow_max_mag),
            gt_mask=mask,
            distractor_mask=distractor & ~mask,
        ))
    return samples


def _check_inside(cfg, start):
    (xlo, xhi), (ylo, yhi) = _start_range(cfg, cfg.shape_size, cfg.shape_velocity)
    if not (xlo <= start[0] <= xhi and ylo <= start[1] <= yhi):
        raise ConfigError(f"start {start} lets the shape leave the frame")


def _distractor_half(cfg):
    return max(1.5, 0.6 * cfg.shape_size)


def _place_distractor(cfg, start, rng, tries=32):
    half = _distractor_half(cfg)
    (xlo, xhi), (ylo, yhi) = _start_range(cfg, half, cfg.background_velocity)
    su, sv = cfg.shape_velocity
    bu, bv = cfg.background_velocity
    best, best_overlap = None, None
    for _ in range(tries):
        cand = (rng.uniform(xlo, xhi), rng.uniform(ylo, yhi))
        overlap = 0
        for t in range(cfg.frames):
            dx = abs(cand[0] + bu * t - start[0] - su * t)
            dy = abs(cand[1] + bv * t - start[1] - sv * t)
            overlap = max(overlap, (dx < half + cfg.shape_size + 1) and (dy < half + cfg.shape_size + 1))
        if not overlap:
            return cand
        if best is None or overlap < best_overlap:
            best, best_overlap = cand, overlap
    return best


# ---------------------------------------------------------------------------
# corpora


def random_scene(rng: np.random.Generator, base: SceneConfig, index: int) -> SceneConfig:
    """Draw one scene around ``base``: shape kind, size, velocities, distractor."""
    shape = SHAPES[index % len(SHAPES)]
    size = float(rng.integers(4, 8)) if shape == "disk" else float(rng.integers(3, 6))
    while True:
        sv = tuple(float(rng.integers(-6, 7)) / 4 for _ in range(2))
        bv = tuple(float(rng.integers(-2, 3)) / 4 for _ in range(2))
        if np.hypot(sv[0] - bv[0], sv[1] - bv[1]) >= 0.75:
            break
    cfg = dataclasses.replace(
        base, shape=shape, shape_size=size, shape_velocity=sv, background_velocity=bv,
        texture_seed=int(rng.integers(0, 2**31 - 1)), distractor=bool(index % 2 == 1), start=None,
    )
    try:
        cfg.validate()
    except ConfigError:
        cfg = dataclasses.replace(cfg, shape_velocity=(0.5, 0.0), background_velocity=(0.0, 0.0))
        cfg.validate()
    return cfg


def make_corpus(n_sequences: int, seed: int, base: Optional[SceneConfig] = None) -> List[List[VideoSample]]:
    base = base or SceneConfig()
    rng = np.random.default_rng([seed, 7919])
    corpus = []
    for i in range(n_sequences):
        cfg = random_scene(rng, base, i)
        corpus.append(generate_sequence(cfg, int(rng.integers(0, 2**31 - 1))))
    return corpus


FRAME_FIELDS = ("frame", "flow_field", "flow_rgb", "gt_mask", "distractor_mask")


def save_corpus(corpus: List[List[VideoSample]], out_dir) -> Path:
    """One directory per sequence with one tensor file per frame and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s, seq in enumerate(corpus):
        seq_dir = out / f"seq_{s:03d}"
        seq_dir.mkdir(exist_ok=True)
        lines = ["# file tensor shape dtype"]
        for f, sample in enumerate(seq):
            name = f"frame_{f:03d}.cmtm"
            tensors = {k: np.asarray(getattr(sample, k), dtype=np.float32) for k in FRAME_FIELDS}
            save_checkpoint(Checkpoint(tensors), seq_dir / name)
            for k, arr in tensors.items():
                lines.append(f"{name} {k} {'x'.join(map(str, arr.shape))} float32")
        (seq_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def load_corpus(data_dir) -> List[List[VideoSample]]:
    root = Path(data_dir)
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.txt").exists())
    if not seq_dirs:
        raise CorruptFileError(f"no sequence directories with a manifest under {root}")
    corpus = []
    for seq_dir in seq_dirs:
        frames = []
        for path in sorted(seq_dir.glob("frame_*.cmtm")):
            t = load_checkpoint(path).tensors
            missing = [k for k in FRAME_FIELDS if k not in t]
            if missing:
                raise CorruptFileError(f"{path} lacks tensors {missing}")
            frames.append(VideoSample(
                frame=t["frame"], flow_field=t["flow_field"], flow_rgb=t["flow_rgb"],
                gt_mask=t["gt_mask"] > 0.5, distractor_mask=t["distractor_mask"] > 0.5,
            ))
        corpus.append(frames)
    return corpus


def stack_corpus(corpus):
    """Flatten sequences into ``(frames, flows, masks)`` arrays."""
    samples = [s for seq in corpus for s in seq]
    return (
        np.stack([s.frame for s in samples]),
        np.stack([s.flow_rgb for s in samples]),
        np.stack([s.gt_mask for s in samples]),
    )
