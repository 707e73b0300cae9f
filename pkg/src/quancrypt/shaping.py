"""Progressive magnitude pruning and mean-based layer clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClipConfig:
    alpha: float = 3.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("clip factor alpha must be positive")


@dataclass(frozen=True)
class PruneSchedule:
    p0: float = 0.20
    p_target: float = 0.50
    t_eff: int = 40
    t_target: int = 300

    def __post_init__(self):
        if not 0 <= self.p0 <= self.p_target < 1:
            raise ValueError("need 0 <= p0 <= p_target < 1")
        if not self.t_eff < self.t_target:
            raise ValueError("need t_eff < t_target")


@dataclass(frozen=True, eq=False)
class PruneMask:
    masks: tuple[np.ndarray, ...]
    rate_used: float

    def zero_fraction(self, index: int) -> float:
        m = self.masks[index]
        return float(np.count_nonzero(m == 0)) / m.size


def prune_rate(schedule: PruneSchedule, t: int) -> float:
    """Linear ramp from p0 at t_eff to p_target at t_target, held afterwards."""
    if t < 0:
        raise ValueError("round index must be >= 0")
    if t >= schedule.t_target:
        return schedule.p_target
    frac = max(0.0, (t - schedule.t_eff) / (schedule.t_target - schedule.t_eff))
    return frac * (schedule.p_target - schedule.p0) + schedule.p0


def _layer_mask(w: np.ndarray, p: float) -> np.ndarray:
    flat = np.abs(np.asarray(w, dtype=np.float64)).ravel()
    k = int(np.floor(p * flat.size))
    mask = np.ones(flat.size, dtype=np.float64)
    if k:
        # stable sort: equal magnitudes are pruned lowest index first
        mask[np.argsort(flat, kind="stable")[:k]] = 0.0
    return mask.reshape(np.shape(w))


def build_mask(weights, p: float) -> PruneMask:
    """Per-layer mask zeroing the ``floor(p * count)`` smallest magnitudes."""
    if not 0 <= p < 1:
        raise ValueError(f"prune rate must lie in [0, 1), got {p}")
    if isinstance(weights, np.ndarray):
        weights = [weights]
    return PruneMask(tuple(_layer_mask(w, p) for w in weights), float(p))


def apply_mask(weights, mask: PruneMask) -> list[np.ndarray]:
    if isinstance(weights, np.ndarray):
        weights = [weights]
    if len(weights) != len(mask.masks):
        raise ValueError("mask and weights hold different layer counts")
    out = []
    for w, m in zip(weights, mask.masks):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != m.shape:
            raise ValueError(f"mask shape {m.shape} does not match weights {w.shape}")
        out.append(w * m)
    return out


def mean_abs(layer) -> float:
    x = np.asarray(layer, dtype=np.float64)
    if x.size == 0:
        raise ValueError("mean of an empty layer")
    return float(np.mean(np.abs(x)))


def clip_update(layer, cfg: ClipConfig = ClipConfig()) -> np.ndarray:
    """Clamp a layer into ``[-alpha*mu, alpha*mu]`` where mu is its mean |value|."""
    x = np.asarray(layer, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot clip non-finite values")
    mu = mean_abs(x)
    if mu == 0.0:
        return x.copy()
    bound = cfg.alpha * mu
    return np.clip(x, -bound, bound)


def clip_layers(weights, cfg: ClipConfig = ClipConfig()) -> list[np.ndarray]:
    return [clip_update(w, cfg) for w in weights]
