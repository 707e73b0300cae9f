"""Gradient inversion by cosine gradient matching with a total-variation prior.

The attacker knows the victim model, the label and one observed parameter
gradient, and searches for an input in [0, 1]^n whose gradient points the
same way.  Input gradients of the objective come from central finite
differences; single dense-layer victims get a closed-form path.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import downsample_images
from .nn import Model, per_sample_grads, tiny_conv_schema
from .shaping import apply_mask, build_mask

log = logging.getLogger(__name__)

INITS = ("random-uniform", "zeros", "ground-truth")
INPUT_GRADS = ("auto", "fd", "analytic")
FD_MAX_INPUTS = 1024
PSNR_INF = math.inf


class FullyPrunedGradientError(ValueError):
    """The observed gradient is all zeros, so the cosine is undefined."""


@dataclass(frozen=True)
class AttackConfig:
    tv_weight: float = 0.0
    steps: int = 300
    step_size: float = 0.1
    init: str = "random-uniform"
    prune_rate: float = 0.0
    fd_epsilon: float = 1e-4
    seed: int = 0
    patience: int = 50
    input_grad: str = "auto"

    def __post_init__(self):
        if not self.tv_weight >= 0:
            raise ValueError("tv_weight must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if not 0 <= self.prune_rate <= 1:
            raise ValueError("prune_rate must lie in [0, 1]")
        if not self.fd_epsilon > 0:
            raise ValueError("fd_epsilon must be positive")
        if self.input_grad not in INPUT_GRADS:
            raise ValueError(f"input_grad must be one of {INPUT_GRADS}")


@dataclass(eq=False)
class ReconstructionResult:
    x_hat: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    psnr: float | None = None
    mse: float | None = None
    steps_used: int = 0
    early_stopped: bool = False


# --------------------------------------------------------------------------
# metrics


def total_variation(image) -> float:
    """Anisotropic TV: absolute horizontal plus vertical neighbour differences.

    A 3-D array is treated as (channels, H, W) and summed over channels.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ValueError(f"expected a 2-D image or (C, H, W) stack, got shape {img.shape}")
    if img.shape[1] < 2 or img.shape[2] < 2:
        raise ValueError("total variation needs at least 2 pixels along each axis")
    return float(np.abs(np.diff(img, axis=2)).sum() + np.abs(np.diff(img, axis=1)).sum())


def _tv_subgradient(img: np.ndarray) -> np.ndarray:
    g = np.zeros_like(img)
    sx = np.sign(np.diff(img, axis=2))
    g[:, :, 1:] += sx
    g[:, :, :-1] -= sx
    sy = np.sign(np.diff(img, axis=1))
    g[:, 1:, :] += sy
    g[:, :-1, :] -= sy
    return g


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB for unit-range images; identical inputs give ``PSNR_INF``."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / err)


# --------------------------------------------------------------------------
# gradients and the objective


def flatten_grads(grads) -> np.ndarray:
    if isinstance(grads, np.ndarray) and grads.ndim == 1:
        return grads.astype(np.float64)
    return np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grads])


def victim_gradient(model: Model, x, y: int, prune_rate: float = 0.0) -> list[np.ndarray]:
    """Per-sample parameter gradient of the victim, optionally L1-pruned per layer."""
    flat = per_sample_grads(model, np.asarray(x)[None], [y])[0]
    grads = _split(model, flat)
    if prune_rate:
        grads = apply_mask(grads, build_mask(grads, prune_rate))
    return grads


def _split(model: Model, flat: np.ndarray) -> list[np.ndarray]:
    out, pos = [], 0
    for p in model.params:
        out.append(flat[pos : pos + p.size].reshape(p.shape))
        pos += p.size
    return out


def _image_view(model: Model, x: np.ndarray) -> np.ndarray | None:
    """Input as a (C, H, W) stack, or None when it has no image layout."""
    shape = tuple(model.schema.input_shape)
    if len(shape) == 3:
        return x.reshape(shape)
    if len(shape) == 2:
        return x.reshape((1,) + shape)
    side = math.isqrt(x.size)
    if side * side == x.size and side >= 2:
        return x.reshape(1, side, side)
    return None


def _tv_term(model: Model, x: np.ndarray, tv_weight: float) -> float:
    if tv_weight == 0:
        return 0.0
    img = _image_view(model, x)
    if img is None:
        raise ValueError("tv_weight > 0 needs an input with an image layout")
    return tv_weight * total_variation(img)


def _cosine_terms(G: np.ndarray, g_star: np.ndarray) -> np.ndarray:
    """1 - cos for each row of G, clamped so the term never drops below 0."""
    dots = G @ g_star
    # sqrt(a*b) rather than sqrt(a)*sqrt(b): identical vectors then give exactly 1
    denom = np.sqrt(np.einsum("ij,ij->i", G, G) * float(g_star @ g_star))
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return 1.0 - np.clip(cos, -1.0, 1.0)


def _checked_star(model: Model, g_star) -> np.ndarray:
    g = flatten_grads(g_star)
    if g.size != model.num_params:
        raise ValueError(f"gradient holds {g.size} values, model has {model.num_params}")
    if not np.any(g):
        raise FullyPrunedGradientError("observed gradient is all zeros (fully pruned); cosine undefined")
    return g


def gradient_matching_objective(model: Model, x, y: int, g_star, tv_weight: float = 0.0) -> float:
    """``1 - cos(grad L(x, y), g_star) + tv_weight * TV(x)``."""
    gs = _checked_star(model, g_star)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    G = per_sample_grads(model, x[None], [y])
    return float(_cosine_terms(G, gs)[0]) + _tv_term(model, x, tv_weight)


def _objectives(model, X: np.ndarray, y: int, gs: np.ndarray, tv_weight: float) -> np.ndarray:
    G = per_sample_grads(model, X, np.full(len(X), y))
    out = _cosine_terms(G, gs)
    if tv_weight:
        out = out + np.array([_tv_term(model, x, tv_weight) for x in X])
    return out


def fd_input_gradient(model: Model, x, y: int, g_star, tv_weight: float = 0.0, eps: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of the objective over the input."""
    gs = _checked_star(model, g_star)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    if n > FD_MAX_INPUTS:
        raise ValueError(f"finite differences limited to {FD_MAX_INPUTS} inputs, got {n}")
    X = np.repeat(x[None], 2 * n, axis=0)
    idx = np.arange(n)
    X[idx, idx] += eps
    X[n + idx, idx] -= eps
    f = _objectives(model, X, y, gs, tv_weight)
    return (f[:n] - f[n:]) / (2 * eps)


def _is_linear(model: Model) -> bool:
    kinds = [l.kind for l in model.schema.layers]
    return kinds == ["dense", "softmax-xent-head"]


def _linear_value_and_grad(model: Model, x: np.ndarray, y: int, gs: np.ndarray, tv_weight: float):
    W, b = model.params
    n, c = W.shape
    V, vb = gs[: n * c].reshape(n, c), gs[n * c :]
    z = x @ W + b
    p = np.exp(z - z.max())
    p /= p.sum()
    r = p.copy()
    r[y] -= 1.0
    J = np.diag(p) - np.outer(p, p)
    u = V.T @ x + vb
    dot = float(u @ r)
    xx = float(x @ x) + 1.0
    rr = float(r @ r)
    gnorm = math.sqrt(xx * rr)
    snorm = math.sqrt(float(gs @ gs))
    if gnorm == 0:
        return 1.0, np.zeros_like(x)
    cos = dot / math.sqrt(xx * rr * snorm * snorm)
    d_dot = V @ r + W @ (J @ u)
    d_gnorm = x * math.sqrt(rr / xx) + math.sqrt(xx / rr) * (W @ (J @ r)) if rr > 0 else x * 0.0
    d_cos = (d_dot * gnorm - dot * d_gnorm) / (gnorm * gnorm * snorm)
    value = 1.0 - min(max(cos, -1.0), 1.0)
    grad = -d_cos
    if tv_weight:
        img = _image_view(model, x)
        if img is None:
            raise ValueError("tv_weight > 0 needs an input with an image layout")
        value += tv_weight * total_variation(img)
        grad = grad + tv_weight * _tv_subgradient(img).reshape(-1)
    return value, grad


def recover_linear_input(g_star) -> np.ndarray:
    """Closed-form input from a dense layer gradient: column k of dW over db[k]."""
    gW, gb = (np.asarray(g, dtype=np.float64) for g in g_star)
    k = int(np.argmax(np.abs(gb)))
    if gb[k] == 0:
        raise FullyPrunedGradientError("bias gradient is zero; nothing to recover")
    return gW[:, k] / gb[k]


# --------------------------------------------------------------------------
# the attack


def _initial_guess(cfg: AttackConfig, n: int, x_star) -> np.ndarray:
    if cfg.init == "zeros":
        return np.zeros(n)
    if cfg.init == "ground-truth":
        if x_star is None:
            raise ValueError("ground-truth init needs the true input")
        return np.clip(np.asarray(x_star, dtype=np.float64).reshape(-1), 0.0, 1.0)
    return np.random.default_rng(cfg.seed).uniform(0.0, 1.0, n)


def run_attack(model: Model, g_star, y: int, cfg: AttackConfig = AttackConfig(), x_star=None) -> ReconstructionResult:
    """Projected gradient descent on the matching objective; returns the best iterate.

    ``g_star`` is the raw observed gradient; ``cfg.prune_rate`` is applied to it
    here with the same per-layer magnitude rule the clients use.
    """
    if cfg.prune_rate >= 1:
        g_star = np.zeros(model.num_params)
    elif cfg.prune_rate:
        if not isinstance(g_star, (list, tuple)):
            g_star = _split(model, flatten_grads(g_star))
        g_star = apply_mask(g_star, build_mask(g_star, cfg.prune_rate))
    gs = _checked_star(model, g_star)
    n = int(np.prod(model.schema.input_shape))
    analytic = cfg.input_grad == "analytic" or (cfg.input_grad == "auto" and _is_linear(model))
    if analytic and not _is_linear(model):
        raise ValueError("analytic input gradients exist only for single dense-layer victims")
    if not analytic and n > FD_MAX_INPUTS:
        raise ValueError(f"finite differences limited to {FD_MAX_INPUTS} inputs, got {n}")

    def value_and_grad(x):
        if analytic:
            return _linear_value_and_grad(model, x, y, gs, cfg.tv_weight)
        grad = fd_input_gradient(model, x, y, gs, cfg.tv_weight, cfg.fd_epsilon)
        return float(_objectives(model, x[None], y, gs, cfg.tv_weight)[0]), grad

    x = _initial_guess(cfg, n, x_star)
    f, grad = value_and_grad(x)
    best_x, best_f = x.copy(), f
    trace: list[float] = []
    stale = 0
    early = False
    for _ in range(cfg.steps):
        x = np.clip(x - cfg.step_size * grad, 0.0, 1.0)
        f, grad = value_and_grad(x)
        trace.append(f)
        if f < best_f:
            best_x, best_f, stale = x.copy(), f, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                early = True
                break
    x_hat = best_x.reshape(model.schema.input_shape)
    result = ReconstructionResult(x_hat, trace, steps_used=len(trace), early_stopped=early)
    if x_star is not None:
        truth = np.asarray(x_star, dtype=np.float64).reshape(x_hat.shape)
        result.mse = mse(x_hat, truth)
        result.psnr = psnr(x_hat, truth)
    return result


# --------------------------------------------------------------------------
# prune-rate sweep on the fixed benchmark victim

BENCH_SIDE = 8
BENCH_CHANNELS = 8
BENCH_VICTIM_SEED = 0
BENCH_CONFIG = AttackConfig(steps=500, step_size=20.0)
# sample choice gets its own stream so it does not track the init noise
SAMPLE_SEED_OFFSET = 1000


def benchmark_victim() -> Model:
    """Untrained tiny conv net on 8x8 inputs, the fixed victim of the sweep."""
    return Model.init(tiny_conv_schema(BENCH_CHANNELS, 10, BENCH_SIDE), BENCH_VICTIM_SEED)


def benchmark_images(ds):
    """8x8 block-averaged images in [0, 1] with labels."""
    small = downsample_images(ds, BENCH_SIDE)
    return small.inputs.reshape(-1, 1, BENCH_SIDE, BENCH_SIDE), small.labels


@dataclass(eq=False)
class SweepRow:
    prune_rate: float
    seed: int
    psnr: float | None
    mse: float | None
    steps_used: int
    error: str = ""
    x_hat: np.ndarray | None = None
    x_star: np.ndarray | None = None


def pick_sample(images: np.ndarray, labels: np.ndarray, seed: int):
    i = int(np.random.default_rng(SAMPLE_SEED_OFFSET + seed).integers(len(images)))
    return images[i], int(labels[i])


def attack_once(model: Model, images, labels, rate: float, seed: int, cfg: AttackConfig) -> SweepRow:
    x_star, y = pick_sample(images, labels, seed)
    g_star = victim_gradient(model, x_star, y)
    try:
        res = run_attack(model, g_star, y, replace(cfg, prune_rate=rate, seed=seed), x_star=x_star)
    except FullyPrunedGradientError as exc:
        log.warning("prune rate %g seed %d: %s", rate, seed, exc)
        return SweepRow(rate, seed, None, None, 0, str(exc), x_star=x_star)
    return SweepRow(rate, seed, res.psnr, res.mse, res.steps_used, x_hat=res.x_hat, x_star=x_star)


def prune_sweep(model: Model, images, labels, rates, seeds, cfg: AttackConfig = BENCH_CONFIG, workers: int = 1) -> list[SweepRow]:
    """One attack per (rate, seed); rows come back in rate-major order."""
    jobs = [(float(r), int(s)) for r in rates for s in seeds]
    if workers <= 1:
        return [attack_once(model, images, labels, r, s, cfg) for r, s in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: attack_once(model.copy(), images, labels, *job, cfg), jobs))


def median_psnr(rows: list[SweepRow]) -> dict[float, float]:
    out: dict[float, list[float]] = {}
    for r in rows:
        if r.psnr is not None:
            out.setdefault(r.prune_rate, []).append(r.psnr)
    return {k: float(np.median(v)) for k, v in out.items()}
