"""In-process federated training with pruning, clipping, quantization and CKKS.

Three modes share one loop:

``quancrypt``
    clients prune, clip, quantize and encrypt layer-wise; the server adds
    ciphertexts with public material only, then a key holder decrypts once
    per round.
``plain-quant``
    the same pipeline with a pass-through backend standing in for CKKS,
    used as a plaintext oracle.
``vanilla``
    plain FedAvg of full-precision weights.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ckks
from .data import Dataset, RoundRecord
from .nn import Checkpoint, Model, OptimizerState, TrainConfig, evaluate, local_train, save_checkpoint
from .quantize import QuantParams, derive_quant_params, dequantize_codes, payload_nbytes, quantize
from .shaping import ClipConfig, PruneSchedule, apply_mask, build_mask, clip_update, mean_abs, prune_rate

log = logging.getLogger(__name__)

MODES = ("quancrypt", "plain-quant", "vanilla")
RANGE_MODES = ("shared", "per-client")
DEGENERATE_RANGE = 1e-6
VANILLA_BYTES_PER_VALUE = 4  # float32 on the wire


class ProtocolError(RuntimeError):
    pass


class NonFiniteUpdateError(RuntimeError):
    pass


@dataclass(frozen=True)
class HEParams:
    degree: int = ckks.DEFAULT_DEGREE
    moduli_bits: tuple[int, ...] = ckks.DEFAULT_MODULI_BITS
    scale: float = ckks.DEFAULT_SCALE

    @classmethod
    def full(cls) -> "HEParams":
        return cls(ckks.FULL_DEGREE, ckks.FULL_MODULI_BITS, ckks.DEFAULT_SCALE)


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 5
    rounds: int = 30
    mode: str = "quancrypt"
    smoothing: float = 1.0
    bits: int = 8
    clip: ClipConfig = ClipConfig()
    schedule: PruneSchedule = PruneSchedule()
    train: TrainConfig = TrainConfig()
    he: HEParams = HEParams()
    range_mode: str = "shared"
    headroom: float = 1.0
    checkpoint_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.range_mode not in RANGE_MODES:
            raise ValueError(f"range_mode must be one of {RANGE_MODES}")
        if not 0 < self.smoothing <= 1:
            raise ValueError("smoothing weight lambda must lie in (0, 1]")
        if self.headroom < 1:
            raise ValueError("headroom must be >= 1")
        if self.checkpoint_patience < 1:
            raise ValueError("checkpoint_patience must be >= 1")


# --------------------------------------------------------------------------
# HE backends


class CkksBackend:
    """Public-key side of CKKS: encryption and homomorphic evaluation."""

    def __init__(self, ctx: ckks.CkksContext, pk: ckks.PublicKey):
        self.ctx = ctx
        self.pk = pk

    @property
    def slot_count(self) -> int:
        return self.ctx.slot_count

    def encrypt(self, values, seed) -> ckks.Ciphertext:
        return ckks.encrypt(self.pk, ckks.encode(self.ctx, values), seed)

    def add(self, a, b):
        return ckks.add_ciphertexts(a, b)

    def add_constant(self, ct, value: float, count: int):
        return ckks.add_plaintext(ct, ckks.encode(self.ctx, np.full(count, value), ct.scale))

    def mul_scalar(self, ct, k: float):
        return ckks.multiply_plaintext_scalar(ct, k)

    def nbytes(self, ct) -> int:
        return ct.nbytes()

    def check(self, ct) -> None:
        self.ctx.check_same(ct.ctx)


class PlainBackend:
    """Pass-through stand-in for CKKS; 'ciphertexts' are float vectors."""

    def __init__(self, slot_count: int):
        self._slots = slot_count

    @property
    def slot_count(self) -> int:
        return self._slots

    def encrypt(self, values, seed) -> np.ndarray:
        return np.asarray(values, dtype=np.float64).copy()

    def add(self, a, b):
        return a + b

    def add_constant(self, ct, value: float, count: int):
        return ct + value

    def mul_scalar(self, ct, k: float):
        return ct * k

    def nbytes(self, ct) -> int:
        return ct.nbytes

    def check(self, ct) -> None:
        if not isinstance(ct, np.ndarray):
            raise ProtocolError("plain backend received a non-plaintext chunk")


class KeyHolder:
    """Owns the secret key; every use is a logged decryption event."""

    def __init__(self, sk: ckks.SecretKey | None):
        self._sk = sk
        self.events: list[int] = []

    def decrypt_layers(self, layers, counts, t: int) -> list[np.ndarray]:
        self.events.append(t)
        log.debug("round %d: decryption event", t)
        out = []
        for chunks, count in zip(layers, counts):
            parts = []
            for ct in chunks:
                if self._sk is None:
                    parts.append(np.asarray(ct, dtype=np.float64))
                else:
                    parts.append(ckks.decrypt_values(self._sk, ct))
            out.append(np.concatenate(parts)[:count] if parts else np.empty(0))
        return out


# --------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class SharedRange:
    bounds: tuple[tuple[float, float], ...]

    def params(self, bits: int) -> list[QuantParams]:
        return [derive_quant_params(lo, hi, bits) for lo, hi in self.bounds]


@dataclass(eq=False)
class EncryptedUpdate:
    client_id: int
    chunks: list[list]  # per layer, ciphertexts (or plain vectors)
    params: list[QuantParams]
    counts: list[int]
    payload_bytes: int
    ciphertext_bytes: int
    enc_seconds: float = 0.0


@dataclass(eq=False)
class AggregatedUpdate:
    chunks: list[list]
    counts: list[int]
    params: list[QuantParams] | None  # None when dequantized homomorphically
    num_clients: int


@dataclass
class RoundTrace:
    """Per-round intermediates, kept only when tracing is requested."""

    shaped: list[list[np.ndarray]] = field(default_factory=list)
    params: list[QuantParams] = field(default_factory=list)
    aggregate: list[np.ndarray] = field(default_factory=list)
    he_max_error: float = 0.0


def compute_shared_range(global_params, clip: ClipConfig, headroom: float = 1.0) -> SharedRange:
    if headroom < 1:
        raise ValueError("headroom must be >= 1")
    bounds = []
    for layer in global_params:
        r = headroom * clip.alpha * mean_abs(layer)
        if r == 0.0:
            r = DEGENERATE_RANGE
        bounds.append((-r, r))
    return SharedRange(tuple(bounds))


def shape_update(local_weights, t: int, cfg: FederationConfig, shared_range: SharedRange | None = None) -> list[np.ndarray]:
    """Prune at the scheduled rate, then clip each layer.

    With a shared range the clip bound is the tighter of the layer's own
    ``alpha * mu`` and the broadcast range, so every value is representable.
    """
    p = prune_rate(cfg.schedule, t)
    pruned = apply_mask(local_weights, build_mask(local_weights, p))
    clipped = [clip_update(w, cfg.clip) for w in pruned]
    if shared_range is None:
        return clipped
    return [np.clip(w, lo, hi) for w, (lo, hi) in zip(clipped, shared_range.bounds)]


def _chunk(flat: np.ndarray, slots: int) -> list[np.ndarray]:
    return [flat[i : i + slots] for i in range(0, flat.size, slots)] or [flat]


def _chunk_seeds(seed_seq: np.random.SeedSequence | None, n: int):
    if seed_seq is None:
        return [None] * n
    return [int(s.generate_state(1)[0]) for s in seed_seq.spawn(n)]


def client_prepare_update(
    local_weights,
    t: int,
    cfg: FederationConfig,
    shared_range: SharedRange | None,
    backend,
    client_id: int = 0,
    seed_seq: np.random.SeedSequence | None = None,
) -> EncryptedUpdate:
    """Prune, clip, quantize, chunk into slot-sized blocks and encrypt every layer."""
    if cfg.mode == "vanilla":
        raise ProtocolError("vanilla mode sends plaintext weights; no preparation step")
    for w in local_weights:
        if not np.all(np.isfinite(w)):
            raise NonFiniteUpdateError(f"client {client_id} produced non-finite weights in round {t}")
    if cfg.range_mode == "shared":
        if shared_range is None:
            raise ProtocolError("shared range mode requires the server's broadcast range")
        if len(shared_range.bounds) != len(local_weights):
            raise ProtocolError("shared range does not cover every layer")
    shaped = shape_update(local_weights, t, cfg, shared_range if cfg.range_mode == "shared" else None)
    layer_params = (
        shared_range.params(cfg.bits)
        if cfg.range_mode == "shared"
        else [derive_quant_params(float(w.min()), float(w.max()), cfg.bits) for w in shaped]
    )
    chunks, counts = [], []
    payload = ct_bytes = 0
    t0 = time.perf_counter()
    for i, (w, qp) in enumerate(zip(shaped, layer_params)):
        codes = quantize(w.ravel(), qp, layer_index=i).q.astype(np.float64)
        blocks = _chunk(codes, backend.slot_count)
        layer_seq = None if seed_seq is None else seed_seq.spawn(1)[0]
        seeds = _chunk_seeds(layer_seq, len(blocks))
        enc = [backend.encrypt(b, s) for b, s in zip(blocks, seeds)]
        chunks.append(enc)
        counts.append(codes.size)
        payload += payload_nbytes(codes.size, cfg.bits)
        ct_bytes += sum(backend.nbytes(c) for c in enc)
    elapsed = time.perf_counter() - t0
    return EncryptedUpdate(client_id, chunks, layer_params, counts, payload, ct_bytes, elapsed)


def server_aggregate(updates, cfg: FederationConfig, backend) -> AggregatedUpdate:
    """Homomorphic sum of client updates; touches no secret-key material.

    Shared range mode returns the plain sum of codes (the 1/N is applied after
    decryption).  Per-client mode subtracts each zero-point, scales by
    ``s_i / N`` and adds, so the decrypted result is already the mean.
    """
    updates = list(updates)
    if not updates:
        raise ProtocolError("no client updates to aggregate")
    n = len(updates)
    first = updates[0]
    for u in updates:
        if u.counts != first.counts:
            raise ProtocolError("clients disagree on layer sizes")
        for layer in u.chunks:
            for ct in layer:
                backend.check(ct)
    if cfg.range_mode == "shared":
        for u in updates[1:]:
            if u.params != first.params:
                raise ProtocolError(f"client {u.client_id} used quantization parameters different from the broadcast")
        summed = []
        for li in range(len(first.chunks)):
            acc = list(first.chunks[li])
            for u in updates[1:]:
                acc = [backend.add(a, b) for a, b in zip(acc, u.chunks[li])]
            summed.append(acc)
        return AggregatedUpdate(summed, list(first.counts), list(first.params), n)

    summed = []
    slots = backend.slot_count
    for li, count in enumerate(first.counts):
        acc = None
        for u in updates:
            qp = u.params[li]
            scaled = []
            for ci, ct in enumerate(u.chunks[li]):
                used = min(slots, count - ci * slots)
                shifted = backend.add_constant(ct, -qp.z0, used)
                scaled.append(backend.mul_scalar(shifted, qp.s / n))
            acc = scaled if acc is None else [backend.add(a, b) for a, b in zip(acc, scaled)]
        summed.append(acc)
    return AggregatedUpdate(summed, list(first.counts), None, n)


# --------------------------------------------------------------------------
# server finalize


@dataclass
class ServerState:
    """Round-to-round server memory: checkpoint bookkeeping."""

    best_val: float = -math.inf
    best_round: int = 0
    best_params: list[np.ndarray] | None = None
    since_improvement: int = 0
    checkpoint_path: Path | None = None


def smooth(w_init, w_final, lam: float) -> list[np.ndarray]:
    if lam == 1.0:
        return [np.array(w, dtype=np.float64) for w in w_final]
    return [(1.0 - lam) * a + lam * b for a, b in zip(w_init, w_final)]


def checkpoint_step(state: ServerState, val_acc: float, params, t: int, patience: int, schema=None) -> tuple[str, list | None]:
    """Save on improvement; after ``patience`` flat rounds return the saved weights."""
    if val_acc > state.best_val:
        state.best_val = val_acc
        state.best_round = t
        state.best_params = [np.array(p) for p in params]
        state.since_improvement = 0
        if state.checkpoint_path is not None and schema is not None:
            save_checkpoint(state.checkpoint_path, Checkpoint(Model(schema, state.best_params), t, val_acc))
        return "saved", None
    state.since_improvement += 1
    if state.since_improvement >= patience and state.best_params is not None:
        state.since_improvement = 0
        return "reloaded", [np.array(p) for p in state.best_params]
    return "none", None


def dequantize_aggregate(decrypted, agg: AggregatedUpdate, exact_sum: bool = True):
    """Turn decrypted layers into real weights; also report the HE error seen."""
    err = 0.0
    out = []
    for li, vals in enumerate(decrypted):
        if agg.params is None:
            out.append(vals)
            continue
        if exact_sum:
            rounded = np.floor(vals + 0.5)
            err = max(err, float(np.max(np.abs(vals - rounded))) if vals.size else 0.0)
            vals = rounded
        out.append(dequantize_codes(vals / agg.num_clients, agg.params[li]))
    return out, err


def server_finalize_round(
    agg: AggregatedUpdate,
    key_holder: KeyHolder,
    t: int,
    cfg: FederationConfig,
    global_model: Model,
    validation: Dataset,
    test: Dataset,
    state: ServerState,
    trace: RoundTrace | None = None,
):
    """Decrypt, dequantize, prune globally, smooth, evaluate and checkpoint."""
    t0 = time.perf_counter()
    decrypted = key_holder.decrypt_layers(agg.chunks, agg.counts, t)
    dec_seconds = time.perf_counter() - t0
    flat, he_err = dequantize_aggregate(decrypted, agg)
    w_dq = [f.reshape(p.shape) for f, p in zip(flat, global_model.params)]
    if trace is not None:
        trace.aggregate = [w.copy() for w in w_dq]
        trace.he_max_error = he_err
    p_t = prune_rate(cfg.schedule, t)
    w_p = apply_mask(w_dq, build_mask(w_dq, p_t))
    new_params = smooth(global_model.params, w_p, cfg.smoothing)
    record, model = _evaluate_and_checkpoint(new_params, t, cfg, global_model, validation, test, state, p_t)
    return model, replace(record, dec_ms=dec_seconds * 1e3)


def _evaluate_and_checkpoint(params, t, cfg, global_model, validation, test, state, p_t):
    model = global_model.with_params(params)
    val_acc, _ = evaluate(model, validation.inputs, validation.labels)
    test_acc, test_loss = evaluate(model, test.inputs, test.labels)
    action, restored = checkpoint_step(state, val_acc, model.params, t, cfg.checkpoint_patience, model.schema)
    if restored is not None:
        model = model.with_params(restored)
    rec = RoundRecord(t, test_acc, val_acc, test_loss, p_t, 0.0, 0.0, 0.0, 0, action)
    return rec, model


# --------------------------------------------------------------------------
# training loop


@dataclass
class FederatedData:
    clients: list[Dataset]
    validation: Dataset
    test: Dataset


@dataclass
class TrainingResult:
    model: Model
    records: list[RoundRecord]
    traces: list[RoundTrace]
    decryption_events: list[int]


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("QUANCRYPT_THREADS", "1")))
    except ValueError:
        return 1


def make_backends(cfg: FederationConfig, key_seed: int | None = None):
    """Return ``(public backend, key holder)`` for the configured mode."""
    if cfg.mode == "quancrypt":
        ctx = ckks.create_context(cfg.he.degree, cfg.he.moduli_bits, cfg.he.scale)
        sk, pk = ckks.keygen(ctx, cfg.seed if key_seed is None else key_seed)
        return CkksBackend(ctx, pk), KeyHolder(sk)
    return PlainBackend(cfg.he.degree // 2), KeyHolder(None)


def run_training(
    cfg: FederationConfig,
    data: FederatedData,
    init_model: Model,
    checkpoint_path=None,
    trace: bool = False,
    on_round=None,
    backends=None,
) -> TrainingResult:
    if len(data.clients) != cfg.num_clients:
        raise ValueError(f"expected {cfg.num_clients} client shards, got {len(data.clients)}")
    root = np.random.SeedSequence(cfg.seed)
    enc_root, train_root = root.spawn(2)
    backend, key_holder = (None, None) if cfg.mode == "vanilla" else (backends or make_backends(cfg))
    state = ServerState(checkpoint_path=Path(checkpoint_path) if checkpoint_path else None)
    global_model = init_model.copy()
    records: list[RoundRecord] = []
    traces: list[RoundTrace] = []
    n = cfg.num_clients
    pool = ThreadPoolExecutor(max_workers=worker_count())
    try:
        for t in range(1, cfg.rounds + 1):
            round_seeds = train_root.spawn(n)
            enc_seeds = enc_root.spawn(n)

            def client_job(i):
                seed = int(round_seeds[i].generate_state(1)[0])
                tcfg = replace(cfg.train, seed=seed)
                weights, _ = local_train(global_model, data.clients[i].inputs, data.clients[i].labels, tcfg, OptimizerState.for_model(global_model))
                return weights

            local = list(pool.map(client_job, range(n)))
            for i, w in enumerate(local):
                if not all(np.all(np.isfinite(x)) for x in w):
                    raise NonFiniteUpdateError(f"client {i} diverged in round {t}: non-finite weights")

            if cfg.mode == "vanilla":
                t0 = time.perf_counter()
                mean = [np.mean([w[j] for w in local], axis=0) for j in range(len(local[0]))]
                agg_s = time.perf_counter() - t0
                params = smooth(global_model.params, mean, cfg.smoothing)
                rec, global_model = _evaluate_and_checkpoint(params, t, cfg, global_model, data.validation, data.test, state, 0.0)
                upload = VANILLA_BYTES_PER_VALUE * global_model.num_params
                rec = replace(rec, agg_ms=agg_s * 1e3, upload_bytes=upload)
                rt = None
            else:
                rt = RoundTrace() if trace else None
                shared = (
                    compute_shared_range(global_model.params, cfg.clip, cfg.headroom)
                    if cfg.range_mode == "shared"
                    else None
                )
                updates = list(
                    pool.map(
                        lambda i: client_prepare_update(local[i], t, cfg, shared, backend, i, enc_seeds[i]),
                        range(n),
                    )
                )
                if rt is not None:
                    rt.shaped = [shape_update(w, t, cfg, shared) for w in local]
                    rt.params = list(updates[0].params)
                t0 = time.perf_counter()
                agg = server_aggregate(updates, cfg, backend)
                agg_s = time.perf_counter() - t0
                global_model, rec = server_finalize_round(
                    agg, key_holder, t, cfg, global_model, data.validation, data.test, state, rt
                )
                enc_ms = sum(u.enc_seconds for u in updates) * 1e3
                upload = max(u.payload_bytes for u in updates)
                rec = replace(rec, enc_ms=enc_ms, agg_ms=agg_s * 1e3, upload_bytes=upload)
            records.append(rec)
            if rt is not None:
                traces.append(rt)
            log.info(
                "round %d test_acc=%.4f val_acc=%.4f p=%.3f %s",
                t, rec.test_acc, rec.val_acc, rec.prune_rate, rec.checkpoint,
            )
            if on_round is not None:
                on_round(rec)
    finally:
        pool.shutdown()
    events = key_holder.events if key_holder is not None else []
    return TrainingResult(global_model, records, traces, events)
