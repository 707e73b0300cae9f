"""Run assembly shared by the command line and the acceptance checks."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ckks
from .data import (
    Dataset,
    downsample_images,
    gen_synthetic,
    load_mnist,
    partition_iid,
    partition_label_shards,
    split_train_validation,
    standardize,
)
from .federation import FederatedData
from .nn import Model, mlp_schema, tiny_conv_schema


def holdout_split(ds: Dataset, test_size: int, train_fraction: float, seed: int):
    """Fixed test set first, then a shuffled train/validation split of the rest."""
    if not 0 < test_size < len(ds):
        raise ValueError(f"test_size must lie in (0, {len(ds)})")
    order = np.random.default_rng(seed).permutation(len(ds))
    test, pool = ds.subset(order[:test_size]), ds.subset(order[test_size:])
    train, val = split_train_validation(pool, train_fraction, seed)
    return train, val, test


def prepare_training(fed: dict) -> tuple[FederatedData, Model]:
    """Data shards and initial model for a ``[federation]`` config section."""
    seed = fed["seed"]
    if fed["dataset"] == "mnist":
        raw = load_mnist(fed["data_dir"] or None)
        if fed["model"] == "tiny-conv":
            raw = downsample_images(raw, 8)
        ds = standardize(raw)
    else:
        ds = gen_synthetic(fed["synthetic_count"], fed["synthetic_features"], 10, fed["synthetic_separation"], seed)
    train, val, test = holdout_split(ds, fed["test_size"], fed["train_fraction"], seed)
    n = fed["clients"]
    if fed["partition"] == "iid":
        part = partition_iid(train, n, seed)
    else:
        part = partition_label_shards(train, n, fed["classes_per_client"], seed)
    if fed["model"] == "tiny-conv":
        if ds.image_shape != (8, 8):
            raise ValueError("tiny-conv needs 8x8 images; use the mnist dataset")
        schema = tiny_conv_schema(classes=ds.class_count)
    else:
        schema = mlp_schema((ds.inputs.shape[1], 128, ds.class_count))
    return FederatedData(part.shards(train), val, test), Model.init(schema, seed)


# --------------------------------------------------------------------------
# encryption benchmark


@dataclass(frozen=True)
class BenchRow:
    metric: str
    value: float
    unit: str
    note: str = ""


def _layer_chunks(model: Model, slots: int) -> list[np.ndarray]:
    out = []
    for p in model.params:
        flat = p.ravel()
        out += [flat[i : i + slots] for i in range(0, flat.size, slots)]
    return out


def bench_encryption(
    degree: int = ckks.DEFAULT_DEGREE,
    moduli_bits=ckks.DEFAULT_MODULI_BITS,
    scale: float = ckks.DEFAULT_SCALE,
    per_element_sample: int = 200,
    updates: int = 10,
    seed: int = 0,
) -> list[BenchRow]:
    """Time slot-packed vs one-value-per-ciphertext encryption of the MNIST MLP.

    Per-element encryption is timed on ``per_element_sample`` values and
    scaled linearly to the full parameter count, since each value costs one
    independent encryption.
    """
    t_all = time.perf_counter()
    ctx = ckks.create_context(degree, moduli_bits, scale)
    sk, pk = ckks.keygen(ctx, seed)
    model = Model.init(mlp_schema(), seed)
    n = model.num_params
    chunks = _layer_chunks(model, ctx.slot_count)
    rows = [BenchRow("parameters", n, "count"), BenchRow("degree", degree, "")]

    t0 = time.perf_counter()
    cts = [ckks.encrypt_values(pk, c, seed + i) for i, c in enumerate(chunks)]
    batched = time.perf_counter() - t0
    rows.append(BenchRow("batched_encrypt", batched, "s", f"{len(cts)} ciphertexts"))

    sample = np.concatenate([p.ravel() for p in model.params])[: min(per_element_sample, n)]
    t0 = time.perf_counter()
    for i, v in enumerate(sample):
        ckks.encrypt_values(pk, [v], seed + 10_000 + i)
    per_value = (time.perf_counter() - t0) / len(sample)
    per_element = per_value * n
    rows.append(BenchRow("per_element_encrypt", per_element, "s", f"extrapolated from {len(sample)} values"))
    rows.append(BenchRow("encrypt_speedup", per_element / batched, "x"))

    t0 = time.perf_counter()
    for c, ct in zip(chunks, cts):
        ckks.decrypt_values(sk, ct, c.size)
    rows.append(BenchRow("batched_decrypt", time.perf_counter() - t0, "s"))

    per_update = [cts] + [
        [ckks.encrypt_values(pk, c, seed + 1000 * (u + 1) + i) for i, c in enumerate(chunks)]
        for u in range(1, updates)
    ]
    t0 = time.perf_counter()
    for j in range(len(chunks)):
        acc = ckks.sum_ciphertexts([u[j] for u in per_update])
        ckks.multiply_plaintext_scalar(acc, 1.0 / updates)
    rows.append(BenchRow("aggregate", time.perf_counter() - t0, "s", f"{updates} updates, one round"))
    rows.append(BenchRow("total", time.perf_counter() - t_all, "s"))
    return rows
