import math
from dataclasses import replace

import numpy as np
import pytest

from quancrypt import ckks
from quancrypt.data import gen_synthetic, partition_iid, split_train_validation
from quancrypt.federation import (
    CkksBackend,
    EncryptedUpdate,
    FederatedData,
    FederationConfig,
    HEParams,
    KeyHolder,
    NonFiniteUpdateError,
    PlainBackend,
    ProtocolError,
    ServerState,
    SharedRange,
    checkpoint_step,
    client_prepare_update,
    compute_shared_range,
    dequantize_aggregate,
    run_training,
    server_aggregate,
    shape_update,
    smooth,
)
from quancrypt.nn import Model, OptimizerState, TrainConfig, local_train, mlp_schema
from quancrypt.quantize import dequantize_codes
from quancrypt.shaping import ClipConfig, PruneSchedule

TOY_HE = HEParams(1024, (50, 40, 50), 2.0**30)


def small_federation(clients=3, seed=0):
    ds = gen_synthetic(450, 12, 4, 4.0, seed)
    train, rest = split_train_validation(ds, 0.6, seed)
    val, test = split_train_validation(rest, 0.5, seed)
    shards = partition_iid(train, clients, seed).shards(train)
    return FederatedData(shards, val, test), Model.init(mlp_schema((12, 16, 4)), seed)


def toy_cfg(**kw):
    base = dict(
        num_clients=3,
        rounds=3,
        mode="quancrypt",
        he=TOY_HE,
        schedule=PruneSchedule(0.2, 0.5, 1, 5),
        train=TrainConfig(batch_size=16),
    )
    base.update(kw)
    return FederationConfig(**base)


# ---------------------------------------------------------------- shared range


def test_shared_range_examples():
    clip = ClipConfig(3.0)
    assert compute_shared_range([np.array([1.0, -1.0])], clip, 1.0).bounds == ((-3.0, 3.0),)
    assert compute_shared_range([np.zeros(4)], clip).bounds == ((-1e-6, 1e-6),)
    assert compute_shared_range([np.array([1.0, -1.0])], clip, 2.0).bounds == ((-6.0, 6.0),)
    with pytest.raises(ValueError):
        compute_shared_range([np.ones(2)], clip, 0.5)


@pytest.mark.parametrize(
    "kw",
    [dict(num_clients=0), dict(rounds=0), dict(smoothing=0.0), dict(smoothing=1.5), dict(mode="x"), dict(range_mode="y")],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FederationConfig(**kw)


# ------------------------------------------------------------- client prepare


def test_client_update_round_trip_within_half_step(toy_ctx, toy_keys):
    sk, pk = toy_keys
    rng = np.random.default_rng(0)
    weights = [rng.normal(size=(30, 20)), rng.normal(size=20)]
    cfg = toy_cfg(num_clients=1)
    shared = compute_shared_range(weights, cfg.clip)
    upd = client_prepare_update(weights, 3, cfg, shared, CkksBackend(toy_ctx, pk), 0, np.random.SeedSequence(1))
    assert [len(c) for c in upd.chunks] == [2, 1]  # 600 values over 512 slots, then 20
    decrypted = KeyHolder(sk).decrypt_layers(upd.chunks, upd.counts, 3)
    shaped = shape_update(weights, 3, cfg, shared)
    for vals, qp, want in zip(decrypted, upd.params, shaped):
        got = dequantize_codes(np.floor(vals + 0.5), qp)
        assert np.max(np.abs(got - want.ravel())) <= qp.s / 2 + 1e-12


def test_shared_range_bounds_the_shaped_update():
    cfg = toy_cfg(num_clients=1)
    local = [np.random.default_rng(2).normal(scale=10.0, size=500)]
    shared = SharedRange(((-0.5, 0.5),))
    shaped = shape_update(local, 1, cfg, shared)[0]
    assert np.abs(shaped).max() == 0.5
    assert np.abs(shape_update(local, 1, cfg)[0]).max() > 0.5
    upd = client_prepare_update(local, 1, cfg, shared, PlainBackend(512))
    got = dequantize_codes(upd.chunks[0][0], upd.params[0])
    assert np.max(np.abs(got - shaped)) <= upd.params[0].s / 2 + 1e-12


def test_chunking_ten_thousand_values_at_8192():
    cfg = toy_cfg(num_clients=1)
    w = [np.linspace(-1, 1, 10_000)]
    upd = client_prepare_update(w, 1, cfg, compute_shared_range(w, cfg.clip), PlainBackend(4096))
    assert len(upd.chunks[0]) == 3
    assert sum(c.size for c in upd.chunks[0]) == 10_000


def test_client_guards():
    w = [np.ones(4)]
    backend = PlainBackend(8)
    with pytest.raises(ProtocolError):
        client_prepare_update(w, 1, toy_cfg(mode="vanilla"), None, backend)
    with pytest.raises(ProtocolError):
        client_prepare_update(w, 1, toy_cfg(), None, backend)
    with pytest.raises(NonFiniteUpdateError):
        client_prepare_update([np.array([1.0, np.nan])], 1, toy_cfg(), SharedRange(((-1, 1),)), backend)


def test_payload_is_at_most_a_third_of_float32():
    w = [np.random.default_rng(1).normal(size=(200, 50)), np.zeros(50)]
    cfg = toy_cfg()
    upd = client_prepare_update(w, 1, cfg, compute_shared_range(w, cfg.clip), PlainBackend(512))
    assert upd.payload_bytes <= 4 * 10_050 / 3


# ------------------------------------------------------------------ aggregate


def _code_update(codes, params, backend, cid):
    n = backend.slot_count
    chunks = [[backend.encrypt(codes[i : i + n], cid) for i in range(0, codes.size, n)]]
    return EncryptedUpdate(cid, chunks, [params], [codes.size], 0, 0)


def test_aggregate_three_clients_mean(toy_ctx, toy_keys):
    sk, pk = toy_keys
    backend = CkksBackend(toy_ctx, pk)
    cfg = toy_cfg()
    qp = SharedRange(((-1.0, 1.0),)).params(8)[0]
    ups = [_code_update(np.full(700, float(k)), qp, backend, k) for k in (1, 2, 3)]
    agg = server_aggregate(ups, cfg, backend)
    dec = KeyHolder(sk).decrypt_layers(agg.chunks, agg.counts, 1)[0]
    np.testing.assert_allclose(dec / 3, 2.0, atol=1e-4)


def test_aggregate_single_client_identity(toy_ctx, toy_keys):
    sk, pk = toy_keys
    backend = CkksBackend(toy_ctx, pk)
    qp = SharedRange(((-1.0, 1.0),)).params(8)[0]
    codes = np.arange(100, dtype=float)
    agg = server_aggregate([_code_update(codes, qp, backend, 0)], toy_cfg(num_clients=1), backend)
    dec = KeyHolder(sk).decrypt_layers(agg.chunks, agg.counts, 1)[0]
    np.testing.assert_allclose(dec, codes, atol=1e-4)


def test_aggregate_guards(toy_ctx, toy_keys):
    backend = PlainBackend(16)
    a = SharedRange(((-1.0, 1.0),)).params(8)[0]
    b = SharedRange(((-2.0, 2.0),)).params(8)[0]
    ups = [_code_update(np.ones(5), a, backend, 0), _code_update(np.ones(5), b, backend, 1)]
    with pytest.raises(ProtocolError):
        server_aggregate(ups, toy_cfg(), backend)
    with pytest.raises(ProtocolError):
        server_aggregate([], toy_cfg(), backend)
    other = ckks.create_context(1024, (40, 40), 2.0**25)
    _, pk_other = ckks.keygen(other, 0)
    foreign = _code_update(np.ones(5), a, CkksBackend(other, pk_other), 0)
    with pytest.raises(ckks.ContextMismatchError):
        server_aggregate([foreign], toy_cfg(), CkksBackend(toy_ctx, toy_keys[1]))


def test_per_client_mode_dequantizes_homomorphically(toy_ctx, toy_keys):
    sk, pk = toy_keys
    backend = CkksBackend(toy_ctx, pk)
    cfg = toy_cfg(range_mode="per-client")
    rng = np.random.default_rng(4)
    local = [[rng.normal(scale=k + 1, size=300)] for k in range(3)]
    ups = [client_prepare_update(w, 1, cfg, None, backend, i, np.random.SeedSequence(i)) for i, w in enumerate(local)]
    assert len({u.params[0] for u in ups}) == 3
    agg = server_aggregate(ups, cfg, backend)
    assert agg.params is None
    dec = KeyHolder(sk).decrypt_layers(agg.chunks, agg.counts, 1)
    got, _ = dequantize_aggregate(dec, agg)
    want = np.mean([shape_update(w, 1, cfg)[0] for w in local], axis=0)
    tol = max(u.params[0].s for u in ups) / 2 + 1e-3
    assert np.max(np.abs(got[0] - want)) <= tol


# --------------------------------------------------------- finalize helpers


def test_smoothing():
    w = [np.array([1.0, -2.0])]
    np.testing.assert_array_equal(smooth([np.zeros(2)], w, 1.0)[0], w[0])
    assert smooth([np.zeros(1)], [np.full(1, 2.0)], 0.5)[0][0] == 1.0


def test_checkpoint_patience_reloads_on_fifth_flat_round():
    state = ServerState()
    actions = []
    for t, acc in enumerate([90, 89, 88, 87, 86, 85], start=1):
        action, restored = checkpoint_step(state, acc, [np.full(1, float(t))], t, 5)
        actions.append(action)
    assert actions == ["saved", "none", "none", "none", "none", "reloaded"]
    assert restored[0][0] == 1.0


def test_checkpoint_improvement_resets_counter():
    state = ServerState()
    seq = [50, 40, 40, 60, 59, 58, 57, 56]
    actions = [checkpoint_step(state, a, [np.zeros(1)], t, 5)[0] for t, a in enumerate(seq, 1)]
    assert actions == ["saved", "none", "none", "saved", "none", "none", "none", "none"]


# --------------------------------------------------------------- full loops


def test_single_round_single_client_vanilla_equals_local_training():
    data, init = small_federation(clients=1)
    cfg = toy_cfg(num_clients=1, rounds=1, mode="vanilla")
    result = run_training(cfg, data, init)
    train_root = np.random.SeedSequence(cfg.seed).spawn(2)[1]
    seed = int(train_root.spawn(1)[0].generate_state(1)[0])
    want, _ = local_train(init, data.clients[0].inputs, data.clients[0].labels, replace(cfg.train, seed=seed), OptimizerState.for_model(init))
    for a, b in zip(result.model.params, want):
        np.testing.assert_array_equal(a, b)
    assert result.decryption_events == []
    assert result.records[0].upload_bytes == 4 * init.num_params


@pytest.fixture(scope="module")
def paired_runs():
    data, init = small_federation()
    cfg = toy_cfg(rounds=4, checkpoint_patience=50)
    enc = run_training(cfg, data, init, trace=True)
    plain = run_training(replace(cfg, mode="plain-quant"), data, init, trace=True)
    return cfg, enc, plain


def test_quancrypt_matches_plain_quant(paired_runs):
    _, enc, plain = paired_runs
    for te, tp in zip(enc.traces, plain.traces):
        for a, b in zip(te.aggregate, tp.aggregate):
            assert np.max(np.abs(a - b)) <= 1e-2
    for a, b in zip(enc.model.params, plain.model.params):
        assert np.max(np.abs(a - b)) <= 1e-2
    assert max(t.he_max_error for t in enc.traces) < 0.01


def test_plain_quant_matches_exact_fedavg_within_half_step(paired_runs):
    _, _, plain = paired_runs
    for tr in plain.traces:
        exact = [np.mean([client[j] for client in tr.shaped], axis=0) for j in range(len(tr.params))]
        for got, want, qp in zip(tr.aggregate, exact, tr.params):
            assert np.max(np.abs(got - want)) <= qp.s / 2 + 1e-12


def test_one_decryption_per_round(paired_runs):
    cfg, enc, _ = paired_runs
    assert enc.decryption_events == list(range(1, cfg.rounds + 1))


def test_global_sparsity_and_schedule(paired_runs):
    cfg, enc, _ = paired_runs
    rates = [r.prune_rate for r in enc.records]
    assert rates == sorted(rates)
    p = rates[-1]
    for w in enc.model.params:
        assert np.count_nonzero(w == 0) >= math.floor(p * w.size)


def test_records_are_sane(paired_runs):
    cfg, enc, _ = paired_runs
    assert [r.round for r in enc.records] == list(range(1, cfg.rounds + 1))
    for r in enc.records:
        assert 0 <= r.test_acc <= 1 and 0 <= r.val_acc <= 1
        assert r.enc_ms > 0 and r.dec_ms > 0 and r.agg_ms >= 0
        assert r.checkpoint in ("saved", "reloaded", "none")


def test_training_is_deterministic(paired_runs):
    cfg, _, plain = paired_runs
    data, init = small_federation()
    again = run_training(replace(cfg, mode="plain-quant"), data, init)
    for a, b in zip(again.model.params, plain.model.params):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_file_written(tmp_path):
    data, init = small_federation()
    path = tmp_path / "best.qcfl"
    run_training(toy_cfg(rounds=2, mode="plain-quant"), data, init, checkpoint_path=path)
    assert path.read_bytes()[:4] == b"QCFL"


def test_client_shard_count_checked():
    data, init = small_federation(clients=2)
    with pytest.raises(ValueError):
        run_training(toy_cfg(num_clients=3), data, init)
