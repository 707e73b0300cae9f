import os
import stat

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quancrypt import ckks


def vandermonde_slots(coeffs, degree):
    """Evaluate a real-coefficient polynomial at zeta^(5^j), zeta = exp(i*pi/degree)."""
    exps = [pow(5, j, 2 * degree) for j in range(degree // 2)]
    roots = np.exp(1j * np.pi * np.array(exps) / degree)
    V = roots[:, None] ** np.arange(degree)[None, :]
    return V @ np.asarray(coeffs, dtype=np.float64)


class TestContext:
    def test_full_size_parameters(self):
        ctx = ckks.create_context(16384, (60, 40, 40, 40, 60), 2.0**40)
        assert len(ctx.primes) == 5
        assert ctx.slot_count == 8192
        assert not ctx.insecure

    def test_toy_single_prime(self):
        ctx = ckks.create_context(1024, (40,), 2.0**20)
        assert len(ctx.primes) == 1
        assert ctx.data_primes == ctx.primes
        assert ctx.insecure

    def test_desk_primes_congruent(self, desk_ctx):
        assert len(desk_ctx.primes) == 4
        assert all(p % 16384 == 1 for p in desk_ctx.primes)
        # the last prime is reserved and not part of the ciphertext modulus
        assert desk_ctx.data_primes == desk_ctx.primes[:3]

    @pytest.mark.parametrize("degree", [1000, 512, 3072])
    def test_bad_degree(self, degree):
        with pytest.raises(ckks.ParameterError):
            ckks.create_context(degree, (40,), 2.0**20)

    def test_no_prime_available(self):
        # 20-bit candidates 1 mod 2^18 are 2^19+1 (divisible by 3) and 786433
        assert ckks.check_parameters(1 << 17, (20,), 2.0**10) == (786433,)
        with pytest.raises(ckks.ParameterError):
            ckks.check_parameters(1 << 17, (20, 20), 2.0**10)

    def test_scale_must_fit_modulus(self):
        with pytest.raises(ckks.ParameterError):
            ckks.create_context(1024, (30,), 2.0**31)

    def test_empty_moduli(self):
        with pytest.raises(ckks.ParameterError):
            ckks.create_context(1024, (), 2.0**20)


class TestEncoding:
    def test_embedding_matches_vandermonde(self, toy_ctx, rng):
        v = rng.uniform(-4, 4, toy_ctx.slot_count)
        pt = ckks.encode(toy_ctx, v)
        coeffs = toy_ctx.to_centered_ints(pt.poly).astype(np.float64)
        slots = vandermonde_slots(coeffs, toy_ctx.degree) / pt.scale
        # coefficient rounding moves each slot by at most degree/2 / scale
        bound = toy_ctx.degree / 2 / pt.scale
        assert np.max(np.abs(slots.real - v)) < bound
        assert np.max(np.abs(slots.imag)) < bound

    def test_decode_matches_vandermonde_of_arbitrary_poly(self, toy_ctx, rng):
        coeffs = rng.integers(-(2**35), 2**35, toy_ctx.degree)
        pt = ckks.Plaintext(toy_ctx, toy_ctx.poly_from_ints(coeffs), toy_ctx.scale)
        want = vandermonde_slots(coeffs, toy_ctx.degree).real / toy_ctx.scale
        np.testing.assert_allclose(ckks.decode(toy_ctx, pt), want, atol=1e-6)

    def test_zero_vector(self, desk_ctx):
        out = ckks.decode(desk_ctx, ckks.encode(desk_ctx, np.zeros(desk_ctx.slot_count)))
        assert np.max(np.abs(out)) < 1e-9

    def test_unit_range_round_trip(self, desk_ctx, rng):
        v = rng.choice([1.0, -1.0, 0.5], desk_ctx.slot_count)
        out = ckks.decode(desk_ctx, ckks.encode(desk_ctx, v))
        assert np.max(np.abs(out - v)) < 1e-6

    def test_short_vector_pads_with_zeros(self, toy_ctx):
        out = ckks.decode(toy_ctx, ckks.encode(toy_ctx, [1.5, -2.0]))
        np.testing.assert_allclose(out[:2], [1.5, -2.0], atol=1e-6)
        assert np.max(np.abs(out[2:])) < 1e-6

    def test_capacity(self, desk_ctx):
        with pytest.raises(ckks.CapacityError):
            ckks.encode(desk_ctx, np.zeros(desk_ctx.slot_count + 1))

    def test_non_finite(self, toy_ctx):
        with pytest.raises(ValueError):
            ckks.encode(toy_ctx, [1.0, np.nan])
        with pytest.raises(ValueError):
            ckks.encode(toy_ctx, [np.inf])

    def test_magnitude_beyond_headroom(self, toy_ctx):
        with pytest.raises(ckks.CapacityError):
            ckks.encode(toy_ctx, [1e30])


class TestEncryption:
    def test_keygen_deterministic(self, toy_ctx):
        a, b = ckks.keygen(toy_ctx, 3), ckks.keygen(toy_ctx, 3)
        assert ckks.serialize(a[0]) == ckks.serialize(b[0])
        assert ckks.serialize(a[1]) == ckks.serialize(b[1])
        assert ckks.serialize(ckks.keygen(toy_ctx, 4)[1]) != ckks.serialize(a[1])

    def test_secret_is_ternary(self, toy_keys, toy_ctx):
        s = toy_ctx.to_centered_ints(toy_keys[0].s)
        assert set(np.unique(s.astype(np.int64))) <= {-1, 0, 1}

    def test_zero_vector_noise(self, desk_ctx, desk_keys):
        sk, pk = desk_keys
        worst = 0.0
        for seed in range(100):
            ct = ckks.encrypt_values(pk, np.zeros(desk_ctx.slot_count), seed)
            worst = max(worst, np.max(np.abs(ckks.decrypt_values(sk, ct))))
        assert worst < 1e-3

    def test_round_trip_range_256(self, desk_ctx, desk_keys, rng):
        sk, pk = desk_keys
        v = rng.uniform(-256, 256, desk_ctx.slot_count)
        assert np.max(np.abs(ckks.decrypt_values(sk, ckks.encrypt_values(pk, v, 1)) - v)) < 1e-3

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, toy_ctx, toy_keys, seed):
        sk, pk = toy_keys
        v = np.random.default_rng(seed).uniform(-(2**16), 2**16, toy_ctx.slot_count)
        out = ckks.decrypt_values(sk, ckks.encrypt_values(pk, v, seed))
        # toy scale 2^30 with 2^16 inputs: 1e-3 absolute as at desk scale
        assert np.max(np.abs(out - v)) < 1e-3

    def test_probabilistic(self, toy_ctx, toy_keys):
        sk, pk = toy_keys
        pt = ckks.encode(toy_ctx, [3.0, 4.0])
        a, b = ckks.encrypt(pk, pt, 1), ckks.encrypt(pk, pt, 2)
        assert ckks.serialize(a) != ckks.serialize(b)
        np.testing.assert_allclose(ckks.decrypt_values(sk, a, 2), ckks.decrypt_values(sk, b, 2), atol=1e-5)

    def test_context_mismatch(self, toy_ctx, toy_keys, desk_ctx):
        with pytest.raises(ckks.ContextMismatchError):
            ckks.encrypt(toy_keys[1], ckks.encode(desk_ctx, [1.0]))

    def test_decrypt_context_mismatch(self, toy_keys, desk_keys):
        ct = ckks.encrypt_values(desk_keys[1], [1.0], 0)
        with pytest.raises(ckks.ContextMismatchError):
            ckks.decrypt(toy_keys[0], ct)

    def test_wrong_key_gives_garbage(self, toy_ctx, toy_keys):
        other, _ = ckks.keygen(toy_ctx, 999)
        v = np.ones(toy_ctx.slot_count)
        out = ckks.decrypt_values(other, ckks.encrypt_values(toy_keys[1], v, 0))
        # not detected, just noise far larger than the message
        assert np.median(np.abs(out - v)) > 1e3


class TestHomomorphic:
    def test_additive_identity(self, toy_ctx, toy_keys, rng):
        sk, pk = toy_keys
        u = rng.uniform(-10, 10, 100)
        ct = ckks.add_ciphertexts(ckks.encrypt_values(pk, u, 1), ckks.encrypt_values(pk, np.zeros(100), 2))
        assert np.max(np.abs(ckks.decrypt_values(sk, ct, 100) - u)) < 1e-3

    def test_sum_of_sequences(self, desk_ctx, desk_keys):
        sk, pk = desk_keys
        u = np.arange(1, 101, dtype=float)
        ct = ckks.add_ciphertexts(ckks.encrypt_values(pk, u, 1), ckks.encrypt_values(pk, 10 * u, 2))
        assert ct.scale == desk_ctx.scale
        assert np.max(np.abs(ckks.decrypt_values(sk, ct, 100) - 11 * u)) < 1e-3

    def test_fold_add_ten(self, desk_ctx, desk_keys):
        sk, pk = desk_keys
        cts = [ckks.encrypt_values(pk, np.ones(desk_ctx.slot_count), i) for i in range(10)]
        assert np.max(np.abs(ckks.decrypt_values(sk, ckks.sum_ciphertexts(cts)) - 10)) < 1e-2

    @settings(max_examples=10, deadline=None)
    @given(st.integers(2, 64), st.integers(0, 2**16))
    def test_additive_homomorphism_property(self, toy_ctx, toy_keys, n, seed):
        sk, pk = toy_keys
        rng = np.random.default_rng(seed)
        vs = rng.uniform(-100, 100, (n, 64))
        cts = [ckks.encrypt_values(pk, v, seed * 100 + i) for i, v in enumerate(vs)]
        err = np.max(np.abs(ckks.decrypt_values(sk, ckks.sum_ciphertexts(cts), 64) - vs.sum(axis=0)))
        assert err < n * 1e-3

    def test_scale_mismatch(self, toy_ctx, toy_keys):
        pk = toy_keys[1]
        a = ckks.encrypt(pk, ckks.encode(toy_ctx, [1.0]), 1)
        b = ckks.encrypt(pk, ckks.encode(toy_ctx, [1.0], scale=2.0**29), 2)
        with pytest.raises(ckks.ScaleMismatchError):
            ckks.add_ciphertexts(a, b)

    def test_add_context_mismatch(self, toy_keys, desk_keys):
        with pytest.raises(ckks.ContextMismatchError):
            ckks.add_ciphertexts(ckks.encrypt_values(toy_keys[1], [1.0], 0), ckks.encrypt_values(desk_keys[1], [1.0], 0))

    def test_scalar_identity(self, toy_ctx, toy_keys, rng):
        sk, pk = toy_keys
        v = rng.uniform(-5, 5, 50)
        ct = ckks.multiply_plaintext_scalar(ckks.encrypt_values(pk, v, 1), 1.0)
        assert ct.scale == toy_ctx.scale**2
        assert ct.depth == 1
        assert np.max(np.abs(ckks.decrypt_values(sk, ct, 50) - v)) < 1e-3

    def test_scalar_one_tenth(self, desk_ctx, desk_keys):
        sk, pk = desk_keys
        ct = ckks.multiply_plaintext_scalar(ckks.encrypt_values(pk, np.full(desk_ctx.slot_count, 10.0), 3), 0.1)
        assert np.max(np.abs(ckks.decrypt_values(sk, ct) - 1.0)) < 1e-2

    def test_scalar_custom_scale_tracks_product(self, toy_ctx, toy_keys):
        sk, pk = toy_keys
        ct = ckks.multiply_plaintext_scalar(ckks.encrypt_values(pk, [2.0], 0), 3.0, scale=2.0**10)
        assert ct.scale == toy_ctx.scale * 2.0**10
        assert abs(ckks.decrypt_values(sk, ct, 1)[0] - 6.0) < 1e-2

    def test_depth_limit(self, toy_keys):
        ct = ckks.multiply_plaintext_scalar(ckks.encrypt_values(toy_keys[1], [1.0], 0), 2.0)
        with pytest.raises(ckks.DepthError):
            ckks.multiply_plaintext_scalar(ct, 2.0)

    def test_add_after_multiply_keeps_scale(self, toy_ctx, toy_keys):
        sk, pk = toy_keys
        a = ckks.multiply_plaintext_scalar(ckks.encrypt_values(pk, [1.0], 0), 0.5)
        b = ckks.multiply_plaintext_scalar(ckks.encrypt_values(pk, [3.0], 1), 0.5)
        s = ckks.add_ciphertexts(a, b)
        assert s.scale == a.scale
        assert abs(ckks.decrypt_values(sk, s, 1)[0] - 2.0) < 1e-3

    def test_add_plaintext_constant(self, toy_ctx, toy_keys):
        sk, pk = toy_keys
        ct = ckks.add_plaintext(ckks.encrypt_values(pk, [1.0, 2.0], 0), ckks.encode(toy_ctx, [-0.5, -0.5]))
        np.testing.assert_allclose(ckks.decrypt_values(sk, ct, 2), [0.5, 1.5], atol=1e-4)


class TestRingPoly:
    def test_representation_guards(self, toy_ctx):
        p = toy_ctx.poly_from_ints(np.arange(toy_ctx.degree))
        with pytest.raises(ckks.RepresentationError):
            toy_ctx.ntt_inverse(p)
        f = toy_ctx.ntt_forward(p)
        with pytest.raises(ckks.RepresentationError):
            toy_ctx.ntt_forward(f)
        with pytest.raises(ckks.RepresentationError):
            toy_ctx.mul(p, f)
        with pytest.raises(ckks.RepresentationError):
            toy_ctx.add(p, f)
        assert toy_ctx.ntt_inverse(f).equals(p)

    def test_residues_reduced_and_read_only(self, toy_ctx):
        p = toy_ctx.poly_from_ints(np.arange(-5, toy_ctx.degree - 5))
        for row, q in zip(p.residues, toy_ctx.data_primes):
            assert row.max() < q
        with pytest.raises(ValueError):
            p.residues[0, 0] = 1

    def test_centered_crt(self, toy_ctx):
        c = np.arange(-512, 512)
        np.testing.assert_array_equal(toy_ctx.to_centered_ints(toy_ctx.poly_from_ints(c)).astype(np.int64), c)


class TestSerialization:
    def test_round_trip_all_kinds(self, toy_ctx, toy_keys, tmp_path):
        sk, pk = toy_keys
        ct = ckks.encrypt_values(pk, [1.0, 2.0], 5)
        for obj in (sk, pk, ct):
            back = ckks.deserialize(ckks.serialize(obj))
            assert ckks.serialize(back) == ckks.serialize(obj)
        ct2 = ckks.deserialize(ckks.serialize(ct))
        np.testing.assert_allclose(ckks.decrypt_values(sk, ct2, 2), [1.0, 2.0], atol=1e-5)

    def test_frame_header(self, toy_keys):
        data = ckks.serialize(toy_keys[1])
        assert data[:4] == b"QCHE"
        assert int.from_bytes(data[4:8], "little") == 1

    def test_bad_magic_and_truncation(self, toy_keys):
        data = ckks.serialize(toy_keys[1])
        with pytest.raises(ckks.CkksError):
            ckks.deserialize(b"XXXX" + data[4:])
        with pytest.raises(ckks.CkksError):
            ckks.deserialize(data[:-10])

    def test_secret_key_file_mode(self, toy_keys, tmp_path):
        path = tmp_path / "sk.bin"
        ckks.save(toy_keys[0], path)
        if os.name == "posix":
            assert stat.S_IMODE(path.stat().st_mode) == 0o600
        back = ckks.load(path)
        assert ckks.serialize(back) == ckks.serialize(toy_keys[0])
