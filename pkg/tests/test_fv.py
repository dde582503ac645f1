import math

import numpy as np
import pytest

from hers import fv
from hers.codec import batch_decode, batch_encode
from hers.counters import OpCounters
from hers.ring import ParameterError, make_rng, production_params

from conftest import negacyclic_oracle


def rand_pt(rng, params):
    return fv.Plaintext(rng.integers(0, params.t, params.n).astype(np.uint64))


def const_pt(params, coeffs):
    c = np.zeros(params.n, dtype=np.uint64)
    for i, v in coeffs.items():
        c[i] = v % params.t
    return fv.Plaintext(c)


class TestKeygen:
    def test_round_trip(self, params, keys, rng):
        sk, pk, _ = keys
        pt = rand_pt(rng, params)
        assert fv.decrypt(fv.encrypt(pt, pk, rng), sk) == pt

    def test_public_key_identity(self, params, keys):
        sk, pk, _ = keys
        r = fv.key_residual(sk, pk.data)
        assert max(abs(int(v)) for v in r) <= math.floor(params.trunc * params.sigma)

    def test_evaluation_key_identity(self, keys):
        fv.verify_keys(*keys)

    def test_secret_is_binary(self, keys):
        assert set(np.unique(keys[0].s).tolist()) <= {0, 1}

    def test_seeds_differ(self, params):
        _, pk1, _ = fv.keygen(params, make_rng(1))
        _, pk2, _ = fv.keygen(params, make_rng(2))
        assert not np.array_equal(pk1.data, pk2.data)

    def test_seed_determinism(self, params):
        _, pk1, _ = fv.keygen(params, make_rng(9))
        _, pk2, _ = fv.keygen(params, make_rng(9))
        assert np.array_equal(pk1.data, pk2.data)


class TestEncryptDecrypt:
    def test_zero(self, params, keys, rng):
        sk, pk, _ = keys
        zero = fv.Plaintext(np.zeros(params.n, np.uint64))
        assert fv.decrypt(fv.encrypt(zero, pk, rng), sk) == zero

    def test_fresh_randomness(self, params, keys, rng):
        _, pk, _ = keys
        pt = rand_pt(rng, params)
        a, b = fv.encrypt(pt, pk, rng), fv.encrypt(pt, pk, rng)
        assert not np.array_equal(a.data, b.data)

    def test_fresh_noise_bound(self, params, keys, rng):
        sk, pk, _ = keys
        bound = 2 * params.trunc * params.sigma * (params.n + 1)
        for _ in range(5):
            pt = rand_pt(rng, params)
            e = fv.decryption_residual(fv.encrypt(pt, pk, rng), sk, pt)
            assert max(abs(int(v)) for v in e) < bound

    def test_sweep(self, params, keys, rng):
        sk, pk, _ = keys
        for _ in range(1000):
            pt = rand_pt(rng, params)
            assert fv.decrypt(fv.encrypt(pt, pk, rng), sk) == pt

    def test_rejects_out_of_range_plaintext(self, params, keys):
        bad = fv.Plaintext(np.full(params.n, params.t, np.uint64))
        with pytest.raises(ParameterError):
            fv.encrypt(bad, keys[1])


class TestAdd:
    def test_plus_zero(self, params, keys, rng):
        sk, pk, _ = keys
        pt = rand_pt(rng, params)
        ct = fv.encrypt(pt, pk, rng)
        z = fv.encrypt(fv.Plaintext(np.zeros(params.n, np.uint64)), pk, rng)
        assert fv.decrypt(fv.cipher_add(ct, z), sk) == pt

    def test_sum_of_ones(self, params, keys, rng):
        sk, pk, _ = keys
        one = const_pt(params, {0: 1})
        acc = fv.encrypt(one, pk, rng)
        c = OpCounters()
        for _ in range(99):
            acc = fv.cipher_add(acc, fv.encrypt(one, pk, rng), c)
        assert fv.decrypt(acc, sk) == const_pt(params, {0: 100})
        assert c.add == 99

    def test_commutative_and_homomorphic(self, params, keys, rng):
        sk, pk, _ = keys
        m1, m2 = rand_pt(rng, params), rand_pt(rng, params)
        a, b = fv.encrypt(m1, pk, rng), fv.encrypt(m2, pk, rng)
        expect = fv.Plaintext((m1.coeffs + m2.coeffs) % params.t)
        assert fv.decrypt(fv.cipher_add(a, b), sk) == expect
        assert fv.decrypt(fv.cipher_add(b, a), sk) == expect

    def test_params_mismatch(self, keys, rng):
        from hers.ring import testing_params

        other = testing_params(2048)
        _, pk2, _ = fv.keygen(other, rng)
        a = fv.encrypt(fv.Plaintext(np.zeros(1024, np.uint64)), keys[1], rng)
        b = fv.encrypt(fv.Plaintext(np.zeros(2048, np.uint64)), pk2, rng)
        with pytest.raises(ParameterError):
            fv.cipher_add(a, b)


class TestMultiply:
    def test_identity(self, params, keys, rng):
        sk, pk, ev = keys
        m = rand_pt(rng, params)
        prod = fv.cipher_multiply(fv.encrypt(const_pt(params, {0: 1}), pk, rng), fv.encrypt(m, pk, rng), ev)
        assert fv.decrypt(prod, sk) == m

    def test_negacyclic_wrap(self, params, keys, rng):
        sk, pk, ev = keys
        x = fv.encrypt(const_pt(params, {1: 1}), pk, rng)
        xn1 = fv.encrypt(const_pt(params, {params.n - 1: 1}), pk, rng)
        assert fv.decrypt(fv.cipher_multiply(x, xn1, ev), sk) == const_pt(params, {0: params.t - 1})

    def test_random_pairs(self, params, keys, rng):
        sk, pk, ev = keys
        c = OpCounters()
        for _ in range(200):
            m1, m2 = rand_pt(rng, params), rand_pt(rng, params)
            prod = fv.cipher_multiply(fv.encrypt(m1, pk, rng), fv.encrypt(m2, pk, rng), ev, c)
            assert np.array_equal(fv.decrypt(prod, sk).coeffs, negacyclic_oracle(m1.coeffs, m2.coeffs, params.t))
        assert c.mult == 200

    def test_relinearized_matches_three_component(self, params, keys, rng):
        sk, pk, ev = keys
        for _ in range(10):
            m1, m2 = rand_pt(rng, params), rand_pt(rng, params)
            a, b = fv.encrypt(m1, pk, rng), fv.encrypt(m2, pk, rng)
            raw = fv.cipher_multiply(a, b, None)
            assert raw.size == 3
            assert fv.decrypt(raw, sk) == fv.decrypt(fv.relinearize(raw, ev), sk)
            assert fv.decrypt(raw, sk) == fv.decrypt(fv.cipher_multiply(a, b, ev), sk)

    def test_level_tracking(self, params, keys, rng):
        _, pk, ev = keys
        a = fv.encrypt(rand_pt(rng, params), pk, rng)
        assert a.level == 0
        assert fv.cipher_multiply(a, a, ev).level == 1


class TestRotation:
    def test_rotate_zero_is_identity(self, params, keys, rot_keys, rng):
        _, pk, _ = keys
        ct = fv.encrypt(rand_pt(rng, params), pk, rng)
        assert fv.rotate_slots(ct, 0, rot_keys) is ct

    def test_rotate_by_one(self, params, keys, rot_keys, rng):
        sk, pk, _ = keys
        half = params.n // 2
        slots = np.arange(1, params.n + 1)
        ct = fv.encrypt(batch_encode(slots, params), pk, rng)
        out = batch_decode(fv.decrypt(fv.rotate_slots(ct, 1, rot_keys), sk), params)
        assert np.array_equal(out[:half], np.roll(slots[:half], -1))
        assert np.array_equal(out[half:], np.roll(slots[half:], -1))

    @pytest.mark.parametrize("step", [2, 16, 256])
    def test_rotate_power_of_two(self, params, keys, rot_keys, rng, step):
        sk, pk, _ = keys
        half = params.n // 2
        slots = rng.integers(-1000, 1000, params.n)
        ct = fv.encrypt(batch_encode(slots, params), pk, rng)
        out = batch_decode(fv.decrypt(fv.rotate_slots(ct, step, rot_keys), sk), params)
        assert np.array_equal(out[:half], np.roll(slots[:half], -step))
        assert np.array_equal(out[half:], np.roll(slots[half:], -step))

    def test_rotate_and_sum(self, params, keys, rot_keys, rng):
        sk, pk, _ = keys
        d = 32
        slots = rng.integers(-500, 500, d)
        ct = fv.encrypt(batch_encode(slots, params), pk, rng)
        c = OpCounters()
        step = 1
        while step < d:
            ct = fv.cipher_add(ct, fv.rotate_slots(ct, step, rot_keys, c), c)
            step *= 2
        assert batch_decode(fv.decrypt(ct, sk), params)[0] == slots.sum()
        assert c.rot == c.add == 5

    def test_missing_key(self, params, keys, rng):
        _, pk, _ = keys
        rk = fv.rotation_keygen(keys[0], steps=[1], rng=rng)
        ct = fv.encrypt(rand_pt(rng, params), pk, rng)
        with pytest.raises(fv.MissingKeyError):
            fv.rotate_slots(ct, 2, rk)


class TestNoiseBudget:
    def test_fresh_production(self):
        params = production_params()
        rng = make_rng(5)
        sk, pk, _ = fv.keygen(params, rng)
        ct = fv.encrypt(rand_pt(rng, params), pk, rng)
        assert fv.noise_budget(ct, sk) > 60

    def test_addition_does_not_increase(self, params, keys, rng):
        sk, pk, _ = keys
        ct = fv.encrypt(rand_pt(rng, params), pk, rng)
        b0 = fv.noise_budget(ct, sk)
        doubled = fv.cipher_add(ct, ct)
        assert fv.noise_budget(doubled, sk) <= b0

    def test_multiplication_strictly_decreases(self, params, keys, rng):
        sk, pk, ev = keys
        a, b = fv.encrypt(rand_pt(rng, params), pk, rng), fv.encrypt(rand_pt(rng, params), pk, rng)
        before = min(fv.noise_budget(a, sk), fv.noise_budget(b, sk))
        assert fv.noise_budget(fv.cipher_multiply(a, b, ev), sk) < before

    def test_over_multiplied_fails(self, params, keys, rng):
        sk, pk, ev = keys
        m = rand_pt(rng, params)
        ct, expect = fv.encrypt(m, pk, rng), m.coeffs
        budgets = [fv.noise_budget(ct, sk)]
        ok = True
        for _ in range(5):
            ct = fv.cipher_multiply(ct, ct, ev)
            expect = negacyclic_oracle(expect, expect, params.t)
            budgets.append(fv.noise_budget(ct, sk))
            ok = np.array_equal(fv.decrypt(ct, sk).coeffs, expect)
            if not ok:
                break
            assert budgets[-1] < budgets[-2] or budgets[-1] == 0
        # a failed decryption is only possible once the budget reads exhausted
        assert not ok
        assert budgets[-1] == 0
        assert all(b > 0 for b in budgets[:-2])

    def test_positive_budget_decrypts_exactly(self, params, keys, rng):
        sk, pk, ev = keys
        m1, m2 = rand_pt(rng, params), rand_pt(rng, params)
        prod = fv.cipher_multiply(fv.encrypt(m1, pk, rng), fv.encrypt(m2, pk, rng), ev)
        assert fv.noise_budget(prod, sk) > 0
        assert np.array_equal(fv.decrypt(prod, sk).coeffs, negacyclic_oracle(m1.coeffs, m2.coeffs, params.t))
