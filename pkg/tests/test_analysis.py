import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hers import analysis as an
from hers import fv
from hers.gallery import empty_gallery
from hers.serialization import ciphertext_to_bytes


class TestInvertScores:
    def test_full_rank_recovery(self):
        rng = np.random.default_rng(0)
        P = an.random_unit((32, 64), rng)
        q = an.random_unit((32,), rng)
        assert an.cosine(an.invert_scores(P, P.T @ q, 1e-6), q) > 0.999

    def test_square_gallery(self):
        rng = np.random.default_rng(1)
        P = an.random_unit((16, 16), rng)
        q = an.random_unit((16,), rng)
        res = an.solve_inversion(P, P.T @ q, 0.0)
        assert an.cosine(res.q_hat, q) > 0.999999 and res.rank == 16
        assert np.isfinite(res.condition) and res.condition >= 1

    def test_closed_form_oracle(self):
        rng = np.random.default_rng(2)
        P = rng.standard_normal((6, 4))
        r = rng.standard_normal(4)
        lam = 0.3
        want = np.linalg.inv(P @ P.T + lam * np.eye(6)) @ P @ r
        res = an.solve_inversion(P, r, lam)
        assert np.allclose(res.raw, want, atol=1e-12)
        assert res.condition == pytest.approx(np.linalg.cond(P @ P.T + lam * np.eye(6)), rel=1e-8)
        assert np.linalg.norm(res.q_hat) == pytest.approx(1.0)

    def test_single_template_gives_template_direction(self):
        rng = np.random.default_rng(3)
        p = an.random_unit((10, 1), rng)
        for _ in range(3):
            q = an.random_unit((10,), rng)
            q_hat = an.invert_scores(p, p.T @ q, 1e-6)
            assert abs(an.cosine(q_hat, p[:, 0])) == pytest.approx(1.0)

    def test_rank_deficient_without_ridge(self):
        P = np.random.default_rng(4).standard_normal((8, 3))
        with pytest.raises(an.RankDeficientError) as err:
            an.solve_inversion(P, np.ones(3), 0.0)
        assert err.value.rank == 3 and err.value.dim == 8
        assert an.solve_inversion(P, np.ones(3), 1e-6).condition > 1e6

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            an.invert_scores(np.eye(3), np.ones(2))
        with pytest.raises(ValueError):
            an.invert_scores(np.eye(3), np.ones(3), -1.0)
        with pytest.raises(ValueError):
            an.invert_scores(np.eye(3), np.zeros(3))


class TestEncryptedGallery:
    def test_serialized_ciphertexts_rejected(self, params):
        blob = ciphertext_to_bytes(fv.trivial_zero(params))
        with pytest.raises(an.GalleryUnavailableError, match="gallery unavailable in plaintext"):
            an.invert_scores(blob, np.ones(3))

    def test_gallery_object_rejected(self, params):
        with pytest.raises(an.GalleryUnavailableError):
            an.invert_scores(empty_gallery(params, 4), np.ones(3))


class TestRecoveryCurve:
    def test_degrades_below_dimension(self):
        rows = an.recovery_curve(32, [0.25, 0.5, 1.0, 2.0], trials=30, rng=np.random.default_rng(5))
        means = [row[2] for row in rows]
        assert means[0] < 0.9
        assert means[2] > 0.999 and means[3] > 0.999
        assert all(a <= b + 1e-9 for a, b in zip(means, means[1:]))
        assert [row[1] for row in rows] == [8, 16, 32, 64]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_nested_galleries_improve_recovery(d, seed):
    # the unnormalized estimate is q projected onto span(P_m); nesting grows the span
    rng = np.random.default_rng(seed)
    P = an.random_unit((d, 2 * d), rng)
    q = an.random_unit((d,), rng)
    errs, fits = [], []
    for m in range(1, 2 * d + 1):
        res = an.solve_inversion(P[:, :m], P[:, :m].T @ q, 1e-10)
        errs.append(np.linalg.norm(q - res.raw))
        fits.append(res.residual)
    assert all(b <= a + 1e-6 for a, b in zip(errs, errs[1:]))
    assert max(fits) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_recovered_vector_is_unit(d, m, seed):
    rng = np.random.default_rng(seed)
    P = an.random_unit((d, m), rng)
    q = an.random_unit((d,), rng)
    assert np.linalg.norm(an.invert_scores(P, P.T @ q)) == pytest.approx(1.0)
