import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfptkd.losses import (DegenerateDistributionError, cross_entropy, decompose_kd, distillation_loss,
                           kl_distillation, nontarget_distribution, soften, split_target)
from dfptkd.tensor import Tensor, backward

from conftest import GRAD_RTOL, fd_gradient, rel_error

mp.mp.dps = 40


def mp_softmax(z, tau):
    e = [mp.e ** (mp.mpf(float(v)) / tau) for v in z]
    s = mp.fsum(e)
    return [x / s for x in e]


def mp_kl(p, q):
    return mp.fsum(a * mp.log(a / b) for a, b in zip(p, q))


class TestSoften:
    def test_symmetric(self):
        assert np.allclose(soften([0.0, 0.0], 1).p, [0.5, 0.5])

    def test_ln2(self):
        assert np.allclose(soften([math.log(2), 0.0], 1).p, [2 / 3, 1 / 3], atol=1e-15)

    def test_high_precision_oracle(self):
        ref = [float(v) for v in mp_softmax([1, 2, 3], 2)]
        assert np.allclose(soften([1.0, 2.0, 3.0], 2).p, ref, rtol=0, atol=1e-15)
        # frozen value of the oracle
        assert ref == pytest.approx([0.18632372, 0.30719589, 0.50648039], abs=1e-8)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            soften([1.0, 2.0], 0.0)
        with pytest.raises(ValueError):
            soften([1.0, 2.0], -1.0)

    def test_large_logits_stable(self):
        p = soften([1e4, 0.0, -1e4], 1.0).p
        assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)

    def test_entropy_monotone_in_tau(self, rng):
        for _ in range(50):
            z = rng.normal(size=6) * 3
            ent = [-(soften(z, t).p * soften(z, t).log_p).sum() for t in (0.5, 1, 2, 4, 8, 16)]
            assert all(b >= a - 1e-12 for a, b in zip(ent, ent[1:]))


class TestSplitAndNontarget:
    def test_split_simple(self):
        s = split_target(soften(np.log([0.7, 0.2, 0.1]), 1), 0)
        assert s.p_t == pytest.approx(0.7) and s.p_not_t == pytest.approx(0.3)

    def test_split_uniform(self):
        s = split_target(soften(np.zeros(5), 1), 3)
        assert s.p_t == pytest.approx(1 / 5) and s.p_not_t == pytest.approx(4 / 5)

    def test_complement_identity(self, rng):
        for _ in range(100):
            p = soften(rng.normal(size=7) * 2, 1.5)
            t = int(rng.integers(7))
            s = split_target(p, t)
            assert abs(s.p_t + s.p_not_t - 1) < 1e-12
            assert s.p_t == p.p[t]

    def test_split_index_error(self):
        with pytest.raises(IndexError):
            split_target(soften([0.0, 1.0], 1), 2)

    def test_nontarget_simple(self):
        q = nontarget_distribution(soften(np.log([0.5, 0.25, 0.25]), 1), 0)
        assert np.allclose(q.q, [0.5, 0.5])

    def test_reconstruction(self, rng):
        for _ in range(100):
            p = soften(rng.normal(size=6), 2.0)
            t = int(rng.integers(6))
            q = nontarget_distribution(p, t).q
            s = split_target(p, t)
            assert abs(q.sum() - 1) < 1e-12
            assert np.allclose(q * s.p_not_t, np.delete(p.p, t), atol=1e-15)

    def test_nontarget_high_precision(self):
        p = mp_softmax([1, 2, 3], 1)
        ref = [float(p[0] / (p[0] + p[1])), float(p[1] / (p[0] + p[1]))]
        assert np.allclose(nontarget_distribution(soften([1.0, 2.0, 3.0], 1), 2).q, ref, rtol=0, atol=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateDistributionError):
            nontarget_distribution(soften([1e6, -1e6], 1.0), 0)


class TestKL:
    def test_identical_zero(self, rng):
        p = soften(rng.normal(size=5), 4)
        assert kl_distillation(p, p) == pytest.approx(0.0, abs=1e-15)

    def test_onehot_limit_ln2(self):
        pt = soften([60.0, 0.0], 1.0)
        ps = soften([0.0, 0.0], 1.0)
        assert kl_distillation(pt, ps, compensate=False) == pytest.approx(math.log(2), abs=1e-12)

    def test_summation_oracle(self, rng):
        for _ in range(50):
            zt, zs = rng.normal(size=8) * 2, rng.normal(size=8) * 2
            pt, ps = mp_softmax(zt, 3), mp_softmax(zs, 3)
            ref = float(mp_kl(pt, ps))
            assert abs(kl_distillation(soften(zt, 3), soften(zs, 3), compensate=False) - ref) < 1e-10
            assert abs(kl_distillation(soften(zt, 3), soften(zs, 3)) - 9 * ref) < 1e-9

    def test_nonnegative(self, rng):
        for _ in range(200):
            assert kl_distillation(soften(rng.normal(size=4), 1), soften(rng.normal(size=4), 1)) >= 0

    def test_temperature_mismatch(self):
        with pytest.raises(ValueError):
            kl_distillation(soften([0.0, 1.0], 1), soften([0.0, 1.0], 2))


class TestDecomposition:
    def test_equal_distributions(self, rng):
        z = rng.normal(size=5)
        b, n, w = decompose_kd(soften(z, 2), soften(z, 2), 1)
        assert b == pytest.approx(0, abs=1e-15) and n == pytest.approx(0, abs=1e-15)
        assert w == pytest.approx(1 - soften(z, 2).p[1])

    def test_identity_every_target(self, rng):
        for _ in range(20):
            pt, ps = soften(rng.normal(size=5) * 2, 2), soften(rng.normal(size=5) * 2, 2)
            kl = kl_distillation(pt, ps, compensate=False)
            for t in range(5):
                b, n, w = decompose_kd(pt, ps, t)
                assert abs(kl - (b + w * n)) < 1e-12

    def test_identity_high_precision(self, rng):
        zt, zs, t = rng.normal(size=6) * 3, rng.normal(size=6) * 3, 2
        pt, ps = mp_softmax(zt, 4), mp_softmax(zs, 4)
        bt, bs = [pt[t], 1 - pt[t]], [ps[t], 1 - ps[t]]
        qt = [p / (1 - pt[t]) for i, p in enumerate(pt) if i != t]
        qs = [p / (1 - ps[t]) for i, p in enumerate(ps) if i != t]
        b, n, w = decompose_kd(soften(zt, 4), soften(zs, 4), t)
        assert abs(b - float(mp_kl(bt, bs))) < 1e-12
        assert abs(n - float(mp_kl(qt, qs))) < 1e-12
        assert abs(w - float(1 - pt[t])) < 1e-15


class TestTrainingLosses:
    def test_ce_uniform(self):
        assert cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10))

    def test_ce_limit(self):
        z = np.zeros(4)
        z[2] = 200.0
        assert cross_entropy(Tensor(z), [2]).item() == pytest.approx(0.0, abs=1e-12)

    def test_ce_logsumexp_oracle(self, rng):
        z = rng.normal(size=(4, 6))
        y = np.array([0, 5, 2, 2])
        ref = np.mean([float(mp.log(mp.fsum(mp.e ** mp.mpf(float(v)) for v in row)) - row[k]) for row, k in zip(z, y)])
        assert cross_entropy(Tensor(z), y).item() == pytest.approx(ref, abs=1e-12)

    def test_ce_bad_label(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_distillation_matches_analysis_kl(self, rng):
        zs, zt = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
        ref = np.mean([kl_distillation(soften(a, 4), soften(b, 4)) for a, b in zip(zt, zs)])
        assert distillation_loss(Tensor(zs), zt, 4.0).item() == pytest.approx(ref, abs=1e-12)
        assert distillation_loss(Tensor(zs), zt, 4.0, compensate=False).item() == pytest.approx(ref / 16, abs=1e-12)

    def test_distillation_target_detached(self, rng):
        zs = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        zt = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        distillation_loss(zs, zt).backward()
        assert zt.grad is None and zs.grad is not None

    @pytest.mark.parametrize("comp", [True, False])
    def test_gradients(self, comp, rng):
        for _ in range(20):
            zs, zt = rng.normal(size=(3, 5)) * 2, rng.normal(size=(3, 5)) * 2
            y = rng.integers(0, 5, size=3)
            f = lambda t: 0.3 * cross_entropy(t, y) + 0.7 * distillation_loss(t, zt, 2.5, comp)
            leaf = Tensor(zs, requires_grad=True)
            g = backward(f(leaf), inputs=[leaf])[leaf]
            assert rel_error(g, fd_gradient(lambda a: f(Tensor(a)).item(), zs)) < GRAD_RTOL


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 12), st.floats(0.25, 10.0), st.integers(0, 2**31 - 1))
def test_property_decomposition(c, tau, seed):
    rng = np.random.default_rng(seed)
    pt, ps = soften(rng.normal(size=c) * 4, tau), soften(rng.normal(size=c) * 4, tau)
    t = int(rng.integers(c))
    b, n, w = decompose_kd(pt, ps, t)
    assert abs(kl_distillation(pt, ps, compensate=False) - (b + w * n)) < 1e-9
    assert b >= -1e-15 and n >= -1e-15
