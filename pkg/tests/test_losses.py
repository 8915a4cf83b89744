import math
from types import SimpleNamespace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locbox.geometry import GridBox
from locbox.inference import EPS, ProbMaps, heads_for
from locbox.losses import (
    borders_loss,
    inout_loss,
    lambda_weights,
    sample_loss,
    sigmoid,
    total_loss,
)
from locbox.rng import SplitMix64
from locbox.targets import TargetVectors


def direct_loss(p, T, kind):
    # Oracle: the per-entry negative log-likelihood written out term by term.
    total = 0.0
    if kind in ("inout", "combined"):
        for h in ("px", "py"):
            for q, t in zip(p[h], T[h]):
                total -= t * math.log(q) + (1 - t) * math.log(1 - q)
    if kind in ("borders", "combined"):
        M = len(T["pl"])
        lm = 0.5 * M / (M - 1)
        lp = (M - 1) * lm
        for h in ("pl", "pr", "pt", "pb"):
            for q, t in zip(p[h], T[h]):
                total -= lp * t * math.log(q) + lm * (1 - t) * math.log(1 - q)
    return total


class TestLambda:
    def test_m28(self):
        lp, lm = lambda_weights(28)
        assert lm == pytest.approx(14 / 27, abs=1e-12)
        assert lp == 14.0

    def test_m2(self):
        assert lambda_weights(2) == (1.0, 1.0)

    @given(st.integers(2, 10_000))
    def test_balance_identity(self, M):
        lp, lm = lambda_weights(M)
        assert lp == M / 2
        assert lm * (M - 1) == pytest.approx(M / 2, rel=1e-15)

    def test_m1_rejected(self):
        with pytest.raises(ValueError):
            lambda_weights(1)


class TestClosedForms:
    M = 28
    T = TargetVectors.build(GridBox(4, 6, 10, 12), 28, "combined")

    def test_inout_uniform(self):
        r = inout_loss(ProbMaps.uniform("inout", self.M), self.T)
        assert r.value == pytest.approx(2 * self.M * math.log(2), abs=1e-9)
        assert r.value == pytest.approx(38.8162, abs=1e-4)

    def test_inout_hot_gradient(self):
        r = inout_loss(ProbMaps.uniform("inout", self.M), self.T)
        assert r.grad_logits["px"][3] == -0.5
        assert r.grad_logits["px"][0] == 0.5

    def test_borders_uniform(self):
        r = borders_loss(ProbMaps.uniform("borders", self.M), self.T)
        assert r.value == pytest.approx(4 * self.M * math.log(2), abs=1e-9)
        assert r.value == pytest.approx(77.6325, abs=1e-4)

    def test_borders_hot_gradient(self):
        r = borders_loss(ProbMaps.uniform("borders", self.M), self.T)
        assert r.grad_logits["pl"][3] == pytest.approx(-7.0, abs=1e-12)
        assert r.grad_logits["pl"][0] == pytest.approx(0.5 * 14 / 27, abs=1e-12)

    def test_hot_and_cold_gradients_balance(self):
        g = borders_loss(ProbMaps.uniform("borders", self.M), self.T).grad_logits["pl"]
        hot = self.T["pl"] == 1
        assert abs(g[hot].sum()) == pytest.approx(g[~hot].sum(), abs=1e-12)

    @pytest.mark.parametrize("kind", ["inout", "borders", "combined"])
    def test_near_zero_at_targets(self, kind):
        T = TargetVectors.build(GridBox(2, 2, 9, 20), self.M, kind)
        v = sample_loss(ProbMaps.from_targets(T), T).value
        # Each of at most 6M entries contributes at most (M/2) * -log(1 - EPS).
        assert 0 <= v <= 6 * self.M * (self.M / 2) * -math.log(1 - EPS)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            inout_loss(ProbMaps.uniform("inout", 10), self.T)


@settings(max_examples=50)
@given(st.integers(0, 2**32), st.sampled_from(["inout", "borders", "combined"]), st.integers(2, 30))
def test_matches_direct_sum(seed, kind, M):
    rng = SplitMix64(seed)
    l = rng.integers(1, M + 1)
    t = rng.integers(1, M + 1)
    T = TargetVectors.build(GridBox(l, t, rng.integers(l, M + 1), rng.integers(t, M + 1)), M, kind)
    p = {h: 0.02 + 0.96 * rng.random_array(M) for h in heads_for(kind)}
    assert sample_loss(p, T).value == pytest.approx(direct_loss(p, T, kind), rel=1e-12, abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32), st.sampled_from(["inout", "borders", "combined"]))
def test_gradient_matches_central_differences(seed, kind):
    rng = SplitMix64(seed)
    M = 12
    T = TargetVectors.build(GridBox(3, 2, 8, 11), M, kind)
    z = {h: rng.normal_array(M) * 2 for h in heads_for(kind)}
    grads = sample_loss({h: sigmoid(v) for h, v in z.items()}, T).grad_logits
    h_step = 1e-5
    for name, vec in z.items():
        for i in range(M):
            zp = {k: v.copy() for k, v in z.items()}
            zm = {k: v.copy() for k, v in z.items()}
            zp[name][i] += h_step
            zm[name][i] -= h_step
            num = (
                sample_loss({k: sigmoid(v) for k, v in zp.items()}, T).value
                - sample_loss({k: sigmoid(v) for k, v in zm.items()}, T).value
            ) / (2 * h_step)
            assert abs(num - grads[name][i]) <= 1e-4 * max(1.0, abs(grads[name][i]))


class TestTotalLoss:
    def make(self, g, p):
        T = TargetVectors.build(g, 6, "inout")
        return SimpleNamespace(target=T, p=p)

    def test_single_and_mean(self):
        rng = SplitMix64(3)
        a = self.make(GridBox(1, 1, 3, 3), {h: rng.random_array(6) * 0.9 + 0.05 for h in ("px", "py")})
        b = self.make(GridBox(2, 4, 6, 6), {h: rng.random_array(6) * 0.9 + 0.05 for h in ("px", "py")})
        model = lambda s: s.p  # noqa: E731
        va = direct_loss(a.p, a.target, "inout")
        vb = direct_loss(b.p, b.target, "inout")
        assert total_loss([a], model) == pytest.approx(va, rel=1e-12)
        assert total_loss([a, b], model) == pytest.approx((va + vb) / 2, rel=1e-12)
        assert total_loss([a, b, a, b], model) == pytest.approx(total_loss([a, b], model), rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            total_loss([], lambda s: s)
