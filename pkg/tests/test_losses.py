import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, mpf

from clfusion.losses import (
    LossWeights,
    diffusion_loss,
    l2_view_loss,
    total_loss,
    triplet_distances,
    triplet_loss,
    weighted_total,
)
from clfusion.trainer import batch_losses, mine_triplets

from conftest import tiny_net
from gradcheck import spot_check

mp.dps = 40


def brute_force_l2(preds):
    preds = np.asarray(preds, dtype=np.float64)
    total, count = 0.0, 0
    for i in range(len(preds)):
        for j in range(i + 1, len(preds)):
            total += sum((a - b) ** 2 for a, b in zip(preds[i], preds[j]))
            count += 1
    return total / count


class TestDiffusionLoss:
    def test_zero(self):
        x = torch.randn(4, 3, dtype=torch.float64)
        assert float(diffusion_loss(x, x.clone())) == 0.0

    def test_constant_offset(self):
        x = torch.randn(4, 3, dtype=torch.float64)
        assert float(diffusion_loss(x + 0.7, x, "predict_eps")) == pytest.approx(0.49, rel=1e-12)

    def test_extended_precision_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
        acc = mpf(0)
        for x, y in zip(a.ravel(), b.ravel()):
            acc += (mpf(float(x)) - mpf(float(y))) ** 2
        assert float(diffusion_loss(torch.tensor(a), torch.tensor(b))) == pytest.approx(float(acc / a.size), rel=1e-13)

    def test_errors(self):
        with pytest.raises(ValueError):
            diffusion_loss(torch.zeros(2, 3), torch.zeros(3, 2))
        with pytest.raises(ValueError):
            diffusion_loss(torch.zeros(2), torch.zeros(2), "predict_v")


class TestL2ViewLoss:
    def test_identical_views(self):
        p = torch.ones(4, 3)
        assert float(l2_view_loss(p)) == 0.0

    def test_three_four_five(self):
        assert float(l2_view_loss(torch.tensor([[0.0, 0.0], [3.0, 4.0]]))) == 25.0

    @pytest.mark.parametrize("k", [2, 3, 4, 5, 8])
    def test_brute_force_exact_on_integers(self, k):
        # Integer-valued inputs make every intermediate exact, so any summation order agrees bit for bit.
        rng = np.random.default_rng(k)
        p = rng.integers(-5, 6, size=(k, 3)).astype(np.float64)
        assert float(l2_view_loss(torch.tensor(p))) == brute_force_l2(p)

    def test_brute_force_k4_random(self):
        p = np.random.default_rng(1).standard_normal((4, 6))
        assert float(l2_view_loss(torch.tensor(p))) == pytest.approx(brute_force_l2(p), rel=1e-14)

    def test_batch_mean_over_pairs(self):
        rng = np.random.default_rng(2)
        p = rng.standard_normal((3, 4, 2))
        valid = np.array([[1, 1, 1, 1], [1, 0, 1, 0], [0, 0, 0, 1]], dtype=bool)
        pairs = []
        for i in range(3):
            v = p[i][valid[i]]
            pairs += [((v[a] - v[b]) ** 2).sum() for a, b in itertools.combinations(range(len(v)), 2)]
        got = float(l2_view_loss(torch.tensor(p), torch.tensor(valid)))
        assert got == pytest.approx(np.mean(pairs), rel=1e-14)

    def test_no_valid_pairs_is_zero(self):
        p = torch.randn(2, 3, 4)
        valid = torch.tensor([[True, False, False], [False, False, True]])
        assert float(l2_view_loss(p, valid)) == 0.0

    def test_single_view_error(self):
        with pytest.raises(ValueError):
            l2_view_loss(torch.zeros(1, 3))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), c=st.floats(-5, 5))
    def test_permutation_and_homogeneity(self, seed, c):
        rng = np.random.default_rng(seed)
        p = rng.standard_normal((5, 3))
        base = float(l2_view_loss(torch.tensor(p)))
        perm = rng.permutation(5)
        assert float(l2_view_loss(torch.tensor(p[perm]))) == pytest.approx(base, rel=1e-12)
        assert float(l2_view_loss(torch.tensor(c * p))) == pytest.approx(c * c * base, rel=1e-9, abs=1e-12)
        assert base > 0


class TestTriplet:
    def test_distances(self):
        a = torch.tensor([0.0, 0.0])
        d_pos, d_neg = triplet_distances(a, a.clone(), torch.tensor([3.0, 4.0]))
        assert float(d_pos) == 0.0 and float(d_neg) == 5.0

    def test_distance_oracle(self):
        rng = np.random.default_rng(3)
        a, p, n = rng.standard_normal((3, 7))
        d_pos, d_neg = triplet_distances(torch.tensor(a), torch.tensor(p), torch.tensor(n))
        assert float(d_pos) == pytest.approx(float(mp.sqrt(sum((mpf(float(x)) - mpf(float(y))) ** 2 for x, y in zip(a, p)))), rel=1e-14)
        assert float(d_neg) == pytest.approx(float(mp.sqrt(sum((mpf(float(x)) - mpf(float(y))) ** 2 for x, y in zip(a, n)))), rel=1e-14)

    @pytest.mark.parametrize(
        "d_pos, d_neg, m, expected", [(0.2, 0.9, 0.5, 0.0), (0.8, 0.3, 0.5, 1.0), (0.4, 0.4, 0.5, 0.5)]
    )
    def test_hand_cases(self, d_pos, d_neg, m, expected):
        assert float(triplet_loss(d_pos, d_neg, m)) == pytest.approx(expected, abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            triplet_loss(-0.1, 0.2, 0.5)
        with pytest.raises(ValueError):
            triplet_loss(0.1, 0.2, 0.0)
        with pytest.raises(ValueError):
            triplet_distances(torch.zeros(2), torch.zeros(3), torch.zeros(2))

    @settings(max_examples=100, deadline=None)
    @given(
        d_pos=st.floats(0, 10), d_neg=st.floats(0, 10), delta=st.floats(0, 5), m=st.floats(0.01, 3)
    )
    def test_monotonicity(self, d_pos, d_neg, delta, m):
        base = float(triplet_loss(d_pos, d_neg, m))
        assert base >= 0
        assert float(triplet_loss(d_pos, d_neg + delta, m)) <= base
        assert float(triplet_loss(d_pos + delta, d_neg, m)) >= base

    def test_distance_homogeneity(self):
        rng = np.random.default_rng(4)
        a, p, n = (torch.tensor(x) for x in rng.standard_normal((3, 5)))
        d1 = triplet_distances(a, p, n)
        d2 = triplet_distances(-2.5 * a, -2.5 * p, -2.5 * n)
        for x, y in zip(d1, d2):
            assert float(y) == pytest.approx(2.5 * float(x), rel=1e-13)

    def test_zero_branch_gradient(self):
        d_pos = torch.tensor(0.1, requires_grad=True)
        triplet_loss(d_pos, torch.tensor(2.0), 0.5).backward()
        assert float(d_pos.grad) == 0.0


class TestTotalLoss:
    def test_equal_weights(self):
        r = total_loss(0.4, 0.1, 0.2, LossWeights(1.0, 1.0))
        assert r.l_contrast == pytest.approx(0.3, abs=1e-15)
        assert r.l_total == pytest.approx(0.7, abs=1e-15)

    def test_no_contrast(self):
        r = total_loss(0.4, 0.1, 0.2, LossWeights(2.0, 0.0))
        assert r.l_total == 0.8

    def test_zeros(self):
        r = total_loss(0.0, 0.0, 0.0, LossWeights())
        assert r.to_dict() == dict(l_diff=0.0, l_2=0.0, l_tri=0.0, l_contrast=0.0, l_total=0.0)

    def test_non_finite_names_term(self):
        with pytest.raises(FloatingPointError, match="l_tri"):
            total_loss(0.1, 0.2, float("nan"), LossWeights())

    def test_weighted_total_matches_report(self):
        w = LossWeights(0.3, 1.7)
        assert weighted_total(0.5, 0.25, 0.125, w) == total_loss(0.5, 0.25, 0.125, w).l_total

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(margin=0.0)
        with pytest.raises(ValueError):
            LossWeights(lambda_diff=-1.0)


def _grad_setup(kind, small_batch, seed=0):
    net = tiny_net(seed=seed, param_kind=kind)
    rng = np.random.default_rng(seed)
    drop = np.zeros((small_batch.n_identities, small_batch.k), dtype=bool)
    drop[0, 1] = True
    triplets = mine_triplets(~drop, rng)
    return net, drop, triplets


@pytest.mark.parametrize("kind", ["predict_w0", "predict_eps"])
@pytest.mark.parametrize("term", ["l_diff", "l_2", "l_tri", "l_total"])
def test_loss_gradients_match_finite_differences(small_batch, sched, kind, term):
    net, drop, triplets = _grad_setup(kind, small_batch)
    if kind == "predict_eps":
        # Keep the implied w0 well conditioned for the finite-difference step.
        small_batch.t[:] = np.minimum(small_batch.t, 300)
        from clfusion.schedule import q_sample

        small_batch.wt = q_sample(small_batch.w0, small_batch.t, small_batch.eps, sched)
    margin = 50.0  # every triplet on the active side of the hinge
    w = LossWeights(1.0, 1.0, margin)

    def loss_fn():
        l_diff, l_2, l_tri = batch_losses(net, small_batch, sched, drop, triplets, margin=margin)
        return {"l_diff": l_diff, "l_2": l_2, "l_tri": l_tri}.get(term) if term != "l_total" else weighted_total(l_diff, l_2, l_tri, w)

    worst, checked = spot_check(net, loss_fn, per_tensor=16)
    assert checked > 100
    assert worst < 1e-4
