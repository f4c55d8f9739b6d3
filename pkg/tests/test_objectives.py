"""Objective-level contracts: statistic oracles, hand values, gradients."""

import math

import numpy as np
import pytest
import torch

from oracles import (ep_by_integration, ep_closed_numpy, finite_diff_grad,
                     invariance_naive, simclr_naive, vicreg_naive)
from sonarssl.objectives import (LossConfig, SliceSet, ViewBatch, combined_loss,
                                 epps_pulley_1d, gauss_hermite_nodes,
                                 invariance_loss, objective_terms, sample_slices,
                                 sigreg_loss, simclr_loss, slices_for_step,
                                 vicreg_loss)

EXACT_ZERO_ANCHOR = 1.0 - math.sqrt(2.0) + 3.0 ** -0.5


def random_samples(seed: int, count: int):
    """Mixed moderate-range 1-D batches (the statistic's operating envelope)."""
    rng = np.random.default_rng(seed)
    out = []
    for trial in range(count):
        n = int(rng.integers(2, 513))
        kind = trial % 4
        if kind == 0:
            y = rng.normal(0.0, 1.0, n)
        elif kind == 1:
            y = rng.normal(rng.uniform(-3, 3), rng.uniform(0.5, 2.0), n)
        elif kind == 2:
            y = rng.uniform(-4.0, 4.0, n)
        else:
            y = np.concatenate([rng.normal(-2, 0.5, n // 2 + 1),
                                rng.normal(2, 0.5, n // 2 + 1)])[:n]
        out.append(y)
    return out


class TestEppsPulleyStatistic:
    def test_closed_form_matches_brute_force_integration(self):
        for y in random_samples(seed=101, count=25):
            ours = epps_pulley_1d(torch.from_numpy(y), mode="closed_form").item()
            ref = ep_by_integration(y)
            assert ours == pytest.approx(ref, rel=1e-6, abs=1e-9)

    def test_quadrature_matches_brute_force_integration(self):
        for y in random_samples(seed=202, count=25):
            ours = epps_pulley_1d(torch.from_numpy(y), mode="quadrature").item()
            ref = ep_by_integration(y)
            assert ours == pytest.approx(ref, rel=1e-3, abs=1e-9)

    def test_quadrature_tracks_closed_form(self):
        for y in random_samples(seed=303, count=100):
            ty = torch.from_numpy(y)
            quad = epps_pulley_1d(ty, mode="quadrature").item()
            closed = epps_pulley_1d(ty, mode="closed_form").item()
            assert abs(quad - closed) <= 1e-3 * max(abs(closed), 1e-12)

    def test_point_mass_at_zero_anchor(self):
        y = torch.zeros(17, dtype=torch.float64)
        assert epps_pulley_1d(y, mode="closed_form").item() == pytest.approx(
            EXACT_ZERO_ANCHOR, abs=1e-6)
        # no oscillation here, so the quadrature grid is exact too
        assert epps_pulley_1d(y, mode="quadrature").item() == pytest.approx(
            EXACT_ZERO_ANCHOR, abs=1e-6)

    def test_point_mass_far_from_origin_anchor(self):
        y = torch.full((9,), 100.0, dtype=torch.float64)
        ours = epps_pulley_1d(y, mode="closed_form").item()
        assert ours == pytest.approx(1.0 + 3.0 ** -0.5, abs=1e-6)

    def test_duplicating_sample_leaves_statistic_unchanged(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            y = rng.normal(0.5, 1.3, int(rng.integers(2, 64)))
            doubled = np.concatenate([y, y])
            for mode in ("closed_form", "quadrature"):
                a = epps_pulley_1d(torch.from_numpy(y), mode=mode).item()
                b = epps_pulley_1d(torch.from_numpy(doubled), mode=mode).item()
                assert a == pytest.approx(b, rel=1e-12, abs=1e-12)

    def test_large_gaussian_sample_scores_near_zero(self):
        rng = np.random.default_rng(11)
        y = torch.from_numpy(rng.normal(0.0, 1.0, 10_000))
        gauss = epps_pulley_1d(y, mode="quadrature").item()
        assert gauss <= 0.01
        shifted = epps_pulley_1d(y + 3.0, mode="quadrature").item()
        assert shifted >= 50.0 * gauss

    def test_statistic_is_nonnegative(self):
        for y in random_samples(seed=404, count=20):
            ty = torch.from_numpy(y)
            assert epps_pulley_1d(ty, mode="quadrature").item() >= 0.0
            assert epps_pulley_1d(ty, mode="closed_form").item() >= -1e-12

    def test_input_validation(self):
        with pytest.raises(ValueError):
            epps_pulley_1d(torch.zeros(0))
        with pytest.raises(ValueError):
            epps_pulley_1d(torch.zeros(3, 3))
        with pytest.raises(ValueError):
            epps_pulley_1d(torch.tensor([0.0, float("nan")]))
        with pytest.raises(ValueError):
            epps_pulley_1d(torch.zeros(4), mode="exact")

    def test_quadrature_weights_integrate_to_one(self):
        nodes, weights = gauss_hermite_nodes(65)
        assert weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(weights > 0)
        # the rule should reproduce low normal moments exactly
        assert (weights * nodes ** 2).sum() == pytest.approx(1.0, abs=1e-10)
        assert (weights * nodes ** 4).sum() == pytest.approx(3.0, abs=1e-9)


class TestInvarianceLoss:
    def test_identical_views_give_zero(self):
        z = torch.randn(8, 1, 16, dtype=torch.float64).repeat(1, 4, 1)
        assert invariance_loss(ViewBatch(z)).item() == 0.0

    def test_hand_computed_two_view_case(self):
        # one patch, two scalar views 0 and 2: mean 1, loss (1 + 1) / 2 = 1
        z = torch.tensor([[[0.0], [2.0]]], dtype=torch.float64)
        assert invariance_loss(ViewBatch(z)).item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(23)
        z = rng.normal(size=(6, 3, 5))
        ours = invariance_loss(ViewBatch(torch.from_numpy(z))).item()
        assert ours == pytest.approx(invariance_naive(z), rel=1e-12)

    def test_quadratic_scaling(self):
        rng = np.random.default_rng(29)
        z = torch.from_numpy(rng.normal(size=(5, 4, 8)))
        base = invariance_loss(ViewBatch(z)).item()
        for alpha in (0.5, 2.0, 7.25):
            scaled = invariance_loss(ViewBatch(alpha * z)).item()
            assert scaled == pytest.approx(alpha ** 2 * base, rel=1e-10)

    def test_view_batch_validation(self):
        with pytest.raises(ValueError):
            ViewBatch(torch.zeros(4, 1, 8))  # one view
        with pytest.raises(ValueError):
            ViewBatch(torch.zeros(4, 8))
        bad = torch.zeros(2, 2, 2)
        bad[0, 0, 0] = float("inf")
        with pytest.raises(ValueError):
            ViewBatch(bad)


class TestSliceSet:
    def test_directions_are_unit_and_deterministic(self):
        a = sample_slices(dim=16, n_slices=64, seed=5)
        b = sample_slices(dim=16, n_slices=64, seed=5)
        assert torch.equal(a.directions, b.directions)
        norms = a.directions.norm(dim=1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-12)

    def test_different_steps_draw_different_directions(self):
        a = slices_for_step(run_seed=1, step=0, dim=8, n_slices=16)
        b = slices_for_step(run_seed=1, step=1, dim=8, n_slices=16)
        assert not torch.allclose(a.directions, b.directions)
        again = slices_for_step(run_seed=1, step=0, dim=8, n_slices=16)
        assert torch.equal(a.directions, again.directions)

    def test_constructor_rejects_bad_directions(self):
        nodes, weights = gauss_hermite_nodes(9)
        with pytest.raises(ValueError):
            SliceSet(directions=torch.ones(4, 3) * 2.0,
                     nodes=torch.from_numpy(nodes),
                     weights=torch.from_numpy(weights), seed=0)


class TestSigregLoss:
    def test_all_zero_embeddings_hit_the_anchor(self):
        z = torch.zeros(4, 2, 16, dtype=torch.float64)
        slices = sample_slices(16, 32, seed=3)
        val = sigreg_loss(ViewBatch(z), slices, mode="closed_form").item()
        assert val == pytest.approx(EXACT_ZERO_ANCHOR, abs=1e-6)

    def test_standard_normal_embeddings_score_small(self):
        gen = torch.Generator().manual_seed(17)
        z = torch.randn(1024, 4, 16, generator=gen, dtype=torch.float64)
        slices = sample_slices(16, 64, seed=9)
        val = sigreg_loss(ViewBatch(z), slices, mode="quadrature").item()
        assert val <= 0.02

    def test_quadrature_and_closed_form_agree(self):
        gen = torch.Generator().manual_seed(31)
        z = torch.randn(32, 2, 8, generator=gen, dtype=torch.float64) * 1.3 + 0.4
        slices = sample_slices(8, 16, seed=12)
        batch = ViewBatch(z)
        quad = sigreg_loss(batch, slices, mode="quadrature").item()
        closed = sigreg_loss(batch, slices, mode="closed_form").item()
        assert quad == pytest.approx(closed, rel=1e-3)

    def test_rotation_invariance_in_expectation(self):
        # slice directions are uniform on the sphere, so a fixed orthogonal
        # rotation of the embeddings must not move the expected score
        gen = torch.Generator().manual_seed(41)
        z = torch.randn(64, 2, 8, generator=gen, dtype=torch.float64)
        q, _ = torch.linalg.qr(torch.randn(8, 8, generator=gen, dtype=torch.float64))
        rotated = ViewBatch(z @ q)
        base = ViewBatch(z)
        diffs = []
        for k in range(160):
            slices = sample_slices(8, 16, seed=9000 + k)
            diffs.append(sigreg_loss(base, slices).item()
                         - sigreg_loss(rotated, slices).item())
        diffs = np.array(diffs)
        stderr = diffs.std(ddof=1) / math.sqrt(len(diffs))
        assert abs(diffs.mean()) <= 3.0 * stderr + 1e-12

    def test_slice_count_controls_estimator_variance(self):
        # the loss is a mean of i.i.d. per-slice scores, so its variance
        # across independent slice sets should fall like 1 / n_slices
        gen = torch.Generator().manual_seed(43)
        z = torch.randn(48, 2, 8, generator=gen, dtype=torch.float64) * 1.4
        batch = ViewBatch(z)
        variances = {}
        for m in (16, 64, 256):
            vals = [sigreg_loss(batch, sample_slices(8, m, seed=500 * m + r)).item()
                    for r in range(220)]
            variances[m] = float(np.var(vals, ddof=1))
        assert 2.2 <= variances[16] / variances[64] <= 7.3
        assert 2.2 <= variances[64] / variances[256] <= 7.3

    def test_score_nondecreasing_in_mean_shift(self):
        gen = torch.Generator().manual_seed(47)
        noise = torch.randn(512, 2, 8, generator=gen, dtype=torch.float64)
        slices = sample_slices(8, 64, seed=77)
        scores = []
        for mu in (0.0, 1.0, 2.0, 3.0):
            batch = ViewBatch(noise + mu)
            scores.append(sigreg_loss(batch, slices).item())
        assert all(a <= b + 1e-9 for a, b in zip(scores, scores[1:]))

    def test_dimension_mismatch_rejected(self):
        z = torch.zeros(4, 2, 8)
        slices = sample_slices(16, 8, seed=1)
        with pytest.raises(ValueError):
            sigreg_loss(ViewBatch(z), slices)


class TestCombinedLoss:
    def test_convex_combination_identity(self):
        gen = torch.Generator().manual_seed(53)
        z = torch.randn(16, 3, 8, generator=gen, dtype=torch.float64)
        slices = sample_slices(8, 16, seed=2)
        batch = ViewBatch(z)
        for w in (0.0, 0.1, 0.5, 1.0):
            cfg = LossConfig(reg_weight=w)
            parts = combined_loss(batch, slices, cfg)
            expected = ((1.0 - w) * parts["invariance"] + w * parts["gaussian_fit"])
            assert parts["total"].item() == pytest.approx(expected.item(), rel=1e-12)

    def test_weight_edge_cases_isolate_terms(self):
        gen = torch.Generator().manual_seed(59)
        z = torch.randn(8, 2, 8, generator=gen, dtype=torch.float64)
        slices = sample_slices(8, 8, seed=4)
        batch = ViewBatch(z)
        off = combined_loss(batch, slices, LossConfig(reg_weight=0.0))
        assert off["total"].item() == pytest.approx(off["invariance"].item(), rel=1e-12)
        on = combined_loss(batch, slices, LossConfig(reg_weight=1.0))
        assert on["total"].item() == pytest.approx(on["gaussian_fit"].item(), rel=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(reg_weight=1.5)
        with pytest.raises(ValueError):
            LossConfig(objective="byol")
        with pytest.raises(ValueError):
            LossConfig(ep_mode="montecarlo")
        with pytest.raises(ValueError):
            LossConfig(simclr_temperature=0.0)


class TestVicregLoss:
    def test_matches_naive_reimplementation(self):
        rng = np.random.default_rng(61)
        za = rng.normal(size=(32, 12))
        zb = rng.normal(size=(32, 12))
        ours = vicreg_loss(torch.from_numpy(za), torch.from_numpy(zb))
        ref = vicreg_naive(za, zb)
        for key in ("total", "invariance", "variance", "covariance"):
            assert ours[key].item() == pytest.approx(ref[key], rel=1e-6, abs=1e-10)

    def test_constant_batch_variance_hinge(self):
        # every sample identical: std is sqrt(eps), so the hinge sits at
        # gamma - sqrt(eps) = 0.99 per dimension with the default stabilizer
        z = torch.ones(16, 6, dtype=torch.float64) * 0.3
        parts = vicreg_loss(z.clone(), z.clone())
        assert parts["variance"].item() == pytest.approx(1.0 - 1e-2, abs=1e-9)
        assert parts["variance"].item() == pytest.approx(1.0, abs=0.02)
        assert parts["invariance"].item() == 0.0
        assert parts["covariance"].item() == 0.0

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            vicreg_loss(torch.zeros(4, 3), torch.zeros(5, 3))
        with pytest.raises(ValueError):
            vicreg_loss(torch.zeros(1, 3), torch.zeros(1, 3))


class TestSimclrLoss:
    def test_all_identical_embeddings_hit_log_bound(self):
        for n in (2, 8, 33):
            z = torch.ones(n, 16, dtype=torch.float64)
            val = simclr_loss(z.clone(), z.clone(), temperature=0.2).item()
            assert val == pytest.approx(math.log(2 * n - 1), rel=1e-9)

    def test_orthogonal_negatives_low_temperature_vanishes(self):
        za = torch.eye(4, dtype=torch.float64)[:2]
        zb = za.clone()
        val = simclr_loss(za, zb, temperature=0.02).item()
        assert val == pytest.approx(0.0, abs=1e-8)

    def test_matches_naive_reimplementation(self):
        rng = np.random.default_rng(67)
        za = rng.normal(size=(9, 7))
        zb = rng.normal(size=(9, 7))
        for tau in (0.1, 0.5, 2.0):
            ours = simclr_loss(torch.from_numpy(za), torch.from_numpy(zb), tau).item()
            assert ours == pytest.approx(simclr_naive(za, zb, tau), rel=1e-9)

    def test_validation(self):
        with pytest.raises(ValueError):
            simclr_loss(torch.ones(4, 3), torch.ones(4, 3), temperature=0.0)
        with pytest.raises(ValueError):
            simclr_loss(torch.ones(4, 3), torch.ones(4, 3), temperature=-1.0)
        bad = torch.ones(4, 3)
        bad[1] = 0.0
        with pytest.raises(ValueError):
            simclr_loss(bad, torch.ones(4, 3), temperature=0.5)


class TestGradients:
    def gradient_gap(self, f, z0):
        z = z0.clone().requires_grad_(True)
        f(z).backward()
        numeric = finite_diff_grad(lambda x: f(x).item(), z0)
        return float((z.grad - numeric).abs().max())

    def test_combined_loss_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(71)
        z0 = torch.randn(3, 2, 4, generator=gen, dtype=torch.float64)
        slices = sample_slices(4, 8, seed=6)
        cfg = LossConfig(reg_weight=0.1)
        for mode in ("quadrature", "closed_form"):
            c = LossConfig(reg_weight=cfg.reg_weight, ep_mode=mode)
            gap = self.gradient_gap(
                lambda x, c=c: combined_loss(ViewBatch(x), slices, c)["total"], z0)
            assert gap <= 1e-4

    def test_vicreg_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(73)
        z0 = torch.randn(2, 6, 5, generator=gen, dtype=torch.float64)
        gap = self.gradient_gap(
            lambda x: vicreg_loss(x[0], x[1])["total"], z0)
        assert gap <= 1e-4

    def test_simclr_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(79)
        z0 = torch.randn(2, 5, 4, generator=gen, dtype=torch.float64)
        gap = self.gradient_gap(
            lambda x: simclr_loss(x[0], x[1], temperature=0.3), z0)
        assert gap <= 1e-4


class TestObjectiveDispatch:
    def test_sigreg_requires_slices(self):
        z = torch.randn(4, 2, 8, dtype=torch.float64)
        with pytest.raises(ValueError):
            objective_terms(ViewBatch(z), LossConfig(objective="sigreg"))

    def test_baselines_consume_first_two_views(self):
        gen = torch.Generator().manual_seed(83)
        z = torch.randn(8, 4, 6, generator=gen, dtype=torch.float64)
        batch = ViewBatch(z)
        got = objective_terms(batch, LossConfig(objective="vicreg"))
        want = vicreg_loss(z[:, 0], z[:, 1])
        assert got["total"].item() == pytest.approx(want["total"].item(), rel=1e-12)
        got = objective_terms(batch, LossConfig(objective="simclr"))
        want_s = simclr_loss(z[:, 0], z[:, 1], temperature=0.2)
        assert got["total"].item() == pytest.approx(want_s.item(), rel=1e-12)
