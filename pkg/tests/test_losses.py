import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqtrans import autodiff as ad
from seqtrans import losses
from seqtrans.errors import ConfigError, ShapeError


def uniform_grid(*shape):
    return np.full(shape, -math.log(shape[-1]))


class TestCtcLoss:
    def test_single_blank_frame(self):
        # one frame, empty target, uniform over 3 symbols: the only path is blank
        loss = losses.ctc_loss(uniform_grid(1, 3), ())
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_two_frames_one_label(self):
        # paths (a,a), (a,-), (-,a): 3 * (1/9) = 1/3
        loss = losses.ctc_loss(uniform_grid(2, 3), (1,))
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_matches_oracle_on_random_instances(self, rng):
        import warnings as _warnings

        for _ in range(100):
            t = int(rng.integers(1, 6))
            d = int(rng.integers(2, 5))
            u = int(rng.integers(0, 4))
            target = tuple(int(x) for x in rng.integers(1, d, size=u))
            grid = losses.random_log_prob_grid(rng, t, d)
            with _warnings.catch_warnings():
                _warnings.simplefilter("ignore", RuntimeWarning)  # infeasible draws expected
                got = losses.ctc_loss(grid, target).item()
            want = losses.brute_force_ctc(grid, target)
            if math.isinf(want):
                assert math.isinf(got)
            else:
                assert abs(got - want) <= 1e-9

    def test_infeasible_target_warns_inf(self):
        with pytest.warns(RuntimeWarning, match="infeasible"):
            loss = losses.ctc_loss(uniform_grid(2, 3), (1, 1, 2))
        assert math.isinf(loss.item())

    def test_repeated_labels_need_separating_blank(self, rng):
        # "aa" needs >= 3 frames; exact agreement with the oracle at 3
        grid = losses.random_log_prob_grid(rng, 3, 3)
        got = losses.ctc_loss(grid, (1, 1)).item()
        want = losses.brute_force_ctc(grid, (1, 1))
        assert abs(got - want) <= 1e-9

    def test_gradient_matches_finite_differences(self, rng):
        grid = losses.random_log_prob_grid(rng, 3, 3)
        target = (1, 2)
        params = ad.ParamTree([("grid", ad.Tensor(grid))])
        err = ad.finite_difference_check(
            lambda p: losses.ctc_loss(p["grid"], target), params,
            eps=1e-5, max_components_per_leaf=9)
        assert err <= 1e-4

    def test_rejects_blank_in_target(self):
        with pytest.raises(ConfigError):
            losses.ctc_loss(uniform_grid(2, 3), (0,))

    def test_padding_frames_are_sliced_away(self, rng):
        grid = losses.random_log_prob_grid(rng, 4, 3)
        padded = np.concatenate([grid, rng.normal(size=(2, 3))], axis=0)
        a = losses.ctc_loss(grid, (1,)).item()
        b = losses.ctc_loss(padded[:4], (1,)).item()
        assert a == b


class TestTransducerLoss:
    def test_single_frame_empty_target(self):
        loss = losses.transducer_loss(uniform_grid(1, 1, 3), ())
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_two_paths_case(self):
        # T=2, U=1, uniform 1/3: exactly 2 paths of (1/3)^3 each
        loss = losses.transducer_loss(uniform_grid(2, 2, 3), (1,))
        assert abs(loss.item() - (-math.log(2.0 / 27.0))) < 1e-12

    def test_matches_oracle_on_random_instances(self, rng):
        for _ in range(100):
            t = int(rng.integers(1, 5))
            d = int(rng.integers(2, 5))
            u = int(rng.integers(0, 4))
            target = tuple(int(x) for x in rng.integers(1, d, size=u))
            grid = losses.random_log_prob_grid(rng, t, u + 1, d)
            got = losses.transducer_loss(grid, target).item()
            want = losses.brute_force_rnnt(grid, target)
            assert abs(got - want) <= 1e-9

    def test_alpha_and_beta_agree(self, rng):
        grid = losses.random_log_prob_grid(rng, 4, 3, 4)
        target = (2, 3)
        nll, _ = losses.rnnt_forward_backward(grid, target)
        want = losses.brute_force_rnnt(grid, target)
        assert abs(nll - want) <= 1e-9

    def test_gradient_matches_finite_differences(self, rng):
        grid = losses.random_log_prob_grid(rng, 3, 3, 3)
        target = (1, 2)
        params = ad.ParamTree([("grid", ad.Tensor(grid))])
        err = ad.finite_difference_check(
            lambda p: losses.transducer_loss(p["grid"], target), params,
            eps=1e-5, max_components_per_leaf=27)
        assert err <= 1e-4

    def test_loss_bounded_by_best_single_path(self, rng):
        # total path mass >= any single path's mass
        for _ in range(20):
            t = int(rng.integers(1, 4))
            u = int(rng.integers(0, 3))
            target = tuple(int(x) for x in rng.integers(1, 3, size=u))
            grid = losses.random_log_prob_grid(rng, t, u + 1, 3)
            loss = losses.transducer_loss(grid, target).item()
            best_single = -max_single_path(grid, target)
            assert loss <= best_single + 1e-12

    def test_near_one_hot_grid_equals_single_path(self):
        # push all mass onto one alignment: loss approaches that path's NLL
        grid = np.full((2, 2, 3), -30.0)
        grid[0, 0, 1] = -1e-9   # emit label
        grid[0, 1, 0] = -1e-9   # blank to frame 1
        grid[1, 1, 0] = -1e-9   # terminating blank
        loss = losses.transducer_loss(grid, (1,)).item()
        assert abs(loss - -max_single_path(grid, (1,))) < 1e-6

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            losses.transducer_loss(uniform_grid(2, 2, 3), (1, 2))

    def test_empty_grid_rejected(self):
        with pytest.raises((ConfigError, ShapeError)):
            losses.transducer_loss(np.zeros((0, 1, 3)), ())


def max_single_path(grid, target):
    """Best single alignment score by DP over max instead of logsumexp."""
    t_len, _, _ = grid.shape
    u_len = len(target)
    best = np.full((t_len, u_len + 1), -np.inf)
    best[0, 0] = 0.0
    for t in range(t_len):
        for u in range(u_len + 1):
            if t > 0:
                best[t, u] = max(best[t, u], best[t - 1, u] + grid[t - 1, u, 0])
            if u > 0:
                best[t, u] = max(best[t, u], best[t, u - 1] + grid[t, u - 1, target[u - 1]])
    return best[t_len - 1, u_len] + grid[t_len - 1, u_len, 0]


class TestLmLoss:
    def test_uniform_predictions(self):
        lp = uniform_grid(4, 4)
        loss = losses.lm_loss(lp, (1, 2, 3))
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_one_hot_correct_is_zero(self):
        lp = np.full((3, 4), -50.0)
        target = (2, 1)
        for row, tok in enumerate(target):
            lp[row, tok - 1] = 0.0
        assert abs(losses.lm_loss(lp, target).item()) < 1e-12

    def test_matches_manual_mean(self, rng):
        lp = losses.random_log_prob_grid(rng, 6, 5)
        target = (3, 1, 5, 2, 4)
        got = losses.lm_loss(lp, target).item()
        want = -sum(lp[u, target[u] - 1] for u in range(5)) / 5
        assert abs(got - want) < 1e-12

    def test_empty_target_rejected(self):
        with pytest.raises(ConfigError):
            losses.lm_loss(uniform_grid(1, 4), ())

    def test_gradient(self, rng):
        lp = losses.random_log_prob_grid(rng, 4, 4)
        params = ad.ParamTree([("lp", ad.Tensor(lp))])
        err = ad.finite_difference_check(
            lambda p: losses.lm_loss(p["lp"], (2, 1, 3)), params,
            eps=1e-5, max_components_per_leaf=16)
        assert err <= 1e-4


class TestTotalLoss:
    def test_default_preset_arithmetic(self):
        w = losses.LossWeights(0.5, 1.0, 1.0)
        total = losses.total_loss(ad.Tensor(2.0), ad.Tensor(3.0), ad.Tensor(4.0), w)
        assert total.item() == 8.0

    def test_selector_weights(self):
        w = losses.LossWeights(0.0, 1.0, 0.0)
        total = losses.total_loss(None, ad.Tensor(3.5), None, w)
        assert total.item() == 3.5

    def test_lm_only_preset(self):
        w = losses.LossWeights(0.0, 1.0, 1.0)
        total = losses.total_loss(ad.Tensor(5.0), ad.Tensor(1.0), ad.Tensor(1.0), w)
        assert total.item() == 2.0

    def test_inf_propagates(self):
        w = losses.LossWeights(0.5, 1.0, 1.0)
        total = losses.total_loss(ad.Tensor(math.inf), ad.Tensor(1.0), ad.Tensor(1.0), w)
        assert math.isinf(total.item())

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 5), st.floats(0.01, 5), st.floats(0, 5),
           st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
    def test_linearity(self, a1, a2, a3, x, y, z):
        w = losses.LossWeights(a1, a2, a3)
        total = losses.total_loss(ad.Tensor(x), ad.Tensor(y), ad.Tensor(z), w).item()
        assert abs(total - (a1 * x + a2 * y + a3 * z)) < 1e-9

    def test_superposition(self, rng):
        w = losses.LossWeights(0.5, 1.0, 1.0)
        x1, y1, z1 = rng.normal(size=3)
        x2, y2, z2 = rng.normal(size=3)
        both = losses.total_loss(ad.Tensor(x1 + x2), ad.Tensor(y1 + y2), ad.Tensor(z1 + z2), w).item()
        split = (losses.total_loss(ad.Tensor(x1), ad.Tensor(y1), ad.Tensor(z1), w).item()
                 + losses.total_loss(ad.Tensor(x2), ad.Tensor(y2), ad.Tensor(z2), w).item())
        assert abs(both - split) < 1e-12

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ConfigError):
            losses.LossWeights(0.0, 0.0, 0.0)


class TestOracles:
    def test_ctc_oracle_guard(self):
        with pytest.raises(ConfigError):
            losses.brute_force_ctc(np.zeros((7, 3)), (1,))
        with pytest.raises(ConfigError):
            losses.brute_force_ctc(np.zeros((2, 6)), (1,))

    def test_rnnt_oracle_guard(self):
        with pytest.raises(ConfigError):
            losses.brute_force_rnnt(np.zeros((8, 4, 3)), (1, 1, 1))

    def test_ctc_oracle_trivial_blank(self):
        assert abs(losses.brute_force_ctc(uniform_grid(1, 3), ()) - math.log(3)) < 1e-12

    def test_rnnt_oracle_trivial_cases(self):
        assert abs(losses.brute_force_rnnt(uniform_grid(1, 1, 3), ()) - math.log(3)) < 1e-12
        want = -math.log(2.0 / 27.0)
        assert abs(losses.brute_force_rnnt(uniform_grid(2, 2, 3), (1,)) - want) < 1e-12

    def test_collapse_rules(self):
        assert losses.collapse_ctc((0, 1, 1, 0, 1, 2, 2, 0)) == (1, 1, 2)
        assert losses.collapse_ctc((0, 0, 0)) == ()


class TestLogProbGridProperty:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_grid_slices_log_sum_to_zero(self, seed):
        rng = np.random.default_rng(seed)
        grid = losses.random_log_prob_grid(rng, 3, 2, 4)
        lse = np.log(np.exp(grid).sum(axis=-1))
        assert np.abs(lse).max() < 1e-9
