import math

import numpy as np
import pytest

from conftest import random_pose
from oracles import (fan_triangulation_area, matvec_triple_loop,
                     superellipse_boundary_distance_dense, unrolled_cost)
from vpcmemo import camera
from vpcmemo.camera import CameraPose, Intrinsics, Twist
from vpcmemo.errors import DegeneratePolygon, DimensionMismatch, NonPositiveDepth
from vpcmemo.model import (ControlSequence, FeatureModel, KeepInBox,
                           KeepOutRegion, Weights, desired_features,
                           interaction_matrix, max_violation_px,
                           min_distance_to_regions, pattern_area_angle,
                           predict_features, visibility_jacobian,
                           visibility_residuals, visual_config_vector,
                           vpc_cost, vpc_cost_and_gradient)


def finite_diff_interaction(points3d, pose, intr, h=1e-6):
    """Central differences of one plant step w.r.t. each twist axis."""
    cols = []
    for axis in range(6):
        e = np.zeros(6)
        e[axis] = 1.0
        plus = camera.project(points3d, camera.integrate_twist(pose, Twist.from_vector(e), h), intr)
        minus = camera.project(points3d, camera.integrate_twist(pose, Twist.from_vector(-e), h), intr)
        cols.append((plus - minus) / (2 * h))
    return np.column_stack(cols)


class TestInteractionMatrix:
    def test_unit_focal_point_at_center(self):
        intr = Intrinsics(fu=1.0, fv=1.0, cu=0.5, cv=0.5, width=1, height=1)
        L = interaction_matrix([0.5, 0.5], [1.0], intr)
        np.testing.assert_allclose(L, [[-1, 0, 0, 0, -1, 0],
                                       [0, -1, 0, 1, 0, 0]], atol=1e-12)

    def test_depth_scaling(self, default_intrinsics):
        s = np.array([600.0, 430.0])
        L1 = interaction_matrix(s, [1.0], default_intrinsics)
        L2 = interaction_matrix(s, [2.0], default_intrinsics)
        np.testing.assert_allclose(L2[:, :3], 0.5 * L1[:, :3])
        np.testing.assert_allclose(L2[:, 3:], L1[:, 3:])

    def test_matches_finite_difference_plant_jacobian(self, paper_scenario, rng):
        intr = paper_scenario.intrinsics
        for _ in range(30):
            pose = random_pose(rng, position_scale=0.25, angle_scale=0.15)
            depths = camera.feature_depths(paper_scenario, pose)
            if np.any(depths <= 0.1):
                continue
            s = camera.measure(paper_scenario, pose)
            L = interaction_matrix(s, depths, intr)
            L_fd = finite_diff_interaction(paper_scenario.points3d, pose, intr)
            rel = np.linalg.norm(L - L_fd) / np.linalg.norm(L_fd)
            assert rel < 1e-4

    def test_nonpositive_depth_raises(self, default_intrinsics):
        with pytest.raises(NonPositiveDepth):
            interaction_matrix([512.0, 512.0], [0.0], default_intrinsics)


class TestPrediction:
    def test_zero_velocity_keeps_features(self, default_intrinsics):
        s = np.array([100.0, 200.0, 300.0, 400.0])
        L = interaction_matrix(s, [1.0, 1.2], default_intrinsics)
        np.testing.assert_array_equal(predict_features(s, np.zeros(6), 0.033, L), s)

    def test_zero_sampling_time_keeps_features(self, default_intrinsics):
        s = np.array([100.0, 200.0])
        L = interaction_matrix(s, [1.0], default_intrinsics)
        v = np.array([0.1, -0.2, 0.3, 0.01, 0.02, -0.03])
        np.testing.assert_array_equal(predict_features(s, v, 0.0, L), s)

    def test_matches_triple_loop_oracle(self, default_intrinsics, rng):
        s = rng.uniform(100, 900, 8)
        L = interaction_matrix(s, rng.uniform(0.5, 2.0, 4), default_intrinsics)
        v = rng.uniform(-0.5, 0.5, 6)
        expected = s + 0.05 * matvec_triple_loop(L, v)
        np.testing.assert_allclose(predict_features(s, v, 0.05, L), expected, atol=1e-12)

    def test_one_step_error_shrinks_with_sampling_time(self, paper_scenario, rng):
        # First-order model: halving Ts at fixed v cuts the one-step error
        # by at least ~2x on average.
        intr = paper_scenario.intrinsics
        ratios = []
        for _ in range(40):
            pose = random_pose(rng, position_scale=0.2, angle_scale=0.1)
            depths = camera.feature_depths(paper_scenario, pose)
            if np.any(depths <= 0.2):
                continue
            s = camera.measure(paper_scenario, pose)
            v = Twist.from_vector(rng.uniform(-0.4, 0.4, 6))
            L = interaction_matrix(s, depths, intr)
            errs = []
            for Ts in (1 / 30, 1 / 60):
                truth = camera.measure(paper_scenario, camera.integrate_twist(pose, v, Ts))
                pred = predict_features(s, v.as_vector(), Ts, L)
                errs.append(np.linalg.norm(truth - pred))
            if errs[0] > 1e-9:
                ratios.append(errs[0] / max(errs[1], 1e-15))
        assert np.mean(ratios) >= 1.8


class TestDesiredFeatures:
    def test_zero_offset(self):
        s_star = np.arange(8.0)
        np.testing.assert_array_equal(desired_features(s_star, np.zeros(8)), s_star)

    def test_offset_equal_to_target(self):
        s_star = np.arange(8.0)
        np.testing.assert_array_equal(desired_features(s_star, s_star), np.zeros(8))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            desired_features(np.zeros(8), np.zeros(6))


class TestPatternGeometry:
    SQUARE = np.array([0, 0, 100, 0, 100, 100, 0, 100], dtype=float)

    def test_square_area(self):
        area, _ = pattern_area_angle(self.SQUARE)
        assert area == pytest.approx(10000.0)

    def test_rotation_preserves_area_shifts_angle(self):
        pts = self.SQUARE.reshape(-1, 2) - 50.0
        c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
        rot = pts @ np.array([[c, s], [-c * 0 - s, c]]).T  # rotate by 45 deg
        area0, angle0 = pattern_area_angle(self.SQUARE)
        area1, angle1 = pattern_area_angle((rot + 50.0).reshape(-1))
        assert area1 == pytest.approx(area0, rel=1e-12)
        delta = (angle1 - angle0 + math.pi) % (2 * math.pi) - math.pi
        assert abs(abs(delta) - math.pi / 4) < 1e-12

    def test_random_quads_match_fan_triangulation(self, rng):
        for _ in range(50):
            # Convex-ish quad: jittered square corners keep the order simple.
            base = np.array([[0, 0], [100, 0], [100, 100], [0, 100]], dtype=float)
            pts = base + rng.uniform(-20, 20, size=(4, 2))
            area, _ = pattern_area_angle(pts.reshape(-1))
            assert area == pytest.approx(fan_triangulation_area(pts), abs=1e-9)

    def test_collinear_features_raise_with_fallback(self):
        s = np.array([0, 0, 50, 0, 100, 0], dtype=float)
        with pytest.raises(DegeneratePolygon) as exc:
            pattern_area_angle(s)
        assert exc.value.area < 1.0
        assert exc.value.angle == pytest.approx(0.0)  # first edge points along +u

    def test_visual_config_vector_appends_area_angle(self):
        vec = visual_config_vector(self.SQUARE)
        assert vec.shape == (10,)
        assert vec[8] == pytest.approx(10000.0)

    def test_too_few_vertices(self):
        with pytest.raises(DimensionMismatch):
            pattern_area_angle(np.array([1.0, 2.0, 3.0, 4.0]))


class TestVisibilityRegions:
    REGION = KeepOutRegion(cu0=500.0, cv0=500.0, au=100.0, av=80.0, p_exp=4.0)

    def test_center_residual_is_minus_one(self):
        res = visibility_residuals(np.array([500.0, 500.0]), [self.REGION])
        assert res[0] == pytest.approx(-1.0)

    def test_boundary_residual_is_zero(self):
        res = visibility_residuals(np.array([600.0, 500.0]), [self.REGION])
        assert res[0] == pytest.approx(0.0, abs=1e-12)

    def test_point_clear_of_everything_is_all_positive(self):
        regions = [KeepInBox(0, 0, 1024, 1024), self.REGION]
        res = visibility_residuals(np.array([100.0, 900.0]), regions)
        assert np.all(res > 0)

    def test_keep_in_gives_four_residuals_per_point(self):
        # Face-grouped order: u-min gaps, u-max gaps, v-min gaps, v-max gaps.
        res = visibility_residuals(np.array([10.0, 20.0, 30.0, 40.0]),
                                   [KeepInBox(0, 0, 100, 100)])
        np.testing.assert_allclose(res, [10, 30, 90, 70, 20, 40, 80, 60])

    def test_rectangle_limit_distance(self):
        # Nearly rectangular keep-out: a point 25 px left of the flat side.
        region = KeepOutRegion(cu0=500.0, cv0=500.0, au=100.0, av=80.0, p_exp=64.0)
        d = min_distance_to_regions(np.array([375.0, 500.0]), [region])
        expected = superellipse_boundary_distance_dense(500, 500, 100, 80, 64.0, 375.0, 500.0)
        assert d == pytest.approx(expected, abs=1e-2)
        assert d == pytest.approx(25.0, abs=0.1)

    def test_boundary_point_distance_zero(self):
        d = min_distance_to_regions(np.array([600.0, 500.0]), [self.REGION])
        assert d < 1e-6

    def test_inside_point_distance_zero(self):
        assert min_distance_to_regions(np.array([510.0, 505.0]), [self.REGION]) == 0.0

    def test_empty_region_list_is_infinite(self):
        assert min_distance_to_regions(np.array([1.0, 2.0]), []) == math.inf

    def test_random_points_match_dense_oracle(self, rng):
        for _ in range(10):
            u, v = rng.uniform(0, 1024, 2)
            if self.REGION.residual(u, v) <= 0:
                continue
            d = min_distance_to_regions(np.array([u, v]), [self.REGION])
            expected = superellipse_boundary_distance_dense(
                500, 500, 100, 80, 4.0, u, v, n=400_000)
            assert d == pytest.approx(expected, abs=1e-2)

    def test_violation_depth_for_keepin_and_keepout(self):
        regions = [KeepInBox(0, 0, 1024, 1024), self.REGION]
        assert max_violation_px(np.array([-12.0, 500.0]), regions) == pytest.approx(12.0)
        inside = np.array([520.0, 500.0])
        pen = max_violation_px(inside, [self.REGION])
        expected = superellipse_boundary_distance_dense(500, 500, 100, 80, 4.0, 520.0, 500.0,
                                                        n=400_000)
        assert pen == pytest.approx(expected, abs=1e-2)


class TestControlSequence:
    def test_tail_rule(self):
        seq = ControlSequence(np.array([[1, 2, 3, 4, 5, 6]], dtype=float), horizon=4)
        expanded = seq.expanded()
        assert expanded.shape == (3, 6)
        assert np.all(expanded == expanded[0])

    def test_two_free_controls(self):
        free = np.array([[1.0] * 6, [2.0] * 6])
        seq = ControlSequence(free, horizon=5)
        expanded = seq.expanded()
        np.testing.assert_array_equal(expanded[0], free[0])
        np.testing.assert_array_equal(expanded[1], free[1])
        np.testing.assert_array_equal(expanded[3], free[1])

    def test_bad_nc_rejected(self):
        with pytest.raises(ValueError):
            ControlSequence(np.zeros((3, 6)), horizon=3)

    def test_flat_round_trip(self, rng):
        seq = ControlSequence(rng.normal(size=(2, 6)), horizon=7)
        back = ControlSequence.from_flat(seq.as_flat(), 6, 7)
        np.testing.assert_array_equal(back.free, seq.free)


class TestWeights:
    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            Weights(Q=np.array([[1, 2], [0, 1.0]]), R=np.eye(6))

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            Weights(Q=-np.eye(4), R=np.eye(6))

    def test_ramp_schedule(self):
        w = Weights(Q=np.eye(8), R=np.eye(6), ramp_radius=50.0, r_floor=0.1,
                    ramp_cutoff=10.0)
        assert w.r_scale(500.0) == 1.0
        assert w.r_scale(50.0) == 1.0
        assert w.r_scale(30.0) == pytest.approx(0.5)
        assert w.r_scale(10.0) == pytest.approx(0.1)  # floor reached at the cutoff
        assert w.r_scale(0.0) == pytest.approx(0.1)


@pytest.fixture
def toy_model(default_intrinsics):
    return FeatureModel(default_intrinsics, np.array([1.0]), Ts=0.1)


class TestVpcCost:
    def test_zero_cost_at_target_with_zero_controls(self, paper_scenario):
        model = FeatureModel(paper_scenario.intrinsics, paper_scenario.goal_depths,
                             paper_scenario.Ts)
        seq = ControlSequence.zero(6, horizon=3)
        cost = vpc_cost(seq, paper_scenario.s_star, paper_scenario.s_star, model,
                        paper_scenario.weights)
        assert cost == pytest.approx(0.0, abs=1e-15)

    def test_zero_q_leaves_pure_effort(self, toy_model, rng):
        w = Weights(Q=np.zeros((2, 2)), R=np.diag(rng.uniform(0.5, 2, 6)))
        free = rng.uniform(-0.3, 0.3, (1, 6))
        seq = ControlSequence(free, horizon=4)
        cost = vpc_cost(seq, np.array([400.0, 500.0]), np.array([450.0, 480.0]),
                        toy_model, w)
        expected = 3 * float(free[0] @ w.R @ free[0])
        assert cost == pytest.approx(expected, rel=1e-12)

    def test_toy_instance_matches_unrolled_oracle(self, toy_model, rng):
        # Np=3, one point (n_f=2): explicit two-step hand computation.
        w = Weights(Q=2.0 * np.eye(2), R=np.diag([1, 1, 2, 3, 3, 3.0]))
        s0 = np.array([430.0, 560.0])
        s_d = np.array([512.0, 512.0])
        free = rng.uniform(-0.4, 0.4, (1, 6))
        seq = ControlSequence(free, horizon=3)
        got = vpc_cost(seq, s0, s_d, toy_model, w)
        expected = unrolled_cost(
            free, s0, s_d, w.Q, w.R, toy_model.Ts, horizon=3,
            interaction_fn=lambda s: interaction_matrix(s, [1.0], toy_model.intr))
        assert got == pytest.approx(expected, abs=1e-10)

    def test_epsilon_shifts_reference(self, toy_model):
        w = Weights(Q=np.eye(2), R=np.zeros((6, 6)))
        seq = ControlSequence.zero(6, horizon=2)
        s0 = np.array([500.0, 500.0])
        target = np.array([510.0, 500.0])
        eps = np.array([10.0, 0.0])
        # desired = target - eps = s0, so the cost collapses to zero
        assert vpc_cost(seq, s0, target, toy_model, w, epsilon=eps) == pytest.approx(0.0)

    def test_cost_nonnegative(self, toy_model, rng):
        w = Weights(Q=np.eye(2), R=np.eye(6) * 0.5)
        for _ in range(20):
            seq = ControlSequence(rng.uniform(-0.5, 0.5, (1, 6)), horizon=5)
            c = vpc_cost(seq, rng.uniform(0, 1024, 2), rng.uniform(0, 1024, 2),
                         toy_model, w)
            assert c >= 0.0


class TestCostGradient:
    def test_analytic_gradient_matches_finite_differences(self, paper_scenario, rng):
        from vpcmemo.solver import finite_diff_gradient
        model = FeatureModel(paper_scenario.intrinsics, paper_scenario.goal_depths,
                             paper_scenario.Ts)
        w = paper_scenario.weights
        for horizon, n_free in ((3, 1), (6, 1), (5, 2)):
            s_k = paper_scenario.s_star + rng.uniform(-150, 150, 8)
            s_d = paper_scenario.s_star.copy()
            z = rng.uniform(-0.4, 0.4, 6 * n_free)
            _, grad, _, _ = vpc_cost_and_gradient(z, s_k, s_d, model, w, horizon, n_free)
            fd = finite_diff_gradient(
                lambda zz: vpc_cost_and_gradient(zz, s_k, s_d, model, w, horizon, n_free)[0],
                z, step=1e-6)
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 1e-4

    def test_state_jacobians_match_finite_differences(self, paper_scenario, rng):
        model = FeatureModel(paper_scenario.intrinsics, paper_scenario.goal_depths,
                             paper_scenario.Ts)
        s_k = paper_scenario.s_star + rng.uniform(-100, 100, 8)
        z = rng.uniform(-0.3, 0.3, 6)
        seq = ControlSequence.from_flat(z, 6, 4)
        _, jacs = model.rollout_with_jacobians(s_k, seq.expanded(), 1)
        h = 1e-6
        for axis in range(6):
            dz = np.zeros(6)
            dz[axis] = h
            plus = model.rollout(s_k, ControlSequence.from_flat(z + dz, 6, 4).expanded())
            minus = model.rollout(s_k, ControlSequence.from_flat(z - dz, 6, 4).expanded())
            fd = (plus - minus) / (2 * h)
            np.testing.assert_allclose(jacs[:, :, axis], fd, atol=1e-3)


class TestStackedResiduals:
    def test_stacked_matches_per_state_multiset(self, paper_scenario, rng):
        # Same content as the per-state residuals, with keep-out rows scaled
        # into pixel-comparable units for the solver.
        from vpcmemo.model import stacked_visibility_residuals
        model = FeatureModel(paper_scenario.intrinsics, paper_scenario.goal_depths,
                             paper_scenario.Ts)
        regions = paper_scenario.regions()
        s_k = paper_scenario.s_star + rng.uniform(-100, 100, 8)
        states = model.rollout(s_k, ControlSequence.from_flat(
            rng.uniform(-0.3, 0.3, 6), 6, 5).expanded())
        stacked = stacked_visibility_residuals(states, regions)
        expected = []
        for region in regions:
            scale = getattr(region, "solver_scale", 1.0)
            block = np.stack([visibility_residuals(s, [region]) for s in states])
            if hasattr(region, "solver_scale"):
                expected.append(scale * block.ravel())
            else:
                # keep-in: four face groups, each per state then per point
                per_face = block.reshape(len(states), 4, -1)
                expected.append(np.concatenate(
                    [per_face[:, f, :].ravel() for f in range(4)]))
        np.testing.assert_allclose(stacked, np.concatenate(expected), atol=1e-12)

    def test_problem_jacobian_matches_finite_differences(self, paper_scenario, rng):
        from vpcmemo.controller import VpcProblem
        s_k = paper_scenario.s_star + rng.uniform(-120, 120, 8)
        problem = VpcProblem(s_k, paper_scenario.s_star, paper_scenario, 4, 1)
        z = rng.uniform(-0.3, 0.3, 6)
        J = problem.residuals_jacobian(z)
        h = 1e-6
        for axis in range(6):
            dz = np.zeros(6)
            dz[axis] = h
            fd = (problem.residuals(z + dz) - problem.residuals(z - dz)) / (2 * h)
            np.testing.assert_allclose(J[:, axis], fd, atol=1e-4)


class TestVisibilityJacobian:
    def test_matches_finite_differences_through_rollout(self, paper_scenario, rng):
        model = FeatureModel(paper_scenario.intrinsics, paper_scenario.goal_depths,
                             paper_scenario.Ts)
        regions = paper_scenario.regions()
        s_k = paper_scenario.s_star + rng.uniform(-120, 120, 8)
        z = rng.uniform(-0.3, 0.3, 6)

        def stacked(zz):
            states = model.rollout(s_k, ControlSequence.from_flat(zz, 6, 3).expanded())
            return np.concatenate([visibility_residuals(s, regions) for s in states])

        states, jacs = model.rollout_with_jacobians(
            s_k, ControlSequence.from_flat(z, 6, 3).expanded(), 1)
        J = np.vstack([visibility_jacobian(states[i], jacs[i], regions)
                       for i in range(len(states))])
        h = 1e-6
        for axis in range(6):
            dz = np.zeros(6)
            dz[axis] = h
            fd = (stacked(z + dz) - stacked(z - dz)) / (2 * h)
            np.testing.assert_allclose(J[:, axis], fd, atol=1e-4)
