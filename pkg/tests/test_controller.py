import numpy as np
import pytest

from vpcmemo import regress
from vpcmemo.camera import CameraPose
from vpcmemo.controller import (FailureReason, Strategy, VpcProblem,
                                rms_error, run_episode, vpc_step)
from vpcmemo.memory import MemoryStore, generate_initial_features
from vpcmemo.model import ControlSequence, min_distance_to_regions, visual_config_vector
from vpcmemo.solver import SolverConfig


def store_with_row(x_row, y_row):
    meta = {"n_f": 8, "q": 6, "n_s": 5, "Np": 10, "seed": 0, "scenario": "test"}
    return MemoryStore(np.atleast_2d(x_row), np.atleast_2d(y_row),
                       np.array([0]), np.array([0]), meta)


@pytest.fixture
def near_region_state(paper_scenario):
    """A feature vector within the 20 px trigger of a keep-out."""
    region = paper_scenario.keepouts[0]
    s = paper_scenario.s_star.copy()
    shift_u = region.cu0 - 512.0
    shift_v = (region.cv0 + region.av + 10.0) - 392.0  # top points 10 px below it
    s[0::2] += shift_u
    s[1::2] += shift_v
    d = min_distance_to_regions(s, paper_scenario.keepouts)
    assert 0 < d < 20.0
    return s


class TestVpcStep:
    def test_far_from_regions_keeps_goal_target(self, paper_scenario, monkeypatch):
        calls = []
        monkeypatch.setattr(regress, "knn_query",
                            lambda *a, **k: calls.append(1))
        s = paper_scenario.s_star + 4.0  # ~79 px from the nearest keep-out
        assert min_distance_to_regions(s, paper_scenario.keepouts) > 20.0
        strategy = Strategy("knn_memory", memory=store_with_row(np.zeros(10), np.zeros(14)))
        _, _, diag = vpc_step(s, None, strategy, paper_scenario, SolverConfig())
        assert not diag.memory_active and diag.waypoint is None
        assert not calls  # the memory was never touched

    def test_near_region_uses_memory_warm_start_and_waypoint(
            self, paper_scenario, near_region_state):
        s = near_region_state
        waypoint = paper_scenario.s_star + 3.0
        y_row = np.concatenate([[0.01, -0.02, 0.03, 0.0, 0.0, 0.0], waypoint])
        strategy = Strategy("knn_memory",
                            memory=store_with_row(visual_config_vector(s), y_row))
        _, _, diag = vpc_step(s, None, strategy, paper_scenario, SolverConfig())
        assert diag.memory_active
        np.testing.assert_array_equal(diag.waypoint, waypoint)

    def test_gpr_branch_queries_model(self, paper_scenario, near_region_state,
                                      monkeypatch):
        seen = {}

        def fake_gpr_query(model, x_hat):
            seen["x"] = x_hat
            y = np.concatenate([np.zeros(6), paper_scenario.s_star])
            return regress.QueryResult(y_hat=y, regressor="gpr", query_time=0.0)

        monkeypatch.setattr(regress, "gpr_query", fake_gpr_query)
        strategy = Strategy("gpr_memory", gpr=object())
        _, _, diag = vpc_step(near_region_state, None, strategy, paper_scenario,
                              SolverConfig())
        assert diag.memory_active
        np.testing.assert_array_equal(seen["x"], visual_config_vector(near_region_state))

    def test_at_goal_with_zero_warm_start_stays_put(self, paper_scenario):
        applied, seq, diag = vpc_step(paper_scenario.s_star, None,
                                      Strategy("prev_iteration"), paper_scenario,
                                      SolverConfig())
        assert np.linalg.norm(applied.as_vector()) < 1e-6
        assert diag.cost == pytest.approx(0.0, abs=1e-9)

    def test_branch_decision_is_deterministic(self, paper_scenario, near_region_state):
        strategy = Strategy("knn_memory",
                            memory=store_with_row(visual_config_vector(near_region_state),
                                                  np.concatenate([np.zeros(6),
                                                                  paper_scenario.s_star])))
        flags = {vpc_step(near_region_state, None, strategy, paper_scenario,
                          SolverConfig())[2].memory_active for _ in range(3)}
        assert flags == {True}

    def test_warm_start_has_free_variable_dimension(self, paper_scenario):
        scn = paper_scenario.with_horizon(5, 2)
        _, seq, _ = vpc_step(scn.s_star + 10.0, None, Strategy("prev_iteration"),
                             scn, SolverConfig())
        assert seq.as_flat().shape == (scn.q * scn.Nc,)

    def test_model_offset_shifts_the_reference(self, paper_scenario):
        s = paper_scenario.s_star + 30.0
        eps = np.full(8, 5.0)
        problem_plain = VpcProblem(s, paper_scenario.s_star, paper_scenario, 3, 1)
        problem_eps = VpcProblem(s, paper_scenario.s_star, paper_scenario, 3, 1,
                                 epsilon=eps)
        np.testing.assert_array_equal(problem_eps.s_d, problem_plain.s_d - eps)


class TestRunEpisode:
    def test_start_at_goal_succeeds_without_motion(self, paper_scenario):
        ep = run_episode(paper_scenario, Strategy("prev_iteration"),
                         paper_scenario.goal_pose)
        assert ep.success and ep.steps == 0
        assert ep.failure_reason is FailureReason.NONE
        assert len(ep.feature_trajectory) == 1

    def test_start_inside_keepout_fails_immediately(self, paper_scenario):
        from vpcmemo import camera
        from vpcmemo.model import max_violation_px
        region = paper_scenario.keepouts[0]
        # Camera shifted so the first pattern corner lands at the region center.
        du = (region.cu0 - paper_scenario.s_star[0]) / 800.0
        dv = (region.cv0 - paper_scenario.s_star[1]) / 800.0
        pose = CameraPose(np.array([-du, -dv, 0.0]), np.array([1.0, 0, 0, 0]))
        s = camera.measure(paper_scenario, pose)
        assert max_violation_px(s, paper_scenario.regions()) > paper_scenario.violation_tol
        ep = run_episode(paper_scenario, Strategy("prev_iteration"), pose)
        assert not ep.success
        assert ep.failure_reason is FailureReason.CONSTRAINT_VIOLATION
        assert ep.steps == 0

    def test_unconstrained_random_start_converges(self, open_scenario, rng):
        s0, pose0 = generate_initial_features(open_scenario, rng)
        ep = run_episode(open_scenario, Strategy("prev_iteration"), pose0)
        assert ep.success
        assert ep.final_rms < open_scenario.conv_tol
        assert ep.sim_time <= open_scenario.time_limit

    def test_success_trajectory_never_violates(self, paper_scenario, rng):
        from vpcmemo.model import max_violation_px
        s0, pose0 = generate_initial_features(paper_scenario, rng)
        ep = run_episode(paper_scenario, Strategy("prev_iteration"), pose0)
        if ep.success:
            worst = max(max_violation_px(f, paper_scenario.regions())
                        for f in ep.feature_trajectory)
            assert worst <= paper_scenario.violation_tol

    def test_time_limit_caps_steps(self, paper_scenario, rng):
        s0, pose0 = generate_initial_features(paper_scenario, rng)
        ep = run_episode(paper_scenario, Strategy("prev_iteration"), pose0,
                         time_limit=0.2)
        assert ep.steps <= 6
        assert ep.sim_time <= 0.2 + 1e-9

    def test_records_have_consistent_lengths(self, paper_scenario, rng):
        s0, pose0 = generate_initial_features(paper_scenario, rng)
        ep = run_episode(paper_scenario, Strategy("prev_iteration"), pose0,
                         time_limit=1.0)
        assert len(ep.feature_trajectory) == ep.steps + 1
        assert len(ep.solve_times) == ep.steps
        assert len(ep.step_costs) == ep.steps
        assert len(ep.memory_active) == ep.steps


class TestStrategyValidation:
    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            Strategy("magic")

    def test_memory_variant_needs_store(self):
        with pytest.raises(ValueError):
            Strategy("knn_memory")

    def test_gpr_variant_needs_model(self):
        with pytest.raises(ValueError):
            Strategy("gpr_memory")


def test_rms_error():
    assert rms_error(np.zeros(4), np.full(4, 2.0)) == pytest.approx(2.0)
