import dataclasses

import numpy as np
import pytest

from conftest import objective_fd_errors, random_fit_problem
from handface.fitting import (
    Adam,
    FitConfig,
    FitProblem,
    FrameObservation,
    OptimizationError,
    cosine_factor,
    optimize,
    total_objective,
    write_trace_csv,
)


@pytest.fixture(scope="module")
def small(proxies):
    return random_fit_problem(proxies, seed=1, T=3)


def test_objective_gradient_matches_finite_differences(small, rng):
    prob, state, cfg = small
    assert objective_fd_errors(prob, state, cfg, rng) < 1e-4


def test_objective_gradient_without_regdef(proxies, rng):
    prob, state, cfg = random_fit_problem(proxies, seed=2, T=2)
    cfg = dataclasses.replace(cfg, use_regdef=False)
    assert objective_fd_errors(prob, state, cfg, rng, n_vertices=4) < 1e-4


def test_objective_terms_sum_to_total(small):
    prob, state, cfg = small
    res = total_objective(prob, state, cfg)
    t = res.terms
    assert set(t) >= {"face_2d", "hand_2d", "touch", "collision", "depth", "total"}
    assert np.isfinite(res.value) and t["total"] == pytest.approx(res.value)


def test_naive_reduction_is_exact(small):
    prob, state, cfg = small
    naive = cfg.naive()
    assert (naive.lambda_touch, naive.lambda_col, naive.lambda_depth) == (0, 0, 0)
    a = total_objective(prob, state, naive)
    b = total_objective(prob, state, dataclasses.replace(cfg, lambda_touch=0.0, lambda_col=0.0, lambda_depth=0.0))
    assert a.value == b.value
    # dropping the interaction data altogether gives the same objective
    bare = dataclasses.replace(prob, contacts=None, priors=None)
    c = total_objective(bare, state, naive)
    assert c.value == pytest.approx(a.value, rel=1e-12)


def test_optimize_is_deterministic_and_descends(small):
    prob, state, cfg = small
    cfg = dataclasses.replace(cfg, steps=15)
    r1 = optimize(prob, cfg, state)
    r2 = optimize(prob, cfg, state)
    assert len(r1.trace) == 16
    assert [row["total"] for row in r1.trace] == [row["total"] for row in r2.trace]
    assert np.array_equal(r1.state.p, r2.state.p)
    assert r1.final_value < r1.trace[0]["total"]


def test_zero_steps_returns_initial_state(small):
    prob, state, cfg = small
    r = optimize(prob, dataclasses.replace(cfg, steps=0), state)
    assert len(r.trace) == 1 and np.array_equal(r.state.p, state.p)


def test_non_finite_objective_raises(small):
    prob, state, cfg = small
    bad = state.copy()
    bad.p[0, 0, 0] = np.nan
    with pytest.raises(OptimizationError) as info:
        optimize(prob, dataclasses.replace(cfg, steps=3), bad)
    assert info.value.trace


def test_frozen_blocks_do_not_move(small):
    prob, state, cfg = small
    cfg = dataclasses.replace(cfg, steps=3, optimize_face=False, optimize_deformation=False)
    r = optimize(prob, cfg, state)
    assert np.array_equal(r.state.p, state.p)
    for a, b in zip(r.state.face, state.face):
        assert np.array_equal(a.to_vector(), b.to_vector())
    # shapes stay fixed unless asked for
    for a, b in zip(r.state.hand, state.hand):
        assert np.array_equal(a.shape, b.shape)


def test_config_round_trip_and_validation():
    cfg = FitConfig(steps=7, lambda_touch=0.5)
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(TypeError):
        FitConfig.from_dict({"no_such_key": 1})
    with pytest.raises(ValueError):
        FitConfig(lambda_col=-1)
    with pytest.raises(ValueError):
        FitConfig(steps=-1)


def test_problem_validation(small):
    prob, _, _ = small
    with pytest.raises(ValueError):
        dataclasses.replace(prob, rest_mode="other")
    with pytest.raises(ValueError):
        dataclasses.replace(prob, p0=prob.p0[:2])
    with pytest.raises(ValueError):
        dataclasses.replace(prob, contacts=prob.contacts[:1])
    with pytest.raises(ValueError):
        FrameObservation([[0, 0]], [1.5], [], [])
    with pytest.raises(ValueError):
        FrameObservation([[0, 0]], [1, 1], [], [])


def test_observation_round_trip(small):
    o = small[0].observations[0]
    o2 = FrameObservation.from_dict(o.to_dict())
    assert np.array_equal(o.face_2d, o2.face_2d) and np.array_equal(o.hand_conf, o2.hand_conf)


def test_cosine_schedule():
    assert cosine_factor(0, 100, 0.01) == pytest.approx(1.0)
    # the last update is step 99 of 100
    assert cosine_factor(99, 100, 0.01) == pytest.approx(0.01)
    assert cosine_factor(5, 1, 0.01) == 1.0
    vals = [cosine_factor(s, 100, 0.01) for s in range(100)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_adam_first_step_and_shared_moment():
    adam = Adam([(3,), (3,)], shared=[False, True])
    x = [np.zeros(3), np.zeros(3)]
    g = [np.array([1.0, -2.0, 0.5]), np.array([1.0, -2.0, 0.5])]
    out = adam.step(x, g, [0.1, 0.1])
    # per-entry moment: every coordinate moves by the full step
    assert np.allclose(out[0], -0.1 * np.sign(g[0]), atol=1e-6)
    # shared moment: steps keep the gradient's direction
    assert np.allclose(out[1] / np.linalg.norm(out[1]), -g[1] / np.linalg.norm(g[1]))


def test_trace_csv(tmp_path, small):
    prob, state, cfg = small
    r = optimize(prob, dataclasses.replace(cfg, steps=2), state)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, r.trace)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("step,") and len(lines) == 4
    assert float(lines[-1].split(",")[-1]) == r.trace[-1]["total"]


def test_already_optimal_problem_barely_moves(proxies):
    from handface.model import Camera, ModelParams, evaluate, landmarks, project

    fm, hm = proxies.head, proxies.hand
    cam = Camera(1000, 1000, 320, 240)
    f = ModelParams.zeros(fm)
    f.translation = np.array([0.0, 0.0, 0.5])
    f.shape = np.full(fm.n_shape, 0.5)  # frozen, so its prior term is a positive constant
    h = ModelParams.zeros(hm)
    h.translation = np.array([0.15, 0.0, 0.4])  # well clear of the face
    h.shape = np.full(hm.n_shape, 0.3)
    lf, lh = landmarks(fm, evaluate(fm, f)), landmarks(hm, evaluate(hm, h))
    T = 3
    obs = [FrameObservation(project(cam, lf), np.ones(len(lf)), project(cam, lh), np.ones(len(lh))) for _ in range(T)]
    prob = FitProblem(fm, hm, cam, proxies.head_stiffness, obs, np.zeros((T, fm.n_vertices, 3)), [f.copy() for _ in range(T)], [h.copy() for _ in range(T)])
    r = optimize(prob, FitConfig(steps=30))
    first = r.trace[0]["total"]
    assert first > 0
    assert all(abs(row["total"] - first) <= 0.01 * first for row in r.trace)
