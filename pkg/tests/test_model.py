import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handface.io import load_model, save_model
from handface.model import (
    Camera,
    ModelParams,
    ProjectionError,
    compose_deformed,
    evaluate,
    face_frame_transform,
    landmarks,
    project,
    rodrigues,
    rodrigues_jacobian,
)


def random_params(model, r, scale=0.3):
    p = model.zero_params()
    p.translation = r.normal(scale=0.1, size=3) + [0, 0, 0.5]
    p.rotation = r.normal(scale=scale, size=3)
    p.shape = r.normal(size=model.n_shape)
    p.expression = r.normal(size=model.n_expression)
    p.articulation = r.normal(scale=scale, size=(model.n_joints, 3))
    return p


def test_zero_params_give_template(proxies):
    for m in (proxies.head, proxies.hand):
        assert np.array_equal(evaluate(m, m.zero_params()), m.template)


def test_translation(proxies):
    m = proxies.head
    p = m.zero_params()
    p.translation = np.array([0, 0, 1.0])
    assert np.allclose(evaluate(m, p), m.template + [0, 0, 1.0])


def test_linear_in_coefficients(proxies, rng):
    m = proxies.head
    base = random_params(m, rng)
    a, b = base.copy(), base.copy()
    a.shape = rng.normal(size=m.n_shape)
    b.shape = rng.normal(size=m.n_shape)
    ab = base.copy()
    ab.shape = a.shape + b.shape
    z = base.copy()
    z.shape = np.zeros(m.n_shape)
    # superposition holds for face shape (pivots do not move with face shape)
    lhs = evaluate(m, ab) - evaluate(m, z)
    rhs = (evaluate(m, a) - evaluate(m, z)) + (evaluate(m, b) - evaluate(m, z))
    assert np.allclose(lhs, rhs, atol=1e-12)


@pytest.mark.parametrize("which", ["head", "hand"])
def test_jacobian_matches_finite_differences(proxies, which):
    m = getattr(proxies, which)
    r = np.random.default_rng(7)
    p = random_params(m, r)
    _, J = evaluate(m, p, jacobian=True)
    x = p.to_vector()
    eps = 1e-6
    fd = np.zeros_like(J)
    for k in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[k] += eps
        xm[k] -= eps
        fd[:, :, k] = (evaluate(m, ModelParams.from_vector(m, xp)) - evaluate(m, ModelParams.from_vector(m, xm))) / (2 * eps)
    assert np.abs(J - fd).max() / np.abs(fd).max() < 1e-4


def test_rodrigues_jacobian(rng):
    for w in (rng.normal(size=3), np.zeros(3), np.array([1e-9, 0, 0])):
        R, dR = rodrigues_jacobian(w)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            fd = (rodrigues(w + e) - rodrigues(w - e)) / 2e-6
            assert np.allclose(dR[i], fd, atol=1e-8)


def test_param_validation(proxies):
    m = proxies.head
    p = m.zero_params()
    p.shape = np.zeros(m.n_shape + 1)
    with pytest.raises(ValueError, match="shape"):
        evaluate(m, p)
    q = m.zero_params()
    q.translation = np.array([np.nan, 0, 0])
    with pytest.raises(ValueError):
        evaluate(m, q)


def test_params_round_trip(proxies, rng):
    m = proxies.hand
    p = random_params(m, rng)
    q = ModelParams.from_dict(p.to_dict(), m)
    assert np.array_equal(q.to_vector(), p.to_vector())


def test_compose_deformed(rng):
    v = rng.normal(size=(5, 3))
    assert np.array_equal(compose_deformed(v, np.zeros_like(v)), v)
    assert np.allclose(compose_deformed(v, np.tile([0, 0, 0.01], (5, 1)))[:, 2], v[:, 2] + 0.01)
    p = rng.normal(size=(5, 3))
    assert np.array_equal(compose_deformed(v, p), v + p)
    with pytest.raises(ValueError):
        compose_deformed(v, p[:4])


def test_projection_examples():
    cam = Camera(1000, 1000, 500, 500)
    assert np.allclose(project(cam, [[0, 0, 1.0]]), [[500, 500]])
    assert np.allclose(project(cam, [[0.1, 0, 1.0]]), [[600, 500]])
    cam2 = Camera(2000, 2000, 500, 500)
    assert np.allclose(project(cam2, [[0.1, 0.05, 2.0]]), project(cam, [[0.1, 0.05, 1.0]]))
    with pytest.raises(ProjectionError):
        project(cam, [[0, 0, 1.0], [0, 0, -1.0]])
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_projection_scale_invariance(k, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(6, 3)) * 0.1 + [0, 0, 1.0]
    cam = Camera(800, 900, 320, 240)
    assert np.allclose(project(cam, X * k), project(cam, X), atol=1e-9)


def test_projection_jacobian(rng):
    cam = Camera(800, 900, 320, 240)
    X = rng.normal(size=(4, 3)) * 0.1 + [0, 0, 1.0]
    _, J = project(cam, X, jacobian=True)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-6
        fd = (project(cam, X + e) - project(cam, X - e)) / 2e-6
        assert np.allclose(J[:, :, k], fd, rtol=1e-6, atol=1e-6)


def test_landmarks(proxies, rng):
    m = proxies.head
    v = rng.normal(size=(m.n_vertices, 3))
    assert np.array_equal(landmarks(m, v), v[m.landmark_indices])
    assert len(m.landmark_indices) == 68
    assert len(proxies.hand.landmark_indices) == 21


def test_face_frame_transform(rng):
    p = ModelParams(np.zeros(3), np.zeros(3), np.zeros(0), np.zeros(0), np.zeros((0, 3)))
    x = rng.normal(size=(5, 3))
    assert np.allclose(face_frame_transform(p).apply(x), x)
    p.rotation = rng.normal(size=3)
    p.translation = rng.normal(size=3)
    T = face_frame_transform(p)
    assert np.allclose(T.apply_inverse(T.apply(x)), x, atol=1e-12)
    R = rodrigues(p.rotation)
    assert np.allclose(T.apply(x), (R @ x.T).T + p.translation)
    assert np.allclose(T.inverse().apply(T.apply(x)), x, atol=1e-12)


def test_model_file_round_trip(tmp_path, proxies, rng):
    m = proxies.hand
    save_model(tmp_path / "hand.json", m)
    m2 = load_model(tmp_path / "hand.json")
    p = random_params(m, rng)
    assert np.allclose(evaluate(m2, p), evaluate(m, p), atol=1e-8)
    assert np.array_equal(m2.landmark_indices, m.landmark_indices)


def test_proxy_sizes_and_determinism(proxies):
    from handface.proxies import build_proxies

    assert 2250 <= proxies.head.n_vertices <= 2750
    assert 700 <= proxies.hand.n_vertices <= 900
    assert proxies.hand.n_joints == 15
    again = build_proxies(0)
    assert np.array_equal(again.head.template, proxies.head.template)
    assert np.array_equal(again.head_stiffness.vertex_stiffness, proxies.head_stiffness.vertex_stiffness)
