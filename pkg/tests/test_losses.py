import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handface.losses import (
    ContactSet,
    PriorSampleSet,
    RestData,
    binary_cross_entropy,
    chamfer,
    depth_weights,
    loss_2d,
    loss_collision,
    loss_depth,
    loss_reg,
    loss_regdef,
    loss_touch,
    merge_union,
    train_loss_def,
    train_loss_labels,
)
from handface.mesh import build_topology
from handface.model import Camera, RigidTransform, project, rodrigues
from handface.proxies import icosphere

CAM = Camera(1000, 1000, 320, 240)


def fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


# -- 2D ----------------------------------------------------------------------------


def test_loss_2d_examples(rng):
    X = rng.normal(size=(3, 3)) * 0.05 + [0, 0, 0.5]
    uv = project(CAM, X)
    assert loss_2d(CAM, X, uv, np.ones(3))[0] == 0.0
    assert loss_2d(CAM, X, uv + 10, np.zeros(3))[0] == 0.0
    v, _ = loss_2d(CAM, X[:1], uv[:1] + [3, 4], [1.0])
    assert v == pytest.approx(25.0)


def test_loss_2d_gradient(rng):
    X = rng.normal(size=(5, 3)) * 0.05 + [0, 0, 0.5]
    ref = project(CAM, X) + rng.normal(size=(5, 2)) * 3
    c = rng.uniform(size=5)
    _, g = loss_2d(CAM, X, ref, c)
    assert rel_err(g, fd_grad(lambda Y: loss_2d(CAM, Y, ref, c)[0], X)) < 1e-4


# -- temporal prior ------------------------------------------------------------------


def test_reg_static_zero(rng):
    V = np.repeat(rng.normal(size=(1, 4, 3)), 3, axis=0)
    r = loss_reg([np.zeros(2)], [np.zeros(2)], V, 1, 1, 1, 1, 0.02)
    assert r.value == 0.0


def test_reg_constant_velocity():
    v = np.array([0.01, -0.02, 0.005])
    V = np.stack([np.zeros((4, 3)) + t * 0.02 * v for t in range(4)])
    r = loss_reg([], [], V, 0, 0, 2.0, 5.0, 0.02)
    assert r.acceleration == pytest.approx(0.0, abs=1e-20)
    assert r.value == pytest.approx(2.0 * v @ v)


def test_reg_three_frame_oracle(rng):
    V = rng.normal(size=(3, 6, 3))
    dt = 0.02
    r = loss_reg([rng.normal(size=2)], [rng.normal(size=3)], V, 0.1, 0.2, 0.3, 0.4, dt)
    vel = np.mean([np.mean(np.sum(((V[t + 1] - V[t]) / dt) ** 2, axis=1)) for t in range(2)])
    acc = np.mean(np.sum(((V[2] - 2 * V[1] + V[0]) / dt**2) ** 2, axis=1))
    assert r.velocity == pytest.approx(vel)
    assert r.acceleration == pytest.approx(acc)
    g = fd_grad(lambda Y: loss_reg([], [], Y, 0, 0, 0.3, 0.4, dt).value, V, eps=1e-7)
    assert rel_err(r.grad_vertices, g) < 1e-4


def test_reg_short_windows():
    r = loss_reg([], [], np.zeros((1, 2, 3)), 1, 1, 1, 1, 0.02)
    assert r.velocity == 0 and r.acceleration == 0
    r = loss_reg([], [], np.stack([np.zeros((2, 3)), np.ones((2, 3))]), 1, 1, 1, 1, 1.0)
    assert r.acceleration == 0 and r.velocity == pytest.approx(3.0)


# -- touch -----------------------------------------------------------------------------


def brute_chamfer(A, B):
    a = np.mean([min(np.sum((x - y) ** 2) for y in B) for x in A])
    b = np.mean([min(np.sum((x - y) ** 2) for y in A) for x in B])
    return a + b


def test_touch_examples():
    cs = ContactSet([1.0], [1.0])
    assert loss_touch([[0, 0, 0.0]], [[0, 0, 0.0]], cs).value == 0.0
    assert loss_touch([[0, 0, 0.0]], [[1, 0, 0.0]], cs).value == pytest.approx(2.0)
    t = loss_touch([[0, 0, 0.0]], [[1, 0, 0.0]], ContactSet([0.4], [1.0]))
    assert t.value == 0.0 and not t.active


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 10_000))
def test_chamfer_brute_force_and_symmetry(na, nb, seed):
    r = np.random.default_rng(seed)
    A, B = r.normal(size=(na, 3)), r.normal(size=(nb, 3))
    v, gA, gB = chamfer(A, B)
    assert v == pytest.approx(brute_chamfer(A, B), rel=1e-12)
    v2, gB2, gA2 = chamfer(B, A)
    assert v2 == pytest.approx(v, rel=1e-12)
    assert np.allclose(gA, gA2) and np.allclose(gB, gB2)


def test_touch_gradient(rng):
    Vf, Vh = rng.normal(size=(12, 3)), rng.normal(size=(9, 3))
    cs = ContactSet((rng.uniform(size=12) > 0.3).astype(float), (rng.uniform(size=9) > 0.3).astype(float))
    t = loss_touch(Vf, Vh, cs)
    assert rel_err(t.grad_face, fd_grad(lambda X: loss_touch(X, Vh, cs).value, Vf)) < 1e-4
    assert rel_err(t.grad_hand, fd_grad(lambda X: loss_touch(Vf, X, cs).value, Vh)) < 1e-4


def test_contact_set_validation():
    with pytest.raises(ValueError):
        ContactSet([1.2], [0.0])
    cs = ContactSet([0.5, 0.51], [0.9])
    assert cs.face_indices.tolist() == [1]


# -- collision + regulariser -------------------------------------------------------------


def test_collision_examples():
    # flat face patch of 4 vertices around the origin, a hand vertex 5 mm inside
    v, f = icosphere(2)
    face = build_topology(v, f)
    Vs = face.vertices
    rest = RestData.from_positions(face, Vs)
    p = np.zeros_like(Vs)
    zero = loss_collision(Vs[:3] * 2.0, Vs, face, p, p, np.ones(len(face.edges)), np.ones(len(face.bend_pairs)), rest)
    assert zero.value == 0.0
    top = np.argmax(Vs[:, 2])
    probe = Vs[top] * 0.995 + np.array([0.006, 0, 0])  # inside, off-vertex
    res = loss_collision(probe[None], Vs, face, p, p, np.ones(len(face.edges)), np.ones(len(face.bend_pairs)), rest)
    nn = np.min(np.sum((Vs - probe) ** 2, axis=1))
    assert res.n_penetrating == 1
    assert res.penetration == pytest.approx(nn)


def test_penetration_term_value_example():
    # nearest face vertex at 6 mm from a penetrating hand vertex -> 0.006^2
    v, f = icosphere(3)
    face = build_topology(v, f)
    Vs = face.vertices
    top = np.argmax(Vs[:, 2])
    q = Vs[top] - [0, 0, 0.006]
    res = loss_collision(q[None], Vs, face, np.zeros_like(Vs), np.zeros_like(Vs), np.ones(len(face.edges)), np.ones(len(face.bend_pairs)), RestData.from_positions(face, Vs))
    assert res.penetration == pytest.approx(0.006**2, rel=1e-9)


def test_regdef_edge_example():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    m = build_topology(v, [[0, 1, 2]])
    k = [i for i, (a, b) in enumerate(m.edges) if (a, b) == (0, 1)][0]
    X = v.copy()
    X[1, 0] = 1.1
    w = np.zeros(3)
    w[k] = 0.5
    e, b, a, *_ = loss_regdef(X, RestData.from_positions(m, v), m, np.zeros((3, 3)), np.zeros((3, 3)), w, np.zeros(0))
    assert e == pytest.approx(0.005)


def test_regdef_gradients(rng):
    v, f = icosphere(1)
    m = build_topology(v, f)
    s_e = rng.uniform(size=len(m.edges))
    s_b = rng.uniform(size=len(m.bend_pairs))
    X = v + rng.normal(scale=0.02, size=v.shape)
    p, p0 = rng.normal(size=v.shape) * 0.01, rng.normal(size=v.shape) * 0.01
    rest = RestData.from_positions(m, v)

    def total(Y):
        e, b, a, *_ = loss_regdef(Y, rest, m, p, p0, s_e, s_b)
        return e + b

    _, _, _, g, _, gp = loss_regdef(X, rest, m, p, p0, s_e, s_b)
    assert rel_err(g, fd_grad(total, X)) < 1e-4
    assert rel_err(gp, fd_grad(lambda q: loss_regdef(X, rest, m, q, p0, s_e, s_b)[2], p)) < 1e-4
    # rest given as positions: gradient with respect to them
    Xr = v + rng.normal(scale=0.01, size=v.shape)

    def by_rest(R):
        e, b, *_ = loss_regdef(X, R, m, p, p0, s_e, s_b)
        return e + b

    gr = loss_regdef(X, Xr, m, p, p0, s_e, s_b)[4]
    assert rel_err(gr, fd_grad(by_rest, Xr)) < 1e-4


def test_collision_gradient_away_from_switches(rng):
    v, f = icosphere(2)
    face = build_topology(v, f)
    Vs = face.vertices
    hand = Vs[rng.choice(len(Vs), 6, replace=False)] * 0.97 + rng.normal(scale=1e-3, size=(6, 3))
    rest = RestData.from_positions(face, Vs)
    z = np.zeros_like(Vs)
    se, sb = np.ones(len(face.edges)), np.ones(len(face.bend_pairs))
    res = loss_collision(hand, Vs, face, z, z, se, sb, rest, use_regdef=False)
    assert res.n_penetrating == 6
    g = fd_grad(lambda H: loss_collision(H, Vs, face, z, z, se, sb, rest, use_regdef=False).penetration, hand, eps=1e-7)
    assert rel_err(res.grad_hand, g) < 1e-4


# -- depth prior -----------------------------------------------------------------------


def test_depth_weights_examples(rng):
    assert depth_weights([0, 5, 10]).tolist() == [1.0, 0.5, 0.0]
    assert depth_weights([3, 3, 3]).tolist() == [1.0, 1.0, 1.0]
    eta = rng.uniform(size=20)
    w = depth_weights(eta)
    assert w[np.argmin(eta)] == 1.0 and w[np.argmax(eta)] == 0.0
    assert np.allclose(depth_weights(3.0 * eta + 7.0), w)


def test_depth_examples():
    I = RigidTransform(np.eye(3), np.zeros(3))
    J = np.zeros((21, 3))
    J[:, 2] = 0.5
    same = PriorSampleSet(J[None], [0.0])
    assert loss_depth(J, same, I).value == 0.0
    off = J.copy()
    off[:, 2] = 0.6
    assert loss_depth(off, same, I).value == pytest.approx(0.21)
    two = PriorSampleSet(np.stack([J, J + [0, 0, 1.0]]), [0.0, 1.0])
    assert loss_depth(J, two, I).value == 0.0


def test_depth_gradients(rng):
    J = rng.normal(size=(21, 3)) * 0.05 + [0, 0, 0.5]
    S = PriorSampleSet(rng.normal(size=(7, 21, 3)) * 0.05, rng.uniform(size=7))
    w = rng.normal(size=3) * 0.3
    t = rng.normal(size=3) * 0.1

    def val(J_=J, w_=w, t_=t):
        return loss_depth(J_, S, RigidTransform(rodrigues(w_), t_)).value

    d = loss_depth(J, S, RigidTransform(rodrigues(w), t))
    assert rel_err(d.grad_landmarks, fd_grad(lambda X: val(J_=X), J)) < 1e-4
    assert rel_err(d.grad_translation, fd_grad(lambda X: val(t_=X), t)) < 1e-4


# -- training losses ------------------------------------------------------------------------


def test_labels_examples(rng):
    gt = (rng.uniform(size=30) > 0.5).astype(float)
    assert train_loss_labels(gt, gt, gt, gt) < 2 * 1e-6
    half = np.full(30, 0.5)
    assert train_loss_labels(half, half, gt, gt) == pytest.approx(2 * np.log(2))
    pred = rng.uniform(0.01, 0.99, 30)
    oracle = -np.mean([t * np.log(c) + (1 - t) * np.log(1 - c) for c, t in zip(pred, gt)])
    assert binary_cross_entropy(pred, gt)[0] == pytest.approx(oracle)
    with pytest.raises(ValueError):
        train_loss_labels(pred[:3], pred, gt, gt)


def test_def_examples(rng):
    g = rng.normal(size=(10, 3)) * 0.01
    assert train_loss_def(g, g) == 0.0
    assert train_loss_def([[0.05, 0, 0]], [[0, 0, 0.0]]) == pytest.approx(7.5e-4)
    assert train_loss_def([[0.2, 0, 0]], [[0.2, 0, 0.0]]) == pytest.approx(0.2)
    p = rng.normal(size=(10, 3)) * 0.1
    _, gr = train_loss_def(p, g, return_grad=True)
    assert rel_err(gr, fd_grad(lambda X: train_loss_def(X, g), p)) < 1e-4


def test_merge_union():
    D = np.array([[[0.01, 0, 0], [0, 0, 0]], [[0.001, 0, 0], [0, 0.02, 0]]])
    L = np.array([[True, False], [False, False]])
    merged, labels = merge_union(D, L)
    assert np.allclose(merged, [[0.01, 0, 0], [0, 0.02, 0]])
    assert labels.tolist() == [True, False]
