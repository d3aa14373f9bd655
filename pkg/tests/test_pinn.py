import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cbf_forge.pinn import (
    EllipseFactor,
    HyperplaneFactor,
    PinnArchitecture,
    PinnModel,
    TrainingConfig,
    TrainingData,
    forward,
    hard_boundary_factor,
    init_model,
    input_gradient,
    loss_and_weight_gradients,
    train,
)
from cbf_forge.safe_sets import BoundarySample

N_NETS = 100


def random_model(rng, n=2, hard=False):
    depth = int(rng.integers(1, 4))
    width = int(rng.integers(2, 9))
    arch = PinnArchitecture.hidden(n, depth, width, hard)
    factor = EllipseFactor(rng.normal(size=n) * 0.3, np.eye(n) * rng.uniform(0.3, 1.0)) if hard else None
    model = init_model(arch, int(rng.integers(1 << 30)), box=[[-2, 2]] * n, boundary_factor=factor)
    model.biases = [rng.normal(scale=0.3, size=b.shape) for b in model.biases]
    return model


def zero_model(n=2, width=4):
    arch = PinnArchitecture.hidden(n, 1, width)
    m = init_model(arch, 0)
    m.weights = [np.zeros_like(w) for w in m.weights]
    return m


# -- forward / input gradient ------------------------------------------------


def test_zero_network():
    m = zero_model()
    x = np.random.default_rng(0).normal(size=(20, 2))
    assert np.all(forward(m, x) == 0.0)
    assert np.all(input_gradient(m, x) == 0.0)


def test_single_unit_by_hand():
    m = init_model(PinnArchitecture((1, 1, 1)), 0)
    m.weights = [np.ones((1, 1)), np.ones((1, 1))]
    assert forward(m, np.zeros((1, 1)))[0] == 0.0
    assert forward(m, np.array([[0.5]]))[0] == pytest.approx(np.tanh(0.5))


def test_linear_model_gradient_exact():
    a, b = np.array([0.7, -1.2]), 0.3
    m = init_model(PinnArchitecture((2, 3, 1), hard_boundary=True), 0, boundary_factor=HyperplaneFactor(a, b))
    m.weights = [np.zeros_like(w) for w in m.weights]
    m.biases[-1] = np.ones(1)  # raw net is the constant 1, so H = a^T x + b
    x = np.random.default_rng(2).normal(size=(30, 2))
    np.testing.assert_array_equal(input_gradient(m, x), np.broadcast_to(a, x.shape))
    np.testing.assert_allclose(forward(m, x), x @ a + b, atol=1e-15)


def test_forward_deterministic_and_shapes():
    m = random_model(np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 7, 2))
    a, b = forward(m, x), forward(m, x)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (5, 7)
    assert input_gradient(m, x).shape == (5, 7, 2)
    assert np.ndim(forward(m, x[0, 0])) == 0
    with pytest.raises(ValueError):
        forward(m, np.zeros((3, 3)))


@pytest.mark.parametrize("hard", [False, True])
def test_input_gradient_finite_differences(hard):
    rng = np.random.default_rng(100 + hard)
    worst = 0.0
    for _ in range(N_NETS):
        m = random_model(rng, hard=hard)
        x = rng.uniform(-2, 2, size=(100, 2))
        fd = np.empty_like(x)
        for i in range(2):
            e = np.zeros(2)
            e[i] = 1e-5
            fd[:, i] = (forward(m, x + e) - forward(m, x - e)) / 2e-5
        an = input_gradient(m, x)
        rel = np.linalg.norm(an - fd, axis=1) / np.maximum(np.linalg.norm(an, axis=1), 1e-3)
        worst = max(worst, rel.max())
    assert worst < 1e-6


# -- loss and weight gradients -----------------------------------------------


def _data(rng, n=2, n_phy=40, n_bc=10):
    return TrainingData(rng.uniform(-2, 2, size=(n_phy, n)), rng.normal(size=(n_phy, n)),
                        rng.uniform(-2, 2, size=(n_bc, n)), np.zeros(n_bc))


def _fd_weight_grad(m, data, cfg, h=1e-6):
    out = []
    for p in m.params:
        g = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_and_weight_gradients(m, data, cfg)[2]
            p[idx] = old - h
            dn = loss_and_weight_gradients(m, data, cfg)[2]
            p[idx] = old
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return out


@pytest.mark.parametrize("hard", [False, True])
def test_weight_gradient_finite_differences(hard):
    rng = np.random.default_rng(7 + hard)
    cfg = TrainingConfig(lambda_bc=3.0)
    worst = 0.0
    for _ in range(N_NETS):
        m = random_model(rng, hard=hard)
        data = _data(rng)
        an = np.concatenate([g.ravel() for g in loss_and_weight_gradients(m, data, cfg)[3]])
        fd = np.concatenate([g.ravel() for g in _fd_weight_grad(m, data, cfg)])
        worst = max(worst, np.linalg.norm(an - fd) / np.linalg.norm(an))
    assert worst < 1e-4


def test_weight_gradient_2_8_1_per_weight():
    rng = np.random.default_rng(3)
    m = init_model(PinnArchitecture((2, 8, 1)), 5)
    m.biases = [rng.normal(scale=0.3, size=b.shape) for b in m.biases]
    data = _data(rng)
    cfg = TrainingConfig()
    an = np.concatenate([g.ravel() for g in loss_and_weight_gradients(m, data, cfg)[3]])
    fd = np.concatenate([g.ravel() for g in _fd_weight_grad(m, data, cfg)])
    big = np.abs(fd) > 1e-3
    assert np.max(np.abs(an - fd)[big] / np.abs(fd[big])) < 1e-4


def test_exact_solution_has_zero_loss():
    a, b = np.array([1.0, 0.5]), -0.2
    m = init_model(PinnArchitecture((2, 3, 1), hard_boundary=True), 0, boundary_factor=HyperplaneFactor(a, b))
    m.weights = [np.zeros_like(w) for w in m.weights]
    m.biases = [np.zeros(3), np.ones(1)]
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, size=(50, 2))
    data = TrainingData(x, np.broadcast_to(a, x.shape).copy(), np.zeros((0, 2)), np.zeros(0))
    E_phy, E_bc, E, grads = loss_and_weight_gradients(m, data)
    assert E_phy == 0.0 and E_bc == 0.0 and E == 0.0
    assert all(np.all(g == 0) for g in grads)


@given(st.floats(0.1, 100))
def test_lambda_is_linear(lam):
    rng = np.random.default_rng(11)
    m = random_model(rng)
    data = _data(rng)
    E_phy, E_bc, E, _ = loss_and_weight_gradients(m, data, TrainingConfig(lambda_bc=lam))
    E2 = loss_and_weight_gradients(m, data, TrainingConfig(lambda_bc=2 * lam))[2]
    assert E == pytest.approx(E_phy + lam * E_bc, rel=1e-14)
    assert E2 - E == pytest.approx(lam * E_bc, rel=1e-10)


# -- training ----------------------------------------------------------------


def _line_data(a, rng, n_phy=512, n_bc=64):
    x = rng.uniform(-2, 2, size=(n_phy, 2))
    t = rng.uniform(-2, 2, size=n_bc)
    perp = np.array([-a[1], a[0]]) / np.linalg.norm(a)
    return TrainingData(x, np.broadcast_to(a, x.shape).copy(), t[:, None] * perp, np.zeros(n_bc))


def _audit(a):
    g = np.stack(np.meshgrid(np.linspace(-2, 2, 41), np.linspace(-2, 2, 41)), -1).reshape(-1, 2)
    bc = _line_data(a, np.random.default_rng(9)).x_bc
    return g, bc[np.all(np.abs(bc) <= 2, axis=1)]


def test_train_constant_field_hard():
    a = np.array([0.6, -0.8])
    data = _line_data(a, np.random.default_rng(0), n_phy=1024)
    cfg = TrainingConfig(iterations=3000, learning_rate=1e-2, learning_rate_final=1e-4, seed=1)
    m = train(data, PinnArchitecture.hidden(2, 2, 16, True), cfg, box=[[-2, 2], [-2, 2]],
              boundary_factor=HyperplaneFactor(a, 0.0))
    g, bc = _audit(a)
    err = np.linalg.norm(input_gradient(m, g) - a, axis=1)
    assert err.max() < 0.02 * np.linalg.norm(a)
    assert np.abs(forward(m, bc)).max() < 1e-3


def test_train_constant_field_soft():
    # the soft penalty converges more slowly; this only checks it heads to the same solution
    a = np.array([0.6, -0.8])
    data = _line_data(a, np.random.default_rng(0), n_phy=1024)
    cfg = TrainingConfig(iterations=3000, learning_rate=1e-2, learning_rate_final=1e-4, lambda_bc=100.0, seed=1)
    m = train(data, PinnArchitecture.hidden(2, 1, 16), cfg, box=[[-2, 2], [-2, 2]])
    g, bc = _audit(a)
    err = np.linalg.norm(input_gradient(m, g) - a, axis=1)
    assert err.mean() < 0.1 * np.linalg.norm(a)
    assert np.abs(forward(m, bc)).max() < 1e-3
    assert m.metadata["final_losses"]["E"] < 0.01 * m.metadata["initial_losses"]["E"]


def test_train_hard_boundary_vanishes_on_boundary():
    a = np.array([0.6, -0.8])
    data = _line_data(a, np.random.default_rng(0))
    factor = HyperplaneFactor(a, 0.0)
    m = train(data, PinnArchitecture.hidden(2, 2, 8, True), TrainingConfig(iterations=300, seed=1),
              box=[[-2, 2], [-2, 2]], boundary_factor=factor)
    bc = _line_data(a, np.random.default_rng(5), n_bc=200).x_bc
    assert np.abs(forward(m, bc)).max() < 1e-12


def test_train_is_deterministic():
    data = _line_data(np.array([1.0, 0.2]), np.random.default_rng(0), n_phy=128)
    cfg = TrainingConfig(iterations=200, seed=4)
    arch = PinnArchitecture.hidden(2, 2, 8)
    m1, m2 = train(data, arch, cfg), train(data, arch, cfg)
    for w1, w2 in zip(m1.params, m2.params):
        np.testing.assert_array_equal(w1, w2)
    m3 = train(data, arch, TrainingConfig(iterations=200, seed=5))
    assert not np.array_equal(m1.weights[0], m3.weights[0])


def test_train_rejects_empty_data():
    data = TrainingData(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        train(data, PinnArchitecture.hidden(2, 1, 4))


def test_model_round_trip():
    m = random_model(np.random.default_rng(4), hard=True)
    again = PinnModel.from_dict(m.to_dict())
    x = np.random.default_rng(0).normal(size=(10, 2))
    np.testing.assert_array_equal(forward(again, x), forward(m, x))


# -- boundary factors --------------------------------------------------------


def test_hyperplane_factor_from_segment():
    pts = np.column_stack([np.linspace(-1, 1, 10), np.full(10, 0.5)])
    nrm = np.tile([0.0, -1.0], (10, 1))
    F = hard_boundary_factor(BoundarySample(pts, nrm))
    assert np.abs(F.value(pts)).max() < 1e-15
    assert F.value(np.array([[0.0, 0.0]]))[0] > 0


def test_ellipse_factor_from_safe_set():
    from cbf_forge.safe_sets import ellipsoid_safe_set

    S = ellipsoid_safe_set([0.1, 0.2], [[2.0, 0.3], [0.3, 1.0]])
    F = hard_boundary_factor(None, S)
    x = np.random.default_rng(0).normal(size=(20, 2))
    np.testing.assert_allclose(F.value(x), S.value(x), atol=1e-14)
    np.testing.assert_allclose(F.gradient(x), S.gradient(x), atol=1e-14)


def test_architecture_validation():
    with pytest.raises(ValueError):
        PinnArchitecture((2, 1))
    with pytest.raises(ValueError):
        PinnArchitecture((2, 4, 2))
    with pytest.raises(ValueError):
        PinnArchitecture((2, 4, 1), activation="relu")
    with pytest.raises(ValueError):
        init_model(PinnArchitecture((2, 4, 1), hard_boundary=True), 0)
