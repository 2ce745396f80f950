import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biophyseg import estimator as est
from biophyseg.autodiff import ShapeError
from biophyseg.gradcheck import check_estimator


def manual_net(layers, in_channels=1, **kw):
    hidden = [np.shape(w)[0] for w, _ in layers[:-1]]
    cfg = est.SirenConfig(in_channels=in_channels, hidden=hidden, **kw)
    return est.SirenNet([(np.asarray(w, float), np.asarray(b, float)) for w, b in layers], cfg)


def random_net(seed=0, in_channels=3, **kw):
    cfg = est.SirenConfig(in_channels=in_channels, hidden=[16, 16], omega0=3.0, **kw)
    return est.init(cfg, seed)


def test_init_is_deterministic():
    a, b = random_net(5), random_net(5)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        assert wa.tobytes() == wb.tobytes() and ba.tobytes() == bb.tobytes()
    assert random_net(6).layers[0][0].tobytes() != a.layers[0][0].tobytes()


def test_init_bounds_and_shapes():
    cfg = est.SirenConfig(in_channels=4, hidden=[64, 32], omega0=30.0, omega=2.0)
    net = est.init(cfg, 0)
    assert [w.shape for w, _ in net.layers] == [(64, 8), (32, 64), (1, 32)]
    assert all(np.all(b == 0) for _, b in net.layers)
    bounds = [30.0 / 8, np.sqrt(6 / 64) / 2.0, np.sqrt(6 / 32) / 2.0]
    for (w, _), bound in zip(net.layers, bounds):
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.9 * bound


def test_default_first_layer_preactivation_std():
    cfg = est.SirenConfig()
    w, b = est.init(cfg, 0).layers[0]
    x = np.random.default_rng(1).standard_normal((10_000, cfg.input_width))
    std = (x @ w.T + b).std()
    assert 0.5 * cfg.omega0 / np.sqrt(3) <= std <= 2 * cfg.omega0 / np.sqrt(3)


def test_zero_net_gives_zero_field():
    net = random_net()
    net.layers = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.layers]
    feats = np.random.default_rng(0).standard_normal((3, 4, 4, 4))
    u, du = est.evaluate(net, feats, 0.7)
    assert np.all(u.data == 0) and np.all(du.data == 0)


def test_sine_of_half_pi():
    omega = 2.5
    net = manual_net([(omega * np.eye(2), np.full(2, np.pi / 2)), ([[1.0, 1.0]], [0.0])])
    u = est.forward(net, np.zeros((1, 2, 2, 2)), 0.0)
    np.testing.assert_allclose(u.data, 2.0, atol=1e-15)


@pytest.mark.parametrize("t", [0.0, 0.3, 1.0])
def test_single_sine_unit_derivative(t):
    omega = 4.0
    net = manual_net([([[0.0, omega]], [0.0]), ([[1.0]], [0.0])])
    feats = np.random.default_rng(2).standard_normal((1, 2, 2, 2))
    u, du = est.evaluate(net, feats, t)
    np.testing.assert_allclose(u.data, np.sin(omega * t), atol=1e-15)
    np.testing.assert_allclose(du.data, omega * np.cos(omega * t), atol=1e-14)


def test_time_independent_net_has_zero_derivative():
    net = random_net(in_channels=2)
    w0, b0 = net.layers[0]
    w0 = w0.copy()
    w0[:, 2:] = 0.0
    net.layers[0] = (w0, b0)
    du = est.du_dt(net, np.random.default_rng(3).standard_normal((2, 3, 3, 3)), 0.5)
    assert np.all(du.data == 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16), t=st.floats(0.01, 0.99))
def test_du_dt_matches_central_difference(seed, t):
    net = random_net(seed)
    feats = np.random.default_rng(seed + 1).standard_normal((3, 3, 3, 2))
    eps = 1e-6
    fd = (est.forward(net, feats, t + eps).data - est.forward(net, feats, t - eps).data) / (2 * eps)
    du = est.du_dt(net, feats, t).data
    assert (np.abs(du - fd) / np.maximum(1.0, np.abs(fd))).max() < 1e-6


def test_time_derivative_sums_time_channels():
    net = random_net(4, in_channels=2)
    feats = np.random.default_rng(4).standard_normal((2, 2, 2, 2))
    t, eps = 0.4, 1e-6
    w0, b0 = net.layers[0]
    partials = np.zeros((2, 2, 2))
    for col in (2, 3):
        # shift a single time column by moving its contribution into the bias
        def shifted(delta):
            return est.forward(est.SirenNet([(w0, b0 + delta * w0[:, col]), *net.layers[1:]],
                                            net.config), feats, t).data
        partials += (shifted(eps) - shifted(-eps)) / (2 * eps)
    np.testing.assert_allclose(est.du_dt(net, feats, t).data, partials, rtol=1e-6, atol=1e-8)


def test_forward_is_pure():
    net = random_net(7)
    feats = np.random.default_rng(7).standard_normal((3, 4, 3, 2))
    assert est.forward(net, feats, 0.2).data.tobytes() == est.forward(net, feats, 0.2).data.tobytes()


def test_permutation_equivariance():
    net = random_net(8)
    feats = np.random.default_rng(8).standard_normal((3, 4, 4, 4))
    perm = np.random.default_rng(9).permutation(64)
    shuffled = feats.reshape(3, 64)[:, perm].reshape(3, 4, 4, 4)
    u, du = est.evaluate(net, feats, 0.6)
    us, dus = est.evaluate(net, shuffled, 0.6)
    np.testing.assert_array_equal(us.data.ravel(), u.data.ravel()[perm])
    np.testing.assert_array_equal(dus.data.ravel(), du.data.ravel()[perm])


def test_output_is_unconstrained_by_default():
    net = manual_net([(np.eye(2), np.zeros(2)), ([[10.0, 10.0]], [5.0])])
    u = est.forward(net, np.ones((1, 1, 1, 2)), 0.5)
    assert u.data.min() > 1.0


def test_clamp_flag_bounds_output():
    net = manual_net([(np.eye(2), np.zeros(2)), ([[10.0, 10.0]], [5.0])], clamp=True)
    u, du = est.evaluate(net, np.ones((1, 1, 1, 2)), 0.5)
    assert np.all(u.data == 1.0) and np.all(du.data == 0.0)


def test_relu_ablation_runs_and_gradchecks():
    net = random_net(10, activation="relu")
    feats = np.random.default_rng(10).standard_normal((3, 3, 3, 3))
    u, du = est.evaluate(net, feats, 0.3)
    assert np.isfinite(u.data).all() and np.isfinite(du.data).all()
    assert check_estimator(np.random.default_rng(0), activation="relu") < 1e-5


def test_sine_estimator_gradcheck():
    assert check_estimator(np.random.default_rng(1)) < 1e-5


def test_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="C=3"):
        est.forward(random_net(), np.zeros((2, 2, 2, 2)), 0.0)


def test_time_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        est.forward(random_net(), np.zeros((3, 2, 2, 2)), 1.5)


def test_bad_activation_rejected():
    with pytest.raises(ValueError):
        est.SirenConfig(activation="tanh")
