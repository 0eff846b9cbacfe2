import numpy as np
import pytest

from ibpcl.optim import Adam


def test_first_step_moves_by_lr():
    # bias correction makes the first update exactly lr * sign(g) (up to eps)
    p = {"w": np.array([1.0, -2.0, 0.5])}
    Adam().step(p, {"w": np.array([3.0, -0.1, 1e-3])}, {"w": 0.01})
    np.testing.assert_allclose(p["w"], [0.99, -1.99, 0.49], rtol=1e-6)


def test_matches_reference_recursion():
    rng = np.random.default_rng(0)
    opt = Adam()
    p = {"w": rng.standard_normal(4)}
    w, m, v = p["w"].copy(), np.zeros(4), np.zeros(4)
    for t in range(1, 20):
        g = rng.standard_normal(4)
        opt.step(p, {"w": g}, {"w": 0.003})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.003 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


def test_minimises_quadratic():
    p = {"x": np.array([5.0, -3.0])}
    opt = Adam()
    for _ in range(2000):
        opt.step(p, {"x": 2 * p["x"]}, {"x": 0.05})
    np.testing.assert_allclose(p["x"], 0.0, atol=1e-3)


def test_unstepped_parameters_keep_moments():
    opt = Adam()
    p = {"a": np.ones(2), "b": np.ones(2)}
    opt.step(p, {"a": np.ones(2), "b": np.ones(2)}, {"a": 0.1, "b": 0.1})
    mb = opt.m["b"].copy()
    b = p["b"].copy()
    opt.step(p, {"a": np.ones(2)}, {"a": 0.1})
    assert opt.t == {"a": 2, "b": 1}
    np.testing.assert_array_equal(opt.m["b"], mb)
    np.testing.assert_array_equal(p["b"], b)


def test_grown_parameter_pads_moments():
    opt = Adam()
    p = {"w": np.ones((2, 2))}
    opt.step(p, {"w": np.ones((2, 2))}, {"w": 0.1})
    p["w"] = np.hstack([p["w"], np.zeros((2, 1))])
    opt.step(p, {"w": np.ones((2, 3))}, {"w": 0.1})
    assert opt.m["w"].shape == (2, 3)
    assert opt.m["w"][0, 2] == pytest.approx(0.1)


def test_state_round_trip():
    rng = np.random.default_rng(1)
    a, b = Adam(), Adam()
    pa = {"w": rng.standard_normal(3)}
    for _ in range(3):
        a.step(pa, {"w": rng.standard_normal(3)}, {"w": 0.01})
    b.load_state_arrays(a.state_arrays())
    pb = {"w": pa["w"].copy()}
    g = rng.standard_normal(3)
    a.step(pa, {"w": g}, {"w": 0.01})
    b.step(pb, {"w": g}, {"w": 0.01})
    assert pa["w"].tobytes() == pb["w"].tobytes()


def test_where_mask_freezes_entries_and_moments():
    opt = Adam()
    p = {"w": np.zeros(3)}
    opt.step(p, {"w": np.ones(3)}, {"w": 0.1})
    m_before, w_before = opt.m["w"].copy(), p["w"].copy()
    # zero gradient but nonzero momentum: unmasked entries keep moving, masked ones stay put
    opt.step(p, {"w": np.zeros(3)}, {"w": 0.1}, where={"w": np.array([1.0, 0.0, 1.0])})
    assert p["w"][1] == w_before[1] and opt.m["w"][1] == m_before[1]
    assert p["w"][0] < w_before[0] and opt.m["w"][0] < m_before[0]
