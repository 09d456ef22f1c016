import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from diffsbm.interface import (
    Circle,
    LevelSetField,
    RegularizedKernels,
    averaged_gradient,
    damping,
    delta_eps,
    heaviside_eps,
    interface_measure,
    sign_eps,
)
from diffsbm.mesh_fe import FEField, build_mesh


def test_kernels_at_zero():
    assert heaviside_eps(0.0, 0.1) == 0.5
    assert sign_eps(0.0, 0.1) == 0.0
    assert delta_eps(0.0, 1 / 64) == pytest.approx(64 * np.sqrt(np.pi / 9), rel=1e-14)
    assert delta_eps(0.0, 1 / 64) == pytest.approx(37.81, abs=0.02)


def test_delta_integrates_to_one():
    eps = 0.03
    s = np.linspace(-10 * eps, 10 * eps, 20001)
    assert np.trapezoid(delta_eps(s, eps), s) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("bad", [0.0, -1e-3])
def test_kernels_reject_nonpositive_eps(bad):
    with pytest.raises(ValueError):
        heaviside_eps(0.1, bad)
    with pytest.raises(ValueError):
        delta_eps(0.1, bad)


def test_delta_is_derivative_of_heaviside():
    eps = 0.05
    phi = np.random.default_rng(0).uniform(-3 * eps, 3 * eps, 100)
    d = 1e-6 * eps
    fd = (heaviside_eps(phi + d, eps) - heaviside_eps(phi - d, eps)) / (2 * d)
    np.testing.assert_allclose(fd, delta_eps(phi, eps), rtol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_sign_bounded_and_monotone(a, b):
    eps = 0.1
    sa, sb = sign_eps(a, eps), sign_eps(b, eps)
    assert -1.0 <= sa <= 1.0
    if a <= b:
        assert sa <= sb


def test_damping_values():
    eps = 0.02
    assert damping(0.0, eps, 2) == pytest.approx(erf(2 * np.pi / 3), rel=1e-12)
    assert damping(0.0, eps, 2) == pytest.approx(0.99694, abs=1e-5)
    assert damping(10 * eps, eps, 2) <= 1e-6
    assert damping(-10 * eps, eps, 2) <= 1e-6
    s = np.linspace(-6 * eps, 6 * eps, 41)
    np.testing.assert_allclose(damping(s, eps, 3), damping(-s, eps, 3), atol=1e-15)


def test_damping_rejects_narrow_band():
    with pytest.raises(ValueError):
        damping(0.0, 0.1, 1)
    with pytest.raises(ValueError):
        RegularizedKernels(0.1, m_damp=1)


def test_damping_support():
    eps, m = 0.02, 2
    s = np.linspace(-12 * eps, 12 * eps, 2001)
    D = damping(s, eps, m)
    assert np.all(np.abs(s[D < 1e-6]) > m * eps)


def test_regularized_kernels_bundle():
    k = RegularizedKernels(0.05, m_damp=2)
    assert k.H(0.0) == 0.5
    assert k.S(0.0) == 0.0
    assert k.D(0.0) == pytest.approx(damping(0.0, 0.05, 2))
    assert k.delta(0.0) == pytest.approx(delta_eps(0.0, 0.05))


def test_averaged_gradient_of_plane():
    m = build_mesh(16)
    sigma = 1e-3
    q = averaged_gradient(FEField.interpolate(m, lambda x: x[:, 0] - 0.5), sigma).q
    interior = (m.nodes[:, 0] > 0) & (m.nodes[:, 0] < 1)
    np.testing.assert_allclose(q[interior, 0], 1 / np.sqrt(1 + sigma**2), atol=1e-6)
    np.testing.assert_allclose(q[:, 1], 0.0, atol=1e-12)


def test_averaged_gradient_of_circle_sdf():
    m = build_mesh(128)
    c = Circle((0.5, 0.5), 0.25)
    phi = FEField(m, c.value(m.nodes))
    q = averaged_gradient(phi).q
    near = np.abs(phi.coefficients) < 0.2
    norms = np.linalg.norm(q[near], axis=1)
    assert norms.min() >= 0.9 and norms.max() <= 1.01
    # |q| <= 1 + O(sigma) everywhere
    assert np.linalg.norm(q, axis=1).max() <= 1.0 + 1e-3


def test_averaged_gradient_of_constant():
    m = build_mesh(8)
    q = averaged_gradient(FEField(m, np.full(m.n_nodes, 2.0))).q
    np.testing.assert_allclose(q, 0.0, atol=1e-14)


def test_interface_measure_circle():
    c = Circle((0.5, 0.5), 0.25)
    errs = []
    for nx in (32, 64, 128, 256):
        m = build_mesh(nx)
        L = interface_measure(FEField(m, c.value(m.nodes)), 2 * m.h)
        errs.append(abs(L - 0.5 * np.pi))
    assert errs[2] / (0.5 * np.pi) < 0.02
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates >= 1.0)


def test_interface_measure_without_interface():
    m = build_mesh(32)
    assert interface_measure(FEField(m, np.full(m.n_nodes, 0.5)), 2 * m.h) <= 1e-6


def test_interface_measure_straight_line():
    m = build_mesh(64)
    L = interface_measure(FEField.interpolate(m, lambda x: x[:, 0] - 0.5), 2 * m.h)
    assert L == pytest.approx(1.0, rel=1e-2)


def test_circle_sdf_sign_and_gradient():
    c = Circle((0.5, 0.5), 0.25)
    assert c.value(np.array([0.5, 0.5]))[0] == pytest.approx(0.25)
    assert c.value(np.array([0.9, 0.5]))[0] == pytest.approx(-0.15)
    g = c.gradient(np.random.default_rng(0).random((20, 2)))
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0)
    growing = Circle((0.5, 0.5), lambda t: 0.25 + 0.15 * t)
    assert growing.radius(1.0) == pytest.approx(0.4)


def test_level_set_field_sources():
    m = build_mesh(16)
    c = Circle((0.5, 0.5), 0.25)
    ls = LevelSetField.from_analytic(m, c)
    assert ls.q_source == "analytic"
    x = np.array([[0.8, 0.55]])
    np.testing.assert_allclose(ls.q(x), c.gradient(x))
    fe = LevelSetField(m, c.value(m.nodes))
    assert fe.q_source == "averaged"
    with pytest.raises(ValueError):
        LevelSetField(m, c.value(m.nodes), root_source="analytic")
