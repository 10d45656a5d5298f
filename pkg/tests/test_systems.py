"""System catalog checks: hand-derived dynamics values, Jacobians against
finite differences, Lie bracket algebra, and rank conditions."""

import numpy as np
import pytest

from ctrlflow.errors import (
    ConfigurationError,
    UnknownSystemError,
    UnsupportedSystemError,
)
from ctrlflow.systems import (
    LinearSystem,
    builtin_names,
    builtin_system,
    check_sublinear_growth,
    eval_dynamics,
    hormander_rank,
    lie_bracket,
    negate_system,
    six_state_matrices,
    six_state_output,
)

ALL_BUILTINS = ("brockett", "unicycle", "martinet", "six_state_default")


def _fd_jacobian(fn, x, h=1e-6):
    d = len(x)
    J = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return J


# ---------------------------------------------------------------------------
# hand-derived dynamics values


def test_brockett_dynamics_value():
    sys = builtin_system("brockett")
    out = eval_dynamics(sys, np.array([0.0, 2.0, 0.0]), np.array([1.0, 0.0]))
    assert np.allclose(out, [1.0, 0.0, 2.0], atol=1e-15)


def test_driftless_zero_control_is_zero():
    for name in ("brockett", "unicycle", "martinet"):
        sys = builtin_system(name)
        out = eval_dynamics(sys, np.array([0.3, -0.7, 1.1]), np.zeros(sys.m))
        assert np.allclose(out, 0.0, atol=1e-15)


def test_single_integrator_passthrough():
    sys = LinearSystem(np.zeros((3, 3)), np.eye(3)).to_system()
    u = np.array([3.0, -1.0, 0.5])
    out = eval_dynamics(sys, np.array([9.0, 9.0, 9.0]), u)
    assert np.allclose(out, u, atol=1e-15)


def test_unicycle_fields():
    sys = builtin_system("unicycle")
    assert (sys.d, sys.m) == (3, 2)
    th = 0.7
    x = np.array([[0.0, 0.0, th]])
    assert np.allclose(sys.f_list[0](x)[0], [np.cos(th), np.sin(th), 0.0])
    assert np.allclose(sys.f_list[1](x)[0], [0.0, 0.0, 1.0])


def test_martinet_fields():
    sys = builtin_system("martinet")
    x = np.array([[0.0, 3.0, 0.0]])
    assert np.allclose(sys.f_list[0](x)[0], [1.0, 0.0, 4.5])
    assert np.allclose(sys.f_list[1](x)[0], [0.0, 1.0, 0.0])


def test_eval_dynamics_dimension_errors():
    sys = builtin_system("brockett")
    with pytest.raises(ConfigurationError):
        eval_dynamics(sys, np.zeros(2), np.zeros(2))
    with pytest.raises(ConfigurationError):
        eval_dynamics(sys, np.zeros(3), np.zeros(3))


# ---------------------------------------------------------------------------
# Jacobians vs finite differences


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(42)
    for name in ALL_BUILTINS:
        sys = builtin_system(name)
        fields = (sys.f0,) + tuple(sys.f_list)
        jacs = (sys.jac_f0,) + tuple(sys.jac_f_list)
        for _ in range(100):
            x = rng.uniform(-2.0, 2.0, size=sys.d)
            for fn, jac in zip(fields, jacs):
                J = jac(x[None])[0]
                J_fd = _fd_jacobian(lambda y: fn(y[None])[0], x)
                scale = max(1.0, np.abs(J).max())
                assert np.abs(J - J_fd).max() <= 1e-5 * scale, name


def test_fields_finite_at_probes():
    rng = np.random.default_rng(7)
    for name in ALL_BUILTINS:
        sys = builtin_system(name)
        x = rng.uniform(-50.0, 50.0, size=(64, sys.d))
        assert np.all(np.isfinite(sys.f0(x)))
        for f in sys.f_list:
            assert np.all(np.isfinite(f(x)))


def test_sublinear_growth_witness():
    rng = np.random.default_rng(11)
    for name in ALL_BUILTINS:
        sys = builtin_system(name)
        probes = rng.uniform(-2.0, 2.0, size=(200, sys.d))
        worst = check_sublinear_growth(sys, probes, M=10.0)
        assert 0.0 <= worst <= 10.0


def test_sublinear_growth_violation_raises():
    sys = builtin_system("martinet")
    # the f1 third component is quadratic in y; far probes break any fixed M
    probes = np.array([[0.0, 500.0, 0.0]])
    with pytest.raises(ConfigurationError):
        check_sublinear_growth(sys, probes, M=10.0)


# ---------------------------------------------------------------------------
# Lie brackets


def test_brockett_bracket_value():
    sys = builtin_system("brockett")
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.uniform(-2.0, 2.0, size=3)
        val = lie_bracket(
            sys.f_list[0], sys.f_list[1], sys.jac_f_list[0], sys.jac_f_list[1], x
        )
        assert np.allclose(val, [0.0, 0.0, -1.0], atol=1e-12)


def test_bracket_antisymmetry_and_self():
    sys = builtin_system("unicycle")
    f, g = sys.f_list
    jf, jg = sys.jac_f_list
    rng = np.random.default_rng(1)
    for _ in range(25):
        x = rng.uniform(-2.0, 2.0, size=3)
        fg = lie_bracket(f, g, jf, jg, x)
        gf = lie_bracket(g, f, jg, jf, x)
        assert np.allclose(fg, -gf, atol=1e-12)
        assert np.allclose(lie_bracket(f, f, jf, jf, x), 0.0, atol=1e-12)


def test_bracket_constant_fields_vanishes():
    c1, c2 = np.array([1.0, 2.0]), np.array([-3.0, 0.5])

    def f(x):
        return np.broadcast_to(c1, x.shape).copy()

    def g(x):
        return np.broadcast_to(c2, x.shape).copy()

    def zero_jac(x):
        return np.zeros(x.shape + (x.shape[-1],))

    val = lie_bracket(f, g, zero_jac, zero_jac, np.array([0.3, -0.9]))
    assert np.allclose(val, 0.0, atol=1e-15)


def test_bracket_bilinearity():
    sys = builtin_system("martinet")
    f, g = sys.f_list
    jf, jg = sys.jac_f_list
    rng = np.random.default_rng(2)
    for _ in range(25):
        x = rng.uniform(-2.0, 2.0, size=3)
        a, b = rng.uniform(-3.0, 3.0, size=2)

        def af(y, a=a):
            return a * f(y)

        def jaf(y, a=a):
            return a * jf(y)

        lhs = lie_bracket(af, g, jaf, jg, x)
        rhs = a * lie_bracket(f, g, jf, jg, x)
        assert np.allclose(lhs, rhs, atol=1e-12)


# ---------------------------------------------------------------------------
# rank checks


def test_hormander_rank_brockett():
    sys = builtin_system("brockett")
    origin = np.zeros(3)
    assert hormander_rank(sys, origin, depth=0) == 2
    assert hormander_rank(sys, origin, depth=1) == 3
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.uniform(-2.0, 2.0, size=3)
        assert hormander_rank(sys, x, depth=1) == 3


def test_hormander_rank_martinet_needs_depth_two_on_plane():
    sys = builtin_system("martinet")
    # on y = 0 the first bracket degenerates; depth 2 restores full rank
    x = np.array([0.5, 0.0, 0.0])
    assert hormander_rank(sys, x, depth=1) == 2
    assert hormander_rank(sys, x, depth=2) == 3


def test_hormander_single_field_rank_one():
    def f(x):
        out = np.zeros_like(x)
        out[..., 0] = 1.0
        return out

    def jac(x):
        return np.zeros(x.shape + (x.shape[-1],))

    from ctrlflow.systems import ControlAffineSystem

    sys = ControlAffineSystem(
        name="one_field",
        d=2,
        m=1,
        f0=lambda x: np.zeros_like(x),
        f_list=(f,),
        jac_f0=jac,
        jac_f_list=(jac,),
        driftless=True,
    )
    assert hormander_rank(sys, np.zeros(2), depth=5) == 1


def test_hormander_rejects_drift():
    sys = builtin_system("six_state_default")
    with pytest.raises(UnsupportedSystemError):
        hormander_rank(sys, np.zeros(6), depth=1)


# ---------------------------------------------------------------------------
# catalog and helpers


def test_builtin_names_and_unknown():
    names = builtin_names()
    for name in ALL_BUILTINS:
        assert name in names
    with pytest.raises(UnknownSystemError):
        builtin_system("segway")


def test_linear_builtin_requires_matrices():
    sys = builtin_system("linear", A=[[0.0, 1.0], [0.0, 0.0]], B=[[0.0], [1.0]])
    assert (sys.d, sys.m) == (2, 1)
    out = eval_dynamics(sys, np.array([1.0, 2.0]), np.array([0.5]))
    assert np.allclose(out, [2.0, 0.5])


def test_six_state_structure():
    A, B = six_state_matrices()
    assert A.shape == (6, 6) and B.shape == (6, 3)
    sys = builtin_system("six_state_default")
    assert (sys.d, sys.m) == (6, 3)
    x = np.arange(6.0)
    assert np.allclose(six_state_output(x), [0.0, 2.0])
    # output map of the system object agrees
    assert np.allclose(sys.output_map(x[None])[0], [0.0, 2.0])


def test_negate_system_cancels():
    rng = np.random.default_rng(9)
    for name in ALL_BUILTINS:
        sys = builtin_system(name)
        neg = negate_system(sys)
        x = rng.uniform(-2.0, 2.0, size=(8, sys.d))
        u = rng.uniform(-2.0, 2.0, size=(8, sys.m))
        assert np.allclose(sys.rhs(x, u) + neg.rhs(x, u), 0.0, atol=1e-15)
        assert np.allclose(sys.rhs_jac_x(x, u) + neg.rhs_jac_x(x, u), 0.0, atol=1e-15)
        assert neg.driftless == sys.driftless
