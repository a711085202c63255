import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hymlab import bundles as bd
from hymlab import chern as ch
from hymlab import functional as fn
from hymlab import geometry as geo
from hymlab import subobjects as so


@pytest.fixture(scope="module")
def rank2_pair(torus64, trivial2):
    H0 = bd.make_metric(torus64, trivial2, "identity")
    eta = bd.trig_endo(torus64, trivial2, H0, seed=42, amplitude=0.3)
    H1 = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta)
    return H0, H1


def test_zero_and_scale_invariance(torus64, trivial2, rank2_pair):
    H0, H1 = rank2_pair
    assert fn.functional_path(H0, H0).value == 0.0
    Hc = bd.MetricField(torus64, trivial2, [np.exp(0.9) * d for d in H0.data], "metric")
    for evaluator in (lambda a, b: fn.functional_path(a, b).value,
                      lambda a, b: fn.functional_path(a, b, path="linear").value,
                      lambda a, b: fn.functional_eigen(a, b).value):
        assert abs(evaluator(H0, Hc)) < 1e-8
    # M(H0, e^c H) = M(H0, H); the residual tracks how far the discrete
    # trace mean wanders along the path, so use a mild perturbation
    eta_s = bd.trig_endo(torus64, trivial2, H0, seed=43, amplitude=0.15)
    Hs = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta_s)
    Hsc = bd.MetricField(torus64, trivial2, [np.exp(0.3) * d for d in Hs.data], "metric")
    assert abs(fn.functional_path(H0, Hsc).value - fn.functional_path(H0, Hs).value) < 1e-8


def test_line_bundle_closed_form(torus64):
    line = bd.make_bundle("trivial", "torus", rank=1)
    H0 = bd.make_metric(torus64, line, "identity")
    phi = torus64.sample(lambda z: 0.3 * np.cos(2 * np.pi * np.real(z)))
    H1 = bd.make_metric(torus64, line, "conformal", base=H0, phi=phi)
    lf0 = ch.lambda_f(H0)
    c_hat = ch.he_constant(H0)
    phis = [p.copy() for p in phi]
    geo.sync_scalar(torus64, phis)
    dphi = geo.d_zbar(torus64, phis)
    dens1 = [(np.real(l[..., 0, 0]) - c_hat) * p for l, p in zip(lf0.data, phis)]
    dens2 = [np.abs(d) ** 2 / c.metric_g for d, c in zip(dphi, torus64.charts)]
    closed = geo.integrate(torus64, dens1) + 0.5 * geo.integrate(torus64, dens2)
    assert abs(fn.functional_path(H0, H1).value - closed) < 1e-6
    assert abs(fn.functional_path(H0, H1, path="linear").value - closed) < 1e-6
    assert abs(fn.functional_eigen(H0, H1).value - closed) < 1e-8


def test_breakdown_sums_to_value(rank2_pair):
    H0, H1 = rank2_pair
    for r in (fn.functional_path(H0, H1), fn.functional_eigen(H0, H1)):
        assert r.breakdown_residual() < 1e-12


def test_path_independence_and_evaluator_agreement_suite(torus64, trivial2):
    H0 = bd.make_metric(torus64, trivial2, "identity")
    worst_pl, worst_ev = 0.0, 0.0
    for seed in range(10):
        eta = bd.trig_endo(torus64, trivial2, H0, seed=100 + seed, amplitude=0.25)
        H1 = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta)
        pe = fn.functional_path(H0, H1).value
        pl = fn.functional_path(H0, H1, path="linear").value
        ev = fn.functional_eigen(H0, H1).value
        worst_pl = max(worst_pl, abs(pe - pl))
        worst_ev = max(worst_ev, abs(ev - pe) / (1 + abs(pe)))
    assert worst_pl < 1e-5
    assert worst_ev < 1e-4


def test_eigen_vs_path_noncommuting_base(torus64, trivial2):
    H0 = bd.make_metric(torus64, trivial2, "identity")
    eta1 = bd.trig_endo(torus64, trivial2, H0, seed=21, amplitude=0.35)
    G1 = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta1)
    eta2 = bd.trig_endo(torus64, trivial2, H0, seed=22, amplitude=0.3)
    G2 = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta2)
    pe = fn.functional_path(G1, G2).value
    ev = fn.functional_eigen(G1, G2).value
    assert abs(ev - pe) / (1 + abs(pe)) < 1e-4


def test_cocycle_and_antisymmetry(torus64, trivial2):
    H0 = bd.make_metric(torus64, trivial2, "identity")
    eta1 = bd.trig_endo(torus64, trivial2, H0, seed=77, amplitude=0.3)
    H1 = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta1)
    eta2 = bd.trig_endo(torus64, trivial2, H0, seed=78, amplitude=0.3)
    H2 = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta2)
    assert fn.cocycle_residual(H0, H1, H2) < 1e-5
    anti = abs(fn.functional_path(H0, H1).value + fn.functional_path(H1, H0).value)
    assert anti < 1e-5


def test_gauge_invariance_of_functional(torus64, trivial2, rank2_pair):
    H0, H1 = rank2_pair
    rng = np.random.default_rng(12)
    U = np.linalg.qr(rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)))[0]
    spec_g, H0g = bd.gauge_transform(trivial2, H0, U)
    H1g = bd.MetricField(torus64, spec_g,
                         [np.einsum("ij,...jk,kl->...il", U, d, bd.mat_h(U))
                          for d in H1.data], "metric")
    v0 = fn.functional_path(H0, H1).value
    v1 = fn.functional_path(H0g, H1g).value
    assert abs(v0 - v1) < 1e-9


def test_quadrature_convergence_in_t(rank2_pair):
    H0, H1 = rank2_pair
    v16 = fn.functional_path(H0, H1, n_t=16).value
    v32 = fn.functional_path(H0, H1, n_t=32).value
    assert abs(v16 - v32) < 1e-9


@given(st.floats(min_value=-30.0, max_value=30.0))
def test_psi_kernel_positive_and_consistent(x):
    v = fn.psi_kernel(np.array([x]))[0]
    assert v > 0.0
    if abs(x) > 1e-3:
        assert abs(v - (np.exp(x) - x - 1.0) / x**2) < 1e-12 * max(1.0, np.exp(x))
    else:
        assert abs(v - 0.5) < 1e-3


def test_psi_kernel_series_branch_continuity():
    # probe points straddling the branch switch, close enough that the
    # function's own variation (~0.18 * dx) is negligible
    left = fn.psi_kernel(np.array([0.1 * (1 - 1e-13)]))[0]
    right = fn.psi_kernel(np.array([0.1 * (1 + 1e-13)]))[0]
    assert abs(left - right) < 1e-12


def test_lemma4_decomposition_atiyah(torus64):
    spec = bd.make_bundle("atiyah", "torus", a=1.0)
    inc = so.make_inclusion("atiyah_sub", torus64, amb_spec=spec)
    H0 = bd.make_metric(torus64, spec, "atiyah-default")
    eta = bd.bump_endo(torus64, spec, H0, seed=11, amplitude=0.4)
    H1 = bd.make_metric(torus64, spec, "exp_perturb", base=H0, eta=eta)
    res = fn.decomposition_residual(H0, H1, inc)
    assert res.residual < 1e-3


def test_lemma4_split_case_exact(torus32, trivial2):
    inc = so.make_inclusion("coordinate", torus32, amb_spec=trivial2)
    H0 = bd.make_metric(torus32, trivial2, "identity")
    phi = torus32.sample(lambda z: 0.25 * np.sin(2 * np.pi * np.imag(z)))
    data = [d.copy() for d in H0.data]
    data[0][..., 0, 0] = np.exp(phi[0])
    data[0][..., 1, 1] = np.exp(-0.5 * phi[0])
    H1 = bd.MetricField(torus32, trivial2, data, "metric")
    bd.sync_ghosts(H1)
    res = fn.decomposition_residual(H0, H1, inc)
    assert res.residual < 1e-8


def test_lemma4_slope_mismatch_rejected(sphere_mid):
    inc = so.make_inclusion("euler", sphere_mid)
    H = bd.make_metric(sphere_mid, inc.amb_spec, "identity")
    with pytest.raises(fn.PreconditionError):
        fn.decomposition_residual(H, H, inc)


def test_exp_path_rejects_nonpositive(rank2_pair, torus64, trivial2):
    H0, _ = rank2_pair
    bad = bd.MetricField(torus64, trivial2,
                         [d.copy() for d in H0.data], "metric")
    bad.data[0][30, 30] = np.array([[-1.0, 0], [0, 1.0]])
    with pytest.raises(bd.BundleError):
        fn.functional_path(H0, bad)
