import numpy as np
import pytest

from hymlab import _stepper as st
from hymlab import bundles as bd
from hymlab import chern as ch
from hymlab import flow as fl
from hymlab import functional as fn
from hymlab import geometry as geo


def test_conformal_normalize_inverts_line_factor(torus64):
    line = bd.make_bundle("trivial", "torus", rank=1)
    H0 = bd.make_metric(torus64, line, "identity")
    psi = torus64.sample(lambda z: 0.3 * np.cos(2 * np.pi * np.real(z))
                         + 0.1 * np.sin(2 * np.pi * np.imag(z)))
    H = bd.make_metric(torus64, line, "conformal", base=H0, phi=psi)
    Hn = fl.conformal_normalize(H)
    own = torus64.charts[0].owned
    logH = np.log(np.real(Hn.data[0][own][..., 0, 0]))
    # back to flat up to an additive constant: phi = -psi + mean(psi)
    assert np.abs(logH - logH.mean()).max() < 1e-7


def test_conformal_normalize_fixes_he_metric(torus64):
    H0 = bd.make_metric(torus64, bd.make_bundle("trivial", "torus", rank=1), "identity")
    Hn = fl.conformal_normalize(H0)
    assert max(np.abs(a - b).max() for a, b in zip(Hn.data, H0.data)) == 0.0


def test_conformal_normalize_sphere_trace(sphere_mid):
    H = bd.make_metric(sphere_mid, bd.make_bundle("o", "sphere", k=2), "fs")
    Hn = fl.conformal_normalize(H)
    lf = ch.lambda_f(Hn)
    c_hat = ch.he_constant(Hn)
    worst = max(np.abs(np.real(np.trace(d[c.owned], axis1=-2, axis2=-1)) - c_hat).max()
                for d, c in zip(lf.data, sphere_mid.charts))
    assert worst < 1e-6


def test_atiyah_normalize_precondition(torus32):
    spec = bd.make_bundle("atiyah", "torus", a=1.0)
    H = bd.make_metric(torus32, spec, "atiyah-default")
    Hn = fl.conformal_normalize(H)           # degree-0: source is mean free
    assert ch.he_defect(Hn) < 1.0


def test_scalar_heat_oracle_modes(torus64):
    n = torus64.params["n"]
    x = np.real(torus64.charts[0].nodes[torus64.charts[0].owned])
    phi0 = 0.3 * np.cos(2 * np.pi * x)
    out = fl.scalar_heat_oracle(torus64, phi0, 0.25)
    assert np.abs(out - phi0 * np.exp(-np.pi**2 * 0.25)).max() < 1e-12
    const = fl.scalar_heat_oracle(torus64, np.full((n, n), 0.7), 5.0)
    assert np.abs(const - 0.7).max() < 1e-12


def test_scalar_heat_oracle_steady_state(torus64):
    # d(phi)/dt = lap(phi) - source relaxes onto lap(phi) = source
    n = torus64.params["n"]
    own = torus64.charts[0].owned
    x = np.real(torus64.charts[0].nodes[own])
    psi = 0.2 * np.cos(2 * np.pi * x)
    source = -np.pi**2 * psi      # continuum lap of psi
    out = fl.scalar_heat_oracle(torus64, np.zeros((n, n)), 50.0, source=source)
    assert np.abs(out - psi).max() < 1e-10


def test_stepper_cross_validation(torus64, trivial2):
    H0 = bd.make_metric(torus64, trivial2, "identity")
    eta = bd.trig_endo(torus64, trivial2, H0, seed=42, amplitude=0.3)
    H1 = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta)
    plan = st.build_plan(torus64, trivial2, ch.he_constant(H1), 0.2)
    arr = st.stack_metric(H1)
    Ha, dMa, hya, oka = st.step_numba(plan, arr.copy(), 1e-4)
    Hb, dMb, hyb, okb = st.step_numpy(plan, arr.copy(), 1e-4)
    assert oka and okb
    assert np.abs(Ha - Hb).max() < 1e-12
    assert abs(dMa - dMb) < 1e-14
    assert abs(hya - hyb) < 1e-12


def test_he_start_is_fixed_point(sphere_mid):
    H = bd.make_metric(sphere_mid, bd.make_bundle("o", "sphere", k=1), "fs")
    Hn = fl.conformal_normalize(H)
    plan = st.build_plan(sphere_mid, Hn.spec, ch.he_constant(Hn), 0.2)
    arr = st.stack_metric(Hn)
    out, dM, hym, ok = st.step_numba(plan, arr.copy(), plan.dt_cap)
    assert ok
    scale = np.abs(arr).max()
    assert np.abs(out - arr).max() < 1e-10 * scale


def test_flow_monotone_and_oracle_match(torus64):
    line = bd.make_bundle("trivial", "torus", rank=1)
    H0 = bd.make_metric(torus64, line, "identity")
    phi0 = torus64.sample(lambda z: 0.3 * np.cos(2 * np.pi * np.real(z)))
    H = bd.make_metric(torus64, line, "conformal", base=H0, phi=phi0)
    ctl = fl.FlowControls(dt0=1.0, t_max=0.1, cfl_safety=0.2, normalize=False,
                          trace_stride=500)
    trace, Hend, _ = fl.run(H, ctl)
    assert max(trace.step_dm) <= 0.0
    own = torus64.charts[0].owned
    phi_f = np.log(np.real(Hend.data[0][own][..., 0, 0]))
    phi_o = fl.scalar_heat_oracle(torus64, phi0[0][own], 0.1)
    assert np.abs(phi_f - phi_o).max() < 1e-6


def test_flow_m_matches_functional(torus64, trivial2):
    # the step-accumulated energy agrees with the independent path
    # evaluator; the gap is the in-step quadrature error of the transient
    H0 = bd.make_metric(torus64, trivial2, "identity")
    eta = bd.trig_endo(torus64, trivial2, H0, seed=5, amplitude=0.25)
    H1 = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta)
    ctl = fl.FlowControls(dt0=1.0, t_max=0.3, cfl_safety=0.5, normalize=False,
                          trace_stride=1000)
    trace, Hend, H0used = fl.run(H1, ctl)
    m_flow = trace.rows[-1][1]
    m_path = fn.functional_path(H0used, Hend).value
    assert abs(m_flow - m_path) < 1e-5


def test_lambda_f_heat_consistency(torus64):
    # along the rank-1 flow, d(Lambda F)/dt tracks lap(Lambda F)
    line = bd.make_bundle("trivial", "torus", rank=1)
    H0 = bd.make_metric(torus64, line, "identity")
    phi0 = torus64.sample(lambda z: 0.2 * np.cos(2 * np.pi * np.real(z)))
    H = bd.make_metric(torus64, line, "conformal", base=H0, phi=phi0)
    plan = st.build_plan(torus64, line, ch.he_constant(H), 0.2)
    arr = st.stack_metric(H)
    dt = plan.dt_cap
    lf0 = ch.lambda_f(st.unstack_metric(plan, arr))
    arr2, _, _, _ = st.step_numba(plan, arr.copy(), dt)
    lf1 = ch.lambda_f(st.unstack_metric(plan, arr2))
    own = torus64.charts[0].owned
    rate = (np.real(lf1.data[0][own][..., 0, 0]) - np.real(lf0.data[0][own][..., 0, 0])) / dt
    fld = [np.real(lf0.data[0][..., 0, 0]).copy()]
    geo.sync_scalar(torus64, fld)
    lap = geo.laplacian(torus64, fld)[0][own]
    scale = np.abs(lap).max()
    assert np.abs(rate - np.real(lap)).max() < 0.02 * scale


def test_run_emits_trace_and_checkpoints(tmp_path, torus32):
    spec = bd.make_bundle("atiyah", "torus", a=1.0)
    H = bd.make_metric(torus32, spec, "atiyah-default")
    out = tmp_path / "run"
    ctl = fl.FlowControls(dt0=1.0, t_max=0.02, cfl_safety=0.5, normalize=True,
                          trace_stride=10, checkpoint_stride=10, out_dir=str(out))
    trace, Hend, _ = fl.run(H, ctl)
    assert (out / "trace.csv").exists()
    cks = sorted(out.glob("checkpoint_*.bin"))
    assert cks
    H2, header = bd.load_checkpoint(cks[-1], torus32, spec)
    assert header["flow"]["step"] > 0


def test_resume_is_bitwise(tmp_path, torus32):
    spec = bd.make_bundle("atiyah", "torus", a=1.0)
    H = bd.make_metric(torus32, spec, "atiyah-default")
    out_a = tmp_path / "unbroken"
    ctl_a = fl.FlowControls(dt0=1.0, t_max=0.04, cfl_safety=0.5, normalize=True,
                            trace_stride=5, checkpoint_stride=0, out_dir=str(out_a))
    trace_a, Hend_a, _ = fl.run(H, ctl_a)
    # resume from an intermediate checkpoint (the final one of a shorter
    # run sits at a clamped last step, which an unbroken run never takes)
    out_b = tmp_path / "part1"
    ctl_b = fl.FlowControls(dt0=1.0, t_max=0.02, cfl_safety=0.5, normalize=True,
                            trace_stride=5, checkpoint_stride=13, out_dir=str(out_b))
    trace_b, Hend_b, _ = fl.run(H, ctl_b)
    ck = sorted((out_b).glob("checkpoint_*.bin"))[-2]
    ctl_c = fl.FlowControls(dt0=1.0, t_max=0.04, cfl_safety=0.5, normalize=True,
                            trace_stride=5, checkpoint_stride=0,
                            out_dir=str(tmp_path / "part2"))
    trace_c, Hend_c, _ = fl.run(H, ctl_c, resume=str(ck))
    assert all((a == b).all() for a, b in zip(Hend_a.data, Hend_c.data))
    rows_a = {r[0]: r for r in trace_a.rows}
    rows_c = {r[0]: r for r in trace_c.rows}
    common = sorted(set(rows_a) & set(rows_c))
    assert len(common) >= 3
    for t in common:
        assert np.abs(np.array(rows_a[t]) - np.array(rows_c[t])).max() < 1e-9


def test_he_report_and_ab_compare():
    trace = fl.FlowTrace()
    for k, (t, d, l2) in enumerate([(0.0, 0.5, 30.0), (1.0, 0.08, 22.0),
                                    (2.0, 0.03, 20.0), (3.0, 0.008, 19.8)]):
        trace.rows.append((t, -k, d, 1.0, l2, 1.0, 1.0, 0.0, 0.0))
    rep = fl.he_report(trace, (0.1, 0.05, 0.01, 0.001))
    assert rep["first_passage"][0.1] == 1.0
    assert rep["first_passage"][0.05] == 2.0
    assert rep["first_passage"][0.01] == 3.0
    assert rep["first_passage"][0.001] is None
    ab = fl.ab_compare(trace, [(1.0, 1), (-1.0, 1)], 2, 0.0)
    assert abs(ab["phi_squared_internal"] - 2 * np.pi**2) < 1e-12
    assert ab["inf_lambda_f_l2"] == 19.8
    with pytest.raises(bd.BundleError):
        fl.ab_compare(trace, [(-1.0, 1), (1.0, 1)], 2, 0.0)
    with pytest.raises(bd.BundleError):
        fl.ab_compare(trace, [(1.0, 1), (-1.0, 2)], 2, 0.0)
    trivial = fl.ab_compare(trace, [(0.0, 2)], 2, 0.0)
    assert trivial["phi_squared_internal"] == 0.0


def test_rejection_paths(sphere_mid):
    spec = bd.make_bundle("o", "sphere", k=1)
    H = bd.make_metric(sphere_mid, spec, "fs")
    eta = bd.trig_endo(sphere_mid, spec, H, seed=1, amplitude=0.5)
    Hp = bd.make_metric(sphere_mid, spec, "exp_perturb", base=H, eta=eta)
    plan = st.build_plan(sphere_mid, spec, ch.he_constant(Hp), 0.2)
    arr = st.stack_metric(Hp)
    # an absurd dt destroys positivity/finiteness -> rejected, state intact
    out, dM, hym, ok = st.step_numba(plan, arr.copy(), 1e9)
    assert not ok
    # a sane dt passes and dissipates
    out, dM, hym, ok = st.step_numba(plan, arr.copy(), plan.dt_cap)
    assert ok and dM < 0.0
