import os
import tempfile

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hymlab import bundles as bd
from hymlab import geometry as geo


def test_catalog_and_cocycle_guard():
    spec = bd.make_bundle("atiyah", "torus", a=1.0)
    assert np.abs(spec.a1 @ spec.atau - spec.atau @ spec.a1).max() < 1e-14
    with pytest.raises(bd.BundleError):
        bd.make_bundle("raw", "torus", a1=[[0, 1], [1, 0]], atau=[[1, 1], [0, 1]])
    o0 = bd.make_bundle("o", "sphere", k=0)
    t = o0.transition_at(np.array([1.3 + 0.1j]))
    assert np.abs(t - 1.0).max() < 1e-15


def test_singular_transition_rejected():
    def bad(z):
        z = np.asarray(z, dtype=complex)
        return (0.0 * z + 1e-12)[..., None, None]
    with pytest.raises(bd.BundleError):
        bd.make_bundle("raw", "sphere", transition=bad, rank=1)
    def bad2(z):
        z = np.asarray(z, dtype=complex)
        return (z - 1.0)[..., None, None]   # vanishes on the unit circle
    with pytest.raises(bd.BundleError):
        bd.make_bundle("raw", "sphere", transition=bad2, rank=1)


def test_identity_metric_needs_unitary_gluing(torus32=None):
    t = geo.build_torus(1j, 32)
    spec = bd.make_bundle("atiyah", "torus", a=1.0)
    with pytest.raises(bd.BundleError):
        bd.make_metric(t, spec, "identity")
    flat = bd.make_bundle("flat_line", "torus", alpha=0.7)
    H = bd.make_metric(t, flat, "identity")
    assert bd.validate_metric(H)["compatibility"] == 0.0


def test_fs_metric_values_and_fringe_reproduction(sphere_mid):
    spec = bd.make_bundle("o", "sphere", k=1)
    H = bd.make_metric(sphere_mid, spec, "fs")
    c0 = sphere_mid.charts[0]
    rho = np.abs(c0.nodes[c0.owned]) ** 2
    assert np.abs(H.data[0][c0.owned][..., 0, 0] - 1.0 / (1.0 + rho)).max() < 1e-14
    # fringe rows are interpolation-derived; they reproduce the closed form
    analytic = bd._fs_metric(sphere_mid, spec)
    assert max(np.abs(a - b).max() for a, b in zip(H.data, analytic.data)) < 1e-10


def test_atiyah_default_blend(torus32):
    spec = bd.make_bundle("atiyah", "torus", a=1.0)
    H = bd.make_metric(torus32, spec, "atiyah-default")
    rep = bd.validate_metric(H)
    assert rep["compatibility"] == 0.0
    own = torus32.charts[0].owned
    dets = np.linalg.det(H.data[0][own])
    assert np.abs(dets - 1.0).max() < 1e-12   # unimodular blend


def test_sync_idempotent_bitwise(sphere_mid):
    spec = bd.make_bundle("sum", "sphere", k1=1, k2=-1)
    H = bd.make_metric(sphere_mid, spec, "fs")
    bd.sync_ghosts(H)
    snap = [d.copy() for d in H.data]
    bd.sync_ghosts(H)
    assert all((a == b).all() for a, b in zip(snap, H.data))


def test_endo_log_exp_roundtrip(torus64, trivial2):
    H0 = bd.make_metric(torus64, trivial2, "identity")
    eta = bd.bump_endo(torus64, trivial2, H0, seed=5, amplitude=0.5)
    H1 = bd.make_metric(torus64, trivial2, "exp_perturb", base=H0, eta=eta)
    s = bd.endo_log(H0, H1)
    H1b = bd.endo_exp(H0, s)
    assert max(np.abs(a - b).max() for a, b in zip(H1.data, H1b.data)) < 1e-10


def test_endo_log_constant_scaling(torus64, trivial2):
    H0 = bd.make_metric(torus64, trivial2, "identity")
    H2 = bd.MetricField(torus64, trivial2, [np.exp(0.7) * d for d in H0.data], "metric")
    s = bd.endo_log(H0, H2)
    assert max(np.abs(d - 0.7 * np.eye(2)).max() for d in s.data) < 1e-12
    s0 = bd.endo_log(H0, H0)
    assert max(np.abs(d).max() for d in s0.data) == 0.0


@given(st.integers(min_value=0, max_value=10_000))
def test_eig_pair_roundtrip_random_spd(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    b = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    h0 = a @ a.conj().T + 0.1 * np.eye(2)
    h1 = b @ b.conj().T + 0.1 * np.eye(2)
    lam, B = bd.eig_pair(h0[None], h1[None])
    h = np.linalg.solve(h0, h1)
    rebuilt = B[0] @ np.diag(lam[0]) @ np.linalg.inv(B[0])
    assert np.abs(rebuilt - h).max() < 1e-10 * max(1.0, np.abs(h).max())
    assert np.abs(B[0].conj().T @ h0 @ B[0] - np.eye(2)).max() < 1e-10


def test_tensor_and_power_metrics(sphere_mid):
    h1 = bd.make_metric(sphere_mid, bd.make_bundle("o", "sphere", k=1), "fs")
    ht = bd.tensor_metric(h1, h1)
    c0 = sphere_mid.charts[0]
    rho = np.abs(c0.nodes) ** 2
    assert np.abs(ht.data[0][c0.owned][..., 0, 0] - (1 + rho[c0.owned]) ** -2).max() < 1e-13
    hb = bd.make_metric(sphere_mid, bd.make_bundle("sum", "sphere", k1=1, k2=-1), "fs")
    he = bd.ext_power_metric(hb, 2)
    det = np.linalg.det(hb.data[0])
    assert np.abs(he.data[0][..., 0, 0] - det).max() < 1e-13
    hs = bd.sym_power_metric(h1, 3)
    assert np.abs(hs.data[0][..., 0, 0] - h1.data[0][..., 0, 0] ** 3).max() < 1e-13


def test_extension_class_oracle():
    assert bd.extension_class_oracle(bd.make_bundle("atiyah", "torus", a=0.0)) == "split"
    assert bd.extension_class_oracle(bd.make_bundle("atiyah", "torus", a=1.0)) == "nonsplit"
    assert bd.extension_class_oracle(bd.make_bundle("atiyah", "torus", a=-3 + 2j)) == "nonsplit"


def test_checkpoint_roundtrip(sphere_mid):
    spec = bd.make_bundle("sum", "sphere", k1=1, k2=-1)
    H = bd.make_metric(sphere_mid, spec, "fs")
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "state.bin")
        bd.save_checkpoint(p, H, {"flow": {"t": 0.5, "dt": 1e-4, "step": 10,
                                           "m": -1.25, "streak": 3}})
        H2, header = bd.load_checkpoint(p, sphere_mid, spec)
        assert header["flow"]["m"] == -1.25
        assert all((a == b).all() for a, b in zip(H.data, H2.data))


def test_checkpoint_mismatch_rejected(sphere_mid, torus32):
    spec = bd.make_bundle("sum", "sphere", k1=1, k2=-1)
    H = bd.make_metric(sphere_mid, spec, "fs")
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "state.bin")
        bd.save_checkpoint(p, H)
        wrong_spec = bd.make_bundle("trivial", "torus", rank=2)
        with pytest.raises(bd.BundleError):
            bd.load_checkpoint(p, torus32, wrong_spec)


def test_bump_perturbation_compatibility(torus32):
    spec = bd.make_bundle("atiyah", "torus", a=1.0)
    base = bd.make_metric(torus32, spec, "atiyah-default")
    eta = bd.bump_endo(torus32, spec, base, seed=11, amplitude=0.3)
    H = bd.make_metric(torus32, spec, "exp_perturb", base=base, eta=eta)
    rep = bd.validate_metric(H)
    assert rep["compatibility"] == 0.0
    assert rep["min_eigenvalue"] > 1e-12


def test_holo_offdiag_preserves_det(sphere_mid):
    spec = bd.make_bundle("sum", "sphere", k1=1, k2=-1)
    base = bd.make_metric(sphere_mid, spec, "fs")
    eta = bd.holo_offdiag_endo(sphere_mid, spec, base, seed=3, amplitude=0.4)
    H = bd.make_metric(sphere_mid, spec, "exp_perturb", base=base, eta=eta)
    own = sphere_mid.charts[0].owned
    d0 = np.linalg.det(base.data[0][own])
    d1 = np.linalg.det(H.data[0][own])
    assert np.abs(d0 - d1).max() < 1e-12
    assert max(np.abs(d[..., 0, 1]).max() for d in eta.data) > 0.1
