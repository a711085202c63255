"""Hot-loop kernels for the metric flow.

One flow step (midpoint variant) does, on padded per-chart arrays stacked
as ``(n_charts, R, C, r, r)``:

    D(H)   = sa-projection of g^{-1} (-d_zbar(H^{-1} d_z H)) - c_hat I
    H_mid  = H exp(-dt/2 D(H));  sync ghosts
    H_new  = H exp(-dt D(H_mid)); hermitize; sync ghosts
    dM     = -dt * integral tr(D(H_mid)^2) dvol   (<= 0 structurally)

The exponential update preserves Hermiticity and positivity exactly in
exact arithmetic; the self-adjoint projection and per-step hermitization
keep floating-point drift at rounding level.  The energy increment is the
midpoint rule in the path parameter applied to the exact path integrand,
so the accumulated energy is a second-order-accurate quadrature of the
true value and monotone by construction.

Numba kernels cover ranks 1 and 2 (every shipped flow); ``step_numpy``
implements the identical algorithm for any rank and doubles as a
cross-check of the compiled path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import HALF, BaseGeometry
from .bundles import (BundleSpec, MetricField, expm_selfadjoint, hermitize,
                      mat_h, sync_ghosts, transport_matrices)

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco if not (args and callable(args[0])) else args[0]


@dataclass
class StepperPlan:
    geometry: BaseGeometry
    spec: BundleSpec
    c_hat: float
    dt_cap: float
    # geometry tables
    drow: np.ndarray          # (nch, R, 7)
    dcol: np.ndarray          # (7,)
    drow2: np.ndarray         # (nch, R, 7)
    dcol2: np.ndarray         # (7,)
    col_periodic: bool
    alpha_z: np.ndarray       # (nch, R, C)
    beta_z: np.ndarray
    crr: np.ndarray           # (nch, R, C) real mixed-operator coefficients
    crad: np.ndarray
    ccc: np.ndarray
    crc: float
    ginv: np.ndarray          # (nch, R, C)
    wg: np.ndarray            # (nch, R, C) quadrature * g, zero off owned
    r0: int
    r1: int
    c0: int
    c1: int
    # sync table, metric transform
    gch: np.ndarray
    grow: np.ndarray
    gcol: np.ndarray
    sch: np.ndarray
    srows: np.ndarray
    scols: np.ndarray
    sw: np.ndarray
    TL: np.ndarray
    TR: np.ndarray
    scratch: dict = field(default_factory=dict)

    def buffers(self, shape):
        if "dH" not in self.scratch:
            self.scratch["dH"] = np.zeros(shape, dtype=np.complex128)
            self.scratch["D0"] = np.zeros(shape, dtype=np.complex128)
            self.scratch["Hmid"] = np.zeros(shape, dtype=np.complex128)
            self.scratch["Dm"] = np.zeros(shape, dtype=np.complex128)
        return self.scratch


def build_plan(geom: BaseGeometry, spec: BundleSpec, c_hat: float,
               cfl_safety: float = 0.2) -> StepperPlan:
    charts = geom.charts
    nch = len(charts)
    R, C = charts[0].shape
    drow = np.stack([c.drow_w for c in charts])
    drow2 = np.stack([c.drow2_w for c in charts])
    alpha_z = np.stack([c.alpha_z * np.ones((R, C)) for c in charts]).astype(complex)
    beta_z = np.stack([c.beta_z * np.ones((R, C)) for c in charts]).astype(complex)
    crr = np.stack([c.crr * np.ones((R, C)) for c in charts])
    crad = np.stack([c.cr * np.ones((R, C)) for c in charts])
    ccc = np.stack([c.ccc * np.ones((R, C)) for c in charts])
    ginv = np.stack([1.0 / c.metric_g for c in charts])
    wg = np.stack([c.quad_weights * c.metric_g for c in charts])
    # update region: every row the flow evolves (owned plus, on the
    # sphere, the redundant interior annulus rows); the outermost PAD rows
    # and reflection rows are fringe, refreshed by sync each step
    r0, r1 = HALF * 2, R - HALF * 2
    if geom.kind == "torus":
        c0, c1 = HALF * 2, C - HALF * 2
    else:
        c0, c1 = 0, C

    if geom.kind == "torus":
        tau = geom.params["tau"]
        n = geom.params["n"]
        dx_min = min(1.0, abs(tau)) / n
        min_g = 1.0 / tau.imag
    else:
        gaps = []
        ang = []
        for c in charts:
            s = c.radii
            gaps.append(np.abs(np.diff(s)).min())
            ang.append(np.abs(s).min() * 2 * np.pi / C)
        dx_min = min(min(gaps), min(ang))
        min_g = min(float(c.metric_g.min()) for c in charts)
    dt_cap = cfl_safety * min_g * dx_min**2

    W, Winv = transport_matrices(spec, geom)
    t = geom.sync
    fr = t.fringe
    TL = mat_h(Winv[fr]).copy()
    TR = Winv[fr].copy()
    return StepperPlan(
        geometry=geom, spec=spec, c_hat=c_hat, dt_cap=dt_cap,
        drow=drow, dcol=np.asarray(charts[0].dcol_w),
        drow2=drow2, dcol2=np.asarray(charts[0].dcol2_w),
        col_periodic=charts[0].col_periodic,
        alpha_z=alpha_z, beta_z=beta_z,
        crr=crr, crad=crad, ccc=ccc, crc=float(charts[0].crc),
        ginv=ginv, wg=wg, r0=r0, r1=r1, c0=c0, c1=c1,
        gch=t.ghost_chart[fr].copy(), grow=t.ghost_row[fr].copy(),
        gcol=t.ghost_col[fr].copy(),
        sch=t.src_chart[fr].copy(), srows=t.src_rows[fr].copy(),
        scols=t.src_cols[fr].copy(),
        sw=t.src_w[fr].copy(), TL=TL, TR=TR,
    )


def stack_metric(H: MetricField) -> np.ndarray:
    return np.stack(H.data).astype(np.complex128)


def unstack_metric(plan: StepperPlan, arr: np.ndarray) -> MetricField:
    return MetricField(plan.geometry, plan.spec,
                       [arr[i].copy() for i in range(arr.shape[0])], "metric")


# ---------------------------------------------------------------------------
# numba kernels (ranks 1 and 2)


@njit(cache=True)
def _sync_kernel(F, gch, grow, gcol, sch, srows, scols, sw, TL, TR):
    G, K = srows.shape
    r = F.shape[3]
    acc = np.empty((r, r), dtype=np.complex128)
    tmp = np.empty((r, r), dtype=np.complex128)
    for e in range(G):
        for i in range(r):
            for j in range(r):
                acc[i, j] = 0.0
        c = sch[e]
        for k in range(K):
            w = sw[e, k]
            if w != 0.0:
                ii = srows[e, k]
                jj = scols[e, k]
                for i in range(r):
                    for j in range(r):
                        acc[i, j] += w * F[c, ii, jj, i, j]
        for i in range(r):
            for j in range(r):
                s = 0.0 + 0.0j
                for k2 in range(r):
                    s += TL[e, i, k2] * acc[k2, j]
                tmp[i, j] = s
        for i in range(r):
            for j in range(r):
                s = 0.0 + 0.0j
                for k2 in range(r):
                    s += tmp[i, k2] * TR[e, k2, j]
                F[gch[e], grow[e], gcol[e], i, j] = s


@njit(cache=True)
def _defect_kernel(H, dH, D, drow, dcol, drow2, dcol2, colper, az, bz,
                   crr, crad, ccc, crc, ginv, c_hat, r0, r1, c0, c1):
    """D <- sa-projection of (g^{-1} F - c_hat I) on the update region.

    Curvature through F = H^{-1}[(d_z H)^dag H^{-1}(d_z H) - d_z d_zbar H]
    with the direct mixed second-derivative stencil.
    """
    nch, R, C, r, _ = H.shape
    for ch in range(nch):
        for i in range(r0, r1):
            for j in range(c0, c1):
                a = az[ch, i, j]
                b = bz[ch, i, j]
                w2r = crr[ch, i, j]
                w1r = crad[ch, i, j]
                w2c = ccc[ch, i, j]
                gi = ginv[ch, i, j]
                for mi in range(r):
                    for mj in range(r):
                        dr = 0.0 + 0.0j
                        d2r = 0.0 + 0.0j
                        for k in range(7):
                            v = H[ch, i + k - HALF, j, mi, mj]
                            dr += drow[ch, i, k] * v
                            d2r += drow2[ch, i, k] * v
                        dc = 0.0 + 0.0j
                        d2c = 0.0 + 0.0j
                        if colper:
                            for k in range(7):
                                v = H[ch, i, (j + k - HALF) % C, mi, mj]
                                dc += dcol[k] * v
                                d2c += dcol2[k] * v
                        else:
                            for k in range(7):
                                v = H[ch, i, j + k - HALF, mi, mj]
                                dc += dcol[k] * v
                                d2c += dcol2[k] * v
                        dH[ch, i, j, mi, mj] = a * dr + b * dc
                        mix = w2r * d2r + w1r * dr + w2c * d2c
                        if crc != 0.0:
                            dcr = 0.0 + 0.0j
                            for k in range(7):
                                acc = 0.0 + 0.0j
                                for l in range(7):
                                    acc += dcol[l] * H[ch, i + k - HALF,
                                                       j + l - HALF, mi, mj]
                                dcr += drow[ch, i, k] * acc
                            mix += crc * dcr
                        # stash the mixed derivative in D for the moment
                        D[ch, i, j, mi, mj] = mix
                # F = H^{-1} (G^dag H^{-1} G - mix), Lambda F = g^{-1} F
                if r == 1:
                    h00 = H[ch, i, j, 0, 0]
                    g00 = dH[ch, i, j, 0, 0]
                    f = (np.conj(g00) * g00 / h00 - D[ch, i, j, 0, 0]) / h00
                    D[ch, i, j, 0, 0] = complex((gi * f).real - c_hat, 0.0)
                else:
                    h00 = H[ch, i, j, 0, 0]
                    h01 = H[ch, i, j, 0, 1]
                    h10 = H[ch, i, j, 1, 0]
                    h11 = H[ch, i, j, 1, 1]
                    det = h00 * h11 - h01 * h10
                    g00 = dH[ch, i, j, 0, 0]
                    g01 = dH[ch, i, j, 0, 1]
                    g10 = dH[ch, i, j, 1, 0]
                    g11 = dH[ch, i, j, 1, 1]
                    # T = H^{-1} G
                    t00 = (h11 * g00 - h01 * g10) / det
                    t01 = (h11 * g01 - h01 * g11) / det
                    t10 = (-h10 * g00 + h00 * g10) / det
                    t11 = (-h10 * g01 + h00 * g11) / det
                    # P = G^dag T - mix
                    p00 = np.conj(g00) * t00 + np.conj(g10) * t10 - D[ch, i, j, 0, 0]
                    p01 = np.conj(g00) * t01 + np.conj(g10) * t11 - D[ch, i, j, 0, 1]
                    p10 = np.conj(g01) * t00 + np.conj(g11) * t10 - D[ch, i, j, 1, 0]
                    p11 = np.conj(g01) * t01 + np.conj(g11) * t11 - D[ch, i, j, 1, 1]
                    # Lambda F = g^{-1} H^{-1} P; defect D = LF - c_hat I
                    f00 = gi * (h11 * p00 - h01 * p10) / det - c_hat
                    f01 = gi * (h11 * p01 - h01 * p11) / det
                    f10 = gi * (-h10 * p00 + h00 * p10) / det
                    f11 = gi * (-h10 * p01 + h00 * p11) / det - c_hat
                    # H-self-adjoint projection (rounding-level here since
                    # H P is Hermitian by construction)
                    b00 = np.conj(f00) * h00 + np.conj(f10) * h10
                    b01 = np.conj(f00) * h01 + np.conj(f10) * h11
                    b10 = np.conj(f01) * h00 + np.conj(f11) * h10
                    b11 = np.conj(f01) * h01 + np.conj(f11) * h11
                    e00 = (h11 * b00 - h01 * b10) / det
                    e01 = (h11 * b01 - h01 * b11) / det
                    e10 = (-h10 * b00 + h00 * b10) / det
                    e11 = (-h10 * b01 + h00 * b11) / det
                    D[ch, i, j, 0, 0] = 0.5 * (f00 + e00)
                    D[ch, i, j, 0, 1] = 0.5 * (f01 + e01)
                    D[ch, i, j, 1, 0] = 0.5 * (f10 + e10)
                    D[ch, i, j, 1, 1] = 0.5 * (f11 + e11)


@njit(cache=True)
def _trace_project_kernel(D, wg, r0, r1, c0, c1):
    """Remove pointwise fluctuations of tr(D), keeping the global mean.

    The continuum flow keeps det h constant (the trace of the defect is
    identically zero after conformal normalization), so pointwise trace
    content at any later time is discretization noise; unchecked it
    accumulates into log det h and shows up as degree drift on coarse
    grids.  The global mean is retained, so block scalings and the energy
    trace are untouched.
    """
    nch = D.shape[0]
    r = D.shape[3]
    num = 0.0
    den = 0.0
    for ch in range(nch):
        for i in range(r0, r1):
            for j in range(c0, c1):
                w = wg[ch, i, j]
                if w != 0.0:
                    tr = 0.0
                    for k in range(r):
                        tr += D[ch, i, j, k, k].real
                    num += w * tr
                    den += w
    mean = num / (den * r)
    for ch in range(nch):
        for i in range(r0, r1):
            for j in range(c0, c1):
                tr = 0.0
                for k in range(r):
                    tr += D[ch, i, j, k, k].real
                shift = tr / r - mean
                for k in range(r):
                    D[ch, i, j, k, k] -= shift
    return mean


@njit(cache=True)
def _energy_kernel(D, wg, r0, r1, c0, c1):
    """integral tr(D^2) dvol for self-adjoint D (= |D|_H^2 density)."""
    nch = D.shape[0]
    r = D.shape[3]
    total = 0.0
    for ch in range(nch):
        for i in range(r0, r1):
            for j in range(c0, c1):
                w = wg[ch, i, j]
                if w != 0.0:
                    if r == 1:
                        total += w * (D[ch, i, j, 0, 0].real) ** 2
                    else:
                        t = D[ch, i, j, 0, 0] + D[ch, i, j, 1, 1]
                        dt2 = (D[ch, i, j, 0, 0] * D[ch, i, j, 1, 1]
                               - D[ch, i, j, 0, 1] * D[ch, i, j, 1, 0])
                        total += w * (t * t - 2.0 * dt2).real
    return total


@njit(cache=True)
def _exp_update_kernel(H, D, out, dt, r0, r1, c0, c1):
    """out <- hermitize(H exp(-dt D)) on owned cells; returns ok flag."""
    nch = H.shape[0]
    r = H.shape[3]
    ok = True
    for ch in range(nch):
        for i in range(r0, r1):
            for j in range(c0, c1):
                if r == 1:
                    v = H[ch, i, j, 0, 0].real * np.exp(-dt * D[ch, i, j, 0, 0].real)
                    out[ch, i, j, 0, 0] = v
                    if not (v > 0.0 and np.isfinite(v)):
                        ok = False
                else:
                    # eigen data of the self-adjoint 2x2 block Y = -dt D
                    y00 = -dt * D[ch, i, j, 0, 0]
                    y01 = -dt * D[ch, i, j, 0, 1]
                    y10 = -dt * D[ch, i, j, 1, 0]
                    y11 = -dt * D[ch, i, j, 1, 1]
                    a = 0.5 * (y00 + y11).real
                    dety = (y00 * y11 - y01 * y10).real
                    disc = a * a - dety
                    if disc < 0.0:
                        disc = 0.0
                    b = np.sqrt(disc)
                    ea = np.exp(a)
                    cb = np.cosh(b)
                    if b < 1e-6:
                        sb = 1.0 + b * b / 6.0 + b**4 / 120.0
                    else:
                        sb = np.sinh(b) / b
                    # exp(Y) = e^a [cosh b I + sinh b / b (Y - a I)]
                    q00 = ea * (cb + sb * (y00 - a))
                    q01 = ea * sb * y01
                    q10 = ea * sb * y10
                    q11 = ea * (cb + sb * (y11 - a))
                    h00 = H[ch, i, j, 0, 0]
                    h01 = H[ch, i, j, 0, 1]
                    h10 = H[ch, i, j, 1, 0]
                    h11 = H[ch, i, j, 1, 1]
                    n00 = h00 * q00 + h01 * q10
                    n01 = h00 * q01 + h01 * q11
                    n10 = h10 * q00 + h11 * q10
                    n11 = h10 * q01 + h11 * q11
                    # hermitize
                    m00 = complex(n00.real, 0.0)
                    m11 = complex(n11.real, 0.0)
                    m01 = 0.5 * (n01 + np.conj(n10))
                    out[ch, i, j, 0, 0] = m00
                    out[ch, i, j, 0, 1] = m01
                    out[ch, i, j, 1, 0] = np.conj(m01)
                    out[ch, i, j, 1, 1] = m11
                    tr = m00.real + m11.real
                    det = (m00 * m11 - m01 * np.conj(m01)).real
                    if not (tr > 0.0 and det > 0.0 and np.isfinite(tr) and np.isfinite(det)):
                        ok = False
    return ok


def step_numba(plan: StepperPlan, H: np.ndarray, dt: float, hym_gate: float = np.inf,
               det_project: bool = False):
    """One trial midpoint exponential step; H must have valid ghosts.

    Returns (H_new, dM, hym0, ok); H_new has valid ghosts.  A step is
    rejected (ok=False) on loss of positivity/finiteness or if the
    Hermitian-Yang-Mills energy at the half step exceeds ``hym_gate`` --
    the energy is non-increasing along the exact flow, so the driver
    gates against (a small multiple of) the lowest energy seen so far,
    which stops slow instability ratchets that a per-step relative check
    would let through.
    """
    buf = plan.buffers(H.shape)
    dH, D0 = buf["dH"], buf["D0"]
    Hmid, Dm = buf["Hmid"], buf["Dm"]
    args = (plan.drow, plan.dcol, plan.drow2, plan.dcol2, plan.col_periodic,
            plan.alpha_z, plan.beta_z, plan.crr, plan.crad, plan.ccc,
            plan.crc, plan.ginv, plan.c_hat, plan.r0, plan.r1, plan.c0, plan.c1)
    sync_args = (plan.gch, plan.grow, plan.gcol, plan.sch, plan.srows,
                 plan.scols, plan.sw, plan.TL, plan.TR)
    bounds = (plan.r0, plan.r1, plan.c0, plan.c1)

    _defect_kernel(H, dH, D0, *args)
    if det_project:
        _trace_project_kernel(D0, plan.wg, *bounds)
    hym0 = _energy_kernel(D0, plan.wg, *bounds)
    ok = _exp_update_kernel(H, D0, Hmid, dt / 2.0, *bounds)
    if not ok:
        return H, 0.0, hym0, False
    _sync_kernel(Hmid, *sync_args)
    _defect_kernel(Hmid, dH, Dm, *args)
    if det_project:
        _trace_project_kernel(Dm, plan.wg, *bounds)
    hym_mid = _energy_kernel(Dm, plan.wg, *bounds)
    # never let the energy rise above the current state's (plus slack) nor
    # above the driver's floor-based gate; both together block slow
    # instability ratchets while allowing recovery from a polluted state
    if hym_mid > max(hym_gate, hym0) + 1e-9:
        return H, 0.0, hym0, False
    dM = -dt * hym_mid
    Hnew = np.empty_like(H)
    ok = _exp_update_kernel(H, Dm, Hnew, dt, *bounds)
    if not ok:
        return H, 0.0, hym0, False
    _sync_kernel(Hnew, *sync_args)
    return Hnew, dM, hym0, True


# ---------------------------------------------------------------------------
# numpy twin (any rank); same algorithm, used for rank > 2 and validation


def _defect_numpy(plan: StepperPlan, H: np.ndarray) -> np.ndarray:
    geom = plan.geometry
    fields = [H[i] for i in range(H.shape[0])]
    from . import geometry as geo
    dH = geo.d_z(geom, fields)
    mH = geo.d_mixed(geom, fields)
    r = plan.spec.rank
    upd = (slice(plan.r0, plan.r1), slice(plan.c0, plan.c1))
    D = np.zeros_like(H)
    for cid in range(H.shape[0]):
        h = fields[cid][upd]
        g1 = dH[cid][upd]
        F = np.linalg.solve(h, mat_h(g1) @ np.linalg.solve(h, g1) - mH[cid][upd])
        Dc = F * plan.ginv[cid][upd][..., None, None] - plan.c_hat * np.eye(r)
        adj = np.linalg.solve(h, mat_h(Dc) @ h)
        D[cid][upd] = 0.5 * (Dc + adj)
    return D


def _energy_numpy(plan: StepperPlan, D: np.ndarray) -> float:
    upd = (slice(plan.r0, plan.r1), slice(plan.c0, plan.c1))
    total = 0.0
    for cid in range(D.shape[0]):
        tr2 = np.real(np.trace(D[cid][upd] @ D[cid][upd], axis1=-2, axis2=-1))
        total += np.sum(plan.wg[cid][upd] * tr2)
    return float(total)


def _sync_fringe_numpy(plan: StepperPlan, arr: np.ndarray) -> np.ndarray:
    vals = np.zeros((len(plan.grow), arr.shape[3], arr.shape[3]), dtype=complex)
    for cid in range(arr.shape[0]):
        sel = plan.sch == cid
        if sel.any():
            picked = arr[cid][plan.srows[sel], plan.scols[sel]]
            vals[sel] = np.einsum("gk,gk...->g...", plan.sw[sel], picked)
    out = np.einsum("gij,gjk,gkl->gil", plan.TL, vals, plan.TR)
    for cid in range(arr.shape[0]):
        sel = plan.gch == cid
        if sel.any():
            arr[cid][plan.grow[sel], plan.gcol[sel]] = out[sel]
    return arr


def _trace_project_numpy(plan: StepperPlan, D: np.ndarray) -> None:
    upd = (slice(plan.r0, plan.r1), slice(plan.c0, plan.c1))
    r = D.shape[3]
    num = den = 0.0
    for cid in range(D.shape[0]):
        w = plan.wg[cid][upd]
        tr = np.real(np.trace(D[cid][upd], axis1=-2, axis2=-1))
        num += np.sum(w * tr)
        den += np.sum(w)
    mean = num / (den * r)
    eye = np.eye(r)
    for cid in range(D.shape[0]):
        tr = np.real(np.trace(D[cid][upd], axis1=-2, axis2=-1))
        D[cid][upd] -= ((tr / r - mean)[..., None, None]) * eye


def step_numpy(plan: StepperPlan, H: np.ndarray, dt: float, hym_gate: float = np.inf,
               det_project: bool = False):
    geom = plan.geometry
    upd = (slice(plan.r0, plan.r1), slice(plan.c0, plan.c1))

    def exp_update(Harr, Darr, step_dt):
        out = Harr.copy()
        ok = True
        for cid in range(Harr.shape[0]):
            h = Harr[cid][upd]
            newh = h @ expm_selfadjoint(h, -step_dt * Darr[cid][upd])
            newh = hermitize(newh)
            out[cid][upd] = newh
            ev = np.linalg.eigvalsh(newh)
            if not (np.isfinite(newh).all() and ev.min() > 0):
                ok = False
        return out, ok

    def sync(arr):
        return _sync_fringe_numpy(plan, arr)

    D0 = _defect_numpy(plan, H)
    if det_project:
        _trace_project_numpy(plan, D0)
    hym0 = _energy_numpy(plan, D0)
    Hmid, ok = exp_update(H, D0, dt / 2.0)
    if not ok:
        return H, 0.0, hym0, False
    sync(Hmid)
    Dm = _defect_numpy(plan, Hmid)
    if det_project:
        _trace_project_numpy(plan, Dm)
    hym_mid = _energy_numpy(plan, Dm)
    if hym_mid > max(hym_gate, hym0) + 1e-9:
        return H, 0.0, hym0, False
    dM = -dt * hym_mid
    Hnew, ok = exp_update(H, Dm, dt)
    if not ok:
        return H, 0.0, hym0, False
    sync(Hnew)
    return Hnew, dM, hym0, True


def make_stepper(plan: StepperPlan):
    """Pick the compiled path for ranks 1-2, the numpy path otherwise."""
    if HAVE_NUMBA and plan.spec.rank <= 2:
        return step_numba
    return step_numpy
