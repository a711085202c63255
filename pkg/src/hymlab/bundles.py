"""Holomorphic bundle gluing data, metric fields, and pointwise matrix calculus.

A bundle over the torus is presented by a commuting pair of constant
automorphy factors ``(A1, Atau)``: sections satisfy ``phi(z+1) = A1 phi(z)``
and ``phi(z+tau) = Atau phi(z)``.  Over the sphere a bundle is a transition
matrix ``t(z)``, holomorphic and invertible on the overlap annulus, with
sections related by ``phi_0(z) = t(z) phi_1(1/z)``.  Metrics then obey

    torus:   H(z+1) = A1^{-dag} H(z) A1^{-1},   likewise for Atau,
    sphere:  H_1(z') = t(z)^dag H_0(z) t(z)   at  z' = 1/z.

Fields are stored on the padded chart grids of :mod:`hymlab.geometry`;
``sync_ghosts`` refreshes ghost cells from owned data using the gather
table of the geometry composed with the gluing transform of the field kind
(metric / endomorphism / (0,1)-form homomorphism).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field as dc_field
from itertools import combinations, combinations_with_replacement, permutations

import numpy as np

from .geometry import (PAD, SYNC_CROSS, SYNC_REFLECT, SYNC_TORUS,
                       BaseGeometry, GeometryError)

HERMIT_TOL = 1e-8
COMPAT_TOL = 1e-8
POSDEF_FLOOR = 1e-12


class BundleError(ValueError):
    """Invalid gluing data or metric-contract violation."""


@dataclass(frozen=True)
class BundleSpec:
    """Rank plus gluing data; the discrete presentation of the bundle."""

    rank: int
    base_kind: str                     # "torus" | "sphere"
    label: str = ""
    a1: np.ndarray | None = None       # torus automorphy factors
    atau: np.ndarray | None = None
    transition: object = None          # sphere: callable z -> (r, r) matrix
    descriptor: dict = dc_field(default_factory=dict)

    def transition_at(self, z: np.ndarray) -> np.ndarray:
        """Evaluate t(z) with shape z.shape + (rank, rank)."""
        t = self.transition(np.asarray(z))
        t = np.asarray(t, dtype=complex)
        if t.shape[-2:] != (self.rank, self.rank):
            raise BundleError(f"transition returned shape {t.shape}")
        return t


@dataclass
class MatrixField:
    """Per-chart padded arrays of r x r matrices tied to a spec and geometry."""

    geometry: BaseGeometry
    spec: BundleSpec
    data: list[np.ndarray]             # each (R, C, r, r) complex
    kind: str                          # "metric" | "endo" | "form"
    # for endo fields: whether H-self-adjointness is expected (validation only)
    selfadjoint_wrt: object = None

    @property
    def rank(self) -> int:
        return self.spec.rank

    def copy(self) -> "MatrixField":
        return MatrixField(self.geometry, self.spec, [d.copy() for d in self.data],
                           self.kind, self.selfadjoint_wrt)

    def owned(self, chart: int) -> np.ndarray:
        return self.data[chart][self.geometry.charts[chart].owned]


class MetricField(MatrixField):
    pass


class EndoField(MatrixField):
    pass


class FormField(MatrixField):
    pass


def _as_matrix(m, rank) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.shape != (rank, rank):
        raise BundleError(f"expected {rank}x{rank} matrix, got shape {m.shape}")
    return m


# ---------------------------------------------------------------------------
# catalog


def make_bundle(name: str, base_kind: str, **params) -> BundleSpec:
    """Build a catalog bundle.

    torus entries: ``trivial(rank)``, ``flat_line(alpha)``, ``atiyah(a)``;
    sphere entries: ``o(k)``, ``sum(k1, k2)``, ``euler_ambient()`` (the
    trivial rank-2 bundle the degree -1 line sits inside).
    Raw gluing data may be supplied via ``raw`` with ``a1``/``atau`` or
    ``transition``.
    """
    if name == "raw":
        return _raw_bundle(base_kind, **params)
    if base_kind == "torus":
        if name == "trivial":
            r = int(params.get("rank", 1))
            eye = np.eye(r, dtype=complex)
            return _torus_spec(eye, eye, r, f"torus trivial O^{r}",
                               {"name": "trivial", "rank": r})
        if name == "flat_line":
            alpha = float(params.get("alpha", 0.0))
            a = np.array([[np.exp(1j * alpha)]], dtype=complex)
            return _torus_spec(np.eye(1, dtype=complex), a, 1,
                               f"torus flat line alpha={alpha}",
                               {"name": "flat_line", "alpha": alpha})
        if name == "atiyah":
            a = complex(params.get("a", 1.0))
            a1 = np.eye(2, dtype=complex)
            atau = np.array([[1.0, a], [0.0, 1.0]], dtype=complex)
            return _torus_spec(a1, atau, 2, f"torus Atiyah a={a}",
                               {"name": "atiyah", "a": [a.real, a.imag]})
        raise BundleError(f"unknown torus bundle {name!r}; catalog: "
                          "trivial, flat_line, atiyah, raw")
    if base_kind == "sphere":
        if name == "o":
            k = int(params.get("k", 0))
            return _sphere_spec(lambda z, k=k: _line_transition(z, k), 1,
                                f"O({k})", {"name": "o", "k": k})
        if name == "sum":
            k1, k2 = int(params.get("k1", 1)), int(params.get("k2", -1))
            def trans(z, k1=k1, k2=k2):
                z = np.asarray(z, dtype=complex)
                out = np.zeros(z.shape + (2, 2), dtype=complex)
                out[..., 0, 0] = z**k1
                out[..., 1, 1] = z**k2
                return out
            return _sphere_spec(trans, 2, f"O({k1})+O({k2})",
                                {"name": "sum", "k1": k1, "k2": k2})
        if name == "euler_ambient":
            def trans(z):
                z = np.asarray(z, dtype=complex)
                out = np.zeros(z.shape + (2, 2), dtype=complex)
                out[..., 0, 0] = 1.0
                out[..., 1, 1] = 1.0
                return out
            return _sphere_spec(trans, 2, "O^2 (Euler ambient)",
                                {"name": "euler_ambient"})
        raise BundleError(f"unknown sphere bundle {name!r}; catalog: "
                          "o, sum, euler_ambient, raw")
    raise BundleError(f"unknown base kind {base_kind!r}")


def _line_transition(z, k):
    z = np.asarray(z, dtype=complex)
    return (z**k)[..., None, None]


def _raw_bundle(base_kind, **params) -> BundleSpec:
    if base_kind == "torus":
        a1 = np.asarray(params["a1"], dtype=complex)
        atau = np.asarray(params["atau"], dtype=complex)
        r = a1.shape[0]
        return _torus_spec(a1, atau, r, params.get("label", "raw torus"),
                           {"name": "raw"})
    trans = params["transition"]
    r = int(params["rank"])
    return _sphere_spec(trans, r, params.get("label", "raw sphere"), {"name": "raw"})


def _torus_spec(a1, atau, rank, label, descriptor) -> BundleSpec:
    a1 = _as_matrix(a1, rank)
    atau = _as_matrix(atau, rank)
    for name, m in (("A1", a1), ("Atau", atau)):
        if abs(np.linalg.det(m)) < 1e-14:
            raise BundleError(f"automorphy factor {name} is singular")
    comm = a1 @ atau - atau @ a1
    if np.abs(comm).max() > 1e-13 * max(1.0, np.abs(a1).max() * np.abs(atau).max()):
        raise BundleError("cocycle violated: automorphy factors do not commute")
    return BundleSpec(rank=rank, base_kind="torus", label=label,
                      a1=a1, atau=atau, descriptor=descriptor)


def _sphere_spec(transition, rank, label, descriptor) -> BundleSpec:
    spec = BundleSpec(rank=rank, base_kind="sphere", label=label,
                      transition=transition, descriptor=descriptor)
    # invertibility probe on the overlap annulus; the gluing transport
    # build re-checks at the actual exchange points of a geometry
    rr = np.linspace(1.0 / 1.5, 1.5, 41)
    th = np.linspace(0.0, 2 * np.pi, 64, endpoint=False)
    z = rr[:, None] * np.exp(1j * th)[None, :]
    t = spec.transition_at(z)
    dets = np.abs(np.linalg.det(t))
    if dets.min() < 1e-8:
        raise BundleError("transition matrix singular on the overlap annulus")
    return spec


# ---------------------------------------------------------------------------
# gluing transport and ghost refresh


def _transport_words(spec: BundleSpec, geom: BaseGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Per ghost entry, the section transport W and its inverse:
    value transported into the ghost cell is ``W phi(src)``."""
    t = geom.sync
    g = len(t.ghost_row)
    r = spec.rank
    W = np.empty((g, r, r), dtype=complex)
    Winv = np.empty_like(W)
    eye = np.eye(r, dtype=complex)
    if spec.base_kind == "torus":
        mats = {}
        a1, atau = spec.a1, spec.atau
        a1i, ataui = np.linalg.inv(a1), np.linalg.inv(atau)
        for m in (-1, 0, 1):
            for n in (-1, 0, 1):
                wm = np.linalg.matrix_power(a1 if m >= 0 else a1i, abs(m))
                wn = np.linalg.matrix_power(atau if n >= 0 else ataui, abs(n))
                mats[(m, n)] = wm @ wn
        for e in range(g):
            W[e] = mats[tuple(t.word[e])]
            Winv[e] = np.linalg.inv(W[e])
        return W, Winv
    # sphere: chart-0 ghosts pull from chart 1 with W = t(z_ghost in chart-0
    # coords) = t(1/src_point); chart-1 ghosts pull from chart 0 with
    # W = t(src_point)^{-1}
    refl = t.kind == SYNC_REFLECT
    cross = t.kind == SYNC_CROSS
    W[refl] = eye
    Winv[refl] = eye
    to0 = cross & (t.ghost_chart == 0)
    to1 = cross & (t.ghost_chart == 1)
    if to0.any():
        tm = spec.transition_at(1.0 / t.src_point[to0])
        _check_invertible(tm)
        W[to0] = tm
        Winv[to0] = np.linalg.inv(tm)
    if to1.any():
        tm = spec.transition_at(t.src_point[to1])
        _check_invertible(tm)
        W[to1] = np.linalg.inv(tm)
        Winv[to1] = tm
    return W, Winv


def _check_invertible(tm: np.ndarray) -> None:
    dets = np.abs(np.linalg.det(tm))
    if dets.min() < 1e-10:
        raise BundleError("transition matrix singular at an exchange point "
                          "of the overlap annulus")


def transport_matrices(spec: BundleSpec, geom: BaseGeometry):
    # cache on the spec object itself (holding the geometry reference), so
    # lifetimes are tied together and id() reuse cannot alias entries
    cache = spec.__dict__.get("_transport_cache")
    if cache is None:
        cache = []
        object.__setattr__(spec, "_transport_cache", cache)
    for g, mats in cache:
        if g is geom:
            return mats
    mats = _transport_words(spec, geom)
    cache.append((geom, mats))
    return mats


def sync_ghosts(fld: MatrixField, full: bool = False) -> MatrixField:
    """Refresh derived cells of the field from owned data (in place).

    By default only the fringe rows are refreshed (reflection rows and the
    outermost PAD rows) -- exactly the cells the flow slaves each step, so
    analytic values placed on the redundant interior annulus rows by the
    constructors are left alone.  ``full=True`` also rebuilds the annulus
    rows by interpolation, for fields only known on owned cells.

    Transform per kind: metric ``W^{-dag} V W^{-1}``, endomorphism
    ``W V W^{-1}``; Hom-valued (0,1) forms go through :func:`sync_form`.
    """
    if fld.kind == "form":
        raise BundleError("use sync_form for Hom-valued form fields")
    geom, spec = fld.geometry, fld.spec
    t = geom.sync
    mask = None if full else t.fringe
    W, Winv = transport_matrices(spec, geom)
    vals = _gather(fld.data, t, mask)
    if mask is not None:
        W, Winv = W[mask], Winv[mask]
    if fld.kind == "metric":
        out = np.einsum("gij,gjk,gkl->gil", Winv.conj().transpose(0, 2, 1), vals, Winv)
    else:
        out = np.einsum("gij,gjk,gkl->gil", W, vals, Winv)
    _scatter(fld.data, t, out, mask)
    return fld


def sync_form(fld: FormField, sub_spec: BundleSpec, quot_spec: BundleSpec,
              full: bool = False) -> FormField:
    """Refresh fringe cells of a (0,1)-form valued Hom(Q, S) field."""
    geom = fld.geometry
    t = geom.sync
    mask = None if full else t.fringe
    WS, _ = transport_matrices(sub_spec, geom)
    WQ, WQinv = transport_matrices(quot_spec, geom)
    vals = _gather(fld.data, t, mask)
    jac = t.jac_form
    if mask is not None:
        WS, WQinv, jac = WS[mask], WQinv[mask], jac[mask]
    out = np.einsum("g,gij,gjk,gkl->gil", jac, WS, vals, WQinv)
    _scatter(fld.data, t, out, mask)
    return fld


def _gather(data: list[np.ndarray], t, mask=None) -> np.ndarray:
    shape = data[0].shape[2:]
    if mask is None:
        mask = np.ones(len(t.ghost_row), dtype=bool)
    vals = np.zeros((int(mask.sum()),) + shape, dtype=complex)
    src_chart = t.src_chart[mask]
    src_rows = t.src_rows[mask]
    src_cols = t.src_cols[mask]
    src_w = t.src_w[mask]
    for cid in range(len(data)):
        sel = src_chart == cid
        if not sel.any():
            continue
        picked = data[cid][src_rows[sel], src_cols[sel]]   # (g, K, r, r)
        vals[sel] = np.einsum("gk,gk...->g...", src_w[sel], picked)
    return vals


def _scatter(data: list[np.ndarray], t, vals: np.ndarray, mask=None) -> None:
    if mask is None:
        mask = np.ones(len(t.ghost_row), dtype=bool)
    gch = t.ghost_chart[mask]
    grow = t.ghost_row[mask]
    gcol = t.ghost_col[mask]
    for cid in range(len(data)):
        sel = gch == cid
        if sel.any():
            data[cid][grow[sel], gcol[sel]] = vals[sel]


# ---------------------------------------------------------------------------
# small-matrix helpers (batched over grid cells)


def mat_h(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def hermitize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + mat_h(m))


def eig_pair(h0: np.ndarray, h1: np.ndarray):
    """Eigen-data of ``h = h0^{-1} h1`` for Hermitian positive h0, h1.

    Returns ``(lam, B)`` with real eigenvalues and columns of B forming an
    h0-orthonormal eigenbasis, so ``h = B diag(lam) B^{-1}`` and
    ``B^dag h0 B = I``.
    """
    L = np.linalg.cholesky(hermitize(h0))
    Li = np.linalg.inv(L)
    W = Li @ h1 @ mat_h(Li)
    lam, U = np.linalg.eigh(hermitize(W))
    B = mat_h(Li) @ U
    return lam, B


def fun_pair(h0: np.ndarray, h1: np.ndarray, fn) -> np.ndarray:
    """Apply a scalar function to ``h = h0^{-1} h1`` through its eigen-data."""
    lam, B = eig_pair(h0, h1)
    Binv = mat_h(B) @ h0
    return B @ (fn(lam)[..., :, None] * Binv)


def expm_selfadjoint(h0: np.ndarray, a: np.ndarray) -> np.ndarray:
    """exp of an h0-self-adjoint endomorphism a (h0 Hermitian positive)."""
    lam, B = eig_pair(h0, h0 @ a)   # h0^{-1} (h0 a) = a, and h0 a Hermitian
    Binv = mat_h(B) @ h0
    return B @ (np.exp(lam)[..., :, None] * Binv)


# ---------------------------------------------------------------------------
# metric construction


def make_metric(geom: BaseGeometry, spec: BundleSpec, recipe: str = "identity",
                *, phi=None, eta: EndoField | None = None, base: MetricField | None = None,
                seed: int | None = None, amplitude: float = 0.1,
                validate_result: bool = True) -> MetricField:
    """Build a compatible metric field by a named recipe.

    Recipes: ``identity``; ``fs`` (Fubini-Study powers for line/sum bundles
    on the sphere); ``atiyah-default`` (the deterministic quasi-periodic
    blend for the torus Atiyah bundle); ``conformal`` (``e^phi`` times
    ``base`` for a global scalar phi, callable or per-chart arrays);
    ``exp_perturb`` (``base . exp(eta)`` for a compatible self-adjoint
    bump-supported eta, either supplied or seeded).
    """
    r = spec.rank
    if recipe == "identity":
        data = [np.tile(np.eye(r, dtype=complex), c.shape + (1, 1)) for c in geom.charts]
        H = MetricField(geom, spec, data, "metric")
    elif recipe == "fs":
        H = _fs_metric(geom, spec)
    elif recipe == "atiyah-default":
        H = _atiyah_default(geom, spec)
    elif recipe == "conformal":
        if base is None or phi is None:
            raise BundleError("conformal recipe needs base= and phi=")
        phis = phi if isinstance(phi, list) else geom.sample(phi)
        data = [b * np.exp(p)[..., None, None] for b, p in zip(base.data, phis)]
        H = MetricField(geom, spec, data, "metric")
    elif recipe == "exp_perturb":
        if base is None:
            raise BundleError("exp_perturb recipe needs base=")
        if eta is None:
            if seed is None:
                raise BundleError("exp_perturb without an explicit eta needs a seed")
            eta = bump_endo(geom, spec, base, seed=seed, amplitude=amplitude)
        data = [b @ expm_selfadjoint(b, e) for b, e in zip(base.data, eta.data)]
        H = MetricField(geom, spec, data, "metric")
    else:
        raise BundleError(f"unknown metric recipe {recipe!r}")
    # recipes produce analytic values on every cell; the fringe rows are
    # then overwritten by the gluing transport, making them derived data
    # (idempotent re-sync) exactly as the flow treats them
    if recipe == "identity":
        _check_unitary_gluing(geom, spec, H)
    sync_ghosts(H)
    if validate_result:
        validate_metric(H)
    return H


def _check_unitary_gluing(geom: BaseGeometry, spec: BundleSpec, H: MetricField) -> None:
    """The identity metric is compatible only for unitary gluing data."""
    trial = H.copy()
    sync_ghosts(trial)
    resid = max(np.abs(a - b).max() for a, b in zip(H.data, trial.data))
    if resid > COMPAT_TOL:
        raise BundleError(
            f"identity metric incompatible with the gluing (residual {resid:.3e}); "
            "the automorphy/transition data is not unitary")


def _fs_metric(geom: BaseGeometry, spec: BundleSpec) -> MetricField:
    if geom.kind != "sphere":
        raise BundleError("fs recipe applies to sphere bundles")
    d = spec.descriptor
    if d.get("name") == "o":
        ks = [d["k"]]
    elif d.get("name") == "sum":
        ks = [d["k1"], d["k2"]]
    elif d.get("name") == "euler_ambient":
        ks = [0, 0]
    else:
        raise BundleError("fs recipe needs a line or sum bundle")
    data = []
    for c in geom.charts:
        w2 = np.abs(c.nodes) ** 2
        m = np.zeros(c.shape + (spec.rank, spec.rank), dtype=complex)
        for i, k in enumerate(ks):
            m[..., i, i] = (1.0 + w2) ** (-k)
        data.append(m)
    return MetricField(geom, spec, data, "metric")


def _atiyah_default(geom: BaseGeometry, spec: BundleSpec) -> MetricField:
    """H(x, y) = (I - y N)^dag (I - y N) for Atau = exp(N), N nilpotent.

    Exactly compatible for every y since (I - (y+1)N) = (I - yN) Atau^{-1},
    blending the identity at y = 0 into (Atau^dag Atau)^{-1} at y = 1.
    """
    if geom.kind != "torus" or spec.descriptor.get("name") != "atiyah":
        raise BundleError("atiyah-default recipe needs the torus Atiyah bundle")
    a = complex(*spec.descriptor["a"])
    tau = geom.params["tau"]
    data = []
    for c in geom.charts:
        y = np.imag(c.nodes) / tau.imag
        m = np.empty(c.shape + (2, 2), dtype=complex)
        m[..., 0, 0] = 1.0
        m[..., 0, 1] = -y * a
        m[..., 1, 0] = -y * np.conj(a)
        m[..., 1, 1] = 1.0 + (np.abs(a) * y) ** 2
        data.append(m)
    return MetricField(geom, spec, data, "metric")


def _bump(rho2: np.ndarray) -> np.ndarray:
    """Smooth bump of the squared relative radius, supported in rho2 < 1."""
    out = np.zeros_like(rho2)
    inside = rho2 < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - rho2[inside]))
    return out


def bump_endo(geom: BaseGeometry, spec: BundleSpec, H: MetricField,
              seed: int, amplitude: float = 0.1, chart: int = 0,
              off_diagonal: bool = False) -> EndoField:
    """Seeded H-self-adjoint endomorphism supported in a bump of one chart.

    The bump vanishes to all orders at its support boundary (torus: disk of
    radius 0.4 around the cell center; sphere: |z| < 0.9 of the given
    chart), so gluing compatibility is exact: every other chart sees zero
    away from the overlap, and the overlap values are transported
    analytically.  ``off_diagonal`` zeroes the diagonal of the coefficient
    matrices; against a diagonal base metric the perturbation is then
    trace free, so det H and the degree are untouched pointwise.
    """
    rng = np.random.default_rng(seed)
    r = spec.rank
    n_modes = 3
    coeffs = rng.standard_normal((n_modes, r, r)) + 1j * rng.standard_normal((n_modes, r, r))
    coeffs = 0.5 * (coeffs + np.conj(np.swapaxes(coeffs, -1, -2)))
    if off_diagonal:
        for m in range(n_modes):
            np.fill_diagonal(coeffs[m], 0.0)
    freqs = rng.integers(1, 3, size=(n_modes, 2))
    phases = rng.uniform(0, 2 * np.pi, size=n_modes)
    data = [np.zeros(c.shape + (r, r), dtype=complex) for c in geom.charts]
    c0 = geom.charts[chart]
    if geom.kind == "torus":
        tau = geom.params["tau"]
        x = np.real(c0.nodes) - tau.real * np.imag(c0.nodes) / tau.imag
        y = np.imag(c0.nodes) / tau.imag
        # wrap ghost coordinates so the bump is periodic-consistent
        x, y = np.mod(x, 1.0), np.mod(y, 1.0)
        rho2 = ((x - 0.5) ** 2 + (y - 0.5) ** 2) / 0.4**2
        u, v = x, y
    else:
        rho2 = np.abs(c0.nodes) ** 2 / 0.9**2
        u, v = np.real(c0.nodes), np.imag(c0.nodes)
    def eval_p(uu, vv, rr2):
        b = _bump(rr2)
        P = np.zeros(b.shape + (r, r), dtype=complex)
        for m in range(n_modes):
            mod = np.cos(2 * np.pi * (freqs[m, 0] * uu + freqs[m, 1] * vv) + phases[m])
            P += (b * mod)[..., None, None] * coeffs[m]
        return amplitude * P

    data[chart] = np.linalg.solve(H.data[chart], eval_p(u, v, rho2))
    if geom.kind == "sphere":
        # the support shows up on the partner chart's overlap annulus;
        # evaluate there analytically through the gluing transport
        # (P transforms like a metric: P_1(w) = t(z)^dag P_0(z) t(z))
        other = 1 - chart
        c1 = geom.charts[other]
        with np.errstate(divide="ignore", invalid="ignore"):
            z_src = np.where(np.abs(c1.nodes) > 1e-12, 1.0 / c1.nodes, np.inf)
        seen = np.isfinite(z_src) & (np.abs(z_src) < 0.9)
        if seen.any():
            rho2_o = np.where(seen, np.abs(z_src) ** 2 / 0.9**2, 1.0)
            u_o = np.where(seen, np.real(z_src), 0.0)
            v_o = np.where(seen, np.imag(z_src), 0.0)
            P_o = eval_p(u_o, v_o, rho2_o)
            tm = spec.transition_at(np.where(seen, z_src, 1.0))
            P_o = mat_h(tm) @ P_o @ tm
            P_o[~seen] = 0.0
            data[other] = np.linalg.solve(H.data[other], P_o)
    eta = EndoField(geom, spec, data, "endo", selfadjoint_wrt=H)
    return eta


# ---------------------------------------------------------------------------
# validation


def trig_endo(geom: BaseGeometry, spec: BundleSpec, H: MetricField,
              seed: int, amplitude: float = 0.1, n_modes: int = 3) -> EndoField:
    """Seeded H-self-adjoint endomorphism built from analytic global modes.

    Torus: doubly periodic trigonometric modes (requires unitary gluing so
    constant-coefficient modes are compatible).  Sphere: low-degree
    rational spherical modes, smooth across both charts.  Smoother than
    :func:`bump_endo`, which is preferred when support confinement matters
    more than derivative size.
    """
    rng = np.random.default_rng(seed)
    r = spec.rank
    coeffs = rng.standard_normal((n_modes, r, r)) + 1j * rng.standard_normal((n_modes, r, r))
    coeffs = 0.5 * (coeffs + np.conj(np.swapaxes(coeffs, -1, -2)))
    data = [np.zeros(c.shape + (r, r), dtype=complex) for c in geom.charts]
    if geom.kind == "torus":
        for m in (spec.a1, spec.atau):
            if np.abs(m @ mat_h(m) - np.eye(r)).max() > 1e-10:
                raise BundleError("trig_endo needs unitary torus gluing")
        tau = geom.params["tau"]
        freqs = rng.integers(-1, 2, size=(n_modes, 2))
        phases = rng.uniform(0, 2 * np.pi, size=n_modes)
        for cid, c in enumerate(geom.charts):
            x = np.real(c.nodes) - tau.real * np.imag(c.nodes) / tau.imag
            y = np.imag(c.nodes) / tau.imag
            P = np.zeros(c.shape + (r, r), dtype=complex)
            for m in range(n_modes):
                mod = np.cos(2 * np.pi * (freqs[m, 0] * x + freqs[m, 1] * y) + phases[m])
                P += mod[..., None, None] * coeffs[m]
            data[cid] = amplitude * np.linalg.solve(H.data[cid], P)
    else:
        # matrix-valued constant-coefficient modes are only compatible when
        # the transition is the identity; for lines a real global scalar
        # times the identity is always a legitimate self-adjoint endo
        if r > 1:
            probe = spec.transition_at(np.array([1.1 + 0.2j]))
            if np.abs(probe - np.eye(r)).max() > 1e-12:
                raise BundleError("sphere trig_endo needs an identity transition "
                                  "for rank >= 2 (use bump_endo or conformal)")
        weights = rng.standard_normal((n_modes, 4))
        for cid, c in enumerate(geom.charts):
            w = c.nodes
            rho = np.abs(w) ** 2
            if cid == 1:
                # the same global modes expressed in chart-1 coordinates
                modes = [np.real(w) / (1 + rho), -np.imag(w) / (1 + rho),
                         (rho - 1) / (1 + rho), np.real(w**2) / (1 + rho) ** 2]
            else:
                modes = [np.real(w) / (1 + rho), np.imag(w) / (1 + rho),
                         (1 - rho) / (1 + rho), np.real(w**2) / (1 + rho) ** 2]
            scal = np.zeros(c.shape)
            for m in range(n_modes):
                scal += sum(weights[m, i] * modes[i] for i in range(4))
            if r == 1:
                data[cid] = amplitude * scal[..., None, None] * np.ones((1, 1))
            else:
                P = np.zeros(c.shape + (r, r), dtype=complex)
                for m in range(n_modes):
                    mod = sum(weights[m, i] * modes[i] for i in range(4))
                    P += mod[..., None, None] * coeffs[m]
                data[cid] = amplitude * np.linalg.solve(H.data[cid], P)
    eta = EndoField(geom, spec, data, "endo", selfadjoint_wrt=H)
    return eta


def holo_offdiag_endo(geom: BaseGeometry, spec: BundleSpec, H: MetricField,
                      seed: int, amplitude: float = 0.2) -> EndoField:
    """Seeded H-self-adjoint perturbation along the holomorphic extension
    direction of a sphere sum bundle O(k1) + O(k2), k1 >= k2.

    eta = phi + H^{-1} phi^dag H with phi strictly upper triangular and
    phi_12 = q(z) a holomorphic polynomial of degree <= k1 - k2 (a global
    section of Hom(O(k2), O(k1))).  Smooth, exactly compatible, and trace
    free, so det H and the degree are preserved pointwise.
    """
    d = spec.descriptor
    if geom.kind != "sphere" or d.get("name") != "sum" or d["k1"] < d["k2"]:
        raise BundleError("holo_offdiag_endo needs a sphere sum bundle with k1 >= k2")
    deg = d["k1"] - d["k2"]
    rng = np.random.default_rng(seed)
    co = rng.standard_normal(deg + 1) + 1j * rng.standard_normal(deg + 1)
    co *= amplitude / np.abs(co).sum()
    data = []
    for c in geom.charts:
        w = c.nodes
        if c.chart_id == 0:
            q = np.polyval(co[::-1], w)               # sum co[j] z^j
        else:
            q = np.polyval(co, w)                     # sum co[j] w^{deg-j}
        phi = np.zeros(c.shape + (2, 2), dtype=complex)
        phi[..., 0, 1] = q
        data.append(phi)
    eta = EndoField(geom, spec, data, "endo", selfadjoint_wrt=H)
    for cid in range(geom.n_charts):
        phi = eta.data[cid]
        eta.data[cid] = phi + np.linalg.solve(H.data[cid], mat_h(phi) @ H.data[cid])
    return eta


def validate_metric(H: MetricField, hermit_tol: float = HERMIT_TOL,
                    compat_tol: float = COMPAT_TOL) -> dict:
    """Check Hermiticity, positivity, and gluing compatibility on the grid.

    Compatibility is the residual of re-applying the ghost transport: zero
    for constructor-produced metrics (ghosts are sync-defined), and an
    honest interpolation/transport mismatch for hand-assembled data.
    Returns the measured residuals; raises BundleError beyond tolerance.
    """
    geom = H.geometry
    herm = 0.0
    min_eig = np.inf
    for cid, c in enumerate(geom.charts):
        own = H.owned(cid)
        scale = np.abs(own).max() + 1e-300
        herm = max(herm, np.abs(own - mat_h(own)).max() / scale)
        ev = np.linalg.eigvalsh(hermitize(own))
        min_eig = min(min_eig, float(ev.min()))
    trial = H.copy()
    sync_ghosts(trial)
    compat = max(np.abs(a - b).max() / (np.abs(a).max() + 1e-300)
                 for a, b in zip(H.data, trial.data))
    report = {"hermiticity": float(herm), "min_eigenvalue": float(min_eig),
              "compatibility": float(compat)}
    if herm > hermit_tol:
        raise BundleError(f"metric not Hermitian: residual {herm:.3e}")
    if min_eig <= POSDEF_FLOOR:
        raise BundleError(f"metric not positive definite: min eigenvalue {min_eig:.3e}")
    if compat > compat_tol:
        raise BundleError(f"metric violates gluing compatibility: residual {compat:.3e}")
    return report


# ---------------------------------------------------------------------------
# log / exp between metrics


def endo_log(H0: MetricField, H: MetricField) -> EndoField:
    """s = log(H0^{-1} H), self-adjoint in the H0 inner product."""
    if H0.spec is not H.spec and H0.spec.rank != H.spec.rank:
        raise BundleError("endo_log needs metrics on the same bundle")
    data = []
    for cid in range(H0.geometry.n_charts):
        lam, B = eig_pair(H0.data[cid], H.data[cid])
        if lam.min() <= 0:
            loc = np.argwhere(lam.min(axis=-1) <= 0)[0]
            raise BundleError(
                f"endo_log: non-positive eigenvalue at chart {cid} cell "
                f"{tuple(int(v) for v in loc)}")
        Binv = mat_h(B) @ H0.data[cid]
        data.append(B @ (np.log(lam)[..., :, None] * Binv))
    return EndoField(H0.geometry, H0.spec, data, "endo", selfadjoint_wrt=H0)


def endo_exp(H0: MetricField, s: EndoField) -> MetricField:
    """Metric H0 . exp(s) for an H0-self-adjoint s."""
    data = [h0 @ expm_selfadjoint(h0, sd) for h0, sd in zip(H0.data, s.data)]
    return MetricField(H0.geometry, H0.spec, data, "metric")


# ---------------------------------------------------------------------------
# induced product metrics


def _kron_field(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ra, rb = a.shape[-1], b.shape[-1]
    out = np.einsum("...ij,...kl->...ikjl", a, b)
    return out.reshape(a.shape[:-2] + (ra * rb, ra * rb))


def tensor_bundle(s1: BundleSpec, s2: BundleSpec) -> BundleSpec:
    if s1.base_kind != s2.base_kind:
        raise BundleError("tensor product needs bundles over the same base")
    r = s1.rank * s2.rank
    if s1.base_kind == "torus":
        return _torus_spec(np.kron(s1.a1, s2.a1), np.kron(s1.atau, s2.atau), r,
                           f"({s1.label})x({s2.label})", {"name": "tensor"})
    def trans(z, s1=s1, s2=s2):
        return _kron_field(s1.transition_at(z), s2.transition_at(z))
    return _sphere_spec(trans, r, f"({s1.label})x({s2.label})", {"name": "tensor"})


def tensor_metric(H1: MetricField, H2: MetricField) -> MetricField:
    """Pointwise Kronecker metric on E1 (x) E2."""
    if H1.geometry is not H2.geometry:
        raise BundleError("tensor_metric needs metrics over one geometry")
    spec = tensor_bundle(H1.spec, H2.spec)
    data = [_kron_field(a, b) for a, b in zip(H1.data, H2.data)]
    return MetricField(H1.geometry, spec, data, "metric")


def _sym_basis(r: int, p: int) -> np.ndarray:
    """Isometric embedding of S^p C^r into (C^r)^{(x) p}, columns orthonormal."""
    dim = r**p
    cols = []
    for combo in combinations_with_replacement(range(r), p):
        v = np.zeros(dim)
        seen = set()
        for perm in permutations(combo):
            if perm in seen:
                continue
            seen.add(perm)
            idx = 0
            for q in perm:
                idx = idx * r + q
            v[idx] += 1.0
        cols.append(v / np.linalg.norm(v))
    return np.array(cols).T


def _ext_basis(r: int, p: int) -> np.ndarray:
    dim = r**p
    cols = []
    for combo in combinations(range(r), p):
        v = np.zeros(dim)
        for perm in permutations(combo):
            sign = _perm_sign(combo, perm)
            idx = 0
            for q in perm:
                idx = idx * r + q
            v[idx] += sign
        cols.append(v / np.linalg.norm(v))
    return np.array(cols).T


def _perm_sign(base, perm) -> float:
    perm = list(perm)
    sign = 1.0
    order = [perm.index(b) for b in base]
    seen = [False] * len(order)
    for i in range(len(order)):
        if seen[i]:
            continue
        j, clen = i, 0
        while not seen[j]:
            seen[j] = True
            j = order[j]
            clen += 1
        if clen % 2 == 0:
            sign = -sign
    return sign


def _power_bundle(spec: BundleSpec, p: int, basis: np.ndarray, tag: str) -> BundleSpec:
    rp = basis.shape[1]
    def big(m):
        out = m
        for _ in range(p - 1):
            out = _kron_field(out, m)
        return out
    if spec.base_kind == "torus":
        a1 = basis.T @ big(spec.a1) @ basis
        atau = basis.T @ big(spec.atau) @ basis
        return _torus_spec(a1, atau, rp, f"{tag}^{p}({spec.label})", {"name": tag})
    def trans(z, spec=spec, basis=basis, big=big):
        return np.einsum("ia,...ij,jb->...ab", basis, big(spec.transition_at(z)), basis)
    return _sphere_spec(trans, rp, f"{tag}^{p}({spec.label})", {"name": tag})


def _power_metric(H: MetricField, p: int, basis: np.ndarray, tag: str) -> MetricField:
    spec = _power_bundle(H.spec, p, basis, tag)
    data = []
    for d in H.data:
        big = d
        for _ in range(p - 1):
            big = _kron_field(big, d)
        data.append(np.einsum("ia,...ij,jb->...ab", basis.conj(), big, basis))
    return MetricField(H.geometry, spec, data, "metric")


def sym_power_metric(H: MetricField, p: int) -> MetricField:
    """Induced metric on the p-th symmetric power."""
    if p < 1:
        raise BundleError("power must be >= 1")
    return _power_metric(H, p, _sym_basis(H.rank, p), "sym")


def ext_power_metric(H: MetricField, p: int) -> MetricField:
    """Induced metric on the p-th exterior power."""
    if not (1 <= p <= H.rank):
        raise BundleError("exterior power needs 1 <= p <= rank")
    return _power_metric(H, p, _ext_basis(H.rank, p), "ext")


def derivation_power(op: np.ndarray, p: int, basis: np.ndarray) -> np.ndarray:
    """sum over tensor slots of op, compressed to the power subspace."""
    r = op.shape[-1]
    eye = np.eye(r, dtype=complex)
    total = None
    for slot in range(p):
        factors = [op if i == slot else np.broadcast_to(eye, op.shape) for i in range(p)]
        big = factors[0]
        for f in factors[1:]:
            big = _kron_field(big, f)
        total = big if total is None else total + big
    return np.einsum("ia,...ij,jb->...ab", basis.conj(), total, basis)


def derivation_tensor(op1: np.ndarray, op2: np.ndarray) -> np.ndarray:
    """op1 (x) I + I (x) op2 pointwise."""
    e1 = np.broadcast_to(np.eye(op1.shape[-1], dtype=complex), op1.shape)
    e2 = np.broadcast_to(np.eye(op2.shape[-1], dtype=complex), op2.shape)
    return _kron_field(op1, e2) + _kron_field(e1, op2)


# ---------------------------------------------------------------------------
# gauge transforms and oracles


def gauge_transform(spec: BundleSpec, H: MetricField, U: np.ndarray):
    """Conjugate gluing data and metric by a constant unitary U.

    Sections map as phi -> U phi, so every scalar diagnostic downstream is
    unchanged.
    """
    U = _as_matrix(U, spec.rank)
    if np.abs(U @ mat_h(U) - np.eye(spec.rank)).max() > 1e-12:
        raise BundleError("gauge matrix is not unitary")
    if spec.base_kind == "torus":
        new_spec = _torus_spec(U @ spec.a1 @ mat_h(U), U @ spec.atau @ mat_h(U),
                               spec.rank, spec.label + " (gauged)", spec.descriptor)
    else:
        def trans(z, spec=spec, U=U):
            return np.einsum("ij,...jk,kl->...il", U, spec.transition_at(z), mat_h(U))
        new_spec = _sphere_spec(trans, spec.rank, spec.label + " (gauged)",
                                spec.descriptor)
    data = [np.einsum("ij,...jk,kl->...il", U, d, mat_h(U)) for d in H.data]
    newH = MetricField(H.geometry, new_spec, data, "metric")
    return new_spec, newH


def extension_class_oracle(spec: BundleSpec, tol: float = 1e-12) -> str:
    """Split / nonsplit certificate for unipotent rank-2 torus extensions.

    A holomorphic splitting would need a doubly periodic entire function u
    with u(z + tau) - u(z) = a; averaging over the torus kills the left
    side, leaving the constant obstruction a in H^1(O).  Nonsplit iff the
    obstruction survives.
    """
    if spec.base_kind != "torus" or spec.rank != 2:
        raise BundleError("extension oracle expects a rank-2 torus bundle")
    if np.abs(spec.a1 - np.eye(2)).max() > tol:
        raise BundleError("extension oracle expects A1 = I")
    at = spec.atau
    if abs(at[0, 0] - 1) > tol or abs(at[1, 1] - 1) > tol or abs(at[1, 0]) > tol:
        raise BundleError("extension oracle expects unipotent Atau = [[1,a],[0,1]]")
    a = at[0, 1]
    return "nonsplit" if abs(a) > tol else "split"


# ---------------------------------------------------------------------------
# checkpoint format: JSON header line + raw little-endian doubles


def save_checkpoint(path, H: MetricField, extra: dict | None = None) -> None:
    """Write the metric field with a JSON header and raw IEEE-754 payload.

    Payload is row-major over (chart, node_row, node_col, matrix_row,
    matrix_col, re/im), all charts concatenated.
    """
    geom = H.geometry
    header = {
        "format": "hymlab-checkpoint-1",
        "base": _base_descriptor(geom),
        "grid_shapes": [list(c.shape) for c in geom.charts],
        "rank": H.spec.rank,
        "gluing": H.spec.descriptor,
    }
    if extra:
        header.update(extra)
    blob = io.BytesIO()
    blob.write(json.dumps(header, sort_keys=True).encode())
    blob.write(b"\n")
    for d in H.data:
        arr = np.stack([d.real, d.imag], axis=-1).astype("<f8")
        blob.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(blob.getvalue())


def load_checkpoint(path, geom: BaseGeometry, spec: BundleSpec):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns (MetricField, header).  Grid shapes and rank must match the
    supplied geometry and spec.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode())
    if header.get("format") != "hymlab-checkpoint-1":
        raise BundleError(f"not a checkpoint file: {path}")
    if header["rank"] != spec.rank:
        raise BundleError("checkpoint rank does not match the bundle spec")
    shapes = [tuple(s) for s in header["grid_shapes"]]
    if shapes != [c.shape for c in geom.charts]:
        raise BundleError("checkpoint grid shapes do not match the geometry")
    off = nl + 1
    data = []
    r = spec.rank
    for shape in shapes:
        count = shape[0] * shape[1] * r * r * 2
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += count * 8
        arr = arr.reshape(shape + (r, r, 2))
        data.append((arr[..., 0] + 1j * arr[..., 1]).astype(complex))
    return MetricField(geom, spec, data, "metric"), header


def _base_descriptor(geom: BaseGeometry) -> dict:
    if geom.kind == "torus":
        tau = geom.params["tau"]
        return {"kind": "torus", "tau": [tau.real, tau.imag], "n": geom.params["n"]}
    return {"kind": "sphere", "n_r": geom.params["n_r"],
            "n_theta": geom.params["n_theta"],
            "r_overlap": geom.params["r_overlap"],
            "equator_split": geom.params["equator_split"]}
