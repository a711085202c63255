"""Discretized base Riemann surfaces: flat tori and the round sphere.

Every field in this package lives on padded per-chart grids.  A chart array
has shape ``(R, C, ...)`` where the owned block is ``[PAD : PAD + n_own, :]``
(sphere) or ``[PAD : PAD + N, PAD : PAD + N]`` (torus) and the remaining
cells are ghost cells refreshed from the owned data of the same or the
partner chart.  The pad width is 6 so that two nested 7-point first
derivatives (connection, then curvature) can be evaluated on the owned
block without transformation rules for non-tensorial intermediates.

Conventions fixed here and used everywhere downstream:

* ``omega = (i/2) g dz ^ dzbar``, i.e. the volume element is ``g dx dy``,
  and both model surfaces are normalized to total volume 1.
* torus: fundamental domain ``{x + tau y : x, y in [0,1)}``, ``g = 1/Im(tau)``.
* sphere: two stereographic charts related by ``z' = 1/z``, each chart a
  polar grid with Gauss-Legendre radial nodes in ``rho = r^2``;
  ``g(z) = 1/(pi (1+|z|^2)^2)``.
* derivatives are 6th-order centered finite differences (7-point
  stencils); on the sphere the radial stencils use Fornberg weights on the
  non-uniform (signed-radius) node set, and rows below the origin are
  obtained by reflecting through it (``f(-r, theta) = f(r, theta + pi)``).
* the second-order operator ``d_z d_zbar`` is discretized directly: in
  polar form ``(d_ss + d_s/s + d_thth/s^2)/4`` with real stencil weights,
  and on the torus ``|c1|^2 d_xx + |c2|^2 d_yy + 2 Re(c1 cbar2) d_xy``.
  Composing two centered first-derivative operators instead is unstable
  on the polar charts (near-Nyquist twisted modes acquire positive real
  eigenvalues), while the direct form is negative semidefinite on every
  grid tested.
* ``laplacian`` is ``g^{-1} d_z d_zbar`` (negative spectrum, e.g.
  ``lap(e^{2 pi i x}) = -pi^2 e^{2 pi i x}`` on the square torus).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD = 6
HALF = 3   # stencil half-width
# 6th-order centered first/second derivatives on a uniform grid.
_UNIFORM_D1 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0
_UNIFORM_D2 = np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0

SYNC_TORUS = 0        # same chart, automorphy word (m, n)
SYNC_CROSS = 1        # partner chart through z -> 1/z
SYNC_REFLECT = 2      # same chart through the origin, identity transform


class GeometryError(ValueError):
    """Invalid construction parameters or contract violation on a field."""


@dataclass(frozen=True)
class SyncTable:
    """Gather/transform recipe refreshing every ghost cell from owned data.

    Entry ``e`` fills ghost cell ``(ghost_chart[e], ghost_row[e],
    ghost_col[e])`` from ``sum_k src_w[e,k] * F[src_chart[e], src_rows[e,k],
    src_cols[e,k]]`` followed by the bundle transform determined by
    ``kind[e]`` (see module constants), the torus word ``word[e]`` or the
    source point ``src_point[e]``, and for (0,1)-form components the scalar
    ``jac_form[e] = conj(d z_src / d z_ghost)``.

    ``fringe`` marks the entries that time-stepping must refresh every
    step: reflection rows and the outermost PAD rows.  On the sphere the
    remaining annulus rows are redundant dynamic cells evolved by the flow
    itself (deep-overlap composite-grid coupling); static constructions
    refresh them too, via the full table.
    """

    ghost_chart: np.ndarray
    ghost_row: np.ndarray
    ghost_col: np.ndarray
    src_chart: np.ndarray
    src_rows: np.ndarray   # (G, K)
    src_cols: np.ndarray   # (G, K)
    src_w: np.ndarray      # (G, K) real
    kind: np.ndarray       # (G,) in {SYNC_TORUS, SYNC_CROSS, SYNC_REFLECT}
    word: np.ndarray       # (G, 2) ints, torus entries only
    src_point: np.ndarray  # (G,) complex, source point in source-chart coords
    jac_form: np.ndarray   # (G,) complex
    fringe: np.ndarray     # (G,) bool


@dataclass(frozen=True)
class ChartGrid:
    """One padded coordinate chart with quadrature and Kahler data."""

    chart_id: int
    nodes: np.ndarray          # (R, C) complex, physical z of every cell
    quad_weights: np.ndarray   # (R, C) real, nonzero only on owned cells
    metric_g: np.ndarray       # (R, C) real positive
    owned: tuple[slice, slice]
    # row-direction first-derivative weights, (R, 7); rows where the stencil
    # does not fit carry zeros
    drow_w: np.ndarray
    # column-direction first-derivative weights (uniform), (7,)
    dcol_w: np.ndarray
    col_periodic: bool
    # pointwise combination d_z = alpha_z * D_row + beta_z * D_col
    alpha_z: np.ndarray
    beta_z: np.ndarray
    alpha_zb: np.ndarray
    beta_zb: np.ndarray
    # direct d_z d_zbar tables: second-derivative stencils and real
    # coefficient fields (crr d_rr + cr d_r + ccc d_cc + crc d_r d_c)
    drow2_w: np.ndarray = None
    dcol2_w: np.ndarray = None
    crr: np.ndarray = None
    cr: np.ndarray = None
    ccc: np.ndarray = None
    crc: float = 0.0
    # signed radii per row (sphere) or None (torus)
    radii: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.nodes.shape

    def owned_view(self, arr: np.ndarray) -> np.ndarray:
        return arr[self.owned]


@dataclass(frozen=True)
class BaseGeometry:
    """A discretized base surface: charts plus the ghost-exchange table."""

    kind: str                  # "torus" | "sphere"
    charts: tuple[ChartGrid, ...]
    sync: SyncTable
    params: dict = field(default_factory=dict)

    @property
    def n_charts(self) -> int:
        return len(self.charts)

    def zeros(self, extra_shape: tuple[int, ...] = (), dtype=np.complex128) -> list[np.ndarray]:
        return [np.zeros(c.shape + extra_shape, dtype=dtype) for c in self.charts]

    def sample(self, fn) -> list[np.ndarray]:
        """Evaluate a global scalar ``fn(z)`` on every padded cell of every chart.

        On the sphere ``fn`` receives chart-0 coordinates; chart 1 samples
        ``fn(1/z')`` so that the two charts see the same global function.
        """
        out = []
        for c in self.charts:
            z = c.nodes
            if self.kind == "sphere" and c.chart_id == 1:
                out.append(np.asarray(fn(1.0 / z)))
            else:
                out.append(np.asarray(fn(z)))
        return out


def fd_weights(x0: float, x: np.ndarray, m: int = 1) -> np.ndarray:
    """Fornberg weights for derivatives 0..m at x0 from arbitrary nodes x."""
    n = len(x)
    c = np.zeros((n, m + 1))
    c1 = 1.0
    c4 = x[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


def _barycentric_row(x: np.ndarray, x0: float) -> np.ndarray:
    """Weights of global polynomial interpolation through nodes x at x0."""
    n = len(x)
    bw = np.ones(n)
    for j in range(n):
        bw[j] = 1.0 / np.prod(x[j] - np.delete(x, j))
    d = x0 - x
    hit = np.isclose(d, 0.0, atol=1e-15)
    if hit.any():
        w = np.zeros(n)
        w[np.argmax(hit)] = 1.0
        return w
    w = bw / d
    return w / w.sum()


def build_torus(tau: complex, n: int) -> BaseGeometry:
    """Uniform n x n periodic grid over the fundamental parallelogram.

    Volume is exactly 1: cell area Im(tau)/n^2 against g = 1/Im(tau).
    """
    tau = complex(tau)
    if tau.imag <= 0:
        raise GeometryError(f"torus modulus needs Im(tau) > 0, got {tau}")
    if n < 8:
        raise GeometryError(f"torus resolution too small: n = {n} < 8")

    size = n + 2 * PAD
    idx = (np.arange(size) - PAD) / n
    x, y = np.meshgrid(idx, idx, indexing="ij")
    nodes = x + tau * y

    g = np.full((size, size), 1.0 / tau.imag)
    w = np.zeros((size, size))
    own = (slice(PAD, PAD + n), slice(PAD, PAD + n))
    w[own] = tau.imag / n**2

    h = 1.0 / n
    drow = np.zeros((size, 7))
    drow[HALF:size - HALF] = _UNIFORM_D1 / h
    dcol = _UNIFORM_D1 / h
    drow2 = np.zeros((size, 7))
    drow2[HALF:size - HALF] = _UNIFORM_D2 / h**2
    dcol2 = _UNIFORM_D2 / h**2

    # z = x + tau*y  =>  d_z = (conj(tau) d_x - d_y) / (conj(tau) - tau)
    den = np.conj(tau) - tau
    c1, c2 = np.conj(tau) / den, -1.0 / den
    alpha_z = np.full((size, size), c1, dtype=complex)
    beta_z = np.full((size, size), c2, dtype=complex)
    alpha_zb = np.conj(alpha_z)
    beta_zb = np.conj(beta_z)

    chart = ChartGrid(
        chart_id=0, nodes=nodes, quad_weights=w, metric_g=g, owned=own,
        drow_w=drow, dcol_w=dcol, col_periodic=False,
        alpha_z=alpha_z, beta_z=beta_z, alpha_zb=alpha_zb, beta_zb=beta_zb,
        drow2_w=drow2, dcol2_w=dcol2,
        crr=np.full((size, size), abs(c1) ** 2),
        cr=np.zeros((size, size)),
        ccc=np.full((size, size), abs(c2) ** 2),
        crc=float(2.0 * np.real(c1 * np.conj(c2))),
    )
    sync = _torus_sync_table(n, size)
    geom = BaseGeometry(kind="torus", charts=(chart,),
                        sync=sync, params={"tau": tau, "n": n})
    _check_volume(geom)
    return geom


def _torus_sync_table(n: int, size: int) -> SyncTable:
    gr, gc, sr, sc, words = [], [], [], [], []
    for i in range(size):
        for j in range(size):
            in_i = PAD <= i < PAD + n
            in_j = PAD <= j < PAD + n
            if in_i and in_j:
                continue
            # m, n_w: ghost z = src z + m + n_w*tau with src owned
            m = -1 if i < PAD else (1 if i >= PAD + n else 0)
            nw = -1 if j < PAD else (1 if j >= PAD + n else 0)
            gr.append(i)
            gc.append(j)
            sr.append(i - m * n)
            sc.append(j - nw * n)
            words.append((m, nw))
    g_count = len(gr)
    return SyncTable(
        ghost_chart=np.zeros(g_count, dtype=np.int64),
        ghost_row=np.array(gr, dtype=np.int64),
        ghost_col=np.array(gc, dtype=np.int64),
        src_chart=np.zeros(g_count, dtype=np.int64),
        src_rows=np.array(sr, dtype=np.int64)[:, None],
        src_cols=np.array(sc, dtype=np.int64)[:, None],
        src_w=np.ones((g_count, 1)),
        kind=np.full(g_count, SYNC_TORUS, dtype=np.int64),
        word=np.array(words, dtype=np.int64),
        src_point=np.zeros(g_count, dtype=complex),
        jac_form=np.ones(g_count, dtype=complex),
        fringe=np.ones(g_count, dtype=bool),
    )


N_ANNULUS = 10     # overlap-annulus rows per chart: (N_ANNULUS - PAD) evolved + PAD fringe


def build_sphere(n_r: int, n_theta: int, r_overlap: float = 1.2,
                 equator_split: float = 1.0) -> BaseGeometry:
    """Two polar-grid stereographic charts covering the round sphere.

    Chart 0 owns ``|z| <= equator_split`` and chart 1 owns the complement;
    the default split at ``|z| = 1`` halves the area.  Each chart carries
    an overlap annulus of ``N_ANNULUS`` extra radial rows out to at most
    ``r_overlap``: redundant interior rows plus an outermost fringe of PAD
    rows whose values are interpolated from deep inside the partner chart
    (a composite-grid coupling; a shallow fringe taking its data from the
    donor's own boundary region makes the coupled operator unstable).
    """
    if n_r < 8:
        raise GeometryError(f"radial resolution too small: n_r = {n_r} < 8")
    if n_theta < 16:
        raise GeometryError(f"angular resolution too small: n_theta = {n_theta} < 16")
    if n_theta % 2 != 0:
        raise GeometryError("n_theta must be even (origin reflection pairs antipodal columns)")
    if not (1.0 < r_overlap <= 1.5):
        raise GeometryError(f"overlap radius must satisfy 1 < R_ov <= 1.5, got {r_overlap}")
    if not (0.8 <= equator_split <= 1.25):
        raise GeometryError(f"equator_split out of range: {equator_split}")

    xi, glw = np.polynomial.legendre.leggauss(n_r)
    charts = []
    for cid, r_own in enumerate((equator_split, 1.0 / equator_split)):
        rho = (xi + 1.0) / 2.0 * r_own**2          # GL nodes in rho = r^2
        r = np.sqrt(rho)
        # annulus spacing: continue the last gap, compressed if the overlap
        # window is too narrow for N_ANNULUS rows
        delta = min(r[-1] - r[-2], (r_overlap * r_own - r[-1]) / (N_ANNULUS + 0.5))
        if delta <= 0:
            raise GeometryError("overlap annulus too narrow for the fringe rows")
        annulus = r[-1] + delta * np.arange(1, N_ANNULUS + 1)
        # signed radius axis: reflection rows, owned rows, annulus rows
        s = np.concatenate([-r[PAD - 1::-1], r, annulus])
        size_r = len(s)

        theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
        nodes = s[:, None] * np.exp(1j * theta)[None, :]

        g = 1.0 / (np.pi * (1.0 + np.abs(nodes) ** 2) ** 2)
        w = np.zeros((size_r, n_theta))
        own = (slice(PAD, PAD + n_r), slice(0, n_theta))
        w[own] = (np.pi * r_own**2 * glw / (2.0 * n_theta))[:, None]

        drow = np.zeros((size_r, 7))
        drow2 = np.zeros((size_r, 7))
        for i in range(HALF, size_r - HALF):
            w12 = fd_weights(s[i], s[i - HALF:i + HALF + 1], 2)
            drow[i] = w12[:, 1]
            drow2[i] = w12[:, 2]
        dtheta = 2.0 * np.pi / n_theta
        dcol = _UNIFORM_D1 / dtheta
        dcol2 = _UNIFORM_D2 / dtheta**2

        # d_z = e^{-i theta}/2 (d_r - (i/r) d_theta), valid with signed radius
        eith = np.exp(1j * theta)[None, :]
        s_col = s[:, None]
        alpha_z = np.conj(eith) / 2.0 * np.ones((size_r, 1))
        beta_z = np.conj(eith) * (-1j) / (2.0 * s_col)
        alpha_zb = eith / 2.0 * np.ones((size_r, 1))
        beta_zb = eith * 1j / (2.0 * s_col)

        s_col = s[:, None] * np.ones((1, n_theta))
        charts.append(ChartGrid(
            chart_id=cid, nodes=nodes, quad_weights=w, metric_g=g, owned=own,
            drow_w=drow, dcol_w=dcol, col_periodic=True,
            alpha_z=alpha_z, beta_z=beta_z, alpha_zb=alpha_zb, beta_zb=beta_zb,
            drow2_w=drow2, dcol2_w=dcol2,
            crr=np.full((size_r, n_theta), 0.25),
            cr=0.25 / s_col,
            ccc=0.25 / s_col**2,
            crc=0.0,
            radii=s,
        ))

    sync = _sphere_sync_table(charts, n_r, n_theta)
    geom = BaseGeometry(
        kind="sphere", charts=tuple(charts), sync=sync,
        params={"n_r": n_r, "n_theta": n_theta, "r_overlap": r_overlap,
                "equator_split": equator_split})
    _check_volume(geom)
    return geom


def _sphere_sync_table(charts, n_r, n_theta) -> SyncTable:
    gch, gr, gc, sch, srows, scols, sw = [], [], [], [], [], [], []
    kinds, words, pts, jacs, fringes = [], [], [], [], []
    half = n_theta // 2
    width = 2 * n_r
    for cid, chart in enumerate(charts):
        s = chart.radii
        size_r = len(s)
        # reflection rows: value at (-r, theta) = value at (r, theta + pi)
        for i in range(PAD):
            src_row = PAD + (PAD - 1 - i)
            for j in range(n_theta):
                gch.append(cid); gr.append(i); gc.append(j)
                sch.append(cid)
                srows.append([src_row] + [0] * (width - 1))
                scols.append([(j + half) % n_theta] + [0] * (width - 1))
                sw.append([1.0] + [0.0] * (width - 1))
                kinds.append(SYNC_REFLECT); words.append((0, 0))
                fringes.append(True)
                pts.append(0j); jacs.append(1.0 + 0j)
        # Annulus rows: interpolate the partner chart along the radial ray
        # through 1/r.  A smooth field restricted to the double ray
        # (theta_src, theta_src + pi) splits into even/odd parts in r; each
        # reduces to an analytic function of rho = r^2, interpolated
        # spectrally on the Gauss-Legendre rho nodes.  Only the outermost
        # PAD rows are fringe (refreshed every flow step).
        partner = 1 - cid
        rp = charts[partner].radii[PAD:PAD + n_r]
        rho_p = rp**2
        own_rows = list(range(PAD, PAD + n_r))
        for i in range(PAD + n_r, size_r):
            r_t = 1.0 / s[i]
            w_rho = _barycentric_row(rho_p, r_t**2)
            w_plus = list(w_rho * (1.0 + r_t / rp) / 2.0)
            w_minus = list(w_rho * (1.0 - r_t / rp) / 2.0)
            is_fringe = i >= size_r - PAD
            for j in range(n_theta):
                j_src = (-j) % n_theta
                gch.append(cid); gr.append(i); gc.append(j)
                sch.append(partner)
                srows.append(own_rows + own_rows)
                scols.append([j_src] * n_r + [(j_src + half) % n_theta] * n_r)
                sw.append(w_plus + w_minus)
                kinds.append(SYNC_CROSS); words.append((0, 0))
                fringes.append(is_fringe)
                z_g = s[i] * np.exp(2j * np.pi * j / n_theta)
                pts.append(1.0 / z_g)
                jacs.append(np.conj(-1.0 / z_g**2))
    return SyncTable(
        ghost_chart=np.array(gch, dtype=np.int64),
        ghost_row=np.array(gr, dtype=np.int64),
        ghost_col=np.array(gc, dtype=np.int64),
        src_chart=np.array(sch, dtype=np.int64),
        src_rows=np.array(srows, dtype=np.int64),
        src_cols=np.array(scols, dtype=np.int64),
        src_w=np.array(sw),
        kind=np.array(kinds, dtype=np.int64),
        word=np.array(words, dtype=np.int64),
        src_point=np.array(pts, dtype=complex),
        jac_form=np.array(jacs, dtype=complex),
        fringe=np.array(fringes, dtype=bool),
    )


def _check_volume(geom: BaseGeometry, tol: float = 1e-10) -> None:
    vol = integrate(geom, [np.ones(c.shape) for c in geom.charts])
    if abs(vol - 1.0) > tol:
        raise GeometryError(f"volume normalization failed: Vol = {vol!r}")


# ---------------------------------------------------------------------------
# scalar ghost refresh and differentiation


def sync_scalar(geom: BaseGeometry, fields: list[np.ndarray]) -> list[np.ndarray]:
    """Refresh ghost cells of a global scalar by plain coordinate pullback."""
    t = geom.sync
    extra = fields[0].shape[2:]
    vals = np.zeros((len(t.ghost_row),) + extra, dtype=fields[0].dtype)
    for cid in range(geom.n_charts):
        sel = t.src_chart == cid
        if not sel.any():
            continue
        vals[sel] = np.einsum(
            "gk,gk...->g...", t.src_w[sel],
            fields[cid][t.src_rows[sel], t.src_cols[sel]])
    for cid in range(geom.n_charts):
        sel = t.ghost_chart == cid
        fields[cid][t.ghost_row[sel], t.ghost_col[sel]] = vals[sel]
    return fields


def _apply_row_stencil(chart: ChartGrid, f: np.ndarray) -> np.ndarray:
    out = np.zeros_like(f)
    R = f.shape[0]
    for k in range(7):
        sh = k - HALF
        out[HALF:R - HALF] += chart.drow_w[HALF:R - HALF, k].reshape(
            (-1,) + (1,) * (f.ndim - 1)) * f[HALF + sh:R - HALF + sh]
    return out


def _apply_col_stencil(chart: ChartGrid, f: np.ndarray) -> np.ndarray:
    out = np.zeros_like(f)
    C = f.shape[1]
    if chart.col_periodic:
        for k in range(7):
            out += chart.dcol_w[k] * np.roll(f, HALF - k, axis=1)
    else:
        for k in range(7):
            sh = k - HALF
            out[:, HALF:C - HALF] += chart.dcol_w[k] * f[:, HALF + sh:C - HALF + sh]
    return out


def _combine(chart: ChartGrid, dr: np.ndarray, dc: np.ndarray,
             alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    extra = (1,) * (dr.ndim - 2)
    a = alpha.reshape(alpha.shape + extra)
    b = beta.reshape(beta.shape + extra)
    return a * dr + b * dc


def d_z(geom: BaseGeometry, fields: list[np.ndarray]) -> list[np.ndarray]:
    """Holomorphic derivative of a synced per-chart field (any trailing shape).

    The result is valid on every cell whose 7-point stencils fit, i.e.
    three cells inside the padded boundary; in particular on owned cells
    plus a 3-ring, so one more derivative may be taken.
    """
    out = []
    for chart, f in zip(geom.charts, fields):
        _require_finite(chart, f)
        dr = _apply_row_stencil(chart, f)
        dc = _apply_col_stencil(chart, f)
        out.append(_combine(chart, dr, dc, chart.alpha_z, chart.beta_z))
    return out


def d_zbar(geom: BaseGeometry, fields: list[np.ndarray]) -> list[np.ndarray]:
    """Anti-holomorphic derivative; same validity region as :func:`d_z`."""
    out = []
    for chart, f in zip(geom.charts, fields):
        _require_finite(chart, f)
        dr = _apply_row_stencil(chart, f)
        dc = _apply_col_stencil(chart, f)
        out.append(_combine(chart, dr, dc, chart.alpha_zb, chart.beta_zb))
    return out


def _require_finite(chart: ChartGrid, f: np.ndarray) -> None:
    bad = ~np.isfinite(f)
    if bad.any():
        loc = np.argwhere(bad)[0]
        raise GeometryError(
            f"non-finite value in field on chart {chart.chart_id} at cell "
            f"{tuple(int(v) for v in loc)}; ghosts stale or data corrupt")


def integrate(geom: BaseGeometry, fields: list[np.ndarray]) -> float | complex:
    """Quadrature of a scalar field against the volume form g dx dy."""
    total = 0.0
    for chart, f in zip(geom.charts, fields):
        fo = chart.owned_view(np.asarray(f))
        _require_finite(chart, fo)
        total = total + np.sum(chart.owned_view(chart.quad_weights)
                               * chart.owned_view(chart.metric_g) * fo)
    if np.iscomplexobj(np.asarray(total)) and abs(np.imag(total)) < 1e-12 * (1 + abs(total)):
        return float(np.real(total))
    return total


def integrate_area(geom: BaseGeometry, fields: list[np.ndarray]) -> float | complex:
    """Quadrature against the coordinate area dx dy (no metric factor)."""
    total = 0.0
    for chart, f in zip(geom.charts, fields):
        fo = chart.owned_view(np.asarray(f))
        _require_finite(chart, fo)
        total = total + np.sum(chart.owned_view(chart.quad_weights) * fo)
    if np.iscomplexobj(np.asarray(total)) and abs(np.imag(total)) < 1e-12 * (1 + abs(total)):
        return float(np.real(total))
    return total


def _apply_row2_stencil(chart: ChartGrid, f: np.ndarray) -> np.ndarray:
    out = np.zeros_like(f)
    R = f.shape[0]
    for k in range(7):
        sh = k - HALF
        out[HALF:R - HALF] += chart.drow2_w[HALF:R - HALF, k].reshape(
            (-1,) + (1,) * (f.ndim - 1)) * f[HALF + sh:R - HALF + sh]
    return out


def _apply_col2_stencil(chart: ChartGrid, f: np.ndarray) -> np.ndarray:
    out = np.zeros_like(f)
    C = f.shape[1]
    if chart.col_periodic:
        for k in range(7):
            out += chart.dcol2_w[k] * np.roll(f, HALF - k, axis=1)
    else:
        for k in range(7):
            sh = k - HALF
            out[:, HALF:C - HALF] += chart.dcol2_w[k] * f[:, HALF + sh:C - HALF + sh]
    return out


def d_mixed(geom: BaseGeometry, fields: list[np.ndarray]) -> list[np.ndarray]:
    """Direct discretization of d_z d_zbar (real stencil weights).

    Valid on the same cells as :func:`d_z`; the mixed torus term uses the
    composition of the two one-dimensional first-derivative stencils,
    which is benign (different axes commute).
    """
    out = []
    for chart, f in zip(geom.charts, fields):
        _require_finite(chart, f)
        extra = (1,) * (f.ndim - 2)
        acc = chart.crr.reshape(chart.crr.shape + extra) * _apply_row2_stencil(chart, f) \
            + chart.cr.reshape(chart.cr.shape + extra) * _apply_row_stencil(chart, f) \
            + chart.ccc.reshape(chart.ccc.shape + extra) * _apply_col2_stencil(chart, f)
        if chart.crc != 0.0:
            acc = acc + chart.crc * _apply_row_stencil(chart, _apply_col_stencil(chart, f))
        out.append(acc)
    return out


def laplacian(geom: BaseGeometry, fields: list[np.ndarray]) -> list[np.ndarray]:
    """g^{-1} d_z d_zbar of a synced scalar; valid where stencils fit."""
    mixed = d_mixed(geom, fields)
    return [m / c.metric_g.reshape(c.metric_g.shape + (1,) * (m.ndim - 2))
            for c, m in zip(geom.charts, mixed)]
