"""Subbundle inclusions, induced metrics, and the second fundamental form.

A short exact sequence 0 -> S -> E -> Q -> 0 of bundles over a curve is
presented by pointwise matrices: the inclusion ``f`` (r x s, full rank),
the surjection ``p`` (q x r, with p f = 0), and a right inverse ``L``
(p L = I).  On curves every saturated subsheaf is a subbundle, so f never
drops rank and no regularization is involved; a sigma_min guard enforces
this.

Given a metric H on E:

* ``J = f^dag H f`` is the induced metric on S (f-column frame);
* ``lam = f J^{-1} f^dag H`` is the H-orthogonal projection onto S;
* ``P^dag = (I - lam) L`` is the canonical metric lift of Q (independent
  of the choice of right inverse L, since two right inverses differ by
  f . sigma and (I - lam) f = 0);
* ``K = (P^dag)^dag H P^dag`` is the induced quotient metric (L-lift frame);
* ``gamma_zbar = J^{-1} f^dag H d_zbar(P^dag)`` is the second fundamental
  form expressed in the S-frame, a (0,1)-form valued Hom(Q, S).

All adjoints of Hom(Q, S) objects are metric adjoints with respect to
(J, K).  The curvature of E splits against these as

    F(J) = c_S(F) - gamma gamma^dag,      F(K) = c_Q(F) + gamma^dag gamma,

with ``c_S(F) = J^{-1} f^dag H F f`` and ``c_Q(F) = p F P^dag`` the
H-orthogonal block compressions; the sign is pinned by the Euler-sequence
oracle where F(J) = -(1+|z|^2)^{-2} against flat ambient curvature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .bundles import (BundleError, BundleSpec, FormField, MetricField,
                      make_bundle, mat_h, sync_ghosts)
from .chern import CurvatureField, curvature, frame_norm_sup

SIGMA_MIN_GUARD = 1e-8


@dataclass(frozen=True)
class SubbundleInclusion:
    """Pointwise presentation of 0 -> S -> E -> Q -> 0 on the padded grids."""

    geometry: geo.BaseGeometry
    amb_spec: BundleSpec
    sub_spec: BundleSpec
    quot_spec: BundleSpec
    f: list[np.ndarray]    # (R, C, r, s)
    p: list[np.ndarray]    # (R, C, q, r)
    lift: list[np.ndarray]  # (R, C, r, q)
    label: str = ""

    @property
    def sub_rank(self) -> int:
        return self.sub_spec.rank

    @property
    def quot_rank(self) -> int:
        return self.quot_spec.rank


def make_inclusion(name: str, geom: geo.BaseGeometry, **params) -> SubbundleInclusion:
    """Catalog inclusions.

    ``euler``: O(-1) -> O^2 on the sphere via f = (1, z)^T.
    ``coordinate``: first coordinate line of a rank-2 torus bundle with
      diagonal-compatible gluing or of a sphere sum bundle.
    ``atiyah_sub``: the horizontal O inside the torus Atiyah bundle.
    """
    if name == "euler":
        return _euler_inclusion(geom)
    if name == "coordinate":
        return _coordinate_inclusion(geom, params["amb_spec"])
    if name == "atiyah_sub":
        return _atiyah_sub_inclusion(geom, params["amb_spec"])
    raise BundleError(f"unknown inclusion {name!r}; catalog: euler, coordinate, atiyah_sub")


def _euler_inclusion(geom: geo.BaseGeometry) -> SubbundleInclusion:
    if geom.kind != "sphere":
        raise BundleError("the Euler sequence lives on the sphere")
    amb = make_bundle("euler_ambient", "sphere")
    sub = make_bundle("o", "sphere", k=-1)
    def quot_trans(z):
        z = np.asarray(z, dtype=complex)
        return (-z)[..., None, None]
    from .bundles import _sphere_spec
    quot = _sphere_spec(quot_trans, 1, "O(1) (Euler quotient)", {"name": "euler_quot"})
    f, p, lift = [], [], []
    for c in geom.charts:
        z = c.nodes
        shape = c.shape
        fc = np.zeros(shape + (2, 1), dtype=complex)
        pc = np.zeros(shape + (1, 2), dtype=complex)
        lc = np.zeros(shape + (2, 1), dtype=complex)
        if c.chart_id == 0:
            fc[..., 0, 0] = 1.0
            fc[..., 1, 0] = z
            pc[..., 0, 0] = -z
            pc[..., 0, 1] = 1.0
            lc[..., 1, 0] = 1.0
        else:
            fc[..., 0, 0] = z
            fc[..., 1, 0] = 1.0
            pc[..., 0, 0] = 1.0
            pc[..., 0, 1] = -z
            lc[..., 0, 0] = 1.0
        f.append(fc); p.append(pc); lift.append(lc)
    inc = SubbundleInclusion(geom, amb, sub, quot, f, p, lift, "euler")
    validate_inclusion(inc)
    return inc


def _coordinate_inclusion(geom, amb_spec: BundleSpec) -> SubbundleInclusion:
    if amb_spec.rank != 2:
        raise BundleError("coordinate inclusion implemented for rank 2")
    d = amb_spec.descriptor
    if amb_spec.base_kind == "torus":
        a1, atau = amb_spec.a1, amb_spec.atau
        if max(abs(a1[0, 1]), abs(a1[1, 0]), abs(atau[0, 1]), abs(atau[1, 0])) > 1e-13:
            raise BundleError("coordinate inclusion needs diagonal gluing")
        sub = make_bundle("raw", "torus", a1=a1[:1, :1], atau=atau[:1, :1],
                          label="coordinate sub")
        quot = make_bundle("raw", "torus", a1=a1[1:, 1:], atau=atau[1:, 1:],
                           label="coordinate quot")
    elif d.get("name") == "sum":
        sub = make_bundle("o", "sphere", k=d["k1"])
        quot = make_bundle("o", "sphere", k=d["k2"])
    else:
        raise BundleError("coordinate inclusion needs a sum bundle on the sphere")
    return _constant_inclusion(geom, amb_spec, sub, quot, "coordinate")


def _atiyah_sub_inclusion(geom, amb_spec: BundleSpec) -> SubbundleInclusion:
    if amb_spec.descriptor.get("name") != "atiyah":
        raise BundleError("atiyah_sub needs the torus Atiyah bundle")
    sub = make_bundle("trivial", "torus", rank=1)
    quot = make_bundle("trivial", "torus", rank=1)
    return _constant_inclusion(geom, amb_spec, sub, quot, "atiyah_sub")


def _constant_inclusion(geom, amb, sub, quot, label) -> SubbundleInclusion:
    f, p, lift = [], [], []
    for c in geom.charts:
        shape = c.shape
        fc = np.zeros(shape + (2, 1), dtype=complex)
        pc = np.zeros(shape + (1, 2), dtype=complex)
        lc = np.zeros(shape + (2, 1), dtype=complex)
        fc[..., 0, 0] = 1.0
        pc[..., 0, 1] = 1.0
        lc[..., 1, 0] = 1.0
        f.append(fc); p.append(pc); lift.append(lc)
    inc = SubbundleInclusion(geom, amb, sub, quot, f, p, lift, label)
    validate_inclusion(inc)
    return inc


def validate_inclusion(inc: SubbundleInclusion, tol: float = 1e-10) -> None:
    """p f = 0, p L = I, and full rank of f at every owned node."""
    for cid, c in enumerate(inc.geometry.charts):
        own = c.owned
        pf = np.abs(inc.p[cid][own] @ inc.f[cid][own]).max()
        pl = np.abs(inc.p[cid][own] @ inc.lift[cid][own]
                    - np.eye(inc.quot_rank)).max()
        if pf > tol or pl > tol:
            raise BundleError(f"inclusion maps inconsistent: |pf|={pf:.2e}, |pL-I|={pl:.2e}")
        smin = np.linalg.svd(inc.f[cid][own], compute_uv=False)[..., -1].min()
        if smin <= SIGMA_MIN_GUARD:
            raise BundleError(
                f"inclusion rank drops (sigma_min = {smin:.2e}); on curves "
                "this means the presentation is not saturated")


# ---------------------------------------------------------------------------
# induced metrics and projections (all pointwise over padded cells)


def induced_sub_metric(inc: SubbundleInclusion, H: MetricField) -> MetricField:
    """J = f^dag H f on the subbundle."""
    data = [mat_h(fc) @ h @ fc for fc, h in zip(inc.f, H.data)]
    return MetricField(inc.geometry, inc.sub_spec, data, "metric")


def projection(inc: SubbundleInclusion, H: MetricField):
    """The H-orthogonal projection lam = f J^{-1} f^dag H onto S."""
    from .bundles import EndoField
    data = []
    for fc, h in zip(inc.f, H.data):
        J = mat_h(fc) @ h @ fc
        data.append(fc @ np.linalg.solve(J, mat_h(fc) @ h))
    return EndoField(inc.geometry, inc.amb_spec, data, "endo", selfadjoint_wrt=H)


def canonical_lift(inc: SubbundleInclusion, H: MetricField) -> list[np.ndarray]:
    """P^dag = (I - lam) L, the metric splitting of the quotient."""
    lam = projection(inc, H)
    return [(np.eye(inc.amb_spec.rank) - l) @ lc
            for l, lc in zip(lam.data, inc.lift)]


def induced_quot_metric(inc: SubbundleInclusion, H: MetricField,
                        lift: list[np.ndarray] | None = None) -> MetricField:
    """K = (P^dag)^dag H P^dag on the quotient.

    ``lift`` overrides the stored right inverse; the result is unchanged
    for any valid right inverse (tested property).
    """
    if lift is None:
        pdag = canonical_lift(inc, H)
    else:
        lam = projection(inc, H)
        pdag = [(np.eye(inc.amb_spec.rank) - l) @ lc for l, lc in zip(lam.data, lift)]
    data = [mat_h(pd) @ h @ pd for pd, h in zip(pdag, H.data)]
    return MetricField(inc.geometry, inc.quot_spec, data, "metric")


def second_fund_form(inc: SubbundleInclusion, H: MetricField) -> FormField:
    """gamma_zbar = J^{-1} f^dag H d_zbar(P^dag) in the S-frame.

    Valid on owned cells plus a 3-ring (one derivative of pointwise data).
    """
    pdag = canonical_lift(inc, H)
    dpd = geo.d_zbar(inc.geometry, pdag)
    data = []
    for fc, h, d in zip(inc.f, H.data, dpd):
        J = mat_h(fc) @ h @ fc
        data.append(np.linalg.solve(J, mat_h(fc) @ h @ d))
    return FormField(inc.geometry, inc.sub_spec, data, "form")


def image_in_sub_residual(inc: SubbundleInclusion, H: MetricField) -> float:
    """sup over owned cells of |(I - lam) d_zbar(P^dag)| / max(1, |d_zbar P^dag|).

    Measures that the derivative of the splitting lands in S, i.e. the
    form genuinely takes values in Hom(Q, S).
    """
    pdag = canonical_lift(inc, H)
    dpd = geo.d_zbar(inc.geometry, pdag)
    lam = projection(inc, H)
    worst, scale = 0.0, 0.0
    for cid, c in enumerate(inc.geometry.charts):
        own = c.owned
        resid = (np.eye(inc.amb_spec.rank) - lam.data[cid][own]) @ dpd[cid][own]
        worst = max(worst, np.abs(resid).max())
        scale = max(scale, np.abs(dpd[cid][own]).max())
    return worst / max(1.0, scale)


def gamma_adjoint(inc: SubbundleInclusion, gamma: FormField, J: MetricField,
                  K: MetricField) -> list[np.ndarray]:
    """Metric adjoint gamma^dag = K^{-1} gamma^H J : S -> Q."""
    return [np.linalg.solve(k, mat_h(g) @ j)
            for g, j, k in zip(gamma.data, J.data, K.data)]


def sff_l2_norm(inc: SubbundleInclusion, gamma: FormField, J: MetricField,
                K: MetricField) -> float:
    """integral of g^{-1} tr_{J,K}(gamma^dag gamma) dvol."""
    adj = gamma_adjoint(inc, gamma, J, K)
    geom = inc.geometry
    dens = []
    for cid, c in enumerate(geom.charts):
        t = np.real(np.trace(adj[cid] @ gamma.data[cid], axis1=-2, axis2=-1))
        dens.append(t / c.metric_g)
    return float(geo.integrate(geom, dens))


@dataclass
class InducedPackage:
    """Everything induced by one metric on the ambient bundle."""

    J: MetricField
    K: MetricField
    gamma: FormField
    sff_l2: float


def induce_all(inc: SubbundleInclusion, H: MetricField) -> InducedPackage:
    J = induced_sub_metric(inc, H)
    K = induced_quot_metric(inc, H)
    gamma = second_fund_form(inc, H)
    return InducedPackage(J, K, gamma, sff_l2_norm(inc, gamma, J, K))


# ---------------------------------------------------------------------------
# curvature decomposition


def _compress_sub(inc, H, F: CurvatureField) -> list[np.ndarray]:
    out = []
    for fc, h, Fd in zip(inc.f, H.data, F.data):
        J = mat_h(fc) @ h @ fc
        out.append(np.linalg.solve(J, mat_h(fc) @ h @ Fd @ fc))
    return out


def _compress_quot(inc, H, F: CurvatureField) -> list[np.ndarray]:
    pdag = canonical_lift(inc, H)
    return [pc @ Fd @ pd for pc, Fd, pd in zip(inc.p, F.data, pdag)]


def curvature_decomposition_residual(inc: SubbundleInclusion, H: MetricField):
    """Sup-norm residuals of F(J) = c_S(F) - gg^dag and F(K) = c_Q(F) + g^dag g.

    Returns (res_S, res_Q), measured in metric-orthonormal Frobenius norm
    over owned cells; both converge to zero at scheme order.
    """
    sync_ghosts(H)
    F = curvature(H, synced=True)
    pkg = induce_all(inc, H)
    FJ = curvature(pkg.J)
    FK = curvature(pkg.K)
    cS = _compress_sub(inc, H, F)
    cQ = _compress_quot(inc, H, F)
    adj = gamma_adjoint(inc, pkg.gamma, pkg.J, pkg.K)
    ggd = [g @ a for g, a in zip(pkg.gamma.data, adj)]
    gdg = [a @ g for g, a in zip(pkg.gamma.data, adj)]
    rs = [fj - cs + gg for fj, cs, gg in zip(FJ.data, cS, ggd)]
    rq = [fk - cq - gg for fk, cq, gg in zip(FK.data, cQ, gdg)]
    res_s = frame_norm_sup(rs, pkg.J)
    res_q = frame_norm_sup(rq, pkg.K)
    return res_s, res_q


def integrated_trace_identity(inc: SubbundleInclusion, H: MetricField):
    """Integrated form of the quotient curvature identity.

    Returns (lhs_Q, lhs_S) where
    ``lhs_Q = int tr(Lambda F(K)) - int tr(Lambda c_Q(F))`` should equal
    ``+||gamma||^2`` and the S-side analogue equals ``-||gamma||^2``.
    """
    sync_ghosts(H)
    F = curvature(H, synced=True)
    pkg = induce_all(inc, H)
    geom = inc.geometry

    def contracted_trace(mats):
        return [np.real(np.trace(m, axis1=-2, axis2=-1)) / c.metric_g
                for m, c in zip(mats, geom.charts)]

    FK = curvature(pkg.K)
    FJ = curvature(pkg.J)
    cQ = _compress_quot(inc, H, F)
    cS = _compress_sub(inc, H, F)
    lhs_q = geo.integrate(geom, contracted_trace(FK.data)) \
        - geo.integrate(geom, contracted_trace(cQ))
    lhs_s = geo.integrate(geom, contracted_trace(FJ.data)) \
        - geo.integrate(geom, contracted_trace(cS))
    return float(lhs_q), float(lhs_s), pkg.sff_l2
