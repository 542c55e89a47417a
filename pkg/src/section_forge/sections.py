"""Flow-box atlases, the assembled 1-form and global cross sections of suspension flows.

Every box works in its own unwrapped chart: a point ``(x, s)`` of the mapping torus is lifted to
``(A^k x, s - k)`` with ``k`` chosen to bring ``s - k`` next to the box level, and the fibre part is
then recentred periodically.  Local sections are graphs ``s = s_c + a g(x)`` where ``g`` is a
mollified Hölder wiggle, so that ``d tau`` carries the ``eps^theta`` / ``eps^(theta - 1)`` behaviour of
a genuinely rough foliation chart.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .flows import SuspensionFlow, flow_jacobian, time_t_map
from .forms import DiscreteKForm, closed_projection, exterior_derivative, form_norm, pointwise_norm, \
    pullback_components, sample_form
from .grid import GridGeometry, periodic_delta
from .mollify import kernel_weights

__all__ = [
    "CoverageError",
    "TransversalityError",
    "AliasingError",
    "PipelineError",
    "HolderWiggle",
    "make_wiggle",
    "FlowBox",
    "FlowBoxAtlas",
    "build_atlas",
    "lift",
    "tau",
    "partition",
    "assemble_xi0",
    "evaluate_xi0",
    "pullback_xi",
    "evaluate_xi_t",
    "finalize_eta",
    "CrossSection",
    "extract_section",
    "canonical_points",
    "xi0_contract",
    "measure_pullback_constant",
    "measured_H",
    "run_pipeline",
]


class CoverageError(ValueError):
    """The shrunken boxes no longer cover the manifold."""


class TransversalityError(ValueError):
    pass


class AliasingError(ValueError):
    """The pulled-back form has structure below the lattice resolution."""


class PipelineError(RuntimeError):
    def __init__(self, message, code, report=None):
        super().__init__(message)
        self.code = code
        self.report = report or {}


# ---------------------------------------------------------------- Hölder wiggle

def _bend(w):
    return np.sin(2 * np.pi * w) / (2 * np.pi)


@dataclass(frozen=True)
class HolderWiggle:
    """Mollified ``H(w) = W(w_u - beta b(w_s))`` on the unit w-torus, ``b(w) = sin(2 pi w) / (2 pi)``.

    ``W(u) = sum_{k=1}^{K} 2^(-k theta) cos(2^k pi u)`` is theta-Hölder and 1-periodic.  Its level
    sets in the chart ``zeta = (w_s, w_u - beta b(w_s))`` are straight lines along ``zeta_s``; the
    mollification is done in the curved ``w`` coordinates, so the mollified function is no
    longer constant along those lines, but only to order ``eps^theta``.

    Stored as cubic-spline coefficients: ``G`` itself, ``dG/dw_u`` and the derivative ``LG``
    along the leaf direction ``(1, beta b'(w_s))``.  ``LG`` is computed from a commutator
    formula, which avoids cancelling two ``eps^(theta - 1)`` terms.
    """

    theta: float
    epsilon: float
    beta: float
    n_grid: int
    coef_g: np.ndarray = field(repr=False, compare=False)
    coef_du: np.ndarray = field(repr=False, compare=False)
    coef_leaf: np.ndarray = field(repr=False, compare=False)

    def evaluate(self, zeta: np.ndarray):
        """``(g, dg/dzeta_s, dg/dzeta_u)`` at chart points ``zeta`` (``(..., 2)``)."""
        zeta = np.asarray(zeta, dtype=float)
        ws = zeta[..., 0]
        wu = zeta[..., 1] + self.beta * _bend(ws)
        coords = np.stack([ws.ravel(), wu.ravel()]) * self.n_grid
        out = [ndimage.map_coordinates(c, coords, order=3, mode="grid-wrap", prefilter=False).reshape(ws.shape)
               for c in (self.coef_g, self.coef_leaf, self.coef_du)]
        return tuple(out)


@lru_cache(maxsize=16)
def make_wiggle(theta: float, epsilon: float, beta: float = 0.5, n_grid: int = 2048) -> HolderWiggle:
    h = 1.0 / n_grid
    # keep the bent modes two octaves below Nyquist; higher ones would alias into the mollified field
    K = max(1, int(math.floor(math.log2(n_grid / (2 * (1 + beta))))))
    w = np.arange(n_grid) * h
    ws, wu = np.meshgrid(w, w, indexing="ij")
    u = wu - beta * _bend(ws)
    H = np.zeros_like(u)
    for k in range(1, K + 1):
        H += 2.0 ** (-k * theta) * np.cos(2.0 ** k * np.pi * u)
    weights = kernel_weights((h, h), epsilon)
    r = (weights.shape[0] - 1) // 2
    offs = np.arange(-r, r + 1) * h
    ys, yu = np.meshgrid(offs, offs, indexing="ij")
    rad2 = (ys ** 2 + yu ** 2) / epsilon ** 2
    inside = rad2 < 1
    bump = np.zeros_like(rad2)
    bump[inside] = np.exp(1.0 / (rad2[inside] - 1.0))
    total = bump.sum()
    # d/dy_u of the sampled kernel, same normalisation as the weights
    d_u = np.zeros_like(rad2)
    d_u[inside] = -2.0 * bump[inside] * yu[inside] / (epsilon ** 2 * (rad2[inside] - 1.0) ** 2)
    d_u /= total * h * h

    def periodic_kernel(k):
        full = np.zeros((n_grid, n_grid))
        idx = np.arange(-r, r + 1) % n_grid
        full[np.ix_(idx, idx)] = k
        return np.fft.rfft2(full)

    Hh = np.fft.rfft2(H)

    def conv(k, scale=1.0):
        return np.fft.irfft2(Hh * periodic_kernel(k), s=(n_grid, n_grid)) * scale

    area = h * h
    G = conv(weights)
    G_u = conv(d_u, area)
    k1 = conv((1 - np.cos(2 * np.pi * ys)) * d_u, area)
    k2 = conv(np.sin(2 * np.pi * ys) * d_u, area)
    LG = beta * (np.cos(2 * np.pi * ws) * k1 - np.sin(2 * np.pi * ws) * k2)

    def spline(a):
        return ndimage.spline_filter(a, order=3, mode="grid-wrap")

    return HolderWiggle(theta, epsilon, beta, n_grid, spline(G), spline(G_u), spline(LG))


# ---------------------------------------------------------------- atlas

@dataclass(frozen=True)
class FlowBox:
    """Box ``|x' - x_c|_inf < half_width``, ``|s' - s_c| < T`` in its unwrapped chart."""

    index: int
    x_center: tuple
    s_center: float
    half_width: float
    T: float
    phase: tuple

    def to_dict(self) -> dict:
        return {"index": self.index, "x_center": list(self.x_center), "s_center": self.s_center,
                "half_width": self.half_width, "T_eps": self.T}


@dataclass(frozen=True)
class FlowBoxAtlas:
    flow: SuspensionFlow
    epsilon: float
    theta: float
    amplitude: float
    boxes: tuple
    eps_star: float
    eps_cover: float
    wiggle: HolderWiggle | None = field(repr=False, compare=False)
    constants: dict = field(default_factory=dict, compare=False)

    @property
    def frame_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.flow.splitting.frame)

    def summary(self) -> dict:
        out = {"epsilon": self.epsilon, "theta": self.theta, "amplitude": self.amplitude,
               "eps_star": self.eps_star, "eps_cover": self.eps_cover,
               "boxes": [b.to_dict() | self.constants.get(b.index, {}) for b in self.boxes]}
        return out


def build_atlas(flow: SuspensionFlow, epsilon: float, theta: float = 0.5, amplitude: float = 1e-3,
                patches: int = 2, levels: int = 3, T: float = 0.3, eps_star: float = 0.5,
                beta: float = 0.5, wiggle_grid: int = 2048) -> FlowBoxAtlas:
    """Boxes on ``patches^d`` fibre centres times ``levels`` suspension levels.

    Centres do not depend on ``epsilon``; the suspension half-length shrinks as
    ``T_eps = T (1 - eps / eps_star)`` and coverage needs ``T_eps > 1 / (2 levels)``.
    """
    if flow.d != 2:
        raise NotImplementedError("atlases are implemented for 2-dimensional fibres")
    if not 0 < epsilon < eps_star:
        raise CoverageError("epsilon must lie in (0, eps_star)")
    if T >= 0.5:
        raise ValueError("T must be below 1/2 so every point has a single lift per box")
    T_eps = T * (1 - epsilon / eps_star)
    eps_cover = eps_star * (1 - 1 / (2 * levels * T))
    if T_eps <= 1 / (2 * levels) or epsilon >= eps_cover:
        raise CoverageError(f"epsilon={epsilon} leaves gaps between the boxes (needs < {eps_cover:.4g})")
    # |g| <= sum_k 2^(-k theta); the graph must stay well inside the box along the flow
    if abs(amplitude) / (2.0 ** theta - 1) >= T_eps / 2:
        raise TransversalityError(f"wiggle amplitude {amplitude} pushes the section out of the flow box")
    half_width = 0.75 / patches
    centres = (np.arange(patches) + 0.0) / patches
    boxes = []
    golden = (math.sqrt(5) - 1) / 2
    for level in range(levels):
        for xc in np.array(np.meshgrid(*[centres] * flow.d, indexing="ij")).reshape(flow.d, -1).T:
            i = len(boxes)
            phase = (math.fmod(0.37 + i * golden, 1.0), math.fmod(0.11 + i * golden * golden, 1.0))
            boxes.append(FlowBox(i, tuple(float(v) for v in xc), level / levels, half_width, T_eps, phase))
    wig = make_wiggle(float(theta), float(epsilon), beta, wiggle_grid) if amplitude else None
    return FlowBoxAtlas(flow, float(epsilon), float(theta), float(amplitude), tuple(boxes), eps_star, eps_cover, wig)


def lift(flow: SuspensionFlow, box: FlowBox, p: np.ndarray):
    """Chart coordinates of ``p`` in ``box``, the Jacobian of the lift and the interior mask."""
    p = np.asarray(p, dtype=float)
    s = p[..., -1]
    k = np.rint(s - box.s_center).astype(np.int64)
    q = np.empty_like(p)
    J = np.zeros(p.shape + (flow.n,))
    J[..., -1, -1] = 1.0
    for kk in (-1, 0, 1):
        sel = k == kk
        if not np.any(sel):
            continue
        M = flow.power(kk).astype(float)
        q[sel, :-1] = p[sel, :-1] @ M.T
        J[sel, :-1, :-1] = M
    q[..., -1] = s - k
    xc = np.asarray(box.x_center)
    q[..., :-1] = xc + periodic_delta(q[..., :-1] - xc, 1.0)
    inside = (np.max(np.abs(q[..., :-1] - xc), axis=-1) < box.half_width) & (np.abs(q[..., -1] - box.s_center) < box.T)
    return q, J, inside


def _wiggle_chart(atlas: FlowBoxAtlas, box: FlowBox, qx: np.ndarray):
    """Eigen-coordinates ``zeta = V^-1 (x' - x_c) + phase`` and the matrix ``d zeta / d x``."""
    Vinv = atlas.frame_inverse
    zeta = (qx - np.asarray(box.x_center)) @ Vinv.T + np.asarray(box.phase)
    return zeta, Vinv


def _section_height(atlas, box, qx):
    """``s_c + a g(x)`` and its x-gradient."""
    if atlas.wiggle is None:
        return np.full(qx.shape[:-1], box.s_center), np.zeros(qx.shape)
    zeta, Vinv = _wiggle_chart(atlas, box, qx)
    g, g_s, g_u = atlas.wiggle.evaluate(zeta)
    grad = np.stack([g_s, g_u], axis=-1) @ Vinv
    return box.s_center + atlas.amplitude * g, atlas.amplitude * grad


def _bracketed_root(fun, lo, hi, tol, max_iter=100):
    """Vectorised regula falsi (Illinois) with bisection safeguard; ``fun`` increasing in its argument."""
    flo, fhi = fun(lo), fun(hi)
    if np.any(flo > 0) or np.any(fhi < 0):
        raise TransversalityError("root not bracketed along the orbit")
    x = 0.5 * (lo + hi)
    side = np.zeros(lo.shape, dtype=int)
    for _ in range(max_iter):
        denom = fhi - flo
        x = np.where(denom > 0, lo - flo * (hi - lo) / np.where(denom > 0, denom, 1), 0.5 * (lo + hi))
        x = np.clip(x, lo, hi)
        fx = fun(x)
        done = np.abs(fx) <= tol
        if np.all(done | (hi - lo <= tol)):
            return x
        left = fx < 0
        lo, flo = np.where(left, x, lo), np.where(left, fx, flo)
        hi, fhi = np.where(left, hi, x), np.where(left, fhi, fx)
        # Illinois: halve the stale endpoint value when the same side moves twice
        flo = np.where(~left & (side == -1), flo / 2, flo)
        fhi = np.where(left & (side == 1), fhi / 2, fhi)
        side = np.where(left, 1, -1)
    return x


def tau(atlas: FlowBoxAtlas, box: FlowBox, q: np.ndarray, with_gradient: bool = True):
    """Return time ``tau`` to the local section (``f_-tau(q)`` on it) and ``d tau`` in the chart.

    ``q`` are chart points of the box.  The flow keeps the fibre coordinate fixed in the
    unwrapped chart, so only the suspension coordinate moves along orbits.
    """
    flow = atlas.flow
    height, grad = _section_height(atlas, box, q[..., :-1])
    r_max = 1.0 if flow.unit_roof else 1.0 + sum(abs(float(t["amplitude"])) for t in flow.time_change.terms)
    span = (2 * box.T + 2 * abs(atlas.amplitude) * 4) * r_max
    tol = 1e-10 * box.T
    if flow.unit_roof:
        def phi(t):
            return q[..., -1] - t - height
    else:
        def phi(t):
            return _chart_orbit_s(flow, box, q, -t) - height
    lo = np.full(q.shape[:-1], -span)
    hi = np.full(q.shape[:-1], span)
    val = _bracketed_root(lambda t: -phi(t), lo, hi, tol)
    if not with_gradient:
        return val, None
    dphi = np.concatenate([-grad, np.ones(q.shape[:-1] + (1,))], axis=-1)
    if flow.unit_roof:
        return val, dphi
    # implicit function theorem: d tau = dPhi . D f_-tau / dPhi(X) at y = f_-tau(q)
    p = _chart_to_global(flow, box, q)
    y, Jf = flow_jacobian(flow, -val, p)
    _, Jq, _ = lift(flow, box, p)
    _, Jy, _ = lift(flow, box, y)
    Dchart = Jy @ Jf @ np.linalg.inv(Jq)
    yq = lift(flow, box, y)[0]
    h_y, g_y = _section_height(atlas, box, yq[..., :-1])
    dphi_y = np.concatenate([-g_y, np.ones(q.shape[:-1] + (1,))], axis=-1)
    X = np.einsum("...ij,...j->...i", Jy, flow.generator(y))
    num = np.einsum("...i,...ij->...j", dphi_y, Dchart)
    den = np.sum(dphi_y * X, axis=-1)
    if np.any(np.abs(den) < 1e-8):
        raise TransversalityError("local section tangent to the flow")
    return val, num / den[..., None]


def _chart_to_global(flow, box, q):
    s = q[..., -1]
    k = np.floor(s).astype(np.int64)
    p = np.empty_like(q)
    for kk in np.unique(k):
        sel = k == kk
        p[sel, :-1] = q[sel, :-1] @ flow.power(int(kk)).T.astype(float)
    p[..., :-1] = np.mod(p[..., :-1], 1.0)
    p[..., -1] = s - k
    return p


def _chart_orbit_s(flow, box, q, t):
    # unwrap against q_s + t, which the true displacement misses by at most |t| (r_max - 1)
    p = _chart_to_global(flow, box, q)
    y = time_t_map(flow, t, p)
    ref = q[..., -1] + t
    return y[..., -1] - np.rint(y[..., -1] - ref)


def _profile(u):
    """``exp(-1/(1-u^2))`` on ``|u| < 1`` and its derivative."""
    u = np.asarray(u, dtype=float)
    val = np.zeros_like(u)
    der = np.zeros_like(u)
    m = np.abs(u) < 1
    um = u[m]
    e = np.exp(-1.0 / (1.0 - um * um))
    val[m] = e
    der[m] = e * (-2.0 * um / (1.0 - um * um) ** 2)
    return val, der


def _box_bump(flow, box, q, J):
    """Unnormalised bump of the box and its differential in global coordinates."""
    xc = np.asarray(box.x_center)
    parts = []
    ders = []
    for j in range(flow.d):
        v, dv = _profile((q[..., j] - xc[j]) / box.half_width)
        parts.append(v)
        ders.append(dv / box.half_width)
    v, dv = _profile((q[..., -1] - box.s_center) / box.T)
    parts.append(v)
    ders.append(dv / box.T)
    rho = np.prod(parts, axis=0)
    grad = np.zeros(q.shape)
    for j in range(flow.n):
        others = np.prod([parts[i] for i in range(flow.n) if i != j], axis=0)
        grad[..., j] = ders[j] * others
    return rho, np.einsum("...i,...ij->...j", grad, J)


def partition(atlas: FlowBoxAtlas, p: np.ndarray):
    """Lists ``psi_i``, ``d psi_i`` (global coordinates) and the lift data per box."""
    flow = atlas.flow
    rhos, drhos, lifts = [], [], []
    for box in atlas.boxes:
        q, J, inside = lift(flow, box, p)
        rho, drho = _box_bump(flow, box, q, J)
        rhos.append(rho)
        drhos.append(drho)
        lifts.append((q, J, inside))
    S = np.sum(rhos, axis=0)
    if np.any(S <= 1e-300):
        raise CoverageError("points outside every box")
    dS = np.sum(drhos, axis=0)
    psis = [r / S for r in rhos]
    dpsis = [(dr - psi[..., None] * dS) / S[..., None] for dr, psi in zip(drhos, psis)]
    return psis, dpsis, lifts


# ---------------------------------------------------------------- assembled form xi_0

def _wedge11(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a ^ b`` for covectors ``(..., n)``; components ``(n choose 2, ...)`` in combination order."""
    n = a.shape[-1]
    return np.stack([a[..., i] * b[..., j] - a[..., j] * b[..., i]
                     for i in range(n) for j in range(i + 1, n)])


@dataclass
class Xi0Sample:
    """Pointwise values of ``xi_0 = sum psi_i d tau_i`` and of ``d xi_0 = sum d psi_i ^ d tau_i``."""

    points: np.ndarray
    xi: np.ndarray
    dxi: np.ndarray
    box_dtau: list = field(default_factory=list, repr=False)
    dpsi_total: np.ndarray | None = field(default=None, repr=False)


def evaluate_xi0(atlas: FlowBoxAtlas, p: np.ndarray, keep_boxes: bool = False) -> Xi0Sample:
    p = np.asarray(p, dtype=float)
    psis, dpsis, lifts = partition(atlas, p)
    xi = np.zeros(p.shape)
    dxi = np.zeros((math.comb(p.shape[-1], 2),) + p.shape[:-1])
    per_box = []
    dpsi_total = np.zeros(p.shape[:-1])
    gram = atlas.flow.metric.gram(p)
    for box, psi, dpsi, (q, J, _) in zip(atlas.boxes, psis, dpsis, lifts):
        support = psi > 0
        if not np.any(support):
            per_box.append(None)
            continue
        _, dt_chart = tau(atlas, box, q[support])
        dt = np.einsum("...i,...ij->...j", dt_chart, J[support])
        xi[support] += psi[support, None] * dt
        dxi[:, support] += _wedge11(dpsi[support], dt)
        dpsi_total += pointwise_norm(np.moveaxis(dpsi, -1, 0), 1, p.shape[-1], gram)[0]
        if keep_boxes:
            per_box.append((support, dt))
    return Xi0Sample(p, xi, dxi, per_box if keep_boxes else [], dpsi_total)


def _lattice_forms(geo: GridGeometry, xi: np.ndarray, dxi: np.ndarray, metric) -> tuple:
    return (DiscreteKForm(1, geo, np.moveaxis(xi, -1, 0), metric),
            DiscreteKForm(2, geo, dxi, metric))


def lattice_geometry(flow: SuspensionFlow, n_fibre: int, n_s: int) -> GridGeometry:
    return GridGeometry.mapping_torus(flow.A, n_fibre, n_s)


def assemble_xi0(atlas: FlowBoxAtlas, geometry: GridGeometry):
    """``(xi_0, d xi_0)`` sampled at the lattice points; ``d xi_0`` is evaluated exactly, not differenced."""
    ev = evaluate_xi0(atlas, geometry.points())
    return _lattice_forms(geometry, ev.xi, ev.dxi, atlas.flow.metric.gram)


def xi0_contract(atlas: FlowBoxAtlas, p: np.ndarray) -> dict:
    """Measured quantities of the xi_0 contract at the points ``p`` (adapted-metric norms)."""
    flow = atlas.flow
    ev = evaluate_xi0(atlas, p, keep_boxes=True)
    gram = flow.metric.gram(p)
    X = flow.generator(p)
    e_s = np.zeros(p.shape)
    e_s[..., :-1] = flow.splitting.stable_frame[:, 0]
    es_norm = flow.metric.norm(p, e_s)
    e_u = np.zeros(p.shape)
    e_u[..., :-1] = flow.splitting.unstable_frame[:, 0]
    eu_norm = flow.metric.norm(p, e_u)
    xi_X = np.sum(ev.xi * X, axis=-1)
    xi_ss = np.abs(np.sum(ev.xi * e_s, axis=-1)) / es_norm
    # d xi_0 on the plane E^cs = span(e_s, X), orthogonal in the adapted metric
    Omega = np.zeros(p.shape[:-1] + (3, 3))
    for a, (i, j) in enumerate(((0, 1), (0, 2), (1, 2))):
        Omega[..., i, j] = ev.dxi[a]
        Omega[..., j, i] = -ev.dxi[a]
    dxi_cs = np.abs(np.einsum("...i,...ij,...j->...", e_s, Omega, X)) / (es_norm * flow.metric.norm(p, X))
    dxi_full = pointwise_norm(ev.dxi, 2, 3, gram)[0]
    eps, th = atlas.epsilon, atlas.theta
    boxes = {}
    for box, data in zip(atlas.boxes, ev.box_dtau):
        if data is None:
            continue
        support, dt = data
        A_i = np.max(np.abs(np.sum(dt * e_s[support], -1)) / es_norm[support]) / eps ** th
        B_i = np.max(pointwise_norm(np.moveaxis(dt, -1, 0), 1, 3, gram[support])[0]) / eps ** (th - 1)
        # the fibre part carries the blow-up; the ds part of d tau is of unit size
        fib = np.hypot(np.sum(dt * e_s[support], -1) / es_norm[support],
                       np.sum(dt * e_u[support], -1) / eu_norm[support])
        boxes[box.index] = {"A": float(A_i), "B": float(B_i),
                            "B_fibre": float(np.max(fib)) / eps ** (th - 1)}
    return {
        "max_xi_X_deviation": float(np.max(np.abs(xi_X - 1))),
        "xi_ss": float(np.max(xi_ss)),
        "dxi_cs": float(np.max(dxi_cs)),
        "dxi": float(np.max(dxi_full)),
        "C": float(np.max(ev.dpsi_total)),
        "boxes": boxes,
    }


# ---------------------------------------------------------------- pull back

def component_gradient(atlas: FlowBoxAtlas, p: np.ndarray, t: float, step: float) -> float:
    """Largest partial derivative of any component of ``xi_t`` at ``p`` (central differences)."""
    worst = 0.0
    for axis in range(p.shape[-1]):
        dp = np.zeros(p.shape[-1])
        dp[axis] = step
        hi, _ = evaluate_xi_t(atlas, p + dp, t)
        lo, _ = evaluate_xi_t(atlas, p - dp, t)
        worst = max(worst, float(np.max(np.abs(hi - lo))) / (2 * step))
    return worst


def _check_aliasing(atlas, t, geometry, n_probe=4096, seed=0):
    pts = geometry.points().reshape(-1, geometry.ndim)
    rng = np.random.default_rng(seed)
    probe = pts[rng.choice(len(pts), size=min(n_probe, len(pts)), replace=False)]
    probe[:, -1] = np.clip(probe[:, -1], 1e-3, 1 - 1e-3)
    h = min(geometry.spacing)
    _, J = flow_jacobian(atlas.flow, -float(t), probe)
    stretch = float(np.max(np.linalg.norm(J, ord=2, axis=(-2, -1))))
    step = min(h, atlas.epsilon / stretch) / 16
    grad = component_gradient(atlas, probe, t, step)
    if grad > 1 / (2 * h):
        raise AliasingError(f"component gradient {grad:.4g} exceeds 1/(2h) = {1 / (2 * h):.4g}")
    return grad


def evaluate_xi_t(atlas: FlowBoxAtlas, p: np.ndarray, t: float):
    """``(xi_t, d xi_t)`` at ``p`` with ``xi_t = f_-t^* xi_0``; shapes ``(..., n)`` and ``(3, ...)``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    y, J = flow_jacobian(atlas.flow, -float(t), p)
    ev = evaluate_xi0(atlas, y)
    xi = np.einsum("...i,...ij->...j", ev.xi, J)
    dxi = pullback_components(ev.dxi, J, 2)
    return xi, dxi


def pullback_xi(atlas: FlowBoxAtlas, geometry: GridGeometry, t: float):
    """``(xi_t, d xi_t)`` on the lattice; raises :class:`AliasingError` below resolution."""
    if atlas.wiggle is not None:
        _check_aliasing(atlas, t, geometry)
    xi, dxi = evaluate_xi_t(atlas, geometry.points(), t)
    return _lattice_forms(geometry, xi, dxi, atlas.flow.metric.gram)


def measure_pullback_constant(atlas: FlowBoxAtlas, points: np.ndarray, t_list) -> dict:
    """Empirical ``H`` with ``||d xi_t|| <= H max(eps^(theta-1) q^t, eps^theta mu_-^(-2t))``."""
    flow = atlas.flow
    sp = flow.splitting
    q = sp.mu_plus ** (sp.n_s - 1) * sp.lambda_plus ** (sp.n_u - 1)
    eps, th = atlas.epsilon, atlas.theta
    gram = flow.metric.gram(points)
    rows = []
    for t in t_list:
        _, dxi = evaluate_xi_t(atlas, points, t)
        measured = float(np.max(pointwise_norm(dxi, 2, flow.n, gram)[0]))
        envelope = max(eps ** (th - 1) * q ** t, eps ** th * sp.mu_minus ** (-2 * t))
        rows.append((float(t), measured, measured / envelope))
    return {"rows": rows, "H": max(r[2] for r in rows)}


# ---------------------------------------------------------------- closed form

def finalize_eta(xi: DiscreteKForm, flow: SuspensionFlow, norm_d_xi: float, cover=None):
    """Closed ``eta`` near ``xi`` and the transversality verdict ``min eta(X) > 0``."""
    if norm_d_xi >= 1:
        raise PipelineError(f"||d xi|| = {norm_d_xi:.4g} >= 1: (epsilon, t) infeasible", 3,
                            {"norm_d_xi_t": norm_d_xi})
    eta, report = closed_projection(xi.with_components(xi.components), cover)
    X = flow.generator(xi.geometry.points())
    eta_X = np.sum(np.moveaxis(eta.components, 0, -1) * X, axis=-1)
    verdict = {
        "min_eta_X": float(eta_X.min()),
        "max_eta_X": float(eta_X.max()),
        "norm_xi_minus_eta": report["norm_xi_minus_eta"],
        "norm_d_eta": report["norm_d_eta"],
        "distance_bound_ok": bool(report["norm_xi_minus_eta"] <= max(norm_d_xi, 1e-12) * (1 + 1e-2)),
        "method": report["method"],
        "ds_coefficient": report.get("ds_coefficient"),
        "potential": report.get("potential"),
    }
    if verdict["min_eta_X"] <= 0:
        raise PipelineError("min eta(X) <= 0: closed projection lost transversality", 4, verdict)
    return eta, verdict


# ---------------------------------------------------------------- sections

@dataclass
class CrossSection:
    """Orbit crossings of ``F = s + phi / c = 0 mod 1``."""

    level: float
    period: float
    points: np.ndarray
    return_points: np.ndarray
    return_times: np.ndarray
    first_hit: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.points.shape[-1] - 1
        w.writerow([f"x{i}" for i in range(d)] + ["s", "return_time"])
        for p, rt in zip(self.points, self.return_times):
            w.writerow([repr(float(v)) for v in p] + [repr(float(rt))])
        return buf.getvalue()


def canonical_points(flow: SuspensionFlow, pts: np.ndarray) -> np.ndarray:
    """Representatives with ``s`` in ``[-1/2, 1/2)`` using ``(x, s + 1) ~ (A x, s)``."""
    pts = np.array(pts, dtype=float)
    up = pts[:, -1] >= 0.5
    pts[up, :-1] = np.mod(pts[up, :-1] @ flow.A.T, 1.0)
    pts[up, -1] -= 1.0
    return pts


def _potential(eta: DiscreteKForm) -> tuple[float, np.ndarray]:
    from .forms import _lsq_closed

    _, c, phi = _lsq_closed(eta)
    return c, phi


def loop_period(eta: DiscreteKForm) -> float:
    """Integral of ``eta`` over the suspension loop through the fixed point ``x = 0``."""
    geo = eta.geometry
    n = geo.ndim
    col = eta.components[n - 1][(0,) * (n - 1)]
    return float(np.sum(col) * geo.spacing[-1])


def extract_section(eta: DiscreteKForm, flow: SuspensionFlow, n_orbits: int = 1000, seed: int = 0,
                    potential: np.ndarray | None = None, tol: float = 1e-12) -> CrossSection:
    """Section ``F^-1(0)`` of the circle-valued ``F`` with ``dF = eta / period``, found orbit by orbit."""
    if not flow.unit_roof:
        raise NotImplementedError("section extraction is implemented for the unit roof")
    period = loop_period(eta)
    if not period > 0:
        raise PipelineError("non-positive period of eta along the suspension loop", 5)
    if potential is None:
        _, potential = _potential(eta)
    geo = eta.geometry
    phi_form = DiscreteKForm(0, geo, potential[None])
    X = flow.generator(geo.points())
    eta_X = np.sum(np.moveaxis(eta.components, 0, -1) * X, axis=-1)
    rate_min = eta_X.min() / period
    if rate_min <= 0:
        raise PipelineError("eta(X) not positive", 4)
    t_max = 10.0 / rate_min
    rng = np.random.default_rng(seed)
    p0 = np.column_stack([rng.uniform(size=(n_orbits, flow.d)), rng.uniform(size=n_orbits)])

    def F(t):
        q = time_t_map(flow, t, p0)
        return p0[:, -1] + t + sample_form(phi_form, q)[0] / period, q

    F0, _ = F(np.zeros(n_orbits))
    targets = np.floor(F0) + 1.0

    def crossing(target):
        lo = np.zeros(n_orbits)
        hi = np.full(n_orbits, t_max)
        f_hi, _ = F(hi)
        if np.any(f_hi < target):
            raise PipelineError("orbit did not return within t_max", 5)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            f_mid, _ = F(mid)
            below = f_mid < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) <= tol:
                break
        return 0.5 * (lo + hi)

    t0 = crossing(targets)
    t1 = crossing(targets + 1.0)
    q0 = canonical_points(flow, time_t_map(flow, t0, p0))
    q1 = canonical_points(flow, time_t_map(flow, t1, p0))
    return CrossSection(0.0, period, q0, q1, t1 - t0, t0)


# ---------------------------------------------------------------- pipeline

DEFAULT_EPS = (2.0 ** -4, 2.0 ** -5, 2.0 ** -6)
DEFAULT_T = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0)


def measured_H(flow: SuspensionFlow, eps_list=DEFAULT_EPS, t_list=DEFAULT_T, theta: float = 0.5,
               amplitude: float = 1e-3, n_points: int = 4000, seed: int = 0, safety: float = 1.25,
               **atlas_kw) -> dict:
    """Pullback constant measured over ``eps_list x t_list`` on random points, times ``safety``."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(n_points, flow.n))
    curves = {}
    for eps in eps_list:
        atlas = build_atlas(flow, eps, theta=theta, amplitude=amplitude, **atlas_kw)
        curves[float(eps)] = measure_pullback_constant(atlas, pts, t_list)["rows"]
    raw = max(r[2] for rows in curves.values() for r in rows)
    return {"H": safety * raw, "H_raw": raw, "safety": safety, "curves": curves}


def _bound_curve(atlas: FlowBoxAtlas, geometry: GridGeometry, t_list) -> list:
    rng = np.random.default_rng(0)
    pts = geometry.points().reshape(-1, geometry.ndim)
    pts = pts[rng.choice(len(pts), size=min(4000, len(pts)), replace=False)]
    rows = measure_pullback_constant(atlas, pts, t_list)["rows"]
    return [{"t": t, "measured": m, "ratio": r} for t, m, r in rows]


def run_pipeline(flow: SuspensionFlow, epsilon: float | None = None, t: float | None = None,
                 theta: float = 0.5, amplitude: float = 1e-3, grid: tuple[int, int] = (128, 64),
                 n_orbits: int = 1000, seed: int = 0, eps_list=DEFAULT_EPS, t_list=DEFAULT_T,
                 keep: bool = False) -> dict:
    """Atlas, assembly, pullback, closed projection and section extraction.

    When ``epsilon`` or ``t`` is missing, both are picked from the feasibility region computed with
    the measured ``H``.  Failures raise :class:`PipelineError` with codes 3 (``||d xi_t|| >= 1``),
    4 (``min eta(X) <= 0``) and 5 (orbit non-return).
    """
    from .spectra import feasibility, pick_admissible

    report = {"theta": float(theta), "amplitude": float(amplitude), "grid": list(grid)}
    if epsilon is None or t is None:
        ledger = measured_H(flow, eps_list, t_list, theta, amplitude, seed=seed)
        region = feasibility(flow.splitting.as_spec(theta), ledger["H"], list(eps_list))
        report["H"] = ledger["H"]
        report["feasible_rows"] = region.admissible().tolist()
        try:
            epsilon, t = pick_admissible(region)
        except ValueError as exc:
            raise PipelineError(str(exc), 3, report) from exc
    report["epsilon"] = float(epsilon)
    report["t"] = float(t)
    geo = GridGeometry.mapping_torus(flow.A, grid[0], grid[1])
    atlas = build_atlas(flow, epsilon, theta=theta, amplitude=amplitude)
    probe = np.random.default_rng(seed).uniform(size=(4000, flow.n))
    contract = xi0_contract(atlas, probe)
    atlas.constants.update(contract["boxes"])
    report["C"] = contract["C"]
    _, dxi0 = assemble_xi0(atlas, geo)
    report["norm_d_xi0"] = form_norm(dxi0)
    xi_t, dxi_t = pullback_xi(atlas, geo, t)
    report["norm_d_xi_t"] = form_norm(dxi_t)
    X = flow.generator(geo.points())
    report["max_xi_t_X_deviation"] = float(np.max(np.abs(
        np.sum(np.moveaxis(xi_t.components, 0, -1) * X, axis=-1) - 1)))
    report["section_found"] = False
    try:
        if report["norm_d_xi_t"] >= 1:
            report["bound_curve"] = _bound_curve(atlas, geo, sorted(set(t_list) | {float(t)}))
        eta, verdict = finalize_eta(xi_t, flow, report["norm_d_xi_t"])
        report.update({k: v for k, v in verdict.items() if k != "potential"})
        section = extract_section(eta, flow, n_orbits=n_orbits, seed=seed, potential=verdict["potential"])
    except PipelineError as exc:
        exc.report = {**report, **{k: v for k, v in (exc.report or {}).items() if k != "potential"}}
        raise
    rate = np.array([verdict["min_eta_X"], verdict["max_eta_X"]]) / section.period
    rt = section.return_times
    report.update({
        "period": section.period,
        "return_time_min": float(rt.min()),
        "return_time_max": float(rt.max()),
        "return_time_bracket": [float(1 / rate[1]), float(1 / rate[0])],
        "n_orbits": int(n_orbits),
        "section_found": bool(np.all(np.isfinite(rt)) and rt.min() > 0),
    })
    if keep:
        report["_objects"] = {"atlas": atlas, "eta": eta, "section": section, "geometry": geo}
    return report
