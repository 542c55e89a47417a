"""Suspension flows of hyperbolic toral automorphisms.

Points of the mapping torus ``T^d x [0, 1] / (x, 1) ~ (A x, 0)`` are arrays ``(..., d + 1)`` with
the fibre coordinates first and the suspension coordinate ``s`` last.  Tangent vectors use the
same chart frame; crossing the seam changes chart by ``blockdiag(A, 1)``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .spectra import HyperbolicSpec

__all__ = [
    "FlowError",
    "FourierTimeChange",
    "InvariantSplitting",
    "MetricData",
    "SuspensionFlow",
    "GrowthReport",
    "build_suspension",
    "flow_from_json",
    "time_t_map",
    "flow_jacobian",
    "tangent_map",
    "adapted_metric",
    "wedge_area",
    "wedge_growth_check",
    "int_matrix_power",
]


class FlowError(ValueError):
    pass


def int_matrix_power(A: np.ndarray, A_inv: np.ndarray, k: int) -> np.ndarray:
    return np.linalg.matrix_power(A if k >= 0 else A_inv, abs(int(k)))


@dataclass(frozen=True)
class FourierTimeChange:
    """``r(x, s) = 1 + sum_j a_j sin^2(pi s) cos(2 pi (k_j . x + m_j s))``.

    The ``sin^2`` envelope makes every term vanish to second order at the seam, so ``r`` is
    compatible with the gluing for any integer matrix.
    """

    terms: tuple

    def __post_init__(self):
        total = 0.0
        for term in self.terms:
            if set(term) != {"amplitude", "k", "m"}:
                raise FlowError(f"time-change term needs amplitude, k, m: {term}")
            total += abs(float(term["amplitude"]))
        if total >= 1.0:
            raise FlowError("time change must stay positive (sum of |amplitude| < 1)")

    def _parts(self, p):
        x, s = p[..., :-1], p[..., -1]
        env = np.sin(np.pi * s) ** 2
        denv = np.pi * np.sin(2 * np.pi * s)
        return x, s, env, denv

    def __call__(self, p: np.ndarray) -> np.ndarray:
        x, s, env, _ = self._parts(np.asarray(p, dtype=float))
        out = np.ones_like(s)
        for term in self.terms:
            arg = 2 * np.pi * (x @ np.asarray(term["k"], dtype=float) + term["m"] * s)
            out = out + term["amplitude"] * env * np.cos(arg)
        return out

    def gradient(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        x, s, env, denv = self._parts(p)
        out = np.zeros(p.shape)
        for term in self.terms:
            k = np.asarray(term["k"], dtype=float)
            arg = 2 * np.pi * (x @ k + term["m"] * s)
            a = term["amplitude"]
            out[..., :-1] += (-a * env * np.sin(arg) * 2 * np.pi)[..., None] * k
            out[..., -1] += a * (denv * np.cos(arg) - env * np.sin(arg) * 2 * np.pi * term["m"])
        return out

    def to_json(self):
        return {"fourier": [dict(t) for t in self.terms]}


@dataclass(frozen=True)
class InvariantSplitting:
    """Constant eigenframes of ``A`` and the derived rates.

    ``frame`` has the stable columns first; ``block = frame^-1 A frame`` is block diagonal
    (1x1 real eigenvalues, 2x2 rotation-scaling blocks for complex pairs).
    """

    frame: np.ndarray
    block: np.ndarray
    moduli: np.ndarray
    n_s: int
    n_u: int
    c: float

    @property
    def stable_frame(self) -> np.ndarray:
        return self.frame[:, : self.n_s]

    @property
    def unstable_frame(self) -> np.ndarray:
        return self.frame[:, self.n_s:]

    @property
    def mu_minus(self) -> float:
        return float(self.moduli[: self.n_s].min())

    @property
    def mu_plus(self) -> float:
        return float(self.moduli[: self.n_s].max())

    @property
    def lambda_minus(self) -> float:
        return float(self.moduli[self.n_s:].min())

    @property
    def lambda_plus(self) -> float:
        return float(self.moduli[self.n_s:].max())

    @property
    def conditioning(self) -> float:
        return float(np.linalg.cond(self.frame))

    def as_spec(self, theta: float, alpha: float | None = None, c: float | None = None) -> HyperbolicSpec:
        return HyperbolicSpec(self.mu_minus, self.mu_plus, self.lambda_minus, self.lambda_plus,
                              self.c if c is None else c, self.n_s, self.n_u, theta, alpha)


def _splitting(A: np.ndarray) -> InvariantSplitting:
    vals, vecs = np.linalg.eig(A.astype(float))
    mods = np.abs(vals)
    if np.any(np.abs(mods - 1.0) < 1e-9):
        raise FlowError("A has an eigenvalue on the unit circle (not hyperbolic)")
    order = np.argsort(mods, kind="stable")
    cols, blocks, moduli = [], [], []
    used = np.zeros(len(vals), dtype=bool)
    for i in order:
        if used[i]:
            continue
        lam, v = vals[i], vecs[:, i]
        if abs(lam.imag) < 1e-12:
            used[i] = True
            v = np.real(v)
            cols.append([v / np.linalg.norm(v)])
            blocks.append(np.array([[lam.real]]))
            moduli.append(abs(lam.real))
        else:
            j = next(j for j in order if not used[j] and j != i and abs(vals[j] - np.conj(lam)) < 1e-9)
            used[i] = used[j] = True
            if lam.imag < 0:
                lam, v = np.conj(lam), np.conj(v)
            # A (u - i w) = (a + i b)(u - i w) with v = u + i w conjugated gives a real block
            u, w = np.real(v), np.imag(v)
            scale = np.linalg.norm(u)
            cols.append([u / scale, w / scale])
            a, b = lam.real, lam.imag
            blocks.append(np.array([[a, b], [-b, a]]))
            moduli += [abs(lam)] * 2
    V = np.column_stack([c for group in cols for c in group])
    if np.linalg.cond(V) > 1e8:
        raise FlowError("A is not diagonalizable (Jordan blocks are unsupported)")
    Lam = np.zeros_like(A, dtype=float)
    pos = 0
    for b in blocks:
        m = b.shape[0]
        Lam[pos:pos + m, pos:pos + m] = b
        pos += m
    if not np.allclose(V @ Lam, A @ V, atol=1e-9 * (1 + np.abs(A).max())):
        raise FlowError("eigen-decomposition failed")
    moduli = np.array(moduli)
    n_s = int(np.sum(moduli < 1))
    mu_m, lam_p = moduli[:n_s].min(), moduli[n_s:].max()
    # chart-metric envelope constant: frame conditioning times one step of slack for the
    # integer jumps of the suspension coordinate
    c = float(np.linalg.cond(V) * max(1.0 / mu_m, lam_p))
    return InvariantSplitting(V, Lam, moduli, n_s, len(moduli) - n_s, c)


@dataclass(frozen=True)
class MetricData:
    """Adapted metric ``g_s = V^-T |Lambda|^(2 s) V^-1`` on fibres, ``ds`` unit and orthogonal.

    ``phi`` is the density of the adapted volume against the chart volume; ``b_minus`` and
    ``b_plus`` bound ``||v||' / ||v||``.
    """

    frame: np.ndarray
    moduli: np.ndarray
    phi: float
    L: float
    b_minus: float
    b_plus: float

    @property
    def b(self) -> float:
        return self.b_plus / self.b_minus

    def sqrt_gram(self, s) -> np.ndarray:
        """``G^(1/2)``-like factor ``P`` with ``g = P^T P``; shape ``(..., n, n)``."""
        s = np.asarray(s, dtype=float)
        d = len(self.moduli)
        Vinv = np.linalg.inv(self.frame)
        scale = self.moduli ** s[..., None]
        out = np.zeros(s.shape + (d + 1, d + 1))
        out[..., :d, :d] = scale[..., :, None] * Vinv
        out[..., d, d] = 1.0
        return out

    def gram(self, points) -> np.ndarray:
        P = self.sqrt_gram(np.asarray(points)[..., -1])
        return np.swapaxes(P, -1, -2) @ P

    def norm(self, points, v) -> np.ndarray:
        P = self.sqrt_gram(np.asarray(points)[..., -1])
        return np.linalg.norm(np.einsum("...ij,...j->...i", P, v), axis=-1)

    def density(self, points) -> np.ndarray:
        return np.full(np.asarray(points).shape[:-1], self.phi)


@dataclass(frozen=True)
class SuspensionFlow:
    A: np.ndarray
    time_change: FourierTimeChange | None = None
    splitting: InvariantSplitting = field(init=False, compare=False)
    metric: MetricData = field(init=False, compare=False)
    A_inv: np.ndarray = field(init=False, compare=False)

    def __post_init__(self):
        A = np.asarray(self.A)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 2:
            raise FlowError("A must be a square matrix of size >= 2")
        if not np.all(np.equal(np.mod(A, 1), 0)):
            raise FlowError("A must be an integer matrix")
        A = A.astype(np.int64)
        if abs(round(np.linalg.det(A))) != 1 or abs(abs(np.linalg.det(A)) - 1) > 1e-9:
            raise FlowError("A must be unimodular")
        A_inv = np.rint(np.linalg.inv(A)).astype(np.int64)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "A_inv", A_inv)
        object.__setattr__(self, "splitting", _splitting(A))
        object.__setattr__(self, "metric", _adapted(self.splitting))

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.d + 1

    @property
    def unit_roof(self) -> bool:
        return self.time_change is None

    def roof(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.ones(p.shape[:-1]) if self.time_change is None else self.time_change(p)

    def generator(self, p) -> np.ndarray:
        """The vector field ``X = (1 / r) d/ds``."""
        p = np.asarray(p, dtype=float)
        out = np.zeros(p.shape)
        out[..., -1] = 1.0 / self.roof(p)
        return out

    def power(self, k: int) -> np.ndarray:
        return int_matrix_power(self.A, self.A_inv, k)

    def to_json(self) -> dict:
        return {"matrix": self.A.tolist(),
                "time_change": "unit" if self.time_change is None else self.time_change.to_json()}


def _adapted(split: InvariantSplitting) -> MetricData:
    Vinv = np.linalg.inv(split.frame)
    phi = 1.0 / abs(np.linalg.det(split.frame))
    lo, hi = 1.0, 1.0
    for s in np.linspace(0.0, 1.0, 65):
        sv = np.linalg.svd(split.moduli[:, None] ** s * Vinv, compute_uv=False)
        lo, hi = min(lo, sv.min()), max(hi, sv.max())
    return MetricData(split.frame, split.moduli, phi, 1.0, float(lo), float(hi))


def build_suspension(A, time_change: FourierTimeChange | None = None) -> SuspensionFlow:
    return SuspensionFlow(np.asarray(A), time_change)


def flow_from_json(obj) -> SuspensionFlow:
    """``{"matrix": [[...]], "time_change": "unit" | {"fourier": [{amplitude, k, m}, ...]}}``."""
    if isinstance(obj, str):
        obj = json.loads(obj)
    if set(obj) - {"matrix", "time_change"} or "matrix" not in obj:
        raise FlowError("flow JSON needs 'matrix' and optional 'time_change'")
    tc = obj.get("time_change", "unit")
    if tc == "unit":
        change = None
    elif isinstance(tc, dict) and set(tc) == {"fourier"}:
        change = FourierTimeChange(tuple(dict(t) for t in tc["fourier"])) if tc["fourier"] else None
    else:
        raise FlowError(f"unknown time_change {tc!r}")
    return build_suspension(np.array(obj["matrix"]), change)


# ---------------------------------------------------------------- orbits

def _apply_powers(flow: SuspensionFlow, x: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for kk in np.unique(k):
        sel = k == kk
        out[sel] = x[sel] @ flow.power(int(kk)).T.astype(float)
    return out


def _unit_flow(flow, p, t):
    p = np.asarray(p, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), p.shape[:-1])
    u = p[..., -1] + t
    k = np.floor(u).astype(np.int64)
    x = _apply_powers(flow, p[..., :-1].reshape(-1, flow.d), k.ravel()).reshape(p[..., :-1].shape)
    out = np.empty_like(p)
    out[..., :-1] = np.mod(x, 1.0)
    out[..., -1] = u - k
    return out, k


def _reparam_rhs(flow, x0):
    d = flow.d
    m = x0.shape[0]

    def rhs(_, y):
        S = y[:m]
        a = y[m:m + m * d].reshape(m, d)
        b = y[m + m * d:]
        k = np.floor(S).astype(np.int64)
        xk = _apply_powers(flow, x0, k)
        p = np.concatenate([np.mod(xk, 1.0), (S - k)[:, None]], axis=1)
        r = flow.time_change(p)
        grad = flow.time_change.gradient(p)
        # d/dx of 1/r(A^k x, s) in the initial chart: row vector grad_x r . A^k
        gx = np.empty_like(x0)
        for kk in np.unique(k):
            sel = k == kk
            gx[sel] = grad[sel, :-1] @ flow.power(int(kk)).astype(float)
        gx /= -r[:, None] ** 2
        gs = -grad[:, -1] / r ** 2
        return np.concatenate([1.0 / r, (gx + gs[:, None] * a).ravel(), gs * b])

    return rhs


def _reparam_flow(flow, p, t, rtol=1e-11, atol=1e-12):
    p = np.asarray(p, dtype=float)
    shape = p.shape[:-1]
    flat = p.reshape(-1, flow.n)
    tt = np.broadcast_to(np.asarray(t, dtype=float), shape).ravel()
    out = np.empty_like(flat)
    jac = np.empty((flat.shape[0], flow.n, flow.n))
    for tv in np.unique(tt):
        sel = np.nonzero(tt == tv)[0]
        x0 = flat[sel, :-1]
        m = len(sel)
        y0 = np.concatenate([flat[sel, -1], np.zeros(m * flow.d), np.ones(m)])
        if tv == 0:
            y = y0
        else:
            sol = solve_ivp(_reparam_rhs(flow, x0), (0.0, tv), y0, method="RK45", rtol=rtol, atol=atol)
            if not sol.success:
                raise FlowError(f"orbit integration failed: {sol.message}")
            y = sol.y[:, -1]
        S = y[:m]
        a = y[m:m + m * flow.d].reshape(m, flow.d)
        b = y[m + m * flow.d:]
        k = np.floor(S).astype(np.int64)
        out[sel, :-1] = np.mod(_apply_powers(flow, x0, k), 1.0)
        out[sel, -1] = S - k
        for row, i in enumerate(sel):
            J = np.zeros((flow.n, flow.n))
            J[:-1, :-1] = flow.power(int(k[row]))
            J[-1, :-1] = a[row]
            J[-1, -1] = b[row]
            jac[i] = J
    return out.reshape(p.shape), jac.reshape(shape + (flow.n, flow.n))


def time_t_map(flow: SuspensionFlow, t, p) -> np.ndarray:
    """``f_t(p)``; exact piecewise-affine for the unit roof, integrated otherwise."""
    if flow.unit_roof:
        return _unit_flow(flow, p, t)[0]
    return _reparam_flow(flow, p, t)[0]


def flow_jacobian(flow: SuspensionFlow, t, p) -> tuple[np.ndarray, np.ndarray]:
    """``(f_t(p), D f_t(p))`` in chart coordinates."""
    if flow.unit_roof:
        img, k = _unit_flow(flow, p, t)
        J = np.zeros(img.shape + (flow.n,))
        J[..., -1, -1] = 1.0
        flat = J.reshape(-1, flow.n, flow.n)
        kf = k.ravel()
        for kk in np.unique(kf):
            flat[kf == kk, :-1, :-1] = flow.power(int(kk))
        return img, flat.reshape(J.shape)
    return _reparam_flow(flow, p, t)


def tangent_map(flow: SuspensionFlow, t, p, v) -> np.ndarray:
    _, J = flow_jacobian(flow, t, p)
    return np.einsum("...ij,...j->...i", J, np.asarray(v, dtype=float))


def adapted_metric(flow: SuspensionFlow) -> tuple[MetricData, callable]:
    """The adapted metric and a function returning an orthonormal frame ``(..., n, n)`` (columns)."""
    met = flow.metric

    def frame(points):
        P = met.sqrt_gram(np.asarray(points)[..., -1])
        return np.linalg.inv(P)

    return met, frame


# ---------------------------------------------------------------- wedge growth

def wedge_area(gram: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``||v ^ w||`` in the inner product ``gram``."""
    gv = np.einsum("...ij,...j->...i", gram, v)
    gw = np.einsum("...ij,...j->...i", gram, w)
    vv = np.sum(v * gv, -1)
    ww = np.sum(w * gw, -1)
    vw = np.sum(v * gw, -1)
    return np.sqrt(np.maximum(vv * ww - vw * vw, 0.0))


def _bundle_power(split: InvariantSplitting, k: np.ndarray, vec: np.ndarray, stable: bool) -> np.ndarray:
    """``A^k vec`` for ``vec`` in one bundle, computed blockwise in the eigenframe."""
    coords = np.linalg.solve(split.frame, vec[:-1])
    if stable:
        coords[split.n_s:] = 0.0
    else:
        coords[: split.n_s] = 0.0
    out = np.zeros(k.shape + vec.shape)
    for kk in np.unique(k):
        out[k == kk, :-1] = split.frame @ (np.linalg.matrix_power(split.block, int(kk)) @ coords)
    return out


@dataclass
class GrowthReport:
    t: np.ndarray
    measured: np.ndarray
    bound: np.ndarray
    exponent: float
    predicted_exponent: float

    @property
    def holds(self) -> bool:
        return bool(np.all(self.measured <= self.bound))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "measured", "bound"])
        for row in zip(self.t, self.measured, self.bound):
            wr.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


def wedge_growth_check(flow: SuspensionFlow, v, w, t_list, point=None, rtol: float = 1e-9,
                       tol: float = 1e-8) -> GrowthReport:
    """Backward growth of ``||T f_-t (v ^ w)||'`` against ``L (b c)^(n-3) q^t ||v ^ w||'``.

    ``v`` must lie in the strong stable and ``w`` in the strong unstable bundle (fibre vectors
    padded with a zero ``s`` entry).  ``q = mu_+^(n_s - 1) lambda_+^(n_u - 1)``; the bound uses the
    adapted-metric constants (``c = 1``, so ``(b c)^(n-3) = b^(n-3)``).
    """
    if not flow.unit_roof:
        raise FlowError("wedge growth bound needs the volume-preserving unit roof")
    split, met = flow.splitting, flow.metric
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    for vec, basis, name in ((v, split.stable_frame, "stable"), (w, split.unstable_frame, "unstable")):
        if vec.shape != (flow.n,) or abs(vec[-1]) > tol:
            raise FlowError(f"{name} vector must be a fibre vector of length {flow.n}")
        coef, *_ = np.linalg.lstsq(basis, vec[:-1], rcond=None)
        if np.linalg.norm(basis @ coef - vec[:-1]) > tol * (1 + np.linalg.norm(vec)):
            raise FlowError(f"vector not in the {name} bundle")
    p = np.array([0.0] * flow.d + [0.5]) if point is None else np.asarray(point, dtype=float)
    t = np.asarray(t_list, dtype=float)
    pts = np.broadcast_to(p, t.shape + (flow.n,))
    img, k = _unit_flow(flow, pts, -t)
    area0 = wedge_area(met.gram(p), v, w)
    # propagate in eigen-coordinates restricted to each bundle: the integer matrix A^-k would
    # amplify roundoff off the bundle by lambda^k
    vk = _bundle_power(split, k, v, stable=True)
    wk = _bundle_power(split, k, w, stable=False)
    measured = wedge_area(met.gram(img), vk, wk) / area0
    q = np.log(split.mu_plus) * (split.n_s - 1) + np.log(split.lambda_plus) * (split.n_u - 1)
    bound = met.L * (met.b * split.c) ** (flow.n - 3) * np.exp(q * t) * (1 + rtol)
    exponent = float(np.polyfit(t, np.log(measured), 1)[0]) if len(t) > 1 else float("nan")
    return GrowthReport(t, measured, bound, exponent, float(q))
