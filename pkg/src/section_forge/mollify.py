"""The standard mollifier, lattice convolution and Hölder-rate measurements."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, signal, special

from .grid import GridGeometry, GridScalarField, periodic_delta

__all__ = [
    "ResolutionError",
    "MollifierKernel",
    "make_kernel",
    "kernel_value",
    "kernel_weights",
    "mollify",
    "max_gradient",
    "holder_seminorm",
    "weierstrass",
    "weierstrass_field",
    "RateReport",
    "verify_rates",
]


class ResolutionError(ValueError):
    """The kernel radius is too small for the lattice, or nothing survives the shrinking."""


def _bump(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(1.0 / (r[inside] ** 2 - 1.0))
    return out


@lru_cache(maxsize=None)
def _unit_constants(n: int) -> tuple[float, float]:
    """(A0, ||d eta||_L1) for the unit-radius mollifier in R^n, by radial quadrature."""
    sphere = 2.0 * math.pi ** (n / 2) / special.gamma(n / 2)
    mass, _ = integrate.quad(lambda r: r ** (n - 1) * math.exp(1.0 / (r * r - 1.0)), 0.0, 1.0,
                             epsabs=1e-14, epsrel=1e-13, limit=200)
    A0 = 1.0 / (sphere * mass)
    # |d/dr bump| = bump * 2r / (1 - r^2)^2 ; angular factor: integral of |omega_1| over the sphere
    radial, _ = integrate.quad(
        lambda r: r ** (n - 1) * math.exp(1.0 / (r * r - 1.0)) * 2.0 * r / (1.0 - r * r) ** 2,
        0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
    angular = 2.0 * math.pi ** ((n - 1) / 2) / special.gamma((n + 1) / 2)
    return A0, A0 * radial * angular


@dataclass(frozen=True)
class MollifierKernel:
    dimension: int
    epsilon: float
    normalization: float
    l1_gradient_norm: float  # of the unit-radius kernel; scales as 1/epsilon


def make_kernel(dimension: int, epsilon: float) -> MollifierKernel:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    A0, dl1 = _unit_constants(int(dimension))
    return MollifierKernel(int(dimension), float(epsilon), A0, dl1)


def kernel_value(x, epsilon: float, kernel: MollifierKernel | None = None) -> np.ndarray:
    """eta_eps(x) = eps^-n A0 exp(1/(|x/eps|^2 - 1)) inside the ball, 0 outside.

    ``x`` has shape ``(..., n)``; a 1-D kernel also accepts plain scalars/arrays.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=float)
    if kernel is None:
        n = 1 if x.ndim == 0 else x.shape[-1]
        kernel = make_kernel(n, epsilon)
    n = kernel.dimension
    if n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        r = np.abs(x) / epsilon
    else:
        r = np.linalg.norm(x, axis=-1) / epsilon
    return kernel.normalization * _bump(r) / epsilon ** n


def kernel_weights(spacing, epsilon: float) -> np.ndarray:
    """Sampled kernel on lattice offsets, renormalised to sum exactly one."""
    spacing = tuple(float(h) for h in spacing)
    if any(epsilon < 2 * h for h in spacing):
        raise ResolutionError(f"epsilon={epsilon} below twice the lattice spacing {spacing}")
    radii = [int(math.floor(epsilon / h)) for h in spacing]
    axes = [np.arange(-r, r + 1) * h for r, h in zip(radii, spacing)]
    offs = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    w = _bump(np.linalg.norm(offs, axis=-1) / epsilon)
    return w / w.sum()


def mollify(u: GridScalarField, epsilon: float) -> GridScalarField:
    """Convolve ``u`` with the sampled mollifier.

    Periodic axes wrap; non-periodic axes lose ``floor(eps/h)`` samples at each end.
    """
    geo = u.geometry
    w = kernel_weights(geo.spacing, epsilon)
    radii = [(s - 1) // 2 for s in w.shape]
    pad = [(r, r) if p else (0, 0) for r, p in zip(radii, geo.periodic)]
    data = np.pad(u.samples, pad, mode="wrap")
    if any(data.shape[i] < w.shape[i] for i in range(geo.ndim)):
        raise ResolutionError("shrunken domain is empty")
    if w.size <= 64 or u.samples.size <= 4096:
        from scipy import ndimage

        full = ndimage.correlate(data, w, mode="constant")
        sl = tuple(slice(r, data.shape[i] - r) for i, r in enumerate(radii))
        out = full[sl]
    else:
        out = signal.fftconvolve(data, w, mode="valid")  # w is even
    new_dims = out.shape
    origin = tuple(o if p else o + r * h for o, p, r, h in zip(geo.origin, geo.periodic, radii, geo.spacing))
    new_geo = GridGeometry(tuple(new_dims), geo.spacing, origin, geo.periodic)
    return GridScalarField(new_geo, out)


def _diff(a: np.ndarray, axis: int, h: float, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(a, -1, axis) - np.roll(a, 1, axis)) / (2 * h)
    return np.gradient(a, h, axis=axis, edge_order=2)


def max_gradient(u: GridScalarField) -> float:
    """Largest sup-norm over the partial derivatives (central differences)."""
    g = u.geometry
    return max(float(np.max(np.abs(_diff(u.samples, i, g.spacing[i], g.periodic[i]))))
               for i in range(g.ndim))


def holder_seminorm(u: GridScalarField, theta: float, n_random: int = 10_000,
                    rng: np.random.Generator | None = None, return_parts: bool = False):
    """Lower estimate of ``||u||_{C^theta}`` = sup norm + best Hölder constant.

    The quotient is maximised over every lattice pair at dyadic offsets along each axis and
    over ``n_random`` random pairs.  Sampling only ever under-estimates the true norm.
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    rng = np.random.default_rng(0) if rng is None else rng
    g = u.geometry
    a = u.samples
    best = 0.0
    for ax in range(g.ndim):
        n = g.dims[ax]
        m = 1
        limit = n // 2 if g.periodic[ax] else n - 1
        while m <= max(limit, 1) and m < n:
            if g.periodic[ax]:
                diff = np.abs(np.roll(a, -m, ax) - a)
            else:
                diff = np.abs(np.take(a, range(m, n), ax) - np.take(a, range(0, n - m), ax))
            best = max(best, float(diff.max()) / (m * g.spacing[ax]) ** theta)
            m *= 2
    if n_random > 0 and a.size > 1:
        flat = a.ravel()
        i = rng.integers(0, a.size, n_random)
        j = rng.integers(0, a.size, n_random)
        pi = np.stack(np.unravel_index(i, g.dims), -1)
        pj = np.stack(np.unravel_index(j, g.dims), -1)
        d = (pi - pj) * np.asarray(g.spacing)
        for ax in range(g.ndim):
            if g.periodic[ax]:
                d[:, ax] = periodic_delta(d[:, ax], g.extent(ax))
        dist = np.linalg.norm(d, axis=1)
        ok = dist > 0
        if ok.any():
            best = max(best, float(np.max(np.abs(flat[i[ok]] - flat[j[ok]]) / dist[ok] ** theta)))
    sup = u.sup
    if return_parts:
        return sup, best
    return sup + best


def weierstrass(x, theta: float, K: int) -> np.ndarray:
    """``sum_{k=0}^{K} 2^(-k theta) cos(2^k pi x)``, Hölder of exponent theta uniformly in K."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for k in range(K + 1):
        out += 2.0 ** (-k * theta) * np.cos(2.0 ** k * np.pi * x)
    return out


def weierstrass_terms(spacing: float) -> int:
    """Smallest K with ``2^-K < spacing`` (so ``2^(-K theta) < spacing^theta``)."""
    return int(math.floor(math.log2(1.0 / spacing))) + 1


def weierstrass_field(n_samples: int, theta: float, length: float = 2.0) -> GridScalarField:
    """W_theta on a periodic 1-D lattice over ``[0, length)``; ``length`` must be even."""
    geo = GridGeometry.periodic_box((n_samples,), (length,))
    K = weierstrass_terms(geo.spacing[0])
    return GridScalarField(geo, weierstrass(geo.axis_coords(0), theta, K))


@dataclass
class RateReport:
    epsilon: np.ndarray
    sup_error: np.ndarray
    max_grad: np.ndarray
    error_slope: float
    grad_slope: float
    error_residual: float
    grad_residual: float
    holder_norm: float
    l1_gradient_norm: float
    error_bound_ok: np.ndarray
    grad_bound_ok: np.ndarray

    @property
    def bounds_hold(self) -> bool:
        return bool(self.error_bound_ok.all() and self.grad_bound_ok.all())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "sup_error", "max_grad"])
        for row in zip(self.epsilon, self.sup_error, self.max_grad):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _fit(x, y):
    coef, res, *_ = np.polyfit(x, y, 1, full=True)
    resid = float(np.sqrt(res[0] / len(x))) if len(res) else 0.0
    return float(coef[0]), resid


def verify_rates(u: GridScalarField, theta: float, eps_list, tol: float = 1e-3,
                 holder_norm: float | None = None) -> RateReport:
    """Fit log sup|u^eps - u| and log ||du^eps|| against log eps and test the absolute bounds.

    Bounds: ``sup|u^eps - u| <= ||u||_{C^theta} eps^theta`` and
    ``||du^eps|| <= ||d eta||_L1 ||u||_{C^theta} eps^(theta-1)``, each up to a factor ``1 + tol``.
    """
    eps = np.sort(np.asarray(eps_list, dtype=float))
    if len(eps) < 4:
        raise ValueError("need at least four epsilon values")
    if math.log10(eps[-1] / eps[0]) < 1.5:
        raise ValueError("epsilon values must span at least 1.5 decades")
    norm = holder_seminorm(u, theta) if holder_norm is None else holder_norm
    dl1 = make_kernel(u.geometry.ndim, 1.0).l1_gradient_norm
    errs, grads = [], []
    for e in eps:
        ue = mollify(u, e)
        errs.append(float(np.max(np.abs(ue.samples - _restrict(u, ue.geometry)))))
        grads.append(max_gradient(ue))
    errs, grads = np.array(errs), np.array(grads)
    es, er = _fit(np.log(eps), np.log(errs))
    gs, gr = _fit(np.log(eps), np.log(grads))
    return RateReport(
        epsilon=eps, sup_error=errs, max_grad=grads, error_slope=es, grad_slope=gs,
        error_residual=er, grad_residual=gr, holder_norm=norm, l1_gradient_norm=dl1,
        error_bound_ok=errs <= norm * eps ** theta * (1 + tol),
        grad_bound_ok=grads <= dl1 * norm * eps ** (theta - 1) * (1 + tol),
    )


def _restrict(u: GridScalarField, target: GridGeometry) -> np.ndarray:
    """Samples of ``u`` on the (possibly shrunken) sub-lattice ``target``."""
    g = u.geometry
    sl = []
    for ax in range(g.ndim):
        start = int(round((target.origin[ax] - g.origin[ax]) / g.spacing[ax]))
        sl.append(slice(start, start + target.dims[ax]))
    return u.samples[tuple(sl)]
