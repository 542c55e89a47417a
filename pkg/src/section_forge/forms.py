"""Differential forms sampled on chart lattices.

A degree-k form stores one sample lattice per increasing multi-index ``I`` of length k,
ordered as :func:`itertools.combinations` orders them.  Derivatives are finite differences
(centred on periodic axes, one-sided at the ends of open axes); on a twisted lattice the
neighbours across the seam are pulled back through the gluing map.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import lru_cache
from math import comb
from typing import Callable, NamedTuple

import numpy as np
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator, cg

from .grid import GridGeometry, twist_index_maps

__all__ = [
    "DiscreteKForm",
    "ContractibleCover",
    "Box",
    "NormEstimate",
    "multi_indices",
    "compound",
    "pullback_components",
    "wedge_components",
    "interior_components",
    "pointwise_norm",
    "form_norm",
    "form_norm_estimate",
    "exterior_derivative",
    "wedge",
    "sample_form",
    "pullback",
    "homotopy_operator",
    "cylinder_ends",
    "simpson_weights",
    "cone_homotopy",
    "closed_projection",
    "axis_periods",
    "random_smooth_form",
]

Metric = Callable[[np.ndarray], np.ndarray]


@lru_cache(maxsize=None)
def multi_indices(n: int, k: int) -> tuple[tuple[int, ...], ...]:
    return tuple(itertools.combinations(range(n), k))


@lru_cache(maxsize=None)
def _index_of(n: int, k: int) -> dict:
    return {I: a for a, I in enumerate(multi_indices(n, k))}


@dataclass(frozen=True)
class DiscreteKForm:
    degree: int
    geometry: GridGeometry
    components: np.ndarray
    metric: Metric | np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        n = self.geometry.ndim
        if not 0 <= self.degree <= n:
            raise ValueError(f"degree {self.degree} impossible in dimension {n}")
        comps = np.asarray(self.components)
        expected = (comb(n, self.degree),) + self.geometry.dims
        if comps.shape != expected:
            raise ValueError(f"components have shape {comps.shape}, expected {expected}")
        object.__setattr__(self, "components", comps)

    @property
    def n(self) -> int:
        return self.geometry.ndim

    @property
    def indices(self):
        return multi_indices(self.n, self.degree)

    def component(self, I) -> np.ndarray:
        return self.components[_index_of(self.n, self.degree)[tuple(I)]]

    def with_components(self, comps) -> "DiscreteKForm":
        return replace(self, components=comps)

    def __add__(self, other: "DiscreteKForm") -> "DiscreteKForm":
        return self.with_components(self.components + other.components)

    def __sub__(self, other: "DiscreteKForm") -> "DiscreteKForm":
        return self.with_components(self.components - other.components)

    def __mul__(self, a) -> "DiscreteKForm":
        return self.with_components(a * self.components)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, degree, geometry, metric=None) -> "DiscreteKForm":
        return cls(degree, geometry, np.zeros((comb(geometry.ndim, degree),) + geometry.dims), metric)

    @classmethod
    def from_functions(cls, degree, geometry, fns: dict, metric=None) -> "DiscreteKForm":
        """Build from ``{multi_index: f(*coords)}``; missing components are zero."""
        form = cls.zeros(degree, geometry, metric)
        coords = np.moveaxis(geometry.points(), -1, 0)
        lookup = _index_of(geometry.ndim, degree)
        comps = form.components.copy()
        for I, fn in fns.items():
            comps[lookup[tuple(I)]] = np.broadcast_to(fn(*coords), geometry.dims)
        return form.with_components(comps)

    def gram(self, points=None) -> np.ndarray | None:
        if self.metric is None:
            return None
        if callable(self.metric):
            return self.metric(self.geometry.points() if points is None else points)
        return np.asarray(self.metric)

    def to_manifest(self) -> dict:
        return {"degree": self.degree, "geometry": self.geometry.to_dict(),
                "indices": [list(I) for I in self.indices]}

    def save(self, directory) -> None:
        """One binary block per component plus ``manifest.json``."""
        import json
        from pathlib import Path

        from .grid import GridScalarField

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for I, comp in zip(self.indices, self.components):
            GridScalarField(self.geometry, comp).save(directory / ("c" + "".join(map(str, I)) if I else "c"))
        (directory / "manifest.json").write_text(json.dumps(self.to_manifest(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "DiscreteKForm":
        import json
        from pathlib import Path

        from .grid import GridScalarField

        directory = Path(directory)
        man = json.loads((directory / "manifest.json").read_text("utf-8"))
        geo = GridGeometry.from_dict(man["geometry"])
        comps = [GridScalarField.load(directory / ("c" + "".join(map(str, I)) if I else "c")).samples
                 for I in man["indices"]]
        return cls(man["degree"], geo, np.array(comps).reshape((len(comps),) + geo.dims))


# ---------------------------------------------------------------- pointwise algebra

def compound(J: np.ndarray, k: int) -> np.ndarray:
    """Matrix of the pullback ``xi -> xi(J., ..., J.)`` on component vectors of degree k.

    ``out[..., I, K] = det J[K, I]`` (rows indexed by ``K``, columns by ``I``).
    """
    J = np.asarray(J, dtype=float)
    n = J.shape[-1]
    idx = multi_indices(n, k)
    out = np.empty(J.shape[:-2] + (len(idx), len(idx)))
    if k == 0:
        out[...] = 1.0
        return out
    if k == 1:
        return np.swapaxes(J, -1, -2).copy()
    for a, I in enumerate(idx):
        for b, K in enumerate(idx):
            out[..., a, b] = np.linalg.det(J[..., list(K), :][..., :, list(I)])
    return out


def pullback_components(comps: np.ndarray, J: np.ndarray, k: int) -> np.ndarray:
    """Apply ``J^*`` to components laid out as ``(m, *points)``; ``J`` is ``(*points, n, n)`` or ``(n, n)``."""
    M = compound(J, k)
    c = np.moveaxis(comps, 0, -1)
    out = np.einsum("...ij,...j->...i", M, c)
    return np.moveaxis(out, -1, 0)


def wedge_components(a: np.ndarray, ka: int, b: np.ndarray, kb: int, n: int) -> np.ndarray:
    if ka + kb > n:
        raise ValueError("degree overflow in wedge")
    out_idx = _index_of(n, ka + kb)
    shape = np.broadcast_shapes(a.shape[1:], b.shape[1:])
    out = np.zeros((len(out_idx),) + shape, dtype=np.result_type(a, b))
    for i, I in enumerate(multi_indices(n, ka)):
        for j, J in enumerate(multi_indices(n, kb)):
            if set(I) & set(J):
                continue
            merged = I + J
            order = np.argsort(merged)
            sign = _perm_sign(order)
            out[out_idx[tuple(sorted(merged))]] += sign * a[i] * b[j]
    return out


def _perm_sign(order) -> int:
    order = list(order)
    sign = 1
    for i in range(len(order)):
        while order[i] != i:
            j = order[i]
            order[i], order[j] = order[j], order[i]
            sign = -sign
    return sign


def interior_components(v: np.ndarray, comps: np.ndarray, k: int, n: int) -> np.ndarray:
    """Contraction ``i_v xi``; ``v`` is ``(n, *points)``."""
    if k == 0:
        raise ValueError("cannot contract a 0-form")
    lower = _index_of(n, k - 1)
    shape = np.broadcast_shapes(v.shape[1:], comps.shape[1:])
    out = np.zeros((len(lower),) + shape, dtype=np.result_type(v, comps))
    for a, J in enumerate(multi_indices(n, k)):
        for pos, j in enumerate(J):
            rest = J[:pos] + J[pos + 1:]
            out[lower[rest]] += (-1) ** pos * v[j] * comps[a]
    return out


def _derivative_wedge(parts: list, comps_k: int, n: int, like) -> np.ndarray:
    """``sum_i dx_i ^ parts[i]`` where ``parts[i]`` are component stacks of degree ``comps_k``."""
    vec = np.zeros((n,) + (1,) * (like.ndim - 1), dtype=float)
    out = None
    for i in range(n):
        e = vec.copy()
        e[i] = 1.0
        term = wedge_components(e, 1, parts[i], comps_k, n)
        out = term if out is None else out + term
    return out


class NormEstimate(NamedTuple):
    value: float
    method: str


def _orthonormalise(comps, k, n, gram):
    """Components in a frame orthonormal for ``gram`` (``None`` = chart frame is orthonormal)."""
    if gram is None:
        return comps
    L = np.linalg.cholesky(gram)
    Linv_T = np.swapaxes(np.linalg.inv(L), -1, -2)
    return pullback_components(comps, Linv_T, k)


def pointwise_norm(comps: np.ndarray, k: int, n: int, gram=None, n_frames: int = 32,
                   rng: np.random.Generator | None = None) -> tuple[np.ndarray, str]:
    """Operator norm of the k-linear map at each point.

    Exact for ``k in {0, 1, 2, n-1, n}``; otherwise the maximum over coordinate frames and
    ``n_frames`` random orthonormal frames (a lower bound).
    """
    c = _orthonormalise(np.asarray(comps, dtype=float), k, n, gram)
    if k == 0:
        return np.abs(c[0]), "exact"
    if k == 1 or k == n - 1:
        return np.sqrt(np.sum(c * c, axis=0)), "exact"
    if k == n:
        return np.abs(c[0]), "exact"
    if k == 2:
        shape = c.shape[1:]
        mat = np.zeros(shape + (n, n))
        for a, (i, j) in enumerate(multi_indices(n, 2)):
            mat[..., i, j] = c[a]
            mat[..., j, i] = -c[a]
        return np.linalg.norm(mat.reshape(-1, n, n), ord=2, axis=(1, 2)).reshape(shape), "exact"
    rng = np.random.default_rng(0) if rng is None else rng
    best = np.max(np.abs(c), axis=0)
    for _ in range(n_frames):
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        vals = pullback_components(c, q, k)
        best = np.maximum(best, np.abs(vals[0]))
    return best, "sampled"


def form_norm_estimate(xi: DiscreteKForm) -> NormEstimate:
    vals, method = pointwise_norm(xi.components, xi.degree, xi.n, xi.gram())
    return NormEstimate(float(np.max(vals)), method)


def form_norm(xi: DiscreteKForm) -> float:
    """Sup over the lattice of the pointwise operator norm."""
    return form_norm_estimate(xi).value


# ---------------------------------------------------------------- differences

def _shift(comps: np.ndarray, k: int, geo: GridGeometry, axis: int, m: int) -> np.ndarray:
    """Values at lattice index ``j + m`` along ``axis`` (periodic, possibly twisted)."""
    ax = axis + 1
    out = np.roll(comps, -m, axis=ax)
    if geo.twist is None or axis != geo.ndim - 1 or m == 0:
        return out
    N = geo.dims[axis]
    d = geo.ndim - 1
    A = geo.twist.astype(float)
    G = np.eye(d + 1)
    if m > 0:
        G[:d, :d] = A
        maps = twist_index_maps(geo)
        js = range(N - m, N)
    else:
        G[:d, :d] = np.linalg.inv(A)
        maps = twist_index_maps(geo, inverse=True)
        js = range(0, -m)
    M = compound(G, k)
    for j in js:
        src = (j + m) % N
        block = comps[(slice(None),) + maps + (src,)]
        out[..., j] = np.tensordot(M, block, axes=(1, 0))
    return out


_C4 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


def _edge4(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Fourth-order derivative along an open axis (one-sided five-point stencils at the ends)."""
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[2:-2] = (a[:-4] - 8 * a[1:-3] + 8 * a[3:-1] - a[4:]) / (12 * h)
    fwd = np.array([-25, 48, -36, 16, -3]) / (12 * h)
    fwd1 = np.array([-3, -10, 18, -6, 1]) / (12 * h)
    out[0] = np.tensordot(fwd, a[:5], axes=(0, 0))
    out[1] = np.tensordot(fwd1, a[:5], axes=(0, 0))
    out[-1] = -np.tensordot(fwd, a[::-1][:5], axes=(0, 0))
    out[-2] = -np.tensordot(fwd1, a[::-1][:5], axes=(0, 0))
    return np.moveaxis(out, 0, axis)


def _partial(comps: np.ndarray, k: int, geo: GridGeometry, axis: int, order: int) -> np.ndarray:
    h = geo.spacing[axis]
    if geo.periodic[axis]:
        if order == 2:
            return (_shift(comps, k, geo, axis, 1) - _shift(comps, k, geo, axis, -1)) / (2 * h)
        acc = 0.0
        for m, w in zip((-2, -1, 1, 2), (1.0, -8.0, 8.0, -1.0)):
            acc = acc + w * _shift(comps, k, geo, axis, m)
        return acc / (12 * h)
    if geo.dims[axis] < (5 if order == 4 else 3):
        raise ValueError("open axis too short for the stencil")
    if order == 2:
        return np.gradient(comps, h, axis=axis + 1, edge_order=2)
    return _edge4(comps, h, axis + 1)


def exterior_derivative(xi: DiscreteKForm, order: int = 2) -> DiscreteKForm:
    """Finite-difference ``d``; ``order`` 2 (default) or 4."""
    n, k = xi.n, xi.degree
    if k >= n:
        raise ValueError("cannot differentiate a top-degree form")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    parts = [_partial(xi.components, k, xi.geometry, i, order) for i in range(n)]
    comps = _derivative_wedge(parts, k, n, xi.components)
    return DiscreteKForm(k + 1, xi.geometry, comps, xi.metric)


def wedge(xi: DiscreteKForm, zeta: DiscreteKForm) -> DiscreteKForm:
    if xi.geometry != zeta.geometry:
        raise ValueError("forms live on different lattices")
    comps = wedge_components(xi.components, xi.degree, zeta.components, zeta.degree, xi.n)
    return DiscreteKForm(xi.degree + zeta.degree, xi.geometry, comps, xi.metric)


# ---------------------------------------------------------------- off-lattice evaluation

def _padded(xi: DiscreteKForm) -> np.ndarray:
    geo = xi.geometry
    arr = xi.components
    # the twisted ghost layer indexes the unpadded fibre, so it goes first
    order = range(geo.ndim) if geo.twist is None else [geo.ndim - 1] + list(range(geo.ndim - 1))
    for axis in order:
        if not geo.periodic[axis]:
            continue
        ghost = _shift(arr, xi.degree, geo, axis, 1).take([geo.dims[axis] - 1], axis=axis + 1) \
            if geo.twist is not None and axis == geo.ndim - 1 else arr.take([0], axis=axis + 1)
        arr = np.concatenate([arr, ghost], axis=axis + 1)
    return arr


def sample_form(xi: DiscreteKForm, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Multilinear interpolation of every component at ``points`` (``(..., n)``).

    Periodic coordinates wrap; on a twisted lattice the last coordinate must already lie in
    the fundamental interval.
    """
    geo = xi.geometry
    pts = np.asarray(points, dtype=float)
    idx = (pts - np.asarray(geo.origin)) / np.asarray(geo.spacing)
    idx = np.moveaxis(idx, -1, 0).copy()
    for axis in range(geo.ndim):
        N = geo.dims[axis]
        if geo.periodic[axis] and not (geo.twist is not None and axis == geo.ndim - 1):
            idx[axis] = np.mod(idx[axis], N)
        else:
            hi = N if geo.periodic[axis] else N - 1
            if np.any(idx[axis] < -tol) or np.any(idx[axis] > hi + tol):
                raise ValueError(f"point outside the lattice along axis {axis}")
            idx[axis] = np.clip(idx[axis], 0, hi)
    arr = _padded(xi)
    flat = idx.reshape(geo.ndim, -1)
    out = np.stack([ndimage.map_coordinates(c, flat, order=1, mode="nearest") for c in arr])
    return out.reshape((arr.shape[0],) + pts.shape[:-1])


def pullback(mapping, xi: DiscreteKForm, target: GridGeometry | None = None) -> DiscreteKForm:
    """``(F^* xi)_p(v, ...) = xi_{F(p)}(DF v, ...)`` on the lattice ``target``.

    ``mapping(points)`` returns ``(images, jacobians)`` with shapes ``(..., n)`` and ``(..., n, n)``.
    """
    target = xi.geometry if target is None else target
    images, jac = mapping(target.points())
    vals = sample_form(xi, images)
    return DiscreteKForm(xi.degree, target, pullback_components(vals, jac, xi.degree), xi.metric)


# ---------------------------------------------------------------- homotopy operators

def simpson_weights(nodes: int, length: float = 1.0) -> np.ndarray:
    if nodes < 3 or nodes % 2 == 0:
        raise ValueError("composite Simpson needs an odd number (>= 3) of nodes")
    w = np.ones(nodes)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (length / (nodes - 1)) / 3.0


def _cylinder_split(omega: DiscreteKForm):
    n = omega.n
    k = omega.degree
    t = n - 1
    base_lookup = _index_of(n, k)
    vert = [base_lookup[I + (t,)] for I in multi_indices(n - 1, k - 1)] if k >= 1 else []
    horiz = [base_lookup[I] for I in multi_indices(n - 1, k)] if k <= n - 1 else []
    return horiz, vert


def homotopy_operator(omega: DiscreteKForm, quad_nodes: int | None = None) -> DiscreteKForm:
    """Fibre integral ``int_0^1 j_t^* eta dt`` of the ``dt``-part of a form on ``U x [0, 1]``.

    The last lattice axis is the cylinder coordinate, sampled at ``quad_nodes`` equispaced
    nodes on ``[0, 1]``; integration is composite Simpson.
    """
    geo = omega.geometry
    nodes = geo.dims[-1] if quad_nodes is None else int(quad_nodes)
    if nodes != geo.dims[-1]:
        raise ValueError("quad_nodes must match the cylinder axis resolution")
    if geo.periodic[-1] or abs(geo.origin[-1]) > 1e-14 or abs((nodes - 1) * geo.spacing[-1] - 1) > 1e-12:
        raise ValueError("last axis must sample [0, 1] including both ends")
    w = simpson_weights(nodes)
    base = geo.sub(range(geo.ndim - 1))
    if omega.degree == 0:
        raise ValueError("the homotopy operator lowers degree; 0-forms have no dt-part")
    _, vert = _cylinder_split(omega)
    sign = (-1) ** (omega.degree - 1)
    eta = sign * omega.components[vert]
    comps = np.tensordot(eta, w, axes=(-1, 0))
    return DiscreteKForm(omega.degree - 1, base, comps)


def cylinder_ends(omega: DiscreteKForm) -> tuple[DiscreteKForm, DiscreteKForm]:
    """``(j_0^* omega, j_1^* omega)``."""
    geo = omega.geometry
    base = geo.sub(range(geo.ndim - 1))
    horiz, _ = _cylinder_split(omega)
    c = omega.components[horiz]
    return (DiscreteKForm(omega.degree, base, c[..., 0]), DiscreteKForm(omega.degree, base, c[..., -1]))


# ---------------------------------------------------------------- contractible covers

@dataclass(frozen=True)
class Box:
    """Product of index intervals ``[start_i, start_i + length_i)`` (wrapping on periodic axes)."""

    start: tuple[int, ...]
    length: tuple[int, ...]

    def index_arrays(self, geo: GridGeometry):
        out = []
        for s, L, N, p in zip(self.start, self.length, geo.dims, geo.periodic):
            idx = np.arange(s, s + L)
            out.append(np.mod(idx, N) if p else idx)
        return out

    def geometry(self, geo: GridGeometry) -> GridGeometry:
        """The box as an open lattice in unwrapped chart coordinates."""
        return GridGeometry(self.length, geo.spacing,
                            tuple(o + s * h for o, s, h in zip(geo.origin, self.start, geo.spacing)),
                            (False,) * geo.ndim)

    def center(self, geo: GridGeometry) -> np.ndarray:
        return np.array([o + (s + (L - 1) / 2) * h
                         for o, s, L, h in zip(geo.origin, self.start, self.length, geo.spacing)])


@dataclass(frozen=True)
class ContractibleCover:
    boxes: tuple[Box, ...]
    overlap_tol: float = 1e-8

    @classmethod
    def regular(cls, geo: GridGeometry, divisions, overlap: int = 4) -> "ContractibleCover":
        """``divisions[i]`` boxes per axis, each extended by ``overlap`` samples on both sides."""
        per_axis = []
        for N, m, p in zip(geo.dims, divisions, geo.periodic):
            edges = np.linspace(0, N, m + 1).round().astype(int)
            spans = []
            for a, b in zip(edges[:-1], edges[1:]):
                lo, hi = a - overlap, b + overlap
                if not p:
                    lo, hi = max(lo, 0), min(hi, N)
                spans.append((lo, hi - lo))
            per_axis.append(spans)
        boxes = tuple(Box(tuple(s for s, _ in combo), tuple(L for _, L in combo))
                      for combo in itertools.product(*per_axis))
        return cls(boxes)

    def check_covers(self, geo: GridGeometry) -> None:
        hit = np.zeros(geo.dims, dtype=bool)
        for box in self.boxes:
            if any(L > N for L, N in zip(box.length, geo.dims)):
                raise ValueError("box longer than the lattice (not contractible)")
            hit[np.ix_(*box.index_arrays(geo))] = True
        if not hit.all():
            raise ValueError("cover misses lattice points")


def cone_homotopy(xi: DiscreteKForm, box: Box, nodes: int = 17) -> DiscreteKForm:
    """``H(xi)_p = int_0^1 t^(k-1) (i_{p - p0} xi)(p0 + t (p - p0)) dt`` on the box lattice."""
    if xi.degree == 0:
        raise ValueError("cone homotopy needs degree >= 1")
    geo = xi.geometry
    bgeo = box.geometry(geo)
    p0 = box.center(geo)
    pts = bgeo.points()
    rel = pts - p0
    w = simpson_weights(nodes)
    acc = 0.0
    for t, wt in zip(np.linspace(0.0, 1.0, nodes), w):
        if wt == 0:
            continue
        vals = sample_form(xi, p0 + t * rel)
        contracted = interior_components(np.moveaxis(rel, -1, 0), vals, xi.degree, xi.n)
        acc = acc + wt * t ** (xi.degree - 1) * contracted
    return DiscreteKForm(xi.degree - 1, bgeo, acc)


def _bump_profile(L: int) -> np.ndarray:
    r = np.linspace(-1.0, 1.0, L + 2)[1:-1]
    return np.exp(-1.0 / (1.0 - r * r))


# ---------------------------------------------------------------- closed projection

def _fft_symbols(geo: GridGeometry):
    """Real symbols ``sin(2 pi m / N) / h`` of centred differences, one per axis."""
    syms = []
    for axis, (N, h) in enumerate(zip(geo.dims, geo.spacing)):
        m = np.fft.fftfreq(N) * N
        shape = [1] * geo.ndim
        shape[axis] = N
        syms.append((np.sin(2 * np.pi * m / N) / h).reshape(shape))
    return syms


def _hodge_closed(xi: DiscreteKForm) -> DiscreteKForm:
    geo = xi.geometry
    n, k = xi.n, xi.degree
    axes = tuple(range(1, n + 1))
    xh = np.fft.fftn(xi.components, axes=axes)
    syms = _fft_symbols(geo)
    s = np.stack([np.broadcast_to(sv, geo.dims) for sv in syms])
    s2 = np.sum(s * s, axis=0)
    if k == 0:
        proj = np.where(s2 == 0, xh, 0.0)
    else:
        contracted = interior_components(s, xh, k, n)
        proj = wedge_components(s, 1, contracted, k - 1, n)
        with np.errstate(invalid="ignore", divide="ignore"):
            proj = np.where(s2 == 0, xh, proj / np.where(s2 == 0, 1.0, s2))
    eta = np.real(np.fft.ifftn(proj, axes=axes))
    return xi.with_components(eta)


def _scalar_gradient(phi: np.ndarray, geo: GridGeometry) -> np.ndarray:
    return np.stack([_partial(phi[None], 0, geo, i, 2)[0] for i in range(geo.ndim)])


def _lsq_closed(xi: DiscreteKForm, rtol: float = 1e-10, maxiter: int = 2000):
    """Least-squares ``xi ~ c ds + D phi`` on a twisted (mapping-torus) lattice; 1-forms only."""
    if xi.degree != 1:
        raise NotImplementedError("twisted projection implemented for 1-forms")
    geo = xi.geometry
    n = xi.n
    c = float(np.mean(xi.components[n - 1]))
    target = xi.components.copy()
    target[n - 1] -= c
    size = geo.size

    def DtD(v):
        phi = v.reshape(geo.dims)
        g = _scalar_gradient(phi, geo)
        return -_divergence(g, geo).ravel()

    rhs = -_divergence(target, geo).ravel()
    op = LinearOperator((size, size), matvec=DtD, dtype=float)
    phi, info = cg(op, rhs, rtol=rtol, maxiter=maxiter)
    if info > 0:
        raise RuntimeError(f"conjugate gradients did not converge ({info} iterations)")
    phi = phi.reshape(geo.dims)
    comps = _scalar_gradient(phi, geo)
    comps[n - 1] += c
    return xi.with_components(comps), c, phi


def _divergence(vec: np.ndarray, geo: GridGeometry) -> np.ndarray:
    return sum(_partial(vec[i][None], 0, geo, i, 2)[0] for i in range(geo.ndim))


def _cone_blend(xi: DiscreteKForm, cover: ContractibleCover, nodes: int):
    geo = xi.geometry
    total = np.zeros(geo.dims)
    acc = np.zeros_like(xi.components)
    local = []
    dxi = exterior_derivative(xi)
    for box in cover.boxes:
        h = cone_homotopy(xi, box, nodes)
        eta_i = exterior_derivative(h)
        idx = np.ix_(*box.index_arrays(geo))
        xi_box = xi.components[(slice(None),) + idx]
        dxi_box = dxi.components[(slice(None),) + idx]
        local.append({
            "norm_xi_minus_eta": float(np.max(pointwise_norm(xi_box - eta_i.components, xi.degree, xi.n)[0])),
            "norm_d_xi": float(np.max(pointwise_norm(dxi_box, xi.degree + 1, xi.n)[0])),
        })
        weight = np.ones(box.length)
        for ax, L in enumerate(box.length):
            shape = [1] * geo.ndim
            shape[ax] = L
            prof = _bump_profile(L) if box.length[ax] < geo.dims[ax] else np.ones(L)
            weight = weight * prof.reshape(shape)
        np.add.at(total, idx, weight)
        for a in range(acc.shape[0]):
            np.add.at(acc[a], idx, weight * eta_i.components[a])
    if np.any(total <= 0):
        raise ValueError("partition of unity vanishes somewhere: boxes overlap too little")
    return xi.with_components(acc / total), local


def closed_projection(xi: DiscreteKForm, cover: ContractibleCover | None = None,
                      method: str = "auto", nodes: int = 17, tol: float = 1e-2):
    """A closed form ``eta`` near ``xi`` and a report of the distance bound.

    ``method``:
      * ``"hodge"`` – discrete Hodge projection on a periodic lattice (exactly closed for the
        centred-difference ``d``); ``xi - eta`` is the co-exact part ``delta Laplace^-1 d xi``.
      * ``"lsq"`` – least-squares ``c ds + D phi`` on a twisted lattice (1-forms).
      * ``"cone"`` – per-box cone contractions blended by a bump partition of unity; the
        blend is not closed in general and its residual ``||d eta||`` is reported.
      * ``"auto"`` – ``hodge`` on untwisted lattices, ``lsq`` on twisted ones.

    With a cover the per-box cone certificates ``||xi - dH_i xi|| <= ||d xi||`` are reported too.
    """
    if xi.degree < 1:
        raise ValueError("closed projection needs degree >= 1")
    geo = xi.geometry
    if cover is not None:
        cover.check_covers(geo)
    if method == "auto":
        method = "lsq" if geo.twist is not None else "hodge"
    report = {"method": method, "tol": tol}
    if method == "hodge":
        if geo.twist is not None or not all(geo.periodic):
            raise ValueError("hodge projection needs an untwisted periodic lattice")
        eta = _hodge_closed(xi)
    elif method == "lsq":
        eta, period, potential = _lsq_closed(xi)
        report["ds_coefficient"] = period
        report["potential"] = potential
    elif method == "cone":
        if cover is None:
            raise ValueError("cone projection needs a cover")
        eta, local = _cone_blend(xi, cover, nodes)
        report["local"] = local
    else:
        raise ValueError(f"unknown method {method!r}")
    if cover is not None and method != "cone":
        _, local = _cone_blend(xi, cover, nodes)
        report["local"] = local
    report["norm_xi_minus_eta"] = form_norm(xi - eta)
    report["norm_d_xi"] = form_norm(exterior_derivative(xi)) if xi.degree < xi.n else 0.0
    report["norm_d_eta"] = form_norm(exterior_derivative(eta)) if xi.degree < xi.n else 0.0
    return eta, report


def axis_periods(xi: DiscreteKForm) -> np.ndarray:
    """Integrals of a 1-form along the lattice axis loops through the origin (trapezoid = exact on the lattice)."""
    if xi.degree != 1:
        raise ValueError("periods are defined here for 1-forms")
    geo = xi.geometry
    out = []
    for axis in range(geo.ndim):
        comp = xi.components[axis]
        line = comp[tuple(slice(None) if i == axis else 0 for i in range(geo.ndim))]
        out.append(float(np.sum(line) * geo.spacing[axis]))
    return np.array(out)


def random_smooth_form(geo: GridGeometry, k: int, rng: np.random.Generator, max_mode: int = 2,
                       n_terms: int = 4, amplitude: float = 1.0) -> DiscreteKForm:
    """Random trigonometric polynomial k-form on a periodic box (unit-period modes)."""
    pts = np.moveaxis(geo.points(), -1, 0)
    lengths = np.array([geo.extent(i) for i in range(geo.ndim)])
    m = comb(geo.ndim, k)
    comps = np.zeros((m,) + geo.dims)
    for a in range(m):
        comps[a] = rng.normal() * amplitude * 0.3
        for _ in range(n_terms):
            modes = rng.integers(-max_mode, max_mode + 1, size=geo.ndim)
            phase = rng.uniform(0, 2 * np.pi)
            arg = sum(2 * np.pi * modes[i] * pts[i] / lengths[i] for i in range(geo.ndim))
            comps[a] += amplitude * rng.normal() / n_terms * np.cos(arg + phase)
    return DiscreteKForm(k, geo, comps)
