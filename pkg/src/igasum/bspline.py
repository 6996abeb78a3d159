"""Univariate B-spline bases over open (clamped) knot vectors.

Provides knot-vector validation, Cox-de Boor evaluation of basis functions
and their derivatives, convex-hull supports, overlap parameters, and banded
tabulation at quadrature points.  All objects are immutable after
construction, so sharing them between threads is safe.

Conventions: ``order`` is degree + 1 (an order-2 basis is piecewise linear);
indices are 0-based throughout.
"""

import numpy as np

from .errors import DomainError, UnsupportedDerivativeError

__all__ = (
    "KnotVector",
    "UnivariateBasis",
    "BasisEvalTable",
    "uniform_open_knots",
    "find_span",
    "eval_all_derivs",
    "overlap_param",
    "tabulate",
)


class KnotVector:
    """A validated open knot vector.

    Parameters
    ----------
    order : int
        Spline order (degree + 1), at least 1.
    knots : array_like
        Non-decreasing knot values.  The first and last values must appear
        with multiplicity exactly ``order`` (clamped ends) and no value may
        appear more than ``order`` times.
    """

    def __init__(self, order, knots):
        order = int(order)
        if order < 1:
            raise ValueError("order must be at least 1")
        knots = np.ascontiguousarray(knots, dtype=float)
        if knots.ndim != 1:
            raise ValueError("knots must be a flat sequence")
        if len(knots) < 2 * order:
            raise ValueError("need at least 2*order knots for a clamped vector")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be non-decreasing")
        a, b = knots[0], knots[-1]
        if not a < b:
            raise ValueError("knot vector spans an empty interval")
        if np.any(knots[:order] != a) or knots[order] == a:
            raise ValueError("first knot must have multiplicity exactly `order`")
        if np.any(knots[-order:] != b) or knots[-order - 1] == b:
            raise ValueError("last knot must have multiplicity exactly `order`")
        values, counts = np.unique(knots, return_counts=True)
        if np.any(counts > order):
            raise ValueError("knot multiplicity exceeds the order")
        self.order = order
        self.knots = knots
        self.knots.setflags(write=False)
        self.a = float(a)
        self.b = float(b)
        self.breakpoints = values
        self.breakpoints.setflags(write=False)
        self._multiplicity = dict(zip(values.tolist(), counts.tolist()))

    @property
    def num_basis(self):
        """Number of basis functions N = len(knots) - order."""
        return len(self.knots) - self.order

    @property
    def num_elements(self):
        """Number of non-empty knot intervals (Bezier elements)."""
        return len(self.breakpoints) - 1

    def multiplicity(self, xi):
        """Multiplicity of the knot value ``xi`` (0 if absent).

        Knot comparison is exact; knot vectors are immutable so there is no
        tolerance ambiguity.
        """
        return self._multiplicity.get(float(xi), 0)

    def __repr__(self):
        return f"KnotVector(order={self.order}, knots={self.knots.tolist()})"


def uniform_open_knots(order, num_elements, a=0.0, b=1.0, interior_multiplicity=1):
    """Open knot vector with uniform breakpoints on [a, b].

    ``interior_multiplicity`` raises the multiplicity of every interior
    breakpoint, lowering the smoothness there (1 gives maximum smoothness).
    """
    if num_elements < 1:
        raise ValueError("need at least one element")
    if not 1 <= interior_multiplicity <= order:
        raise ValueError("interior multiplicity must be in [1, order]")
    interior = np.linspace(a, b, num_elements + 1)[1:-1]
    knots = np.concatenate(
        [
            np.full(order, float(a)),
            np.repeat(interior, interior_multiplicity),
            np.full(order, float(b)),
        ]
    )
    return KnotVector(order, knots)


class UnivariateBasis:
    """The B-spline basis spanned by a knot vector.

    Function ``n`` has the convex-hull support ``csupp(n) = [knots[n],
    knots[n + order]]``, a closed interval of positive length.
    """

    def __init__(self, knot_vector):
        if not isinstance(knot_vector, KnotVector):
            raise TypeError("knot_vector must be a KnotVector")
        self.kv = knot_vector
        self.order = knot_vector.order
        self.num_basis = knot_vector.num_basis
        # csupp interval endpoints per function, both non-decreasing in n
        self.csupp_lo = knot_vector.knots[: self.num_basis].copy()
        self.csupp_hi = knot_vector.knots[self.order :].copy()
        self.csupp_lo.setflags(write=False)
        self.csupp_hi.setflags(write=False)

    @property
    def breakpoints(self):
        return self.kv.breakpoints

    @property
    def num_elements(self):
        return self.kv.num_elements

    @property
    def domain(self):
        return self.kv.a, self.kv.b

    def csupp(self, n):
        """Closed convex-hull support of basis function ``n``."""
        return float(self.csupp_lo[n]), float(self.csupp_hi[n])

    def __repr__(self):
        return f"UnivariateBasis(order={self.order}, N={self.num_basis})"


def find_span(basis, x):
    """Index ``i`` of the knot interval with ``knots[i] <= x < knots[i+1]``.

    At ``x == b`` the last non-empty interval is returned so that
    right-endpoint evaluation is defined.  The ``order`` functions
    ``i - order + 1 .. i`` are exactly those whose csupp contains ``x``
    whenever ``x`` is not a knot value.
    """
    kv = basis.kv
    if not kv.a <= x <= kv.b:
        raise DomainError(f"point {x} outside the domain [{kv.a}, {kv.b}]")
    if x >= kv.b:
        return basis.num_basis - 1
    return int(np.searchsorted(kv.knots, x, side="right")) - 1


def eval_all_derivs(basis, x, max_deriv):
    """Values and derivatives of the ``order`` functions active at ``x``.

    Returns ``(first, ders)`` where ``ders[k, j]`` is the k-th derivative of
    basis function ``first + j`` at ``x`` and all functions outside the band
    are exactly zero.  Derivatives are computed by the stable derivative
    recurrence on the de Boor triangle, which is uniformly accurate across
    knot multiplicities.

    Parameters
    ----------
    basis : UnivariateBasis
    x : float
        Evaluation point in the basis domain.
    max_deriv : int
        Highest derivative, ``0 <= max_deriv < order``.
    """
    p = basis.order
    deg = p - 1
    if not 0 <= max_deriv < p:
        raise UnsupportedDerivativeError(
            f"derivative order {max_deriv} not supported for spline order {p}"
        )
    span = find_span(basis, x)
    U = basis.kv.knots

    ndu = np.empty((p, p))
    ndu[0, 0] = 1.0
    left = np.empty(p)
    right = np.empty(p)
    for j in range(1, p):
        left[j] = x - U[span + 1 - j]
        right[j] = U[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((max_deriv + 1, p))
    ders[0] = ndu[:, deg]
    if max_deriv > 0:
        a = np.empty((2, p))
        for r in range(p):
            s1, s2 = 0, 1
            a[0, 0] = 1.0
            for k in range(1, max_deriv + 1):
                dd = 0.0
                rk = r - k
                pk = deg - k
                if r >= k:
                    a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                    dd = a[s2, 0] * ndu[rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else deg - r
                for j in range(j1, j2 + 1):
                    a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                    dd += a[s2, j] * ndu[rk + j, pk]
                if r <= pk:
                    a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                    dd += a[s2, k] * ndu[r, pk]
                ders[k, r] = dd
                s1, s2 = s2, s1
        fact = float(deg)
        for k in range(1, max_deriv + 1):
            ders[k] *= fact
            fact *= deg - k

    return span - deg, ders


def overlap_param(basis, points):
    """Largest number of basis functions whose csupp contains one point.

    For B-splines with at least one point strictly inside an element this
    equals the order.  An empty point list yields 0.
    """
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        return 0
    lo, hi = basis.csupp_lo, basis.csupp_hi
    counts = [
        int(np.count_nonzero((lo <= x) & (x <= hi))) for x in np.atleast_1d(points)
    ]
    return max(counts)


class BasisEvalTable:
    """Banded table of basis/derivative values at a fixed point list.

    ``values[k, j, i]`` holds the k-th derivative of function
    ``first_active[i] + j`` at ``points[i]``; at most ``order`` functions are
    non-zero per point.  Tables are immutable and can be sliced into local
    (box-restricted) views via :meth:`restrict`.
    """

    def __init__(self, order, num_functions, points, max_deriv, first_active, values):
        self.order = order
        self.num_functions = num_functions
        self.points = points
        self.max_deriv = max_deriv
        self.first_active = first_active
        self.values = values

    @property
    def num_points(self):
        return len(self.points)

    def dense(self, deriv=0):
        """Dense (num_functions x num_points) value matrix; zeros off-band."""
        out = np.zeros((self.num_functions, self.num_points))
        cols = np.arange(self.num_points)
        for j in range(self.order):
            out[self.first_active + j, cols] = self.values[deriv, j, :]
        return out

    def point_matrix(self, deriv=0):
        """COO triplets (rows=point, cols=function, data) of the band.

        Structural zeros inside the band are kept so the band width is
        exactly ``order`` at every point.
        """
        npts = self.num_points
        rows = np.repeat(np.arange(npts), self.order)
        cols = (self.first_active[:, None] + np.arange(self.order)[None, :]).ravel()
        data = self.values[deriv].T.ravel()
        return rows, cols, data

    def restrict(self, point_slice, fn_lo, num_functions):
        """View of this table on a point range and a function index range."""
        first = self.first_active[point_slice] - fn_lo
        if first.size and (first.min() < 0 or first.max() + self.order > num_functions):
            raise ValueError("restriction does not cover the active band")
        return BasisEvalTable(
            self.order,
            num_functions,
            self.points[point_slice],
            self.max_deriv,
            first,
            self.values[:, :, point_slice],
        )


def tabulate(basis, points, max_deriv):
    """Evaluate the basis and derivatives 0..max_deriv at sorted points.

    Cost is proportional to ``order**2 * len(points)`` per derivative level.
    """
    points = np.ascontiguousarray(points, dtype=float)
    if np.any(np.diff(points) < 0):
        raise ValueError("points must be sorted ascending")
    npts = len(points)
    p = basis.order
    first = np.empty(npts, dtype=np.int64)
    values = np.empty((max_deriv + 1, p, npts))
    for i, x in enumerate(points):
        first[i], ders = eval_all_derivs(basis, x, max_deriv)
        values[:, :, i] = ders
    first.setflags(write=False)
    values.setflags(write=False)
    table = BasisEvalTable(p, basis.num_basis, points, max_deriv, first, values)
    table.basis = basis
    return table
