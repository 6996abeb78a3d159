"""Geometry maps, Jacobians at quadrature points, and coefficient fields.

The computational domain is the image of a spline (or rational spline) map
``G`` defined on the unit cube.  Second-order problems with diffusion ``A``,
convection ``b`` and reaction ``c`` are pulled back to the parameter domain,
producing a small matrix ``F(x)`` per quadrature point that couples the
derivative levels of trial and test functions:

    ``F = |det J| * E @ [[c, 0], [b, A]] @ E^T``,  ``E = diag(1, J^{-1})``,

with rows indexed by the test derivative and columns by the trial
derivative (the Jacobian convention ``J[i, delta] = dG_i/dx_delta`` makes
this the standard chain-rule pullback).  Rational maps are evaluated as
weighted-numerator over weight splines with quotient-rule derivatives; the
discretization space itself stays polynomial.
"""

import numpy as np

from .bspline import KnotVector, UnivariateBasis, tabulate, uniform_open_knots
from .errors import DegenerateGeometryError
from .tensorspace import LexOrdering, contract_to_points

__all__ = (
    "GeometryMap",
    "GeometryEvaluation",
    "CoefficientField",
    "PDEData",
    "PulledBackCoefficient",
    "eval_geometry",
    "build_coefficient_field",
    "identity_geometry",
    "box_geometry",
    "affine_geometry",
    "quarter_annulus",
    "twisted_box",
    "named_geometry",
    "pde_mass",
    "pde_laplace",
    "pde_convection_diffusion",
    "named_pde",
    "first_order_derivative_set",
)

_DEGENERACY_RTOL = 1e-12


def first_order_derivative_set(d):
    """Multi-indices of total order <= 1: the value plus one per direction."""
    out = [(0,) * d]
    for delta in range(d):
        e = [0] * d
        e[delta] = 1
        out.append(tuple(e))
    return tuple(out)


class GeometryMap:
    """Tensor-product spline map of the unit cube into physical space.

    Parameters
    ----------
    bases : sequence of UnivariateBasis
        One basis per parametric direction.
    control_points : array
        Shape (N, s) with N the total function count (direction 1 fastest)
        and s the physical dimension, or the same data as a grid.
    weights : array, optional
        Strictly positive rational weights, one per control point.
    """

    def __init__(self, bases, control_points, weights=None):
        self.bases = tuple(bases)
        self.ordering = LexOrdering(b.num_basis for b in self.bases)
        n = self.ordering.size
        cp = np.asarray(control_points, dtype=float)
        if cp.ndim != 2:
            cp = cp.reshape(n, -1)
        if cp.shape[0] != n:
            raise ValueError("control point count must equal the basis function count")
        self.control_points = cp
        self.s = cp.shape[1]
        if self.s != len(self.bases):
            raise ValueError("only maps with physical dimension equal to d are supported")
        if weights is not None:
            weights = np.asarray(weights, dtype=float).ravel()
            if len(weights) != n:
                raise ValueError("one weight per control point required")
            if np.any(weights <= 0):
                raise ValueError("rational weights must be strictly positive")
        self.weights = weights

    @property
    def d(self):
        return len(self.bases)

    @property
    def is_rational(self):
        return self.weights is not None


class GeometryEvaluation:
    """Geometry data at every tensor quadrature point (flat, lexicographic)."""

    def __init__(self, point_shape, phys, jac, det, inv):
        self.point_shape = point_shape
        self.phys = phys
        self.jac = jac
        self.det = det
        self.inv = inv

    @property
    def num_points(self):
        return len(self.det)

    @property
    def d(self):
        return self.jac.shape[2]


def _invert_jacobians(jac):
    """Determinants and inverses via cofactor formulas for d <= 3."""
    d = jac.shape[2]
    if d == 1:
        det = jac[:, 0, 0].copy()
        inv = 1.0 / det
        return det, inv[:, None, None]
    if d == 2:
        a, b = jac[:, 0, 0], jac[:, 0, 1]
        c, dd = jac[:, 1, 0], jac[:, 1, 1]
        det = a * dd - b * c
        inv = np.empty_like(jac)
        inv[:, 0, 0] = dd
        inv[:, 0, 1] = -b
        inv[:, 1, 0] = -c
        inv[:, 1, 1] = a
        return det, inv / det[:, None, None]
    if d == 3:
        cof = np.empty_like(jac)
        cof[:, 0, 0] = jac[:, 1, 1] * jac[:, 2, 2] - jac[:, 1, 2] * jac[:, 2, 1]
        cof[:, 0, 1] = jac[:, 0, 2] * jac[:, 2, 1] - jac[:, 0, 1] * jac[:, 2, 2]
        cof[:, 0, 2] = jac[:, 0, 1] * jac[:, 1, 2] - jac[:, 0, 2] * jac[:, 1, 1]
        cof[:, 1, 0] = jac[:, 1, 2] * jac[:, 2, 0] - jac[:, 1, 0] * jac[:, 2, 2]
        cof[:, 1, 1] = jac[:, 0, 0] * jac[:, 2, 2] - jac[:, 0, 2] * jac[:, 2, 0]
        cof[:, 1, 2] = jac[:, 0, 2] * jac[:, 1, 0] - jac[:, 0, 0] * jac[:, 1, 2]
        cof[:, 2, 0] = jac[:, 1, 0] * jac[:, 2, 1] - jac[:, 1, 1] * jac[:, 2, 0]
        cof[:, 2, 1] = jac[:, 0, 1] * jac[:, 2, 0] - jac[:, 0, 0] * jac[:, 2, 1]
        cof[:, 2, 2] = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        det = (
            jac[:, 0, 0] * cof[:, 0, 0]
            + jac[:, 0, 1] * cof[:, 1, 0]
            + jac[:, 0, 2] * cof[:, 2, 0]
        )
        return det, cof / det[:, None, None]
    raise ValueError("only d <= 3 is supported")


def eval_geometry(geo, quad, counter=None):
    """Evaluate the map, Jacobians, determinants, and inverses at all points.

    Each component (and each first derivative) is a spline evaluated by the
    per-direction contraction of its coefficient grid with the tabulated
    factors; the rational case divides weighted numerator and weight splines
    pointwise with quotient-rule derivatives.
    """
    d = geo.d
    for basis in geo.bases:
        if basis.order < 2:
            raise ValueError("geometry bases need order >= 2 for derivatives")
    tables = [
        tabulate(basis, rule.points, 1) for basis, rule in zip(geo.bases, quad.rules)
    ]
    npts = quad.num_points
    shape = quad.shape

    def spline_grids(coeffs):
        value = contract_to_points(tables, (0,) * d, coeffs, counter).ravel(order="F")
        grads = np.empty((npts, d))
        for delta in range(d):
            derivs = [0] * d
            derivs[delta] = 1
            grads[:, delta] = contract_to_points(tables, derivs, coeffs, counter).ravel(
                order="F"
            )
        return value, grads

    phys = np.empty((npts, geo.s))
    jac = np.empty((npts, geo.s, d))
    if geo.is_rational:
        wval, wgrad = spline_grids(geo.weights)
        for comp in range(geo.s):
            num = geo.weights * geo.control_points[:, comp]
            nval, ngrad = spline_grids(num)
            phys[:, comp] = nval / wval
            jac[:, comp, :] = (ngrad * wval[:, None] - nval[:, None] * wgrad) / (
                wval**2
            )[:, None]
    else:
        for comp in range(geo.s):
            val, grad = spline_grids(geo.control_points[:, comp])
            phys[:, comp] = val
            jac[:, comp, :] = grad

    det, inv = _invert_jacobians(jac)
    scale = float(np.max(np.abs(jac))) if npts else 1.0
    bad = np.abs(det) < _DEGENERACY_RTOL * scale**d
    if np.any(bad):
        flat = int(np.argmax(bad))
        coords = tuple(
            float(rule.points[c])
            for rule, c in zip(quad.rules, LexOrdering(shape).split(flat))
        )
        raise DegenerateGeometryError(
            f"geometry Jacobian is singular at quadrature point {coords}"
        )
    return GeometryEvaluation(shape, phys, jac, det, inv)


class PDEData:
    """Second-order coefficient functions on the physical domain.

    Each entry is either a constant (scalar / vector / matrix) or a callable
    taking an (npts, d) array of physical points and returning per-point or
    broadcastable values.
    """

    def __init__(self, diffusion=None, convection=None, reaction=None):
        self.diffusion = diffusion
        self.convection = convection
        self.reaction = reaction


def pde_mass():
    return PDEData(reaction=1.0)


def pde_laplace():
    return PDEData(diffusion="identity")


def pde_convection_diffusion(diffusion=1.0, convection=None, reaction=1.0):
    return PDEData(diffusion=diffusion, convection=convection, reaction=reaction)


def named_pde(name, convection=None, reaction=None):
    name = name.replace("-", "_")
    if name == "mass":
        return pde_mass()
    if name == "laplace":
        return pde_laplace()
    if name in ("convection_diffusion", "cdr"):
        return pde_convection_diffusion(
            convection=convection if convection is not None else "default",
            reaction=reaction if reaction is not None else 1.0,
        )
    raise ValueError(f"unknown pde '{name}'")


def _coefficient_values(spec, pts, shape):
    npts, d = pts.shape
    if spec is None:
        return np.zeros((npts,) + shape)
    if isinstance(spec, str):
        if spec == "identity":
            return np.broadcast_to(np.eye(d), (npts,) + shape)
        if spec == "default":
            # unit convection in every physical direction
            return np.broadcast_to(np.ones(d), (npts,) + shape)
        raise ValueError(f"unknown coefficient spec '{spec}'")
    if callable(spec):
        vals = np.asarray(spec(pts), dtype=float)
    else:
        vals = np.asarray(spec, dtype=float)
        if shape == (d, d) and vals.ndim == 0:
            vals = vals * np.eye(d)
    return np.broadcast_to(vals, (npts,) + shape)


class CoefficientField:
    """Matrix-valued coefficient at every quadrature point.

    ``values[x, i, j]`` couples test derivative ``eta_set[i]`` with trial
    derivative ``theta_set[j]``; points are flat in lexicographic grid
    order.  Zero blocks are detected exactly (no thresholding) so the
    assembler can skip them without changing the matrix.
    """

    def __init__(self, theta_set, eta_set, values, point_shape):
        self.theta_set = tuple(tuple(t) for t in theta_set)
        self.eta_set = tuple(tuple(t) for t in eta_set)
        values = np.asarray(values, dtype=float)
        if values.shape[1:] != (len(self.eta_set), len(self.theta_set)):
            raise ValueError("coefficient array shape does not match the index sets")
        self.values = values
        self.point_shape = tuple(point_shape)
        self._nonzero = np.any(values != 0.0, axis=0)

    @property
    def num_points(self):
        return self.values.shape[0]

    def block(self, eta_idx, theta_idx):
        return self.values[:, eta_idx, theta_idx]

    def is_zero_block(self, eta_idx, theta_idx):
        return not bool(self._nonzero[eta_idx, theta_idx])

    def restrict_flat(self, flat_idx, point_shape):
        """Sub-field over a subset of grid points (given as flat indices)."""
        return CoefficientField(
            self.theta_set, self.eta_set, self.values[flat_idx], point_shape
        )


def build_coefficient_field(geo_eval, pde, counter=None):
    """Pull a second-order form back through an evaluated geometry."""
    pts = geo_eval.phys
    npts, d = pts.shape
    a_mat = _coefficient_values(pde.diffusion, pts, (d, d))
    b_vec = _coefficient_values(pde.convection, pts, (d,))
    c_sca = _coefficient_values(pde.reaction, pts, ())

    mhat = np.zeros((npts, 1 + d, 1 + d))
    mhat[:, 0, 0] = c_sca
    mhat[:, 1:, 0] = b_vec
    mhat[:, 1:, 1:] = a_mat
    ext = np.zeros((npts, 1 + d, 1 + d))
    ext[:, 0, 0] = 1.0
    ext[:, 1:, 1:] = geo_eval.inv
    vals = np.abs(geo_eval.det)[:, None, None] * np.einsum(
        "xij,xjk,xlk->xil", ext, mhat, ext
    )
    if counter is not None:
        counter.add_coeff_build(npts * (2 * (1 + d) ** 3 + (1 + d) ** 2))
    thetas = first_order_derivative_set(d)
    return CoefficientField(thetas, thetas, vals, geo_eval.point_shape)


class PulledBackCoefficient:
    """Lazy coefficient provider: geometry map plus PDE data.

    ``evaluate`` builds the field on any (sub-)quadrature, which lets the
    localized assembler construct coefficients one box at a time.
    """

    def __init__(self, geometry, pde):
        self.geometry = geometry
        self.pde = pde
        self.theta_set = first_order_derivative_set(geometry.d)
        self.eta_set = self.theta_set

    def evaluate(self, quad, counter=None):
        geo_eval = eval_geometry(self.geometry, quad, counter)
        return build_coefficient_field(geo_eval, self.pde, counter)


def _linear_bases(d):
    return [UnivariateBasis(KnotVector(2, [0.0, 0.0, 1.0, 1.0])) for _ in range(d)]


def box_geometry(lo, hi):
    """Axis-aligned box as a multilinear map (exact, constant Jacobian)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = len(lo)
    corners = np.zeros((2**d, d))
    ordering = LexOrdering((2,) * d)
    for n in range(2**d):
        bits = [int(c) for c in ordering.split(n)]
        corners[n] = [lo[i] if bits[i] == 0 else hi[i] for i in range(d)]
    return GeometryMap(_linear_bases(d), corners)


def identity_geometry(d):
    return box_geometry([0.0] * d, [1.0] * d)


def affine_geometry(matrix, shift=None):
    """Affine map x -> matrix @ x + shift on the unit cube."""
    matrix = np.asarray(matrix, dtype=float)
    d = matrix.shape[0]
    shift = np.zeros(d) if shift is None else np.asarray(shift, dtype=float)
    base = box_geometry([0.0] * d, [1.0] * d)
    corners = base.control_points @ matrix.T + shift[None, :]
    return GeometryMap(base.bases, corners)


def quarter_annulus(r_inner=1.0, r_outer=2.0):
    """Exact rational quarter annulus; direction 1 radial, direction 2 angular."""
    radial = UnivariateBasis(KnotVector(2, [0.0, 0.0, 1.0, 1.0]))
    angular = UnivariateBasis(KnotVector(3, [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]))
    arc = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    w_arc = np.array([1.0, np.sqrt(0.5), 1.0])
    radii = np.array([r_inner, r_outer])
    # flat index: radial fastest
    cp = np.empty((6, 2))
    weights = np.empty(6)
    for j in range(3):
        for i in range(2):
            cp[i + 2 * j] = radii[i] * arc[j]
            weights[i + 2 * j] = w_arc[j]
    return GeometryMap([radial, angular], cp, weights)


def twisted_box(twist=np.pi / 6, bend=0.3):
    """Bent and twisted unit box: quadratic splines through a smooth target map.

    Control points sample the target at Greville points, giving the
    variation-diminishing spline approximation of a rotation-by-height twist
    with a parabolic sideways bend.
    """
    bases = [UnivariateBasis(uniform_open_knots(3, 2)) for _ in range(3)]

    def greville(basis):
        p = basis.order
        knots = basis.kv.knots
        return np.array(
            [knots[n + 1 : n + p].mean() for n in range(basis.num_basis)]
        )

    g_pts = [greville(b) for b in bases]
    ordering = LexOrdering([b.num_basis for b in bases])
    cp = np.empty((ordering.size, 3))
    for n in range(ordering.size):
        i, j, k = (int(c) for c in ordering.split(n))
        x, y, z = g_pts[0][i], g_pts[1][j], g_pts[2][k]
        ang = twist * z
        u, v = x - 0.5, y - 0.5
        cp[n] = [
            np.cos(ang) * u - np.sin(ang) * v + 0.5 + bend * z * z,
            np.sin(ang) * u + np.cos(ang) * v + 0.5,
            z,
        ]
    return GeometryMap(bases, cp)


def named_geometry(name, d=None):
    """Built-in geometries used by the CLI."""
    if name == "identity2d":
        return identity_geometry(2)
    if name == "identity3d":
        return identity_geometry(3)
    if name == "identity":
        if d is None:
            raise ValueError("identity geometry needs the dimension")
        return identity_geometry(d)
    if name == "quarter_annulus":
        return quarter_annulus()
    if name == "twisted_box":
        return twisted_box()
    raise ValueError(f"unknown geometry '{name}'")
