"""Gauss-Legendre rules per element and tensor-product quadrature.

A :class:`QuadratureRule1D` is a sorted point list with aligned weights; a
:class:`TensorQuadrature` combines one rule per direction, the weight of a
tensor point being the product of the per-direction weights.  Arbitrary
user-supplied per-direction rules are accepted through :func:`custom_rule`.
"""

import math

import numpy as np

__all__ = (
    "ReferenceGaussRule",
    "QuadratureRule1D",
    "TensorQuadrature",
    "gauss_legendre",
    "per_element_rule",
    "custom_rule",
)

_MAX_GAUSS_NODES = 64


class ReferenceGaussRule:
    """Gauss-Legendre rule on [-1, 1]: exact for polynomials up to 2k-1."""

    def __init__(self, k, nodes, weights):
        self.k = k
        self.nodes = nodes
        self.weights = weights


def gauss_legendre(k):
    """Gauss-Legendre nodes/weights on [-1, 1] for ``1 <= k <= 64``.

    Nodes are found by Newton iteration on the degree-k Legendre polynomial
    with trigonometric initial guesses (tolerance 1e-15, at most 100 steps);
    the derivative comes from the three-term recurrence.  Only one half is
    iterated and the other is mirrored, so the rule is exactly symmetric.
    """
    if not 1 <= k <= _MAX_GAUSS_NODES:
        raise ValueError(f"node count {k} outside [1, {_MAX_GAUSS_NODES}]")
    nodes = np.zeros(k)
    weights = np.zeros(k)
    for i in range((k + 1) // 2):
        middle = 2 * i + 1 == k
        x = 0.0 if middle else math.cos(math.pi * (i + 0.75) / (k + 0.5))
        for _ in range(100):
            p0, p1 = 1.0, 0.0
            for j in range(1, k + 1):
                p0, p1 = ((2 * j - 1) * x * p0 - (j - 1) * p1) / j, p0
            dp = k * (x * p0 - p1) / (x * x - 1.0)
            dx = p0 / dp
            x -= dx
            if abs(dx) <= 1e-15:
                break
        if middle:
            x = 0.0
        w = 2.0 / ((1.0 - x * x) * dp * dp)
        nodes[i], nodes[k - 1 - i] = -abs(x), abs(x)
        weights[i] = weights[k - 1 - i] = w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return ReferenceGaussRule(k, nodes, weights)


class QuadratureRule1D:
    """Sorted quadrature points with aligned weights on one direction."""

    def __init__(self, points, weights):
        self.points = points
        self.weights = weights

    @property
    def num_points(self):
        return len(self.points)

    def __len__(self):
        return len(self.points)

    def restrict(self, lo, hi):
        """Sub-rule over the point index range [lo, hi)."""
        return QuadratureRule1D(self.points[lo:hi], self.weights[lo:hi])


def per_element_rule(breakpoints, k):
    """k-point Gauss rule mapped affinely into every element.

    Duplicate breakpoints collapse to a single boundary.  The resulting rule
    has ``k * num_elements`` points and at least one point strictly between
    any two consecutive breakpoints.
    """
    breakpoints = np.unique(np.asarray(breakpoints, dtype=float))
    if len(breakpoints) < 2:
        raise ValueError("need at least 2 distinct breakpoints")
    ref = gauss_legendre(k)
    lo = breakpoints[:-1]
    hi = breakpoints[1:]
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    points = (mid[:, None] + half[:, None] * ref.nodes[None, :]).ravel()
    weights = (half[:, None] * ref.weights[None, :]).ravel()
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule1D(points, weights)


def custom_rule(points, weights):
    """Wrap user-supplied points/weights unchanged (points sorted)."""
    points = np.ascontiguousarray(points, dtype=float)
    weights = np.ascontiguousarray(weights, dtype=float)
    if points.shape != weights.shape or points.ndim != 1:
        raise ValueError("points and weights must be flat sequences of equal length")
    if np.any(np.diff(points) < 0):
        raise ValueError("points must be sorted ascending")
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule1D(points, weights)


class TensorQuadrature:
    """One QuadratureRule1D per direction; points form the tensor grid."""

    def __init__(self, rules):
        self.rules = tuple(rules)
        if not self.rules:
            raise ValueError("need at least one direction")

    @property
    def dim(self):
        return len(self.rules)

    @property
    def shape(self):
        """Per-direction point counts."""
        return tuple(r.num_points for r in self.rules)

    @property
    def num_points(self):
        n = 1
        for r in self.rules:
            n *= r.num_points
        return n

    def flat_weights(self):
        """Tensor weights, flattened with direction 1 varying fastest."""
        w = np.ones(1)
        for rule in self.rules:
            w = (rule.weights[:, None] * w[None, :]).ravel()
        return w
