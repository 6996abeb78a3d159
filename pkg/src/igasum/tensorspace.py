"""Lexicographic tensor indexing, generating systems, and sparsity patterns.

Flat indices put direction 1 fastest: ``flat = i_1 + D_1*(i_2 + D_2*(...))``.
Grid-shaped arrays use one axis per direction in natural order and are
flattened/reshaped with ``order='F'``.

The 1D interaction pattern of a trial/test basis pair under a point set is
the set of index pairs whose convex-hull supports share at least one point;
it is computed from the two leftmost-point sets, which reproduce that set
exactly.  The tensor pattern is the per-direction product, materialized once
as CSR (rows = test functions) and shared by all derivative-level blocks;
entries that turn out numerically zero stay as stored zeros.
"""

import numpy as np
import scipy.sparse

from .errors import CapacityError

__all__ = (
    "LexOrdering",
    "TensorGeneratingSystem",
    "SparsityPattern",
    "nnz_pattern_1d",
    "nnz_count_exact",
    "tensor_pattern",
    "DEFAULT_MAX_PATTERN_NNZ",
)

DEFAULT_MAX_PATTERN_NNZ = 1 << 26


class LexOrdering:
    """Bijection between flat indices and multi-indices, direction 1 fastest."""

    def __init__(self, dims):
        self.dims = tuple(int(n) for n in dims)
        if any(n < 0 for n in self.dims):
            raise ValueError("dimensions must be non-negative")
        strides = [1]
        for n in self.dims[:-1]:
            strides.append(strides[-1] * n)
        self.strides = tuple(strides)

    @property
    def d(self):
        return len(self.dims)

    @property
    def size(self):
        n = 1
        for v in self.dims:
            n *= v
        return n

    def flatten(self, multi):
        """Flat index of a multi-index (works elementwise on arrays)."""
        flat = 0
        for idx, stride in zip(multi, self.strides):
            flat = flat + np.asarray(idx) * stride
        return flat

    def split(self, flat):
        """Multi-index components of flat indices (tuple of arrays)."""
        flat = np.asarray(flat)
        return tuple(
            (flat // stride) % dim for stride, dim in zip(self.strides, self.dims)
        )

    def component(self, delta, flat):
        """Single multi-index component (0-based direction)."""
        return (np.asarray(flat) // self.strides[delta]) % self.dims[delta]


class TensorGeneratingSystem:
    """Per-direction evaluation tables at chosen derivative levels.

    A flat function evaluates at a tensor point as the product of its
    per-direction factor values; for non-zero derivative levels the system
    may be linearly dependent (a generating system rather than a basis).
    """

    def __init__(self, tables, derivs=None):
        self.tables = tuple(tables)
        if derivs is None:
            derivs = (0,) * len(self.tables)
        self.derivs = tuple(int(k) for k in derivs)
        if len(self.derivs) != len(self.tables):
            raise ValueError("one derivative level per direction required")
        for table, k in zip(self.tables, self.derivs):
            if not 0 <= k <= table.max_deriv:
                raise ValueError(f"table does not hold derivative level {k}")
        self.ordering = LexOrdering(t.num_functions for t in self.tables)

    @property
    def d(self):
        return len(self.tables)

    @property
    def dims(self):
        return self.ordering.dims

    @property
    def num_functions(self):
        return self.ordering.size

    @property
    def point_shape(self):
        return tuple(t.num_points for t in self.tables)

    def dense_factor(self, delta):
        return self.tables[delta].dense(self.derivs[delta])


def _table_point_csr(table, deriv):
    """Sparse (num_points x num_functions) band matrix of a table level.

    Structural zeros are kept so nnz is exactly ``order * num_points``.
    Cached on the table (immutable inputs, so memoization is safe).
    """
    cache = getattr(table, "_point_csr_cache", None)
    if cache is None:
        cache = table._point_csr_cache = {}
    mat = cache.get(deriv)
    if mat is None:
        rows, cols, data = table.point_matrix(deriv)
        mat = scipy.sparse.coo_matrix(
            (data, (rows, cols)), shape=(table.num_points, table.num_functions)
        ).tocsr()
        cache[deriv] = mat
    return mat


def contract_to_points(tables, derivs, coeffs, counter=None, dir_order=None):
    """Coefficient grid -> values at all tensor quadrature points.

    Contracts one direction at a time against the banded point/function
    matrices, reusing each partial result for every remaining point, and
    returns the grid of ``sum_n c_n * prod_delta f^delta(x_delta)`` with one
    axis per direction.  Counted multiply-adds go to ``counter.field_eval``.
    """
    dims = tuple(t.num_functions for t in tables)
    arr = np.reshape(np.asarray(coeffs, dtype=float), dims, order="F")
    order = range(len(tables)) if dir_order is None else dir_order
    for delta in order:
        q = _table_point_csr(tables[delta], derivs[delta])
        moved = np.moveaxis(arr, delta, 0)
        flat = np.ascontiguousarray(moved).reshape(moved.shape[0], -1)
        out = q @ flat
        if counter is not None:
            counter.add_field_eval(q.nnz * flat.shape[1])
        arr = np.moveaxis(out.reshape((q.shape[0],) + moved.shape[1:]), 0, delta)
    return arr


def _expand_ranges(starts, counts):
    """Concatenate arange(starts[i], starts[i]+counts[i]) segments."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    ends = np.cumsum(counts)
    out = np.arange(total, dtype=np.int64)
    out -= np.repeat(ends - counts, counts)
    out += np.repeat(starts, counts)
    return out


def _pairs_from_supports(lo_t, hi_t, lo_s, hi_s, points):
    """Exact 1D interaction pairs (n, m) from csupp intervals and points.

    Implements the leftmost-point characterization: a pair interacts iff the
    leftmost point of one csupp lies in the other csupp.
    """
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)

    def one_sided(lo_a, hi_a, lo_b, hi_b):
        # leftmost point of csupp a_n intersected with the point set
        idx = np.searchsorted(points, lo_a, side="left")
        valid = idx < len(points)
        x = np.where(valid, points[np.minimum(idx, len(points) - 1)], np.inf)
        valid &= x <= hi_a
        first = np.searchsorted(hi_b, x, side="left")
        last = np.searchsorted(lo_b, x, side="right") - 1
        counts = np.where(valid, np.maximum(last - first + 1, 0), 0).astype(np.int64)
        a_idx = np.repeat(np.arange(len(lo_a), dtype=np.int64), counts)
        b_idx = _expand_ranges(first.astype(np.int64), counts)
        return a_idx, b_idx

    n1, m1 = one_sided(lo_t, hi_t, lo_s, hi_s)
    m2, n2 = one_sided(lo_s, hi_s, lo_t, hi_t)
    num_trial = len(lo_t)
    codes = np.unique(
        np.concatenate([m1 * num_trial + n1, m2 * num_trial + n2])
    )
    return codes % num_trial, codes // num_trial


def nnz_pattern_1d(trial, test, rule):
    """All (n, m) pairs whose csupps share a quadrature point.

    Returned as an (L, 2) integer array sorted by (m, n).
    """
    n, m = _pairs_from_supports(
        trial.csupp_lo, trial.csupp_hi, test.csupp_lo, test.csupp_hi, rule.points
    )
    return np.column_stack([n, m])


def nnz_count_exact(trial, test):
    """Closed-form 1D pair count for per-element rules.

    Equals ``len(nnz_pattern_1d(...))`` whenever at least one quadrature
    point lies strictly between any two consecutive knot values of the two
    bases combined.
    """
    if trial.domain != test.domain:
        raise ValueError("trial and test bases must share the domain")
    p, q = trial.order, test.order
    big_n, big_m = trial.num_basis, test.num_basis
    xi = np.unique(np.concatenate([trial.breakpoints, test.breakpoints]))
    b = trial.domain[1]
    correction = sum(
        trial.kv.multiplicity(x) * test.kv.multiplicity(x) for x in xi if x != b
    )
    return q * big_n + p * big_m - correction


class _DirectionPairs:
    """1D pattern of one direction in CSR-like (m-major) enumeration."""

    def __init__(self, n, m, num_trial, num_test):
        self.n = np.asarray(n, dtype=np.int64)
        self.m = np.asarray(m, dtype=np.int64)
        self.num_trial = num_trial
        self.num_test = num_test
        counts = np.bincount(self.m, minlength=num_test)
        self.rowptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.row_widths = counts.astype(np.int64)

    @property
    def num_pairs(self):
        return len(self.n)

    def index_of(self, n, m):
        """Pair indices of (n, m) entries; every pair must be present."""
        n = np.asarray(n, dtype=np.int64)
        m = np.asarray(m, dtype=np.int64)
        out = np.empty(n.shape, dtype=np.int64)
        for mv in np.unique(m):
            mask = m == mv
            lo, hi = self.rowptr[mv], self.rowptr[mv + 1]
            out[mask] = lo + np.searchsorted(self.n[lo:hi], n[mask])
        return out

    def rank_in_row(self, n, m):
        """Position of column n within its row's sorted column list."""
        return self.index_of(n, m) - self.rowptr[m]


class SparsityPattern:
    """Tensor-product CSR pattern shared by all derivative-level blocks.

    Rows are flat test indices, columns flat trial indices.  A pair (n, m)
    is present iff its per-direction components are present in every 1D
    pattern, so the total count is the product of the 1D counts.
    """

    def __init__(self, dir_pairs, trial_dims, test_dims, max_nnz=DEFAULT_MAX_PATTERN_NNZ):
        self.dir_pairs = tuple(dir_pairs)
        self.trial_ordering = LexOrdering(trial_dims)
        self.test_ordering = LexOrdering(test_dims)
        total = 1
        for dp in self.dir_pairs:
            total *= dp.num_pairs
        if total > max_nnz:
            raise CapacityError(
                f"pattern would hold {total} pairs, above the limit {max_nnz}"
            )
        self._nnz = total
        self._vperm = {}
        identity = tuple(range(self.d))
        m_flat, n_flat = self._entry_arrays(identity)
        perm = np.lexsort((n_flat, m_flat))
        self.indices = n_flat[perm]
        counts = np.bincount(m_flat, minlength=self.shape[0])
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self._vperm[identity] = perm

    @property
    def d(self):
        return len(self.dir_pairs)

    @property
    def shape(self):
        return self.test_ordering.size, self.trial_ordering.size

    @property
    def nnz(self):
        return self._nnz

    def _layout_shape(self, dir_order):
        return tuple(self.dir_pairs[delta].num_pairs for delta in reversed(dir_order))

    def _entry_arrays(self, dir_order):
        """Flat (row, col) indices of every entry in assembly-value layout.

        The layout enumerates per-direction pair indices with the first
        processed direction fastest.
        """
        d = self.d
        shape = self._layout_shape(dir_order)
        m_flat = np.zeros(shape, dtype=np.int64)
        n_flat = np.zeros(shape, dtype=np.int64)
        for k, delta in enumerate(dir_order):
            dp = self.dir_pairs[delta]
            bshape = [1] * d
            bshape[d - 1 - k] = dp.num_pairs
            m_flat += (dp.m * self.test_ordering.strides[delta]).reshape(bshape)
            n_flat += (dp.n * self.trial_ordering.strides[delta]).reshape(bshape)
        return m_flat.ravel(), n_flat.ravel()

    def value_perm(self, dir_order):
        """Permutation from assembly-value layout into CSR value order."""
        dir_order = tuple(dir_order)
        perm = self._vperm.get(dir_order)
        if perm is None:
            m_flat, n_flat = self._entry_arrays(dir_order)
            perm = np.lexsort((n_flat, m_flat))
            self._vperm[dir_order] = perm
        return perm

    def to_scipy(self, values=None):
        m, n = self.shape
        if values is None:
            values = np.ones(self.nnz)
        return scipy.sparse.csr_matrix((values, self.indices, self.indptr), shape=(m, n))


def _direction_bases(system):
    if isinstance(system, TensorGeneratingSystem):
        return [t.basis for t in system.tables]
    return list(system)


def tensor_pattern(trial, test, quad, max_nnz=DEFAULT_MAX_PATTERN_NNZ):
    """Tensor-product sparsity pattern for a trial/test pair and quadrature.

    ``trial`` and ``test`` may be per-direction basis lists or
    :class:`TensorGeneratingSystem` objects; the pattern only depends on the
    value-level supports, so it is valid for every derivative block.
    """
    trial_bases = _direction_bases(trial)
    test_bases = _direction_bases(test)
    if not len(trial_bases) == len(test_bases) == quad.dim:
        raise ValueError("inconsistent dimensions")
    pairs = []
    for tr, te, rule in zip(trial_bases, test_bases, quad.rules):
        n, m = _pairs_from_supports(
            tr.csupp_lo, tr.csupp_hi, te.csupp_lo, te.csupp_hi, rule.points
        )
        pairs.append(_DirectionPairs(n, m, tr.num_basis, te.num_basis))
    return SparsityPattern(
        pairs,
        [b.num_basis for b in trial_bases],
        [b.num_basis for b in test_bases],
        max_nnz=max_nnz,
    )
