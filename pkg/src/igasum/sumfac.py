"""Core assemblers for tensor-product quadrature sums.

Four routes compute the same matrix:

* :func:`assemble` / :func:`assemble_block` -- sum factorization, processing
  one direction at a time.  The per-direction scatter operator is a banded
  sparse matrix (pair index x point index), so each level of the recursion
  becomes one sparse-times-dense product and the partial result is reused
  for every remaining point.  Arithmetic per entry matches the recursive
  formulation; quadrature points accumulate in ascending lexicographic
  order, so outputs are bit-reproducible run to run.
* :func:`assemble_naive` -- the direct quadrature sum per matrix entry, the
  oracle the fast path is verified against.
* :func:`assemble_kronecker_dense` -- dense Kronecker-factor products for
  tiny instances.

Multiply-adds are tracked in a :class:`FlopCounter`: ``block_update`` for
the per-direction scatter updates, ``field_eval`` for spline evaluation at
points, ``coeff_build`` for coefficient construction.
"""

import numpy as np
import scipy.sparse

from .errors import CapacityError, UnsupportedDerivativeError
from .geometry import CoefficientField
from .tensorspace import SparsityPattern, tensor_pattern, DEFAULT_MAX_PATTERN_NNZ
from . import bspline

__all__ = (
    "FlopCounter",
    "SparseMatrix",
    "AssemblyProblem",
    "assemble",
    "assemble_block",
    "assemble_naive",
    "assemble_kronecker_dense",
    "rel_frobenius",
    "DEFAULT_NAIVE_BUDGET",
    "DEFAULT_DENSE_BUDGET",
)

DEFAULT_NAIVE_BUDGET = 4_000_000_000
DEFAULT_DENSE_BUDGET = 100_000_000


class FlopCounter:
    """Deterministic multiply-add counters for the three cost centers."""

    __slots__ = ("block_update", "field_eval", "coeff_build")

    def __init__(self):
        self.block_update = 0
        self.field_eval = 0
        self.coeff_build = 0

    def add_block_update(self, n):
        self.block_update += int(n)

    def add_field_eval(self, n):
        self.field_eval += int(n)

    def add_coeff_build(self, n):
        self.coeff_build += int(n)

    def merge(self, other):
        self.block_update += other.block_update
        self.field_eval += other.field_eval
        self.coeff_build += other.coeff_build

    @property
    def total(self):
        return self.block_update + self.field_eval + self.coeff_build

    def as_tuple(self):
        return (self.block_update, self.field_eval, self.coeff_build)

    def __eq__(self, other):
        return isinstance(other, FlopCounter) and self.as_tuple() == other.as_tuple()

    def __repr__(self):
        return (
            f"FlopCounter(block_update={self.block_update}, "
            f"field_eval={self.field_eval}, coeff_build={self.coeff_build})"
        )


class SparseMatrix:
    """CSR values over a shared :class:`SparsityPattern` (rows = test)."""

    def __init__(self, pattern, values):
        if len(values) != pattern.nnz:
            raise ValueError("values not aligned with the pattern")
        self.pattern = pattern
        self.values = values

    @property
    def shape(self):
        return self.pattern.shape

    @property
    def nnz(self):
        return self.pattern.nnz

    def to_scipy(self):
        return self.pattern.to_scipy(self.values)

    def toarray(self):
        return self.to_scipy().toarray()

    def matvec(self, u):
        return self.to_scipy() @ np.asarray(u, dtype=float)

    def copy(self):
        return SparseMatrix(self.pattern, self.values.copy())


def rel_frobenius(a, b):
    """Relative Frobenius distance ||a - b||_F / ||b||_F."""

    def dense(x):
        if isinstance(x, SparseMatrix):
            return x.toarray()
        if scipy.sparse.issparse(x):
            return x.toarray()
        return np.asarray(x, dtype=float)

    if (
        isinstance(a, SparseMatrix)
        and isinstance(b, SparseMatrix)
        and a.pattern is b.pattern
    ):
        num = np.linalg.norm(a.values - b.values)
        den = np.linalg.norm(b.values)
    else:
        da, db = dense(a), dense(b)
        num = np.linalg.norm(da - db)
        den = np.linalg.norm(db)
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


class _Core:
    """Direction-by-direction assembly engine over fixed tables/pattern.

    Shared by the global assembler and by per-box local systems; the
    coefficient slice varies per call.
    """

    def __init__(self, trial_tables, test_tables, rules, pattern, dir_order=None):
        self.trial_tables = tuple(trial_tables)
        self.test_tables = tuple(test_tables)
        self.rules = tuple(rules)
        self.pattern = pattern
        self.d = len(self.rules)
        self.dir_order = tuple(dir_order) if dir_order is not None else tuple(range(self.d))
        if sorted(self.dir_order) != list(range(self.d)):
            raise ValueError("dir_order must be a permutation of the directions")
        self.point_shape = tuple(len(r) for r in self.rules)
        self._w_cache = {}

    def w_matrix(self, delta, k_trial, k_test):
        """Banded scatter operator (pair index x point index) of a direction.

        Entry ((n, m), x) holds ``w(x) * trial_k(n, x) * test_k(m, x)`` for
        every function pair in the span bands at x; band zeros stay stored,
        so nnz equals the product of the band widths summed over points.
        """
        key = (delta, k_trial, k_test)
        mat = self._w_cache.get(key)
        if mat is not None:
            return mat
        tt = self.trial_tables[delta]
        ts = self.test_tables[delta]
        rule = self.rules[delta]
        dp = self.pattern.dir_pairs[delta]
        npts = len(rule)
        p, q = tt.order, ts.order
        if npts == 0 or dp.num_pairs == 0:
            mat = scipy.sparse.csr_matrix((dp.num_pairs, npts))
        else:
            n_band = tt.first_active[:, None, None] + np.arange(p)[None, None, :]
            m_band = ts.first_active[:, None, None] + np.arange(q)[None, :, None]
            vals = (
                rule.weights[:, None, None]
                * tt.values[k_trial].T[:, None, :]
                * ts.values[k_test].T[:, :, None]
            )
            n_full = np.broadcast_to(n_band, (npts, q, p)).ravel()
            m_full = np.broadcast_to(m_band, (npts, q, p)).ravel()
            x_full = np.repeat(np.arange(npts), q * p)
            e_full = dp.index_of(n_full, m_full)
            mat = scipy.sparse.coo_matrix(
                (vals.ravel(), (e_full, x_full)), shape=(dp.num_pairs, npts)
            ).tocsr()
        self._w_cache[key] = mat
        return mat

    def block_values(self, f_flat, theta, eta, counter):
        """One derivative block in assembly-value layout (flattened)."""
        arr = np.reshape(f_flat, self.point_shape, order="F")
        remaining = list(range(self.d))
        for k, delta in enumerate(self.dir_order):
            ax = k + remaining.index(delta)
            remaining.remove(delta)
            w = self.w_matrix(delta, theta[delta], eta[delta])
            moved = np.moveaxis(arr, ax, 0)
            flat = np.ascontiguousarray(moved).reshape(moved.shape[0], -1)
            out = w @ flat
            counter.add_block_update(w.nnz * flat.shape[1])
            arr = out.reshape((w.shape[0],) + moved.shape[1:])
        return arr.ravel()

    def assemble_values(self, coeff, theta_set, eta_set, counter):
        """CSR-ordered values of the summed blocks (zero slices skipped)."""
        acc = np.zeros(self.pattern.nnz)
        if self.pattern.nnz == 0:
            return acc
        for j, theta in enumerate(theta_set):
            for i, eta in enumerate(eta_set):
                if coeff.is_zero_block(i, j):
                    continue
                acc += self.block_values(coeff.block(i, j), theta, eta, counter)
        return acc[self.pattern.value_perm(self.dir_order)]

    def block_values_csr(self, f_flat, theta, eta, counter):
        vals = self.block_values(f_flat, theta, eta, counter)
        return vals[self.pattern.value_perm(self.dir_order)]


class AssemblyProblem:
    """A trial/test space pair, a tensor quadrature, and a coefficient field.

    ``coeff`` may be a materialized :class:`.geometry.CoefficientField` or a
    lazy provider with an ``evaluate(quad, counter)`` method (such as
    :class:`.geometry.PulledBackCoefficient`); localized assembly exploits
    the provider form to build coefficients one box at a time.
    """

    def __init__(self, trial, test, quad, coeff, max_nnz=DEFAULT_MAX_PATTERN_NNZ):
        self.trial = tuple(trial)
        self.test = tuple(test)
        self.quad = quad
        if not len(self.trial) == len(self.test) == quad.dim:
            raise ValueError("trial, test and quadrature dimensions differ")
        self.theta_set = tuple(tuple(t) for t in coeff.theta_set)
        self.eta_set = tuple(tuple(t) for t in coeff.eta_set)
        self.max_nnz = max_nnz
        for delta, basis in enumerate(self.trial):
            if max(t[delta] for t in self.theta_set) >= basis.order:
                raise UnsupportedDerivativeError(
                    f"trial derivative exceeds order in direction {delta}"
                )
        for delta, basis in enumerate(self.test):
            if max(t[delta] for t in self.eta_set) >= basis.order:
                raise UnsupportedDerivativeError(
                    f"test derivative exceeds order in direction {delta}"
                )
        if isinstance(coeff, CoefficientField):
            if coeff.num_points != quad.num_points:
                raise ValueError("coefficient field does not match the point grid")
            self._field = coeff
            self.coeff_source = None
        else:
            self._field = None
            self.coeff_source = coeff
        self._cache = {}

    @property
    def d(self):
        return len(self.trial)

    @property
    def shape(self):
        m = n = 1
        for b in self.test:
            m *= b.num_basis
        for b in self.trial:
            n *= b.num_basis
        return m, n

    def coeff_field(self, counter=None):
        """The coefficient field at all quadrature points (materialized once)."""
        if self._field is None:
            self._field = self.coeff_source.evaluate(
                self.quad, counter if counter is not None else FlopCounter()
            )
        return self._field

    # spec name for the materialized field
    @property
    def coeff(self):
        return self.coeff_field()

    def trial_tables(self):
        tabs = self._cache.get("trial_tables")
        if tabs is None:
            md = max(max(t) for t in self.theta_set)
            tabs = tuple(
                bspline.tabulate(basis, rule.points, min(md, basis.order - 1))
                for basis, rule in zip(self.trial, self.quad.rules)
            )
            self._cache["trial_tables"] = tabs
        return tabs

    def test_tables(self):
        tabs = self._cache.get("test_tables")
        if tabs is None:
            md = max(max(t) for t in self.eta_set)
            tabs = tuple(
                bspline.tabulate(basis, rule.points, min(md, basis.order - 1))
                for basis, rule in zip(self.test, self.quad.rules)
            )
            self._cache["test_tables"] = tabs
        return tabs

    def pattern(self):
        pat = self._cache.get("pattern")
        if pat is None:
            pat = tensor_pattern(self.trial, self.test, self.quad, max_nnz=self.max_nnz)
            self._cache["pattern"] = pat
        return pat

    def core(self, dir_order=None):
        key = ("core", tuple(dir_order) if dir_order is not None else None)
        core = self._cache.get(key)
        if core is None:
            core = _Core(
                self.trial_tables(),
                self.test_tables(),
                self.quad.rules,
                self.pattern(),
                dir_order=dir_order,
            )
            self._cache[key] = core
        return core


def _check_block_indices(problem, theta, eta):
    theta = tuple(theta)
    eta = tuple(eta)
    for delta, basis in enumerate(problem.trial):
        if theta[delta] >= basis.order:
            raise UnsupportedDerivativeError(
                f"trial derivative {theta[delta]} >= order {basis.order}"
            )
    for delta, basis in enumerate(problem.test):
        if eta[delta] >= basis.order:
            raise UnsupportedDerivativeError(
                f"test derivative {eta[delta]} >= order {basis.order}"
            )
    if theta not in problem.theta_set or eta not in problem.eta_set:
        raise ValueError("derivative multi-index not in the problem's index sets")
    return theta, eta


def assemble_block(problem, theta, eta, counter=None, dir_order=None):
    """Assemble the single derivative block (theta, eta) on the shared pattern."""
    counter = counter if counter is not None else FlopCounter()
    theta, eta = _check_block_indices(problem, theta, eta)
    field = problem.coeff_field(counter)
    core = problem.core(dir_order)
    pattern = problem.pattern()
    i = problem.eta_set.index(eta)
    j = problem.theta_set.index(theta)
    if field.is_zero_block(i, j) or pattern.nnz == 0:
        return SparseMatrix(pattern, np.zeros(pattern.nnz))
    vals = core.block_values_csr(field.block(i, j), theta, eta, counter)
    return SparseMatrix(pattern, vals)


def assemble(problem, counter=None, dir_order=None):
    """Assemble the full matrix: the sum of all derivative blocks."""
    counter = counter if counter is not None else FlopCounter()
    field = problem.coeff_field(counter)
    core = problem.core(dir_order)
    vals = core.assemble_values(field, problem.theta_set, problem.eta_set, counter)
    return SparseMatrix(problem.pattern(), vals)


def _support_column_ranges(basis, points):
    lo = np.searchsorted(points, basis.csupp_lo, side="left")
    hi = np.searchsorted(points, basis.csupp_hi, side="right")
    return lo, hi


def assemble_naive(problem, counter=None, budget=DEFAULT_NAIVE_BUDGET):
    """Direct quadrature sum per pattern entry (the comparison oracle).

    For every stored pair the weighted integrand is summed point by point in
    ascending lexicographic order; points outside the pair's support overlap
    contribute exact zeros and are not visited.  The nominal triple-loop
    size (pattern nnz x points x derivative blocks) is guarded by
    ``budget``.
    """
    counter = counter if counter is not None else FlopCounter()
    pattern = problem.pattern()
    quad = problem.quad
    n_blocks = len(problem.theta_set) * len(problem.eta_set)
    nominal = pattern.nnz * quad.num_points * n_blocks
    if nominal > budget:
        raise CapacityError(
            f"naive assembly would take {nominal} nominal operations, above {budget}"
        )
    field = problem.coeff_field(counter)
    values = np.zeros(pattern.nnz)
    if pattern.nnz == 0 or quad.num_points == 0:
        return SparseMatrix(pattern, values)

    d = problem.d
    wflat = quad.flat_weights()
    shape = quad.shape
    trial_dense = [
        [tab.dense(k) for k in range(tab.max_deriv + 1)] for tab in problem.trial_tables()
    ]
    test_dense = [
        [tab.dense(k) for k in range(tab.max_deriv + 1)] for tab in problem.test_tables()
    ]
    trial_rng = [
        _support_column_ranges(b, r.points) for b, r in zip(problem.trial, quad.rules)
    ]
    test_rng = [
        _support_column_ranges(b, r.points) for b, r in zip(problem.test, quad.rules)
    ]

    blocks = []
    for j, theta in enumerate(problem.theta_set):
        for i, eta in enumerate(problem.eta_set):
            if field.is_zero_block(i, j):
                continue
            wf = np.reshape(field.block(i, j) * wflat, shape, order="F")
            blocks.append((theta, eta, wf))

    test_ord = pattern.test_ordering
    trial_ord = pattern.trial_ordering
    for m in range(pattern.shape[0]):
        start, stop = pattern.indptr[m], pattern.indptr[m + 1]
        if start == stop:
            continue
        m_multi = [int(c) for c in test_ord.split(m)]
        for idx in range(start, stop):
            n = int(pattern.indices[idx])
            n_multi = [int(c) for c in trial_ord.split(n)]
            slices = []
            for delta in range(d):
                lo = max(
                    trial_rng[delta][0][n_multi[delta]],
                    test_rng[delta][0][m_multi[delta]],
                )
                hi = min(
                    trial_rng[delta][1][n_multi[delta]],
                    test_rng[delta][1][m_multi[delta]],
                )
                slices.append((int(lo), int(hi)))
            val = 0.0
            for theta, eta, wf in blocks:
                factors = [
                    trial_dense[delta][theta[delta]][
                        n_multi[delta], slices[delta][0] : slices[delta][1]
                    ]
                    * test_dense[delta][eta[delta]][
                        m_multi[delta], slices[delta][0] : slices[delta][1]
                    ]
                    for delta in range(d)
                ]
                sub = wf[tuple(slice(lo, hi) for lo, hi in slices)]
                if d == 1:
                    val += float(np.dot(factors[0], sub))
                elif d == 2:
                    val += float(np.dot(factors[0] @ sub, factors[1]))
                else:
                    partial = np.tensordot(sub, factors[2], axes=(2, 0))
                    val += float(np.dot(factors[0] @ partial, factors[1]))
                counter.add_block_update(int(np.prod([hi - lo for lo, hi in slices])))
            values[idx] = val
    return SparseMatrix(pattern, values)


def assemble_kronecker_dense(problem, budget=DEFAULT_DENSE_BUDGET):
    """Dense Kronecker-oracle assembly: weighted test factors times trial factors.

    Materializes the full (functions x points) matrices as Kronecker
    products of the per-direction tables, with the quadrature weights folded
    into the test side, and multiplies through a diagonal coefficient.
    """
    m_total, n_total = problem.shape
    npts = problem.quad.num_points
    if m_total * n_total * max(npts, 1) > budget:
        raise CapacityError("instance too large for the dense Kronecker oracle")
    field = problem.coeff_field()
    trial_tabs = problem.trial_tables()
    test_tabs = problem.test_tables()
    weights = [r.weights for r in problem.quad.rules]
    out = np.zeros((m_total, n_total))
    for j, theta in enumerate(problem.theta_set):
        for i, eta in enumerate(problem.eta_set):
            if field.is_zero_block(i, j):
                continue
            q_trial = np.ones((1, 1))
            q_test = np.ones((1, 1))
            for delta in reversed(range(problem.d)):
                q_trial = np.kron(q_trial, trial_tabs[delta].dense(theta[delta]))
                q_test = np.kron(
                    q_test, test_tabs[delta].dense(eta[delta]) * weights[delta][None, :]
                )
            f = np.asarray(field.block(i, j))
            out += (q_test * f[None, :]) @ q_trial.T
    return out
