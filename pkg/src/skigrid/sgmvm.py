"""Fast matrix-vector multiplication with the sparse-grid kernel matrix.

Three routes to u = K v for K the kernel matrix on G(ell, d) in canonical
order:

* ``naive_kernel_mvm`` — materialize K pointwise and multiply; the
  correctness oracle, quadratic in grid size.
* ``sg_mvm`` — the recursive fast algorithm.  Split v into the canonical
  blocks V_i (rows Omega_i, columns G(ell-i, d-1)).  The product kernel
  makes each cross block K_{ij} a Kronecker product of a 1-d factor between
  Omega_i and Omega_j and a (d-1)-dimensional factor between the two
  subgrids, and nesting lets both factors act on the larger grid of the
  pair through gather/scatter index maps:

      pre-pass:   Abar_i = T_i . embed(V_i)       (1-d Toeplitz, rows)
                  Bbar_i = V_i . K(ell-i, d-1)    (recursive, columns)
      main pass:  A_i = (sum_{j>i} gather-rows(Abar_j) scattered into the
                         column layout of G(ell-i, d-1)) . K(ell-i, d-1)
                  B_i = select-rows( T_i . (sum_{j<=i} embed-rows of the
                         column-gathered Bbar_j) )
                  u_i = vec(A_i) + vec(B_i)

  so every 1-d factor is a Toeplitz multiply on a coordinate-sorted grid
  and every cross-dimension factor is one recursive multiply.
* ``sg_mvm_batched`` — the same arithmetic re-organized into two sweeps
  over dimensions.  A top-down sweep computes every Abar, assembles every
  A-type right-hand side, and queues all sub-multiplies that share a
  kernel sub-problem (same sub-resolution, same trailing dimensions) as
  one batched matrix; the bottom-up sweep finishes the B parts in reverse
  dimension order.  Outputs are identical to sg_mvm up to roundoff; the
  win is that Python/FFT call counts collapse from the size of the
  recursion tree to one visit per sub-problem.

Everything here works with unit-variance per-dimension kernel factors and
applies the kernel's output_scale exactly once, at the top level.
"""

import time
from functools import lru_cache

import numpy as np

from .grids import (
    GridCapExceeded,
    SelectionMap,
    build_sparse_grid,
    canonical_to_sorted_1d,
    omega_ranks_in_sorted_1d,
    sparse_grid_size,
    sparse_injection,
)
from .kernels import toeplitz_from_grid

DEFAULT_NAIVE_CAP = 3 * 10**4


class PlanKernelMismatch(RuntimeError):
    """The plan's cached spectra were built for different hyperparameters."""


# ---- naive oracle --------------------------------------------------------


class NaiveDenseKernel:
    """Dense kernel matrix on a grid; the quadratic-cost reference."""

    def __init__(self, grid, kernel, point_cap=DEFAULT_NAIVE_CAP):
        n = len(grid)
        if point_cap is not None and n > point_cap:
            raise GridCapExceeded(
                f"naive path needs a dense {n}x{n} matrix, cap is {point_cap} points"
            )
        self.grid = grid
        self.kernel = kernel
        self.K = kernel.pairwise(grid.points())

    def mvm(self, v):
        return self.K @ v


def naive_kernel_mvm(grid, kernel, v, point_cap=DEFAULT_NAIVE_CAP):
    """u = K v with K formed pointwise.  Correctness oracle, O(m^2)."""
    return NaiveDenseKernel(grid, kernel, point_cap=point_cap).mvm(np.asarray(v))


# ---- shared plan ---------------------------------------------------------


@lru_cache(maxsize=None)
def _block_layout(a, dp):
    """(offsets, block_sizes, child_sizes) for the P3 blocks of G(a, dp)."""
    child = np.array([sparse_grid_size(a - i, dp - 1) if dp > 1 else 1
                      for i in range(a + 1)], dtype=np.int64)
    bs = np.array([2**i for i in range(a + 1)], dtype=np.int64) * child
    offs = np.concatenate([[0], np.cumsum(bs)])[:-1]
    return offs, bs, child


class MvmPlan:
    """Precomputed state shared by the recursive and iterative multiplies.

    Holds one Toeplitz operator per (original dimension, level) — exactly
    dim * (resolution + 1) kernel sub-problems — plus the block layouts,
    injection index maps, sorted-rank permutations, and the batching
    schedule of the iterative sweep.  Immutable except through refresh().
    """

    def __init__(self, resolution, dim, kernel, size_cap=None):
        if getattr(kernel, "dim", None) != dim or not callable(
            getattr(kernel, "k1d", None)
        ):
            raise TypeError(
                "plan requires a product kernel exposing per-dimension factors "
                f"for dim={dim}; got {kernel!r}"
            )
        t0 = time.perf_counter()
        self.resolution = int(resolution)
        self.dim = int(dim)
        self.grid = build_sparse_grid(resolution, dim, size_cap=size_cap)
        self.kernel = kernel
        self.kernel_hash = kernel.hash_key()
        self.toeplitz = {
            (axis, lev): toeplitz_from_grid(kernel, lev, axis)
            for axis in range(dim)
            for lev in range(resolution + 1)
        }
        self._prewarm_index_maps()
        self._build_schedule()
        self.build_seconds = time.perf_counter() - t0

    # -- construction helpers --------------------------------------------

    def _prewarm_index_maps(self):
        for a in range(self.resolution + 1):
            canonical_to_sorted_1d(a)
        for dp in range(2, self.dim + 1):
            for a in range(self.resolution + 1):
                _block_layout(a, dp)
                for i in range(a + 1):
                    for j in range(i, a + 1):
                        sparse_injection(a - j, a - i, dp - 1)

    def _build_schedule(self):
        """Column layout of the batched sweeps, in column units per top RHS.

        All bookkeeping is independent of the number of right-hand sides r:
        unit offsets/widths multiply by r at run time.
        """
        units = {(self.resolution, self.dim): 1}
        chunk_slices = {}
        order_a = {}
        for dp in range(self.dim, 1, -1):
            order_a[dp] = [a for a in range(self.resolution, -1, -1)
                           if (a, dp) in units]
            for a in order_a[dp]:
                u = units[(a, dp)]
                for i in range(a + 1):
                    child = (a - i, dp - 1)
                    w = (1 << i) * u
                    if i < a:
                        start = units.setdefault(child, 0)
                        units[child] = start + w
                        chunk_slices[(a, dp, i, "A")] = (start, w)
                    start = units.setdefault(child, 0)
                    units[child] = start + w
                    chunk_slices[(a, dp, i, "Bbar")] = (start, w)
        order_a[1] = [a for a in range(self.resolution, -1, -1) if (a, 1) in units]
        if self.dim == 1:
            units[(self.resolution, 1)] = 1
            order_a[1] = [self.resolution]
        self._units = units
        self._chunk_slices = chunk_slices
        self._order_a = order_a
        self.workspace_floats = sum(
            sparse_grid_size(a, dp) * u for (a, dp), u in units.items()
        )
        # Per-sweep tables: for each (dp, level i), the column layout of the
        # batched Toeplitz application plus the gather/scatter index arrays;
        # for each class, its emission plan.  Nothing here depends on r.
        self._levels_at = {}
        self._emit_at = {}
        for dp in range(self.dim, 1, -1):
            acts = order_a[dp]
            level_rows = []
            for i in range(acts[0] + 1):
                rows, tot = [], 0
                for a in acts:
                    if a < i:
                        continue
                    offs, bs, child = _block_layout(a, dp)
                    ckey = (a - i, dp - 1)
                    sA, wA = chunk_slices.get((a, dp, i, "A"), (None, None))
                    gb = tuple(
                        (j, sparse_injection(a - i, a - j, dp - 1),
                         omega_ranks_in_sorted_1d(j, i))
                        for j in range(i + 1)
                    )
                    w = int(child[i]) * units[(a, dp)]
                    rows.append(
                        (a, tot, w, int(offs[i]), int(bs[i]), int(child[i]),
                         gb, ckey, sA, wA)
                    )
                    tot += w
                level_rows.append((2 ** (i + 1) - 1, tot, tuple(rows)))
            self._levels_at[dp] = tuple(level_rows)
            emit = {}
            for a in acts:
                offs, bs, child = _block_layout(a, dp)
                steps = []
                for i in range(a + 1):
                    ckey = (a - i, dp - 1)
                    sB, wB = chunk_slices[(a, dp, i, "Bbar")]
                    sA, wA = chunk_slices.get((a, dp, i, "A"), (None, None))
                    ga = tuple(
                        (j, omega_ranks_in_sorted_1d(i, j),
                         sparse_injection(a - j, a - i, dp - 1))
                        for j in range(i + 1, a + 1)
                    )
                    steps.append(
                        (i, ckey, sparse_grid_size(*ckey), units[ckey],
                         sB, wB, sA, wA, int(offs[i]), int(bs[i]),
                         int(child[i]), ga)
                    )
                emit[a] = tuple(steps)
            self._emit_at[dp] = emit
        self._class_sizes = {
            (a, dp): sparse_grid_size(a, dp)
            for dp in order_a for a in order_a[dp]
        }

    # -- bookkeeping surface ----------------------------------------------

    @property
    def n_kernel_subproblems(self):
        return len(self.toeplitz)

    def subgrid(self, a, dp):
        return build_sparse_grid(a, dp, size_cap=None)

    def selection_maps(self):
        """Yield every stored selection map as a checkable SelectionMap."""
        for a in range(self.resolution + 1):
            for i in range(a + 1):
                for j in range(i, a + 1):
                    yield SelectionMap(
                        2**i, 2 ** (j + 1) - 1, omega_ranks_in_sorted_1d(i, j)
                    )
        for dp in range(2, self.dim + 1):
            for a in range(self.resolution + 1):
                for i in range(a + 1):
                    for j in range(i, a + 1):
                        yield SelectionMap(
                            sparse_grid_size(a - j, dp - 1),
                            sparse_grid_size(a - i, dp - 1),
                            sparse_injection(a - j, a - i, dp - 1),
                        )

    def refresh(self, kernel):
        """Swap hyperparameters, rebuilding only the Toeplitz spectra."""
        if getattr(kernel, "dim", None) != self.dim:
            raise PlanKernelMismatch(
                f"plan is for dim={self.dim}, kernel has dim={getattr(kernel, 'dim', None)}"
            )
        self.kernel = kernel
        self.kernel_hash = kernel.hash_key()
        self.toeplitz = {
            (axis, lev): toeplitz_from_grid(kernel, lev, axis)
            for axis in range(self.dim)
            for lev in range(self.resolution + 1)
        }

    def check_kernel(self, kernel):
        if kernel is not None and kernel.hash_key() != self.kernel_hash:
            raise PlanKernelMismatch(
                "plan spectra were built for different kernel hyperparameters; "
                "call refresh() first"
            )


def build_plan(resolution, dim, kernel, size_cap=None):
    """Build the MVM plan for G(resolution, dim) under the given kernel."""
    return MvmPlan(resolution, dim, kernel, size_cap=size_cap)


# ---- recursive form ------------------------------------------------------


def _mvm_recursive(plan, a, dp, R):
    """K_{G(a, dp)} @ R on the trailing dp dimensions; R is (grid size, r)."""
    axis = plan.dim - dp
    if dp == 1:
        T = plan.toeplitz[(axis, a)]
        ranks = canonical_to_sorted_1d(a)
        S = np.empty_like(R)
        S[ranks] = R
        return T.matmat(S)[ranks]

    offs, bs, child = _block_layout(a, dp)
    r = R.shape[1]
    Abar, Bbar = [], []
    for i in range(a + 1):
        Mi = child[i]
        Vi = R[offs[i] : offs[i] + bs[i]].reshape(2**i, Mi, r)
        n_i = 2 ** (i + 1) - 1
        E = np.zeros((n_i, Mi, r))
        E[0::2] = Vi  # Omega_i sits at the even slots of its own sorted grid
        T = plan.toeplitz[(axis, i)]
        Abar.append(T.matmat(E.reshape(n_i, -1)).reshape(n_i, Mi, r))
        W = np.ascontiguousarray(Vi.transpose(1, 0, 2)).reshape(Mi, -1)
        Bbar.append(_mvm_recursive(plan, a - i, dp - 1, W).reshape(Mi, 2**i, r))

    U = np.empty_like(R)
    for i in range(a + 1):
        Mi = child[i]
        if i < a:
            SA = np.zeros((2**i, Mi, r))
            for j in range(i + 1, a + 1):
                rows = omega_ranks_in_sorted_1d(i, j)
                cols = sparse_injection(a - j, a - i, dp - 1)
                SA[:, cols, :] += Abar[j][rows]
            A = _mvm_recursive(
                plan, a - i, dp - 1,
                np.ascontiguousarray(SA.transpose(1, 0, 2)).reshape(Mi, -1),
            ).reshape(Mi, 2**i, r).transpose(1, 0, 2)
        else:
            A = 0.0
        n_i = 2 ** (i + 1) - 1
        SB = np.zeros((n_i, Mi, r))
        for j in range(i + 1):
            cols = sparse_injection(a - i, a - j, dp - 1)
            rows = omega_ranks_in_sorted_1d(j, i)
            SB[rows] += Bbar[j][cols].transpose(1, 0, 2)
        T = plan.toeplitz[(axis, i)]
        Bfull = T.matmat(SB.reshape(n_i, -1)).reshape(n_i, Mi, r)
        U[offs[i] : offs[i] + bs[i]] = (A + Bfull[0::2]).reshape(bs[i], r)
    return U


def sg_mvm(plan, v, kernel=None):
    """u = K v via the recursive algorithm.  v is (N,) or (N, r)."""
    plan.check_kernel(kernel)
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    R = v.reshape(len(v), -1)
    if R.shape[0] != plan.grid.size:
        raise ValueError(f"vector length {R.shape[0]} != grid size {plan.grid.size}")
    out = _mvm_recursive(plan, plan.resolution, plan.dim, R)
    out = out * plan.kernel.output_scale
    return out[:, 0] if single else out


# ---- iterative (batched) form ---------------------------------------------


def sg_mvm_batched(plan, V, kernel=None):
    """u = K V with all sub-multiplies sharing a kernel sub-problem batched.

    Column-wise identical to sg_mvm up to roundoff.  V is (N,) or (N, r).
    Every Toeplitz factor (dimension, level) is applied once per sweep to
    the column-concatenation of all sub-problems that need it.
    """
    plan.check_kernel(kernel)
    V = np.asarray(V, dtype=np.float64)
    single = V.ndim == 1
    V2 = V.reshape(len(V), -1)
    if V2.shape[0] != plan.grid.size:
        raise ValueError(f"vector length {V2.shape[0]} != grid size {plan.grid.size}")
    r = V2.shape[1]
    ell, dim = plan.resolution, plan.dim
    order_a = plan._order_a

    rhs = {(ell, dim): V2}
    results = {}

    # Top-down sweep: batched Toeplitz pre-pass, then per-class emission of
    # the A-type and Bbar-type right-hand sides into the child buffers.
    for dp in range(dim, 1, -1):
        axis = dim - dp
        Abar = {}
        for i, (n_i, tot, rows) in enumerate(plan._levels_at[dp]):
            E = np.zeros((n_i, tot * r))
            for a, off, w, boff, bsz, Mi, gb, ckey, sA, wA in rows:
                # Omega_i occupies the even slots of its own sorted grid
                E[0::2, off * r : (off + w) * r] = (
                    rhs[(a, dp)][boff : boff + bsz].reshape(1 << i, w * r)
                )
            F = plan.toeplitz[(axis, i)].matmat(E)
            for a, off, w, boff, bsz, Mi, gb, ckey, sA, wA in rows:
                Abar[(a, i)] = F[:, off * r : (off + w) * r].reshape(n_i, Mi, -1)
        for a in order_a[dp]:
            R = rhs.pop((a, dp))
            rc = R.shape[1]
            for i, ckey, csz, cu, sB, wB, sA, wA, boff, bsz, Mi, ga in (
                plan._emit_at[dp][a]
            ):
                buf = rhs.get(ckey)
                if buf is None:
                    buf = np.empty((csz, cu * r))
                    rhs[ckey] = buf
                Vi = R[boff : boff + bsz].reshape(1 << i, Mi, rc)
                buf[:, sB * r : (sB + wB) * r] = Vi.transpose(1, 0, 2).reshape(Mi, -1)
                if sA is not None:
                    SA = np.zeros((1 << i, Mi, rc))
                    for j, jrows, jcols in ga:
                        SA[:, jcols, :] += Abar[(a, j)][jrows]
                    buf[:, sA * r : (sA + wA) * r] = (
                        SA.transpose(1, 0, 2).reshape(Mi, -1)
                    )
        del Abar

    # 1-d base: one permuted Toeplitz multiply per remaining class.
    axis = dim - 1
    for a in order_a[1]:
        R = rhs.pop((a, 1))
        ranks = canonical_to_sorted_1d(a)
        S = np.empty_like(R)
        S[ranks] = R
        results[(a, 1)] = plan.toeplitz[(axis, a)].matmat(S)[ranks]

    # Bottom-up sweep in reverse dimension order: finish the B parts with
    # batched Toeplitz multiplies, add the A parts, emit each class's output.
    for dp in range(2, dim + 1):
        axis = dim - dp
        Bbar = {}
        U = {}
        for a in order_a[dp]:
            U[a] = np.empty((plan._class_sizes[(a, dp)], plan._units[(a, dp)] * r))
            for i, ckey, csz, cu, sB, wB, sA, wA, boff, bsz, Mi, ga in (
                plan._emit_at[dp][a]
            ):
                Bbar[(a, i)] = results[ckey][:, sB * r : (sB + wB) * r].reshape(
                    Mi, 1 << i, -1
                )
        for i, (n_i, tot, rows) in enumerate(plan._levels_at[dp]):
            SB = np.zeros((n_i, tot * r))
            for a, off, w, boff, bsz, Mi, gb, ckey, sA, wA in rows:
                for j, jcols, jrows in gb:
                    SB[jrows, off * r : (off + w) * r] += (
                        Bbar[(a, j)][jcols].transpose(1, 0, 2).reshape(1 << j, w * r)
                    )
            Bout = plan.toeplitz[(axis, i)].matmat(SB)[0::2]
            for a, off, w, boff, bsz, Mi, gb, ckey, sA, wA in rows:
                acc = Bout[:, off * r : (off + w) * r]
                if sA is not None:
                    A = results[ckey][:, sA * r : (sA + wA) * r]
                    acc = acc + A.reshape(Mi, 1 << i, -1).transpose(1, 0, 2).reshape(
                        1 << i, w * r
                    )
                U[a][boff : boff + bsz] = acc.reshape(bsz, -1)
        for a in order_a[dp]:
            results[(a, dp)] = U[a]
        for key in [k for k in results if k[1] == dp - 1]:
            del results[key]

    out = results[(ell, dim)] * plan.kernel.output_scale
    return out[:, 0] if single else out


# ---- probes ----------------------------------------------------------------


def mvm_cost_probe(plan, reps=3, seed=0):
    """Wall time per batched MVM, plan build time, and peak algorithmic bytes.

    Memory is the tracemalloc high-water mark of one multiply (workspace)
    plus the resident size of the plan's cached spectra and index maps;
    the measuring pass is separate from the timing pass.
    """
    import tracemalloc

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(plan.grid.size)
    sg_mvm_batched(plan, v)  # warm-up, discarded
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        sg_mvm_batched(plan, v)
        times.append(time.perf_counter() - t0)
    plan_bytes = sum(t.spectrum.nbytes + t.first_column.nbytes
                     for t in plan.toeplitz.values())
    for a in range(plan.resolution + 1):
        plan_bytes += canonical_to_sorted_1d(a).nbytes
    for dp in range(2, plan.dim + 1):
        for a in range(plan.resolution + 1):
            for i in range(a + 1):
                for j in range(i, a + 1):
                    plan_bytes += sparse_injection(a - j, a - i, dp - 1).nbytes
    tracemalloc.start()
    sg_mvm_batched(plan, v)
    _, ws_peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return {
        "mvm_s": float(np.mean(times)),
        "build_s": plan.build_seconds,
        "peak_bytes": int(plan_bytes + ws_peak),
    }
