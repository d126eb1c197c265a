"""SKI kernel operator, conjugate-gradient solver, and GP regression.

The data kernel matrix is approximated as W K_G W^T + sigma^2 I with W a
row-sparse interpolation matrix onto a structured grid and K_G applied by a
fast backend (sparse-grid plan, dense Kronecker lattice, or the naive dense
reference).  Fitting solves (W K_G W^T + sigma^2 I) alpha = y by CG; the
predictive mean is W_* (K_G (W^T alpha)), whose grid-sized inner part is
precomputed once at fit time so prediction is a single sparse multiply.

An exact dense-GP oracle (Cholesky) provides reference means and marginal
log-likelihoods for validation at desk scale.
"""

import base64
import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .grids import build_sparse_grid
from .interp import BaseRule, UniformLattice, assemble_W
from .kernels import KroneckerToeplitz, ProductKernel
from .sgmvm import build_plan, sg_mvm_batched

NOISE_FLOOR = 1e-10
ORACLE_POINT_CAP = 5000


class CgFailure(RuntimeError):
    """CG did not reach tolerance; carries the iteration stats."""

    def __init__(self, message, stats):
        super().__init__(message)
        self.stats = stats


# ---- SKI operator ----------------------------------------------------------


class SkiOperator:
    """Symmetric PSD operator v -> W K_G W^T v + sigma^2 v."""

    def __init__(self, W, grid_mvm, sigma2, k0=1.0):
        if sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        self.W = W
        self.grid_mvm = grid_mvm
        self.sigma2 = float(sigma2)
        self.k0 = float(k0)
        self.n = W.shape[0]

    @property
    def shape(self):
        return (self.n, self.n)

    def matvec(self, v):
        return self.W.apply(self.grid_mvm(self.W.apply_transpose(v))) \
            + self.sigma2 * v

    def jacobi_diagonal(self):
        """diag estimate ||W_i||^2 k(0) + sigma^2 (exact for W rows hitting
        a single grid point; an upper-bound-flavored proxy otherwise)."""
        sq = self.W.matrix.multiply(self.W.matrix)
        row_norms = np.asarray(sq.sum(axis=1)).ravel()
        return row_norms * self.k0 + self.sigma2


def ski_matvec(op, v):
    return op.matvec(np.asarray(v, dtype=np.float64))


def materialize_ski(W, K_grid, sigma2):
    """Dense W K_G W^T + sigma^2 I; the quadratic-cost reference."""
    Wd = W.matrix.toarray()
    return Wd @ K_grid @ Wd.T + sigma2 * np.eye(W.shape[0])


# ---- conjugate gradients ---------------------------------------------------


@dataclass(frozen=True)
class CgConfig:
    rel_tolerance: float = 1e-4
    max_iters: int = 1000
    preconditioner: str = "none"

    def __post_init__(self):
        if self.rel_tolerance <= 0:
            raise ValueError("rel_tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.preconditioner not in ("none", "jacobi"):
            raise ValueError("preconditioner must be 'none' or 'jacobi'")


@dataclass
class CgStats:
    n_iters: int = 0
    converged: bool = False
    diverged: bool = False
    final_rel_residual: float = 0.0
    residual_norms: list = field(default_factory=list)


def cg_solve(op, y, cfg=CgConfig()):
    """Solve op @ alpha = y by (optionally Jacobi-preconditioned) CG.

    Runs until the relative residual drops below cfg.rel_tolerance, the
    iteration budget is spent (reported in stats, not raised), or the
    residual grows past 10x its initial norm (flagged as divergence).
    """
    y = np.asarray(y, dtype=np.float64)
    stats = CgStats()
    ynorm = float(np.linalg.norm(y))
    if ynorm == 0.0:
        stats.converged = True
        return np.zeros_like(y), stats

    inv_diag = None
    if cfg.preconditioner == "jacobi":
        d = op.jacobi_diagonal()
        inv_diag = np.where(d > 0, 1.0 / np.maximum(d, 1e-300), 1.0)

    x = np.zeros_like(y)
    r = y.copy()
    z = r * inv_diag if inv_diag is not None else r
    p = z.copy()
    rz = float(r @ z)
    prev_norm = ynorm
    warned = False
    for it in range(1, cfg.max_iters + 1):
        Ap = op.matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            stats.diverged = True  # operator not PD on this subspace
            break
        step = rz / pAp
        x += step * p
        r -= step * Ap
        rn = float(np.linalg.norm(r))
        stats.n_iters = it
        stats.residual_norms.append(rn)
        stats.final_rel_residual = rn / ynorm
        if rn > prev_norm * (1 + 1e-12) and not warned:
            warnings.warn(
                f"CG residual increased at iteration {it} "
                f"({prev_norm:.3e} -> {rn:.3e})", RuntimeWarning)
            warned = True
        prev_norm = rn
        if rn <= cfg.rel_tolerance * ynorm:
            stats.converged = True
            break
        if rn > 10.0 * ynorm:
            stats.diverged = True
            break
        z = r * inv_diag if inv_diag is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, stats


# ---- domain map ------------------------------------------------------------


@dataclass(frozen=True)
class DomainMap:
    """Per-dimension affine map of the data box into [delta, 1-delta]."""

    lo: np.ndarray
    width: np.ndarray
    delta: float

    @classmethod
    def fit(cls, X, delta):
        mn = X.min(axis=0)
        mx = X.max(axis=0)
        span = mx - mn
        eps = 0.01 * span
        return cls(lo=mn - eps, width=span + 2 * eps, delta=float(delta))

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        out = np.full_like(X, 0.5)
        ok = self.width > 0
        out[:, ok] = self.delta + (X[:, ok] - self.lo[ok]) / self.width[ok] \
            * (1 - 2 * self.delta)
        return out

    def inverse(self, U):
        U = np.asarray(U, dtype=np.float64)
        out = np.broadcast_to(self.lo, U.shape).copy()
        ok = self.width > 0
        out[:, ok] = self.lo[ok] + (U[:, ok] - self.delta) * self.width[ok] \
            / (1 - 2 * self.delta)
        return out

    def to_json(self):
        return {"lo": self.lo.tolist(), "width": self.width.tolist(),
                "delta": self.delta}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["lo"], dtype=np.float64),
                   np.asarray(obj["width"], dtype=np.float64),
                   float(obj["delta"]))


# ---- GP model --------------------------------------------------------------


@dataclass(frozen=True)
class GpConfig:
    kernel: ProductKernel
    sigma2: float
    grid: str = "sparse"            # sparse | dense
    resolution: int = 4             # sparse-grid resolution
    dense_count: int = 8            # points per dimension for grid="dense"
    rule: str = "simplicial"
    method: str = "combination"     # combination | subsampled
    cg: CgConfig = field(default_factory=CgConfig)

    def __post_init__(self):
        if self.grid not in ("sparse", "dense"):
            raise ValueError("grid must be 'sparse' or 'dense'")
        if self.grid == "dense" and self.dense_count < 1:
            raise ValueError("dense_count must be >= 1")
        BaseRule(self.rule)


def _build_backend(cfg, dim, plan_factory=None):
    """(grid object for W assembly, grid kernel MVM, half-spacing delta).

    plan_factory lets callers supply prebuilt/cached MVM plans; it must
    accept (resolution, dim, kernel) like build_plan.
    """
    if cfg.grid == "sparse":
        grid = build_sparse_grid(cfg.resolution, dim)
        plan = (plan_factory or build_plan)(cfg.resolution, dim, cfg.kernel)
        return grid, lambda v: sg_mvm_batched(plan, v), 2.0 ** -(cfg.resolution + 1)
    lattice = UniformLattice.unit(dim, cfg.dense_count)
    kron = KroneckerToeplitz(cfg.kernel, lattice.counts, lattice.spacings)
    return lattice, kron.mvm, 0.5 / cfg.dense_count


class GpModel:
    """Fitted SKI GP: immutable after fit()."""

    def __init__(self, config, domain_map, grid, grid_dual, alpha, fit_stats,
                 n_train):
        self.config = config
        self.domain_map = domain_map
        self.grid = grid
        self.grid_dual = grid_dual      # K_G (W^T alpha), grid-sized
        self.alpha = alpha
        self.fit_stats = fit_stats
        self.n_train = n_train

    def predict_mean(self, Xs):
        Xs = np.asarray(Xs, dtype=np.float64)
        if Xs.ndim != 2:
            raise ValueError("Xs must be (m, d)")
        U = self.domain_map.forward(Xs)
        Ws = assemble_W(U, self.grid, BaseRule(self.config.rule),
                        method=self.config.method)
        return Ws.apply(self.grid_dual)

    def save(self, path):
        cfg = self.config
        payload = {
            "format": "skigrid-gp-1",
            "kernel": json.loads(cfg.kernel.to_json(sigma2=cfg.sigma2)),
            "grid": {"kind": cfg.grid, "resolution": cfg.resolution,
                     "dense_count": cfg.dense_count, "dim": len(self.domain_map.lo)},
            "rule": cfg.rule,
            "method": cfg.method,
            "cg": {"rel_tolerance": cfg.cg.rel_tolerance,
                   "max_iters": cfg.cg.max_iters,
                   "preconditioner": cfg.cg.preconditioner},
            "domain_map": self.domain_map.to_json(),
            "n_train": self.n_train,
            "alpha": _b64(self.alpha),
            "grid_dual": _b64(self.grid_dual),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)


def _b64(arr):
    return base64.b64encode(np.asarray(arr, dtype=np.float64).tobytes()).decode()


def _unb64(s):
    return np.frombuffer(base64.b64decode(s), dtype=np.float64).copy()


def load_model(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "skigrid-gp-1":
        raise ValueError(f"unrecognized model format in {path}")
    kernel = ProductKernel.from_json(json.dumps(payload["kernel"]))
    sigma2 = payload["kernel"]["sigma2"]
    g = payload["grid"]
    cfg = GpConfig(
        kernel=kernel, sigma2=sigma2, grid=g["kind"],
        resolution=g["resolution"], dense_count=g["dense_count"],
        rule=payload["rule"], method=payload["method"],
        cg=CgConfig(**payload["cg"]),
    )
    grid = (build_sparse_grid(cfg.resolution, g["dim"]) if cfg.grid == "sparse"
            else UniformLattice.unit(g["dim"], cfg.dense_count))
    return GpModel(
        config=cfg,
        domain_map=DomainMap.from_json(payload["domain_map"]),
        grid=grid,
        grid_dual=_unb64(payload["grid_dual"]),
        alpha=_unb64(payload["alpha"]),
        fit_stats=None,
        n_train=payload["n_train"],
    )


def fit(config, X, y, plan_factory=None):
    """Fit the SKI GP: map the domain, assemble W, solve for alpha by CG."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) < 1:
        raise ValueError("X must be (n, d) with n >= 1")
    if y.shape != (len(X),):
        raise ValueError("y must be one target per row of X")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")
    if config.sigma2 < NOISE_FLOOR:
        raise ValueError(
            f"sigma2={config.sigma2} below the CG noise floor {NOISE_FLOOR}")
    dim = X.shape[1]
    if config.kernel.dim != dim:
        raise ValueError(f"kernel dim {config.kernel.dim} != data dim {dim}")

    grid, grid_mvm, delta = _build_backend(config, dim, plan_factory)
    dmap = DomainMap.fit(X, delta)
    W = assemble_W(dmap.forward(X), grid, BaseRule(config.rule),
                   method=config.method)
    op = SkiOperator(W, grid_mvm, config.sigma2, k0=config.kernel.output_scale)
    alpha, stats = cg_solve(op, y, config.cg)
    if not stats.converged:
        raise CgFailure(
            f"CG stopped after {stats.n_iters} iterations at relative "
            f"residual {stats.final_rel_residual:.3e}"
            + (" (diverged)" if stats.diverged else ""), stats)
    grid_dual = grid_mvm(W.apply_transpose(alpha))
    return GpModel(config, dmap, grid, grid_dual, alpha, stats, len(X))


def predict_mean(model, Xs):
    return model.predict_mean(Xs)


# ---- exact dense GP oracle -------------------------------------------------


def exact_gp_oracle(X, y, Xs, kernel, sigma2, point_cap=ORACLE_POINT_CAP):
    """Dense-Cholesky GP posterior mean at Xs and log marginal likelihood.

    Retries the factorization once with a trace-scaled jitter (1e-8 tr/n)
    if the covariance is numerically indefinite.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n = len(X)
    if point_cap is not None and n > point_cap:
        raise ValueError(f"exact oracle limited to {point_cap} points, got {n}")
    K = kernel.pairwise(X)
    K[np.diag_indices_from(K)] += sigma2
    try:
        cho = scipy.linalg.cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        K[np.diag_indices_from(K)] += 1e-8 * np.trace(K) / n
        cho = scipy.linalg.cho_factor(K, lower=True)
    alpha = scipy.linalg.cho_solve(cho, y)
    logp = float(
        -0.5 * (y @ alpha)
        - np.log(np.diag(cho[0])).sum()
        - 0.5 * n * np.log(2 * np.pi)
    )
    mean = kernel.pairwise(np.atleast_2d(Xs), X) @ alpha
    return mean, logp


# ---- dataset I/O -----------------------------------------------------------


def read_xy_csv(path):
    """Read a dataset CSV: one row per sample, last column the target.

    A single leading header row is allowed and detected by a non-numeric
    cell.  Malformed rows raise ValueError naming the offending line.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        width = None
        for lineno, cells in enumerate(reader, start=1):
            if not cells or all(c.strip() == "" for c in cells):
                continue
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ValueError(
                    f"{path}: line {lineno}: non-numeric value in {cells!r}"
                ) from None
            if width is None:
                width = len(vals)
                if width < 2:
                    raise ValueError(
                        f"{path}: line {lineno}: need >= 2 columns "
                        "(features..., target)")
            elif len(vals) != width:
                raise ValueError(
                    f"{path}: line {lineno}: expected {width} columns, "
                    f"got {len(vals)}")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    return data[:, :-1], data[:, -1]
