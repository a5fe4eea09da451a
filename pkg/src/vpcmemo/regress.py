"""On-line memory queries: k-NN and Gaussian-process regression.

Both regressors learn the map from a visual configuration x = (s, area,
angle) to an output y = (command, way point). The GP uses an anisotropic RBF
kernel with a constant mean of zero command and the goal features, so
queries far from the training data fall back to "stand still, aim at the
goal". Everything expensive is precomputed at fit time; a query is one
kernel-vector build and one matrix product.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize as scipy_minimize

from .errors import DimensionMismatch, EmptyStore, FormatError, IllConditioned
from .model import ControlSequence

if TYPE_CHECKING:
    from .memory import MemoryStore

JITTER_LADDER = tuple(10.0 ** e for e in range(-10, -3))  # 1e-10 .. 1e-4


@dataclass
class QueryResult:
    y_hat: np.ndarray
    regressor: str
    query_time: float


# ---------------------------------------------------------------------------
# k-nearest neighbors
# ---------------------------------------------------------------------------

def standardize_columns(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column mean and (floored) standard deviation for distance scaling.

    The raw x columns mix pixels, px^2 areas, and radians; standardizing
    keeps any single unit from dominating the Euclidean metric.
    """
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    sigma[sigma < 1e-12] = 1.0
    return mu, sigma


def knn_query(store: "MemoryStore", x_hat: np.ndarray, K: int = 1) -> QueryResult:
    """Mean of the K nearest stored outputs under standardized Euclidean distance.

    Exact distance ties resolve to the lowest canonical (traj, step) row.
    """
    t0 = time.perf_counter()
    if store.size == 0:
        raise EmptyStore("k-NN query against an empty memory")
    if K < 1:
        raise ValueError("K must be >= 1")
    K = min(K, store.size)
    x = np.asarray(x_hat, dtype=float).reshape(-1)
    if x.size != store.X.shape[1]:
        raise DimensionMismatch(f"query has {x.size} entries, store rows have {store.X.shape[1]}")
    _, sigma = store.standardization()
    d2 = np.sum(((store.X - x) / sigma) ** 2, axis=1)
    nearest = np.argsort(d2, kind="stable")[:K]  # stable sort = index tie-break
    y = store.Y[nearest].mean(axis=0)
    return QueryResult(y_hat=y, regressor="knn", query_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Gaussian process regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GprFitConfig:
    restarts: int = 5
    max_evals: int = 200
    seed: int = 0


@dataclass
class GprModel:
    """Fitted GP: shared anisotropic RBF kernel across all output dimensions.

    lengthscale_inv holds the diagonal of the kernel metric (inverse squared
    length scales); lam is the precomputed (K + noise I)^-1 (Y - m) block so
    inference needs no factorization.
    """

    X: np.ndarray                # (D', n) training inputs after subsampling
    lam: np.ndarray              # (D', p)
    mean: np.ndarray             # (p,)
    signal_var: float            # phi_0^2
    noise_var: float             # phi_s
    lengthscale_inv: np.ndarray  # (n,) diagonal of Phi
    nmll: float = float("nan")

    def kernel_vector(self, x: np.ndarray) -> np.ndarray:
        diff = self.X - x
        return self.signal_var * np.exp(-0.5 * (diff * diff) @ self.lengthscale_inv)


def rbf_kernel(X: np.ndarray, signal_var: float, phi: np.ndarray) -> np.ndarray:
    scaled = X * np.sqrt(phi)
    sq = np.sum(scaled * scaled, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (scaled @ scaled.T)
    np.maximum(d2, 0.0, out=d2)
    return signal_var * np.exp(-0.5 * d2)


def _chol_with_jitter(A: np.ndarray):
    """Cholesky factorization, escalating diagonal jitter up to the ladder top."""
    try:
        return cho_factor(A, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(A)))
    for jitter in JITTER_LADDER:
        try:
            return cho_factor(A + jitter * scale * np.eye(len(A)), lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise IllConditioned("kernel matrix not factorizable at the jitter ceiling")


def _nmll_and_grad(theta: np.ndarray, X: np.ndarray, Yc: np.ndarray
                   ) -> tuple[float, np.ndarray]:
    """Negative marginal log-likelihood over log-hyperparameters and gradient.

    theta = (log signal_var, log noise_var, log phi_1..phi_n); all outputs
    share the kernel, so their log-likelihoods add.
    """
    D, p = Yc.shape
    signal_var = np.exp(theta[0])
    noise_var = np.exp(theta[1])
    phi = np.exp(theta[2:])
    K = rbf_kernel(X, signal_var, phi)
    A = K + noise_var * np.eye(D)
    try:
        c, lower = cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((c, lower), Yc)          # (D, p)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    nmll = 0.5 * float(np.sum(alpha * Yc)) + 0.5 * p * logdet \
        + 0.5 * D * p * np.log(2.0 * np.pi)

    Ainv = cho_solve((c, lower), np.eye(D))
    W = p * Ainv - alpha @ alpha.T             # tr(W dA) terms, all outputs
    grad = np.empty_like(theta)
    grad[0] = 0.5 * float(np.sum(W * K))                    # d/dlog signal_var
    grad[1] = 0.5 * noise_var * float(np.trace(W))          # d/dlog noise_var
    for d in range(X.shape[1]):
        diff = X[:, d][:, None] - X[:, d][None, :]
        dK = K * (-0.5 * phi[d] * diff * diff)
        grad[2 + d] = 0.5 * float(np.sum(W * dK))
    return nmll, grad


def gpr_fit(store: "MemoryStore", subsample: int, s_star: np.ndarray,
            fit_cfg: GprFitConfig = GprFitConfig()) -> GprModel:
    """Fit hyperparameters by minimizing the marginal log-likelihood.

    Rows are thinned per trajectory (every subsample-th step, step 0 kept),
    exact duplicate inputs are dropped, and the optimizer runs a fixed number
    of seeded restarts so the fit is deterministic.
    """
    if store.size == 0:
        raise EmptyStore("cannot fit a GP on an empty memory")
    keep = store.step_ids % max(1, subsample) == 0
    X = store.X[keep]
    Y = store.Y[keep]
    if len(X) == 0:
        raise EmptyStore("subsampling removed every row")
    _, unique_idx = np.unique(X, axis=0, return_index=True)
    unique_idx.sort()
    X, Y = X[unique_idx], Y[unique_idx]

    q = store.q
    mean = np.concatenate([np.zeros(q), np.asarray(s_star, dtype=float)])
    if mean.size != Y.shape[1]:
        raise DimensionMismatch(f"mean has {mean.size} entries, outputs {Y.shape[1]}")
    Yc = Y - mean

    # Heuristic center of the search: unit-variance metric, data-scaled signal.
    col_var = np.maximum(X.var(axis=0), 1e-6)
    y_var = max(float(Yc.var()), 1e-8)
    theta0 = np.concatenate([[np.log(y_var), np.log(1e-4 * y_var)], -np.log(col_var)])

    rng = np.random.default_rng(fit_cfg.seed)
    best_theta, best_val = theta0, np.inf
    for trial in range(fit_cfg.restarts):
        start = theta0 if trial == 0 else theta0 + rng.normal(0.0, 1.5, size=theta0.size)
        res = scipy_minimize(_nmll_and_grad, start, args=(X, Yc), jac=True,
                             method="L-BFGS-B",
                             bounds=[(-40.0, 40.0)] * theta0.size,
                             options={"maxfun": fit_cfg.max_evals})
        if res.fun < best_val:
            best_val, best_theta = float(res.fun), np.asarray(res.x)
    init_val, _ = _nmll_and_grad(theta0, X, Yc)
    if init_val < best_val:
        best_val, best_theta = float(init_val), theta0

    signal_var = float(np.exp(best_theta[0]))
    noise_var = float(np.exp(best_theta[1]))
    phi = np.exp(best_theta[2:])
    A = rbf_kernel(X, signal_var, phi) + noise_var * np.eye(len(X))
    (c, lower), _ = _chol_with_jitter(A)
    lam = cho_solve((c, lower), Yc)
    return GprModel(X=X, lam=lam, mean=mean, signal_var=signal_var,
                    noise_var=noise_var, lengthscale_inv=phi, nmll=best_val)


def gpr_query(model: GprModel, x_hat: np.ndarray) -> QueryResult:
    """Posterior mean at x_hat: mean + k(x_hat, X) @ lam."""
    t0 = time.perf_counter()
    x = np.asarray(x_hat, dtype=float).reshape(-1)
    if x.size != model.X.shape[1]:
        raise DimensionMismatch(f"query has {x.size} entries, model expects {model.X.shape[1]}")
    y = model.mean + model.kernel_vector(x) @ model.lam
    return QueryResult(y_hat=y, regressor="gpr", query_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# warm start and way point assembly
# ---------------------------------------------------------------------------

def assemble_warm_start(y_hat: np.ndarray, q: int, Np: int, Nc: int = 1) -> ControlSequence:
    """Tile the predicted command (first q entries of y_hat) over the window."""
    y = np.asarray(y_hat, dtype=float).reshape(-1)
    if y.size <= q:
        raise DimensionMismatch(f"regression output has {y.size} entries, need more than q={q}")
    return ControlSequence(np.tile(y[:q], (Nc, 1)), Np)


def extract_way_point(y_hat: np.ndarray, q: int, n_f: int) -> np.ndarray:
    """The way point: remaining n_f entries of y_hat."""
    y = np.asarray(y_hat, dtype=float).reshape(-1)
    if y.size != q + n_f:
        raise DimensionMismatch(f"regression output has {y.size} entries, expected {q + n_f}")
    return y[q:].copy()


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_gpr(model: GprModel, path: str | Path) -> None:
    """Text format with full round-trip precision: header, then X and lam rows."""
    path = Path(path)
    D, n = model.X.shape
    p = model.lam.shape[1]
    lines = [
        f"# vpc-gpr v1, rows={D}, n={n}, p={p}",
        "signal_var," + f"{model.signal_var:.17g}",
        "noise_var," + f"{model.noise_var:.17g}",
        "lengthscale_inv," + ",".join(f"{v:.17g}" for v in model.lengthscale_inv),
        "mean," + ",".join(f"{v:.17g}" for v in model.mean),
    ]
    for i in range(D):
        row = np.concatenate([model.X[i], model.lam[i]])
        lines.append(",".join(f"{v:.17g}" for v in row))
    path.write_text("\n".join(lines) + "\n")


def load_gpr(path: str | Path) -> GprModel:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# vpc-gpr v1"):
        raise FormatError("missing vpc-gpr v1 header", line=1)
    try:
        meta = dict(item.strip().split("=") for item in lines[0][1:].split(",")[1:])
        D, n, p = int(meta["rows"]), int(meta["n"]), int(meta["p"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad header: {exc}", line=1) from exc

    def labeled(idx: int, label: str, count: int) -> np.ndarray:
        if idx >= len(lines):
            raise FormatError(f"missing {label} line", line=idx + 1)
        parts = lines[idx].split(",")
        if parts[0] != label or len(parts) != count + 1:
            raise FormatError(f"expected '{label}' with {count} values", line=idx + 1)
        return np.array([float(v) for v in parts[1:]])

    signal_var = float(labeled(1, "signal_var", 1)[0])
    noise_var = float(labeled(2, "noise_var", 1)[0])
    phi = labeled(3, "lengthscale_inv", n)
    mean = labeled(4, "mean", p)
    if len(lines) < 5 + D:
        raise FormatError(f"expected {D} data rows, found {len(lines) - 5}", line=len(lines))
    X = np.empty((D, n))
    lam = np.empty((D, p))
    for i in range(D):
        parts = lines[5 + i].split(",")
        if len(parts) != n + p:
            raise FormatError(f"expected {n + p} values, found {len(parts)}", line=6 + i)
        try:
            row = np.array([float(v) for v in parts])
        except ValueError as exc:
            raise FormatError(str(exc), line=6 + i) from exc
        X[i], lam[i] = row[:n], row[n:]
    return GprModel(X=X, lam=lam, mean=mean, signal_var=signal_var,
                    noise_var=noise_var, lengthscale_inv=phi)
