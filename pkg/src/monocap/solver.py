"""Box-constrained Levenberg-Marquardt for stacked weighted residual blocks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

log = logging.getLogger(__name__)

# dense normal equations up to this many free parameters
DENSE_LIMIT = 2500


class SolverError(RuntimeError):
    pass


@dataclass
class ResidualBlock:
    """One weighted term ``weight * ||residual(x)||^2`` of the objective."""
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], object]
    weight: float = 1.0
    name: str = "block"


@dataclass
class BoxConstraints:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.upper):
            raise ValueError("box constraint with lower > upper")

    @classmethod
    def unbounded(cls, n: int) -> "BoxConstraints":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def contains(self, x: np.ndarray) -> bool:
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass
class LMOptions:
    max_iters: int = 100
    gradient_tol: float = 1e-10
    step_tol: float = 1e-10
    function_tol: float = 1e-10
    initial_damping: float = 1e-3
    max_damping: float = 1e16
    damping_up: float = 10.0
    damping_down: float = 10.0


@dataclass
class LMReport:
    iterations: int = 0
    accepted: int = 0
    initial_objective: float = float("nan")
    final_objective: float = float("nan")
    termination: str = ""
    warnings: list[str] = field(default_factory=list)
    history: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.termination not in ("max_iters", "damping")


def _evaluate(blocks, x):
    parts = []
    for b in blocks:
        r = np.asarray(b.residual(x), dtype=float).ravel()
        if not np.all(np.isfinite(r)):
            raise SolverError(f"residual block {b.name!r} returned non-finite values")
        parts.append(np.sqrt(b.weight) * r)
    return np.concatenate(parts) if parts else np.zeros(0)


def _jacobian(blocks, x, n):
    mats, sparse = [], False
    for b in blocks:
        J = b.jacobian(x)
        if sp.issparse(J):
            sparse = True
            J = sp.csr_matrix(J)
            if not np.all(np.isfinite(J.data)):
                raise SolverError(f"jacobian of block {b.name!r} is non-finite")
        else:
            J = np.asarray(J, dtype=float).reshape(-1, n)
            if not np.all(np.isfinite(J)):
                raise SolverError(f"jacobian of block {b.name!r} is non-finite")
        mats.append(np.sqrt(b.weight) * J)
    if sparse:
        return sp.vstack([sp.csr_matrix(m) for m in mats]).tocsr()
    return np.vstack(mats)


def objective(blocks, x) -> float:
    r = _evaluate(blocks, np.asarray(x, dtype=float))
    return float(r @ r)


def _solve_damped(A, g, diag, mu, free):
    """Solve (A + mu D) d = -g over the free coordinates."""
    idx = np.flatnonzero(free)
    d = np.zeros_like(g)
    if len(idx) == 0:
        return d
    Dff = diag[idx] * mu
    if sp.issparse(A):
        Aff = A[idx][:, idx]
        if len(idx) <= DENSE_LIMIT:
            Aff = Aff.toarray()
    else:
        Aff = A[np.ix_(idx, idx)]
    if sp.issparse(Aff):
        M = (Aff + sp.diags(Dff)).tocsc()
        sol = scipy.sparse.linalg.spsolve(M, -g[idx])
    else:
        M = Aff.copy()
        M[np.diag_indices_from(M)] += Dff
        sol = scipy.linalg.cho_solve(scipy.linalg.cho_factor(M, check_finite=False), -g[idx],
                                     check_finite=False)
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError("non-finite step")
    d[idx] = sol
    return d


def lm_minimize(blocks: list[ResidualBlock], x0, box: BoxConstraints | None = None,
                opts: LMOptions | None = None) -> tuple[np.ndarray, LMReport]:
    """Minimise ``sum_b w_b ||r_b(x)||^2`` subject to ``box``.

    Projected LM: coordinates sitting on a bound with the gradient pushing
    outward are frozen for the step, the remaining step is clamped back into
    the box, and a step is accepted only if it lowers the objective.
    """
    opts = opts or LMOptions()
    x = np.asarray(x0, dtype=float).copy()
    n = len(x)
    box = box or BoxConstraints.unbounded(n)
    report = LMReport()
    if not box.contains(x):
        report.warnings.append("initial point projected into the box")
        x = box.project(x)

    r = _evaluate(blocks, x)
    f = float(r @ r)
    report.initial_objective = f
    report.history.append(f)
    mu = opts.initial_damping
    need_jac = True
    while report.iterations < opts.max_iters:
        if need_jac:
            J = _jacobian(blocks, x, n)
            g = J.T @ r
            A = (J.T @ J)
            if sp.issparse(A):
                A = A.tocsr()
                diag = A.diagonal()
            else:
                diag = np.diag(A).copy()
            # Marquardt scaling with a floor so unobserved parameters stay damped
            floor = 1e-9 * max(float(diag.max(initial=0.0)), 1e-12)
            diag = np.maximum(diag, floor)
            at_lo = (x <= box.lower) & (g > 0)
            at_hi = (x >= box.upper) & (g < 0)
            free = ~(at_lo | at_hi)
            need_jac = False
        pg = np.where(free, g, 0.0)
        if np.max(np.abs(pg), initial=0.0) <= opts.gradient_tol:
            report.termination = "gradient"
            break
        report.iterations += 1
        try:
            step = _solve_damped(A, g, diag, mu, free)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, RuntimeError):
            mu *= opts.damping_up
            if mu > opts.max_damping:
                report.termination = "damping"
                break
            continue
        x_new = box.project(x + step)
        actual = x_new - x
        if np.linalg.norm(actual) <= opts.step_tol * (np.linalg.norm(x) + opts.step_tol):
            report.termination = "step"
            break
        r_new = _evaluate(blocks, x_new)
        f_new = float(r_new @ r_new)
        if f_new < f:
            rel = (f - f_new) / max(f, 1e-300)
            x, r, f = x_new, r_new, f_new
            report.accepted += 1
            report.history.append(f)
            mu = max(mu / opts.damping_down, 1e-15)
            need_jac = True
            if f == 0.0 or rel <= opts.function_tol:
                report.termination = "function"
                break
        else:
            mu *= opts.damping_up
            if mu > opts.max_damping:
                report.termination = "damping"
                break
    else:
        report.termination = "max_iters"
    report.final_objective = f
    log.debug("lm: %d iterations, objective %.6g -> %.6g (%s)", report.iterations,
              report.initial_objective, f, report.termination)
    return x, report


def check_jacobian(block: ResidualBlock, x, eps: float = 1e-6) -> float:
    """Max of |J_analytic - J_fd| / (1 + |J_fd|) using central differences."""
    x = np.asarray(x, dtype=float)
    J = block.jacobian(x)
    J = J.toarray() if sp.issparse(J) else np.asarray(J, dtype=float)
    J = J.reshape(-1, len(x))
    Jn = np.empty_like(J)
    for k in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[k] += eps
        xm[k] -= eps
        Jn[:, k] = (np.asarray(block.residual(xp), float).ravel()
                    - np.asarray(block.residual(xm), float).ravel()) / (2 * eps)
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(Jn))):
        return float("inf")
    if J.size == 0:
        return 0.0
    return float(np.max(np.abs(J - Jn) / (1.0 + np.abs(Jn))))
