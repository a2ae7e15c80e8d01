"""Minimax moment estimation over norm-balled one-hot classes.

The empirical loss per equation is the supremum of a concave quadratic
over a Euclidean ball (the dual test-function class), which this module
solves exactly: interior stationary point when it fits, otherwise the
boundary solution located by safeguarded root finding on the shifted
normal equations.  The outer minimization is projected subgradient
descent with best-iterate tracking and an exact interior polish.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .envs import Env
from .ies import (EquationSpec, IesProblem, alpha_batch, batch_from_dataset,
                  batch_from_population, cond_index, offset_values,
                  term_contributions)
from .scm import Dataset, ScmError


class SolverError(ScmError):
    pass


# ---------------------------------------------------------------------------
# Moment assembly
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EquationMoments:
    """Finite-dimensional footprint of one equation on a row batch.

    ``lin @ w + offset`` equals the dual-featured empirical moment
    (1/T_k) sum_i alpha_k(row_i; w) psi_k(z_i) for every weight vector w.
    """

    gram: np.ndarray
    lin: np.ndarray
    offset: np.ndarray
    count: int
    active: bool


@dataclass(eq=False)
class MomentSystem:
    problem: IesProblem
    equations: list[EquationMoments]
    kind: str

    @property
    def counts(self) -> list[int]:
        return [e.count for e in self.equations]


def _assemble_equation(problem: IesProblem, eq: EquationSpec, batch,
                       ) -> EquationMoments:
    d = problem.dual_dim(eq)
    dim = problem.total_dim
    if batch.size == 0:
        return EquationMoments(gram=np.zeros((d, d)), lin=np.zeros((d, dim)),
                               offset=np.zeros(d), count=0, active=False)
    z = cond_index(problem, eq, batch)
    w = batch.weights
    gram = np.zeros((d, d))
    np.add.at(gram, (z, z), w)
    lin = np.zeros((d, dim))
    for pos, coeff in term_contributions(problem, eq, batch):
        np.add.at(lin, (z, pos), coeff * w)
    off = np.zeros(d)
    np.add.at(off, z, offset_values(problem, eq, batch) * w)
    return EquationMoments(gram=gram, lin=lin, offset=off,
                           count=batch.count, active=True)


def assemble_moments(problem: IesProblem, dataset: Dataset) -> MomentSystem:
    eqs = []
    for eq in problem.equations:
        m = _assemble_equation(problem, eq, batch_from_dataset(problem, eq, dataset))
        if not m.active:
            warnings.warn(f"equation {eq.name}: empty subset, marked inactive")
        eqs.append(m)
    if not any(e.active for e in eqs):
        raise SolverError("every equation has an empty subset")
    return MomentSystem(problem=problem, equations=eqs, kind="empirical")


def population_moments(problem: IesProblem, env: Env) -> MomentSystem:
    eqs = [_assemble_equation(problem, eq, batch_from_population(problem, eq, env))
           for eq in problem.equations]
    return MomentSystem(problem=problem, equations=eqs, kind="population")


# ---------------------------------------------------------------------------
# Exact ball-constrained concave-quadratic supremum
# ---------------------------------------------------------------------------

class QuadBall:
    """max_beta  m' beta - 1/2 beta' G beta  subject to ||beta|| <= D."""

    def __init__(self, gram: np.ndarray, radius: float, tol: float = 1e-12):
        gram = np.asarray(gram, dtype=float)
        if not np.allclose(gram, gram.T, atol=1e-10):
            raise SolverError("gram matrix is not symmetric")
        lam, vec = np.linalg.eigh(gram)
        if lam.size and lam[0] < -1e-10 * max(1.0, abs(lam[-1])):
            raise SolverError("gram matrix is not positive semidefinite")
        self.lam = np.clip(lam, 0.0, None)
        self.vec = vec
        self.radius = float(radius)
        self.tol = tol
        lmax = self.lam.max() if self.lam.size else 0.0
        self.pos = self.lam > (tol * lmax if lmax > 0 else np.inf)

    def solve(self, m: np.ndarray) -> tuple[float, np.ndarray]:
        d = self.radius
        if d == 0.0 or m.size == 0:
            return 0.0, np.zeros_like(m)
        mt = self.vec.T @ m
        mnorm = float(np.linalg.norm(m))
        if mnorm == 0.0:
            return 0.0, np.zeros_like(m)
        beta0 = np.where(self.pos, mt / np.where(self.pos, self.lam, 1.0), 0.0)
        out_of_range = float(np.linalg.norm(mt[~self.pos]))
        if out_of_range <= 1e-13 * mnorm and np.linalg.norm(beta0) <= d:
            return float(0.5 * mt @ beta0), self.vec @ beta0

        def norm2(th):
            b = mt / (self.lam + th)
            return float(b @ b)

        lo, hi = 0.0, mnorm / d
        while norm2(hi) > d * d:
            hi *= 2.0
        th = hi
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if norm2(mid) > d * d:
                lo = mid
            else:
                hi = mid
            th = hi
            if (hi - lo) <= 1e-16 * max(1.0, hi):
                break
        beta_t = mt / (self.lam + th)
        scale = d / float(np.linalg.norm(beta_t))
        beta_t *= scale
        value = float(mt @ beta_t - 0.5 * (self.lam * beta_t) @ beta_t)
        return value, self.vec @ beta_t


def ball_sup(gram: np.ndarray, m: np.ndarray, radius: float,
             ) -> tuple[float, np.ndarray]:
    """One-shot exact solution; D = 0 returns (0, 0) by convention."""
    return QuadBall(gram, radius).solve(np.asarray(m, dtype=float))


# ---------------------------------------------------------------------------
# Loss evaluation
# ---------------------------------------------------------------------------

class LossEvaluator:
    """Total and per-equation empirical loss plus subgradients, with the
    per-equation eigendecompositions cached."""

    def __init__(self, moments: MomentSystem):
        self.moments = moments
        self.problem = moments.problem
        self.solvers = [
            QuadBall(e.gram, eq.dual_radius) if e.active else None
            for e, eq in zip(moments.equations, self.problem.equations)]

    def loss(self, w: np.ndarray):
        per = np.zeros(len(self.solvers))
        betas: list[np.ndarray | None] = [None] * len(self.solvers)
        for k, (mom, slv) in enumerate(zip(self.moments.equations, self.solvers)):
            if not mom.active:
                continue
            m = mom.lin @ w + mom.offset
            per[k], betas[k] = slv.solve(m)
        return float(per.sum()), per, betas

    def grad(self, betas) -> np.ndarray:
        g = np.zeros(self.problem.total_dim)
        for mom, beta in zip(self.moments.equations, betas):
            if beta is not None:
                g += mom.lin.T @ beta
        return g

    def interior_least_squares(self) -> np.ndarray | None:
        """Minimizer of the unconstrained-dual quadratic upper bound; exact
        infimum whenever its ball constraints turn out inactive."""
        rows, rhs = [], []
        for mom in self.moments.equations:
            if not mom.active:
                continue
            dz = np.diag(mom.gram)
            sup = dz > 0
            scale = 1.0 / np.sqrt(dz[sup])
            rows.append(mom.lin[sup] * scale[:, None])
            rhs.append(-mom.offset[sup] * scale)
        if not rows:
            return None
        sol, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
        return sol


def empirical_loss(problem: IesProblem, moments: MomentSystem, w: np.ndarray,
                   ) -> tuple[float, np.ndarray]:
    """Sum over active equations of the exact dual supremum; each term >= 0."""
    total, per, _ = LossEvaluator(moments).loss(np.asarray(w, dtype=float))
    return total, per


def project_budgets(problem: IesProblem, w: np.ndarray) -> np.ndarray:
    out = w.copy()
    for blk in problem.blocks:
        seg = out[blk.offset:blk.offset + blk.dim]
        nrm = float(np.linalg.norm(seg))
        if nrm > blk.budget:
            seg *= blk.budget / nrm
    return out


def within_budgets(problem: IesProblem, w: np.ndarray, tol: float = 1e-9) -> bool:
    return all(
        np.linalg.norm(w[b.offset:b.offset + b.dim]) <= b.budget * (1 + tol)
        for b in problem.blocks)


def random_hypothesis(problem: IesProblem, rng: np.random.Generator,
                      scale: float = 0.7) -> np.ndarray:
    """Random in-budget weights (uniform direction, scaled radius)."""
    w = np.zeros(problem.total_dim)
    for blk in problem.blocks:
        v = rng.normal(size=blk.dim)
        r = scale * rng.random() ** (1.0 / blk.dim) * blk.budget
        w[blk.offset:blk.offset + blk.dim] = r * v / np.linalg.norm(v)
    return w


# ---------------------------------------------------------------------------
# Projected subgradient fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 5000
    step_rule: str = "polyak"       # 'polyak' (floor 0) or 'sqrt'
    step_scale: float = 1.0
    tol_abs: float = 1e-9
    tol_gap: float = 1e-7
    patience: int = 200
    record_every: int = 25
    seed: int = 0
    init: np.ndarray | None = None
    polish: bool = True


@dataclass(eq=False)
class FitResult:
    weights: np.ndarray
    loss: float
    per_equation: np.ndarray
    trace: list[tuple[int, float]]
    iterations: int
    converged: bool


def fit(problem: IesProblem, moments: MomentSystem,
        opts: FitOptions | None = None) -> FitResult:
    """Minimize the total loss over the product of budget balls.

    Projected subgradient descent with best-iterate tracking; the Polyak
    rule uses 0 as a valid lower bound (every equation loss is a supremum
    over a star-shaped class, hence nonnegative).  An exact least-squares
    candidate seeds and polishes the run.
    """
    opts = opts or FitOptions()
    ev = LossEvaluator(moments)
    l_alpha = max(problem.l_alpha, 1.0)
    candidates: list[np.ndarray] = []
    if opts.init is not None:
        candidates.append(project_budgets(problem, np.asarray(opts.init, float)))
    else:
        candidates.append(np.zeros(problem.total_dim))
    if opts.polish:
        ls = ev.interior_least_squares()
        if ls is not None and np.all(np.isfinite(ls)):
            candidates.append(project_budgets(problem, ls))
    best_w, best_loss, best_per = None, np.inf, None
    for cand in candidates:
        t, per, _ = ev.loss(cand)
        if t < best_loss:
            best_w, best_loss, best_per = cand, t, per
    w = best_w.copy()
    trace = [(0, best_loss)]
    stall = 0
    phase_sqrt = opts.step_rule == "sqrt"
    t_phase = 0
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        total, per, betas = ev.loss(w)
        if not np.isfinite(total):
            raise SolverError("loss diverged (NaN/inf); configuration error")
        if total < best_loss - opts.tol_abs:
            best_w, best_loss, best_per = w.copy(), total, per
            stall = 0
        else:
            stall += 1
        if it % opts.record_every == 0 or it == 1:
            trace.append((it, total))
        if best_loss <= opts.tol_abs:
            converged = True
            break
        if stall > opts.patience:
            if phase_sqrt:
                converged = True
                break
            # Polyak stalled at a positive floor; refine with decaying steps
            phase_sqrt = True
            t_phase = 0
            stall = 0
            w = best_w.copy()
            continue
        g = ev.grad(betas)
        gn2 = float(g @ g)
        if gn2 <= 1e-30:
            converged = True
            break
        t_phase += 1
        if phase_sqrt:
            step = opts.step_scale / (l_alpha * np.sqrt(t_phase))
        else:
            step = opts.step_scale * total / gn2
        w = project_budgets(problem, w - step * g)
    trace.append((it, best_loss))
    return FitResult(weights=best_w, loss=best_loss, per_equation=best_per,
                     trace=trace, iterations=it, converged=converged)


# ---------------------------------------------------------------------------
# Population diagnostics
# ---------------------------------------------------------------------------

def population_rmse(problem: IesProblem, env: Env, w: np.ndarray,
                    moments: MomentSystem | None = None) -> np.ndarray:
    """Per-equation projected residual norm ||T_k h||, computed exactly."""
    moments = moments or population_moments(problem, env)
    out = np.zeros(len(moments.equations))
    for k, mom in enumerate(moments.equations):
        if not mom.active:
            continue
        m = mom.lin @ w + mom.offset
        dz = np.diag(mom.gram)
        sup = dz > 0
        out[k] = np.sqrt(float(np.sum(m[sup] ** 2 / dz[sup])))
    return out


def fenchel_gap_check(problem: IesProblem, env: Env, w: np.ndarray,
                      moments: MomentSystem | None = None) -> np.ndarray:
    """|L_k(h) - 1/2 ||T_k h||^2| per equation on population moments; sized
    dual radii make this vanish."""
    moments = moments or population_moments(problem, env)
    ev = LossEvaluator(moments)
    _, per, _ = ev.loss(np.asarray(w, dtype=float))
    rmse = population_rmse(problem, env, w, moments=moments)
    return np.abs(per - 0.5 * rmse ** 2)


def loss_trace_csv(path, result: FitResult) -> None:
    with open(path, "w") as fh:
        fh.write("iter,loss\n")
        for it, val in result.trace:
            fh.write(f"{it},{val!r}\n")


def hypothesis_to_json(problem: IesProblem, w: np.ndarray) -> str:
    import json
    doc = {b.name: w[b.offset:b.offset + b.dim].tolist() for b in problem.blocks}
    return json.dumps(doc, indent=1, sort_keys=True)
