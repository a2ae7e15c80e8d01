"""Confidence-set construction and pessimistic policy selection.

The confidence set is the level set of the empirical loss within e_D of
its fitted floor.  Pessimistic evaluation minimizes the policy-weighted
value over that set by exact-penalty subgradient descent, with the fitted
hypothesis as an always-feasible fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .envs import Env
from .ies import IesProblem, build_extended_pv_ies, build_pomdp_ies
from .minimax import (FitOptions, FitResult, LossEvaluator, MomentSystem,
                      assemble_moments, fit, project_budgets, within_budgets)
from .oracle import oracle_hypothesis
from .scm import (Dataset, InterventionalSpec, Policy, ScmError,
                  exact_policy_value, policy_context_weights)


@dataclass(eq=False)
class ConfidenceSpec:
    """Level-set membership oracle around the fitted loss floor."""

    env: Env
    problem: IesProblem
    moments: MomentSystem
    fit_result: FitResult
    e_d: float
    feas_tol: float = 1e-6

    def __post_init__(self):
        self.evaluator = LossEvaluator(self.moments)

    @property
    def loss_floor(self) -> float:
        return self.fit_result.loss

    @property
    def threshold(self) -> float:
        return self.loss_floor + self.e_d

    def why_rejected(self, w: np.ndarray) -> str | None:
        if not within_budgets(self.problem, w):
            return "block budget violated"
        total, _, _ = self.evaluator.loss(np.asarray(w, dtype=float))
        if total > self.threshold:
            return (f"loss {total:.6g} exceeds floor {self.loss_floor:.6g} "
                    f"+ e_D {self.e_d:.6g}")
        return None


def build_confidence(env: Env, problem: IesProblem, moments: MomentSystem,
                     e_d: float, fit_opts: FitOptions | None = None,
                     ) -> ConfidenceSpec:
    return ConfidenceSpec(env=env, problem=problem, moments=moments,
                          fit_result=fit(problem, moments, fit_opts), e_d=e_d)


def in_confidence_set(spec: ConfidenceSpec, w: np.ndarray) -> bool:
    """True iff the hypothesis is within budgets and its loss is at most
    the fitted floor plus e_D."""
    return spec.why_rejected(w) is None


@dataclass(frozen=True)
class PessimismOptions:
    rho_schedule: tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0)
    steps_per_rho: int = 2000
    step_scale: float = 0.5
    feas_tol: float = 1e-6


def _g_weights(spec: ConfidenceSpec, pi: Policy,
               tilde_p: np.ndarray | None) -> np.ndarray:
    """Linear objective over the value block induced by a policy."""
    env, problem = spec.env, spec.problem
    interv = env.interv if tilde_p is None else dc_replace(env.interv,
                                                           tilde_p=np.asarray(tilde_p))
    gb = problem.g_block
    if problem.label in ("pv-extended", "dtr-extended"):
        u = np.asarray(interv.tilde_p, dtype=float)
    else:
        u = policy_context_weights(env.scm, interv, pi)
    if u.shape != gb.cards:
        raise ScmError(f"policy weight shape {u.shape} != value block {gb.cards}")
    return u.ravel()


def pessimistic_value(spec: ConfidenceSpec, pi: Policy,
                      tilde_p: np.ndarray | None = None,
                      opts: PessimismOptions | None = None,
                      ) -> tuple[float, np.ndarray]:
    """min of the policy-weighted value block over the confidence set.

    Exact-penalty subgradient descent with escalating penalty weight; the
    returned point is always verified feasible (the fitted hypothesis is
    the fallback start, and the all-in direction is accepted outright when
    it already sits inside the set).
    """
    opts = opts or PessimismOptions()
    problem, ev = spec.problem, spec.evaluator
    u_g = _g_weights(spec, pi, tilde_p)
    gb = problem.g_block
    u = np.zeros(problem.total_dim)
    u[gb.offset:gb.offset + gb.dim] = u_g
    u_norm = float(np.linalg.norm(u_g))
    w_hat = spec.fit_result.weights
    if u_norm == 0.0:
        return 0.0, w_hat.copy()
    tau = spec.threshold + opts.feas_tol

    def objective(w):
        return float(u @ w)

    # unconstrained-over-budgets minimizer; optimal whenever feasible
    w_lin = w_hat.copy()
    w_lin[gb.offset:gb.offset + gb.dim] = -gb.budget * u_g / u_norm
    t_lin, _, _ = ev.loss(w_lin)
    if t_lin <= tau:
        return objective(w_lin), w_lin
    best_w = w_hat.copy()
    best_obj = objective(w_hat)
    radius = float(np.linalg.norm(problem.budgets()))
    for rho in opts.rho_schedule:
        w = best_w.copy()
        for t in range(1, opts.steps_per_rho + 1):
            total, _, betas = ev.loss(w)
            viol = total - spec.threshold
            if viol <= opts.feas_tol:
                obj = objective(w)
                if obj < best_obj:
                    best_obj, best_w = obj, w.copy()
            grad = u.copy()
            if viol > 0:
                grad += rho * ev.grad(betas)
            gn = float(np.linalg.norm(grad))
            if gn <= 1e-30:
                break
            step = opts.step_scale * radius / (np.sqrt(t) * gn)
            w = project_budgets(problem, w - step * grad)
    return best_obj, best_w


@dataclass(eq=False)
class CapResult:
    policies: list[Policy]
    values: np.ndarray
    selected_index: int
    pessimistic_weights: list[np.ndarray | None]
    diagnostics: dict = field(default_factory=dict)

    @property
    def selected_policy(self) -> Policy:
        return self.policies[self.selected_index]

    def to_json(self) -> str:
        import json
        return json.dumps({
            "selected_index": self.selected_index,
            "selected_label": self.selected_policy.label,
            "values": [float(v) for v in self.values],
            "labels": [p.label for p in self.policies],
            "diagnostics": {k: str(v) for k, v in self.diagnostics.items()},
        }, indent=1, sort_keys=True)


def cap_select(spec: ConfidenceSpec, candidates: list[Policy],
               tilde_p: np.ndarray | None = None,
               opts: PessimismOptions | None = None) -> CapResult:
    """Pick the candidate with the largest pessimistic value; ties break to
    the lowest candidate index."""
    if not candidates:
        raise ScmError("cap_select needs at least one candidate")
    values = np.empty(len(candidates))
    weights: list[np.ndarray | None] = []
    for i, pi in enumerate(candidates):
        values[i], w = pessimistic_value(spec, pi, tilde_p=tilde_p, opts=opts)
        weights.append(w)
    sel = int(np.argmax(values))
    return CapResult(policies=list(candidates), values=values,
                     selected_index=sel, pessimistic_weights=weights)


def cap_select_extended(env: Env, dataset: Dataset, candidates: list[Policy],
                        e_d: float, tilde_p: np.ndarray | None = None,
                        fit_opts: FitOptions | None = None,
                        opts: PessimismOptions | None = None) -> CapResult:
    """Per-candidate confidence sets for policy-dependent systems: rebuild
    the equations, refit, and minimize the tilde-weighted value block."""
    if env.template.name not in ("ccb-pv", "pomdp1"):
        raise ScmError("extended selection needs a proxy-variable template")
    if not candidates:
        raise ScmError("cap_select_extended needs at least one candidate")
    builder = (build_pomdp_ies if env.template.name == "pomdp1"
               else build_extended_pv_ies)
    values = np.full(len(candidates), -np.inf)
    weights: list[np.ndarray | None] = [None] * len(candidates)
    diagnostics: dict = {}
    warm: np.ndarray | None = None
    for i, pi in enumerate(candidates):
        if pi.kind != "extended":
            raise ScmError("extended selection needs extended candidates")
        try:
            problem = builder(env, pi)
            moments = assemble_moments(problem, dataset)
            fo = fit_opts or FitOptions()
            if warm is not None:
                fo = dc_replace(fo, init=warm)
            spec = build_confidence(env, problem, moments, e_d, fo)
            warm = spec.fit_result.weights
            values[i], weights[i] = pessimistic_value(spec, pi, tilde_p=tilde_p,
                                                      opts=opts)
        except ScmError as exc:
            diagnostics[f"candidate_{i}"] = f"skipped: {exc}"
    if not np.any(np.isfinite(values)):
        raise ScmError(f"every candidate failed: {diagnostics}")
    sel = int(np.argmax(values))
    return CapResult(policies=list(candidates), values=values,
                     selected_index=sel, pessimistic_weights=weights,
                     diagnostics=diagnostics)


def suboptimality(env: Env, interv: InterventionalSpec, pi: Policy,
                  candidates: list[Policy] | None = None,
                  reference: float | None = None) -> float:
    """v(best candidate) - v(pi), both from the exact interventional model."""
    v_pi = exact_policy_value(env.scm, interv, pi)
    if reference is None:
        if not candidates:
            raise ScmError("suboptimality needs candidates or a reference value")
        reference = max(exact_policy_value(env.scm, interv, c) for c in candidates)
    return reference - v_pi


def calibrate_threshold(env: Env, t_rows: int, seeds: list[int],
                        safety: float = 1.2,
                        fit_opts: FitOptions | None = None,
                        extended_pi: Policy | None = None) -> float:
    """Empirical-tuning mode for e_D: the smallest threshold keeping the
    population-exact hypothesis inside the set on calibration draws, padded
    by a safety factor."""
    from .ies import build_problem
    from .scm import sample_observational

    margins = []
    for s in seeds:
        ds = sample_observational(env.scm, env.miss, t_rows, seed=s)
        problem = build_problem(env, pi=extended_pi, extended=extended_pi is not None)
        moments = assemble_moments(problem, ds)
        res = fit(problem, moments, fit_opts)
        w_star = oracle_hypothesis(problem, env, pi=extended_pi)
        ev = LossEvaluator(moments)
        loss_star, _, _ = ev.loss(w_star)
        margins.append(max(loss_star - res.loss, 0.0))
    return safety * float(max(margins))
