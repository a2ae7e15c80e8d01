"""Critical-radius formulas and the confidence-set threshold rule.

These are conservative finite-sample bounds for norm-balled linear
classes; the experiment harness also supports an empirically calibrated
threshold because the universal constants (64, 2048) make the formula
radii very loose at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ies import IesProblem, term_weight


class RadiusError(ValueError):
    pass


def product_class_radius(d1: int, d2: int, c1: float, c2: float, n: int,
                         ) -> float:
    """Critical radius of the product of two bounded linear classes with
    dimensions (d1, d2) and weight budgets (c1, c2) on n samples."""
    eta, _ = product_class_radius_flagged(d1, d2, c1, c2, n)
    return eta


def product_class_radius_flagged(d1: int, d2: int, c1: float, c2: float,
                                 n: int) -> tuple[float, bool]:
    if min(d1, d2) < 1 or min(c1, c2) <= 0 or n < 1:
        raise RadiusError("dimensions, budgets, and sample size must be positive")
    c = c1 * c2
    b = np.sqrt(c * (8.0 * max(c1, c2) + c))
    arg = (1.0 + 8.0 * max(1.0 / c1, 1.0 / c2)) * n / (64.0 ** 2 * (d1 + d2))
    clamped = arg <= np.e
    log_term = max(np.log(arg), 1.0) if clamped else np.log(arg)
    return float(64.0 * b * np.sqrt((d1 + d2) / n * log_term)), bool(clamped)


def covering_radius(a: float, c: float, n: int) -> float:
    """Critical radius from a log-covering-number bound a*log(1 + C/t)."""
    if a <= 0 or c <= 0 or n < 1:
        raise RadiusError("inputs must be positive")
    n_min = (np.sqrt(2.0) - 1.0) * 2048.0 * a
    if n < n_min:
        raise RadiusError(f"n = {n} below the admissible minimum "
                          f"{n_min:.1f} for a = {a}")
    return float(64.0 * c * np.sqrt(a / n * np.log(1.0 + n / (2048.0 * a))))


@dataclass
class RadiusReport:
    kappa: float
    eps_h: float
    l_alpha: float
    entries: list[dict] = field(default_factory=list)
    degraded: bool = False

    @property
    def eta_sq(self) -> float:
        return float(sum(e["eta"] ** 2 for e in self.entries))

    @property
    def e_d(self) -> float:
        return self.kappa * (2.0 * self.eps_h ** 2
                             + (2.0 * self.l_alpha ** 2 + 1.25) * self.eta_sq)

    def check(self) -> None:
        floor = 2.0 * self.eps_h ** 2 + (2.0 * self.l_alpha ** 2 + 1.25) * self.eta_sq
        if self.eta_sq > 0 and not self.e_d > floor:
            raise RadiusError("threshold must strictly exceed the radius floor")

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "eps_h": self.eps_h, "l_alpha": self.l_alpha,
                "eta_sq": self.eta_sq, "e_d": self.e_d, "degraded": self.degraded,
                "entries": self.entries}


def _equation_dims(problem: IesProblem, eq, policy_dim: int | None):
    """Hypothesis-side dimension/budget of the stacked linear class an
    equation's affine alpha lives in."""
    dims = 0
    bud_sq = 0.0
    for t in eq.terms:
        blk = problem.block(t.block)
        dims += blk.dim
        bud_sq += (term_weight(blk, t) * blk.budget) ** 2
    if eq.offset.kind != "none":
        bud_sq += problem.l_outcome ** 2
        if problem.template == "dtr2" and eq.index == 0:
            dims += 1   # outcome-augmented class for the first bridge equation
    return dims, float(np.sqrt(2.0 * bud_sq))


def equation_radius(problem: IesProblem, eq, t_k: int,
                    policy_dim: int | None = None) -> tuple[float, bool]:
    """Radius for one equation: the product-class formula, except the
    policy-dependent proxy equation which runs through the covering bound
    with the softmax class folded in."""
    d_k = problem.dual_dim(eq)
    if (problem.label == "pv-extended" and eq.offset.kind == "neg_outcome_policy"
            and policy_dim is not None):
        dims = [policy_dim, d_k] + [problem.block(t.block).dim for t in eq.terms]
        a = 7.0 * max(dims)
        buds = [problem.block(t.block).budget for t in eq.terms]
        c = eq.dual_radius * max(12.0 * max(buds), 54.0 * problem.l_outcome)
        n_min = int(np.ceil((np.sqrt(2.0) - 1.0) * 2048.0 * a))
        if t_k < n_min:
            return covering_radius(a, c, n_min), True
        return covering_radius(a, c, t_k), False
    dims, bud = _equation_dims(problem, eq, policy_dim)
    return product_class_radius_flagged(dims, d_k, bud, eq.dual_radius, max(t_k, 1))


def threshold_e_d(problem: IesProblem, counts, kappa: float = 1.1,
                  eps_h: float = 0.0, policy_dim: int | None = None,
                  ) -> RadiusReport:
    """Formula-mode threshold: kappa * (2 eps_H^2 + (2 L_alpha^2 + 5/4) eta^2)
    with one radius per equation at its own subset size."""
    if kappa <= 1.0:
        raise RadiusError("the multiplier must exceed 1")
    rep = RadiusReport(kappa=kappa, eps_h=eps_h, l_alpha=problem.l_alpha)
    for eq, t_k in zip(problem.equations, counts):
        eta, clamped = equation_radius(problem, eq, t_k, policy_dim)
        rep.degraded = rep.degraded or clamped
        dims, bud = _equation_dims(problem, eq, policy_dim)
        rep.entries.append({
            "equation": eq.name, "eta": eta, "t_k": int(t_k),
            "hyp_dim": dims, "dual_dim": problem.dual_dim(eq),
            "hyp_budget": bud, "dual_radius": eq.dual_radius,
            "clamped": clamped,
        })
    rep.check()
    return rep
