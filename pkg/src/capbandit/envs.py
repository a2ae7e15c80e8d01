"""Randomized environment generation for the four supported templates.

Models are drawn with full-support CPTs so the rank (completeness)
conditions hold generically; generation re-draws until the diagnostic
checks pass or gives up with a diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .scm import (
    TEMPLATES, DiscreteSCM, InterventionalSpec, MissingnessSpec, ScmError,
    Template, Variable, joint_with_missingness, marginal, validate_scm,
    validate_interventional,
)


class GenerationError(ScmError):
    pass


DEFAULT_CARDS: dict[str, dict[str, int]] = {
    "ccb-iv": {"U": 2, "X": 2, "Z": 5, "A": 2, "Y": 4},
    "ccb-pv": {"U": 2, "X": 2, "A": 2, "Z": 3, "W": 2, "Y": 4},
    "dtr2": {"X1": 2, "A1": 2, "U": 2, "X2": 2, "Y1": 18, "A2": 2, "Y2": 8},
    "pomdp1": {"Om": 3, "S": 2, "O": 3, "A": 2, "Y": 4, "Op": 3},
}


@dataclass(frozen=True)
class EnvParams:
    """Knobs for the randomized generator.

    ``observe_prob`` is the baseline P(R=1); 1.0 means never missing.
    ``confounding`` scales how strongly the latent variable moves both the
    behavior policy and the outcome.  ``coverage_gap`` starves one
    (context, action) cell of behavior probability mass.
    """

    cards: Mapping[str, int] = field(default_factory=dict)
    seed: int = 0
    confounding: float = 0.6
    observe_prob: float = 0.8
    mnar_spread: float = 0.2
    coverage_gap: float = 0.0
    tilde: str = "random"            # or "uniform"
    require_identified: bool = True
    max_redraws: int = 50
    budget_margin: float = 0.9
    policy_dim: int = 2
    policy_resolution: int = 3
    policy_c0: float = 1.5


class Env:
    """A validated model triple plus cached exact tables."""

    def __init__(self, scm: DiscreteSCM, miss: MissingnessSpec,
                 interv: InterventionalSpec, params: EnvParams,
                 policy_features: np.ndarray | None = None):
        self.scm = scm
        self.miss = miss
        self.interv = interv
        self.params = params
        self.policy_features = policy_features
        self._cache: dict = {}

    @property
    def template(self) -> Template:
        return self.scm.spec

    def joint_r(self) -> np.ndarray:
        if "joint_r" not in self._cache:
            self._cache["joint_r"] = joint_with_missingness(self.scm, self.miss)
        return self._cache["joint_r"]

    def cate(self) -> np.ndarray:
        if "cate" not in self._cache:
            from .scm import cate_table
            self._cache["cate"] = cate_table(self.scm)
        return self._cache["cate"]

    def r_axis(self, col: str) -> int:
        return len(self.scm.variables) + self.miss.order.index(col)


# ---------------------------------------------------------------------------
# Identification views: both IV-style templates and both PV-style templates
# share the same identification machinery under a variable mapping.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IvView:
    y_col: str
    a_col: str
    x_cols: tuple[str, ...]
    z_col: str
    h1_cols: tuple[str, ...]
    filter1: tuple[str, ...]
    filter2: tuple[str, ...]


@dataclass(frozen=True)
class PvView:
    y_col: str
    a_col: str
    x_col: str
    z_col: str
    w_col: str
    filter1: tuple[str, ...]
    filter2: tuple[str, ...]
    filter3: tuple[str, ...]
    filter4: tuple[str, ...]


def iv_view(env: Env) -> IvView:
    name = env.template.name
    if name == "ccb-iv":
        return IvView(y_col="Y", a_col="A", x_cols=("X",), z_col="Z",
                      h1_cols=("Y", "A", "Z"), filter1=("Z",), filter2=("Z", "X"))
    if name == "dtr2":
        return IvView(y_col="Y2", a_col="A2", x_cols=("X1", "A1", "X2"),
                      z_col="Y1", h1_cols=("A1", "A2", "Y1", "Y2"),
                      filter1=(), filter2=("X1", "X2"))
    raise ScmError(f"template {name} has no instrumental-variable view")


def pv_view(env: Env) -> PvView:
    name = env.template.name
    if name == "ccb-pv":
        return PvView(y_col="Y", a_col="A", x_col="X", z_col="Z", w_col="W",
                      filter1=("X", "Z"), filter2=("W", "X", "Z"),
                      filter3=("W", "X"), filter4=("X",))
    if name == "pomdp1":
        return PvView(y_col="Y", a_col="A", x_col="Om", z_col="Op", w_col="O",
                      filter1=("Om", "Op"), filter2=("O", "Om", "Op"),
                      filter3=("O", "Om"), filter4=("Om",))
    raise ScmError(f"template {name} has no proxy-variable view")


# ---------------------------------------------------------------------------
# CPT generators
# ---------------------------------------------------------------------------

def _dirichlet(rng, shape, card, alpha=2.0, floor=0.02):
    p = rng.dirichlet(np.full(card, alpha), size=shape or (1,))
    p = np.maximum(p, floor / card)
    p /= p.sum(axis=-1, keepdims=True)
    return p.reshape(tuple(shape) + (card,)) if shape else p[0]


def _tilt_pmf(base: np.ndarray, levels: np.ndarray, mean: float) -> np.ndarray:
    """Exponentially tilt ``base`` so its mean over ``levels`` equals ``mean``."""
    lo, hi = levels.min(), levels.max()
    if not lo < mean < hi:
        raise GenerationError(f"target mean {mean} outside level range ({lo}, {hi})")
    span = hi - lo

    def m(lam):
        w = base * np.exp(lam * (levels - lo) / span)
        w /= w.sum()
        return w @ levels

    a, b = -60.0, 60.0
    for _ in range(200):
        mid = 0.5 * (a + b)
        if m(mid) < mean:
            a = mid
        else:
            b = mid
    lam = 0.5 * (a + b)
    w = base * np.exp(lam * (levels - lo) / span)
    return w / w.sum()


def _outcome_cpt(rng, scm_parent_cards, levels, u_axis, action_axis, confounding,
                 additive):
    """CPT for the outcome with means controlled per parent cell.

    When ``additive`` the mean is exactly f(other parents, action) +
    confounding * e(latent, non-action parents), which realizes the
    structured-reward assumption.
    """
    shape = tuple(scm_parent_cards)
    f_shape = tuple(c for i, c in enumerate(shape) if i != u_axis)
    f = rng.uniform(0.3, 0.7, f_shape)
    e_shape = tuple(c for i, c in enumerate(shape) if i != action_axis)
    e = rng.uniform(-1.0, 1.0, e_shape) * 0.18
    means = (np.expand_dims(f, u_axis)
             + confounding * np.expand_dims(e, action_axis))
    base_shape = f_shape if additive else shape
    base = _dirichlet(rng, base_shape, len(levels), alpha=3.0)
    out = np.empty(shape + (len(levels),))
    for idx in np.ndindex(*shape):
        b_idx = (tuple(v for i, v in enumerate(idx) if i != u_axis)
                 if additive else idx)
        out[idx] = _tilt_pmf(base[b_idx], levels, float(means[idx]))
    return out


def _behavior_cpt(rng, parent_cards, parent_names, card, latents, confounding,
                  coverage_gap=0.0, context_axes=()):
    """Softmax behavior policy; the latent contribution scales with confounding."""
    shape = tuple(parent_cards)
    logits = np.zeros(shape + (card,))
    for i, (name, c) in enumerate(zip(parent_names, parent_cards)):
        scale = 1.5 * confounding if name in latents else 1.0
        contrib = rng.normal(0.0, scale, (c, card))
        logits += np.expand_dims(
            contrib, tuple(j for j in range(len(shape)) if j != i))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    p = np.maximum(p, 0.01 / card)
    if coverage_gap > 0.0:
        starved = tuple(0 for _ in context_axes)
        sel = [slice(None)] * len(shape) + [card - 1]
        for ax, v in zip(context_axes, starved):
            sel[ax] = v
        p[tuple(sel)] *= (1.0 - coverage_gap)
    return p / p.sum(axis=-1, keepdims=True)


def _missing_table(rng, parent_cards, observe_prob, spread):
    if observe_prob >= 1.0:
        return np.ones(tuple(parent_cards))
    noise = rng.uniform(-1.0, 1.0, tuple(parent_cards))
    return np.clip(observe_prob + spread * noise, 0.02, 0.98)


def _tilde(rng, card, mode):
    if mode == "uniform":
        return np.full(card, 1.0 / card)
    return _dirichlet(rng, (), card, alpha=3.0, floor=0.1)


# ---------------------------------------------------------------------------
# Per-template model draws
# ---------------------------------------------------------------------------

def _draw_model(template: Template, cards: Mapping[str, int], p: EnvParams,
                rng: np.random.Generator) -> tuple[DiscreteSCM, MissingnessSpec]:
    variables = []
    for name in template.order:
        card = cards[name]
        levels = (tuple(np.linspace(0.0, 1.0, card))
                  if name in template.real_valued else None)
        variables.append(Variable(name, card, levels))
    vmap = {v.name: v for v in variables}
    parents = {name: template.allowed_parents[name] for name in template.order}
    cpts: dict[str, np.ndarray] = {}
    for name in template.order:
        pa = parents[name]
        pa_cards = [cards[q] for q in pa]
        if name == template.outcome_col:
            u = next(q for q in pa if q in template.latent)
            cpts[name] = _outcome_cpt(
                rng, pa_cards, np.asarray(vmap[name].levels), pa.index(u),
                pa.index(template.action_col), p.confounding,
                additive=template.additive_outcome)
        elif name == template.action_col or (template.name == "dtr2" and name == "A1"):
            ctx_axes = tuple(pa.index(c) for c in template.context_cols if c in pa)
            cpts[name] = _behavior_cpt(
                rng, pa_cards, pa, cards[name], template.latent, p.confounding,
                coverage_gap=(p.coverage_gap if name == template.action_col else 0.0),
                context_axes=ctx_axes)
        elif template.name == "dtr2" and name == "Y1":
            # sharp rows so the first-stage reward is an informative instrument
            cpts[name] = _dirichlet(rng, tuple(pa_cards), cards[name], alpha=0.35,
                                    floor=0.01)
        else:
            cpts[name] = _dirichlet(rng, tuple(pa_cards), cards[name])
    scm = DiscreteSCM(template=template.name, variables=tuple(variables),
                      parents=parents, cpts=cpts)
    mparents = {v: template.maskable[v] for v in template.maskable}
    mtables = {v: _missing_table(rng, [cards[q] for q in mparents[v]],
                                 p.observe_prob, p.mnar_spread)
               for v in mparents}
    return scm, MissingnessSpec(parents=mparents, tables=mtables)


def _policy_features(rng, scm: DiscreteSCM, dim: int) -> np.ndarray | None:
    t = scm.spec
    if t.extended_obs_col is None:
        return None
    shape = (scm.card(t.tilde_col), scm.card(t.extended_obs_col),
             scm.card(t.action_col), dim)
    phi = rng.normal(0.0, 1.0, shape)
    norms = np.linalg.norm(phi, axis=-1, keepdims=True)
    return 0.95 * phi / np.maximum(norms, 1.0)


def build_env(template: str, params: EnvParams | None = None) -> Env:
    """Draw, validate, and rank-check a model of the requested template.

    Re-draws CPTs up to ``max_redraws`` times until the completeness ranks
    (and, when ``require_identified``, the full identifiability ranks and
    oracle budget margins) pass; raises GenerationError otherwise.
    """
    from . import oracle  # deferred: oracle depends on this module

    if template not in TEMPLATES:
        raise ScmError(f"unknown template {template!r}")
    p = params or EnvParams()
    cards = dict(DEFAULT_CARDS[template])
    cards.update(p.cards)
    t = TEMPLATES[template]
    root = np.random.SeedSequence([int(p.seed), 0xE17])
    failures: list[str] = []
    for attempt, child in enumerate(root.spawn(max(1, p.max_redraws))):
        rng = np.random.default_rng(child)
        scm, miss = _draw_model(t, cards, p, rng)
        rep = validate_scm(scm, miss)
        if not rep.ok:
            failures.append(f"attempt {attempt}: invalid model: {rep.violations[:2]}")
            continue
        interv = InterventionalSpec(
            tilde_p=_tilde(rng, cards[t.tilde_col], p.tilde),
            policy_mode=("dtr-stagewise" if template == "dtr2" else
                         "softmax-grid" if template == "pomdp1" else "deterministic"),
            policy_params={"dim": p.policy_dim, "resolution": p.policy_resolution,
                           "c0": p.policy_c0})
        env = Env(scm, miss, interv, p,
                  policy_features=_policy_features(rng, scm, p.policy_dim))
        ok, why = oracle.generation_checks(
            env, require_identified=p.require_identified,
            budget_margin=p.budget_margin)
        if ok:
            wrep = validate_interventional(scm, interv)
            env._cache["interv_warnings"] = wrep.warnings
            return env
        failures.append(f"attempt {attempt}: {why}")
    raise GenerationError(
        f"could not generate an admissible {template} model after "
        f"{p.max_redraws} draws; last failures: {failures[-3:]}")


def default_env(template: str, seed: int = 0, **overrides) -> Env:
    return build_env(template, replace(EnvParams(seed=seed), **overrides))
