"""Discrete structural causal models with MNAR missingness.

Everything in this package runs on small tabular models, so exact answers
(joint distributions, interventional means, policy values) are computed by
enumerating variable configurations with numpy broadcasting.  All model
objects are immutable after construction; sampling takes an explicit seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

MISSING = -1
MISSING_TOKEN = "NA"


class ScmError(ValueError):
    pass


class UndefinedContextError(ScmError):
    pass


class PolicyEnumerationError(ScmError):
    pass


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Template:
    """Static description of one of the four supported causal graphs.

    ``order`` is a topological order; ``allowed_parents`` caps each
    variable's parent set, ``maskable`` maps each variable subject to
    missingness to the allowed parents of its missingness indicator.
    """

    name: str
    order: tuple[str, ...]
    allowed_parents: Mapping[str, tuple[str, ...]]
    maskable: Mapping[str, tuple[str, ...]]
    data_cols: tuple[str, ...]
    latent: tuple[str, ...]
    context_cols: tuple[str, ...]
    action_col: str
    outcome_col: str
    real_valued: tuple[str, ...]
    tilde_col: str
    pseudo_action: bool
    additive_outcome: bool
    extended_obs_col: str | None = None   # W-like column extended policies may see


TEMPLATES: dict[str, Template] = {}


def _register(t: Template) -> Template:
    TEMPLATES[t.name] = t
    return t


CCB_IV = _register(Template(
    name="ccb-iv",
    order=("U", "X", "Z", "A", "Y"),
    allowed_parents={
        "U": (), "X": ("U",), "Z": ("X",), "A": ("U", "X", "Z"),
        "Y": ("U", "X", "A"),
    },
    maskable={"X": ("Z", "X", "A"), "Z": ("Z", "X")},
    data_cols=("X", "A", "Y", "Z"),
    latent=("U",),
    context_cols=("X",),
    action_col="A",
    outcome_col="Y",
    real_valued=("Y",),
    tilde_col="X",
    pseudo_action=False,
    additive_outcome=True,
))

CCB_PV = _register(Template(
    name="ccb-pv",
    order=("U", "X", "A", "Z", "W", "Y"),
    allowed_parents={
        "U": (), "X": ("U",), "A": ("U", "X"), "Z": ("U", "X", "A"),
        "W": ("U", "X"), "Y": ("U", "X", "A", "W"),
    },
    maskable={"X": ("X",), "Z": ("Z", "U", "A", "X"), "W": ("W", "X", "A")},
    data_cols=("X", "A", "Y", "Z", "W"),
    latent=("U",),
    context_cols=("X",),
    action_col="A",
    outcome_col="Y",
    real_valued=("Y",),
    tilde_col="X",
    pseudo_action=True,
    additive_outcome=False,
    extended_obs_col="W",
))

DTR2 = _register(Template(
    name="dtr2",
    order=("X1", "A1", "U", "X2", "Y1", "A2", "Y2"),
    allowed_parents={
        "X1": (), "A1": ("X1",), "U": (), "X2": ("X1", "A1", "U"),
        "Y1": ("X1", "A1", "X2"), "A2": ("X1", "A1", "X2", "Y1", "U"),
        "Y2": ("X1", "A1", "X2", "A2", "U"),
    },
    maskable={"X1": ("X1", "A1"), "X2": ("X1", "A1", "X2", "A2")},
    data_cols=("X1", "A1", "X2", "A2", "Y1", "Y2"),
    latent=("U",),
    context_cols=("X1", "A1", "X2"),
    action_col="A2",
    outcome_col="Y2",
    real_valued=("Y1", "Y2"),
    tilde_col="X1",
    pseudo_action=False,
    additive_outcome=True,
))

POMDP1 = _register(Template(
    name="pomdp1",
    order=("Om", "S", "O", "A", "Y", "Op"),
    allowed_parents={
        "Om": (), "S": ("Om",), "O": ("S",), "A": ("S",),
        "Y": ("S", "O", "A"), "Op": ("S", "A"),
    },
    maskable={"Om": ("Om",), "O": ("O", "A"), "Op": ("Op", "S", "A")},
    data_cols=("Om", "O", "A", "Y", "Op"),
    latent=("S",),
    context_cols=("Om",),
    action_col="A",
    outcome_col="Y",
    real_valued=("Y",),
    tilde_col="Om",
    pseudo_action=True,
    additive_outcome=False,
    extended_obs_col="O",
))

PSEUDO_ACTION_COL = "Ap"


# ---------------------------------------------------------------------------
# Model types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variable:
    name: str
    card: int
    levels: tuple[float, ...] | None = None   # real values for outcome-like vars


@dataclass(frozen=True, eq=False)
class DiscreteSCM:
    """Tabular SCM: one CPT per variable, keyed by its parents.

    ``cpts[v]`` has shape ``cards(parents[v]) + (card(v),)`` with parents in
    the order listed in ``parents[v]``; root variables carry a marginal
    table of shape ``(card(v),)``.  The behavior policy is the CPT of the
    template's action variable.
    """

    template: str
    variables: tuple[Variable, ...]
    parents: Mapping[str, tuple[str, ...]]
    cpts: Mapping[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "_axis",
                           {v.name: i for i, v in enumerate(self.variables)})
        object.__setattr__(self, "_vars", {v.name: v for v in self.variables})

    @property
    def spec(self) -> Template:
        return TEMPLATES[self.template]

    def axis(self, name: str) -> int:
        return self._axis[name]

    def card(self, name: str) -> int:
        return self._vars[name].card

    def cards(self, names: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.card(n) for n in names)

    def levels(self, name: str) -> np.ndarray:
        lv = self._vars[name].levels
        if lv is None:
            raise ScmError(f"variable {name} carries no level map")
        return np.asarray(lv, dtype=float)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(v.card for v in self.variables)

    @property
    def behavior_policy(self) -> np.ndarray:
        return self.cpts[self.spec.action_col]


@dataclass(frozen=True, eq=False)
class MissingnessSpec:
    """Bernoulli observation tables P(R_v = 1 | parents) per maskable variable."""

    parents: Mapping[str, tuple[str, ...]]
    tables: Mapping[str, np.ndarray]

    @property
    def order(self) -> tuple[str, ...]:
        return tuple(self.parents)


@dataclass(frozen=True, eq=False)
class Policy:
    """Interventional policy.

    kind 'table'     -- pi(a | ctx); ``table`` has shape ctx_cards + (|A|,)
    kind 'extended'  -- pi(a | ctx, w); ``table`` shape ctx_cards + (|W|, |A|)
    kind 'dtr'       -- stage pair (pi1(a1|x1), pi2(a2|x1,a1,x2))
    """

    kind: str
    table: np.ndarray | None = None
    tables: tuple[np.ndarray, np.ndarray] | None = None
    weights: np.ndarray | None = None
    label: str = ""

    def conditionals(self) -> tuple[np.ndarray, ...]:
        if self.kind == "dtr":
            return self.tables
        return (self.table,)


@dataclass(frozen=True, eq=False)
class InterventionalSpec:
    """Context shift and candidate-policy class for the interventional process."""

    tilde_p: np.ndarray
    policy_mode: str = "deterministic"
    policy_params: Mapping = field(default_factory=dict)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, msg: str) -> None:
        self.violations.append(msg)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

_ROW_TOL = 1e-12


def validate_scm(scm: DiscreteSCM, miss: MissingnessSpec) -> ValidationReport:
    """Check the model against its template; returns every violated invariant."""
    rep = ValidationReport()
    if scm.template not in TEMPLATES:
        rep.add(f"unknown template {scm.template!r}")
        return rep
    t = scm.spec
    names = tuple(v.name for v in scm.variables)
    if names != t.order:
        rep.add(f"variable order {names} does not match template order {t.order}")
        return rep
    for v in scm.variables:
        if v.card < 1:
            rep.add(f"{v.name}: cardinality must be >= 1")
    for name in t.real_valued:
        lv = scm._vars[name].levels
        if lv is None or len(lv) != scm.card(name) or not np.all(np.isfinite(lv)):
            rep.add(f"{name}: needs a finite level map of length {scm.card(name)}")
    for name in names:
        pa = tuple(scm.parents.get(name, ()))
        extra = set(pa) - set(t.allowed_parents[name])
        if extra:
            rep.add(f"{name}: forbidden parents {sorted(extra)} "
                    f"(template independence structure)")
        for p in pa:
            if names.index(p) >= names.index(name):
                rep.add(f"{name}: parent {p} violates topological order")
        cpt = scm.cpts.get(name)
        if cpt is None:
            rep.add(f"{name}: missing CPT")
            continue
        want = scm.cards(pa) + (scm.card(name),)
        if cpt.shape != want:
            rep.add(f"{name}: CPT shape {cpt.shape} != {want}")
            continue
        if np.any(cpt < -_ROW_TOL):
            rep.add(f"{name}: negative probability entries")
        rows = cpt.reshape(-1, cpt.shape[-1]).sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-12 * max(1.0, cpt.shape[-1])):
            rep.add(f"{name}: row not normalized (max dev "
                    f"{np.abs(rows - 1.0).max():.2e})")
    # missingness structure
    if set(miss.parents) != set(t.maskable):
        rep.add(f"missingness must cover exactly {sorted(t.maskable)}, "
                f"got {sorted(miss.parents)}")
    for v, pa in miss.parents.items():
        allowed = t.maskable.get(v, ())
        extra = set(pa) - set(allowed)
        if extra:
            rep.add(f"R_{v}: forbidden parents {sorted(extra)}")
        tab = miss.tables.get(v)
        if tab is None:
            rep.add(f"R_{v}: missing table")
            continue
        want = scm.cards(tuple(pa))
        if tab.shape != want:
            rep.add(f"R_{v}: table shape {tab.shape} != {want}")
        elif np.any(tab < 0) or np.any(tab > 1):
            rep.add(f"R_{v}: entries outside [0, 1]")
    if t.additive_outcome and rep.ok:
        dev = _additive_outcome_deviation(scm)
        if dev > 1e-9:
            rep.add(f"structured reward violated: conditional-mean interaction "
                    f"between confounder and action is {dev:.2e}")
    return rep


def _additive_outcome_deviation(scm: DiscreteSCM) -> float:
    """Max deviation from E[Y|u,ctx,a] = f(ctx,a) + e(u,ctx)."""
    t = scm.spec
    cpt = scm.cpts[t.outcome_col]
    mean = cpt @ scm.levels(t.outcome_col)          # over parent axes
    pa = scm.parents[t.outcome_col]
    u_ax = pa.index(next(p for p in pa if p in t.latent))
    a_ax = pa.index(t.action_col)
    centered = mean - mean.mean(axis=a_ax, keepdims=True)
    return float(np.abs(centered - centered.mean(axis=u_ax, keepdims=True)).max())


def validate_interventional(scm: DiscreteSCM, interv: InterventionalSpec) -> ValidationReport:
    rep = ValidationReport()
    t = scm.spec
    tp = np.asarray(interv.tilde_p, dtype=float)
    if tp.shape != (scm.card(t.tilde_col),):
        rep.add(f"tilde_p shape {tp.shape} != ({scm.card(t.tilde_col)},)")
        return rep
    if np.any(tp < 0) or abs(tp.sum() - 1.0) > 1e-10:
        rep.add("tilde_p is not a distribution")
    marg = marginal(scm, (t.tilde_col,))
    if np.any((tp > 0) & (marg <= 0)):
        rep.warnings.append("tilde_p puts mass outside the observational support")
    return rep


# ---------------------------------------------------------------------------
# Exact distributions
# ---------------------------------------------------------------------------

def _expand(scm: DiscreteSCM, table: np.ndarray, axes: Sequence[int],
            ndim: int) -> np.ndarray:
    """Reshape ``table`` (axes in listed order) into an ndim broadcast array."""
    order = np.argsort(axes)
    t = np.transpose(table, order)
    shape = [1] * ndim
    for ax, s in zip(sorted(axes), t.shape):
        shape[ax] = s
    return t.reshape(shape)


def joint(scm: DiscreteSCM, replace: Mapping[str, tuple[tuple[str, ...], np.ndarray]] | None = None,
          ) -> np.ndarray:
    """Exact joint over all model variables (template order).

    ``replace`` substitutes a variable's CPT by ``(parent_names, table)``;
    used for do-interventions and interventional policies.
    """
    replace = replace or {}
    n = len(scm.variables)
    out = np.ones(scm.shape)
    for v in scm.variables:
        if v.name in replace:
            pa, tab = replace[v.name]
        else:
            pa, tab = scm.parents[v.name], scm.cpts[v.name]
        axes = [scm.axis(p) for p in pa] + [scm.axis(v.name)]
        out = out * _expand(scm, np.asarray(tab, dtype=float), axes, n)
    return out


def joint_with_missingness(scm: DiscreteSCM, miss: MissingnessSpec) -> np.ndarray:
    """Joint over model variables plus binary R indicators (appended in miss order)."""
    base = joint(scm)
    n = len(scm.variables)
    k = len(miss.order)
    out = base.reshape(base.shape + (1,) * k)
    for j, v in enumerate(miss.order):
        p1 = np.asarray(miss.tables[v], dtype=float)
        factor = np.stack([1.0 - p1, p1], axis=-1)
        axes = [scm.axis(p) for p in miss.parents[v]] + [n + j]
        out = out * _expand(scm, factor, axes, n + k)
    return out


def marginal(scm: DiscreteSCM, cols: Sequence[str], table: np.ndarray | None = None,
             ) -> np.ndarray:
    """Marginal of the joint (or a supplied full table) over ``cols``."""
    j = joint(scm) if table is None else table
    keep = [scm.axis(c) for c in cols]
    other = tuple(i for i in range(j.ndim) if i not in keep)
    m = j.sum(axis=other)
    return np.moveaxis(m, np.argsort(np.argsort(keep)), range(len(keep)))


def exact_cate(scm: DiscreteSCM, context, action: int) -> float:
    """E[Y | context, do(action)] by truncated factorization.

    Deletes the behavior-policy factor, clamps the action, and marginalizes
    the confounder and side observations exactly.
    """
    t = scm.spec
    ctx = (context,) if np.isscalar(context) else tuple(context)
    if len(ctx) != len(t.context_cols):
        raise ScmError(f"context must index {t.context_cols}")
    if marginal(scm, t.context_cols)[ctx] <= 0.0:
        raise UndefinedContextError(f"context {ctx} has zero probability")
    delta = np.zeros(scm.card(t.action_col))
    delta[action] = 1.0
    j = joint(scm, replace={t.action_col: ((), delta)})
    idx = [slice(None)] * j.ndim
    for c, v in zip(t.context_cols, ctx):
        idx[scm.axis(c)] = v
    sub = j[tuple(idx)]
    kept = [i for i in range(j.ndim) if not isinstance(idx[i], int)]
    y_ax = kept.index(scm.axis(t.outcome_col))
    py = sub.sum(axis=tuple(i for i in range(sub.ndim) if i != y_ax))
    return float(py @ scm.levels(t.outcome_col) / py.sum())


def cate_table(scm: DiscreteSCM) -> np.ndarray:
    """g*(ctx, a) for every context cell and action; NaN on zero-probability contexts."""
    t = scm.spec
    shape = scm.cards(t.context_cols) + (scm.card(t.action_col),)
    out = np.full(shape, np.nan)
    pctx = marginal(scm, t.context_cols)
    for ctx in np.ndindex(*shape[:-1]):
        if pctx[ctx] <= 0.0:
            continue
        for a in range(shape[-1]):
            out[ctx + (a,)] = exact_cate(scm, ctx, a)
    return out


# ---------------------------------------------------------------------------
# Interventional process
# ---------------------------------------------------------------------------

def _policy_replacements(scm: DiscreteSCM, policy: Policy,
                         ) -> dict[str, tuple[tuple[str, ...], np.ndarray]]:
    t = scm.spec
    if policy.kind == "table":
        if t.name == "dtr2":
            raise ScmError("dtr2 requires a two-stage ('dtr') policy")
        return {t.action_col: ((t.tilde_col,), policy.table)}
    if policy.kind == "extended":
        if t.extended_obs_col is None:
            raise ScmError("extended policies need a proxy-variable template")
        return {t.action_col: ((t.tilde_col, t.extended_obs_col), policy.table)}
    if policy.kind == "dtr":
        if t.name != "dtr2":
            raise ScmError("two-stage policies only apply to the dtr2 template")
        pi1, pi2 = policy.tables
        return {"A1": (("X1",), pi1), "A2": (("X1", "A1", "X2"), pi2)}
    raise ScmError(f"unknown policy kind {policy.kind!r}")


def interventional_joint(scm: DiscreteSCM, interv: InterventionalSpec,
                         policy: Policy) -> np.ndarray:
    """Joint of the interventional process: context reweighted to tilde_p and
    the behavior policy replaced by the interventional policy."""
    t = scm.spec
    rep = _policy_replacements(scm, policy)
    rep[t.tilde_col] = ((), np.asarray(interv.tilde_p, dtype=float))
    if scm.parents[t.tilde_col]:
        # tilde_col is not a root (pv template); reweight its marginal instead
        rep.pop(t.tilde_col)
        j = joint(scm, replace=rep)
        m = marginal(scm, (t.tilde_col,), table=j)
        w = np.where(m > 0, np.asarray(interv.tilde_p) / np.where(m > 0, m, 1.0), 0.0)
        return j * _expand(scm, w, [scm.axis(t.tilde_col)], j.ndim)
    return joint(scm, replace=rep)


def exact_policy_value(scm: DiscreteSCM, interv: InterventionalSpec,
                       policy: Policy) -> float:
    """v(pi): expected outcome under the interventional process, exactly."""
    t = scm.spec
    if policy.kind == "extended" and t.extended_obs_col is None:
        raise ScmError("extended policy on a non-proxy template")
    j = interventional_joint(scm, interv, policy)
    py = marginal(scm, (t.outcome_col,), table=j)
    return float(py @ scm.levels(t.outcome_col))


def policy_context_weights(scm: DiscreteSCM, interv: InterventionalSpec,
                           policy: Policy) -> np.ndarray:
    """Interventional weight of each (context, action) cell.

    The policy value equals the inner product of these weights with the
    CATE table; the pessimism step minimizes the same inner product over
    hypothesis CATE blocks.
    """
    t = scm.spec
    j = interventional_joint(scm, interv, policy)
    return marginal(scm, t.context_cols + (t.action_col,), table=j)


def extended_value_table(scm: DiscreteSCM, interv: InterventionalSpec,
                         policy: Policy) -> np.ndarray:
    """g^pi(x) = E_in[Y | X = x] for an extended policy, per context."""
    t = scm.spec
    j = interventional_joint(scm, interv, policy)
    pxy = marginal(scm, (t.tilde_col, t.outcome_col), table=j)
    px = pxy.sum(axis=1)
    out = np.full(scm.card(t.tilde_col), np.nan)
    ok = px > 0
    out[ok] = (pxy[ok] @ scm.levels(t.outcome_col)) / px[ok]
    return out


# ---------------------------------------------------------------------------
# Policy enumeration
# ---------------------------------------------------------------------------

def uniform_policy(scm: DiscreteSCM, extended: bool = False) -> Policy:
    t = scm.spec
    na = scm.card(t.action_col)
    if t.name == "dtr2":
        pi1 = np.full(scm.cards(("X1", "A1")), 1.0 / scm.card("A1"))
        pi2 = np.full(scm.cards(("X1", "A1", "X2", "A2")), 1.0 / na)
        return Policy(kind="dtr", tables=(pi1, pi2), label="uniform")
    if extended:
        shape = scm.cards((t.tilde_col, t.extended_obs_col)) + (na,)
        return Policy(kind="extended", table=np.full(shape, 1.0 / na), label="uniform")
    shape = (scm.card(t.tilde_col), na)
    return Policy(kind="table", table=np.full(shape, 1.0 / na), label="uniform")


def _det_tables(n_ctx: int, n_act: int):
    for assign in np.ndindex(*([n_act] * n_ctx)):
        tab = np.zeros((n_ctx, n_act))
        tab[np.arange(n_ctx), list(assign)] = 1.0
        yield assign, tab


def softmax_policy(scm: DiscreteSCM, features: np.ndarray, w: np.ndarray,
                   label: str = "") -> Policy:
    """Extended softmax policy from a feature table of shape ctx+(|W|,|A|,m)."""
    logits = features @ np.asarray(w, dtype=float)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    table = e / e.sum(axis=-1, keepdims=True)
    return Policy(kind="extended", table=table, weights=np.asarray(w, dtype=float),
                  label=label or f"softmax{np.round(w, 3)}")


def softmax_grid_weights(dim: int, resolution: int, c0: float,
                         span: float | None = None) -> list[np.ndarray]:
    """Lattice of weight vectors in [-span, span]^dim kept inside the c0-ball."""
    axis_pts = np.linspace(-(span or c0), span or c0, resolution)
    out = []
    for idx in np.ndindex(*([resolution] * dim)):
        w = axis_pts[list(idx)]
        if np.linalg.norm(w) <= c0 + 1e-12:
            out.append(w)
    return out


def enumerate_policies(scm: DiscreteSCM, interv: InterventionalSpec,
                       mode: str | None = None, cap: int = 4096,
                       features: np.ndarray | None = None) -> list[Policy]:
    """Finite candidate class: all deterministic maps, a stagewise product for
    dtr2, or a softmax weight lattice for extended classes."""
    t = scm.spec
    mode = mode or interv.policy_mode
    na = scm.card(t.action_col)
    if mode == "deterministic":
        if t.name == "dtr2":
            return _enumerate_dtr(scm, cap, stagewise=False)
        n_ctx = scm.card(t.tilde_col)
        if na ** n_ctx > cap:
            raise PolicyEnumerationError(
                f"{na}^{n_ctx} deterministic policies exceed cap {cap}")
        return [Policy(kind="table", table=tab, label=f"det{assign}")
                for assign, tab in _det_tables(n_ctx, na)]
    if mode == "dtr-stagewise":
        return _enumerate_dtr(scm, cap, stagewise=True)
    if mode == "softmax-grid":
        if features is None:
            raise ScmError("softmax-grid enumeration needs a feature table")
        p = dict(interv.policy_params)
        c0 = float(p.get("c0", 1.0))
        ws = softmax_grid_weights(int(p.get("dim", features.shape[-1])),
                                  int(p.get("resolution", 3)), c0,
                                  span=float(p.get("span", c0)))
        if len(ws) > cap:
            raise PolicyEnumerationError(f"softmax grid of {len(ws)} exceeds cap {cap}")
        return [softmax_policy(scm, features, w) for w in ws]
    raise ScmError(f"unknown policy mode {mode!r}")


def _enumerate_dtr(scm: DiscreteSCM, cap: int, stagewise: bool) -> list[Policy]:
    n_x1, n_a1, n_x2, n_a2 = (scm.card(c) for c in ("X1", "A1", "X2", "A2"))
    stage1 = list(_det_tables(n_x1, n_a1))
    if stagewise:
        stage2 = list(_det_tables(n_x2, n_a2))  # pi2 reads X2 only
        count = len(stage1) * len(stage2)
    else:
        stage2 = list(_det_tables(n_x1 * n_a1 * n_x2, n_a2))
        count = len(stage1) * len(stage2)
    if count > cap:
        raise PolicyEnumerationError(f"{count} two-stage policies exceed cap {cap}")
    out = []
    for s1, tab1 in stage1:
        for s2, tab2 in stage2:
            if stagewise:
                pi2 = np.broadcast_to(tab2, (n_x1, n_a1, n_x2, n_a2)).copy()
            else:
                pi2 = tab2.reshape(n_x1, n_a1, n_x2, n_a2)
            out.append(Policy(kind="dtr", tables=(tab1, pi2),
                              label=f"det{s1}|{s2}"))
    return out


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DatasetSchema:
    template: str
    columns: tuple[str, ...]
    cards: tuple[int, ...]
    levels: Mapping[str, tuple[float, ...]]
    maskable: tuple[str, ...]

    def card(self, col: str) -> int:
        return self.cards[self.columns.index(col)]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed trials; masked cells hold MISSING (-1)."""

    schema: DatasetSchema
    data: np.ndarray        # (n, n_cols) int64

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def col(self, name: str) -> np.ndarray:
        return self.data[:, self.schema.columns.index(name)]

    def values(self, name: str) -> np.ndarray:
        """Real values of a level-mapped column; requires no MISSING cells."""
        idx = self.col(name)
        if np.any(idx == MISSING):
            raise ScmError(f"column {name} contains missing cells")
        return np.asarray(self.schema.levels[name], dtype=float)[idx]

    def observed_rows(self, cols: Sequence[str]) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        for c in cols:
            mask &= self.col(c) != MISSING
        return mask

    def take(self, mask: np.ndarray) -> "Dataset":
        return Dataset(schema=self.schema, data=self.data[mask])


def dataset_schema(scm: DiscreteSCM) -> DatasetSchema:
    t = scm.spec
    cols = t.data_cols + ((PSEUDO_ACTION_COL,) if t.pseudo_action else ())
    cards = tuple(scm.card(c) if c != PSEUDO_ACTION_COL else scm.card(t.action_col)
                  for c in cols)
    levels = {c: tuple(scm._vars[c].levels) for c in t.real_valued}
    return DatasetSchema(template=t.name, columns=cols, cards=cards,
                         levels=levels, maskable=tuple(t.maskable))


def _draw_conditional(rng: np.random.Generator, cpt: np.ndarray,
                      parent_cols: list[np.ndarray], n: int) -> np.ndarray:
    flat = cpt.reshape(-1, cpt.shape[-1])
    if parent_cols:
        ridx = np.ravel_multi_index(parent_cols, cpt.shape[:-1])
    else:
        ridx = np.zeros(n, dtype=np.intp)
    cum = np.cumsum(flat, axis=1)
    u = rng.random(n)
    return (u[:, None] > cum[ridx][:, :-1]).sum(axis=1).astype(np.int64)


def sample_full(scm: DiscreteSCM, miss: MissingnessSpec, n: int, seed: int,
                ) -> dict[str, np.ndarray]:
    """All columns including latents and R indicators (diagnostic use)."""
    if n < 0:
        raise ScmError("n must be nonnegative")
    root = np.random.SeedSequence([int(seed), 0x5C11])
    rng = np.random.default_rng(root)
    cols: dict[str, np.ndarray] = {}
    for v in scm.variables:
        pa = scm.parents[v.name]
        cols[v.name] = _draw_conditional(rng, np.asarray(scm.cpts[v.name], float),
                                         [cols[p] for p in pa], n)
    for m in miss.order:
        p1 = np.asarray(miss.tables[m], dtype=float)
        tab = np.stack([1.0 - p1, p1], axis=-1)
        cols["R_" + m] = _draw_conditional(rng, tab, [cols[p] for p in miss.parents[m]], n)
    return cols


def sample_observational(scm: DiscreteSCM, miss: MissingnessSpec, n: int,
                         seed: int) -> Dataset:
    """n i.i.d. rows from the observational process with missingness applied.

    The confounder column is dropped; the pseudo-action column (when the
    template uses one) is filled from a dedicated uniform stream.
    """
    rep = validate_scm(scm, miss)
    if not rep.ok:
        raise ScmError("invalid model: " + "; ".join(rep.violations))
    for v in scm.variables:
        if np.all(marginal(scm, (v.name,)) <= 0):
            raise ScmError(f"{v.name} has empty support")
    t = scm.spec
    schema = dataset_schema(scm)
    cols = sample_full(scm, miss, n, seed)
    data = np.empty((n, len(schema.columns)), dtype=np.int64)
    for j, c in enumerate(schema.columns):
        if c == PSEUDO_ACTION_COL:
            rng_ap = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA9]))
            data[:, j] = rng_ap.integers(0, scm.card(t.action_col), size=n)
        else:
            vals = cols[c].copy()
            if c in t.maskable:
                vals[cols["R_" + c] == 0] = MISSING
            data[:, j] = vals
    return Dataset(schema=schema, data=data)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def scm_to_json(scm: DiscreteSCM, miss: MissingnessSpec) -> str:
    doc = {
        "template": scm.template,
        "variables": [{"name": v.name, "card": v.card,
                       "levels": list(v.levels) if v.levels else None}
                      for v in scm.variables],
        "parents": {k: list(v) for k, v in scm.parents.items()},
        "cpts": {k: np.asarray(v).ravel().tolist() for k, v in scm.cpts.items()},
        "missingness": {
            "parents": {k: list(v) for k, v in miss.parents.items()},
            "tables": {k: np.asarray(v).ravel().tolist() for k, v in miss.tables.items()},
        },
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def scm_from_json(text: str) -> tuple[DiscreteSCM, MissingnessSpec]:
    doc = json.loads(text)
    variables = tuple(Variable(d["name"], int(d["card"]),
                               tuple(d["levels"]) if d["levels"] else None)
                      for d in doc["variables"])
    cards = {v.name: v.card for v in variables}
    parents = {k: tuple(v) for k, v in doc["parents"].items()}
    cpts = {}
    for k, flat in doc["cpts"].items():
        shape = tuple(cards[p] for p in parents[k]) + (cards[k],)
        cpts[k] = np.asarray(flat, dtype=float).reshape(shape)
    mp = {k: tuple(v) for k, v in doc["missingness"]["parents"].items()}
    mt = {}
    for k, flat in doc["missingness"]["tables"].items():
        shape = tuple(cards[p] for p in mp[k])
        mt[k] = np.asarray(flat, dtype=float).reshape(shape)
    return (DiscreteSCM(template=doc["template"], variables=variables,
                        parents=parents, cpts=cpts),
            MissingnessSpec(parents=mp, tables=mt))


def dataset_to_csv(ds: Dataset, path, sidecar_path=None) -> None:
    """CSV with a header row; MISSING cells as NA, level-mapped columns as
    their real values.  A JSON sidecar carries the schema."""
    cols = ds.schema.columns
    lines = [",".join(cols)]
    levels = {c: np.asarray(v) for c, v in ds.schema.levels.items()}
    for row in ds.data:
        cells = []
        for j, c in enumerate(cols):
            v = row[j]
            if v == MISSING:
                cells.append(MISSING_TOKEN)
            elif c in levels:
                cells.append(repr(float(levels[c][v])))
            else:
                cells.append(str(int(v)))
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if sidecar_path is not None:
        doc = {"template": ds.schema.template, "columns": list(cols),
               "cards": list(ds.schema.cards),
               "levels": {k: list(v) for k, v in ds.schema.levels.items()},
               "maskable": list(ds.schema.maskable)}
        with open(sidecar_path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)


def dataset_from_csv(path, sidecar_path) -> Dataset:
    with open(sidecar_path) as fh:
        doc = json.load(fh)
    schema = DatasetSchema(template=doc["template"], columns=tuple(doc["columns"]),
                           cards=tuple(doc["cards"]),
                           levels={k: tuple(v) for k, v in doc["levels"].items()},
                           maskable=tuple(doc["maskable"]))
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        assert tuple(header) == schema.columns
        rows = []
        for line in fh:
            cells = line.strip().split(",")
            row = []
            for c, cell in zip(schema.columns, cells):
                if cell == MISSING_TOKEN:
                    row.append(MISSING)
                elif c in schema.levels:
                    row.append(int(np.argmin(np.abs(
                        np.asarray(schema.levels[c]) - float(cell)))))
                else:
                    row.append(int(cell))
            rows.append(row)
    data = (np.asarray(rows, dtype=np.int64) if rows
            else np.empty((0, len(schema.columns)), dtype=np.int64))
    return Dataset(schema=schema, data=data)
