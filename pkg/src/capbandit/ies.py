"""United-form conditional moment equation systems over one-hot classes.

Each equation k demands E[alpha_k(h, Y_k) | Z_k] = 0 on the subset of rows
whose missingness filter is satisfied.  alpha_k is affine in the hypothesis
blocks: a signed sum of block evaluations (possibly with the action column
remapped to the pseudo action, or summed/policy-averaged over actions) plus
an offset built from the outcome.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .envs import Env, iv_view, pv_view
from .scm import MISSING, PSEUDO_ACTION_COL, Dataset, Policy, ScmError


class ContractViolation(ScmError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    name: str
    cols: tuple[str, ...]
    cards: tuple[int, ...]
    budget: float
    offset: int            # start position in the concatenated weight vector

    @property
    def dim(self) -> int:
        return int(np.prod(self.cards))


@dataclass(frozen=True, eq=False)
class AlphaTerm:
    block: str
    sign: float
    mode: str = "point"                 # point | sum_actions | policy_sum
    remap: Mapping[str, str] = field(default_factory=dict)
    sum_col: str | None = None          # block column summed over
    policy: np.ndarray | None = None    # weights, ctx_cards + (n_actions,)
    policy_cols: tuple[str, ...] = ()   # data columns indexing the policy table



def term_weight(block: BlockSpec, term: AlphaTerm) -> float:
    """Bound on the coefficient mass a term puts on its block: the number of
    summed categories for a plain action sum, 1 otherwise (policy weights
    sum to 1)."""
    if term.mode == "sum_actions":
        return float(block.cards[block.cols.index(term.sum_col)])
    return 1.0


@dataclass(frozen=True, eq=False)
class OffsetSpec:
    kind: str = "none"                  # none | neg_outcome | neg_outcome_policy
    outcome_col: str = ""
    policy: np.ndarray | None = None
    policy_cols: tuple[str, ...] = ()
    action_col: str = ""


@dataclass(frozen=True, eq=False)
class EquationSpec:
    index: int
    name: str
    cond_cols: tuple[str, ...]
    filter_cols: tuple[str, ...]
    terms: tuple[AlphaTerm, ...]
    offset: OffsetSpec
    dual_radius: float = 0.0


@dataclass(frozen=True, eq=False)
class IesProblem:
    template: str
    blocks: tuple[BlockSpec, ...]
    equations: tuple[EquationSpec, ...]
    cards: Mapping[str, int]            # data-column cardinalities (incl. Ap)
    levels: Mapping[str, tuple[float, ...]]
    l_outcome: float
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "_by_name", {b.name: b for b in self.blocks})

    @property
    def total_dim(self) -> int:
        last = self.blocks[-1]
        return last.offset + last.dim

    def block(self, name: str) -> BlockSpec:
        return self._by_name[name]

    @property
    def g_block(self) -> BlockSpec:
        return self.blocks[-1]

    def dual_dim(self, eq: EquationSpec) -> int:
        return int(np.prod([self.cards[c] for c in eq.cond_cols]))

    def budgets(self) -> np.ndarray:
        return np.asarray([b.budget for b in self.blocks])

    @property
    def l_alpha(self) -> float:
        """Valid sup bound on |alpha_k| given one-hot features and budgets."""
        best = 0.0
        for eq in self.equations:
            s = sum(term_weight(self.block(t.block), t) * self.block(t.block).budget
                    for t in eq.terms)
            if eq.offset.kind != "none":
                s += self.l_outcome
            best = max(best, s)
        return best

    def referenced_cols(self, eq: EquationSpec) -> tuple[str, ...]:
        cols: list[str] = list(eq.cond_cols)
        for t in eq.terms:
            blk = self.block(t.block)
            for c in blk.cols:
                if t.mode != "point" and c == t.sum_col:
                    continue
                cols.append(t.remap.get(c, c))
            cols.extend(t.policy_cols)
        if eq.offset.kind != "none":
            cols.append(eq.offset.outcome_col)
            cols.extend(eq.offset.policy_cols)
            if eq.offset.kind == "neg_outcome_policy":
                cols.append(eq.offset.action_col)
        seen: list[str] = []
        for c in cols:
            if c not in seen:
                seen.append(c)
        return tuple(seen)

    def to_json(self) -> str:
        doc = {
            "template": self.template, "label": self.label,
            "l_outcome": self.l_outcome,
            "cards": dict(self.cards),
            "blocks": [{"name": b.name, "cols": list(b.cols),
                        "cards": list(b.cards), "budget": b.budget} for b in self.blocks],
            "equations": [{
                "index": e.index, "name": e.name,
                "cond": list(e.cond_cols), "filter": list(e.filter_cols),
                "dual_radius": e.dual_radius,
                "offset": {"kind": e.offset.kind, "outcome": e.offset.outcome_col},
                "terms": [{"block": t.block, "sign": t.sign, "mode": t.mode,
                           "remap": dict(t.remap), "sum_col": t.sum_col}
                          for t in e.terms],
            } for e in self.equations],
        }
        return json.dumps(doc, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# Row batches: a dataset subset or an exact population support, both expressed
# as integer column arrays with weights.
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RowBatch:
    cols: Mapping[str, np.ndarray]
    weights: np.ndarray
    count: int                      # subset size T_k (0 for empty)

    @property
    def size(self) -> int:
        return len(self.weights)


def select_subset(dataset: Dataset, eq: EquationSpec) -> Dataset:
    """Rows where every indicator in the equation's filter is 1."""
    return dataset.take(dataset.observed_rows(eq.filter_cols))


def batch_from_dataset(problem: IesProblem, eq: EquationSpec,
                       dataset: Dataset) -> RowBatch:
    sub = select_subset(dataset, eq)
    cols = {}
    for c in problem.referenced_cols(eq):
        v = sub.col(c)
        if np.any(v == MISSING):
            raise ContractViolation(
                f"equation {eq.name} references {c} but the filtered subset "
                f"still contains missing cells")
        cols[c] = v
    n = sub.n
    w = np.full(n, 1.0 / n) if n else np.zeros(0)
    return RowBatch(cols=cols, weights=w, count=n)


def batch_from_population(problem: IesProblem, eq: EquationSpec, env: Env,
                          ) -> RowBatch:
    """Exact mu_k: configurations of the referenced columns weighted by
    P(cols | filter indicators = 1), marginalizing everything else."""
    scm = env.scm
    cols = problem.referenced_cols(eq)
    model_cols = [c for c in cols if c != PSEUDO_ACTION_COL]
    jr = env.joint_r()
    idx = [slice(None)] * jr.ndim
    for c in eq.filter_cols:
        idx[env.r_axis(c)] = 1
    sub = jr[tuple(idx)]
    kept_axes = [i for i in range(jr.ndim) if not isinstance(idx[i], int)]
    keep = [kept_axes.index(scm.axis(c)) for c in model_cols]
    other = tuple(i for i in range(sub.ndim) if i not in keep)
    table = sub.sum(axis=other)
    table = np.moveaxis(table, np.argsort(np.argsort(keep)), range(len(keep)))
    table = table / table.sum()
    grids = np.meshgrid(*[np.arange(s) for s in table.shape], indexing="ij")
    out_cols = {c: g.ravel() for c, g in zip(model_cols, grids)}
    weights = table.ravel()
    if PSEUDO_ACTION_COL in cols:
        na = problem.cards[PSEUDO_ACTION_COL]
        m = len(weights)
        out_cols = {c: np.repeat(v, na) for c, v in out_cols.items()}
        out_cols[PSEUDO_ACTION_COL] = np.tile(np.arange(na), m)
        weights = np.repeat(weights / na, na)
    mask = weights > 0
    return RowBatch(cols={c: v[mask] for c, v in out_cols.items()},
                    weights=weights[mask], count=int(mask.sum()))


# ---------------------------------------------------------------------------
# Alpha evaluation
# ---------------------------------------------------------------------------

def _block_positions(problem: IesProblem, blk: BlockSpec, batch: RowBatch,
                     remap: Mapping[str, str], override: Mapping[str, int] | None = None,
                     ) -> np.ndarray:
    arrs = []
    n = batch.size
    for c in blk.cols:
        if override is not None and c in override:
            arrs.append(np.full(n, override[c], dtype=np.int64))
        else:
            arrs.append(batch.cols[remap.get(c, c)])
    return blk.offset + np.ravel_multi_index(arrs, blk.cards)


def term_contributions(problem: IesProblem, eq: EquationSpec, batch: RowBatch,
                       ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (positions, coefficients) pairs, each of batch length, whose sum
    over pairs gives the linear coefficient row of alpha at every row."""
    for t in eq.terms:
        blk = problem.block(t.block)
        if t.mode == "point":
            pos = _block_positions(problem, blk, batch, t.remap)
            yield pos, np.full(batch.size, t.sign)
        elif t.mode == "sum_actions":
            for a in range(blk.cards[blk.cols.index(t.sum_col)]):
                pos = _block_positions(problem, blk, batch, t.remap,
                                       override={t.sum_col: a})
                yield pos, np.full(batch.size, t.sign)
        elif t.mode == "policy_sum":
            ctx = tuple(batch.cols[c] for c in t.policy_cols)
            for a in range(blk.cards[blk.cols.index(t.sum_col)]):
                pos = _block_positions(problem, blk, batch, t.remap,
                                       override={t.sum_col: a})
                yield pos, t.sign * t.policy[ctx + (a,)]
        else:
            raise ScmError(f"unknown term mode {t.mode!r}")


def offset_values(problem: IesProblem, eq: EquationSpec, batch: RowBatch,
                  ) -> np.ndarray:
    o = eq.offset
    if o.kind == "none":
        return np.zeros(batch.size)
    y = np.asarray(problem.levels[o.outcome_col])[batch.cols[o.outcome_col]]
    if o.kind == "neg_outcome":
        return -y
    if o.kind == "neg_outcome_policy":
        ctx = tuple(batch.cols[c] for c in o.policy_cols)
        return -y * o.policy[ctx + (batch.cols[o.action_col],)]
    raise ScmError(f"unknown offset kind {o.kind!r}")


def alpha_batch(problem: IesProblem, eq: EquationSpec, weights: np.ndarray,
                batch: RowBatch) -> np.ndarray:
    """alpha_k at every row for the concatenated weight vector."""
    out = offset_values(problem, eq, batch)
    for pos, coeff in term_contributions(problem, eq, batch):
        out = out + coeff * weights[pos]
    return out


def eval_alpha(problem: IesProblem, eq: EquationSpec, weights: np.ndarray,
               row: Mapping[str, int]) -> float:
    """alpha_k on a single row (a mapping from column name to category)."""
    for c in problem.referenced_cols(eq):
        if row[c] == MISSING:
            raise ContractViolation(f"row has MISSING in referenced column {c}")
    batch = RowBatch(cols={c: np.asarray([row[c]]) for c in row},
                     weights=np.ones(1), count=1)
    return float(alpha_batch(problem, eq, weights, batch)[0])


def cond_index(problem: IesProblem, eq: EquationSpec, batch: RowBatch,
               ) -> np.ndarray:
    """Index of each row's conditioning cell (the one-hot dual feature)."""
    arrs = [batch.cols[c] for c in eq.cond_cols]
    cards = [problem.cards[c] for c in eq.cond_cols]
    return np.ravel_multi_index(arrs, cards)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _mk_blocks(defs: Sequence[tuple[str, tuple[str, ...]]],
               cards: Mapping[str, int], l_outcome: float,
               ) -> tuple[BlockSpec, ...]:
    blocks = []
    off = 0
    for name, cols in defs:
        shape = tuple(cards[c] for c in cols)
        dim = int(np.prod(shape))
        blocks.append(BlockSpec(name=name, cols=cols, cards=shape,
                                budget=2.0 * l_outcome * np.sqrt(dim), offset=off))
        off += dim
    return tuple(blocks)


def _data_cards(env: Env) -> dict[str, int]:
    t = env.template
    cards = {c: env.scm.card(c) for c in t.data_cols}
    if t.pseudo_action:
        cards[PSEUDO_ACTION_COL] = env.scm.card(t.action_col)
    return cards


def _radius(problem_blocks, cards, terms, offset_kind, l_outcome) -> float:
    by_name = {b.name: b for b in problem_blocks}
    s = sum(term_weight(by_name[t.block], t) * by_name[t.block].budget for t in terms)
    return 2.0 * s + (2.0 * l_outcome if offset_kind != "none" else 0.0)


def _finish(template, blocks, raw_eqs, cards, levels, l_outcome, label=""):
    eqs = []
    for i, (name, cond, filt, terms, off) in enumerate(raw_eqs):
        eqs.append(EquationSpec(
            index=i, name=name, cond_cols=tuple(cond), filter_cols=tuple(filt),
            terms=tuple(terms), offset=off,
            dual_radius=_radius(blocks, cards, terms, off.kind, l_outcome)))
    return IesProblem(template=template, blocks=blocks, equations=tuple(eqs),
                      cards=cards, levels=levels, l_outcome=l_outcome, label=label)


def _levels(env: Env) -> dict[str, tuple[float, ...]]:
    return {c: tuple(env.scm.levels(c)) for c in env.template.real_valued}


def build_iv_ies(env: Env) -> IesProblem:
    """Two coupled equations: an outcome bridge over (Y, A, Z) and the CATE
    block, filtered on the template's missingness indicators."""
    v = iv_view(env)
    cards = _data_cards(env)
    l_y = float(np.abs(env.scm.levels(v.y_col)).max())
    blocks = _mk_blocks([("h1", v.h1_cols), ("g", v.x_cols + (v.a_col,))],
                        cards, l_y)
    raw = [
        ("bridge", (v.z_col,), v.filter1,
         [AlphaTerm("h1", +1.0)], OffsetSpec("neg_outcome", outcome_col=v.y_col)),
        ("cate", (v.a_col,) + v.x_cols + (v.z_col,), v.filter2,
         [AlphaTerm("g", +1.0), AlphaTerm("h1", -1.0)], OffsetSpec()),
    ]
    return _finish(env.template.name, blocks, raw, cards, _levels(env), l_y,
                   label="iv")


def build_dtr_ies(env: Env) -> IesProblem:
    if env.template.name != "dtr2":
        raise ScmError("build_dtr_ies needs the dtr2 template")
    return build_iv_ies(env)


def build_pv_ies(env: Env) -> IesProblem:
    """Four equations with the pseudo-action column closing the system."""
    v = pv_view(env)
    cards = _data_cards(env)
    l_y = float(np.abs(env.scm.levels(v.y_col)).max())
    blocks = _mk_blocks([
        ("h1", (v.y_col, v.a_col, v.x_col, v.z_col)),
        ("h2", (v.a_col, v.w_col, v.x_col)),
        ("h3", (v.y_col, v.a_col, v.x_col, PSEUDO_ACTION_COL)),
        ("g", (v.x_col, v.a_col)),
    ], cards, l_y)
    remap_ap = {v.a_col: PSEUDO_ACTION_COL}
    raw = [
        ("outcome-bridge", (v.a_col, v.x_col, v.z_col), v.filter1,
         [AlphaTerm("h1", +1.0)], OffsetSpec("neg_outcome", outcome_col=v.y_col)),
        ("proxy-bridge", (v.a_col, v.w_col, v.x_col, v.z_col), v.filter2,
         [AlphaTerm("h2", +1.0), AlphaTerm("h1", -1.0)], OffsetSpec()),
        ("pseudo-action", (v.a_col, v.w_col, v.x_col, PSEUDO_ACTION_COL), v.filter3,
         [AlphaTerm("h3", +1.0), AlphaTerm("h2", -1.0, remap=remap_ap)],
         OffsetSpec()),
        ("cate", (v.x_col, PSEUDO_ACTION_COL), v.filter4,
         [AlphaTerm("g", +1.0, remap=remap_ap), AlphaTerm("h3", -1.0)],
         OffsetSpec()),
    ]
    return _finish(env.template.name, blocks, raw, cards, _levels(env), l_y,
                   label="pv")


def build_extended_pv_ies(env: Env, pi: Policy) -> IesProblem:
    """Policy-dependent system whose last block is the per-context value."""
    if pi.kind != "extended":
        raise ScmError("extended identification needs an extended policy")
    v = pv_view(env)
    cards = _data_cards(env)
    l_y = float(np.abs(env.scm.levels(v.y_col)).max())
    blocks = _mk_blocks([
        ("h1", (v.y_col, v.a_col, v.x_col, v.z_col)),
        ("h2", (v.a_col, v.w_col, v.x_col)),
        ("h3", (v.y_col, v.a_col, v.x_col)),
        ("g", (v.x_col,)),
    ], cards, l_y)
    raw = [
        ("outcome-bridge", (v.a_col, v.x_col, v.z_col), v.filter1,
         [AlphaTerm("h1", +1.0)], OffsetSpec()),
        ("proxy-bridge", (v.a_col, v.w_col, v.x_col, v.z_col), v.filter2,
         [AlphaTerm("h2", +1.0), AlphaTerm("h1", -1.0)],
         OffsetSpec("neg_outcome_policy", outcome_col=v.y_col, policy=pi.table,
                    policy_cols=(v.x_col, v.w_col), action_col=v.a_col)),
        ("action-sum", (v.a_col, v.w_col, v.x_col), v.filter3,
         [AlphaTerm("h3", +1.0),
          AlphaTerm("h2", -1.0, mode="sum_actions", sum_col=v.a_col)],
         OffsetSpec()),
        ("value", (v.x_col,), v.filter4,
         [AlphaTerm("g", +1.0), AlphaTerm("h3", -1.0)], OffsetSpec()),
    ]
    return _finish(env.template.name, blocks, raw, cards, _levels(env), l_y,
                   label="pv-extended")


def build_pomdp_ies(env: Env, pi: Policy) -> IesProblem:
    if env.template.name != "pomdp1":
        raise ScmError("build_pomdp_ies needs the pomdp1 template")
    return build_extended_pv_ies(env, pi)


def build_dtr_extended_ies(env: Env, pi: Policy) -> IesProblem:
    """Five-equation system integrating both stage policies; the auxiliary
    first-stage regression is exposed by build_dtr_zeta_ies."""
    if env.template.name != "dtr2" or pi.kind != "dtr":
        raise ScmError("extended dtr identification needs dtr2 and a stage pair")
    pi1, pi2 = pi.tables
    cards = _data_cards(env)
    l_y = float(np.abs(env.scm.levels("Y2")).max())
    blocks = _mk_blocks([
        ("h1", ("A1", "A2", "Y1", "Y2")),
        ("h2", ("X1", "A1", "X2", "A2")),
        ("h3", ("Y1", "X1", "A1")),
        ("h4", ("X1", "A1")),
        ("g", ("X1",)),
    ], cards, l_y)
    raw = [
        ("bridge", ("Y1",), (),
         [AlphaTerm("h1", +1.0)], OffsetSpec("neg_outcome", outcome_col="Y2")),
        ("context-bridge", ("X1", "A1", "X2", "A2", "Y1"), ("X1", "X2"),
         [AlphaTerm("h2", +1.0), AlphaTerm("h1", -1.0)], OffsetSpec()),
        ("stage2-average", ("X1", "A1", "X2"), ("X1", "X2"),
         [AlphaTerm("h3", +1.0),
          AlphaTerm("h2", -1.0, mode="policy_sum", sum_col="A2", policy=pi2,
                    policy_cols=("X1", "A1", "X2"))],
         OffsetSpec()),
        ("stage1-bridge", ("X1", "A1"), ("X1",),
         [AlphaTerm("h4", +1.0), AlphaTerm("h3", -1.0)], OffsetSpec()),
        ("stage1-average", ("X1", "A1"), ("X1",),
         [AlphaTerm("g", +1.0),
          AlphaTerm("h4", -1.0, mode="policy_sum", sum_col="A1", policy=pi1,
                    policy_cols=("X1",))],
         OffsetSpec()),
    ]
    return _finish("dtr2", blocks, raw, cards, _levels(env), l_y,
                   label="dtr-extended")


def build_dtr_zeta_ies(env: Env) -> IesProblem:
    """Single-equation system recovering the first-stage reward regression."""
    if env.template.name != "dtr2":
        raise ScmError("build_dtr_zeta_ies needs the dtr2 template")
    cards = _data_cards(env)
    l_y1 = float(np.abs(env.scm.levels("Y1")).max())
    blocks = _mk_blocks([("zeta", ("X1", "A1", "X2"))], cards, l_y1)
    raw = [
        ("stage1-regression", ("X1", "A1", "X2"), ("X1", "X2"),
         [AlphaTerm("zeta", +1.0)], OffsetSpec("neg_outcome", outcome_col="Y1")),
    ]
    return _finish("dtr2", blocks, raw, cards, _levels(env), l_y1, label="dtr-zeta")


def build_problem(env: Env, pi: Policy | None = None,
                  extended: bool = False) -> IesProblem:
    """Template dispatch used by the experiment harness."""
    name = env.template.name
    if name == "ccb-iv":
        return build_iv_ies(env)
    if name == "dtr2":
        return build_dtr_ies(env)
    if name == "ccb-pv":
        return (build_extended_pv_ies(env, pi) if extended else build_pv_ies(env))
    if name == "pomdp1":
        if not extended or pi is None:
            return build_pv_ies(env)
        return build_pomdp_ies(env, pi)
    raise ScmError(f"unknown template {name}")
