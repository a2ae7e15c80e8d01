"""Exact matrix-form identification on discrete models.

Serves as the ground truth for the minimax pipeline: conditional
probability matrices are computed either by exact enumeration (population
source) or by raw empirical frequencies (dataset source), and the bridge
functions are recovered through truncated Moore-Penrose pseudo-inverses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Env, IvView, PvView, iv_view, pv_view
from .ies import (IesProblem, build_dtr_extended_ies, build_dtr_zeta_ies,
                  build_extended_pv_ies, build_iv_ies, build_pv_ies)
from .scm import MISSING, Dataset, Policy, ScmError, marginal


class IdentificationError(ScmError):
    def __init__(self, msg: str, residual: float = np.nan):
        super().__init__(msg)
        self.residual = residual


RANK_TOL = 1e-9


def pseudo_inverse(m: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Moore-Penrose inverse with singular values below tol * sigma_max dropped."""
    return np.linalg.pinv(np.asarray(m, dtype=float), rcond=tol)


def matrix_rank(m: np.ndarray, tol: float = RANK_TOL) -> int:
    s = np.linalg.svd(np.asarray(m, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


# ---------------------------------------------------------------------------
# Probability-table sources
# ---------------------------------------------------------------------------

class PopulationSource:
    """Exact conditional tables from the enumerated joint with indicators."""

    def __init__(self, env: Env):
        self.env = env

    def table(self, out_cols, given=None, observed=()):
        env, scm = self.env, self.env.scm
        jr = env.joint_r()
        idx = [slice(None)] * jr.ndim
        for c in observed:
            idx[env.r_axis(c)] = 1
        for c, v in (given or {}).items():
            idx[scm.axis(c)] = int(v)
        sub = jr[tuple(idx)]
        kept = [i for i in range(jr.ndim) if not isinstance(idx[i], int)]
        keep = [kept.index(scm.axis(c)) for c in out_cols]
        other = tuple(i for i in range(sub.ndim) if i not in keep)
        t = sub.sum(axis=other)
        t = np.moveaxis(t, np.argsort(np.argsort(keep)), range(len(keep)))
        total = t.sum()
        if total <= 0.0:
            raise IdentificationError(
                f"conditioning cell {given} x observed {observed} has zero mass")
        return t / total


class DatasetSource:
    """Add-nothing empirical frequencies; zero-count cells raise rather than
    being smoothed away."""

    def __init__(self, dataset: Dataset):
        self.ds = dataset

    def table(self, out_cols, given=None, observed=()):
        ds = self.ds
        mask = ds.observed_rows(tuple(observed) + tuple(out_cols))
        for c, v in (given or {}).items():
            mask &= ds.col(c) == int(v)
        n = int(mask.sum())
        if n == 0:
            raise IdentificationError(
                f"no fully observed rows for cell {given} x observed {observed}")
        shape = tuple(ds.schema.card(c) for c in out_cols)
        flat = np.ravel_multi_index([ds.col(c)[mask] for c in out_cols], shape)
        return np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape) / n


def _source(env: Env, source: str, dataset: Dataset | None):
    if source == "population":
        return PopulationSource(env)
    if source == "dataset":
        if dataset is None:
            raise ScmError("dataset source requires a dataset")
        return DatasetSource(dataset)
    raise ScmError(f"unknown source {source!r}")


def _colnorm(t: np.ndarray) -> np.ndarray:
    """Joint table (rows, cols...) -> column-conditional matrix (rows, cells)."""
    m = t.reshape(t.shape[0], -1)
    s = m.sum(axis=0, keepdims=True)
    if np.any(s <= 0):
        raise IdentificationError("empty column in conditional matrix")
    return m / s


# ---------------------------------------------------------------------------
# Completeness diagnostics
# ---------------------------------------------------------------------------

@dataclass
class RankReport:
    which: str
    cells: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(rank >= need for _, rank, need in self.cells)

    def add(self, label: str, rank: int, need: int) -> None:
        self.cells.append((label, rank, need))


def completeness_check(env: Env, which: str) -> RankReport:
    """Rank conditions that let the distributional information of the outcome
    restore the masked variables."""
    src = PopulationSource(env)
    rep = RankReport(which=which)
    if which == "iv":
        v = iv_view(env)
        nx = int(np.prod(env.scm.cards(v.x_cols)))
        for a in range(env.scm.card(v.a_col)):
            for z in range(env.scm.card(v.z_col)):
                t = src.table((v.y_col,) + v.x_cols,
                              given={v.a_col: a, v.z_col: z}, observed=v.filter2)
                rep.add(f"a={a},z={z}", matrix_rank(_colnorm(t)), nx)
        return rep
    v = pv_view(env)
    nw = env.scm.card(v.w_col)
    if which == "pv-first":
        for a in range(env.scm.card(v.a_col)):
            for x in range(env.scm.card(v.x_col)):
                for z in range(env.scm.card(v.z_col)):
                    t = src.table((v.y_col, v.w_col),
                                  given={v.a_col: a, v.x_col: x, v.z_col: z},
                                  observed=v.filter2)
                    rep.add(f"a={a},x={x},z={z}", matrix_rank(_colnorm(t)), nw)
        return rep
    if which == "pv-second":
        for a in range(env.scm.card(v.a_col)):
            for x in range(env.scm.card(v.x_col)):
                t = src.table((v.y_col, v.w_col),
                              given={v.a_col: a, v.x_col: x}, observed=v.filter3)
                rep.add(f"a={a},x={x}", matrix_rank(_colnorm(t)), nw)
        return rep
    raise ScmError(f"unknown completeness check {which!r}")


# ---------------------------------------------------------------------------
# Instrumental-variable identification
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class IvIdentification:
    g: np.ndarray                 # context cells x actions
    h1: np.ndarray                # |Y| x |A| x |Z|
    residual: float
    system_rank: int
    system_cond: float


def iv_identify_matrix(env: Env, source: str = "population",
                       dataset: Dataset | None = None, tol: float = RANK_TOL,
                       residual_tol: float | None = None) -> IvIdentification:
    """Recover the CATE by inverting the outcome-given-context matrices.

    Per (action, instrument) cell the masked context distribution is
    restored via a pseudo-inverse; the instrument-level equations are then
    solved jointly for the CATE block by least squares.
    """
    v = iv_view(env)
    src = _source(env, source, dataset)
    scm = env.scm
    na, nz = scm.card(v.a_col), scm.card(v.z_col)
    ny = scm.card(v.y_col)
    nx = int(np.prod(scm.cards(v.x_cols)))
    levels = scm.levels(v.y_col)
    mat = np.zeros((nz, nx * na))
    rhs = np.zeros(nz)
    pinvs = {}
    for z in range(nz):
        ya = src.table((v.y_col, v.a_col), given={v.z_col: z}, observed=v.filter1)
        rhs[z] = ya.sum(axis=1) @ levels / ya.sum()
        for a in range(na):
            pyx = _colnorm(src.table((v.y_col,) + v.x_cols,
                                     given={v.a_col: a, v.z_col: z},
                                     observed=v.filter2))
            pinvs[a, z] = pseudo_inverse(pyx, tol)
            mat[z, a * nx:(a + 1) * nx] = pinvs[a, z] @ ya[:, a]
    g_flat, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    residual = float(np.abs(mat @ g_flat - rhs).max())
    limit = residual_tol if residual_tol is not None else (
        1e-7 if source == "population" else 0.5)
    if residual > limit:
        raise IdentificationError(
            f"instrument system residual {residual:.3e} exceeds {limit:.1e}",
            residual=residual)
    h1 = np.zeros((ny, na, nz))
    for (a, z), pinv in pinvs.items():
        h1[:, a, z] = pinv.T @ g_flat[a * nx:(a + 1) * nx]
    g = np.moveaxis(g_flat.reshape(na, nx), 0, -1).reshape(
        scm.cards(v.x_cols) + (na,))
    return IvIdentification(g=g, h1=h1, residual=residual,
                            system_rank=matrix_rank(mat, tol),
                            system_cond=float(np.linalg.cond(mat)))


# ---------------------------------------------------------------------------
# Proxy-variable identification
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PvIdentification:
    g: np.ndarray                 # |X| x |A|
    h1: np.ndarray                # |Y| x |A| x |X| x |Z|
    h2: np.ndarray                # |A| x |W| x |X|
    h3: np.ndarray                # |Y| x |A| x |X| x |A'|
    residual: float


def pv_identify_matrix(env: Env, source: str = "population",
                       dataset: Dataset | None = None, tol: float = RANK_TOL,
                       residual_tol: float | None = None) -> PvIdentification:
    """Proxy-variable recovery: restore the masked outcome-proxy
    distribution per (a, x, z) cell, solve the first stage across
    instrument-proxy values by least squares, then average the outcome
    bridge against the restored proxy marginal."""
    v = pv_view(env)
    src = _source(env, source, dataset)
    scm = env.scm
    na, nx = scm.card(v.a_col), scm.card(v.x_col)
    ny, nw, nz = scm.card(v.y_col), scm.card(v.w_col), scm.card(v.z_col)
    levels = scm.levels(v.y_col)
    h2 = np.zeros((na, nw, nx))
    worst = 0.0
    pyw_axz = {}
    for a in range(na):
        for x in range(nx):
            rows = np.zeros((nz, nw))
            rhs = np.zeros(nz)
            for z in range(nz):
                pyw = _colnorm(src.table((v.y_col, v.w_col),
                                         given={v.a_col: a, v.x_col: x, v.z_col: z},
                                         observed=v.filter2))
                pyw_axz[a, x, z] = pyw
                py = src.table((v.y_col,), given={v.a_col: a, v.x_col: x, v.z_col: z},
                               observed=v.filter1)
                rows[z] = pseudo_inverse(pyw, tol) @ py
                rhs[z] = py @ levels
            sol, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
            worst = max(worst, float(np.abs(rows @ sol - rhs).max()))
            h2[a, :, x] = sol
    limit = residual_tol if residual_tol is not None else (
        1e-7 if source == "population" else 0.5)
    if worst > limit:
        raise IdentificationError(
            f"proxy first-stage residual {worst:.3e} exceeds {limit:.1e}",
            residual=worst)
    h1 = np.zeros((ny, na, nx, nz))
    for (a, x, z), pyw in pyw_axz.items():
        h1[:, a, x, z] = pseudo_inverse(pyw, tol).T @ h2[a, :, x]
    h3 = np.zeros((ny, na, nx, na))
    g = np.zeros((nx, na))
    for x in range(nx):
        pw_x = np.zeros(nw)
        for a in range(na):
            pyw = _colnorm(src.table((v.y_col, v.w_col),
                                     given={v.a_col: a, v.x_col: x},
                                     observed=v.filter3))
            pinv = pseudo_inverse(pyw, tol)
            ya = src.table((v.y_col, v.a_col), given={v.x_col: x},
                           observed=v.filter4)
            pw_x += pinv @ ya[:, a]
            for ap in range(na):
                h3[:, a, x, ap] = pinv.T @ h2[ap, :, x]
        for ap in range(na):
            g[x, ap] = h2[ap, :, x] @ pw_x
    return PvIdentification(g=g, h1=h1, h2=h2, h3=h3, residual=worst)


# ---------------------------------------------------------------------------
# Policy-specific population solutions (extended classes)
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ExtendedPvOracle:
    g: np.ndarray                 # |X|
    h1: np.ndarray                # |Y| x |A| x |X| x |Z|
    h2: np.ndarray                # |A| x |W| x |X|
    h3: np.ndarray                # |Y| x |A| x |X|


def extended_pv_oracle(env: Env, pi: Policy, tol: float = RANK_TOL,
                       ) -> ExtendedPvOracle:
    """Sequential population solve of the policy-dependent proxy system."""
    if pi.kind != "extended":
        raise ScmError("extended oracle needs an extended policy")
    v = pv_view(env)
    scm = env.scm
    src = PopulationSource(env)
    na, nx = scm.card(v.a_col), scm.card(v.x_col)
    ny, nw, nz = scm.card(v.y_col), scm.card(v.w_col), scm.card(v.z_col)
    u_col = scm.spec.latent[0]
    nu = scm.card(u_col)
    levels = scm.levels(v.y_col)
    j = marginal(scm, (u_col, v.x_col, v.w_col, v.a_col, v.y_col))
    h2 = np.zeros((na, nw, nx))
    for x in range(nx):
        for a in range(na):
            rows = np.zeros((nu, nw))
            rhs = np.zeros(nu)
            for u in range(nu):
                pw_ux = j[u, x].sum(axis=(1, 2))
                pw_ux = pw_ux / pw_ux.sum()
                rows[u] = pw_ux
                for w in range(nw):
                    py = j[u, x, w, a]
                    if py.sum() <= 0:
                        continue
                    ey = py @ levels / py.sum()
                    rhs[u] += pw_ux[w] * pi.table[x, w, a] * ey
            sol, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
            if np.abs(rows @ sol - rhs).max() > 1e-8:
                raise IdentificationError("policy-specific proxy bridge has no "
                                          "exact solution (rank deficiency)")
            h2[a, :, x] = sol
    h1 = np.zeros((ny, na, nx, nz))
    for a in range(na):
        for x in range(nx):
            for z in range(nz):
                pyw = _colnorm(src.table((v.y_col, v.w_col),
                                         given={v.a_col: a, v.x_col: x, v.z_col: z},
                                         observed=v.filter2))
                rows = pyw.T                       # per-w conditional over y
                rhs = np.array([
                    h2[a, w, x] - pi.table[x, w, a] * (rows[w] @ levels)
                    for w in range(nw)])
                h1[:, a, x, z], *_ = np.linalg.lstsq(rows, rhs, rcond=None)
    h3 = np.zeros((ny, na, nx))
    hsum = h2.sum(axis=0)                          # over actions: (w, x)
    for a in range(na):
        for x in range(nx):
            pyw = _colnorm(src.table((v.y_col, v.w_col),
                                     given={v.a_col: a, v.x_col: x},
                                     observed=v.filter3))
            h3[:, a, x], *_ = np.linalg.lstsq(pyw.T, hsum[:, x], rcond=None)
    g = np.zeros(nx)
    for x in range(nx):
        ya = src.table((v.y_col, v.a_col), given={v.x_col: x}, observed=v.filter4)
        g[x] = sum(ya[:, a] @ h3[:, a, x] for a in range(na))
    return ExtendedPvOracle(g=g, h1=h1, h2=h2, h3=h3)


@dataclass(eq=False)
class ExtendedDtrOracle:
    g: np.ndarray                 # |X1|
    h1: np.ndarray                # like the two-equation bridge, over (A1,A2,Y1,Y2)
    h2: np.ndarray                # CATE over (X1,A1,X2,A2)
    h3: np.ndarray                # |Y1| x |X1| x |A1|
    h4: np.ndarray                # |X1| x |A1|
    zeta: np.ndarray              # |X1| x |A1| x |X2|


def extended_dtr_oracle(env: Env, pi: Policy, tol: float = RANK_TOL,
                        ) -> ExtendedDtrOracle:
    if env.template.name != "dtr2" or pi.kind != "dtr":
        raise ScmError("extended dtr oracle needs dtr2 and a stage pair")
    pi1, pi2 = pi.tables
    base = iv_identify_matrix(env, "population", tol=tol)
    scm = env.scm
    src = PopulationSource(env)
    n_x1, n_a1, n_x2, n_a2 = scm.cards(("X1", "A1", "X2", "A2"))
    n_y1 = scm.card("Y1")
    h2 = base.g                                    # (X1,A1,X2,A2)
    h1 = np.zeros((n_a1, n_a2, n_y1, scm.card("Y2")))
    for a1 in range(n_a1):
        h1[a1] = np.moveaxis(base.h1, 0, -1)       # (A2, Y1, Y2)
    h3 = np.zeros((n_y1, n_x1, n_a1))
    for x1 in range(n_x1):
        for a1 in range(n_a1):
            rows = np.zeros((n_x2, n_y1))
            rhs = np.zeros(n_x2)
            for x2 in range(n_x2):
                py1 = src.table(("Y1",), given={"X1": x1, "A1": a1, "X2": x2},
                                observed=("X1", "X2"))
                rows[x2] = py1
                rhs[x2] = pi2[x1, a1, x2] @ h2[x1, a1, x2]
            sol, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
            if np.abs(rows @ sol - rhs).max() > 1e-8:
                raise IdentificationError("stage-2 averaging equation unsolvable")
            h3[:, x1, a1] = sol
    h4 = np.zeros((n_x1, n_a1))
    for x1 in range(n_x1):
        for a1 in range(n_a1):
            py1 = src.table(("Y1",), given={"X1": x1, "A1": a1}, observed=("X1",))
            h4[x1, a1] = py1 @ h3[:, x1, a1]
    g = np.einsum("xa,xa->x", pi1, h4)
    zeta = np.zeros((n_x1, n_a1, n_x2))
    y1_levels = scm.levels("Y1")
    for x1 in range(n_x1):
        for a1 in range(n_a1):
            for x2 in range(n_x2):
                py1 = src.table(("Y1",), given={"X1": x1, "A1": a1, "X2": x2},
                                observed=("X1", "X2"))
                zeta[x1, a1, x2] = py1 @ y1_levels
    return ExtendedDtrOracle(g=g, h1=h1, h2=h2, h3=h3, h4=h4, zeta=zeta)


# ---------------------------------------------------------------------------
# Oracle hypotheses (one-hot weight vectors for an IesProblem)
# ---------------------------------------------------------------------------

def oracle_hypothesis(problem: IesProblem, env: Env,
                      pi: Policy | None = None) -> np.ndarray:
    """Concatenated one-hot weights of the exact population solution."""
    w = np.zeros(problem.total_dim)

    def put(name: str, table: np.ndarray) -> None:
        blk = problem.block(name)
        if table.shape != blk.cards:
            raise ScmError(f"oracle block {name}: {table.shape} != {blk.cards}")
        w[blk.offset:blk.offset + blk.dim] = table.ravel()

    if problem.label == "iv":
        res = iv_identify_matrix(env, "population")
        if env.template.name == "dtr2":
            h1 = np.broadcast_to(np.moveaxis(res.h1, 0, -1)[None],
                                 problem.block("h1").cards)
            put("h1", np.ascontiguousarray(h1))
        else:
            put("h1", res.h1)
        put("g", res.g)
    elif problem.label == "pv":
        res = pv_identify_matrix(env, "population")
        put("h1", res.h1)
        put("h2", res.h2)
        put("h3", res.h3)
        put("g", res.g)
    elif problem.label == "pv-extended":
        ores = extended_pv_oracle(env, pi)
        put("h1", ores.h1)
        put("h2", ores.h2)
        put("h3", ores.h3)
        put("g", ores.g)
    elif problem.label == "dtr-extended":
        ores = extended_dtr_oracle(env, pi)
        put("h1", ores.h1)
        put("h2", ores.h2)
        put("h3", ores.h3)
        put("h4", ores.h4)
        put("g", ores.g)
    elif problem.label == "dtr-zeta":
        ores = extended_dtr_oracle(env, uniform_dtr(env))
        put("zeta", ores.zeta)
    else:
        raise ScmError(f"no oracle for problem label {problem.label!r}")
    return w


def uniform_dtr(env: Env) -> Policy:
    from .scm import uniform_policy
    return uniform_policy(env.scm)


# ---------------------------------------------------------------------------
# Generation-time diagnostics
# ---------------------------------------------------------------------------

def identification_report(env: Env) -> RankReport:
    """Point-identifiability ranks beyond the completeness checks."""
    rep = RankReport(which="identification")
    name = env.template.name
    if name in ("ccb-iv", "dtr2"):
        v = iv_view(env)
        src = PopulationSource(env)
        scm = env.scm
        nx = int(np.prod(scm.cards(v.x_cols)))
        na, nz = scm.card(v.a_col), scm.card(v.z_col)
        mat = np.zeros((nz, nx * na))
        for z in range(nz):
            ya = src.table((v.y_col, v.a_col), given={v.z_col: z}, observed=v.filter1)
            for a in range(na):
                pyx = _colnorm(src.table((v.y_col,) + v.x_cols,
                                         given={v.a_col: a, v.z_col: z},
                                         observed=v.filter2))
                mat[z, a * nx:(a + 1) * nx] = pseudo_inverse(pyx) @ ya[:, a]
        rep.add("instrument-system", matrix_rank(mat), nx * na)
    else:
        v = pv_view(env)
        src = PopulationSource(env)
        scm = env.scm
        u_col = scm.spec.latent[0]
        nw, nz, nu = scm.card(v.w_col), scm.card(v.z_col), scm.card(u_col)
        for x in range(scm.card(v.x_col)):
            pwu = marginal(scm, (u_col, v.x_col, v.w_col))[:, x, :]
            pwu = pwu / pwu.sum(axis=1, keepdims=True)
            rep.add(f"proxy-couples-latent,x={x}", matrix_rank(pwu), nu)
            # the proxy bridge may be non-unique; the value block stays
            # identified iff the averaging marginal kills the kernel of the
            # first-stage system
            p_wx = src.table((v.w_col,), given={v.x_col: x}, observed=v.filter4)
            for a in range(scm.card(v.a_col)):
                rows = np.zeros((nz, nw))
                for z in range(nz):
                    pyw = _colnorm(src.table((v.y_col, v.w_col),
                                             given={v.a_col: a, v.x_col: x,
                                                    v.z_col: z},
                                             observed=v.filter2))
                    py = src.table((v.y_col,),
                                   given={v.a_col: a, v.x_col: x, v.z_col: z},
                                   observed=v.filter1)
                    rows[z] = pseudo_inverse(pyw) @ py
                _, s, vt = np.linalg.svd(rows)
                null = vt[np.sum(s > RANK_TOL * max(s[0], 1e-300)):]
                leak = float(np.abs(null @ p_wx).max()) if len(null) else 0.0
                rep.add(f"value-annihilates-kernel,a={a},x={x}",
                        int(leak <= 1e-9), 1)
    return rep


def generation_checks(env: Env, require_identified: bool = True,
                      budget_margin: float = 0.9) -> tuple[bool, str]:
    """Completeness, identifiability, and oracle-budget screening for a
    freshly drawn model; returns (ok, reason)."""
    try:
        name = env.template.name
        if name in ("ccb-iv", "dtr2"):
            rep = completeness_check(env, "iv")
            if not rep.passed:
                return False, f"completeness(iv) failed: {rep.cells[:2]}"
        else:
            for which in ("pv-first", "pv-second"):
                rep = completeness_check(env, which)
                if not rep.passed:
                    return False, f"completeness({which}) failed: {rep.cells[:2]}"
        if not require_identified:
            return True, ""
        idr = identification_report(env)
        if not idr.passed:
            bad = [c for c in idr.cells if c[1] < c[2]]
            return False, f"identifiability ranks failed: {bad[:2]}"
        if name in ("ccb-iv", "dtr2"):
            problem = build_iv_ies(env)
        else:
            problem = build_pv_ies(env)
        w = oracle_hypothesis(problem, env)
        for blk in problem.blocks:
            nrm = float(np.linalg.norm(w[blk.offset:blk.offset + blk.dim]))
            if nrm > budget_margin * blk.budget:
                return False, (f"oracle block {blk.name} norm {nrm:.2f} exceeds "
                               f"{budget_margin:.2f} x budget {blk.budget:.2f}")
        return True, ""
    except IdentificationError as exc:
        return False, f"identification failed: {exc}"


def export_table_csv(path, table: np.ndarray, index_names) -> None:
    """One row per index tuple plus a value column, for cross-checking."""
    arr = np.asarray(table)
    with open(path, "w") as fh:
        fh.write(",".join(tuple(index_names) + ("value",)) + "\n")
        for idx in np.ndindex(*arr.shape):
            fh.write(",".join(str(i) for i in idx) + f",{arr[idx]!r}\n")
