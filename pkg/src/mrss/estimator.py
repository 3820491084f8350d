"""Maximum-likelihood fitting by cyclic block-coordinate ascent.

The likelihood of the mixed panel model has no closed form, so fitting
works on its importance-sampled estimate with common random numbers: every
subject keeps one fixed set of standard normals per draw tier, which turns
the Monte Carlo estimate into a smooth deterministic function of the
parameters. Block updates then maximize that function exactly (each block
update can only raise it), and convergence is judged on a separate,
larger-sample re-evaluation so that optimization-time noise does not mask
or fake progress.

The block cycle mirrors how the parameters interact: the loading and
covariate coefficients move together, the transition diagonal is refreshed
after every other block (it reacts to everything), and the noise variances
move last. A fit starts from a pretend-Gaussian maximizer: binary and count
channels are brought to the signal scale through the same transformations
the mode finder uses for its first linearization, and the resulting
all-Gaussian likelihood is maximized by quasi-Newton over the identical
parameterization.

Parameters are optimized in unconstrained coordinates: free loadings,
coefficients and intercepts as they are, transition entries through a
scaled tanh, state-noise blocks through the log-diagonal Cholesky factor of
each independence block, and Gaussian variances through their logs. The
structural masks of the spec are never touched.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.stats

from . import _engine as eng
from .errors import (
    DegenerateWeights,
    InitFailed,
    ModeDiverged,
    NotConverged,
    NotNested,
    UnsupportedValue,
)
from .families import family_from_name
from .model import MrssSpec, ParameterSet, SubjectData, build_design

__all__ = [
    "OptimConfig", "FitResult", "BlockRecord", "LrtResult",
    "gaussian_init", "cbcd_fit", "pooled_loglik", "aic", "lrt",
]

_T_SCALE = 1.0 - 1e-6       # transition entries live in (-_T_SCALE, _T_SCALE)
_PENALTY = 1e12             # objective value for rejected parameter points
_CODES = {"gaussian": eng.GAUSSIAN, "bernoulli": eng.BERNOULLI,
          "poisson": eng.POISSON}

# draw tiers get distinct RNG streams per subject
_TAG_OPT, _TAG_EVAL, _TAG_FINAL = 0, 1, 2


@dataclass(frozen=True)
class OptimConfig:
    """Fitting configuration; a plain key-value document.

    `n_opt` draws feed the block objectives, `n_eval` the per-outer
    convergence check, `n_final` the reported likelihood. `tol` is relative
    to the current likelihood magnitude unless `tol_absolute` is set.
    `inner_rounds` is the number of small-block passes per outer iteration.
    """

    n_opt: int = 128
    n_eval: int = 1024
    n_final: int = 4096
    tol: float = 1e-4
    tol_absolute: bool = False
    max_outer: int = 100
    inner_rounds: int = 3
    block_maxiter: int = 4
    max_block_evals: int = 200
    init_maxiter: int = 300
    seed: int = 0
    ess_floor: float = 0.01
    kappa: float | None = 1e7
    mode_tol: float = 1e-8
    mode_max_iter: int = 50

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "OptimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(doc) - known
        if extra:
            raise UnsupportedValue(
                f"unknown optimizer options: {sorted(extra)}"
            )
        return cls(**doc)

    def replace(self, **kw) -> "OptimConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class BlockRecord:
    """One block maximization: objective before/after and the eval count."""

    outer: int
    block: str
    before: float
    after: float
    n_evals: int


@dataclass(frozen=True)
class FitResult:
    """A fitted parameter point with its optimization history.

    `loglik` is the final importance-sampled likelihood at the `n_final`
    tier (with its Monte Carlo standard error), evaluated after sign
    canonicalization. `loglik_trace` holds the per-outer re-evaluations at
    the `n_eval` tier, `trace_se` their standard errors; common random
    numbers keep consecutive entries comparable. `block_trace` records
    every inner block update, whose increases are exact by construction.
    """

    psi_hat: ParameterSet
    loglik: float
    mc_se: float
    loglik_trace: np.ndarray
    trace_se: np.ndarray
    block_trace: tuple
    converged: bool
    n_outer: int
    aic: float
    n_params: int
    seed: int
    n_subjects: int


class _Rejected(Exception):
    """A parameter point the likelihood machinery cannot evaluate."""


class _Objective:
    """Pooled importance-sampled log-likelihood over fixed subject designs.

    Normals are cached per (tier, size) and subject, so repeated calls at
    the same tier see the same randomness: the objective is a deterministic
    function of the parameters for the whole life of the fit.
    """

    def __init__(self, spec: MrssSpec, subjects, config: OptimConfig, *,
                 pretend_gaussian: bool = False):
        self.spec = spec
        self.cfg = config
        self.pretend = pretend_gaussian
        self.designs = [build_design(spec, s, kappa=config.kappa)
                        for s in subjects]
        self.offset = math.fsum(d.loglik_offset for d in self.designs)
        self.works = []
        for design, subj in zip(self.designs, subjects):
            z = np.array(design.z)
            mask = np.isnan(z) | design.channel_missing
            mask |= _degenerate_binary_channels(design, subj.subject_id)
            if pretend_gaussian:
                codes = np.full(spec.p, eng.GAUSSIAN, dtype=np.int64)
                z = _to_signal_scale(z, design.family_names)
            else:
                codes = np.array([_CODES[f] for f in design.family_names],
                                 dtype=np.int64)
            self.works.append(eng.SubjectWork(z, mask, codes))

    def loglik(self, psi: ParameterSet, n: int, tag: int, *,
               cache: bool = True, with_se: bool = False):
        """Pooled log-likelihood at `psi` with `n` draws on tier `tag`."""
        cfg = self.cfg
        sig2 = np.ascontiguousarray(psi.h_diag)
        parts = []
        se2 = 0.0
        for i, (design, work) in enumerate(zip(self.designs, self.works)):
            lam, d, T, c, Q, a1, P1 = design.matrices(psi)
            args = tuple(np.ascontiguousarray(a)
                         for a in (lam, d, T, c, Q, a1, P1))
            w = a1.size
            factory = _rng_factory(cfg.seed, i, tag)
            if cache:
                normals = work.normals((cfg.seed, tag), n // 2, w, factory)
            else:
                normals = _fresh_normals(factory(), n // 2, work.m, work.p, w)
            ll, ess, _, _ = eng.subject_loglik(
                *args, work, sig2, normals, tol=cfg.mode_tol,
                max_iter=cfg.mode_max_iter, ess_floor=cfg.ess_floor)
            if not np.isfinite(ll):
                raise _Rejected(f"subject {i}: likelihood not finite")
            parts.append(ll + design.loglik_offset)
            if with_se:
                se2 += max(n / ess - 1.0, 0.0) / n
        total = float(math.fsum(parts))
        if with_se:
            return total, float(np.sqrt(se2))
        return total


def _rng_factory(seed, subject, tag):
    def factory():
        return np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(subject, tag)))
    return factory


def _fresh_normals(rng, n_base, m, p, w):
    return (rng.standard_normal((n_base, w)),
            rng.standard_normal((n_base, m, w)),
            rng.standard_normal((n_base, m, p)))


def _degenerate_binary_channels(design, subject_id):
    """Mask for all-constant observed binary channels of one subject."""
    drop = np.zeros_like(design.z, dtype=bool)
    for j, fam in enumerate(design.family_names):
        if fam != "bernoulli" or not design.active_channels[j]:
            continue
        col = design.z[:, j]
        obs = col[~np.isnan(col)]
        if obs.size and (np.all(obs == 0.0) or np.all(obs == 1.0)):
            warnings.warn(
                f"subject {subject_id!r}: binary channel {j} is constant "
                f"({int(obs[0])} throughout); dropped from this subject's "
                "likelihood",
                stacklevel=4,
            )
            drop[:, j] = True
    return drop


def _to_signal_scale(z, family_names):
    """Binary/count columns through the same map that seeds the mode finder."""
    out = np.array(z)
    for j, name in enumerate(family_names):
        if name == "gaussian":
            continue
        fam = family_from_name(name)
        col = out[:, j]
        obs = ~np.isnan(col)
        if np.any(obs):
            out[obs, j] = fam.init_signal(col[obs])
    return out


# ----------------------------------------------------------------------
# Parameter packing
# ----------------------------------------------------------------------

class _Packer:
    """Maps named parameter blocks to unconstrained vectors and back.

    Blocks: "lam_beta" (free loadings and coefficients, identity), "t"
    (free transition entries through a scaled tanh), "c" (identity), "hq"
    (log-diagonal Cholesky parameters of each Q independence block plus the
    log Gaussian variances). Masks come from the template parameter set and
    never change.
    """

    def __init__(self, template: ParameterSet):
        self.t_free = template.t_free
        self.lam_free = template.lam_free
        self.beta_free = template.beta_free
        self.h_free = template.h_free
        self.q_blocks = _independence_blocks(template.q_mask)

    def size(self, name: str) -> int:
        if name == "lam_beta":
            return int(self.lam_free.sum() + self.beta_free.sum())
        if name == "t":
            return int(self.t_free.sum())
        if name == "c":
            return self.t_free.shape[1]
        if name == "hq":
            nq = sum(k * (k + 1) // 2 for k in map(len, self.q_blocks))
            return nq + int(self.h_free.sum())
        raise UnsupportedValue(f"unknown block {name!r}")

    def pack(self, psi: ParameterSet, name: str) -> np.ndarray:
        if name == "lam_beta":
            return np.concatenate([psi.lam[self.lam_free],
                                   psi.beta[self.beta_free]])
        if name == "t":
            t = psi.t_diag[self.t_free]
            return np.arctanh(np.clip(t / _T_SCALE, -1 + 1e-12, 1 - 1e-12))
        if name == "c":
            return np.array(psi.c)
        if name == "hq":
            parts = []
            for idx in self.q_blocks:
                L = _chol_floored(psi.Q[np.ix_(idx, idx)])
                for i in range(len(idx)):
                    for j in range(i + 1):
                        parts.append(np.log(L[i, i]) if i == j else L[i, j])
            return np.concatenate([np.array(parts),
                                   np.log(psi.h_diag[self.h_free])])
        raise UnsupportedValue(f"unknown block {name!r}")

    def unpack(self, psi: ParameterSet, name: str, u: np.ndarray) -> ParameterSet:
        u = np.asarray(u, dtype=float)
        if name == "lam_beta":
            nl = int(self.lam_free.sum())
            lam = np.array(psi.lam)
            lam[self.lam_free] = u[:nl]
            beta = np.array(psi.beta)
            beta[self.beta_free] = u[nl:]
            return psi.replace(lam=lam, beta=beta)
        if name == "t":
            t = np.array(psi.t_diag)
            t[self.t_free] = _T_SCALE * np.tanh(u)
            return psi.replace(t_diag=t)
        if name == "c":
            return psi.replace(c=u)
        if name == "hq":
            Q = np.array(psi.Q)
            pos = 0
            for idx in self.q_blocks:
                k = len(idx)
                L = np.zeros((k, k))
                for i in range(k):
                    for j in range(i + 1):
                        val = u[pos]
                        L[i, j] = np.exp(val) if i == j else val
                        pos += 1
                Q[np.ix_(idx, idx)] = L @ L.T
            h = np.array(psi.h_diag)
            h[self.h_free] = np.exp(u[pos:])
            return psi.replace(Q=Q, h_diag=h)
        raise UnsupportedValue(f"unknown block {name!r}")

    def pack_joint(self, psi, names):
        return np.concatenate([self.pack(psi, n) for n in names])

    def unpack_joint(self, psi, names, u):
        pos = 0
        for n in names:
            k = self.size(n)
            psi = self.unpack(psi, n, u[pos:pos + k])
            pos += k
        return psi


def _independence_blocks(q_mask):
    """Connected components of the (already transitively closed) mask."""
    w = q_mask.shape[0]
    seen = np.zeros(w, dtype=bool)
    blocks = []
    for k in range(w):
        if seen[k]:
            continue
        idx = np.flatnonzero(q_mask[k])
        seen[idx] = True
        blocks.append(list(idx))
    return blocks


def _chol_floored(block, floor=1e-8):
    try:
        L = np.linalg.cholesky(block)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (block + block.T))
        vals = np.maximum(vals, floor * floor)
        L = np.linalg.cholesky((vecs * vals) @ vecs.T)
    d = np.diag(L).copy()
    if np.any(d < floor):
        L = L + np.diag(np.maximum(floor - d, 0.0))
    return L


# ----------------------------------------------------------------------
# Block maximization
# ----------------------------------------------------------------------

def _maximize(objective_fn, packer, psi, names, *, maxiter, maxfun):
    """Maximize over the named blocks; never returns a worse point.

    The tracked best-seen point makes monotonicity exact: the start is the
    first evaluation, so the outcome is at least as good by construction.
    Rejected parameter points (diverged mode, degenerate weights, overflow)
    enter the minimizer as a large penalty and are never tracked.
    """
    u0 = packer.pack_joint(psi, names)
    if u0.size == 0:
        return psi, None, None, 0
    state = {"u": u0, "f": -np.inf, "n": 0}

    def negative(u):
        if state["n"] >= maxfun:
            # hard budget: feed the line search a wall instead of spending
            # evaluations the block is not allowed to make
            return _PENALTY
        state["n"] += 1
        cand = packer.unpack_joint(psi, names, u)
        try:
            val = objective_fn(cand)
        except (ModeDiverged, DegenerateWeights, _Rejected):
            return _PENALTY
        if not np.isfinite(val):
            return _PENALTY
        if val > state["f"]:
            state["f"] = val
            state["u"] = np.array(u)
        return -val

    before = -negative(u0)
    scipy.optimize.minimize(
        negative, u0, method="L-BFGS-B",
        options={"maxiter": maxiter, "maxfun": maxfun, "eps": 1e-6,
                 "ftol": 1e-12, "gtol": 1e-7})
    if not np.isfinite(state["f"]):
        raise _Rejected(
            "no evaluable parameter point in block " + "+".join(names)
        )
    return (packer.unpack_joint(psi, names, state["u"]),
            before if np.isfinite(before) else state["f"],
            state["f"], state["n"])


def _canonicalize(psi: ParameterSet) -> ParameterSet:
    """Flip state signs so each unanchored column leads with a nonnegative
    free loading; the likelihood is exactly invariant under these flips."""
    lam = np.array(psi.lam)
    c = np.array(psi.c)
    Q = np.array(psi.Q)
    w = lam.shape[1]
    for k in range(w):
        free = psi.lam_free[:, k]
        anchored = np.any(~free & (lam[:, k] != 0.0))
        if anchored or not np.any(free):
            continue
        j = int(np.argmax(free))
        if lam[j, k] < 0.0:
            lam[:, k] = -lam[:, k]
            c[k] = -c[k]
            Q[k, :] = -Q[k, :]
            Q[:, k] = -Q[:, k]
    return psi.replace(lam=lam, c=c, Q=Q)


# ----------------------------------------------------------------------
# Gaussian initialization
# ----------------------------------------------------------------------

def _heuristic_seed(spec: MrssSpec, objective: _Objective) -> ParameterSet:
    """The documented starting point: lam 0.1, T 0.5, Q = I, c = 0, beta
    from channelwise least squares on the signal-scale data."""
    p, q = spec.p, spec.q
    beta = np.zeros((p, q))
    h = np.ones(p)
    for j in range(p):
        xs, ys = [], []
        for design in objective.designs:
            if not design.active_channels[j]:
                continue
            z = _to_signal_scale(np.array(design.z), design.family_names)
            rows = np.flatnonzero(~np.isnan(z[:, j]))
            if rows.size == 0:
                continue
            ys.append(z[rows, j])
            xs.append(design.x[rows])
        if not ys:
            continue
        y = np.concatenate(ys)
        if q:
            # intercept column soaks up the state mean; only slopes are kept
            X = np.column_stack([np.ones(y.size), np.vstack(xs)])
            coef, *_ = np.linalg.lstsq(X, y, rcond=None)
            beta[j] = coef[1:]
            resid = y - X @ coef
        else:
            resid = y - y.mean()
        h[j] = max(float(np.var(resid)), 1e-3)
    psi = ParameterSet.for_spec(
        spec, lam=np.full((p, spec.w), 0.1), beta=beta, h_diag=h)
    # pretend stage: every channel is Gaussian with a free variance
    return psi.replace(h_free=np.ones(p, dtype=bool), h_diag=h)


def gaussian_init(spec: MrssSpec, subjects,
                  config: OptimConfig | None = None) -> ParameterSet:
    """Starting point from the pretend-Gaussian likelihood.

    Binary and count channels are mapped to the signal scale and treated as
    Gaussian with free variances; the exact Gaussian likelihood is then
    maximized by quasi-Newton over the full packed parameter vector,
    starting from the documented heuristic seed. With `init_maxiter` 0 the
    seed itself is returned (pretend variances reset for the real model).

    Raises InitFailed when the optimizer cannot do at least as well as the
    seed, or when the likelihood is not finite anywhere it looked.
    """
    cfg = config or OptimConfig()
    subjects = list(subjects)
    objective = _Objective(spec, subjects, cfg, pretend_gaussian=True)
    psi0 = _heuristic_seed(spec, objective)
    real_h_free = np.array([ch.family == "gaussian" for ch in spec.channels])

    def finish(psi):
        h = np.where(real_h_free, psi.h_diag, 1.0)
        return _canonicalize(psi.replace(h_free=real_h_free, h_diag=h))

    if cfg.init_maxiter == 0:
        return finish(psi0)

    packer = _Packer(psi0)
    names = ("lam_beta", "t", "c", "hq")

    def fn(psi):
        # all channels Gaussian: two draws collapse to the exact likelihood
        return objective.loglik(psi, 2, _TAG_OPT)

    try:
        f0 = fn(psi0)
    except _Rejected:
        f0 = -np.inf
    try:
        psi_hat, _, f_hat, _ = _maximize(
            fn, packer, psi0, names,
            maxiter=cfg.init_maxiter, maxfun=50 * cfg.init_maxiter)
    except _Rejected:
        raise InitFailed(
            "pretend-Gaussian likelihood is not finite anywhere the "
            "optimizer looked (check the data scale)"
        ) from None
    if not np.isfinite(f_hat) or f_hat < f0:
        raise InitFailed(
            f"optimizer ended below the heuristic seed ({f_hat:.6g} < {f0:.6g})"
        )
    return finish(psi_hat)


# ----------------------------------------------------------------------
# The fit
# ----------------------------------------------------------------------

def cbcd_fit(spec: MrssSpec, subjects, config: OptimConfig | None = None, *,
             init: ParameterSet | None = None) -> FitResult:
    """Cyclic block-coordinate maximum likelihood.

    Each outer iteration runs `inner_rounds` passes of {loadings and
    coefficients; transition; intercept; transition again}, then the noise
    block (state covariance and Gaussian variances), then the transition
    once more, and finally re-evaluates the likelihood at the `n_eval`
    tier. The loop stops when that re-evaluation improves by less than the
    tolerance. All draws are fixed up front per subject and tier (common
    random numbers), so the whole fit is reproducible bit for bit from
    (seed, config).

    Raises NotConverged -- carrying the completed FitResult in `.result` --
    when `max_outer` iterations pass without meeting the tolerance. A
    `max_outer` of zero skips fitting and echoes the starting point.
    """
    cfg = config or OptimConfig()
    subjects = list(subjects)
    if init is None:
        init = gaussian_init(spec, subjects, cfg)
    init.validate_for(spec)
    objective = _Objective(spec, subjects, cfg)
    packer = _Packer(init)

    def f_opt(psi):
        return objective.loglik(psi, cfg.n_opt, _TAG_OPT)

    def f_eval(psi):
        return objective.loglik(psi, cfg.n_eval, _TAG_EVAL, with_se=True)

    def finish(psi, trace, trace_se, blocks, converged, n_outer):
        psi = _canonicalize(psi)
        ll, se = objective.loglik(psi, cfg.n_final, _TAG_FINAL,
                                  cache=False, with_se=True)
        n_params = psi.n_free
        return FitResult(
            psi_hat=psi, loglik=ll, mc_se=se,
            loglik_trace=np.array(trace), trace_se=np.array(trace_se),
            block_trace=tuple(blocks), converged=converged, n_outer=n_outer,
            aic=-2.0 * ll + 2.0 * n_params, n_params=n_params,
            seed=cfg.seed, n_subjects=len(subjects),
        )

    psi = init
    ll_prev, se_prev = f_eval(psi)
    trace, trace_se = [ll_prev], [se_prev]
    blocks = []
    converged = False
    n_outer = 0

    if cfg.max_outer == 0:
        return finish(psi, trace, trace_se, blocks, False, 0)

    cycle = ([("lam_beta",), ("t",), ("c",), ("t",)] * cfg.inner_rounds
             + [("hq",), ("t",)])
    for outer in range(1, cfg.max_outer + 1):
        n_outer = outer
        for names in cycle:
            psi, before, after, n_ev = _maximize(
                f_opt, packer, psi, names,
                maxiter=cfg.block_maxiter, maxfun=cfg.max_block_evals)
            if before is not None:
                blocks.append(BlockRecord(outer, "+".join(names),
                                          before, after, n_ev))
        ll_now, se_now = f_eval(psi)
        trace.append(ll_now)
        trace_se.append(se_now)
        threshold = cfg.tol if cfg.tol_absolute else cfg.tol * abs(ll_now)
        gain = ll_now - ll_prev
        ll_prev = ll_now
        if gain <= threshold:
            converged = True
            break

    fit = finish(psi, trace, trace_se, blocks, converged, n_outer)
    if not converged:
        raise NotConverged(
            f"tolerance not met after {cfg.max_outer} outer iterations "
            f"(last gain {trace[-1] - trace[-2]:.4g})",
            result=fit,
        )
    return fit


def pooled_loglik(spec: MrssSpec, subjects, psi: ParameterSet, *,
                  n: int = 4096, seed: int = 0,
                  config: OptimConfig | None = None):
    """Importance-sampled pooled log-likelihood at a fixed parameter point.

    Returns (loglik, mc_se). Uses the same per-subject deterministic draw
    streams as fitting, so two calls with the same seed agree exactly, and
    calls at nearby parameter points share their randomness.
    """
    cfg = (config or OptimConfig()).replace(seed=seed)
    psi.validate_for(spec)
    objective = _Objective(spec, list(subjects), cfg)
    return objective.loglik(psi, n, _TAG_FINAL, with_se=True)


# ----------------------------------------------------------------------
# Model comparison
# ----------------------------------------------------------------------

def aic(fit: FitResult) -> float:
    """-2 loglik + 2 n_params, counting free (unmasked) entries only."""
    return -2.0 * fit.loglik + 2.0 * fit.n_params


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    df: int
    p_value: float


def _mask_contained(nested: ParameterSet, full: ParameterSet) -> bool:
    pairs = (
        (nested.lam_free, full.lam_free),
        (nested.beta_free, full.beta_free),
        (nested.t_free, full.t_free),
        (nested.q_mask, full.q_mask),
        (nested.h_free, full.h_free),
    )
    for a, b in pairs:
        if a.shape != b.shape or np.any(a & ~b):
            return False
    return True


def lrt(fit_full: FitResult, fit_nested: FitResult) -> LrtResult:
    """Likelihood-ratio test of a mask-nested model against the full one.

    The nested model's free-parameter masks must be contained in the full
    model's (same shapes, no entry free in the nested model only). Both
    likelihoods should come from the same draw tier and seed so that Monte
    Carlo error largely cancels in the difference.
    """
    if not _mask_contained(fit_nested.psi_hat, fit_full.psi_hat):
        raise NotNested(
            "nested model frees parameters the full model does not"
        )
    df = fit_full.n_params - fit_nested.n_params
    stat = max(0.0, 2.0 * (fit_full.loglik - fit_nested.loglik))
    if df == 0:
        p = 1.0 if stat == 0.0 else 0.0
    else:
        p = float(scipy.stats.chi2.sf(stat, df))
    return LrtResult(statistic=float(stat), df=int(df), p_value=p)
