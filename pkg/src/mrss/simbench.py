"""Synthetic three-channel panels, autoregressive baselines, and scoring.

The generator draws a binary, a count, and a continuous channel from a
two-state latent autoregression, with a subject-level covariate pair, a
linear time drift, and a random treatment indicator gating the first
state's loadings. Ground truth (states and natural parameters) is kept
alongside the drawn panels so prediction error can be measured where it is
defined: in the natural parameter space.

Baselines are first-order vector autoregressions on the transformed
responses, fit per subject by least squares, used either individually or
with their coefficients averaged across subjects ("pooled"). Scoring
covers natural-parameter mean squared error with a train/test split on the
time axis, and Pearson residuals on held-out points under the one-step
predictive law.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .errors import (
    DimensionMismatch,
    NotConverged,
    RankDeficient,
    UnsupportedValue,
    ZeroPredVariance,
)
from .estimator import OptimConfig, cbcd_fit
from .model import (
    ChannelSpec,
    MrssSpec,
    ParameterSet,
    StateSpec,
    SubjectData,
    one_step_path,
)

__all__ = [
    "SimConfig", "SimDataset", "VarFit", "PredictionErrors",
    "generate_dataset", "make_sim_spec", "true_parameter_set",
    "var_responses", "fit_var", "pooled_var", "var_predict",
    "natural_from_var", "one_step_natural", "prediction_errors",
    "pearson_residual_mse", "replicate_estimation", "replicate_prediction",
]

# generative constants: loading columns, transition, noise, start, drift
_LAM_TREAT = np.array([-0.5, 0.2, -1.0])
_LAM_HEALTH = np.array([0.1, 0.2, 1.0])
_T_DIAG = np.array([0.6, 0.8])
_C = np.array([1.2, 2.0])
_Q_DIAG = np.array([1.0, 1.5])
_ALPHA_START = np.array([10.0, 10.0])
_BETA_ROW = np.array([1.0, 2.0, 0.03])   # x1, x2 and the time drift


@dataclass(frozen=True)
class SimConfig:
    """Size, treatment rate, seed and train split of one synthetic panel."""

    n_subjects: int
    n_times: int
    p_treat: float
    seed: int = 0
    split: float = 5.0 / 6.0
    x1_variance: float = 2.0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise UnsupportedValue("n_subjects must be at least 1")
        if self.n_times < 2:
            raise UnsupportedValue("n_times must be at least 2")
        if not 0.0 <= self.p_treat <= 1.0:
            raise UnsupportedValue("p_treat must lie in [0, 1]")
        if not 0.0 < self.split <= 1.0:
            raise UnsupportedValue("split must lie in (0, 1]")
        if self.x1_variance <= 0.0:
            raise UnsupportedValue("x1_variance must be positive")

    @property
    def train_length(self) -> int:
        """Number of leading time points in the training window."""
        return min(self.n_times,
                   math.ceil(self.split * self.n_times - 1e-9))


@dataclass(frozen=True)
class SimDataset:
    """Drawn panels plus the ground truth they came from.

    `subjects` hold the full grids with covariate columns (x1, x2, t);
    `alpha` is (N, T, 2), `mu` the (N, T, 3) natural-parameter paths.
    """

    config: SimConfig
    subjects: tuple
    alpha: np.ndarray
    mu: np.ndarray

    def train_subjects(self) -> tuple:
        """The panels truncated to the training window."""
        cut = self.config.train_length
        return tuple(s.up_to(cut) for s in self.subjects)


def generate_dataset(config: SimConfig) -> SimDataset:
    """Draw the synthetic panel set; same seed gives identical bytes."""
    rng = np.random.default_rng(config.seed)
    n, m = config.n_subjects, config.n_times
    times = np.arange(1, m + 1)
    sd_eps = np.sqrt(_Q_DIAG)
    sd_x1 = np.sqrt(config.x1_variance)

    subjects, alphas, mus = [], [], []
    for i in range(n):
        x1 = rng.normal(-5.0, sd_x1)
        x2 = float(rng.binomial(4, 0.5))
        a = rng.binomial(1, config.p_treat, size=m).astype(float)
        eps = rng.standard_normal((m - 1, 2)) * sd_eps

        alpha = np.empty((m, 2))
        alpha[0] = _ALPHA_START
        for t in range(1, m):
            alpha[t] = _T_DIAG * alpha[t - 1] + _C + eps[t - 1]

        drift = x1 + 2.0 * x2 + 0.03 * times
        mu = (np.outer(a * alpha[:, 0], _LAM_TREAT)
              + np.outer(alpha[:, 1], _LAM_HEALTH)
              + drift[:, None])

        z = np.column_stack([
            rng.binomial(1, expit(mu[:, 0])).astype(float),
            rng.poisson(np.exp(mu[:, 1])).astype(float),
            rng.normal(mu[:, 2], 1.0),
        ])
        x = np.column_stack([np.full(m, x1), np.full(m, x2),
                             times.astype(float)])
        subjects.append(SubjectData(f"subj{i:03d}", times, z,
                                    treatment=a, x=x))
        alphas.append(alpha)
        mus.append(mu)

    return SimDataset(config=config, subjects=tuple(subjects),
                      alpha=np.array(alphas), mu=np.array(mus))


def make_sim_spec(m_b: int = 1, m_v: int = 1) -> MrssSpec:
    """Fitting layout for the synthetic panels with the given state counts.

    Treatment-gated states come first, health states after. Scale and sign
    are anchored by fixing every state's loading on the continuous channel
    to one; the remaining loadings, all covariate coefficients (x1, x2 and
    the time drift), transitions, intercepts and variances are free. State
    noise is constrained diagonal, matching the generator.
    """
    if m_b < 0 or m_v < 0:
        raise UnsupportedValue("state counts cannot be negative")
    w = m_b + m_v
    if w == 0:
        raise UnsupportedValue("at least one latent state is required")
    states = tuple(StateSpec(f"b{k + 1}", kind="treatment",
                             gate="treatment") for k in range(m_b))
    states += tuple(StateSpec(f"v{k + 1}") for k in range(m_v))
    loading_free = np.ones((3, w), dtype=bool)
    loading_free[2, :] = False
    loading_fixed = np.zeros((3, w))
    loading_fixed[2, :] = 1.0
    return MrssSpec(
        channels=(ChannelSpec("y1", "bernoulli"),
                  ChannelSpec("y2", "poisson"),
                  ChannelSpec("y3", "gaussian")),
        states=states,
        covariates=("x1", "x2", "t"),
        q_mask=np.eye(w, dtype=bool),
        loading_free=loading_free,
        loading_fixed=loading_fixed,
    )


def true_parameter_set(spec: MrssSpec) -> ParameterSet:
    """The generator's parameters in the anchored orientation of `spec`.

    Only defined for the one-treatment, one-health layout: the anchor on
    the continuous channel flips the treated column's sign relative to the
    generator (its true loading there is -1), so the first state column
    and its intercept appear negated. Likelihood, coefficients and effects
    are unchanged by that relabeling.
    """
    kinds = [s.kind for s in spec.states]
    if spec.w != 2 or kinds != ["treatment", "health"]:
        raise UnsupportedValue(
            "true parameters are only known for the (1, 1) layout")
    return ParameterSet.for_spec(
        spec,
        lam=np.column_stack([-_LAM_TREAT, _LAM_HEALTH]),
        beta=np.tile(_BETA_ROW, (3, 1)),
        t_diag=_T_DIAG.copy(),
        c=np.array([-_C[0], _C[1]]),
        Q=np.diag(_Q_DIAG),
        h_diag=np.ones(3),
    )


# ----------------------------------------------------------------------
# Vector autoregression baselines
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class VarFit:
    """First-order autoregression: y_t = lag y_{t-1} + treat a_t +
    intercept + noise."""

    lag: np.ndarray          # (k, k)
    treat: np.ndarray        # (k,)
    intercept: np.ndarray    # (k,)
    noise: np.ndarray        # (k, k) residual covariance


def var_responses(z: np.ndarray, *, delta: float = 0.5) -> np.ndarray:
    """Transformed responses for the autoregression: the count channel is
    shifted-log (log(y + delta) to survive zero counts), the rest as is."""
    z = np.asarray(z, dtype=float)
    out = np.array(z)
    out[:, 1] = np.log(z[:, 1] + delta)
    return out


def fit_var(ytilde: np.ndarray, treatment: np.ndarray, *,
            allow_singular: bool = False) -> VarFit:
    """Least-squares fit of the lag-1 autoregression for one subject.

    Per-equation regression of y_t on (y_{t-1}, a_t, 1). Needs at least 5
    usable transitions. A rank-deficient design (constant channel, constant
    treatment) raises RankDeficient unless `allow_singular` is set, in
    which case the minimum-norm solution is returned (collinear directions
    get coefficient zero).
    """
    y = np.asarray(ytilde, dtype=float)
    a = np.asarray(treatment, dtype=float).ravel()
    if y.ndim != 2 or a.shape[0] != y.shape[0]:
        raise DimensionMismatch(
            f"responses {y.shape} do not align with treatment {a.shape}")
    m, k = y.shape
    if m - 1 < 5:
        raise UnsupportedValue(
            f"autoregression needs at least 5 transitions, got {m - 1}")
    X = np.column_stack([y[:-1], a[1:], np.ones(m - 1)])
    coef, _, rank, _ = np.linalg.lstsq(X, y[1:], rcond=None)
    if rank < X.shape[1] and not allow_singular:
        raise RankDeficient(
            "autoregression design is rank deficient "
            f"(rank {rank} of {X.shape[1]}); a channel or the treatment "
            "stream is constant")
    resid = y[1:] - X @ coef
    return VarFit(lag=coef[:k].T.copy(), treat=coef[k].copy(),
                  intercept=coef[k + 1].copy(),
                  noise=resid.T @ resid / resid.shape[0])


def pooled_var(fits) -> VarFit:
    """Elementwise average of per-subject autoregression coefficients."""
    fits = list(fits)
    if not fits:
        raise UnsupportedValue("no fits to pool")
    return VarFit(
        lag=np.mean([f.lag for f in fits], axis=0),
        treat=np.mean([f.treat for f in fits], axis=0),
        intercept=np.mean([f.intercept for f in fits], axis=0),
        noise=np.mean([f.noise for f in fits], axis=0),
    )


def var_predict(fit: VarFit, ytilde: np.ndarray,
                treatment: np.ndarray) -> np.ndarray:
    """One-step predictions over the grid from observed lags.

    Row t holds the prediction of y_t given y_{t-1}; the first row has
    nothing to condition on and is NaN.
    """
    y = np.asarray(ytilde, dtype=float)
    a = np.asarray(treatment, dtype=float).ravel()
    out = np.full_like(y, np.nan)
    out[1:] = y[:-1] @ fit.lag.T + np.outer(a[1:], fit.treat) + fit.intercept
    return out


def natural_from_var(pred: np.ndarray, *, clamp: float = 1e-6):
    """Autoregression predictions mapped to the natural-parameter scale.

    The binary channel's predicted value goes through the logit, clamped
    into [clamp, 1-clamp]; the count channel is already on the log scale;
    the continuous channel is the identity. Returns (array, clamp count).
    """
    pred = np.asarray(pred, dtype=float)
    out = np.array(pred)
    col = pred[:, 0]
    inside = np.isnan(col) | ((col >= clamp) & (col <= 1.0 - clamp))
    n_clamped = int(np.count_nonzero(~inside))
    out[:, 0] = logit(np.clip(col, clamp, 1.0 - clamp))
    return out, n_clamped


# ----------------------------------------------------------------------
# Scoring
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionErrors:
    """Natural-parameter mean squared errors, split along the time axis."""

    in_sample: np.ndarray    # (k,) mean over t = 2..train_length
    out_sample: np.ndarray   # (k,) mean over the remaining times
    train_length: int
    n_clamped: int = 0


def prediction_errors(mu_seq, pred_seq, *, split: float = 5.0 / 6.0,
                      n_clamped: int = 0) -> PredictionErrors:
    """Per-channel squared error between predictions and the true natural
    parameters, averaged within each window per subject, then across
    subjects. The first time point is never scored (nothing predicts it).
    """
    mu_seq = [np.asarray(muv, dtype=float) for muv in mu_seq]
    pred_seq = [np.asarray(p, dtype=float) for p in pred_seq]
    if len(mu_seq) != len(pred_seq) or not mu_seq:
        raise DimensionMismatch("need one prediction array per truth array")
    cut = None
    acc_in, acc_out = [], []
    for mu, pred in zip(mu_seq, pred_seq):
        if mu.shape != pred.shape:
            raise DimensionMismatch(
                f"prediction shape {pred.shape} != truth shape {mu.shape}")
        m = mu.shape[0]
        cut = min(m, math.ceil(split * m - 1e-9))
        if cut >= m:
            raise UnsupportedValue("split leaves no held-out time points")
        err = (pred - mu) ** 2
        acc_in.append(err[1:cut].mean(axis=0))
        acc_out.append(err[cut:].mean(axis=0))
    return PredictionErrors(
        in_sample=np.mean(acc_in, axis=0),
        out_sample=np.mean(acc_out, axis=0),
        train_length=int(cut),
        n_clamped=n_clamped,
    )


def one_step_natural(spec: MrssSpec, subj: SubjectData,
                     psi: ParameterSet, *, kappa: float | None = 1e7):
    """One-step predicted natural parameters aligned to the subject grid.

    Row t holds the prediction of the signal at time t from data strictly
    before it; the first observed row is NaN.
    """
    path = one_step_path(spec, subj, psi, kappa=kappa)
    out = np.full((len(subj.times), spec.p), np.nan)
    pos = {int(t): i for i, t in enumerate(subj.times)}
    for t, row in zip(path.times, path.theta):
        out[pos[int(t)]] = row
    return out


def pearson_residual_mse(spec: MrssSpec, subj: SubjectData,
                         psi: ParameterSet, *, n_heldout: int = 5,
                         kappa: float | None = 1e7) -> np.ndarray:
    """Mean squared Pearson residual per channel on the last held-out
    points, under the one-step predictive law (plug-in mean and variance).

    Channels with no observed values in the window come back NaN. A
    predictive variance of zero (a saturated binary probability, a
    vanishing count rate) raises ZeroPredVariance.
    """
    if n_heldout < 1:
        raise UnsupportedValue("n_heldout must be at least 1")
    path = one_step_path(spec, subj, psi, kappa=kappa)
    theta = path.theta[-n_heldout:]
    held_times = path.times[-n_heldout:]
    pos = {int(t): i for i, t in enumerate(subj.times)}
    fams = psi.families(spec)

    sums = np.zeros(spec.p)
    counts = np.zeros(spec.p)
    for th_row, t in zip(theta, held_times):
        z_row = subj.z[pos[int(t)]]
        for j in range(spec.p):
            if np.isnan(z_row[j]):
                continue
            mean = fams[j].mean(np.array([th_row[j]]))[0]
            var = fams[j].variance(np.array([th_row[j]]))[0]
            if not np.isfinite(var) or var <= 0.0:
                raise ZeroPredVariance(
                    f"channel {spec.channels[j].name!r} at t={int(t)}: "
                    f"predictive variance {float(var):g}")
            resid = (z_row[j] - mean) / np.sqrt(var)
            sums[j] += resid * resid
            counts[j] += 1.0
    out = sums / np.maximum(counts, 1.0)
    out[counts == 0] = np.nan
    return out


# ----------------------------------------------------------------------
# Replication drivers
# ----------------------------------------------------------------------

def _fit_or_partial(spec, subjects, config):
    try:
        return cbcd_fit(spec, subjects, config), True
    except NotConverged as err:
        return err.result, False


def replicate_estimation(sim_config: SimConfig, optim: OptimConfig,
                         cells=((1, 1),)) -> dict:
    """One estimation replication: fit each candidate state layout on a
    fresh dataset (full panels) and record coefficients and AIC.

    Returns a plain dict (picklable for process pools) with one record per
    cell and the AIC-selected cell.
    """
    data = generate_dataset(sim_config)
    out = {"seed": sim_config.seed, "cells": {}}
    for cell in cells:
        spec = make_sim_spec(*cell)
        start = time.perf_counter()
        fit, converged = _fit_or_partial(spec, data.subjects, optim)
        out["cells"][tuple(cell)] = {
            "aic": fit.aic,
            "loglik": fit.loglik,
            "mc_se": fit.mc_se,
            "converged": converged,
            "n_outer": fit.n_outer,
            "beta": np.array(fit.psi_hat.beta),
            "blocks_monotone": all(r.after >= r.before
                                   for r in fit.block_trace),
            "wall": time.perf_counter() - start,
        }
    out["selected"] = min(out["cells"], key=lambda c: out["cells"][c]["aic"])
    return out


def replicate_prediction(sim_config: SimConfig, optim: OptimConfig) -> dict:
    """One prediction replication: fit on the training window, then score
    one-step natural-parameter predictions for the panel model and both
    autoregression baselines over the whole grid.
    """
    data = generate_dataset(sim_config)
    train = data.train_subjects()
    spec = make_sim_spec(1, 1)
    start = time.perf_counter()
    fit, converged = _fit_or_partial(spec, train, optim)
    wall_fit = time.perf_counter() - start

    mu_seq = list(data.mu)
    mrss_pred = [one_step_natural(spec, s, fit.psi_hat, kappa=optim.kappa)
                 for s in data.subjects]

    cut = sim_config.train_length
    var_fits = []
    for s in data.subjects:
        yt = var_responses(s.z[:cut])
        var_fits.append(fit_var(yt, s.treatment[:cut], allow_singular=True))
    pool = pooled_var(var_fits)

    def var_errors(fits):
        preds, clamped = [], 0
        for f, s in zip(fits, data.subjects):
            raw = var_predict(f, var_responses(s.z), s.treatment)
            nat, n_cl = natural_from_var(raw)
            preds.append(nat)
            clamped += n_cl
        return prediction_errors(mu_seq, preds, split=sim_config.split,
                                 n_clamped=clamped)

    return {
        "seed": sim_config.seed,
        "converged": converged,
        "wall_fit": wall_fit,
        "mrss": prediction_errors(mu_seq, mrss_pred,
                                  split=sim_config.split),
        "var_individual": var_errors(var_fits),
        "var_pooled": var_errors([pool] * len(var_fits)),
    }
