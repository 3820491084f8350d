"""Importance-sampled log-likelihood of a mixed-channel model.

The estimate decomposes as log L = log g(Z) + log(mean weight), with draws
taken from the Gaussian posterior of the converged linearized model and
weights formed from observation-density ratios only: the state law is
shared between the target and the working model, so its terms cancel
analytically, and Gaussian channels cancel entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeights, UnsupportedValue
from .families import Gaussian
from .lgss import kalman_filter, kalman_smoother, psd_factor
from .mode import LinearizedModel, MixedSSM, find_mode

__all__ = ["ISEstimate", "simulation_smoother", "is_loglik", "pooled_is_loglik"]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ISEstimate:
    """One importance-sampled likelihood evaluation.

    `loglik` is log_g + log_wbar; `ess` is the effective sample size
    (sum w)^2 / sum w^2, which equals n_samples for an all-Gaussian model
    where every weight is one.
    """

    log_g: float
    log_wbar: float
    n_samples: int
    ess: float
    seed: int | None = None

    @property
    def loglik(self) -> float:
        return self.log_g + self.log_wbar


def _filter_smooth(lin: LinearizedModel):
    filt = lin.filt
    if filt is None:
        filt = kalman_filter(lin.base, lin.pseudo_z)
    return filt, kalman_smoother(lin.base, filt)


def _draw_states(lin: LinearizedModel, rng: np.random.Generator, n_base: int,
                 antithetic: bool = True) -> np.ndarray:
    """Conditional state draws by mean correction, vectorized over draws.

    Simulates `n_base` unconditional paths from the linearized model,
    smooths their panels reusing the one gain pass shared by all draws
    (the gains do not depend on the data), and corrects each path by the
    difference of smoothed means. With `antithetic`, each path also yields
    its reflection about the conditional mean, so 2*n_base draws return.

    The generator is consumed in a fixed order and amount -- initial state,
    state noise, observation noise, each over the full (m, p) grid -- so
    two calls with equal (m, p, w, n_base) and equal seeds use the same
    normals regardless of parameter values or missingness.
    """
    base = lin.base
    m, p, w = base.m, base.p, base.w
    filt, sm = _filter_smooth(lin)
    mask = base.missing_mask(lin.pseudo_z)

    e_init = rng.standard_normal((n_base, w))
    e_state = rng.standard_normal((n_base, m, w))
    e_obs = rng.standard_normal((n_base, m, p))

    s1 = psd_factor(base.P1)
    x = base.a1[None, :] + e_init @ s1.T
    alpha_plus = np.empty((n_base, m, w))
    # forward filtered means of the simulated panels, one gain pass for all
    a = np.broadcast_to(base.a1, (n_base, w)).copy()
    a_pred = np.empty((n_base, m, w))
    v_all = []
    for t in range(m):
        alpha_plus[:, t] = x
        obs = filt.obs_idx[t]
        a_pred[:, t] = a
        if obs.size:
            Zl = base.lam[t][obs]
            sd = np.sqrt(np.diag(base.H[t])[obs])
            z_plus = x @ Zl.T + base.d[t][obs] + e_obs[:, t, obs] * sd
            v = z_plus - a @ Zl.T - base.d[t][obs]
            af = a + v @ (filt.P[t] @ filt.Finv_lam[t].T).T
        else:
            v = np.empty((n_base, 0))
            af = a
        v_all.append(v)
        a = af @ base.T[t].T + base.c[t]
        x = x @ base.T[t].T + base.c[t] + e_state[:, t] @ psd_factor(base.Q[t]).T

    # backward means-only smoothing of the simulated panels
    alpha_hat_plus = np.empty((n_base, m, w))
    r = np.zeros((n_base, w))
    for t in range(m - 1, -1, -1):
        obs = filt.obs_idx[t]
        if obs.size:
            Zl = base.lam[t][obs]
            L = base.T[t] - filt.K[t] @ Zl
            r = v_all[t] @ filt.Finv_lam[t] + r @ L
        else:
            r = r @ base.T[t]
        alpha_hat_plus[:, t] = a_pred[:, t] + r @ filt.P[t]

    dev = alpha_plus - alpha_hat_plus
    if antithetic:
        dev = np.concatenate([dev, -dev], axis=0)
    return sm.alpha_hat[None, :, :] + dev


def simulation_smoother(lin: LinearizedModel, rng: np.random.Generator) -> np.ndarray:
    """One exact draw (m, w) from the conditional state law of `lin`.

    Mean-correction construction: simulate an unconditional (state, panel)
    pair, smooth the panel, and shift the smoothed mean of the data by the
    simulation error alpha_plus - alpha_hat_plus.
    """
    return _draw_states(lin, rng, 1, antithetic=False)[0]


def _log_weights(model: MixedSSM, z: np.ndarray, lin: LinearizedModel,
                 draws: np.ndarray) -> np.ndarray:
    """log omega per draw: observation-density ratios at the draw signals."""
    mask = model.missing_mask(z)
    n = draws.shape[0]
    logw = np.zeros(n)
    for j, ch in enumerate(model.channels):
        if isinstance(ch, Gaussian):
            continue  # exact channel: ratio is identically one
        keep = ~mask[:, j]
        if not np.any(keep):
            continue
        theta = np.einsum("nkw,kw->nk", draws[:, keep, :], model.lam[keep, j, :])
        theta += model.d[keep, j][None, :]
        zz = z[keep, j][None, :]
        lp = ch.log_density(np.broadcast_to(zz, theta.shape), theta)
        a = lin.pseudo_H[keep, j][None, :]
        resid = lin.pseudo_z[keep, j][None, :] - theta
        lg = -0.5 * (_LOG_2PI + np.log(a) + resid * resid / a)
        logw += np.sum(lp - lg, axis=1)
    return logw


def is_loglik(model: MixedSSM, z: np.ndarray, lin: LinearizedModel, N: int,
              rng: np.random.Generator | None = None,
              seed: int | None = None) -> ISEstimate:
    """Importance-sampled log-likelihood with N antithetic draws.

    log_g comes from the Kalman filter of the linearized model; the weight
    average uses a max-shifted log-sum-exp. For an all-Gaussian model every
    weight is exactly one, so the total reproduces the Kalman likelihood
    bit for bit.

    Raises
    ------
    DegenerateWeights
        If the effective sample size falls below 0.01 * N.
    UnsupportedValue
        If N is odd or less than 2 (draws come in +/- pairs).
    """
    if N < 2 or N % 2:
        raise UnsupportedValue(f"N must be an even count >= 2, got {N}")
    if rng is None:
        rng = np.random.default_rng(seed)
    z = np.asarray(z, dtype=float)

    filt, _ = _filter_smooth(lin)
    log_g = filt.loglik

    draws = _draw_states(lin, rng, N // 2, antithetic=True)
    logw = _log_weights(model, z, lin, draws)

    mx = float(np.max(logw))
    if not np.isfinite(mx):
        raise DegenerateWeights("all importance weights vanished")
    wsh = np.exp(logw - mx)
    s1 = float(np.sum(wsh))
    s2 = float(np.sum(wsh * wsh))
    ess = s1 * s1 / s2
    if ess < 0.01 * N:
        raise DegenerateWeights(
            f"effective sample size {ess:.1f} of {N} (poor working model)"
        )
    log_wbar = mx + float(np.log(s1)) - float(np.log(N))
    return ISEstimate(log_g=float(log_g), log_wbar=float(log_wbar),
                      n_samples=N, ess=float(ess), seed=seed)


def subject_rng(seed: int, subject: int, tag: int = 0) -> np.random.Generator:
    """Deterministic per-subject stream: same (seed, subject, tag), same draws."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(subject, tag)))


def pooled_is_loglik(models, panels, N: int, seed: int = 0,
                     mode_tol: float = 1e-8, mode_max_iter: int = 50) -> float:
    """Sum of per-subject IS log-likelihoods with deterministic streams.

    `models` and `panels` are parallel sequences of per-subject mixed
    models and observation panels. Each subject gets its own generator
    derived from (seed, subject index), so repeated calls -- and calls at
    nearby parameter values -- reuse the same normals (common random
    numbers). The sum is accumulated with `math.fsum`, making the result
    independent of subject order at the last bit.

    Errors raised for a subject are re-raised with the subject index
    prepended to the message.
    """
    models = list(models)
    panels = list(panels)
    if len(models) != len(panels):
        raise UnsupportedValue(
            f"{len(models)} models for {len(panels)} panels"
        )
    parts = []
    for i, (model, z) in enumerate(zip(models, panels)):
        try:
            lin, _ = find_mode(model, z, tol=mode_tol, max_iter=mode_max_iter)
            est = is_loglik(model, z, lin, N, rng=subject_rng(seed, i))
        except Exception as exc:
            raise type(exc)(f"subject {i}: {exc}") from exc
        parts.append(est.loglik)
    return float(math.fsum(parts))
