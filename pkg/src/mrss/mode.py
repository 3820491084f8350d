"""Posterior mode of the signal in a mixed-channel state-space model.

A :class:`MixedSSM` couples the linear Gaussian state law of
:class:`~mrss.lgss.GaussianSSM` with one exponential-family observation
channel per row: the signal theta_tj = lambda_tj' alpha_t + d_tj feeds the
channel's link, and Gaussian channels keep their exact variance. The mode
finder repeatedly replaces each non-Gaussian channel by its second-order
expansion around the current signal (pseudo-observation theta + A d1 with
pseudo-variance A = -1/d2), smooths the resulting Gaussian model, and takes
the smoothed signal as the next iterate. At the fixed point the smoothed
signal equals the mode of p(theta | Z), and the linearized model is the
Gaussian approximation used downstream for importance sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, ModeDiverged, UnsupportedValue
from .families import ChannelFamily, Gaussian
from .lgss import (
    FilterOutput,
    GaussianSSM,
    kalman_filter,
    kalman_smoother,
    psd_factor,
)

__all__ = ["MixedSSM", "LinearizedModel", "linearize", "find_mode",
           "state_gradient", "simulate_mixed"]


@dataclass(frozen=True)
class MixedSSM:
    """State-space model with mixed exponential-family observation channels.

    The state law (T, c, Q, a1, P1) and the signal structure (lam, d) are
    exactly as in :class:`~mrss.lgss.GaussianSSM`; `channels` gives one
    :class:`~mrss.families.ChannelFamily` per observation row. Gaussian
    channels carry their own variance, so there is no separate H.
    """

    lam: np.ndarray
    d: np.ndarray | None
    T: np.ndarray
    c: np.ndarray | None
    Q: np.ndarray
    a1: np.ndarray
    P1: np.ndarray
    channels: tuple
    missing: np.ndarray | None = None
    m: int | None = None

    p: int = field(init=False)
    w: int = field(init=False)

    def __post_init__(self):
        channels = tuple(self.channels)
        for ch in channels:
            if not isinstance(ch, ChannelFamily):
                raise DimensionMismatch(f"not a channel family: {ch!r}")
        # normalize all array shapes through the Gaussian container
        skel = GaussianSSM(
            lam=self.lam, d=self.d, T=self.T, c=self.c, Q=self.Q,
            H=np.zeros(len(channels)), a1=self.a1, P1=self.P1,
            missing=self.missing, m=self.m,
        )
        if len(channels) != skel.p:
            raise DimensionMismatch(
                f"{len(channels)} channels for {skel.p} observation rows"
            )
        for name in ("lam", "d", "T", "c", "Q", "a1", "P1", "missing"):
            object.__setattr__(self, name, getattr(skel, name))
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "m", skel.m)
        object.__setattr__(self, "p", skel.p)
        object.__setattr__(self, "w", skel.w)

    # ------------------------------------------------------------------
    @property
    def all_gaussian(self) -> bool:
        return all(isinstance(ch, Gaussian) for ch in self.channels)

    def as_gaussian(self) -> GaussianSSM:
        """The equivalent GaussianSSM; valid only when all channels are Gaussian."""
        if not self.all_gaussian:
            raise UnsupportedValue("model has non-Gaussian channels")
        hdiag = np.array([ch.sigma2 for ch in self.channels])
        return GaussianSSM(lam=self.lam, d=self.d, T=self.T, c=self.c, Q=self.Q,
                           H=hdiag, a1=self.a1, P1=self.P1, missing=self.missing,
                           m=self.m)

    def missing_mask(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.m, self.p):
            raise DimensionMismatch(
                f"data has shape {z.shape}, expected ({self.m},{self.p})"
            )
        mask = np.isnan(z)
        if self.missing is not None:
            mask = mask | self.missing
        return mask

    def signal(self, alpha: np.ndarray) -> np.ndarray:
        """theta_t = Lambda_t alpha_t + d_t for a state path (m, w) -> (m, p)."""
        alpha = np.asarray(alpha, dtype=float)
        return np.einsum("tpw,tw->tp", self.lam, alpha) + self.d

    def check_support(self, z: np.ndarray, mask: np.ndarray) -> None:
        for j, ch in enumerate(self.channels):
            col = z[:, j][~mask[:, j]]
            if col.size:
                ch.check_support(col)

    def log_obs_density(self, z: np.ndarray, theta: np.ndarray,
                        mask: np.ndarray) -> float:
        """Sum of channel log-densities over observed entries."""
        total = 0.0
        for j, ch in enumerate(self.channels):
            keep = ~mask[:, j]
            if np.any(keep):
                total += float(np.sum(ch.log_density(z[keep, j], theta[keep, j])))
        return total


@dataclass(frozen=True)
class LinearizedModel:
    """Gaussian working model from a second-order expansion of the channels.

    `base` shares the state law and signal structure with the target model
    and carries the pseudo-variances as its (time-varying, diagonal)
    observation covariance. `pseudo_z`/`pseudo_H` are NaN/1 at missing
    entries, which the filter ignores. For Gaussian channels the expansion
    is exact: pseudo_z is the data and pseudo_H the channel variance, at
    any expansion point.
    """

    pseudo_z: np.ndarray       # (m, p)
    pseudo_H: np.ndarray       # (m, p) diagonal variances
    base: GaussianSSM
    theta_hat: np.ndarray      # (m, p) signal at the expansion point
    filt: FilterOutput | None = None
    n_iter: int = 0
    delta: float = np.nan
    converged: bool = False

    @property
    def log_g(self) -> float:
        """Gaussian log-likelihood of the pseudo-observations under `base`."""
        if self.filt is None:
            raise UnsupportedValue("linearized model carries no filter output")
        return self.filt.loglik


def simulate_mixed(model: MixedSSM, rng: np.random.Generator):
    """Draw one (state path, observation panel) pair from the mixed model.

    Returns (alpha (m, w), z (m, p)); entries under the model's missing
    mask come back as NaN.
    """
    m, p, w = model.m, model.p, model.w
    alpha = np.empty((m, w))
    x = model.a1 + psd_factor(model.P1) @ rng.standard_normal(w)
    for t in range(m):
        alpha[t] = x
        x = model.T[t] @ x + model.c[t] + psd_factor(model.Q[t]) @ rng.standard_normal(w)
    theta = model.signal(alpha)
    z = np.empty((m, p))
    for j, ch in enumerate(model.channels):
        z[:, j] = ch.sample(rng, theta[:, j])
    if model.missing is not None:
        z = np.where(model.missing, np.nan, z)
    return alpha, z


def linearize(model: MixedSSM, z: np.ndarray, theta: np.ndarray) -> LinearizedModel:
    """Expand every non-Gaussian channel to second order around `theta`.

    Per observed entry, A = -1/d2 and pseudo-observation theta + A d1;
    Gaussian entries pass through unchanged. Log-concavity of the supported
    families makes every pseudo-variance strictly positive.
    """
    z = np.asarray(z, dtype=float)
    theta = np.asarray(theta, dtype=float)
    mask = model.missing_mask(z)
    m, p = model.m, model.p

    pseudo_z = np.full((m, p), np.nan)
    pseudo_h = np.ones((m, p))
    for j, ch in enumerate(model.channels):
        keep = ~mask[:, j]
        if not np.any(keep):
            continue
        if isinstance(ch, Gaussian):
            pseudo_z[keep, j] = z[keep, j]
            pseudo_h[keep, j] = ch.sigma2
        else:
            d1, d2 = ch.d1_d2(z[keep, j], theta[keep, j])
            a = -1.0 / d2
            pseudo_z[keep, j] = theta[keep, j] + a * d1
            pseudo_h[keep, j] = a

    h_full = np.zeros((m, p, p))
    idx = np.arange(p)
    h_full[:, idx, idx] = pseudo_h
    base = GaussianSSM(lam=model.lam, d=model.d, T=model.T, c=model.c,
                       Q=model.Q, H=h_full, a1=model.a1, P1=model.P1,
                       missing=mask)
    return LinearizedModel(pseudo_z=pseudo_z, pseudo_H=pseudo_h, base=base,
                           theta_hat=theta)


def state_gradient(model: MixedSSM, z: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Gradient of log p(alpha, Z) in the state path, shape (m, w).

    Observation part Lambda_t' d1_t plus the Gaussian state-law part written
    on the transition residuals; needs Q and P1 nonsingular.
    """
    z = np.asarray(z, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    mask = model.missing_mask(z)
    theta = model.signal(alpha)
    m, w = model.m, model.w

    grad = np.zeros((m, w))
    for j, ch in enumerate(model.channels):
        keep = ~mask[:, j]
        if not np.any(keep):
            continue
        d1, _ = ch.d1_d2(z[keep, j], theta[keep, j])
        grad[keep] += model.lam[keep, j, :] * d1[:, None]

    grad[0] -= scipy.linalg.solve(model.P1, alpha[0] - model.a1, assume_a="pos")
    for t in range(m - 1):
        e = alpha[t + 1] - model.T[t] @ alpha[t] - model.c[t]
        qe = scipy.linalg.solve(model.Q[t], e, assume_a="pos")
        grad[t + 1] -= qe
        grad[t] += model.T[t].T @ qe
    return grad


def _smooth_pass(model: MixedSSM, z: np.ndarray, theta: np.ndarray):
    lin = linearize(model, z, theta)
    filt = kalman_filter(lin.base, lin.pseudo_z)
    sm = kalman_smoother(lin.base, filt)
    return lin, filt, sm


def find_mode(model: MixedSSM, z: np.ndarray, tol: float = 1e-8,
              max_iter: int = 50):
    """Mode of p(theta | Z) by iterated linearization.

    Starts from a channelwise transform of the data, alternates
    linearization and Gaussian smoothing, and stops when the smoothed
    signal moves less than `tol` in sup-norm. If the plain step increases
    the sup-norm of the state-space gradient it is halved, up to 5 times
    (skipped when Q or P1 is singular, where the gradient is undefined but
    the iteration is already contractive). The initialization pass is not
    counted in `n_iter`.

    Returns (LinearizedModel, SmootherOutput) where the smoother output
    belongs to the returned linearized model and the stored `theta_hat` is
    its smoothed signal.

    Raises
    ------
    ModeDiverged
        If `max_iter` is hit while the last move exceeds 1e-4.
    UnsupportedValue
        If some observation is outside its channel's support.
    """
    z = np.asarray(z, dtype=float)
    mask = model.missing_mask(z)
    model.check_support(z, mask)

    theta = np.zeros((model.m, model.p))
    for j, ch in enumerate(model.channels):
        keep = ~mask[:, j]
        theta[keep, j] = ch.init_signal(z[keep, j])

    # initialization pass
    _, _, sm = _smooth_pass(model, z, theta)
    theta = model.signal(sm.alpha_hat)
    alpha = sm.alpha_hat

    delta = np.inf
    n_iter = 0
    converged = False
    for it in range(1, max_iter + 1):
        _, _, sm = _smooth_pass(model, z, theta)
        alpha_new = sm.alpha_hat
        try:
            g_old = float(np.max(np.abs(state_gradient(model, z, alpha))))
            for _ in range(5):
                g_new = float(np.max(np.abs(state_gradient(model, z, alpha_new))))
                if g_new <= g_old:
                    break
                alpha_new = 0.5 * (alpha + alpha_new)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            pass
        theta_new = model.signal(alpha_new)
        delta = float(np.max(np.abs(theta_new - theta)))
        theta, alpha = theta_new, alpha_new
        n_iter = it
        if delta < tol:
            converged = True
            break

    if not converged and delta > 1e-4:
        raise ModeDiverged(
            f"no convergence after {max_iter} iterations (last move {delta:.3e})"
        )

    # final self-consistent pass at the accepted signal
    lin, filt, sm = _smooth_pass(model, z, theta)
    lin = LinearizedModel(pseudo_z=lin.pseudo_z, pseudo_H=lin.pseudo_H,
                          base=lin.base, theta_hat=model.signal(sm.alpha_hat),
                          filt=filt, n_iter=n_iter, delta=delta,
                          converged=converged)
    return lin, sm
