"""Time-varying linear Gaussian state-space models.

The model, for time points t = 1..m:

    Z_t     = Lambda_t alpha_t + d_t + eps_t,   eps_t ~ N(0, H)
    alpha_{t+1} = T_t alpha_t + c_t + eta_t,    eta_t ~ N(0, Q_t)
    alpha_1 ~ N(a1, P1)

with observation dimension p and state dimension w. Missing observations are
handled by row deletion (a missing channel simply contributes nothing), and
runs of entirely skipped grid times can be collapsed into single transition
steps with :func:`gap_transition` / :func:`collapse_gaps`.

Besides the Kalman filter and smoother this module provides a brute-force
oracle, :func:`dense_joint_loglik`, which evaluates the same likelihood by
stacking all observations into one joint Gaussian. It shares no recursion
with the filter, which is the point: the two must agree to 1e-8 on any
instance small enough to stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NonPSDInnovation, SingularJointCovariance

_LOG_2PI = float(np.log(2.0 * np.pi))

# Relative eigenvalue slack when validating user-supplied covariances.
_PSD_TOL = 1e-10
# Pivot floor for innovation factorizations, per the module contract.
_PIVOT_TOL = 1e-12


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _frozen(a: np.ndarray, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


def _check_psd(mat: np.ndarray, name: str) -> None:
    if mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got {mat.shape}")
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.max(np.abs(mat - mat.T)) > 1e-8 * scale:
        raise DimensionMismatch(f"{name} is not symmetric")
    eig = np.linalg.eigvalsh(_sym(mat))
    spectral = max(1.0, float(np.max(np.abs(eig))))
    if np.min(eig) < -_PSD_TOL * spectral:
        raise DimensionMismatch(
            f"{name} is not positive semi-definite (min eigenvalue {np.min(eig):.3e})"
        )


@dataclass(frozen=True)
class GaussianSSM:
    """A linear Gaussian state-space model with known system matrices.

    Parameters
    ----------
    lam : array (m, p, w) or (p, w)
        Observation loadings Lambda_t; a 2-d array is broadcast over time.
    d : array (m, p) or (p,) or None
        Observation offsets d_t (None means zero).
    T, c, Q : arrays
        Transition matrix (w, w) or (m, w, w), intercept (w,) or (m, w) and
        state-noise covariance (w, w) or (m, w, w). Entry t of a time-varying
        array carries the state from time t+1 to t+2 (1-based); the last
        entry is only used for the final one-step prediction.
    H : scalar, (p,), (p, p), (m, p) or (m, p, p) array
        Observation-noise covariance, optionally per time point; a scalar,
        1-d or (m, p) array gives diagonal variances. When m == p a 2-d
        square array is read as a constant (p, p) covariance.
    a1, P1 : arrays (w,), (w, w)
        Initial state law.
    missing : bool array (m, p), optional
        Per-time, per-channel missingness. NaNs in data passed to the filter
        are treated as missing as well.
    m : int, optional
        Number of time points; required only when every system input is
        time-invariant.

    All arrays are normalized to their fully time-varying shapes and frozen;
    instances are immutable and safe to share across threads.
    """

    lam: np.ndarray
    d: np.ndarray | None
    T: np.ndarray
    c: np.ndarray | None
    Q: np.ndarray
    H: np.ndarray
    a1: np.ndarray
    P1: np.ndarray
    missing: np.ndarray | None = None
    m: int | None = None

    # filled in by __post_init__
    p: int = field(init=False)
    w: int = field(init=False)

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim == 2:
            p, w = lam.shape
            m = self.m
        elif lam.ndim == 3:
            m, p, w = lam.shape
        else:
            raise DimensionMismatch(f"lam must be 2-d or 3-d, got shape {lam.shape}")

        if m is None:
            for cand in (self.d, self.T, self.c, self.Q, self.missing):
                if cand is None:
                    continue
                arr = np.asarray(cand)
                if arr.ndim == 3 or (cand is self.d and arr.ndim == 2) or (
                    cand is self.c and arr.ndim == 2
                ) or (cand is self.missing and arr.ndim == 2):
                    m = arr.shape[0]
                    break
        if m is None:
            raise DimensionMismatch(
                "m cannot be inferred; pass m= when all inputs are time-invariant"
            )
        m = int(m)
        if m < 1:
            raise DimensionMismatch(f"m must be >= 1, got {m}")

        lam_full = np.broadcast_to(lam, (m, p, w)) if lam.ndim == 2 else lam
        if lam_full.shape != (m, p, w):
            raise DimensionMismatch(f"lam has shape {lam.shape}, expected ({m},{p},{w})")

        def _expand(x, shape, name):
            try:
                return np.broadcast_to(x, shape)
            except ValueError:
                raise DimensionMismatch(
                    f"{name} has shape {np.shape(x)}, not broadcastable to {shape}"
                ) from None

        d = np.zeros(p) if self.d is None else np.asarray(self.d, dtype=float)
        d_full = _expand(d, (m, p), "d")

        T = np.asarray(self.T, dtype=float)
        T_full = _expand(T, (m, w, w), "T")
        c = np.zeros(w) if self.c is None else np.asarray(self.c, dtype=float)
        c_full = _expand(c, (m, w), "c")
        Q = np.asarray(self.Q, dtype=float)
        Q_full = _expand(Q, (m, w, w), "Q")

        H = np.asarray(self.H, dtype=float)
        if H.ndim == 0:
            H = np.eye(p) * float(H)
        elif H.ndim == 1:
            if H.shape != (p,):
                raise DimensionMismatch(f"diagonal H has shape {H.shape}, expected ({p},)")
            H = np.diag(H)
        if H.ndim == 2 and H.shape == (m, p) and H.shape != (p, p):
            # per-time diagonal variances
            H = np.stack([np.diag(row) for row in H])
        if H.ndim == 2:
            if H.shape != (p, p):
                raise DimensionMismatch(f"H has shape {H.shape}, expected ({p},{p})")
            H_full = np.broadcast_to(H, (m, p, p))
        else:
            if H.shape != (m, p, p):
                raise DimensionMismatch(
                    f"time-varying H has shape {H.shape}, expected ({m},{p},{p})"
                )
            H_full = H

        a1 = np.asarray(self.a1, dtype=float).reshape(-1)
        if a1.shape != (w,):
            raise DimensionMismatch(f"a1 has shape {a1.shape}, expected ({w},)")
        P1 = np.asarray(self.P1, dtype=float)
        if P1.shape != (w, w):
            raise DimensionMismatch(f"P1 has shape {P1.shape}, expected ({w},{w})")

        missing = self.missing
        if missing is not None:
            missing = np.asarray(missing, dtype=bool)
            if missing.shape != (m, p):
                raise DimensionMismatch(
                    f"missing mask has shape {missing.shape}, expected ({m},{p})"
                )

        for t in range(m if H.ndim == 3 else 1):
            _check_psd(H_full[t], "H")
        _check_psd(P1, "P1")
        for t in range(m if Q.ndim == 3 else 1):
            _check_psd(Q_full[t], "Q")

        object.__setattr__(self, "lam", _frozen(lam_full))
        object.__setattr__(self, "d", _frozen(d_full))
        object.__setattr__(self, "T", _frozen(T_full))
        object.__setattr__(self, "c", _frozen(c_full))
        object.__setattr__(self, "Q", _frozen(Q_full))
        object.__setattr__(self, "H", _frozen(H_full))
        object.__setattr__(self, "a1", _frozen(a1))
        object.__setattr__(self, "P1", _frozen(P1))
        object.__setattr__(
            self, "missing", None if missing is None else _frozen(missing, dtype=bool)
        )
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "w", w)

    # ------------------------------------------------------------------
    def replace(self, **kw) -> "GaussianSSM":
        """Return a copy with some system matrices replaced."""
        base = dict(
            lam=self.lam, d=self.d, T=self.T, c=self.c, Q=self.Q,
            H=self.H, a1=self.a1, P1=self.P1, missing=self.missing, m=self.m,
        )
        base.update(kw)
        return GaussianSSM(**base)

    def missing_mask(self, z: np.ndarray) -> np.ndarray:
        """Effective missingness: the model mask joined with NaNs in `z`."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.m, self.p):
            raise DimensionMismatch(
                f"data has shape {z.shape}, expected ({self.m},{self.p})"
            )
        mask = np.isnan(z)
        if self.missing is not None:
            mask = mask | self.missing
        return mask


@dataclass(frozen=True)
class FilterOutput:
    """Everything the Kalman filter produces in one forward pass.

    `v`, `F`, `K` are per-time lists over the observed (row-deleted)
    channels, so their widths vary with the missingness pattern. `a`/`P`
    hold one-step predictions with an extra final entry: `a[t]` is the mean
    of alpha_{t+1} given data through time t, so `a[m]` is the prediction
    past the sample. `loglik` includes all normalizing constants.
    """

    v: list
    F: list
    a: np.ndarray
    P: np.ndarray
    a_filt: np.ndarray
    P_filt: np.ndarray
    K: list
    loglik: float
    obs_idx: list
    # solver byproducts reused by the smoother (F^{-1} v_t and F^{-1} Lambda_t)
    Finv_v: list
    Finv_lam: list


@dataclass(frozen=True)
class SmootherOutput:
    """Smoothed state means/covariances and the backward accumulators.

    `r[t]` and `N[t]` are indexed so that `r[m] = 0`, `N[m] = 0` is the
    backward initialization and `alpha_hat[t] = a[t] + P[t] r[t]` (0-based
    arrays; the stored `r` at slot t is the accumulator the recursion calls
    r_{t-1}).
    """

    alpha_hat: np.ndarray
    V: np.ndarray
    r: np.ndarray
    N: np.ndarray


def _chol_or_raise(F: np.ndarray, t: int) -> np.ndarray:
    try:
        L = np.linalg.cholesky(F)
    except np.linalg.LinAlgError as exc:
        raise NonPSDInnovation(
            f"innovation covariance at time {t + 1} is not positive definite"
        ) from exc
    dmax = float(np.max(np.diag(F)))
    if np.min(np.diag(L)) ** 2 <= _PIVOT_TOL * max(dmax, 1.0):
        raise NonPSDInnovation(
            f"innovation covariance at time {t + 1} is singular to working tolerance"
        )
    return L


def kalman_filter(model: GaussianSSM, z: np.ndarray) -> FilterOutput:
    """Run the Kalman filter on an observation panel.

    Parameters
    ----------
    model : GaussianSSM
    z : array (m, p)
        Observations; NaN marks a missing entry (in addition to any mask on
        the model). Fully missing time points skip the update step and add
        nothing to the likelihood; partially missing ones are row-deleted.

    Returns
    -------
    FilterOutput

    Raises
    ------
    NonPSDInnovation
        If some F_t cannot be factorized to working tolerance.
    DimensionMismatch
        If `z` does not match the model.
    """
    z = np.asarray(z, dtype=float)
    mask = model.missing_mask(z)
    m, p, w = model.m, model.p, model.w

    a = model.a1.copy()
    P = model.P1.copy()

    a_pred = np.empty((m + 1, w))
    P_pred = np.empty((m + 1, w, w))
    a_filt = np.empty((m, w))
    P_filt = np.empty((m, w, w))
    v_list, F_list, K_list = [], [], []
    Finv_v_list, Finv_lam_list, obs_list = [], [], []
    loglik = 0.0

    for t in range(m):
        a_pred[t] = a
        P_pred[t] = P
        Tt = model.T[t]
        obs = np.flatnonzero(~mask[t])
        obs_list.append(obs)

        if obs.size:
            Zl = model.lam[t][obs]              # (p_t, w)
            v = z[t, obs] - Zl @ a - model.d[t][obs]
            PZt = P @ Zl.T                      # (w, p_t)
            F = _sym(Zl @ PZt + model.H[t][np.ix_(obs, obs)])
            L = _chol_or_raise(F, t)
            Finv_v = scipy.linalg.cho_solve((L, True), v)
            Finv_lam = scipy.linalg.cho_solve((L, True), Zl)
            logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
            loglik += -0.5 * (obs.size * _LOG_2PI + logdet + float(v @ Finv_v))

            af = a + PZt @ Finv_v
            Pf = _sym(P - PZt @ scipy.linalg.cho_solve((L, True), PZt.T))
            K = Tt @ scipy.linalg.cho_solve((L, True), PZt.T).T  # T P Lam' F^{-1}
        else:
            Zl = np.empty((0, w))
            v = np.empty(0)
            F = np.empty((0, 0))
            Finv_v = np.empty(0)
            Finv_lam = np.empty((0, w))
            K = np.empty((w, 0))
            af, Pf = a, P

        v_list.append(v)
        F_list.append(F)
        K_list.append(K)
        Finv_v_list.append(Finv_v)
        Finv_lam_list.append(Finv_lam)
        a_filt[t] = af
        P_filt[t] = Pf

        a = Tt @ af + model.c[t]
        P = _sym(Tt @ Pf @ Tt.T + model.Q[t])

    a_pred[m] = a
    P_pred[m] = P

    return FilterOutput(
        v=v_list, F=F_list, a=a_pred, P=P_pred, a_filt=a_filt, P_filt=P_filt,
        K=K_list, loglik=float(loglik), obs_idx=obs_list,
        Finv_v=Finv_v_list, Finv_lam=Finv_lam_list,
    )


def kalman_smoother(model: GaussianSSM, filt: FilterOutput) -> SmootherOutput:
    """Backward smoothing pass on a filtered model.

    Uses the accumulator recursion

        r_{t-1} = Lambda_t' F_t^{-1} v_t + L_t' r_t
        N_{t-1} = Lambda_t' F_t^{-1} Lambda_t + L_t' N_t L_t

    with L_t = T_t - K_t Lambda_t and K_t = T_t P_t Lambda_t' F_t^{-1},
    initialized at r_m = 0, N_m = 0. At fully missing time points the
    observation terms drop out and L_t reduces to T_t.
    """
    m, w = model.m, model.w
    alpha_hat = np.empty((m, w))
    V = np.empty((m, w, w))
    r_hist = np.zeros((m + 1, w))
    N_hist = np.zeros((m + 1, w, w))

    r = np.zeros(w)
    N = np.zeros((w, w))
    for t in range(m - 1, -1, -1):
        Tt = model.T[t]
        obs = filt.obs_idx[t]
        if obs.size:
            Zl = model.lam[t][obs]
            Lt = Tt - filt.K[t] @ Zl
            r = Zl.T @ filt.Finv_v[t] + Lt.T @ r
            N = _sym(Zl.T @ filt.Finv_lam[t] + Lt.T @ N @ Lt)
        else:
            r = Tt.T @ r
            N = _sym(Tt.T @ N @ Tt)
        alpha_hat[t] = filt.a[t] + filt.P[t] @ r
        V[t] = _sym(filt.P[t] - filt.P[t] @ N @ filt.P[t])
        r_hist[t] = r
        N_hist[t] = N

    return SmootherOutput(alpha_hat=alpha_hat, V=V, r=r_hist, N=N_hist)


# ----------------------------------------------------------------------
# Dense matrix-form joint density: the brute-force oracle.
# ----------------------------------------------------------------------

def dense_joint_moments(model: GaussianSSM, mask: np.ndarray):
    """Stacked joint moments of (alpha*, observed Z).

    Builds the literal matrix form: with alpha* = (alpha_1', .., alpha_{m+1}')'
    and eta* stacked state noise,

        alpha* = T*(a1* + c* + R* eta*),   Z = Lam* alpha* + d* + eps*

    where T* is block lower-triangular with cumulative transition products.
    Returns (mean_alpha, V_star, lam_star, d_star, H_star) with the
    observation blocks already row-deleted down to observed entries.
    Intended for small instances (m*p up to a few hundred).
    """
    m, p, w = model.m, model.p, model.w
    W = (m + 1) * w

    T_star = np.zeros((W, W))
    T_star[:w, :w] = np.eye(w)
    for i in range(1, m + 1):
        rows = slice(i * w, (i + 1) * w)
        prev = slice((i - 1) * w, i * w)
        T_star[rows, :i * w] = model.T[i - 1] @ T_star[prev, :i * w]
        T_star[rows, rows] = np.eye(w)

    a1c = np.zeros(W)
    a1c[:w] = model.a1
    for s in range(m):
        a1c[(s + 1) * w:(s + 2) * w] = model.c[s]
    mean_alpha = T_star @ a1c

    inner = np.zeros((W, W))          # P1* + R* Q* R*'
    inner[:w, :w] = model.P1
    for s in range(m):
        blk = slice((s + 1) * w, (s + 2) * w)
        inner[blk, blk] = model.Q[s]
    V_star = T_star @ inner @ T_star.T

    rows = []
    for t in range(m):
        for j in np.flatnonzero(~mask[t]):
            rows.append((t, j))
    n_obs = len(rows)
    lam_star = np.zeros((n_obs, W))
    d_star = np.empty(n_obs)
    H_star = np.zeros((n_obs, n_obs))
    for r_i, (t, j) in enumerate(rows):
        lam_star[r_i, t * w:(t + 1) * w] = model.lam[t, j]
        d_star[r_i] = model.d[t, j]
        for r_k, (t2, j2) in enumerate(rows):
            if t2 == t:
                H_star[r_i, r_k] = model.H[t, j, j2]
    return mean_alpha, V_star, lam_star, d_star, H_star, rows


def dense_joint_loglik(model: GaussianSSM, z: np.ndarray) -> float:
    """Joint Gaussian log-density of the observed panel, by brute force.

    log p(Z) = -n/2 log 2pi - 1/2 log|Omega*| - 1/2 (Z-mu*)' Omega*^{-1} (Z-mu*)
    with mu* = Lam* T* (a1* + c*) + d* and
    Omega* = Lam* V* Lam*' + H*. Serves as the likelihood oracle for
    :func:`kalman_filter`; returns 0.0 for a panel with no observed entries.

    Raises
    ------
    SingularJointCovariance
        If Omega* is not positive definite.
    """
    z = np.asarray(z, dtype=float)
    mask = model.missing_mask(z)
    mean_alpha, V_star, lam_star, d_star, H_star, rows = dense_joint_moments(model, mask)
    n = len(rows)
    if n == 0:
        return 0.0
    z_obs = np.array([z[t, j] for (t, j) in rows])
    mu = lam_star @ mean_alpha + d_star
    omega = _sym(lam_star @ V_star @ lam_star.T + H_star)
    try:
        L = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError as exc:
        raise SingularJointCovariance("joint covariance is not positive definite") from exc
    e = scipy.linalg.solve_triangular(L, z_obs - mu, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return float(-0.5 * (n * _LOG_2PI + logdet + e @ e))


def dense_conditional_states(model: GaussianSSM, z: np.ndarray):
    """Conditional mean and covariance of alpha* given the observed panel.

    Returns (mean, cov) over the stacked alpha_1..alpha_{m+1}; block t of the
    mean is the smoothed state at time t+1 (0-based). Brute-force companion
    to :func:`kalman_smoother` for small instances.
    """
    z = np.asarray(z, dtype=float)
    mask = model.missing_mask(z)
    mean_alpha, V_star, lam_star, d_star, H_star, rows = dense_joint_moments(model, mask)
    if not rows:
        return mean_alpha, V_star
    z_obs = np.array([z[t, j] for (t, j) in rows])
    mu = lam_star @ mean_alpha + d_star
    omega = _sym(lam_star @ V_star @ lam_star.T + H_star)
    try:
        cf = scipy.linalg.cho_factor(omega, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise SingularJointCovariance("joint covariance is not positive definite") from exc
    G = V_star @ lam_star.T                       # (W, n)
    mean = mean_alpha + G @ scipy.linalg.cho_solve(cf, z_obs - mu)
    cov = _sym(V_star - G @ scipy.linalg.cho_solve(cf, G.T))
    return mean, cov


# ----------------------------------------------------------------------
# Diffuse initialization and gap transitions.
# ----------------------------------------------------------------------

def diffuse_loglik(model: GaussianSSM, z: np.ndarray, kappa: float = 1e7,
                   mask: np.ndarray | None = None) -> float:
    """Diffuse log-likelihood via the big-kappa approximation.

    Replaces P1 by P1 + kappa * diag(mask) (mask defaults to every state)
    and returns the filter log-likelihood plus (q/2) log kappa, q being the
    number of diffuse states. The additive correction removes the
    kappa-divergent part, so values are stable in kappa over [1e6, 1e8] and
    comparable across state dimensions. With q = 0 this is exactly the
    ordinary filter likelihood.
    """
    if kappa < 1e6:
        raise DimensionMismatch(f"kappa must be >= 1e6, got {kappa}")
    w = model.w
    if mask is None:
        dmask = np.ones(w, dtype=bool)
    else:
        dmask = np.asarray(mask, dtype=bool).reshape(w)
    q = int(np.sum(dmask))
    if q == 0:
        return kalman_filter(model, z).loglik
    P1 = model.P1 + kappa * np.diag(dmask.astype(float))
    out = kalman_filter(model.replace(P1=P1), z)
    return out.loglik + 0.5 * q * float(np.log(kappa))


def gap_transition(T, c, Q, tau: int):
    """Collapse tau skipped time points into one transition step.

    Starting from alpha_{t+1} = T alpha_t + c + eta and a gap of tau fully
    unobserved times, the law of alpha_{t+tau+1} given alpha_t is governed by

        T* = T^(tau+1),  c* = sum_{k=0..tau} T^k c,  Q* = sum_{k=0..tau} T^k Q T^k'

    Scalar inputs get scalar outputs. tau = 0 returns the inputs unchanged.
    """
    if tau < 0:
        raise DimensionMismatch(f"gap length must be >= 0, got {tau}")
    scalar = np.ndim(T) == 0
    T = np.atleast_2d(np.asarray(T, dtype=float))
    w = T.shape[0]
    c = np.asarray(c, dtype=float).reshape(w)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))

    Tpow = np.eye(w)
    c_star = np.zeros(w)
    Q_star = np.zeros((w, w))
    for _ in range(tau + 1):
        c_star += Tpow @ c
        Q_star += Tpow @ Q @ Tpow.T
        Tpow = T @ Tpow
    if scalar:
        return float(Tpow[0, 0]), float(c_star[0]), float(Q_star[0, 0])
    return Tpow, c_star, _sym(Q_star)


def collapse_gaps(times: np.ndarray, T, c, Q):
    """Per-step transition arrays for an increasing integer time grid.

    `times` lists the grid indices at which the subject was observed; the
    returned (m, w, w)/(m, w)/(m, w, w) arrays carry the state across each
    consecutive pair (entry i covers times[i] -> times[i+1], inserting the
    collapsed gap), with a plain single step in the last slot for the final
    prediction.
    """
    times = np.asarray(times, dtype=int)
    if times.ndim != 1 or times.size < 1:
        raise DimensionMismatch("times must be a nonempty 1-d integer array")
    if np.any(np.diff(times) < 1):
        raise DimensionMismatch("times must be strictly increasing")
    T = np.atleast_2d(np.asarray(T, dtype=float))
    w = T.shape[0]
    c = np.asarray(c, dtype=float).reshape(w)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    m = times.size
    T_steps = np.empty((m, w, w))
    c_steps = np.empty((m, w))
    Q_steps = np.empty((m, w, w))
    for i in range(m - 1):
        tau = int(times[i + 1] - times[i] - 1)
        T_steps[i], c_steps[i], Q_steps[i] = gap_transition(T, c, Q, tau)
    T_steps[m - 1], c_steps[m - 1], Q_steps[m - 1] = T, c, Q
    return T_steps, c_steps, Q_steps


def psd_factor(mat: np.ndarray) -> np.ndarray:
    """A factor S with S S' = mat for any symmetric PSD matrix.

    Cholesky when possible, eigendecomposition otherwise (so singular
    covariances, e.g. Q = 0, still work).
    """
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if not np.any(mat):
        return np.zeros_like(mat)
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(_sym(mat))
        vals = np.clip(vals, 0.0, None)
        return vecs * np.sqrt(vals)


def simulate_gssm(model: GaussianSSM, rng: np.random.Generator):
    """Draw one (state path, observation panel) pair from the model.

    Returns (alpha (m, w), z (m, p)); the model's missing mask, if any, is
    applied as NaNs in z.
    """
    m, p, w = model.m, model.p, model.w
    alpha = np.empty((m, w))
    z = np.empty((m, p))
    s_P1 = psd_factor(model.P1)
    x = model.a1 + s_P1 @ rng.standard_normal(w)
    for t in range(m):
        alpha[t] = x
        s_H = psd_factor(model.H[t])
        z[t] = model.lam[t] @ x + model.d[t] + s_H @ rng.standard_normal(p)
        x = model.T[t] @ x + model.c[t] + psd_factor(model.Q[t]) @ rng.standard_normal(w)
    if model.missing is not None:
        z = np.where(model.missing, np.nan, z)
    return alpha, z
