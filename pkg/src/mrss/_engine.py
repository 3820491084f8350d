"""Compiled single-subject likelihood evaluation.

This module mirrors the reference pipeline (linearize -> filter -> smooth
-> importance weights) in numba-compiled kernels for use inside the
estimator, where one parameter evaluation runs the pipeline for every
subject. Three structural choices carry the speed:

* univariate sequential updating: with a diagonal observation covariance
  (true for mixed channels, true by construction for pseudo-variances) the
  filter processes one scalar observation at a time and never factorizes a
  matrix;
* the per-element gains (f, K) and time-start covariances depend on the
  linearized model but not on the data, so the importance-sampling pass
  computes them once and reuses them for every antithetic draw, which then
  needs means-only forward/backward passes;
* normals are drawn outside (numpy Generator semantics, common random
  numbers across parameter values) and handed in as arrays.

Channel codes: 0 Gaussian, 1 Bernoulli, 2 Poisson. Everything here is an
internal detail of the estimator; agreement with the reference modules is
pinned by tests at 1e-8.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import DegenerateWeights, ModeDiverged

_LOG_2PI = float(np.log(2.0 * np.pi))
_CLAMP = 35.0

GAUSSIAN, BERNOULLI, POISSON = 0, 1, 2


# ----------------------------------------------------------------------
# channel math (must track mrss.families formulas)
# ----------------------------------------------------------------------

@njit(cache=True)
def _logaddexp0(x):
    # log(1 + exp(x)), stable both directions
    if x > 0.0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit(cache=True)
def _d1d2(code, z, theta, sig2):
    if code == GAUSSIAN:
        return (z - theta) / sig2, -1.0 / sig2
    th = min(max(theta, -_CLAMP), _CLAMP)
    if code == BERNOULLI:
        p = 1.0 / (1.0 + np.exp(-th))
        return z - p, -p * (1.0 - p)
    lam = np.exp(th)
    return z - lam, -lam


@njit(cache=True)
def _logp(code, z, theta, sig2, lognorm):
    if code == GAUSSIAN:
        r = z - theta
        return -0.5 * (_LOG_2PI + np.log(sig2) + r * r / sig2)
    th = min(max(theta, -_CLAMP), _CLAMP)
    if code == BERNOULLI:
        return z * th - _logaddexp0(th)
    return z * th - np.exp(th) + lognorm


@njit(cache=True)
def _init_signal(code, z):
    if code == GAUSSIAN:
        return z
    if code == BERNOULLI:
        p = (z + 0.5) / 2.0
        return np.log(p / (1.0 - p))
    return np.log(z + 0.5)


# ----------------------------------------------------------------------
# tiny linear algebra (w is 1..3 in practice)
# ----------------------------------------------------------------------

@njit(cache=True)
def _chol_lower(A, L):
    """Lower Cholesky of A into L; returns False when a pivot fails."""
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 1e-300:
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, n):
            L[i, j] = 0.0
    return True


@njit(cache=True)
def _chol_solve_inplace(L, b):
    """Solve (L L') x = b in place of b."""
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * b[k]
        b[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * b[k]
        b[i] = s / L[i, i]


# ----------------------------------------------------------------------
# univariate filter / means smoother on the linearized model
# ----------------------------------------------------------------------

@njit(cache=True)
def _uni_filter(lam, d, T, c, Q, a1, P1, el_j, el_off, pz, ph,
                f, Kg, vel, P0, a0):
    """Sequential filter; fills per-element gains and per-time structure.

    Returns the Gaussian log-likelihood of the pseudo-observations, or NaN
    when some innovation variance collapses.
    """
    m = T.shape[0]
    w = T.shape[1]
    a = a1.copy()
    P = P1.copy()
    Pl = np.empty(w)
    loglik = 0.0
    for t in range(m):
        for i in range(w):
            a0[t, i] = a[i]
            for k in range(w):
                P0[t, i, k] = P[i, k]
        for el in range(el_off[t], el_off[t + 1]):
            j = el_j[el]
            fe = ph[el]
            for i in range(w):
                s = 0.0
                for k in range(w):
                    s += P[i, k] * lam[t, j, k]
                Pl[i] = s
                fe += lam[t, j, i] * s
            if fe < 1e-12:
                return np.nan
            ve = pz[el] - d[t, j]
            for i in range(w):
                ve -= lam[t, j, i] * a[i]
            f[el] = fe
            vel[el] = ve
            for i in range(w):
                Kg[el, i] = Pl[i] / fe
                a[i] += Kg[el, i] * ve
            for i in range(w):
                for k in range(w):
                    P[i, k] -= Pl[i] * Pl[k] / fe
            loglik += -0.5 * (_LOG_2PI + np.log(fe) + ve * ve / fe)
        # time update
        anew = np.empty(w)
        for i in range(w):
            s = c[t, i]
            for k in range(w):
                s += T[t, i, k] * a[k]
            anew[i] = s
        TP = np.empty((w, w))
        for i in range(w):
            for k in range(w):
                s = 0.0
                for l in range(w):
                    s += T[t, i, l] * P[l, k]
                TP[i, k] = s
        for i in range(w):
            for k in range(w):
                s = Q[t, i, k]
                for l in range(w):
                    s += TP[i, l] * T[t, k, l]
                P[i, k] = s
        for i in range(w):
            a[i] = anew[i]
            for k in range(i):
                sym = 0.5 * (P[i, k] + P[k, i])
                P[i, k] = sym
                P[k, i] = sym
    return loglik


@njit(cache=True)
def _uni_smooth_means(lam, T, el_j, el_off, f, Kg, vel, P0, a0, alpha_hat):
    """Backward means-only pass; alpha_hat gets E(alpha_t | panel)."""
    m = T.shape[0]
    w = T.shape[1]
    r = np.zeros(w)
    rn = np.empty(w)
    for t in range(m - 1, -1, -1):
        for el in range(el_off[t + 1] - 1, el_off[t] - 1, -1):
            j = el_j[el]
            kr = 0.0
            for i in range(w):
                kr += Kg[el, i] * r[i]
            scale = vel[el] / f[el] - kr
            for i in range(w):
                r[i] += lam[t, j, i] * scale
        for i in range(w):
            s = a0[t, i]
            for k in range(w):
                s += P0[t, i, k] * r[k]
            alpha_hat[t, i] = s
        if t > 0:
            for i in range(w):
                s = 0.0
                for k in range(w):
                    s += T[t - 1, k, i] * r[k]
                rn[i] = s
            for i in range(w):
                r[i] = rn[i]


@njit(cache=True)
def _signal(lam, d, alpha, theta):
    m, p, w = lam.shape
    for t in range(m):
        for j in range(p):
            s = d[t, j]
            for i in range(w):
                s += lam[t, j, i] * alpha[t, i]
            theta[t, j] = s


@njit(cache=True)
def _linearize_el(codes, sig2, el_t, el_j, zel, theta, pz, ph):
    for el in range(el_t.size):
        t = el_t[el]
        j = el_j[el]
        code = codes[j]
        if code == GAUSSIAN:
            pz[el] = zel[el]
            ph[el] = sig2[j]
        else:
            d1, d2 = _d1d2(code, zel[el], theta[t, j], 1.0)
            a = -1.0 / d2
            pz[el] = theta[t, j] + a * d1
            ph[el] = a


@njit(cache=True)
def _state_grad(lam, d, T, c, Q, a1, P1, el_t, el_j, zel, codes, sig2,
                alpha, g):
    """Gradient of log p(alpha, z) in the state path; False if Q/P1 singular."""
    m = T.shape[0]
    w = T.shape[1]
    for t in range(m):
        for i in range(w):
            g[t, i] = 0.0
    for el in range(el_t.size):
        t = el_t[el]
        j = el_j[el]
        th = d[t, j]
        for i in range(w):
            th += lam[t, j, i] * alpha[t, i]
        d1, _ = _d1d2(codes[j], zel[el], th, sig2[j])
        for i in range(w):
            g[t, i] += lam[t, j, i] * d1

    L = np.empty((w, w))
    b = np.empty(w)
    if not _chol_lower(P1, L):
        return False
    for i in range(w):
        b[i] = alpha[0, i] - a1[i]
    _chol_solve_inplace(L, b)
    for i in range(w):
        g[0, i] -= b[i]
    for t in range(m - 1):
        if not _chol_lower(Q[t], L):
            return False
        for i in range(w):
            s = alpha[t + 1, i] - c[t, i]
            for k in range(w):
                s -= T[t, i, k] * alpha[t, k]
            b[i] = s
        _chol_solve_inplace(L, b)
        for i in range(w):
            g[t + 1, i] -= b[i]
            for k in range(w):
                g[t, k] += T[t, i, k] * b[i]
    return True


@njit(cache=True)
def _sup_abs(g):
    mx = 0.0
    for t in range(g.shape[0]):
        for i in range(g.shape[1]):
            v = abs(g[t, i])
            if v > mx:
                mx = v
    return mx


@njit(cache=True)
def _mode_loop(lam, d, T, c, Q, a1, P1, el_t, el_j, el_off, zel,
               codes, sig2, tol, max_iter):
    """Iterated linearization to the signal mode.

    Returns (theta_hat, alpha_hat, pz, ph, f, Kg, vel, P0, a0, log_g,
    n_iter, delta, status) with status 0 = converged, 1 = budget hit but
    the last move was already below 1e-4, 2 = diverged, 3 = filter failed.
    The returned gain arrays belong to the final self-consistent pass.
    """
    m, p, w = lam.shape
    n_el = el_t.size

    theta = np.zeros((m, p))
    for el in range(n_el):
        theta[el_t[el], el_j[el]] = _init_signal(codes[el_j[el]], zel[el])

    pz = np.empty(n_el)
    ph = np.empty(n_el)
    f = np.empty(n_el)
    Kg = np.empty((n_el, w))
    vel = np.empty(n_el)
    P0 = np.empty((m, w, w))
    a0 = np.empty((m, w))
    alpha = np.empty((m, w))
    alpha_new = np.empty((m, w))
    theta_new = np.empty((m, p))
    g = np.empty((m, w))

    # initialization pass (not counted)
    _linearize_el(codes, sig2, el_t, el_j, zel, theta, pz, ph)
    log_g = _uni_filter(lam, d, T, c, Q, a1, P1, el_j, el_off, pz, ph,
                        f, Kg, vel, P0, a0)
    if np.isnan(log_g):
        return (theta, alpha, pz, ph, f, Kg, vel, P0, a0, log_g, 0, np.inf, 3)
    _uni_smooth_means(lam, T, el_j, el_off, f, Kg, vel, P0, a0, alpha)
    _signal(lam, d, alpha, theta)

    delta = np.inf
    n_iter = 0
    converged = False
    for it in range(1, max_iter + 1):
        _linearize_el(codes, sig2, el_t, el_j, zel, theta, pz, ph)
        log_g = _uni_filter(lam, d, T, c, Q, a1, P1, el_j, el_off, pz, ph,
                            f, Kg, vel, P0, a0)
        if np.isnan(log_g):
            return (theta, alpha, pz, ph, f, Kg, vel, P0, a0, log_g, it,
                    delta, 3)
        _uni_smooth_means(lam, T, el_j, el_off, f, Kg, vel, P0, a0, alpha_new)

        ok = _state_grad(lam, d, T, c, Q, a1, P1, el_t, el_j, zel, codes,
                         sig2, alpha, g)
        if ok:
            g_old = _sup_abs(g)
            for _ in range(5):
                ok2 = _state_grad(lam, d, T, c, Q, a1, P1, el_t, el_j, zel,
                                  codes, sig2, alpha_new, g)
                if not ok2:
                    break
                if _sup_abs(g) <= g_old:
                    break
                for t in range(m):
                    for i in range(w):
                        alpha_new[t, i] = 0.5 * (alpha[t, i] + alpha_new[t, i])

        _signal(lam, d, alpha_new, theta_new)
        delta = 0.0
        for t in range(m):
            for j in range(p):
                v = abs(theta_new[t, j] - theta[t, j])
                if v > delta:
                    delta = v
                theta[t, j] = theta_new[t, j]
        for t in range(m):
            for i in range(w):
                alpha[t, i] = alpha_new[t, i]
        n_iter = it
        if delta < tol:
            converged = True
            break

    status = 0
    if not converged:
        status = 2 if delta > 1e-4 else 1

    if status != 2:
        # final self-consistent pass at the accepted signal
        _linearize_el(codes, sig2, el_t, el_j, zel, theta, pz, ph)
        log_g = _uni_filter(lam, d, T, c, Q, a1, P1, el_j, el_off, pz, ph,
                            f, Kg, vel, P0, a0)
        if np.isnan(log_g):
            return (theta, alpha, pz, ph, f, Kg, vel, P0, a0, log_g,
                    n_iter, delta, 3)
        _uni_smooth_means(lam, T, el_j, el_off, f, Kg, vel, P0, a0, alpha)
        _signal(lam, d, alpha, theta)

    return (theta, alpha, pz, ph, f, Kg, vel, P0, a0, log_g, n_iter, delta,
            status)


# ----------------------------------------------------------------------
# importance-sampling evaluation with shared gains
# ----------------------------------------------------------------------

@njit(cache=True)
def _psd_factor_tiny(mat, out):
    """Lower factor with out @ out.T = mat; eigen fallback for singular PSD."""
    w = mat.shape[0]
    nonzero = False
    for i in range(w):
        for k in range(w):
            if mat[i, k] != 0.0:
                nonzero = True
    if not nonzero:
        for i in range(w):
            for k in range(w):
                out[i, k] = 0.0
        return
    if _chol_lower(mat, out):
        return
    vals, vecs = np.linalg.eigh(mat)
    for k in range(w):
        s = np.sqrt(vals[k]) if vals[k] > 0.0 else 0.0
        for i in range(w):
            out[i, k] = vecs[i, k] * s


@njit(cache=True)
def _is_eval(lam, d, T, c, Q, el_t, el_j, el_off, zel, lognorm, codes, sig2,
             pz, ph, f, Kg, P0, a0, alpha_hat, a1, P1,
             e_init, e_state, e_obs, logw):
    """Fill logw (2 * n_base) with antithetic importance log-weights."""
    n_base = e_init.shape[0]
    m, p, w = lam.shape
    S1 = np.empty((w, w))
    _psd_factor_tiny(P1, S1)
    SQ = np.empty((m, w, w))
    for t in range(m):
        _psd_factor_tiny(Q[t], SQ[t])
    x_path = np.empty((m, w))
    a_path = np.empty((m, w))
    vbuf = np.empty(el_t.size)
    x = np.empty(w)
    a = np.empty(w)
    r = np.empty(w)
    rn = np.empty(w)
    xn = np.empty(w)

    for b in range(n_base):
        # forward: simulate a path and filter its panel, means only
        for i in range(w):
            s = a1[i]
            for k in range(w):
                s += S1[i, k] * e_init[b, k]
            x[i] = s
            a[i] = a1[i]
        for t in range(m):
            for i in range(w):
                x_path[t, i] = x[i]
                a_path[t, i] = a[i]
            for el in range(el_off[t], el_off[t + 1]):
                j = el_j[el]
                ve = np.sqrt(ph[el]) * e_obs[b, t, j]
                for i in range(w):
                    ve += lam[t, j, i] * (x[i] - a[i])
                vbuf[el] = ve
                for i in range(w):
                    a[i] += Kg[el, i] * ve
            for i in range(w):
                s = c[t, i]
                sx = c[t, i]
                for k in range(w):
                    s += T[t, i, k] * a[k]
                    sx += T[t, i, k] * x[k]
                xn[i] = sx
                rn[i] = s
            for i in range(w):
                a[i] = rn[i]
                s = xn[i]
                for k in range(w):
                    s += SQ[t, i, k] * e_state[b, t, k]
                x[i] = s

        # backward means for the simulated panel
        for i in range(w):
            r[i] = 0.0
        for t in range(m - 1, -1, -1):
            for el in range(el_off[t + 1] - 1, el_off[t] - 1, -1):
                j = el_j[el]
                kr = 0.0
                for i in range(w):
                    kr += Kg[el, i] * r[i]
                scale = vbuf[el] / f[el] - kr
                for i in range(w):
                    r[i] += lam[t, j, i] * scale
            # x_path row becomes the deviation alpha_plus - alpha_hat_plus
            for i in range(w):
                s = a_path[t, i]
                for k in range(w):
                    s += P0[t, i, k] * r[k]
                x_path[t, i] -= s
            if t > 0:
                for i in range(w):
                    s = 0.0
                    for k in range(w):
                        s += T[t - 1, k, i] * r[k]
                    rn[i] = s
                for i in range(w):
                    r[i] = rn[i]

        wplus = 0.0
        wminus = 0.0
        for el in range(el_t.size):
            t = el_t[el]
            j = el_j[el]
            code = codes[j]
            if code == GAUSSIAN:
                continue
            base_th = d[t, j]
            dev_th = 0.0
            for i in range(w):
                base_th += lam[t, j, i] * alpha_hat[t, i]
                dev_th += lam[t, j, i] * x_path[t, i]
            for sgn in range(2):
                th = base_th + dev_th if sgn == 0 else base_th - dev_th
                lp = _logp(code, zel[el], th, sig2[j], lognorm[el])
                res = pz[el] - th
                lg = -0.5 * (_LOG_2PI + np.log(ph[el]) + res * res / ph[el])
                if sgn == 0:
                    wplus += lp - lg
                else:
                    wminus += lp - lg
        logw[b] = wplus
        logw[n_base + b] = wminus


# ----------------------------------------------------------------------
# python-level packing and orchestration
# ----------------------------------------------------------------------

class SubjectWork:
    """Flattened observation structure of one subject, fixed across fits.

    Holds everything that never changes with the parameters: the element
    list of observed (time, channel) pairs, the data at those elements,
    Poisson normalizing constants, channel codes, and (optionally) cached
    normals for common-random-number evaluation.
    """

    def __init__(self, z: np.ndarray, mask: np.ndarray, codes: np.ndarray):
        z = np.asarray(z, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        m, p = z.shape
        el_t, el_j = [], []
        for t in range(m):
            for j in range(p):
                if not mask[t, j]:
                    el_t.append(t)
                    el_j.append(j)
        self.m, self.p = m, p
        self.el_t = np.array(el_t, dtype=np.int64)
        self.el_j = np.array(el_j, dtype=np.int64)
        off = np.zeros(m + 1, dtype=np.int64)
        for t in el_t:
            off[t + 1] += 1
        self.el_off = np.cumsum(off).astype(np.int64)
        self.zel = z[self.el_t, self.el_j] if len(el_t) else np.empty(0)
        self.codes = np.asarray(codes, dtype=np.int64)
        from scipy.special import gammaln
        self.lognorm = np.where(self.codes[self.el_j] == POISSON,
                                -gammaln(self.zel + 1.0), 0.0)
        self._normals = {}

    def normals(self, seed_key, n_base: int, w: int, rng_factory):
        """Cached (e_init, e_state, e_obs) for one (key, size) combination."""
        key = (seed_key, n_base, w)
        if key not in self._normals:
            rng = rng_factory()
            self._normals[key] = (
                rng.standard_normal((n_base, w)),
                rng.standard_normal((n_base, self.m, w)),
                rng.standard_normal((n_base, self.m, self.p)),
            )
        return self._normals[key]


def mode_arrays(lam, d, T, c, Q, a1, P1, work: SubjectWork,
                sig2, tol: float = 1e-8, max_iter: int = 50):
    """Compiled mode finder; returns the raw kernel tuple.

    Raises ModeDiverged on status 2 and signals a failed filter (status 3)
    by a NaN log_g in the tuple, which callers treat as a rejected
    parameter point.
    """
    out = _mode_loop(lam, d, T, c, Q, a1, P1, work.el_t, work.el_j,
                     work.el_off, work.zel, work.codes, sig2,
                     float(tol), int(max_iter))
    if out[12] == 2:
        raise ModeDiverged(
            f"no convergence after {max_iter} iterations (last move {out[11]:.3e})"
        )
    return out


def subject_loglik(lam, d, T, c, Q, a1, P1, work: SubjectWork, sig2,
                   normals, tol: float = 1e-8, max_iter: int = 50,
                   ess_floor: float = 0.01):
    """Importance-sampled log-likelihood of one subject, compiled path.

    `normals` is the (e_init, e_state, e_obs) tuple; N = 2 * e_init rows.
    Returns (loglik, ess, log_g, n_iter). NaN loglik marks a failed filter
    pass (treated by the optimizer as a rejected point); DegenerateWeights
    and ModeDiverged raise as in the reference implementation.
    """
    (theta, alpha_hat, pz, ph, f, Kg, vel, P0, a0, log_g, n_iter, delta,
     status) = mode_arrays(lam, d, T, c, Q, a1, P1, work, sig2, tol, max_iter)
    if status == 3:
        return np.nan, 0.0, np.nan, n_iter

    e_init, e_state, e_obs = normals
    n_base = e_init.shape[0]
    logw = np.empty(2 * n_base)
    _is_eval(lam, d, T, c, Q, work.el_t, work.el_j, work.el_off, work.zel,
             work.lognorm, work.codes, sig2, pz, ph, f, Kg, P0, a0,
             alpha_hat, a1, P1, e_init, e_state, e_obs, logw)

    mx = float(np.max(logw))
    if not np.isfinite(mx):
        raise DegenerateWeights("all importance weights vanished")
    wsh = np.exp(logw - mx)
    s1 = float(np.sum(wsh))
    s2 = float(np.sum(wsh * wsh))
    ess = s1 * s1 / s2
    n = logw.size
    if ess < ess_floor * n:
        raise DegenerateWeights(
            f"effective sample size {ess:.1f} of {n} (poor working model)"
        )
    log_wbar = mx + float(np.log(s1)) - float(np.log(n))
    return float(log_g + log_wbar), float(ess), float(log_g), int(n_iter)
