import numpy as np
import pytest

from mrss import (
    GaussianSSM,
    collapse_gaps,
    dense_conditional_states,
    dense_joint_loglik,
    diffuse_loglik,
    gap_transition,
    kalman_filter,
    kalman_smoother,
    simulate_gssm,
)
from mrss.errors import DimensionMismatch, NonPSDInnovation

from _oracles import (
    conditional_state_moments,
    gaussian_loglik_by_stacking,
    random_system,
)


def local_level(m=1, H=1.0, Q=1.0, a1=0.0, P1=1.0):
    return GaussianSSM(lam=np.ones((1, 1)), d=np.zeros(1), T=np.eye(1),
                       c=np.zeros(1), Q=np.eye(1) * Q, H=np.eye(1) * H,
                       a1=np.array([a1]), P1=np.eye(1) * P1, m=m)


def make_model(sys):
    return GaussianSSM(lam=sys["lam"], d=sys["d"], T=sys["T"], c=sys["c"],
                       Q=sys["Q"], H=sys["H"], a1=sys["a1"], P1=sys["P1"],
                       missing=sys["mask"])


# ----------------------------------------------------------------------
# hand-checked filter values
# ----------------------------------------------------------------------

def test_local_level_zero_observation():
    out = kalman_filter(local_level(), np.array([[0.0]]))
    assert out.v[0][0] == pytest.approx(0.0, abs=1e-15)
    assert out.F[0][0, 0] == pytest.approx(2.0, abs=1e-15)
    assert out.a_filt[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert out.P_filt[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert out.a[1, 0] == pytest.approx(0.0, abs=1e-15)
    assert out.P[1, 0, 0] == pytest.approx(1.5, abs=1e-15)
    assert out.loglik == pytest.approx(-0.5 * np.log(2 * np.pi * 2.0), abs=1e-12)


def test_local_level_unit_observation():
    out = kalman_filter(local_level(), np.array([[1.0]]))
    assert out.a_filt[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert out.a[1, 0] == pytest.approx(0.5, abs=1e-15)


def test_dense_local_level_m1():
    val = dense_joint_loglik(local_level(), np.array([[0.0]]))
    assert val == pytest.approx(-0.5 * np.log(2 * np.pi * 2.0), abs=1e-12)


def test_dense_local_level_m2_hand_determinant():
    val = dense_joint_loglik(local_level(m=2), np.zeros((2, 1)))
    assert val == pytest.approx(-np.log(2 * np.pi) - 0.5 * np.log(5.0), abs=1e-12)


def test_smoother_single_step_equals_filter_update():
    model = local_level()
    filt = kalman_filter(model, np.array([[1.0]]))
    sm = kalman_smoother(model, filt)
    assert sm.alpha_hat[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert sm.V[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert np.all(sm.r[-1] == 0.0) and np.all(sm.N[-1] == 0.0)


def test_degenerate_state_law_ignores_data():
    # Q = 0, P1 = 0: the smoothed path is the deterministic recursion
    T = np.array([[0.8]])
    c = np.array([0.4])
    model = GaussianSSM(lam=np.ones((1, 1)), d=None, T=T, c=c,
                        Q=np.zeros((1, 1)), H=np.eye(1), a1=np.array([2.0]),
                        P1=np.zeros((1, 1)), m=4)
    expected = [2.0]
    for _ in range(3):
        expected.append(0.8 * expected[-1] + 0.4)
    for z_scale in (0.0, 5.0):
        z = np.full((4, 1), z_scale)
        sm = kalman_smoother(model, kalman_filter(model, z))
        np.testing.assert_allclose(sm.alpha_hat[:, 0], expected, atol=1e-12)


# ----------------------------------------------------------------------
# oracle equivalences on random instances
# ----------------------------------------------------------------------

def test_filter_matches_dense_oracle_random_instances():
    rng = np.random.default_rng(20240811)
    for k in range(25):
        m = int(rng.integers(2, 8))
        p = int(rng.integers(1, 4))
        w = int(rng.integers(1, 4))
        sys = random_system(rng, m, p, w, missing_frac=0.2 if k % 2 else 0.0)
        model = make_model(sys)
        _, z = simulate_gssm(model, rng)
        lhs = kalman_filter(model, z).loglik
        rhs = dense_joint_loglik(model, z)
        assert lhs == pytest.approx(rhs, abs=1e-8)
        # and the fully independent scipy stacking agrees too
        ind = gaussian_loglik_by_stacking(sys["lam"], sys["d"], sys["T"], sys["c"],
                                          sys["Q"], sys["H"], sys["a1"], sys["P1"],
                                          z, sys["mask"])
        assert lhs == pytest.approx(ind, abs=1e-8)


def test_smoother_matches_dense_conditioning():
    rng = np.random.default_rng(7181)
    for k in range(12):
        m = int(rng.integers(2, 6))
        p = int(rng.integers(1, 4))
        w = int(rng.integers(1, 3))
        sys = random_system(rng, m, p, w, missing_frac=0.15 if k % 2 else 0.0)
        model = make_model(sys)
        _, z = simulate_gssm(model, rng)
        sm = kalman_smoother(model, kalman_filter(model, z))
        mean, cov = conditional_state_moments(
            sys["lam"], sys["d"], sys["T"], sys["c"], sys["Q"], sys["H"],
            sys["a1"], sys["P1"], z, sys["mask"])
        for t in range(m):
            np.testing.assert_allclose(sm.alpha_hat[t], mean[t * w:(t + 1) * w],
                                       atol=1e-8)
            np.testing.assert_allclose(sm.V[t],
                                       cov[t * w:(t + 1) * w, t * w:(t + 1) * w],
                                       atol=1e-8)
        # the package's own dense conditioning agrees as well
        mean2, cov2 = dense_conditional_states(model, z)
        np.testing.assert_allclose(mean2[:m * w], mean, atol=1e-8)
        np.testing.assert_allclose(cov2[:m * w, :m * w], cov, atol=1e-8)


def test_likelihood_invariant_under_channel_permutation():
    rng = np.random.default_rng(99)
    sys = random_system(rng, 6, 3, 2)
    model = make_model(sys)
    _, z = simulate_gssm(model, rng)
    base = kalman_filter(model, z).loglik
    perm = np.array([2, 0, 1])
    permuted = GaussianSSM(
        lam=sys["lam"][:, perm, :], d=sys["d"][:, perm], T=sys["T"], c=sys["c"],
        Q=sys["Q"], H=sys["H"][np.ix_(perm, perm)], a1=sys["a1"], P1=sys["P1"],
        missing=sys["mask"][:, perm])
    assert kalman_filter(permuted, z[:, perm]).loglik == pytest.approx(base, abs=1e-10)


def test_covariance_outputs_symmetric_and_psd():
    rng = np.random.default_rng(4242)
    sys = random_system(rng, 8, 3, 2, missing_frac=0.25)
    model = make_model(sys)
    _, z = simulate_gssm(model, rng)
    filt = kalman_filter(model, z)
    sm = kalman_smoother(model, filt)
    for arr in (filt.P, filt.P_filt, sm.V):
        for M in arr:
            assert np.max(np.abs(M - M.T)) <= 1e-12
            assert np.min(np.linalg.eigvalsh(M)) >= -1e-8
    # V_t <= P_t in the Loewner order
    for t in range(model.m):
        assert np.min(np.linalg.eigvalsh(filt.P[t] - sm.V[t])) >= -1e-8


# ----------------------------------------------------------------------
# missing data and gaps
# ----------------------------------------------------------------------

def test_fully_missing_time_point_skips_update():
    model = local_level(m=3)
    z = np.array([[0.5], [np.nan], [0.3]])
    filt = kalman_filter(model, z)
    assert filt.v[1].size == 0
    np.testing.assert_allclose(filt.a_filt[1], filt.a[1], atol=0)
    np.testing.assert_allclose(filt.P_filt[1], filt.P[1], atol=0)
    # likelihood = dense value on the observed rows only
    assert filt.loglik == pytest.approx(dense_joint_loglik(model, z), abs=1e-10)


def test_gap_transition_scalar_hand_values():
    T, c, Q = gap_transition(0.5, 1.0, 1.0, tau=1)
    assert T == pytest.approx(0.25, abs=1e-15)
    assert c == pytest.approx(1.5, abs=1e-15)
    assert Q == pytest.approx(1.25, abs=1e-15)


def test_gap_transition_tau_zero_identity():
    T, c, Q = gap_transition(0.5, 1.0, 2.0, tau=0)
    assert (T, c, Q) == (0.5, 1.0, 2.0)


def test_gap_transition_matches_iterated_moments():
    rng = np.random.default_rng(11)
    T = np.diag(rng.uniform(-0.8, 0.8, size=2))
    c = rng.normal(size=2)
    B = rng.normal(size=(2, 2))
    Q = B @ B.T + 0.1 * np.eye(2)
    tau = 3
    Ts, cs, Qs = gap_transition(T, c, Q, tau)
    # iterate one-step moment propagation tau+1 times
    mean = np.zeros(2)
    cov = np.zeros((2, 2))
    x0 = rng.normal(size=2)
    mean, cov = x0.copy(), np.zeros((2, 2))
    for _ in range(tau + 1):
        mean = T @ mean + c
        cov = T @ cov @ T.T + Q
    np.testing.assert_allclose(Ts @ x0 + cs, mean, atol=1e-12)
    np.testing.assert_allclose(Qs, cov, atol=1e-12)


def test_gap_equivalence_on_ragged_panel():
    rng = np.random.default_rng(321)
    w, p = 2, 3
    sysm = random_system(rng, 1, p, w)
    T, c, Q = sysm["T"][0], sysm["c"][0], sysm["Q"][0]
    times = np.array([1, 2, 5, 6, 10])
    m = times.size
    lam = rng.normal(size=(m, p, w))
    d = rng.normal(size=(m, p))

    Ts, cs, Qs = collapse_gaps(times, T, c, Q)
    gap_model = GaussianSSM(lam=lam, d=d, T=Ts, c=cs, Q=Qs, H=sysm["H"],
                            a1=sysm["a1"], P1=sysm["P1"])
    _, z = simulate_gssm(gap_model, rng)

    # full-grid model with skipped times marked entirely missing
    full_m = int(times[-1])
    lam_full = np.zeros((full_m, p, w))
    d_full = np.zeros((full_m, p))
    z_full = np.full((full_m, p), np.nan)
    for i, t in enumerate(times):
        lam_full[t - 1] = lam[i]
        d_full[t - 1] = d[i]
        z_full[t - 1] = z[i]
    full_model = GaussianSSM(lam=lam_full, d=d_full, T=T, c=c, Q=Q, H=sysm["H"],
                             a1=sysm["a1"], P1=sysm["P1"])
    assert kalman_filter(gap_model, z).loglik == pytest.approx(
        kalman_filter(full_model, z_full).loglik, abs=1e-10)


# ----------------------------------------------------------------------
# diffuse initialization
# ----------------------------------------------------------------------

def test_diffuse_with_no_diffuse_states_is_plain_loglik():
    model = local_level(m=3)
    z = np.array([[0.1], [0.4], [-0.2]])
    assert diffuse_loglik(model, z, mask=np.array([False])) == pytest.approx(
        kalman_filter(model, z).loglik, abs=0)


def test_diffuse_stable_in_kappa():
    model = local_level(m=4)
    z = np.array([[1.0], [2.0], [1.5], [1.8]])
    v7 = diffuse_loglik(model, z, kappa=1e7)
    v8 = diffuse_loglik(model, z, kappa=1e8)
    assert v7 == pytest.approx(v8, abs=1e-4)


def test_diffuse_local_level_matches_conditioning_on_first_point():
    # for the local level, the kappa-corrected diffuse likelihood converges to
    # -log(2 pi)/2 plus the likelihood of z_2.. given z_1, with the filter
    # restarted at a2 = z1, P2 = H + Q (the first innovation absorbs the
    # diffuse state: F1 = kappa + O(1), so log F1 - log kappa -> 0 and
    # v1^2 / F1 -> 0)
    H, Q = 1.0, 1.0
    z = np.array([[1.0], [2.0]])
    model = local_level(m=2, H=H, Q=Q)
    got = diffuse_loglik(model, z, kappa=1e7)
    cond = GaussianSSM(lam=np.ones((1, 1)), d=None, T=np.eye(1), c=None,
                       Q=np.eye(1) * Q, H=np.eye(1) * H, a1=np.array([z[0, 0]]),
                       P1=np.eye(1) * (H + Q), m=1)
    want = -0.5 * np.log(2 * np.pi) + kalman_filter(cond, z[1:]).loglik
    assert got == pytest.approx(want, abs=1e-4)


# ----------------------------------------------------------------------
# validation and error paths
# ----------------------------------------------------------------------

def test_dimension_mismatch_raises():
    model = local_level(m=2)
    with pytest.raises(DimensionMismatch):
        kalman_filter(model, np.zeros((3, 1)))
    with pytest.raises(DimensionMismatch):
        GaussianSSM(lam=np.ones((1, 1)), d=np.zeros(2), T=np.eye(1), c=None,
                    Q=np.eye(1), H=np.eye(1), a1=np.zeros(1), P1=np.eye(1), m=2)


def test_non_psd_inputs_rejected():
    with pytest.raises(DimensionMismatch):
        GaussianSSM(lam=np.ones((1, 1)), d=None, T=np.eye(1), c=None,
                    Q=-np.eye(1), H=np.eye(1), a1=np.zeros(1), P1=np.eye(1), m=1)


def test_degenerate_innovation_raises():
    # H = 0 and P1 = 0 make F_1 exactly singular
    model = GaussianSSM(lam=np.ones((1, 1)), d=None, T=np.eye(1), c=None,
                        Q=np.eye(1), H=np.zeros((1, 1)), a1=np.zeros(1),
                        P1=np.zeros((1, 1)), m=1)
    with pytest.raises(NonPSDInnovation):
        kalman_filter(model, np.array([[0.0]]))


def test_time_varying_observation_variance_matches_full_grid():
    # per-time diagonal H equals a pair of constant-H models run on the
    # subpanels where each variance regime applies
    rng = np.random.default_rng(808)
    m, w = 4, 1
    lam = np.ones((m, 1, w))
    hvar = np.array([[1.0], [4.0], [1.0], [9.0]])
    model = GaussianSSM(lam=lam, d=None, T=np.eye(w) * 0.7, c=None,
                        Q=np.eye(w), H=hvar, a1=np.zeros(w), P1=np.eye(w))
    assert model.H.shape == (m, 1, 1)
    _, z = simulate_gssm(model, rng)
    assert kalman_filter(model, z).loglik == pytest.approx(
        dense_joint_loglik(model, z), abs=1e-10)


def test_time_varying_transition_against_oracle():
    rng = np.random.default_rng(5150)
    m, p, w = 5, 2, 2
    sys = random_system(rng, m, p, w)
    # overwrite with genuinely per-step transitions
    sys["T"] = rng.uniform(-0.6, 0.6, size=(m, w, w))
    sys["c"] = rng.normal(size=(m, w))
    Qs = rng.normal(size=(m, w, w))
    sys["Q"] = np.einsum("tij,tkj->tik", Qs, Qs) + 0.2 * np.eye(w)
    model = make_model(sys)
    _, z = simulate_gssm(model, rng)
    assert kalman_filter(model, z).loglik == pytest.approx(
        gaussian_loglik_by_stacking(sys["lam"], sys["d"], sys["T"], sys["c"],
                                    sys["Q"], sys["H"], sys["a1"], sys["P1"],
                                    z, sys["mask"]), abs=1e-8)
