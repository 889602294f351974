import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qfc.hilbert import (
    SIGMA_MINUS,
    SIGMA_X,
    SIGMA_Z,
    PositivityError,
    density_violations,
    expectation_real,
    ladder_operators,
    maximally_mixed,
    projector,
    purity,
    random_density_matrix,
    random_hermitian,
    trace_distance,
)
from qfc.sme import (
    MeasurementRecord,
    SmeConfig,
    TrajectoryState,
    WienerStream,
    dissipator,
    ensemble_increments,
    innovation_superop,
    lindblad_solve,
    measurement_update,
    run_ensemble,
    run_sse_trajectory,
    run_trajectory,
    sample_current,
    sme_step,
    sme_update,
)

UP = projector(np.array([1, 0], dtype=complex))
DOWN = projector(np.array([0, 1], dtype=complex))
PLUS = projector(np.array([1, 1], dtype=complex))
QUBIT_H = 0.05 * SIGMA_Z + 0.5 * SIGMA_X

seeds = st.integers(min_value=0, max_value=2**32 - 1)


# ---------------------------------------------------------------- config and noise


def test_config_defaults_and_validation():
    cfg = SmeConfig(kappa=2.0)
    assert cfg.dt == pytest.approx(5e-4)
    assert cfg.replace(kappa=4.0).dt == pytest.approx(2.5e-4)
    assert cfg.replace(kappa=4.0, dt=1e-3).dt == 1e-3
    for bad in (dict(kappa=0.0), dict(kappa=1.0, eta=0.0), dict(kappa=1.0, eta=1.5), dict(kappa=1.0, dt=-1.0)):
        with pytest.raises(ValueError):
            SmeConfig(**bad)
    with pytest.raises(ValueError):
        SmeConfig(kappa=1.0, scheme="rk4")
    with pytest.warns(RuntimeWarning, match="stability"):
        SmeConfig(kappa=1.0, dt=0.1)


def test_wiener_increment_statistics():
    dt = 1e-3
    dW = WienerStream(11, 0, dt).take(10**6)
    n = len(dW)
    assert abs(dW.mean()) <= 4 * np.sqrt(dt / n)
    assert dW.var() == pytest.approx(dt, rel=0.01)


def test_wiener_stream_chunking_and_indices():
    a = WienerStream(3, 7, 0.1).take(10000)
    s = WienerStream(3, 7, 0.1)
    b = np.concatenate([s.take(1), s.take(4999), s.take(5000)])
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a[:10], WienerStream(3, 8, 0.1).take(10))
    e = ensemble_increments(3, [7, 8], 100, 0.1)
    assert e.shape == (100, 2)
    np.testing.assert_array_equal(e[:, 0], a[:100])
    assert WienerStream(0, 0, 1.0, channels=3).take(5).shape == (5, 3)


# ---------------------------------------------------------------- superoperators


def test_dissipator_examples():
    np.testing.assert_allclose(dissipator(SIGMA_Z, UP), 0, atol=1e-15)
    np.testing.assert_allclose(dissipator(SIGMA_MINUS, DOWN), np.diag([1, -1]), atol=1e-15)


def test_innovation_examples():
    np.testing.assert_allclose(innovation_superop(SIGMA_Z, UP), 0, atol=1e-15)
    np.testing.assert_allclose(innovation_superop(SIGMA_Z, PLUS), SIGMA_Z, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(min_value=2, max_value=16))
def test_superoperators_are_traceless(seed, d):
    rng = np.random.default_rng(seed)
    A, rho = random_hermitian(d, rng), random_density_matrix(d, rng)
    assert abs(np.trace(dissipator(A, rho))) <= 1e-10
    assert abs(np.trace(innovation_superop(A, rho))) <= 1e-10
    # D is also traceless for non-Hermitian jump operators
    L = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    assert abs(np.trace(dissipator(L, rho))) <= 1e-10


def test_lindblad_solution_decay():
    # amplitude damping from the excited state: population e^{-gamma t}
    out = lindblad_solve(DOWN, np.zeros((2, 2)), [(SIGMA_MINUS, 0.5)], [0.0, 1.0, 2.0])
    np.testing.assert_allclose(out[:, 1, 1].real, np.exp(-0.5 * np.array([0.0, 1.0, 2.0])), atol=1e-12)


# ---------------------------------------------------------------- single steps


@pytest.mark.parametrize("scheme", ["kraus", "euler"])
def test_zero_step_is_identity(scheme):
    rho = random_density_matrix(3, np.random.default_rng(0))
    H = random_hermitian(3, np.random.default_rng(1))
    A = random_hermitian(3, np.random.default_rng(2))
    cfg = SmeConfig(kappa=1.0, dt=1e-300, scheme=scheme)
    out = sme_step(TrajectoryState(rho), H, A, cfg, 0.0)
    np.testing.assert_allclose(out.rho, rho, atol=1e-14)


@pytest.mark.parametrize("scheme", ["kraus", "euler"])
@pytest.mark.parametrize("dW", [-0.3, 0.0, 0.05, 2.0])
def test_measurement_eigenstate_is_fixed(scheme, dW):
    cfg = SmeConfig(kappa=1.0, scheme=scheme)
    np.testing.assert_allclose(sme_update(UP, None, SIGMA_Z, cfg, dW), UP, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(min_value=2, max_value=6), st.floats(min_value=0.1, max_value=1.0))
def test_kraus_step_keeps_density_invariants(seed, d, eta):
    rng = np.random.default_rng(seed)
    rho = random_density_matrix(d, rng)
    cfg = SmeConfig(kappa=1.0, eta=eta, dt=1e-2, extra_dissipators=[(rng.normal(size=(d, d)) + 0j, 0.3)])
    for _ in range(20):
        rho = sme_update(rho, random_hermitian(d, rng), random_hermitian(d, rng), cfg, rng.normal() * 0.1)
        assert density_violations(rho) == []
        assert np.min(np.linalg.eigvalsh(rho)) >= -1e-8


def test_kraus_matches_euler_to_first_order():
    rng = np.random.default_rng(5)
    rho = random_density_matrix(3, rng)
    H, A = random_hermitian(3, rng), random_hermitian(3, rng)
    gaps = []
    for dt in (1e-3, 1e-4):
        dW = 0.7 * np.sqrt(dt)
        k = sme_update(rho, H, A, SmeConfig(kappa=1.0, eta=0.6, dt=dt), dW)
        e = sme_update(rho, H, A, SmeConfig(kappa=1.0, eta=0.6, dt=dt, scheme="euler"), dW)
        gaps.append(np.max(np.abs(k - e)))
    # per-step disagreement is O(dt), so a tenfold smaller step shrinks it about tenfold
    assert gaps[1] < gaps[0] / 5


def test_kraus_step_contractive_for_large_operator_norm():
    # kappa dt |A|^2 >> 1 for A = x^2 on a large truncation
    a, ad = ladder_operators(60)
    x = (a + ad) / np.sqrt(2)
    A = x @ x
    cfg = SmeConfig(kappa=0.05, dt=0.02)
    rho = projector(np.eye(60)[0])
    rng = np.random.default_rng(0)
    for _ in range(200):
        rho = sme_update(rho, None, A, cfg, rng.normal() * np.sqrt(cfg.dt))
    assert density_violations(rho) == []
    assert purity(rho) == pytest.approx(1.0, abs=1e-8)


def test_euler_aborts_on_large_negative_eigenvalue():
    cfg = SmeConfig(kappa=1.0, dt=0.01, scheme="euler")
    rho = np.diag([0.999, 0.001]).astype(complex)
    with pytest.raises(PositivityError):
        sme_update(rho, None, SIGMA_Z, cfg, 5.0)


def test_noise_shape_checked():
    with pytest.raises(ValueError):
        measurement_update(UP, None, [(SIGMA_Z, 1.0, 1.0)], 1e-3, np.zeros(3))


def test_batched_step_matches_loop():
    rng = np.random.default_rng(8)
    rhos = np.array([random_density_matrix(3, rng) for _ in range(4)])
    Hs = np.array([random_hermitian(3, rng) for _ in range(4)])
    A = random_hermitian(3, rng)
    dW = rng.normal(size=4) * 0.03
    lower = np.diag([1.0, 1.0], k=1).astype(complex)
    cfg = SmeConfig(kappa=0.7, eta=0.5, dt=1e-3, extra_dissipators=[(lower, 0.1)])
    batched = sme_update(rhos, Hs, A, cfg, dW)
    for b in range(4):
        np.testing.assert_allclose(batched[b], sme_update(rhos[b], Hs[b], A, cfg, dW[b]), atol=1e-14)


def test_non_hermitian_channel_uses_first_order_map():
    cfg = SmeConfig(kappa=1.0, dt=1e-3)
    rho = random_density_matrix(2, np.random.default_rng(2))
    # with dW^2 = dt the two maps agree beyond first order
    dW = np.sqrt(cfg.dt)
    out = sme_update(rho, None, SIGMA_MINUS, cfg, dW)
    ref = sme_update(rho, None, SIGMA_MINUS, cfg.replace(scheme="euler"), dW)
    assert density_violations(out) == []
    assert np.max(np.abs(out - ref)) < 1e-4


# ---------------------------------------------------------------- currents and trajectories


def test_sample_current_examples():
    rho = np.diag([0.75, 0.25]).astype(complex)  # <sigma_z> = 0.5
    assert sample_current(rho, SIGMA_Z, SmeConfig(kappa=1.0), 0.0) == pytest.approx(0.5)
    with pytest.warns(RuntimeWarning):
        huge = SmeConfig(kappa=1e12, dt=1e-3)
    big = sample_current(rho, SIGMA_Z, huge, 0.01)
    assert big == pytest.approx(0.5, abs=1e-5)


def test_current_noise_is_zero_mean():
    cfg = SmeConfig(kappa=1.0, seed=2)
    n = 10**5
    dW = WienerStream(2, 0, cfg.dt).take(n)
    excess = np.array([sample_current(UP, SIGMA_Z, cfg, w) for w in dW[:1000]]) - 1.0
    # the same map applied to the whole stream, vectorised
    excess_all = dW / (cfg.dt * np.sqrt(4 * cfg.kappa * cfg.eta))
    np.testing.assert_allclose(excess, excess_all[:1000], rtol=1e-12)
    assert abs(excess_all.mean()) <= 4 * excess_all.std() / np.sqrt(n)


def test_trajectory_counting_and_determinism():
    cfg = SmeConfig(kappa=1.0, seed=9)
    hist, rec = run_trajectory(QUBIT_H, SIGMA_Z, PLUS, cfg, 100)
    assert len(hist) == 101 and len(rec) == 100
    _, rec2 = run_trajectory(QUBIT_H, SIGMA_Z, PLUS, cfg, 100)
    np.testing.assert_array_equal(rec.currents, rec2.currents)
    hist3, _ = run_trajectory(QUBIT_H, SIGMA_Z, PLUS, cfg, 100, stride=10)
    assert len(hist3) == 11
    np.testing.assert_array_equal(hist3[-1].rho, hist[-1].rho)
    with pytest.raises(ValueError):
        run_trajectory(QUBIT_H, SIGMA_Z, PLUS, cfg, 0)


def test_trajectory_with_controller_callback():
    cfg = SmeConfig(kappa=1.0, seed=1)
    seen = []

    def controller(t, rho):
        seen.append(t)
        return 0.0

    def H_builder(t, u):
        return QUBIT_H + u * SIGMA_X

    hist, _ = run_trajectory(H_builder, SIGMA_Z, UP, cfg, 5, controller=controller)
    ref, _ = run_trajectory(QUBIT_H, SIGMA_Z, UP, cfg, 5)
    np.testing.assert_allclose(seen, np.arange(5) * cfg.dt)
    np.testing.assert_allclose(hist[-1].rho, ref[-1].rho, atol=1e-15)


def test_measurement_collapses_mixed_state():
    cfg = SmeConfig(kappa=1.0, seed=21, dt=2e-3)
    n = int(10 / cfg.kappa / cfg.dt)
    _, _, rho = run_ensemble(None, SIGMA_Z, maximally_mixed(2), cfg, n, 200)
    assert np.mean(purity(rho) >= 0.99) >= 0.95


def test_pure_states_stay_pure_under_efficient_measurement():
    cfg = SmeConfig(kappa=1.0, seed=4)
    hist, _ = run_trajectory(None, SIGMA_Z, PLUS, cfg, 2000)
    p = np.array([purity(s.rho) for s in hist])
    assert np.all(np.abs(p - 1.0) <= 1e-10)


def test_mean_purity_non_decreasing_for_mixed_start():
    # per trajectory the purity can dip; its ensemble mean cannot
    cfg = SmeConfig(kappa=1.0, seed=6)
    rho = np.broadcast_to(np.diag([0.8, 0.2]).astype(complex), (4000, 2, 2)).copy()
    dW = ensemble_increments(6, range(4000), 2000, cfg.dt)
    means = [purity(rho).mean()]
    for k in range(2000):
        rho = sme_update(rho, None, SIGMA_Z, cfg, dW[k])
        if (k + 1) % 200 == 0:
            means.append(purity(rho).mean())
    assert np.all(np.diff(means) >= -3 * 0.5 / np.sqrt(4000))
    assert means[-1] > means[0]


def test_step_size_convergence_ratio():
    """Halving dt roughly halves the strong error against a dt/8 reference."""
    dt0, T, B = 0.02, 2.0, 200
    n_fine = int(T / dt0) * 8
    fine = np.stack([WienerStream(5, i, dt0 / 8).take(n_fine) for i in range(B)], axis=1)
    rho0 = np.broadcast_to(UP, (B, 2, 2)).copy()

    def final_mean(factor):
        dt = dt0 / 8 * factor
        inc = fine.reshape(-1, factor, B).sum(axis=1)  # Brownian increments on the coarse grid
        rho = rho0.copy()
        for k in range(len(inc)):
            rho = measurement_update(rho, QUBIT_H, [(SIGMA_Z, 1.0, 1.0)], dt, inc[k])
        return expectation_real(SIGMA_X, rho)

    ref = final_mean(1)
    err_dt = np.mean(np.abs(final_mean(8) - ref))
    err_half = np.mean(np.abs(final_mean(4) - ref))
    assert 1.5 <= err_dt / err_half <= 3.0


def test_ensemble_matches_lindblad_loosely():
    # 4 standard errors at 400 trajectories
    cfg = SmeConfig(kappa=1.0, seed=3, dt=2e-3)
    t, vals, _ = run_ensemble(QUBIT_H, SIGMA_Z, UP, cfg, 1000, 400, {"z": SIGMA_Z}, stride=100)
    exact = lindblad_solve(UP, QUBIT_H, [(SIGMA_Z, 1.0)], t)
    ez = np.array([expectation_real(SIGMA_Z, r) for r in exact])
    assert np.max(np.abs(vals["z"].mean(axis=1) - ez)) <= 4 / np.sqrt(400)


def test_run_ensemble_member_equals_single_trajectory():
    cfg = SmeConfig(kappa=1.0, seed=12)
    _, _, rho = run_ensemble(QUBIT_H, SIGMA_Z, UP, cfg, 50, 3, first_index=4)
    hist, _ = run_trajectory(QUBIT_H, SIGMA_Z, UP, cfg, 50, index=5)
    np.testing.assert_allclose(rho[1], hist[-1].rho, atol=1e-14)


# ---------------------------------------------------------------- pure-state cross-check


def test_sse_agrees_with_sme():
    cfg = SmeConfig(kappa=1.0, dt=1e-4, seed=0)
    psi0 = np.array([1, 1j]) / np.sqrt(2)
    hist, _ = run_trajectory(QUBIT_H, SIGMA_Z, projector(psi0), cfg, 1000)
    psis = run_sse_trajectory(QUBIT_H, SIGMA_Z, psi0, cfg, 1000)
    assert max(trace_distance(h.rho, projector(p)) for h, p in zip(hist, psis)) <= 1e-3


def test_sse_eigenstate_and_norm():
    cfg = SmeConfig(kappa=1.0, seed=1)
    psis = run_sse_trajectory(None, SIGMA_Z, np.array([1, 0], dtype=complex), cfg, 100)
    for p in psis:
        np.testing.assert_allclose(p, [1, 0], atol=1e-15)
    psis = run_sse_trajectory(QUBIT_H, SIGMA_Z, np.array([0.6, 0.8j]), cfg, 500)
    assert max(abs(np.linalg.norm(p) - 1) for p in psis) <= 1e-12
    with pytest.raises(ValueError):
        run_sse_trajectory(None, SIGMA_Z, np.array([1, 0]), cfg.replace(eta=0.5), 1)


# ---------------------------------------------------------------- records


def test_record_csv_round_trip(tmp_path):
    rec = MeasurementRecord(np.arange(5) * 0.1, np.linspace(-1, 1, 5), 1.0, 1.0, 0.1)
    rec.write_csv(tmp_path / "r.csv")
    back = MeasurementRecord.read_csv(tmp_path / "r.csv", 1.0, 1.0)
    np.testing.assert_array_equal(back.currents, rec.currents)
    assert back.dt == pytest.approx(0.1)
    multi = MeasurementRecord(np.arange(3) * 0.1, np.ones((3, 2)), 1.0, 1.0, 0.1)
    multi.write_csv(tmp_path / "m.csv")
    assert MeasurementRecord.read_csv(tmp_path / "m.csv", 1.0, 1.0).channels == 2
    assert multi.truncated(1).columns() == ["t", "current_0", "current_1"]


def test_record_validation():
    with pytest.raises(ValueError):
        MeasurementRecord(np.arange(3) * 0.1, np.zeros(2), 1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        MeasurementRecord(np.array([0.0, 0.1, 0.3]), np.zeros(3), 1.0, 1.0, 0.1)
