import numpy as np
import pytest

from qfc import scenarios
from qfc.controllers import (
    DampingLaw,
    HysteresisState,
    PolicyLaw,
    Region,
    TwoQubitLaw,
    apply_unitary,
    damping_feedback,
    make_law,
    next_region,
    parametric_policy,
    reset_controller,
    two_qubit_controls,
)
from qfc.hilbert import (
    SIGMA_Z,
    coherent_state,
    fock_state,
    kron,
    purity,
    projector,
    quadratures,
    random_density_matrix,
)
from qfc.protocol import run_protocol

RHO_A = scenarios.bell_target("antisymmetric")
RHO_S = scenarios.bell_target("symmetric")


def test_damping_feedback_examples():
    x, p = quadratures(20)
    vac = projector(fock_state(20, 0))
    np.testing.assert_allclose(damping_feedback(vac, x, p), 0.0, atol=1e-15)
    # a coherent state with <x> = 1 (alpha real, x = (a + a^dag)/sqrt2)
    rho = projector(coherent_state(20, 1 / np.sqrt(2)))
    np.testing.assert_allclose(damping_feedback(rho, x, p), -p, atol=1e-10)


def test_damping_feedback_is_hermitian():
    x, p = quadratures(12)
    rho = random_density_matrix(12, np.random.default_rng(0))
    F = damping_feedback(rho, x, p)
    np.testing.assert_allclose(F, F.conj().T, atol=1e-14)


def test_two_qubit_on_target_is_pure_rotation():
    u1, u2, h = two_qubit_controls(RHO_A, "antisymmetric", 0.2, HysteresisState())
    assert (u1, u2) == pytest.approx((1.0, 1.0), abs=1e-14)
    assert h.last_region == Region.ABOVE_GAMMA
    # sigma_y1 + sigma_y2 is a total-spin generator; the singlet is invariant
    gen = u1 * kron(np.array([[0, -1j], [1j, 0]]), np.eye(2)) + u2 * kron(np.eye(2), np.array([[0, -1j], [1j, 0]]))
    np.testing.assert_allclose(gen @ RHO_A - RHO_A @ gen, 0.0, atol=1e-14)


def test_two_qubit_below_half_gamma_is_constant():
    gamma = 0.2
    # a state with Tr[rho rho_a] = gamma / 4
    rho = (gamma / 4) * RHO_A + (1 - gamma / 4) * RHO_S
    assert np.trace(rho @ RHO_A).real == pytest.approx(gamma / 4)
    for h in Region:
        u1, u2, new = two_qubit_controls(rho, "antisymmetric", gamma, HysteresisState(h))
        assert (u1, u2) == (1.0, 0.0)
        assert new.last_region == Region.BELOW_HALF_GAMMA


def test_two_qubit_band_depends_on_entry():
    gamma = 0.2
    rho = 0.15 * RHO_A + 0.85 * RHO_S
    u1, u2, h = two_qubit_controls(rho, "antisymmetric", gamma, HysteresisState(Region.BELOW_HALF_GAMMA))
    assert (u1, u2) == (1.0, 0.0) and h.last_region == Region.IN_BAND_FROM_BELOW
    u1, u2, h = two_qubit_controls(rho, "antisymmetric", gamma, HysteresisState(Region.ABOVE_GAMMA))
    assert h.last_region == Region.IN_BAND_FROM_ABOVE
    assert u2 == pytest.approx(1.0)  # rho commutes with the local sigma_y terms here


def test_hysteresis_holds_inside_band():
    rng = np.random.default_rng(1)
    for start in (Region.IN_BAND_FROM_ABOVE, Region.IN_BAND_FROM_BELOW):
        r = start
        for ov in rng.uniform(0.1 + 1e-9, 0.2 - 1e-9, size=200):
            r = next_region(r, ov, 0.2)
            assert r == start
    regions = next_region(np.array([0, 3, 1, 2]), np.array([0.15, 0.15, 0.5, 0.05]), 0.2)
    np.testing.assert_array_equal(regions, [1, 2, 0, 3])


def test_two_qubit_input_checks():
    with pytest.raises(ValueError):
        two_qubit_controls(np.eye(2) / 2, "antisymmetric", 0.2, HysteresisState())
    with pytest.raises(ValueError):
        two_qubit_controls(RHO_A, "antisymmetric", 1.0, HysteresisState())


def test_batched_two_qubit_law_matches_scalar():
    rng = np.random.default_rng(2)
    spec = scenarios.build("two_qubit")
    rhos = np.array([random_density_matrix(4, rng) for _ in range(6)] + [RHO_A])
    law = TwoQubitLaw(target="antisymmetric", gamma=0.2)
    law.reset(len(rhos))
    u = law.controls(rhos, spec, np.ones(len(rhos), dtype=bool))
    for b, rho in enumerate(rhos):
        u1, u2, _ = two_qubit_controls(rho, "antisymmetric", 0.2, HysteresisState())
        np.testing.assert_allclose(u[b], [u1, u2], atol=1e-14)
    inactive = law.controls(rhos, spec, np.zeros(len(rhos), dtype=bool))
    assert not inactive.any()


def test_reset_controller():
    spec = scenarios.build("cqed", {"n_fock": 4})
    sz = spec.ops["sigma_z"]
    ground, excited = np.array([1, 0]), np.array([0, 1])
    vac = fock_state(4, 0)

    def qubit_state(c_g):
        psi = np.sqrt(c_g) * ground + np.sqrt(1 - c_g) * excited
        return projector(np.kron(psi, vac))

    assert reset_controller(qubit_state(0.975), sz) is None  # <sz> = +0.95
    rho = qubit_state(0.025)  # <sz> = -0.95
    U = reset_controller(rho, sz)
    assert U is not None
    # the pulse is applied to the true state, here fully excited
    truth = qubit_state(1e-3)
    after = apply_unitary(U, truth)
    assert np.trace(spec.ops["ground_projector"] @ after).real >= 0.99
    assert np.trace(after).real == pytest.approx(1.0, abs=1e-12)
    assert purity(after) == pytest.approx(purity(truth), abs=1e-12)
    assert reset_controller(projector(np.kron(excited, vac)), sz, trigger=-1.1) is None


def test_parametric_policy_examples():
    obs = np.array([0.3, -0.2, 0.5, 1.1])
    assert parametric_policy(obs, np.zeros(5), [1.0]) == pytest.approx(0.0)
    w = np.array([1.0, 0, 0, 0, 0])
    assert parametric_policy(obs, w, [1.0]) == pytest.approx(np.tanh(0.3))
    # two controls, bias last in each row
    w2 = np.array([[0, 0, 0, 0, 0.5], [0, 2, 0, 0, 0]]).ravel()
    np.testing.assert_allclose(parametric_policy(obs, w2, [2.0, 3.0]), [2 * np.tanh(0.5), 3 * np.tanh(-0.4)])
    with pytest.raises(ValueError):
        parametric_policy(obs, np.zeros(4), [1.0])


def test_parametric_policy_batches_weights():
    rng = np.random.default_rng(3)
    obs = rng.normal(size=(5, 4))
    W = rng.normal(size=(5, 10))
    batch = parametric_policy(obs, W, [1.0, 2.0])
    for b in range(5):
        np.testing.assert_allclose(batch[b], parametric_policy(obs[b], W[b], [1.0, 2.0]))


def test_linear_policy_reproduces_damping():
    # with a wide bound, bound * tanh(-<x>/bound) is -<x> to within 1e-3 relative
    bound = 50.0
    spec = scenarios.build("qho", {"gain_bound": bound})
    n_op = {"n": spec.ops["n"]}
    kw = dict(horizon=20.0, stages="closed_loop_from_t0", rho_e0="matched", observables=n_op, stride=10)
    damp = run_protocol(spec, law=DampingLaw(), **kw)
    w = np.array([-1.0 / bound, 0, 0, 0, 0])
    pol = run_protocol(spec, law=PolicyLaw(w), **kw)
    n_d, n_p = damp.series["n"][:, 0], pol.series["n"][:, 0]
    assert n_d[-1] < 0.2 * n_d[0]
    assert np.max(np.abs(n_p - n_d)) <= 0.05 * n_d[0]


def test_make_law():
    assert make_law("two_qubit_sym").target == "symmetric"
    assert make_law("damping", gain=2.0).gain == 2.0
    with pytest.raises(ValueError):
        make_law("lqr")
    assert make_law("none").controls(np.zeros((3, 4, 4)), scenarios.build("two_qubit"), np.ones(3, bool)).shape == (3, 2)


def test_qubit_pulse_mask():
    spec = scenarios.build("cqed", {"n_fock": 4})
    law = make_law("qubit_reset")
    ex = projector(np.kron([0, 1], fock_state(4, 0)))
    gr = projector(np.kron([1, 0], fock_state(4, 0)))
    np.testing.assert_array_equal(law.pulse_mask(np.array([ex, gr]), spec), [True, False])
    assert np.trace(spec.ops["sigma_z"] @ ex).real == pytest.approx(-1.0)
    assert SIGMA_Z[0, 0] == 1
