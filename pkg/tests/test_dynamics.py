"""Drive parameters, analytic sector propagation, noise channels, budget."""

import numpy as np
import pytest

from iongate import dynamics as dyn
from iongate.hilbert import HilbertSpec, QuantumState, build_operators

from oracles import (
    J0_ZERO_1,
    J0_ZERO_2,
    bessel_j_series,
    j0_zero_bisection,
)

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# drive parameters and the decoupling condition


def test_idd_amplitude_sits_on_first_j0_zero():
    delta = TWO_PI * 956.9e3
    omega_mu = dyn.idd_amplitude(delta, branch=1)
    # modulation index equals the first J0 zero
    assert abs(4 * omega_mu / delta - J0_ZERO_1) < 1e-12
    assert abs(omega_mu / delta - 0.6012063) < 1e-6
    # and J0 actually vanishes there (independent series oracle)
    assert abs(bessel_j_series(0, 4 * omega_mu / delta)) < 1e-13


def test_idd_amplitude_branch_two():
    delta = 1.0
    omega_mu = dyn.idd_amplitude(delta, branch=2)
    assert abs(4 * omega_mu - J0_ZERO_2) < 1e-12
    assert abs(omega_mu - 1.38002) < 1e-5


def test_idd_zero_oracle_agrees_with_scipy():
    # bisection on the series expansion, fully independent of scipy
    assert abs(j0_zero_bisection(2.0, 3.0) - J0_ZERO_1) < 1e-12


def test_idd_amplitude_validation():
    with pytest.raises(dyn.ParameterError):
        dyn.idd_amplitude(1.0, branch=0)
    with pytest.raises(dyn.ParameterError):
        dyn.idd_amplitude(-1.0)


def test_operating_point_values():
    p = dyn.EffectiveParams.operating_point()
    assert abs(p.Delta - TWO_PI * 8 / 580e-6) < 1e-6
    # delta is tied to the other frequencies
    assert abs(p.delta - ((p.omega_r - p.omega_g) / 2 + p.Delta / 2)) < 1e-9
    # the modulation index sits on the J0 zero
    assert abs(p.modulation_index - J0_ZERO_1) < 1e-12
    assert abs(dyn.idd_prefactor(p)) < 1e-12
    # coupling closes K=8 loops with total differential phase pi/2
    g = dyn.coupling_strength(p)
    assert abs(g - p.Delta / (4 * np.sqrt(8))) < 1e-6


def test_coupling_strength_matches_series_oracle():
    p = dyn.EffectiveParams.operating_point()
    expected = p.Omega_g * bessel_j_series(2, p.modulation_index)
    assert abs(dyn.coupling_strength(p) - expected) < 1e-9 * abs(expected)
    assert abs(bessel_j_series(2, J0_ZERO_1) - 0.43176) < 1e-5


def test_mode_drift_moves_delta_not_tone_offset():
    p = dyn.EffectiveParams.operating_point()
    q = p.with_mode_drift(TWO_PI * 300.0)
    assert abs(q.Delta - p.Delta - TWO_PI * 300.0) < 1e-6
    assert abs(q.delta - p.delta) < 1e-6
    assert abs(q.omega_r - p.omega_r + TWO_PI * 300.0) < 1e-6


def test_params_validation():
    with pytest.raises(dyn.ParameterError):
        dyn.EffectiveParams(
            omega_g=TWO_PI * 7e6, omega_r=TWO_PI * 5e6, Delta=1.0, Omega_mu=1.0, Omega_g=1.0
        )


# ---------------------------------------------------------------------------
# analytic propagation against an independent numeric integrator


def _random_ket(spec: HilbertSpec, rng, n_max: int = 4) -> QuantumState:
    v = rng.normal(size=spec.dim) + 1j * rng.normal(size=spec.dim)
    # keep support far from the truncation edge; displacement operators on the
    # truncated space only match truncated-Hamiltonian evolution away from it
    v = v.reshape(9, spec.fock_dim)
    v[:, n_max + 1 :] = 0.0
    v = v.reshape(-1)
    return QuantumState(spec, v / np.linalg.norm(v), "ket")


def test_analytic_matches_rk4():
    spec = HilbertSpec(fock_dim=20)
    rng = np.random.default_rng(7)
    p = dyn.EffectiveParams.operating_point()
    psi0 = _random_ket(spec, rng)
    t1 = 0.4 * TWO_PI / p.Delta  # partway around a loop
    exact = dyn.propagate_analytic(p, psi0, t1)
    ham = dyn.interaction_hamiltonian(p, spec)
    num = dyn.propagate_numeric(ham, psi0, (0.0, t1), dt=5e-9)
    assert np.linalg.norm(exact.data - num.data) < 1e-8


def test_analytic_matches_rk4_offset_window():
    spec = HilbertSpec(fock_dim=20)
    rng = np.random.default_rng(8)
    p = dyn.EffectiveParams.operating_point()
    psi0 = _random_ket(spec, rng)
    t0, t1 = 11e-6, 43e-6
    exact = dyn.propagate_analytic(p, psi0, t1, t0=t0)
    ham = dyn.interaction_hamiltonian(p, spec)
    num = dyn.propagate_numeric(ham, psi0, (t0, t1), dt=5e-9)
    assert np.linalg.norm(exact.data - num.data) < 1e-8


def test_sector_step_composition():
    # composition is exact in the untruncated algebra; compare only the
    # action on low Fock states, with plenty of headroom to the cutoff
    p = dyn.EffectiveParams.operating_point()
    nf = 24
    t0, t1, t2 = 3e-6, 19e-6, 51e-6
    for lam in (2.0, -1.0):
        u02 = dyn.sector_step(p, lam, t0, t2, nf)
        u12 = dyn.sector_step(p, lam, t1, t2, nf)
        u01 = dyn.sector_step(p, lam, t0, t1, nf)
        assert np.max(np.abs((u02 - u12 @ u01)[:, :6])) < 1e-10


def test_sector_step_zero_sector_is_identity():
    p = dyn.EffectiveParams.operating_point()
    u = dyn.sector_step(p, 0.0, 0.0, 37e-6, 10)
    assert np.max(np.abs(u - np.eye(10))) < 1e-12


def test_closed_loop_geometric_phase():
    # after one closed loop the motion returns and only e^{-i Theta} remains
    p = dyn.EffectiveParams.operating_point()
    t_loop = TWO_PI / p.Delta
    g = dyn.coupling_strength(p)
    for lam in (2.0, -2.0, 1.0):
        u = dyn.sector_step(p, lam, 0.0, t_loop, 12)
        theta = (g * lam / p.Delta) ** 2 * TWO_PI
        assert np.max(np.abs(u - np.exp(-1j * theta) * np.eye(12))) < 1e-10
    # K loops at lam = +-2 give the pi/2 differential phase
    theta_tot = 8 * (g * 2 / p.Delta) ** 2 * TWO_PI
    assert abs(theta_tot - np.pi / 2) < 1e-9


def test_zero_detuning_limit():
    p0 = dyn.EffectiveParams.operating_point()
    p = dyn.EffectiveParams(
        omega_g=p0.omega_g, omega_r=p0.omega_r, Delta=0.0,
        Omega_mu=p0.Omega_mu, Omega_g=p0.Omega_g,
    )
    g = dyn.coupling_strength(p)
    t = 4e-6
    assert abs(dyn.alpha_lambda(p, 2.0, t) - (-1j * g * 2 * t)) < 1e-12
    assert dyn.theta_lambda(p, 2.0, t) == 0.0
    spec = HilbertSpec(fock_dim=14)
    rng = np.random.default_rng(9)
    psi0 = _random_ket(spec, rng)
    exact = dyn.propagate_analytic(p, psi0, t)
    num = dyn.propagate_numeric(dyn.interaction_hamiltonian(p, spec), psi0, (0, t), 2e-9)
    assert np.linalg.norm(exact.data - num.data) < 1e-8


def test_trajectory_closure():
    p = dyn.EffectiveParams.operating_point()
    times = np.linspace(0.0, TWO_PI / p.Delta, 201)  # includes the mid-loop point
    traj = dyn.phase_space_trajectory(p, 2.0, times)
    assert traj.closure_error() < 1e-9
    # mid-loop the excursion reaches 2 g lam / Delta
    assert abs(np.max(np.abs(traj.alpha)) - 2 * dyn.coupling_strength(p) * 2 / p.Delta) < 1e-9


def test_step_halving_ratio_is_fourth_order():
    spec = HilbertSpec(fock_dim=10)
    rng = np.random.default_rng(12)
    p = dyn.EffectiveParams.operating_point()
    psi0 = _random_ket(spec, rng)
    ham = dyn.interaction_hamiltonian(p, spec)
    r = dyn.step_halving_ratio(ham, psi0, (0.0, 30e-6), dt=3e-7)
    assert 10.0 < r < 24.0


def test_propagate_numeric_validation():
    spec = HilbertSpec(fock_dim=8)
    p = dyn.EffectiveParams.operating_point()
    ham = dyn.interaction_hamiltonian(p, spec)
    rho = QuantumState.from_spin_levels(spec, 0, 0).to_dm()
    with pytest.raises(dyn.ParameterError):
        dyn.propagate_numeric(ham, rho, (0, 1e-6), 1e-9)
    psi = QuantumState.from_spin_levels(spec, 0, 0)
    with pytest.raises(dyn.ParameterError):
        dyn.propagate_numeric(ham, psi, (1e-6, 0.0), 1e-9)


# ---------------------------------------------------------------------------
# noise channels


def test_zero_noise_spec_is_identity():
    spec = HilbertSpec(fock_dim=8)
    psi = QuantumState.from_spin_levels(spec, 0, 1, n=2)
    out = dyn.apply_noise_channels(psi, dyn.NoiseSpec(), 1e-3)
    assert out.kind == "ket"
    assert np.allclose(out.data, psi.data)


def test_dephasing_coherence_law():
    # superposition |0>+|n> decays as exp(-n^2 t / tau_m)
    tau_m = 2e-3
    spec = HilbertSpec(fock_dim=8)
    psi = np.zeros(spec.dim, dtype=complex)
    psi[0] = 1 / np.sqrt(2)   # |dd> |n=0>
    psi[3] = 1 / np.sqrt(2)   # |dd> |n=3>
    state = QuantumState(spec, psi, "ket").to_dm()
    t = 0.37e-3
    out = dyn.apply_noise_channels(state, dyn.NoiseSpec(motional_dephasing_time=tau_m), t)
    rho = out.data
    expected = 0.5 * np.exp(-(3 - 0) ** 2 * t / tau_m)
    assert abs(abs(rho[0, 3]) - expected) < 1e-12
    # populations untouched
    assert abs(rho[0, 0] - 0.5) < 1e-12
    assert abs(rho[3, 3] - 0.5) < 1e-12
    # the quoted 1/e time applies to the |0>+|1> superposition
    psi01 = np.zeros(spec.dim, dtype=complex)
    psi01[0] = psi01[1] = 1 / np.sqrt(2)
    s01 = QuantumState(spec, psi01, "ket").to_dm()
    out01 = dyn.apply_noise_channels(s01, dyn.NoiseSpec(motional_dephasing_time=t), t)
    assert abs(abs(out01.data[0, 1]) - 0.5 * np.exp(-1)) < 1e-12


def test_heating_rate_in_quanta_per_second():
    spec = HilbertSpec(fock_dim=20)
    rate = 30.0
    state = QuantumState.from_spin_levels(spec, 0, 0).to_dm()
    ops = build_operators(spec)
    t = 1e-3
    out = dyn.apply_noise_channels(state, dyn.NoiseSpec(heating_rate=rate), t)
    nbar = float(np.real(np.trace(ops.number @ out.data)))
    assert abs(nbar - rate * t) < 1e-6
    assert abs(np.trace(out.data) - 1.0) < 1e-12


def test_channel_is_trace_preserving_and_positive():
    spec = HilbertSpec(fock_dim=6)
    rng = np.random.default_rng(3)
    m = rng.normal(size=(spec.dim, spec.dim)) + 1j * rng.normal(size=(spec.dim, spec.dim))
    rho = m @ m.conj().T
    rho /= np.trace(rho).real
    state = QuantumState(spec, rho, "dm")
    noise = dyn.NoiseSpec(motional_dephasing_time=1e-3, heating_rate=50.0)
    out = dyn.apply_noise_channels(state, noise, 0.5e-3)
    assert abs(np.trace(out.data) - 1.0) < 1e-10
    evals = np.linalg.eigvalsh(out.data)
    assert evals.min() > -1e-10


def test_split_step_against_brute_force_master_equation():
    # independent RK4 integration of drho/dt = -i[H,rho] + D(rho)
    spec = HilbertSpec(fock_dim=8)
    p = dyn.EffectiveParams.operating_point()
    noise = dyn.NoiseSpec(motional_dephasing_time=0.8e-3, heating_rate=400.0)
    psi = np.zeros(spec.dim, dtype=complex)
    psi[0 * spec.fock_dim] = 1 / np.sqrt(2)   # |dd,0>
    psi[1 * spec.fock_dim] = 1 / np.sqrt(2)   # |du,0>
    state = QuantumState(spec, psi, "ket")
    t1 = 20e-6

    out = dyn.apply_noise_channels(state, noise, t1, params=p, n_sub=256)

    ham = dyn.interaction_hamiltonian(p, spec)
    nf = spec.fock_dim
    a = np.diag(np.sqrt(np.arange(1, nf)), 1).astype(complex)
    eye9 = np.eye(9)
    Ls = [
        np.kron(eye9, np.sqrt(2.0 / noise.motional_dephasing_time) * (a.conj().T @ a)),
        np.kron(eye9, np.sqrt(noise.heating_rate) * a.conj().T),
        np.kron(eye9, np.sqrt(noise.heating_rate) * a),
    ]

    def deriv(t, rho):
        h = ham(t)
        d = -1j * (h @ rho - rho @ h)
        for L in Ls:
            LdL = L.conj().T @ L
            d += L @ rho @ L.conj().T - 0.5 * (LdL @ rho + rho @ LdL)
        return d

    rho = state.to_dm().data
    n_steps = 4000
    h = t1 / n_steps
    t = 0.0
    for _ in range(n_steps):
        k1 = deriv(t, rho)
        k2 = deriv(t + h / 2, rho + h / 2 * k1)
        k3 = deriv(t + h / 2, rho + h / 2 * k2)
        k4 = deriv(t + h, rho + h * k3)
        rho = rho + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    assert np.max(np.abs(out.data - rho)) < 1e-7


def test_trotter_substep_convergence():
    spec = HilbertSpec(fock_dim=10)
    p = dyn.EffectiveParams.operating_point()
    noise = dyn.NoiseSpec(motional_dephasing_time=64e-3, heating_rate=1.0)
    psi = np.zeros(spec.dim, dtype=complex)
    psi[0] = psi[2 * spec.fock_dim] = 1 / np.sqrt(2)
    state = QuantumState(spec, psi, "ket")
    tau = 72.5e-6
    a = dyn.apply_noise_channels(state, noise, tau, params=p, n_sub=32)
    b = dyn.apply_noise_channels(state, noise, tau, params=p, n_sub=64)
    assert np.max(np.abs(a.data - b.data)) < 1e-9


def test_drift_sampling_statistics():
    noise = dyn.NoiseSpec(drift_mean_hz=3.4, drift_std_hz=50.0)
    rng = np.random.default_rng(5)
    draws = np.array([noise.sample_drift(rng) for _ in range(4000)]) / TWO_PI
    assert abs(np.mean(draws) - 3.4) < 3.0
    assert abs(np.std(draws) - 50.0) < 3.0
    quiet = dyn.NoiseSpec()
    assert quiet.sample_drift(rng) == 0.0


def test_qubit_detuning_phase_only():
    spec = HilbertSpec(fock_dim=6)
    psi = np.zeros(spec.dim, dtype=complex)
    psi[0] = psi[4 * spec.fock_dim] = 1 / np.sqrt(2)  # |dd,0> + |uu,0>
    state = QuantumState(spec, psi, "ket")
    eps = TWO_PI * 1e3
    t = 10e-6
    out = dyn.apply_noise_channels(state, dyn.NoiseSpec(qubit_detuning=eps), t)
    # |dd> advances by +eps t, |uu> by -eps t (z1+z2 = +-2)
    ratio = out.data[4 * spec.fock_dim] / out.data[0]
    assert abs(ratio - np.exp(2j * eps * t)) < 1e-10


# ---------------------------------------------------------------------------
# error budget


def test_error_budget_entries_and_total():
    p = dyn.EffectiveParams.operating_point()
    rep = dyn.error_budget(p, dyn.NoiseSpec.nominal(), mc_samples=24, fock_dim=12, n_sub=24)
    names = [n for n, _ in rep.entries]
    assert names == ["motional_dephasing", "heating", "mode_frequency_drift"]
    assert abs(rep.total - sum(v for _, v in rep.entries)) < 1e-15
    d = rep.as_dict()
    assert d["total"] == rep.total
    # dephasing should dominate at the nominal numbers
    assert d["motional_dephasing"] > d["heating"]


def test_error_budget_empty_for_quiet_spec():
    p = dyn.EffectiveParams.operating_point()
    rep = dyn.error_budget(p, dyn.NoiseSpec(), fock_dim=8)
    assert rep.entries == []
    assert rep.total == 0.0
