"""Effective spin-motion interaction, analytic propagation and noise channels.

The entangling mechanism is a spin-dependent force on one motional mode,
driven by an oscillating magnetic-field gradient together with a bichromatic
microwave field.  In the interaction frame the effective Hamiltonian is

    H(t)/hbar = g (sigma_z1 - sigma_z2) (a e^{+i Delta t} + a^dag e^{-i Delta t})

with coupling g = Omega_g * J2(4 Omega_mu / delta).  The microwave amplitude
is chosen so that J0(4 Omega_mu / delta) = 0; that choice makes the drive
itself average away slow qubit-frequency noise (any quasi-static sigma_z term
is multiplied by the same J0 factor), while the surviving J2 harmonic supplies
the force.

For each eigenvalue ``lam`` of (sigma_z1 - sigma_z2) the motion traverses a
circular loop in phase space,

    alpha_lam(t)  = (g lam / Delta) (e^{-i Delta t} - 1)
    Theta_lam(t)  = (g lam / Delta)^2 (Delta t - sin Delta t)

and the propagator restricted to that spin sector is exactly
U_lam(t) = e^{-i Theta_lam(t)} D(alpha_lam(t)).  Loops close at
t = 2 pi k / Delta; running K closed loops with g = Delta / (4 sqrt(K))
accumulates the differential phase pi/2 that produces a maximally entangled
state.

Noise enters three ways: Lindblad channels on the motional mode (dephasing
of superpositions of Fock states, heating), a coherent qubit-detuning term,
and quasi-static shifts of Delta drawn once per shot.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.special import j0, jn_zeros, jv

from .hilbert import (
    SIGMA_Z_DIAG,
    HilbertSpec,
    QuantumState,
    build_operators,
    state_fidelity,
)

TWO_PI = 2.0 * np.pi


class ParameterError(ValueError):
    """Raised for physically inconsistent drive or noise parameters."""


# ---------------------------------------------------------------------------
# drive parameters


@dataclass(frozen=True)
class EffectiveParams:
    """Drive amplitudes and frequencies of the effective interaction.

    All quantities are angular (rad/s).  ``delta``, the offset of each
    microwave tone from the qubit transition, is not free: the bichromatic
    resonance condition ties it to the other frequencies,

        delta = (omega_r - omega_g) / 2 + Delta / 2

    so it is exposed as a derived property.

    Attributes
    ----------
    omega_g : gradient drive frequency
    omega_r : motional mode frequency
    Delta   : gate detuning from the spin-motion resonance
    Omega_mu: microwave Rabi amplitude (per tone)
    Omega_g : bare gradient coupling amplitude
    """

    omega_g: float
    omega_r: float
    Delta: float
    Omega_mu: float
    Omega_g: float

    def __post_init__(self):
        if self.omega_r <= self.omega_g:
            raise ParameterError("mode frequency must exceed the gradient frequency")
        if self.delta <= 0:
            raise ParameterError("tone offset delta must be positive")

    @property
    def delta(self) -> float:
        return (self.omega_r - self.omega_g) / 2.0 + self.Delta / 2.0

    @property
    def modulation_index(self) -> float:
        """The Bessel argument 4 Omega_mu / delta."""
        return 4.0 * self.Omega_mu / self.delta

    def with_mode_drift(self, d_delta: float) -> "EffectiveParams":
        """Shift the mode frequency so Delta moves by ``d_delta`` at fixed delta.

        A drifting mode changes the closure detuning but not the synthesizer
        tone offsets, hence omega_r and Delta move together.
        """
        return dataclasses.replace(
            self, omega_r=self.omega_r - d_delta, Delta=self.Delta + d_delta
        )

    @classmethod
    def operating_point(
        cls,
        loops: int = 8,
        interaction_time: float = 580e-6,
        omega_g: float = TWO_PI * 5.0e6,
        omega_r: float = TWO_PI * 6.9e6,
        idd_branch: int = 1,
    ) -> "EffectiveParams":
        """Canonical parameter set: K closed loops filling the interaction time.

        Delta = 2 pi K / T_int puts one loop in each interaction segment, and
        Omega_g is scaled so the total differential phase is pi/2.
        """
        if loops < 1 or interaction_time <= 0:
            raise ParameterError("need at least one loop and positive interaction time")
        Delta = TWO_PI * loops / interaction_time
        delta = (omega_r - omega_g) / 2.0 + Delta / 2.0
        Omega_mu = idd_amplitude(delta, branch=idd_branch)
        g_target = Delta / (4.0 * np.sqrt(loops))
        j2 = jv(2, 4.0 * Omega_mu / delta)
        return cls(
            omega_g=omega_g,
            omega_r=omega_r,
            Delta=Delta,
            Omega_mu=Omega_mu,
            Omega_g=g_target / j2,
        )


def idd_amplitude(delta: float, branch: int = 1) -> float:
    """Microwave amplitude placing the drive on a zero of J0(4 Omega_mu/delta).

    With the modulation index at a J0 zero, slow dephasing is suppressed by
    the vanishing J0 prefactor while the J2 harmonic still mediates the gate.
    ``branch`` selects which zero (1 -> Omega_mu/delta ~ 0.6012).
    """
    if branch < 1:
        raise ParameterError("branch index starts at 1")
    if delta <= 0:
        raise ParameterError("delta must be positive")
    zero = jn_zeros(0, branch)[-1]
    return zero / 4.0 * delta


def idd_prefactor(params: EffectiveParams) -> float:
    """The J0 factor multiplying quasi-static sigma_z noise under the drive."""
    return float(j0(params.modulation_index))


def coupling_strength(params: EffectiveParams) -> float:
    """Effective spin-motion coupling g = Omega_g J2(4 Omega_mu / delta)."""
    return float(params.Omega_g * jv(2, params.modulation_index))


# ---------------------------------------------------------------------------
# analytic sector propagation


def sector_lambdas() -> np.ndarray:
    """Eigenvalues of (sigma_z1 - sigma_z2) over the 9 two-ion levels."""
    return np.array(
        [SIGMA_Z_DIAG[i1] - SIGMA_Z_DIAG[i2] for i1 in range(3) for i2 in range(3)]
    )


def alpha_lambda(params: EffectiveParams, lam: float, t: float) -> complex:
    """Phase-space displacement of the ``lam`` sector at time t."""
    g = coupling_strength(params)
    if params.Delta == 0.0:
        return -1j * g * lam * t
    return (g * lam / params.Delta) * (np.exp(-1j * params.Delta * t) - 1.0)


def theta_lambda(params: EffectiveParams, lam: float, t: float) -> float:
    """Geometric phase of the ``lam`` sector at time t."""
    g = coupling_strength(params)
    if params.Delta == 0.0:
        return 0.0
    x = params.Delta * t
    return (g * lam / params.Delta) ** 2 * (x - np.sin(x))


@dataclass
class PhaseSpaceTrajectory:
    """Sampled loop trajectory of one spin sector."""

    lam: float
    times: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray

    def closure_error(self) -> float:
        return float(np.abs(self.alpha[-1]))


def phase_space_trajectory(
    params: EffectiveParams, lam: float, times: np.ndarray
) -> PhaseSpaceTrajectory:
    times = np.asarray(times, dtype=float)
    alpha = np.array([alpha_lambda(params, lam, t) for t in times])
    theta = np.array([theta_lambda(params, lam, t) for t in times])
    return PhaseSpaceTrajectory(lam=lam, times=times, alpha=alpha, theta=theta)


def _displacement(alpha: complex, fock_dim: int) -> np.ndarray:
    a = np.diag(np.sqrt(np.arange(1, fock_dim, dtype=float)), 1).astype(complex)
    return expm(alpha * a.conj().T - np.conj(alpha) * a)


def sector_step(
    params: EffectiveParams, lam: float, t0: float, t1: float, fock_dim: int
) -> np.ndarray:
    """Exact interaction propagator of one sector over [t0, t1].

    Composition of the closed-form solution:
    U(t1, t0) = exp(-i [Theta(t1)-Theta(t0) + Im(alpha1 alpha0*)]) D(alpha1 - alpha0)
    """
    a0 = alpha_lambda(params, lam, t0)
    a1 = alpha_lambda(params, lam, t1)
    phase = theta_lambda(params, lam, t1) - theta_lambda(params, lam, t0)
    phase += float(np.imag(a1 * np.conj(a0)))
    return np.exp(-1j * phase) * _displacement(a1 - a0, fock_dim)


def _sector_step_matrices(
    params: EffectiveParams, t0: float, t1: float, fock_dim: int
) -> np.ndarray:
    """Stack of 9 sector propagators (one per two-ion level) over [t0, t1]."""
    lams = sector_lambdas()
    mats = np.empty((9, fock_dim, fock_dim), dtype=complex)
    cache: dict[float, np.ndarray] = {}
    for idx, lam in enumerate(lams):
        if lam not in cache:
            cache[lam] = sector_step(params, lam, t0, t1, fock_dim)
        mats[idx] = cache[lam]
    return mats


def propagate_analytic(
    params: EffectiveParams,
    state: QuantumState,
    t: float,
    t0: float = 0.0,
) -> QuantumState:
    """Evolve a state under the effective interaction from ``t0`` to ``t``.

    Uses the exact per-sector displacement solution; no discretization error.
    """
    nf = state.spec.fock_dim
    mats = _sector_step_matrices(params, t0, t, nf)
    if state.kind == "ket":
        psi = state.data.reshape(9, nf)
        out = np.einsum("snm,sm->sn", mats, psi)
        return QuantumState(state.spec, out.reshape(-1), "ket")
    rho = state.data.reshape(9, nf, 9, nf).transpose(0, 2, 1, 3)
    tmp = np.einsum("iab,ijbc->ijac", mats, rho)
    out = np.einsum("ijac,jdc->ijad", tmp, mats.conj())
    out = out.transpose(0, 2, 1, 3).reshape(state.spec.dim, state.spec.dim)
    return QuantumState(state.spec, out, "dm")


# ---------------------------------------------------------------------------
# numeric propagation (validation path)


def interaction_hamiltonian(params: EffectiveParams, spec: HilbertSpec):
    """Return H(t) as a dense-matrix callable for the numeric propagator."""
    ops = build_operators(spec)
    g = coupling_strength(params)
    szdiff = ops.sz1 - ops.sz2
    fwd = szdiff @ ops.a
    bwd = szdiff @ ops.adag

    def ham(t: float) -> np.ndarray:
        ph = np.exp(1j * params.Delta * t)
        return g * (fwd * ph + bwd * np.conj(ph))

    return ham


def propagate_numeric(
    hamiltonian,
    state: QuantumState,
    t_span: tuple[float, float],
    dt: float,
) -> QuantumState:
    """Fixed-step 4th-order Runge-Kutta propagation of a ket.

    The step count is rounded up so the span is covered exactly.  Intended as
    the independent cross-check of :func:`propagate_analytic`; production
    noise runs use the split-step engine below instead.
    """
    if state.kind != "ket":
        raise ParameterError("numeric propagator expects a ket")
    t0, t1 = t_span
    if t1 < t0 or dt <= 0:
        raise ParameterError("bad time span or step")
    n_steps = max(1, int(np.ceil((t1 - t0) / dt)))
    h = (t1 - t0) / n_steps
    psi = state.data.copy()
    t = t0
    for _ in range(n_steps):
        k1 = -1j * (hamiltonian(t) @ psi)
        k2 = -1j * (hamiltonian(t + h / 2) @ (psi + h / 2 * k1))
        k3 = -1j * (hamiltonian(t + h / 2) @ (psi + h / 2 * k2))
        k4 = -1j * (hamiltonian(t + h) @ (psi + h * k3))
        psi = psi + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return QuantumState(state.spec, psi, "ket")


def step_halving_ratio(hamiltonian, state: QuantumState, t_span, dt: float) -> float:
    """Richardson ratio |x_h - x_{h/2}| / |x_{h/2} - x_{h/4}|.

    For a 4th-order scheme in its convergent regime this is about 2^4 = 16.
    """
    x1 = propagate_numeric(hamiltonian, state, t_span, dt).data
    x2 = propagate_numeric(hamiltonian, state, t_span, dt / 2).data
    x4 = propagate_numeric(hamiltonian, state, t_span, dt / 4).data
    num = np.linalg.norm(x1 - x2)
    den = np.linalg.norm(x2 - x4)
    if den == 0:
        return np.inf
    return float(num / den)


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseSpec:
    """Noise sources applied around the coherent gate dynamics.

    motional_dephasing_time
        1/e time tau_m of a motional |0>+|1> superposition (seconds).  The
        Lindblad collapse operator is sqrt(2/tau_m) a^dag a, which gives
        coherence decay exp(-(n - m)^2 t / tau_m).  0 disables the channel.
    heating_rate
        Mean phonon gain in quanta/s, implemented as a symmetric thermal bath
        (jump up and down at the same rate), so d<n>/dt = heating_rate.
    drift_mean_hz, drift_std_hz
        Quasi-static mode-frequency shift drawn once per shot (Hz, not
        angular) and applied to Delta through with_mode_drift.
    qubit_detuning
        Static offset of the microwave tone center from the qubit transition
        (rad/s), applied as the coherent term (eps/2)(sigma_z1 + sigma_z2),
        scaled by the J0 drive prefactor while the bichromatic field is on.
    initial_nbar
        Thermal occupation of the mode at the start of the sequence.
    """

    motional_dephasing_time: float = 0.0
    heating_rate: float = 0.0
    drift_mean_hz: float = 0.0
    drift_std_hz: float = 0.0
    qubit_detuning: float = 0.0
    initial_nbar: float = 0.0

    @classmethod
    def nominal(cls) -> "NoiseSpec":
        """Measured device numbers used for the standing error budget."""
        return cls(
            motional_dephasing_time=64e-3,
            heating_rate=1.0,
            drift_mean_hz=3.4,
            drift_std_hz=50.0,
        )

    @property
    def has_channels(self) -> bool:
        return self.motional_dephasing_time > 0 or self.heating_rate > 0

    def channels_only(self) -> "NoiseSpec":
        return dataclasses.replace(self, drift_mean_hz=0.0, drift_std_hz=0.0)

    def sample_drift(self, rng: np.random.Generator) -> float:
        """One per-shot Delta shift in rad/s."""
        if self.drift_std_hz == 0.0 and self.drift_mean_hz == 0.0:
            return 0.0
        return TWO_PI * rng.normal(self.drift_mean_hz, self.drift_std_hz)


def fock_dissipator(noise: NoiseSpec, fock_dim: int) -> np.ndarray:
    """Lindblad dissipator of the motional channels as an (nf^2, nf^2) matrix.

    Acts on row-major vectorized Fock blocks; the spin factors are untouched
    so one matrix serves all 81 spin blocks of the density matrix.
    """
    nf = fock_dim
    a = np.diag(np.sqrt(np.arange(1, nf, dtype=float)), 1).astype(complex)
    eye = np.eye(nf, dtype=complex)
    ops = []
    if noise.motional_dephasing_time > 0:
        ops.append(np.sqrt(2.0 / noise.motional_dephasing_time) * (a.conj().T @ a))
    if noise.heating_rate > 0:
        ops.append(np.sqrt(noise.heating_rate) * a.conj().T)
        ops.append(np.sqrt(noise.heating_rate) * a)
    lind = np.zeros((nf * nf, nf * nf), dtype=complex)
    for L in ops:
        LdL = L.conj().T @ L
        lind += np.kron(L, L.conj())
        lind -= 0.5 * np.kron(LdL, eye)
        lind -= 0.5 * np.kron(eye, LdL.T)
    return lind


class _NoisyEngine:
    """Split-step evolution of a (9, 9, nf, nf) block density matrix.

    Unitary substeps use the exact sector propagators; the motional channels
    are applied as exact exponentials of their dissipator in a symmetric
    Trotter arrangement (half channel, full unitary, half channel).
    """

    def __init__(self, spec: HilbertSpec, noise: NoiseSpec):
        self.spec = spec
        self.noise = noise
        self.nf = spec.fock_dim
        self._lind = fock_dissipator(noise, self.nf) if noise.has_channels else None
        self._channel_cache: dict[float, np.ndarray] = {}

    def channel_matrix(self, tau: float) -> np.ndarray | None:
        if self._lind is None or tau == 0.0:
            return None
        if tau not in self._channel_cache:
            self._channel_cache[tau] = expm(self._lind * tau)
        return self._channel_cache[tau]

    def apply_channel(self, rho: np.ndarray, tau: float) -> np.ndarray:
        E = self.channel_matrix(tau)
        if E is None:
            return rho
        flat = rho.reshape(81, self.nf * self.nf)
        return (flat @ E.T).reshape(9, 9, self.nf, self.nf)

    def unitary_step(
        self, rho: np.ndarray, params: EffectiveParams, t0: float, t1: float
    ) -> np.ndarray:
        mats = _sector_step_matrices(params, t0, t1, self.nf)
        tmp = np.einsum("iab,ijbc->ijac", mats, rho)
        return np.einsum("ijac,jdc->ijad", tmp, mats.conj())

    def interaction_span(
        self,
        rho: np.ndarray,
        params: EffectiveParams,
        t0: float,
        duration: float,
        n_sub: int,
    ) -> np.ndarray:
        if duration == 0.0:
            return rho
        if self._lind is None:
            # no channels: a single exact unitary step covers the span
            return self.unitary_step(rho, params, t0, t0 + duration)
        h = duration / n_sub
        for k in range(n_sub):
            rho = self.apply_channel(rho, h / 2.0)
            rho = self.unitary_step(rho, params, t0 + k * h, t0 + (k + 1) * h)
            rho = self.apply_channel(rho, h / 2.0)
        return rho

    def idle_span(self, rho: np.ndarray, duration: float) -> np.ndarray:
        return self.apply_channel(rho, duration)

    @staticmethod
    def spin_unitary(rho: np.ndarray, u: np.ndarray) -> np.ndarray:
        tmp = np.einsum("ai,ijnm->ajnm", u, rho)
        return np.einsum("ajnm,bj->abnm", tmp, u.conj())

    @staticmethod
    def spin_phases(rho: np.ndarray, ph: np.ndarray) -> np.ndarray:
        return rho * ph[:, None, None, None] * ph.conj()[None, :, None, None]


def state_to_blocks(state: QuantumState) -> np.ndarray:
    nf = state.spec.fock_dim
    rho = state.to_dm().data
    return rho.reshape(9, nf, 9, nf).transpose(0, 2, 1, 3).copy()


def blocks_to_state(spec: HilbertSpec, blocks: np.ndarray) -> QuantumState:
    nf = spec.fock_dim
    rho = blocks.transpose(0, 2, 1, 3).reshape(spec.dim, spec.dim)
    return QuantumState(spec, rho, "dm")


def apply_noise_channels(
    state: QuantumState,
    noise: NoiseSpec,
    duration: float,
    params: EffectiveParams | None = None,
    t0: float = 0.0,
    n_sub: int = 64,
) -> QuantumState:
    """Evolve a state for ``duration`` with noise channels active.

    With ``params`` the effective interaction runs concurrently (split-step);
    without it only the channels and the static qubit-detuning phase act.
    A spec with all rates zero returns the state unchanged (up to promotion
    to a density matrix when channels would need one).
    """
    if duration < 0:
        raise ParameterError("negative duration")
    if not noise.has_channels and params is None:
        if noise.qubit_detuning == 0.0:
            return state
        if state.kind == "ket":
            return _ket_z_phase(state, noise.qubit_detuning * duration)
    eng = _NoisyEngine(state.spec, noise)
    if not noise.has_channels and state.kind == "ket" and params is not None:
        out = propagate_analytic(params, state, t0 + duration, t0)
        if noise.qubit_detuning:
            out = _ket_z_phase(out, noise.qubit_detuning * duration)
        return out
    rho = state_to_blocks(state)
    if params is None:
        rho = eng.idle_span(rho, duration)
    else:
        rho = eng.interaction_span(rho, params, t0, duration, n_sub)
    if noise.qubit_detuning:
        ph = _detuning_phases(noise.qubit_detuning * duration)
        rho = _NoisyEngine.spin_phases(rho, ph)
    return blocks_to_state(state.spec, rho)


def _detuning_phases(angle: float) -> np.ndarray:
    """Diagonal spin phases e^{-i angle (z1 + z2)/2} over the 9 levels."""
    zsum = np.array(
        [SIGMA_Z_DIAG[i1] + SIGMA_Z_DIAG[i2] for i1 in range(3) for i2 in range(3)]
    )
    return np.exp(-1j * angle / 2.0 * zsum)


def _ket_z_phase(state: QuantumState, angle: float) -> QuantumState:
    ph = _detuning_phases(angle)
    psi = state.data.reshape(9, state.spec.fock_dim) * ph[:, None]
    return QuantumState(state.spec, psi.reshape(-1), "ket")


# ---------------------------------------------------------------------------
# error budget


@dataclass
class BudgetReport:
    """Per-source Bell infidelities of the standing gate schedule."""

    entries: list[tuple[str, float]]

    @property
    def total(self) -> float:
        return float(sum(v for _, v in self.entries))

    def as_dict(self) -> dict[str, float]:
        out = {name: val for name, val in self.entries}
        out["total"] = self.total
        return out


def _budget_infidelity(args) -> float:
    """Bell infidelity of one schedule run; module level so pools can pickle it."""
    schedule, params, ns, fock_dim, n_sub = args
    from . import sequence  # deferred: sequence builds on this module
    from .hilbert import partial_trace_motion

    spec = HilbertSpec(fock_dim=fock_dim)
    init = sequence.initial_state(spec, nbar=ns.initial_nbar)
    final = sequence.schedule_to_propagator(schedule, params, ns, init, n_sub=n_sub)
    red = partial_trace_motion(final)
    return 1.0 - state_fidelity(red, sequence.ideal_target(schedule))


def error_budget(
    params: EffectiveParams,
    noise: NoiseSpec,
    schedule=None,
    *,
    fock_dim: int = 16,
    mc_samples: int = 500,
    seed: int = 20260822,
    n_sub: int = 64,
    threads: int = 1,
) -> BudgetReport:
    """Decompose the gate error into per-source Bell infidelities.

    Each source is simulated with every other source zeroed; the report's
    ``total`` is the sum.  Deterministic sources run once through the density
    matrix engine, the per-shot frequency drift is Monte-Carlo averaged over
    coherent trajectories.
    """
    from . import sequence  # deferred: sequence builds on this module

    if schedule is None:
        schedule = sequence.build_entangling_schedule()

    def bell_infidelity(ns: NoiseSpec, params_n: EffectiveParams = params) -> float:
        return _budget_infidelity((schedule, params_n, ns, fock_dim, n_sub))

    entries: list[tuple[str, float]] = []
    if noise.motional_dephasing_time > 0:
        only = NoiseSpec(
            motional_dephasing_time=noise.motional_dephasing_time,
            initial_nbar=noise.initial_nbar,
        )
        entries.append(("motional_dephasing", bell_infidelity(only)))
    if noise.heating_rate > 0:
        only = NoiseSpec(heating_rate=noise.heating_rate, initial_nbar=noise.initial_nbar)
        entries.append(("heating", bell_infidelity(only)))
    if noise.qubit_detuning != 0.0:
        only = NoiseSpec(qubit_detuning=noise.qubit_detuning, initial_nbar=noise.initial_nbar)
        entries.append(("qubit_detuning", bell_infidelity(only)))
    if noise.drift_std_hz > 0 or noise.drift_mean_hz != 0.0:
        rng = np.random.default_rng(seed)
        shifts = [noise.sample_drift(rng) for _ in range(mc_samples)]
        quiet = NoiseSpec(initial_nbar=noise.initial_nbar)
        jobs = [
            (schedule, params.with_mode_drift(s), quiet, fock_dim, n_sub)
            for s in shifts
        ]
        from .parallel import ordered_map

        infs = ordered_map(_budget_infidelity, jobs, threads)
        entries.append(("mode_frequency_drift", float(np.mean(infs))))
    return BudgetReport(entries=entries)
