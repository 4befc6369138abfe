"""Pulse schedules: construction, serialization and execution.

Two schedules matter in practice.  The entangling schedule interleaves eight
spin-dependent-force segments with a pi/2 pulse at each end and five pi pulses
between segments.  The pi pulses both decouple slow qubit noise and flip the
sign of the spin-motion coupling, realizing a Walsh sign pattern across the
segments that cancels the residual displacement left by a static motional
frequency offset.  The addressing schedule is a spin-echo with a magnetic
field gradient applied during the first arm only; the differential qubit
shift between the ions accumulates a relative phase of pi, which the
surrounding pulses convert into a spin flip of one ion.  That flip maps the
symmetric Bell state onto the singlet without individual-ion addressing.

Timing is kept on an integer nanosecond grid so durations add exactly.  Field
ramps are modeled as dead time for the coupling while phase bookkeeping and
noise channels continue; level shifts follow the square of the field envelope
during a ramp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import j0

from . import dynamics as dyn
from .hilbert import (
    AUX,
    DOWN,
    HilbertSpec,
    QuantumState,
    bell_phi,
    bell_psi_minus,
    spin_index,
    spin_rotation,
    spin_z_phase,
)

TWO_PI = 2.0 * np.pi
PHASE_UNIT = np.pi / 1024.0  # granularity of serialized pulse phases

PULSE_KINDS = ("pi2_pulse", "pi_pulse")
SEGMENT_KINDS = PULSE_KINDS + ("interaction", "ramp", "idle", "z_correction")


class ScheduleError(ValueError):
    """Raised for malformed schedules or timing that misses the ns grid."""


@dataclass(frozen=True)
class EnvelopeSpec:
    """Ramp envelope of the drive fields.

    ``ramp_ns`` is the rise (and fall) time of each field edge.  The only
    implemented shape is sine-squared, env(u) = sin^2(pi u / 2) for u in
    [0, 1]; level shifts scale with the square of the field, so their
    effective weight over a ramp is the mean of env^2.
    """

    ramp_ns: int = 5000
    shape: str = "sine_squared"

    def __post_init__(self):
        if self.shape != "sine_squared":
            raise ScheduleError(f"unknown envelope shape {self.shape!r}")
        if self.ramp_ns < 0:
            raise ScheduleError("ramp time must be non-negative")

    def amplitude(self, u: np.ndarray) -> np.ndarray:
        return np.sin(np.pi * np.asarray(u) / 2.0) ** 2

    @property
    def shift_weight(self) -> float:
        """Mean of env^2 over the ramp (3/8 for sine-squared)."""
        return 3.0 / 8.0

    def suppression_mean(self, modulation_index: float) -> float:
        """Mean J0 drive prefactor while the microwave amplitude ramps."""
        u = np.linspace(0.0, 1.0, 129)
        return float(np.trapezoid(j0(modulation_index * self.amplitude(u)), u))


@dataclass(frozen=True)
class Segment:
    """One schedule element.

    kind
        ``pi2_pulse`` / ``pi_pulse``: instantaneous global rotations with axis
        ``phase``; ``interaction``: spin-dependent force plateau;
        ``ramp``: field edge (coupling off), ``ramp_role`` says which field;
        ``idle``: free evolution; ``z_correction``: instantaneous common
        z rotation by ``phase`` (frame calibration register).
    duration_ns
        Length on the nanosecond grid (0 for instantaneous kinds).
    walsh_sign
        Sign of the effective coupling during an interaction segment, implied
        by the pi pulses before it; stored for validation and display.
    detuning_offset
        Extra static shift of Delta during this segment (rad/s).
    zshift1, zshift2
        Qubit level shifts (rad/s) while this segment runs, e.g. the common
        and differential components of an induced level shift.  Scaled by the
        envelope-squared weight when the segment is a gradient ramp.
    """

    kind: str
    duration_ns: int = 0
    phase: float = 0.0
    walsh_sign: int = 1
    detuning_offset: float = 0.0
    zshift1: float = 0.0
    zshift2: float = 0.0
    ramp_role: str = ""

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ScheduleError(f"unknown segment kind {self.kind!r}")
        if self.duration_ns < 0:
            raise ScheduleError("segment duration must be non-negative")
        if int(self.duration_ns) != self.duration_ns:
            raise ScheduleError("durations live on an integer ns grid")
        if self.kind in PULSE_KINDS + ("z_correction",) and self.duration_ns != 0:
            raise ScheduleError(f"{self.kind} is instantaneous")
        if self.walsh_sign not in (-1, 1):
            raise ScheduleError("walsh_sign must be +-1")

    @property
    def duration(self) -> float:
        return self.duration_ns / 1e9


@dataclass(frozen=True)
class GateSchedule:
    """Ordered segments plus the Walsh order they implement."""

    kind: str  # "entangling" | "addressing"
    segments: tuple[Segment, ...]
    walsh_order: int = 1
    frame_correction: float = 0.0  # applied by builders as a z_correction segment

    @property
    def total_duration_ns(self) -> int:
        return sum(s.duration_ns for s in self.segments)

    @property
    def total_duration(self) -> float:
        return self.total_duration_ns / 1e9

    def count(self, kind: str) -> int:
        return sum(1 for s in self.segments if s.kind == kind)

    def interaction_time(self) -> float:
        return sum(s.duration for s in self.segments if s.kind == "interaction")

    def walsh_pattern(self) -> tuple[int, ...]:
        return tuple(s.walsh_sign for s in self.segments if s.kind == "interaction")

    def validate(self) -> None:
        """Check internal consistency of pulse placement and Walsh signs."""
        sign = 1
        for seg in self.segments:
            if seg.kind == "pi_pulse":
                sign = -sign
            elif seg.kind == "interaction" and seg.walsh_sign != sign:
                raise ScheduleError(
                    "stored walsh_sign disagrees with the pi-pulse frame"
                )


def walsh_signs(order: int) -> tuple[int, ...]:
    """Sign pattern of the maximal-sequency Walsh function of a given order.

    Entry k is (-1)^popcount(k).  Orders must be powers of two; order 1 is the
    unmodulated (all +) pattern.  First orders: (+), (+,-), (+,-,-,+),
    (+,-,-,+,-,+,+,-).
    """
    if order < 1 or order & (order - 1):
        raise ScheduleError("walsh order must be a power of two")
    return tuple(1 if bin(k).count("1") % 2 == 0 else -1 for k in range(order))


# ---------------------------------------------------------------------------
# builders


def build_entangling_schedule(
    total_duration: float = 740e-6,
    n_segments: int = 8,
    walsh_order: int = 8,
    envelope: EnvelopeSpec | None = None,
    *,
    ac_zeeman_common: float = -TWO_PI * 400e3,
    pi2_phases: tuple[float, float] = (0.0, np.pi),
) -> GateSchedule:
    """Entangling sequence: pi/2, force segments with pi pulses, pi/2.

    Each force segment is wrapped in four ramps (gradient edge, microwave
    edge, and back down); the interaction plateaus must fill the remaining
    time in equal integer-ns pieces.  pi pulses sit at the boundaries where
    the Walsh pattern changes sign, with axes alternating x, y, x, ...; the
    closing pi/2 phase is chosen so the ideal output is exactly
    (|dd> + i|uu>)/sqrt(2).
    """
    envelope = envelope or EnvelopeSpec()
    if n_segments < 1:
        raise ScheduleError("need at least one interaction segment")
    if walsh_order > n_segments or n_segments % walsh_order:
        raise ScheduleError("walsh order must divide the segment count")
    total_ns = round(total_duration * 1e9)
    if abs(total_ns - total_duration * 1e9) > 1e-3:
        raise ScheduleError("total duration must sit on the ns grid")
    ramp_ns = envelope.ramp_ns
    dead_ns = n_segments * 4 * ramp_ns
    if total_ns <= dead_ns:
        raise ScheduleError("ramps exceed the total duration")
    plateau_ns, rem = divmod(total_ns - dead_ns, n_segments)
    if rem:
        raise ScheduleError("interaction time does not divide into equal ns plateaus")

    signs = np.repeat(walsh_signs(walsh_order), n_segments // walsh_order)
    segs: list[Segment] = [Segment("pi2_pulse", phase=pi2_phases[0])]
    pulse_count = 0
    for k in range(n_segments):
        # gradient edge: level shift follows env^2, no microwaves yet
        segs.append(
            Segment(
                "ramp",
                duration_ns=ramp_ns,
                ramp_role="gradient",
                zshift1=ac_zeeman_common,
                zshift2=ac_zeeman_common,
            )
        )
        segs.append(Segment("ramp", duration_ns=ramp_ns, ramp_role="microwave"))
        segs.append(
            Segment(
                "interaction",
                duration_ns=plateau_ns,
                walsh_sign=int(signs[k]),
            )
        )
        segs.append(Segment("ramp", duration_ns=ramp_ns, ramp_role="microwave"))
        segs.append(
            Segment(
                "ramp",
                duration_ns=ramp_ns,
                ramp_role="gradient",
                zshift1=ac_zeeman_common,
                zshift2=ac_zeeman_common,
            )
        )
        if k + 1 < n_segments and signs[k + 1] != signs[k]:
            # alternate x / y axes across the decoupling pulses
            segs.append(Segment("pi_pulse", phase=(np.pi / 2.0) * (pulse_count % 2)))
            pulse_count += 1
    segs.append(Segment("pi2_pulse", phase=pi2_phases[1]))
    sched = GateSchedule(kind="entangling", segments=tuple(segs), walsh_order=walsh_order)
    sched.validate()
    return sched


def build_addressing_schedule(
    delta_ac_diff: float = TWO_PI * 20e3,
    phase: float = np.pi / 4.0,
    envelope: EnvelopeSpec | None = None,
    *,
    common_shift: float = TWO_PI * 2.5e6,
    frame_correction: float | str = "auto",
) -> GateSchedule:
    """Spin-echo sequence that flips one ion via a differential level shift.

    The gradient runs during the first arm only.  The plateau length is set
    so the envelope-weighted differential phase is exactly pi; the second arm
    idles for the same wall-clock time to complete the echo.  The common part
    of the accumulated shift is removed by the frame-correction register
    (``auto`` places the net common z phase at +pi/2, which together with the
    pulse axis ``phase`` = pi/4 maps (|dd>+i|uu>)/sqrt2 onto the singlet).
    """
    envelope = envelope or EnvelopeSpec()
    if delta_ac_diff <= 0:
        raise ScheduleError("differential shift must be positive")
    ramp_ns = envelope.ramp_ns
    w = envelope.shift_weight
    # effective shift time = plateau + 2 * w * ramp; make it pi / delta_diff
    t_eff = np.pi / delta_ac_diff
    plateau_ns = round(t_eff * 1e9 - 2.0 * w * ramp_ns)
    if plateau_ns <= 0:
        raise ScheduleError("ramps too long for the requested differential phase")
    arm_ns = plateau_ns + 2 * ramp_ns
    t_eff_actual = (plateau_ns + 2.0 * w * ramp_ns) / 1e9

    z1 = common_shift + delta_ac_diff / 2.0
    z2 = common_shift - delta_ac_diff / 2.0
    if frame_correction == "auto":
        common_angle = common_shift * t_eff_actual
        frame_correction = float((np.pi / 2.0 - common_angle) % TWO_PI)

    segs = [
        Segment("pi2_pulse", phase=phase),
        Segment("ramp", duration_ns=ramp_ns, ramp_role="gradient", zshift1=z1, zshift2=z2),
        Segment("idle", duration_ns=plateau_ns, zshift1=z1, zshift2=z2),
        Segment("ramp", duration_ns=ramp_ns, ramp_role="gradient", zshift1=z1, zshift2=z2),
        Segment("z_correction", phase=frame_correction),
        Segment("pi_pulse", phase=phase),
        Segment("idle", duration_ns=arm_ns),
        Segment("pi2_pulse", phase=phase),
    ]
    return GateSchedule(
        kind="addressing",
        segments=tuple(segs),
        walsh_order=1,
        frame_correction=float(frame_correction),
    )


def params_for_schedule(
    schedule: GateSchedule, loops_per_segment: int = 1, **kwargs
) -> dyn.EffectiveParams:
    """Operating parameters closing ``loops_per_segment`` loops per plateau."""
    n_seg = schedule.count("interaction")
    if n_seg == 0:
        raise ScheduleError("schedule has no interaction segments")
    t_int = schedule.interaction_time()
    return dyn.EffectiveParams.operating_point(
        loops=n_seg * loops_per_segment, interaction_time=t_int, **kwargs
    )


def ideal_target(schedule: GateSchedule) -> np.ndarray:
    """Spin-space target the schedule is designed to reach from its canonical input."""
    if schedule.kind == "entangling":
        return bell_phi()
    if schedule.kind == "addressing":
        return bell_psi_minus()
    raise ScheduleError(f"no target defined for schedule kind {schedule.kind!r}")


def initial_state(
    spec: HilbertSpec, nbar: float = 0.0, leak_eps: float = 0.0
) -> QuantumState:
    """Canonical input |dd> with thermal motion and optional leaked population.

    With ``leak_eps`` > 0 each ion independently sits in the auxiliary level
    with that probability, giving the diagonal mixture
    (1-eps)^2 |dd> + eps(1-eps)(|d a> + |a d>) + eps^2 |aa>.
    """
    if leak_eps == 0.0 and nbar == 0.0:
        return QuantumState.from_spin_levels(spec, DOWN, DOWN)
    e = leak_eps
    weights = {
        spin_index(DOWN, DOWN): (1 - e) ** 2,
        spin_index(DOWN, AUX): e * (1 - e),
        spin_index(AUX, DOWN): e * (1 - e),
        spin_index(AUX, AUX): e**2,
    }
    nf = spec.fock_dim
    n = np.arange(nf)
    if nbar <= 0:
        pf = np.zeros(nf)
        pf[0] = 1.0
    else:
        pf = (nbar / (1 + nbar)) ** n / (1 + nbar)
        pf = pf / pf.sum()
    rho = np.zeros((spec.dim, spec.dim), dtype=complex)
    for s, w in weights.items():
        if w == 0.0:
            continue
        sl = slice(s * nf, (s + 1) * nf)
        rho[sl, sl] += w * np.diag(pf)
    return QuantumState(spec, rho, "dm")


# ---------------------------------------------------------------------------
# execution


def _segment_params(params: dyn.EffectiveParams, seg: Segment) -> dyn.EffectiveParams:
    if seg.detuning_offset == 0.0:
        return params
    return params.with_mode_drift(seg.detuning_offset)


def schedule_to_propagator(
    schedule: GateSchedule,
    params: dyn.EffectiveParams,
    noise: dyn.NoiseSpec | None = None,
    init: QuantumState | None = None,
    *,
    n_sub: int = 64,
    pi_pulse_scale: float = 1.0,
    envelope: EnvelopeSpec | None = None,
) -> QuantumState:
    """Run a schedule on a state and return the final full-space state.

    Every interaction segment replays the same drive waveform, so the drive
    phase restarts at each segment; with that convention the per-segment
    displacement increments are identical up to the Walsh sign, and a
    balanced sign pattern cancels the residual displacement of a static mode
    offset exactly.  Static qubit detuning from the noise spec is applied
    window by window, scaled by the J0 drive prefactor while the bichromatic
    field is up (a diagonal term commuting with the force, so end-of-window
    application is exact).  Per-shot frequency drift is not sampled here;
    callers average over shots by shifting ``params``.
    """
    noise = noise or dyn.NoiseSpec()
    envelope = envelope or EnvelopeSpec()
    spec = init.spec if init is not None else HilbertSpec()
    if init is None:
        init = initial_state(spec, nbar=noise.initial_nbar)

    eps = noise.qubit_detuning
    supp_full = dyn.idd_prefactor(params)
    supp_ramp = envelope.suppression_mean(params.modulation_index) if eps else 1.0

    ket_path = init.kind == "ket" and not noise.has_channels
    if ket_path:
        psi = init.data.reshape(9, spec.fock_dim).copy()
    else:
        blocks = dyn.state_to_blocks(init)
        engine = dyn._NoisyEngine(spec, noise)

    step_cache: dict[tuple[float, float], np.ndarray] = {}

    def apply_spin(u: np.ndarray):
        nonlocal psi, blocks
        if ket_path:
            psi = u @ psi
        else:
            blocks = dyn._NoisyEngine.spin_unitary(blocks, u)

    def apply_phases(phi1: float, phi2: float):
        if phi1 == 0.0 and phi2 == 0.0:
            return
        apply_spin(spin_z_phase(phi1, phi2))

    for seg in schedule.segments:
        tau = seg.duration
        if seg.kind == "pi2_pulse":
            apply_spin(spin_rotation(np.pi / 2.0, seg.phase))
        elif seg.kind == "pi_pulse":
            apply_spin(spin_rotation(np.pi * pi_pulse_scale, seg.phase))
        elif seg.kind == "z_correction":
            apply_phases(seg.phase, seg.phase)
        elif seg.kind == "interaction":
            p = _segment_params(params, seg)
            if ket_path:
                key = (seg.detuning_offset, tau)
                if key not in step_cache:
                    step_cache[key] = dyn._sector_step_matrices(
                        p, 0.0, tau, spec.fock_dim
                    )
                psi = np.einsum("snm,sm->sn", step_cache[key], psi)
            else:
                blocks = engine.interaction_span(blocks, p, 0.0, tau, n_sub)
            if eps:
                ang = eps * supp_full * tau
                apply_phases(ang, ang)
        elif seg.kind in ("ramp", "idle"):
            if not ket_path:
                blocks = engine.idle_span(blocks, tau)
            w = envelope.shift_weight if seg.ramp_role == "gradient" else 1.0
            phi1 = seg.zshift1 * w * tau
            phi2 = seg.zshift2 * w * tau
            if eps:
                s = supp_ramp if seg.ramp_role == "microwave" else 1.0
                phi1 += eps * s * tau
                phi2 += eps * s * tau
            apply_phases(phi1, phi2)
        else:  # pragma: no cover
            raise ScheduleError(f"executor cannot handle kind {seg.kind!r}")

    if ket_path:
        return QuantumState(spec, psi.reshape(-1), "ket")
    return dyn.blocks_to_state(spec, blocks)


# ---------------------------------------------------------------------------
# intrinsic decoupling echo experiment


@dataclass(frozen=True)
class DephasingNoiseModel:
    """Low-frequency qubit dephasing for the echo-contrast experiment.

    A bank of random-phase tones with 1/f amplitude weighting models the slow
    band; ``residual_rate`` is a small Markovian dephasing floor standing in
    for spectral weight near the drive frequency, which the drive prefactor
    does not suppress.  ``lf_rms`` is the total rms detuning (rad/s).
    """

    lf_rms: float = TWO_PI * 15e3
    f_lo_hz: float = 2.0
    f_hi_hz: float = 20e3
    n_tones: int = 61
    residual_rate: float = 1.0 / 6e-3

    def tones(self) -> tuple[np.ndarray, np.ndarray]:
        f = np.geomspace(self.f_lo_hz, self.f_hi_hz, self.n_tones)
        a2 = 1.0 / f
        a2 *= self.lf_rms**2 / (0.5 * a2.sum())  # sum a^2/2 = rms^2
        return TWO_PI * f, a2


def idd_echo_experiment(
    duration: float,
    idd_on: bool,
    noise_model: DephasingNoiseModel | None = None,
    params: dyn.EffectiveParams | None = None,
) -> float:
    """Echo contrast after a two-arm spin echo of total length ``duration``.

    The ensemble average over tone phases is Gaussian, so the contrast is
    exp(-Var/2) with the echo filter 8 sin^4(w T / 4) applied per tone:
    a static detuning is echoed away exactly, tones near 1/T survive.  With
    the drive on, tone amplitudes are multiplied by the J0 prefactor.
    """
    noise_model = noise_model or DephasingNoiseModel()
    if duration <= 0:
        return 1.0
    w, a2 = noise_model.tones()
    if idd_on:
        params = params or dyn.EffectiveParams.operating_point()
        a2 = a2 * dyn.idd_prefactor(params) ** 2
    var = float(np.sum(a2 / w**2 * 8.0 * np.sin(w * duration / 4.0) ** 4))
    return math.exp(-var / 2.0 - noise_model.residual_rate * duration)


def echo_coherence_time(
    idd_on: bool,
    noise_model: DephasingNoiseModel | None = None,
    params: dyn.EffectiveParams | None = None,
    durations: np.ndarray | None = None,
) -> float:
    """First 1/e crossing of the echo contrast, log-interpolated.

    Returns +inf when the contrast stays above 1/e over the scanned range.
    """
    if durations is None:
        durations = np.geomspace(20e-6, 50e-3, 120)
    target = 1.0 / math.e
    prev_t, prev_c = 0.0, 1.0
    for t_ in durations:
        c = idd_echo_experiment(float(t_), idd_on, noise_model, params)
        if c < target:
            # log-linear interpolation between the bracketing samples
            if prev_c <= 0 or c <= 0:
                return float(t_)
            frac = (math.log(prev_c) - math.log(target)) / (
                math.log(prev_c) - math.log(c)
            )
            return float(prev_t + frac * (t_ - prev_t))
        prev_t, prev_c = float(t_), c
    return float("inf")


# ---------------------------------------------------------------------------
# serialization (integer ns, phases in pi/1024 units; round trips bit-exact)


def _phase_to_units(phase: float) -> int:
    units = round(phase / PHASE_UNIT)
    if abs(units * PHASE_UNIT - phase) > 1e-12:
        raise ScheduleError(
            f"pulse phase {phase!r} is not on the pi/1024 grid; "
            "quantize at construction time"
        )
    return units


def schedule_to_json(schedule: GateSchedule) -> dict:
    segs = []
    for s in schedule.segments:
        d: dict = {"kind": s.kind, "duration_ns": int(s.duration_ns)}
        if s.kind in PULSE_KINDS:
            d["phase_units"] = _phase_to_units(s.phase)
        elif s.kind == "z_correction":
            d["phase_rad"] = float(s.phase)
        if s.kind == "interaction":
            d["walsh_sign"] = int(s.walsh_sign)
        if s.detuning_offset:
            d["detuning_offset"] = float(s.detuning_offset)
        if s.zshift1 or s.zshift2:
            d["zshift1"] = float(s.zshift1)
            d["zshift2"] = float(s.zshift2)
        if s.ramp_role:
            d["ramp_role"] = s.ramp_role
        segs.append(d)
    return {
        "kind": schedule.kind,
        "walsh_order": int(schedule.walsh_order),
        "frame_correction": float(schedule.frame_correction),
        "segments": segs,
    }


def schedule_from_json(data: dict) -> GateSchedule:
    segs = []
    for d in data["segments"]:
        kind = d["kind"]
        if kind in PULSE_KINDS:
            phase = d.get("phase_units", 0) * PHASE_UNIT
        elif kind == "z_correction":
            phase = d.get("phase_rad", 0.0)
        else:
            phase = 0.0
        segs.append(
            Segment(
                kind=kind,
                duration_ns=int(d["duration_ns"]),
                phase=phase,
                walsh_sign=int(d.get("walsh_sign", 1)),
                detuning_offset=float(d.get("detuning_offset", 0.0)),
                zshift1=float(d.get("zshift1", 0.0)),
                zshift2=float(d.get("zshift2", 0.0)),
                ramp_role=d.get("ramp_role", ""),
            )
        )
    sched = GateSchedule(
        kind=data["kind"],
        segments=tuple(segs),
        walsh_order=int(data["walsh_order"]),
        frame_correction=float(data.get("frame_correction", 0.0)),
    )
    sched.validate()
    return sched
