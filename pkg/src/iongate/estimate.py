"""Fidelity estimation from photon-count histograms.

Two estimation routes are provided for the same datasets:

* parity route: maximum-likelihood populations from the no-analysis
  histograms, a joint ML fit of the parity oscillation across analysis
  phases, and the standard combination of the two into a Bell fidelity.
* linear route: one linear functional of all raw counts whose coefficients
  are constrained so its expectation equals the target-state fidelity for
  every density matrix, with the coefficient freedom used to minimize the
  multinomial variance at the target state.  Being linear in the counts it
  is free of the boundary bias the parity route picks up near fidelity 1.

Both routes end with an exact algebraic leakage correction.  Bootstrap
resampling (data + reference + detection-mean jitter) provides confidence
intervals; a trigger/analysis split supports unbiased dataset selection.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.linalg import qr as scipy_qr
from scipy.optimize import minimize

from . import detect
from .detect import CountHistogram, ReferenceModel, counter_rng
from .hilbert import (
    bell_phi,
    bell_psi_minus,
    spin_index,
    spin_rotation,
    spin_z_phase,
)
from .parallel import ordered_map

TARGET_SYMMETRIC = "symmetric"
TARGET_ANTISYMMETRIC = "antisymmetric"
_PHASE_TOL = 1e-9


class EstimationError(RuntimeError):
    """Raised when an estimator cannot produce a result."""


class FeasibilityError(EstimationError):
    """Raised when the linear-estimator constraint has no solution."""


def target_state(target: str) -> np.ndarray:
    if target == TARGET_SYMMETRIC:
        return bell_phi()
    if target == TARGET_ANTISYMMETRIC:
        return bell_psi_minus()
    raise EstimationError(f"unknown target {target!r}")


def leak_projectors() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Diagonal projectors onto the leaked-population sectors.

    A: one ion leaked, the other in the upper level; B: one ion leaked, the
    other in the lower (bright) level; C: both leaked.
    """
    def diag(*indices):
        m = np.zeros((9, 9))
        for i in indices:
            m[i, i] = 1.0
        return m

    m_a = diag(spin_index(1, 2), spin_index(2, 1))
    m_b = diag(spin_index(0, 2), spin_index(2, 0))
    m_c = diag(spin_index(2, 2))
    return m_a, m_b, m_c


def leak_occupancies(target: str, eps: float) -> tuple[float, float, float]:
    """Expected occupancies of the A/B/C leak sectors after preparation.

    Per-qubit leakage eps survives the sequence in different sectors for the
    two targets: the entangling sequence flips the partner of a leaked ion
    into the upper level, and the addressing sequence flips ion 1 back.
    """
    if target == TARGET_SYMMETRIC:
        return 2.0 * eps * (1.0 - eps), 0.0, eps * eps
    if target == TARGET_ANTISYMMETRIC:
        return eps * (1.0 - eps), eps * (1.0 - eps), eps * eps
    raise EstimationError(f"unknown target {target!r}")


def correct_leakage(f_measured: float, eps: float, target: str) -> float:
    """Invert the leakage contribution to a measured fidelity."""
    if target == TARGET_SYMMETRIC:
        return (f_measured - eps * (1.0 - eps) - 0.5 * eps * eps) / (1.0 - eps) ** 2
    if target == TARGET_ANTISYMMETRIC:
        return (f_measured - 0.5 * eps * (1.0 - eps)) / (1.0 - eps) ** 2
    raise EstimationError(f"unknown target {target!r}")


def apply_leakage(f_true: float, eps: float, target: str) -> float:
    """Forward map from true fidelity to the measured (uncorrected) one."""
    if target == TARGET_SYMMETRIC:
        return (1.0 - eps) ** 2 * f_true + eps * (1.0 - eps) + 0.5 * eps * eps
    if target == TARGET_ANTISYMMETRIC:
        return (1.0 - eps) ** 2 * f_true + 0.5 * eps * (1.0 - eps)
    raise EstimationError(f"unknown target {target!r}")


# ---------------------------------------------------------------------------
# datasets


def _on_phase_grid(phase: float, step: float) -> bool:
    return abs(phase - round(phase / step) * step) < _PHASE_TOL


@dataclass
class Dataset:
    """One experiment's histograms plus its detection references."""

    dataset_id: str
    target: str
    population: list
    parity: list
    reference_bright: CountHistogram
    reference_dark: CountHistogram

    def __post_init__(self):
        if self.target not in (TARGET_SYMMETRIC, TARGET_ANTISYMMETRIC):
            raise EstimationError(f"unknown target {self.target!r}")
        for h in [*self.population, *self.parity]:
            if h.n_trials <= 0:
                raise EstimationError("empty histogram in dataset")
        for h in self.parity:
            if h.phase is None:
                raise EstimationError("parity histogram without a phase")
            if self.target == TARGET_ANTISYMMETRIC and not _on_phase_grid(
                h.phase, math.pi / 3.0
            ):
                raise EstimationError(
                    "antisymmetric parity phases must be multiples of pi/3"
                )

    def phases(self) -> list:
        seen = []
        for h in self.parity:
            if not any(abs(h.phase - p) < _PHASE_TOL for p in seen):
                seen.append(h.phase)
        return sorted(seen)


def _pooled(hists, n_bins: int) -> np.ndarray:
    out = np.zeros(n_bins)
    for h in hists:
        m = min(h.bins.size, n_bins)
        out[:m] += h.bins[:m]
        if h.bins.size > n_bins:
            out[-1] += h.bins[n_bins:].sum()
    return out


# ---------------------------------------------------------------------------
# ML populations and the parity oscillation


def ml_populations(
    hists, model: ReferenceModel, *, tol: float = 1e-10, max_iter: int = 5000
) -> np.ndarray:
    """EM fit of (P0, P1, P2) bright-class weights to count histograms."""
    if isinstance(hists, CountHistogram):
        hists = [hists]
    pmfs = _class_pmfs(model)
    counts = _pooled(hists, model.n_bins)
    n = counts.sum()
    if n <= 0:
        raise EstimationError("no counts to fit")
    w = np.full(3, 1.0 / 3.0)
    last = -np.inf
    for _ in range(max_iter):
        p = w @ pmfs
        p = np.clip(p, 1e-300, None)
        ll = counts @ np.log(p)
        resp = (w[:, None] * pmfs) / p
        w = resp @ counts / n
        # relative tolerance so the criterion scales with the count volume
        if abs(ll - last) < tol * (1.0 + abs(ll)):
            return w
        last = ll
    raise EstimationError("population EM did not converge")


def parity_value(populations: np.ndarray) -> float:
    return float(populations[0] + populations[2] - populations[1])


@dataclass
class ParityFit:
    amplitude: float
    phase0: float
    loglik: float
    naive_parities: np.ndarray
    phases: np.ndarray


def _amp_objective(x, s2, n1, n02):
    a = x[0]
    sv = np.sin(s2 + x[1])
    cv = np.cos(s2 + x[1])
    p1 = np.clip((1.0 - a * sv) / 2.0, 1e-12, None)
    p02 = np.clip((1.0 + a * sv) / 2.0, 1e-12, None)
    f = -(n1 @ np.log(p1) + n02 @ np.log(p02))
    common = -n1 / (2.0 * p1) + n02 / (2.0 * p02)
    ga = -(common @ sv)
    gphi = -(common @ cv) * a
    return f, np.array([ga, gphi])


def fit_parity_oscillation(
    parity_hists, model: ReferenceModel, *, tol: float = 1e-8, max_iter: int = 500
) -> ParityFit:
    """Joint ML fit of A sin(2phi + phi0) to parity histograms.

    All phases share the amplitude and offset; the split of the even-parity
    weight between zero and two bright ions is a per-phase nuisance.  The
    amplitude is a probability difference so it is constrained to [0, 1];
    that bound is what makes this route's estimate biased low near 1.
    """
    groups = {}
    for h in parity_hists:
        if h.phase is None:
            raise EstimationError("parity histogram without a phase")
        key = round(h.phase / _PHASE_TOL)
        groups.setdefault(key, []).append(h)
    if len(groups) < 4:
        raise EstimationError("parity fit needs at least 4 distinct phases")

    pmfs = _class_pmfs(model)
    phases = []
    counts = []
    for key in sorted(groups):
        hs = groups[key]
        phases.append(hs[0].phase)
        counts.append(_pooled(hs, model.n_bins))
    phases = np.array(phases)
    counts = np.array(counts)  # (J, n_bins)

    # moment-style starting point: hard-assign count bins to their most
    # likely bright class, then least-squares the resulting parities
    labels = np.argmax(pmfs, axis=0)
    hard = np.stack([counts[:, labels == b].sum(axis=1) for b in range(3)], axis=1)
    hard = hard / np.clip(hard.sum(axis=1, keepdims=True), 1.0, None)
    naive = hard[:, 0] + hard[:, 2] - hard[:, 1]
    design = np.column_stack([np.sin(2 * phases), np.cos(2 * phases)])
    ab, *_ = np.linalg.lstsq(design, naive, rcond=None)
    amp = float(np.clip(np.hypot(*ab), 1e-3, 0.999))
    phi0 = float(np.arctan2(ab[1], ab[0]))

    s2 = 2.0 * phases
    x = np.array([amp, phi0])
    m = np.full(phases.size, 0.5)
    last = -np.inf
    for _ in range(max_iter):
        sv = np.sin(s2 + x[1])
        p1 = np.clip((1.0 - x[0] * sv) / 2.0, 1e-12, 1.0 - 1e-12)
        w = np.stack([(1.0 - p1) * m, p1, (1.0 - p1) * (1.0 - m)], axis=1)
        p = np.clip(w @ pmfs, 1e-300, None)
        ll = float((counts * np.log(p)).sum())
        if abs(ll - last) < tol * (1.0 + abs(ll)):
            return ParityFit(
                float(x[0]),
                float(math.remainder(x[1], 2.0 * math.pi)),
                ll,
                naive,
                phases,
            )
        last = ll
        # E-step: soft class counts per phase
        resp = w[:, :, None] * pmfs[None, :, :] / p[:, None, :]
        soft = np.einsum("jbk,jk->jb", resp, counts)
        # M-step: nuisance split in closed form, then the shared sinusoid
        m = soft[:, 0] / np.clip(soft[:, 0] + soft[:, 2], 1e-300, None)
        res = minimize(
            _amp_objective,
            x,
            args=(s2, soft[:, 1], soft[:, 0] + soft[:, 2]),
            jac=True,
            method="L-BFGS-B",
            bounds=[(0.0, 1.0), (None, None)],
        )
        x = res.x
    raise EstimationError("parity oscillation fit did not converge")


def bell_fidelity_from_parity(p0: float, p2: float, amplitude: float) -> float:
    """Even-target fidelity from end populations and oscillation amplitude."""
    return (p0 + p2) / 2.0 + amplitude / 2.0


def bell_fidelity_from_mean_parity(p1: float, mean_parity: float) -> float:
    """Odd-target fidelity from the one-bright weight and average parity."""
    return p1 / 2.0 - mean_parity / 2.0


def bell_fidelity_parity(dataset: Dataset, model: ReferenceModel) -> float:
    """Measured (leakage-uncorrected) fidelity from the parity route."""
    pops = ml_populations(dataset.population, model)
    if dataset.target == TARGET_SYMMETRIC:
        fit = fit_parity_oscillation(dataset.parity, model)
        return float(bell_fidelity_from_parity(pops[0], pops[2], fit.amplitude))
    return antisym_fidelity(dataset, model)


def antisym_fidelity(dataset: Dataset, model: ReferenceModel) -> float:
    """Measured fidelity of the odd Bell state: parity is phase-independent.

    The parity histograms from the pi/3-multiple phases are pooled; their
    common parity should sit near -1 and enters with a minus sign.
    """
    if dataset.target != TARGET_ANTISYMMETRIC:
        raise EstimationError("antisym_fidelity needs an antisymmetric dataset")
    for h in dataset.parity:
        if not _on_phase_grid(h.phase, math.pi / 3.0):
            raise EstimationError(
                "antisymmetric parity phases must be multiples of pi/3"
            )
    pops = ml_populations(dataset.population, model)
    par = parity_value(ml_populations(dataset.parity, model))
    return float(bell_fidelity_from_mean_parity(pops[1], par))


# ---------------------------------------------------------------------------
# linear estimator


_IU = np.triu_indices(9, 1)


def _herm_to_vec(m: np.ndarray) -> np.ndarray:
    return np.concatenate([np.real(np.diag(m)), np.real(m[_IU]), np.imag(m[_IU])])


def _herm_to_vec_stack(els: np.ndarray) -> np.ndarray:
    """(k, 9, 9) Hermitian stack -> (k, 81) real coordinate rows."""
    d = np.arange(9)
    return np.concatenate(
        [
            np.real(els[:, d, d]),
            np.real(els[:, _IU[0], _IU[1]]),
            np.imag(els[:, _IU[0], _IU[1]]),
        ],
        axis=1,
    )


@dataclass
class LinearCoeffs:
    """Count-bin coefficients of the unbiased linear fidelity estimator."""

    target: str
    settings: tuple | None  # analysis phases, None entry = population
    n_per_setting: tuple
    bin_starts: np.ndarray | None  # None when built from raw POVM stacks
    alphas: list  # one coefficient vector per setting
    leak_coeffs: tuple  # (A, B, C) multipliers of the leak sectors
    variance: float  # predicted variance at the pure target state


def default_bin_starts(model: ReferenceModel, n_bands: int = 16) -> np.ndarray:
    """Quantile count-bin bands of the equal-weight reference mixture."""
    mix = _class_pmfs(model).mean(axis=0)
    cdf = np.cumsum(mix)
    qs = np.linspace(0.0, 1.0, n_bands + 1)[:-1]
    starts = np.unique(np.searchsorted(cdf, qs, side="left"))
    if starts[0] != 0:
        starts = np.concatenate([[0], starts])
    return starts.astype(np.int64)


@lru_cache(maxsize=256)
def _class_pmfs(model: ReferenceModel) -> np.ndarray:
    out = detect.reference_pmfs(model)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=256)
def _level_pmfs(model: ReferenceModel) -> np.ndarray:
    out = _class_pmfs(model)[detect.SPIN_BRIGHT_CLASS].copy()
    out.setflags(write=False)
    return out


def _binned_povm(model: ReferenceModel, phase, bin_starts: np.ndarray) -> np.ndarray:
    # binning before the rotation einsum keeps the element stack small
    per_level = np.add.reduceat(_level_pmfs(model), bin_starts, axis=1)
    r = detect.analysis_rotation(phase)
    return np.einsum("si,sa,sb->iab", per_level, r.conj(), r)


def linear_coeffs_for_povms(
    povms,
    n_per_setting,
    target: str,
    *,
    ridge: float = 1e-12,
    settings=None,
    bin_starts: np.ndarray | None = None,
) -> LinearCoeffs:
    """Minimum-variance coefficients for explicit POVM element stacks.

    ``povms`` is a list of (k_j, 9, 9) element stacks, one per measurement
    setting, with ``n_per_setting`` trials each.  The equality constraint
    ties the coefficient-weighted element sum to the target-state projector
    plus free multiples of the three leak-sector projectors (those sectors
    are unresolvable by the measurement, so their multipliers come out of
    the solve and are subtracted later using known occupancies).  Subject to
    that, the multinomial variance at the pure target state is minimized; a
    tiny ridge keeps the KKT system well posed.
    """
    if not povms:
        raise EstimationError("no measurement settings given")
    if len(povms) != len(n_per_setting):
        raise EstimationError("one trial count per POVM setting required")
    psi = target_state(target)
    rho_t = np.outer(psi, psi.conj())

    blocks = []
    probs = []
    sizes = []
    for povm in povms:
        povm = np.asarray(povm)
        blocks.append(_herm_to_vec_stack(povm).T)
        probs.append(np.real(np.einsum("iab,ba->i", povm, rho_t)))
        sizes.append(povm.shape[0])
    m_a, m_b, m_c = leak_projectors()
    leak_cols = np.stack(
        [-_herm_to_vec(m_a), -_herm_to_vec(m_b), -_herm_to_vec(m_c)], axis=1
    )
    e_full = np.concatenate(blocks + [leak_cols], axis=1)  # (81, N+3)
    t_full = _herm_to_vec(rho_t)

    keep = (np.abs(e_full).max(axis=1) > 1e-13) | (np.abs(t_full) > 1e-13)
    dropped_t = t_full[~keep]
    if dropped_t.size and np.abs(dropped_t).max() > 1e-10:
        raise FeasibilityError(
            "target has components outside the measurable span; residual "
            f"{np.abs(dropped_t).max():.2e}"
        )
    e = e_full[keep]
    t = t_full[keep]
    # keep a maximal independent subset of the constraint rows; any dropped
    # dependent row is re-checked by the residual test below
    _, rdiag, piv = scipy_qr(e.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rdiag))
    rank = int((diag > max(diag[0], 1.0) * 1e-12).sum()) if diag.size else 0
    e = e[piv[:rank]]
    t = t[piv[:rank]]

    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_alpha = int(offsets[-1])
    n_var = n_alpha + 3
    h = np.zeros((n_var, n_var))
    for j, (p, n_j) in enumerate(zip(probs, n_per_setting)):
        if n_j <= 0:
            raise EstimationError("settings need positive trial counts")
        sl = slice(offsets[j], offsets[j + 1])
        h[sl, sl] = (np.diag(p) - np.outer(p, p)) * (2.0 / n_j)
    h += ridge * np.eye(n_var)

    kkt = np.block([[h, e.T], [e, np.zeros((e.shape[0], e.shape[0]))]])
    rhs = np.concatenate([np.zeros(n_var), t])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    x = sol[:n_var]

    resid_vec = e_full @ x - t_full
    resid = np.zeros((9, 9), complex)
    iu = np.triu_indices(9, 1)
    resid[np.diag_indices(9)] = resid_vec[:9]
    resid[iu] = resid_vec[9:45] + 1j * resid_vec[45:]
    resid += np.triu(resid, 1).conj().T
    op_norm = float(np.linalg.norm(resid, 2))
    if op_norm > 1e-8:
        raise FeasibilityError(
            f"linear estimator constraint unsatisfied; operator-norm residual {op_norm:.2e}"
        )

    alphas = [x[offsets[j] : offsets[j + 1]].copy() for j in range(len(povms))]
    var = 0.0
    for alpha, p, n_j in zip(alphas, probs, n_per_setting):
        mean = alpha @ p
        var += (alpha**2 @ p - mean**2) / n_j
    return LinearCoeffs(
        target=target,
        settings=settings,
        n_per_setting=tuple(int(n) for n in n_per_setting),
        bin_starts=bin_starts,
        alphas=alphas,
        leak_coeffs=tuple(float(v) for v in x[n_alpha:]),
        variance=float(var),
    )


def linear_coeffs(
    model: ReferenceModel,
    target: str,
    settings,
    *,
    bin_starts: np.ndarray | None = None,
    ridge: float = 1e-12,
) -> LinearCoeffs:
    """Minimum-variance coefficients for count-binned detection settings.

    ``settings`` is a list of (phase_or_None, n_trials); the POVM elements
    are the count-band outcomes of the detection model under each setting's
    analysis rotation.
    """
    if not settings:
        raise EstimationError("no measurement settings given")
    if bin_starts is None:
        bin_starts = default_bin_starts(model)
    bin_starts = np.asarray(bin_starts, dtype=np.int64)
    povms = [_binned_povm(model, ph, bin_starts) for ph, _ in settings]
    return linear_coeffs_for_povms(
        povms,
        [n for _, n in settings],
        target,
        ridge=ridge,
        settings=tuple(ph for ph, _ in settings),
        bin_starts=bin_starts,
    )


def _bin_counts(bins: np.ndarray, bin_starts: np.ndarray, n_bins: int) -> np.ndarray:
    padded = np.zeros(n_bins)
    m = min(bins.size, n_bins)
    padded[:m] = bins[:m]
    if bins.size > n_bins:
        padded[-1] += bins[n_bins:].sum()
    return np.add.reduceat(padded, bin_starts)


def _match_setting(phase, settings):
    for idx, ph in enumerate(settings):
        if phase is None and ph is None:
            return idx
        if phase is not None and ph is not None and abs(phase - ph) < _PHASE_TOL:
            return idx
    raise EstimationError(f"no coefficient setting for phase {phase!r}")


def linear_expectation(
    coeffs: LinearCoeffs, rho: np.ndarray, model: ReferenceModel
) -> float:
    """Exact expectation of the raw count functional for a known state.

    Uses the state's actual leak-sector occupancies, so by construction this
    equals Tr[rho |psi><psi|] for every density matrix (before the
    preparation renormalization applied by linear_fidelity).
    """
    if coeffs.settings is None or coeffs.bin_starts is None:
        raise EstimationError(
            "coefficients built from raw POVM stacks carry no count binning"
        )
    total = 0.0
    for ph, alpha in zip(coeffs.settings, coeffs.alphas):
        povm = _binned_povm(model, ph, coeffs.bin_starts)
        p = np.real(np.einsum("iab,ba->i", povm, rho))
        total += alpha @ p
    for coef, proj in zip(coeffs.leak_coeffs, leak_projectors()):
        total -= coef * float(np.real(np.trace(proj @ rho)))
    return float(total)


def linear_fidelity(
    dataset: Dataset, coeffs: LinearCoeffs, model: ReferenceModel
) -> float:
    """Evaluate the linear estimator on a dataset, leakage included.

    The unresolvable leak-sector multipliers are subtracted using the
    preparation-leakage occupancies implied by the calibrated leak
    probability, making the result an estimate of the true fidelity.
    """
    if dataset.target != coeffs.target:
        raise EstimationError("dataset/coefficients target mismatch")
    if coeffs.settings is None or coeffs.bin_starts is None:
        raise EstimationError(
            "coefficients built from raw POVM stacks carry no count binning"
        )
    groups = [[] for _ in coeffs.settings]
    for h in dataset.population:
        groups[_match_setting(None, coeffs.settings)].append(h)
    for h in dataset.parity:
        groups[_match_setting(h.phase, coeffs.settings)].append(h)
    total = 0.0
    for alpha, hs in zip(coeffs.alphas, groups):
        if not hs:
            raise EstimationError("dataset missing a coefficient setting")
        binned = np.zeros(alpha.size)
        n = 0
        for h in hs:
            binned += _bin_counts(h.bins, coeffs.bin_starts, model.n_bins)
            n += h.n_trials
        total += alpha @ binned / n
    eps = model.leak_prob
    occ = leak_occupancies(dataset.target, eps)
    for coef, o in zip(coeffs.leak_coeffs, occ):
        total -= coef * o
    # renormalize by the intact-preparation weight so this estimates the
    # same qubit-sector fidelity as the corrected parity route
    return float(total / (1.0 - eps) ** 2)


def coeffs_for_dataset(
    dataset: Dataset, model: ReferenceModel, *, bin_starts=None, ridge: float = 1e-12
) -> LinearCoeffs:
    """Build linear coefficients matching a dataset's measurement settings."""
    settings = [(None, sum(h.n_trials for h in dataset.population))]
    for ph in dataset.phases():
        n = sum(h.n_trials for h in dataset.parity if abs(h.phase - ph) < _PHASE_TOL)
        settings.append((ph, n))
    return linear_coeffs(
        model, dataset.target, settings, bin_starts=bin_starts, ridge=ridge
    )


# ---------------------------------------------------------------------------
# point estimates, bootstrap, trigger selection


METHOD_PARITY = "parity-ML"
METHOD_LINEAR = "linear"


@dataclass
class FidelityEstimate:
    point: float
    ci68: tuple
    method: str
    leakage_corrected: bool = True
    truncated: bool = False
    boot_mean: float = float("nan")
    boot_median: float = float("nan")
    raw_point: float = float("nan")


def _estimate_once(dataset, model, method, coeffs=None) -> float:
    if method == METHOD_PARITY:
        f_m = bell_fidelity_parity(dataset, model)
        return correct_leakage(f_m, model.leak_prob, dataset.target)
    if method == METHOD_LINEAR:
        if coeffs is None:
            coeffs = coeffs_for_dataset(dataset, model)
        return linear_fidelity(dataset, coeffs, model)
    raise EstimationError(f"unknown method {method!r}")


def point_estimate(dataset: Dataset, method: str) -> tuple:
    """Calibrate from the dataset's references and estimate once."""
    cal = detect.calibrate_reference(dataset.reference_bright, dataset.reference_dark)
    coeffs = None
    if method == METHOD_LINEAR:
        coeffs = coeffs_for_dataset(dataset, cal.model)
    return _estimate_once(dataset, cal.model, method, coeffs), cal.model


def _resample_hist(h: CountHistogram, rng) -> CountHistogram:
    p = h.bins / h.n_trials
    return CountHistogram(rng.multinomial(h.n_trials, p), h.context, h.phase)


def _jitter_model(model: ReferenceModel, rng, jitter: float) -> ReferenceModel:
    if jitter <= 0:
        return model
    lb = model.lambda_bright * (1.0 + jitter * rng.standard_normal())
    ld = model.lambda_dark * (1.0 + jitter * rng.standard_normal())
    ld = min(max(ld, 1e-4), lb * 0.9)
    return replace(model, lambda_bright=lb, lambda_dark=ld)


def _bootstrap_replicate(args):
    dataset, method, bin_starts, jitter, warm, rep = args
    rng = counter_rng(dataset.dataset_id, "bootstrap", rep)
    pop = [_resample_hist(h, rng) for h in dataset.population]
    par = [_resample_hist(h, rng) for h in dataset.parity]
    rb = _resample_hist(dataset.reference_bright, rng)
    rd = _resample_hist(dataset.reference_dark, rng)
    boot = Dataset(dataset.dataset_id, dataset.target, pop, par, rb, rd)
    try:
        cal = detect.calibrate_reference(rb, rd, init=warm, uncertainties=False)
        model = _jitter_model(cal.model, rng, jitter)
        coeffs = None
        if method == METHOD_LINEAR:
            coeffs = coeffs_for_dataset(boot, model, bin_starts=bin_starts)
        return _estimate_once(boot, model, method, coeffs)
    except EstimationError:
        return float("nan")


def bootstrap(
    dataset: Dataset,
    method: str,
    *,
    n_boot: int = 5000,
    jitter: float = 0.01,
    threads: int = 1,
) -> FidelityEstimate:
    """Bootstrap CI: resample data and reference, jitter detection means.

    Every replicate re-runs the full analysis including calibration.  The
    point estimate comes from the unresampled dataset; replicate values
    above 1 are truncated to 1, and a point above 1 sets the flag.
    """
    raw_point, model = point_estimate(dataset, method)
    bin_starts = default_bin_starts(model)
    jobs = [(dataset, method, bin_starts, jitter, model, r) for r in range(n_boot)]
    if threads > 1:
        vals = ordered_map(_bootstrap_replicate, jobs, threads=threads)
    else:
        vals = [_bootstrap_replicate(j) for j in jobs]
    vals = np.array(vals, dtype=float)
    vals = vals[np.isfinite(vals)]
    if vals.size < n_boot * 0.95:
        raise EstimationError("too many bootstrap replicates failed")
    vals = np.minimum(vals, 1.0)
    lo, hi = np.percentile(vals, [16.0, 84.0])
    truncated = raw_point > 1.0
    point = min(raw_point, 1.0)
    # the interval is widened (at most to the truncation boundary) so it
    # always contains the reported point estimate
    lo = min(lo, point)
    hi = min(max(hi, point), 1.0)
    return FidelityEstimate(
        point=float(point),
        ci68=(float(lo), float(hi)),
        method=method,
        leakage_corrected=True,
        truncated=bool(truncated),
        boot_mean=float(vals.mean()),
        boot_median=float(np.median(vals)),
        raw_point=float(raw_point),
    )


def trigger_split(dataset: Dataset, seed: int = 0) -> tuple:
    """Deterministic split into a trigger half and an analysis half.

    The split depends only on a hash of the dataset id (plus an optional
    seed), so selecting the dataset with the best trigger half cannot bias
    the disjoint analysis half.  Whole parity sets alternate for the
    symmetric target; each antisymmetric set is halved instead so every
    phase keeps data in both halves.
    """
    rng = counter_rng(dataset.dataset_id, "trigger-split", seed)
    offset = int(rng.integers(2))

    pop_a = [h for i, h in enumerate(dataset.population) if i % 2 == offset]
    pop_b = [h for i, h in enumerate(dataset.population) if i % 2 != offset]

    if dataset.target == TARGET_SYMMETRIC:
        par_a = [h for i, h in enumerate(dataset.parity) if i % 2 == offset]
        par_b = [h for i, h in enumerate(dataset.parity) if i % 2 != offset]
    else:
        par_a, par_b = [], []
        for h in dataset.parity:
            half = rng.multivariate_hypergeometric(h.bins, h.n_trials // 2)
            par_a.append(CountHistogram(half, h.context, h.phase))
            par_b.append(CountHistogram(h.bins - half, h.context, h.phase))

    def mk(suffix, pop, par):
        return Dataset(
            dataset.dataset_id + suffix,
            dataset.target,
            pop,
            par,
            dataset.reference_bright,
            dataset.reference_dark,
        )

    return mk("/trigger", pop_a, par_a), mk("/analysis", pop_b, par_b)


# ---------------------------------------------------------------------------
# synthetic states and datasets


def dephasing_limited_state(
    fidelity: float, target: str = TARGET_SYMMETRIC
) -> np.ndarray:
    """Spin state of a gate limited by motional dephasing.

    Dephasing during the loop only shrinks the Bell coherence; populations
    stay balanced.  The family is parameterized directly by its fidelity.
    For the antisymmetric target the dephasing acts before the addressing
    pulse, so the orthogonal partner is the conjugated Bell state pushed
    through that same pulse.
    """
    if not 0.5 <= fidelity <= 1.0:
        raise EstimationError("dephasing-limited fidelity must be in [0.5, 1]")
    phi = bell_phi()
    phi_c = phi.conj()  # orthogonal partner with the opposite coherence sign
    if target == TARGET_SYMMETRIC:
        psi, psi_c = phi, phi_c
    elif target == TARGET_ANTISYMMETRIC:
        v = _addressing_unitary()
        psi, psi_c = v @ phi, v @ phi_c
    else:
        raise EstimationError(f"unknown target {target!r}")
    rho = np.outer(psi, psi.conj())
    rho_c = np.outer(psi_c, psi_c.conj())
    return fidelity * rho + (1.0 - fidelity) * rho_c


def _addressing_unitary() -> np.ndarray:
    # ideal spin-space action of the echo that turns the symmetric Bell state
    # into the singlet: pi/2 pulse, differential z phase of pi with the common
    # part corrected to +pi/2, pi pulse, matched idle, pi/2 pulse, all on
    # axis pi/4
    chi = math.pi / 4.0
    return (
        spin_rotation(math.pi / 2.0, chi)
        @ spin_rotation(math.pi, chi)
        @ spin_z_phase(math.pi, 0.0)
        @ spin_rotation(math.pi / 2.0, chi)
    )


def embed_leak(rho: np.ndarray, eps: float, target: str) -> np.ndarray:
    """Mix preparation leakage into a qubit-sector density matrix.

    The leaked sectors after the sequence differ between the targets (the
    entangling gate flips a leaked ion's partner up; addressing flips ion 1
    back down), matching leak_occupancies exactly.
    """
    out = (1.0 - eps) ** 2 * rho.astype(complex)
    if target == TARGET_SYMMETRIC:
        singles = (spin_index(1, 2), spin_index(2, 1))
    elif target == TARGET_ANTISYMMETRIC:
        singles = (spin_index(0, 2), spin_index(2, 1))
    else:
        raise EstimationError(f"unknown target {target!r}")
    for idx in singles:
        out[idx, idx] += eps * (1.0 - eps)
    out[spin_index(2, 2), spin_index(2, 2)] += eps * eps
    return out


SYMMETRIC_PHASES = tuple(k * 2.0 * math.pi / 52.0 for k in range(52))
ANTISYM_PHASES = tuple(k * math.pi / 3.0 for k in range(6))


def synthesize_dataset(
    rho: np.ndarray,
    model: ReferenceModel,
    dataset_id: str,
    target: str,
    *,
    n_population_sets: int = 40,
    trials_per_set: int = 200,
    parity_phases=None,
    parity_repeats: int | None = None,
    n_reference: int = 18500,
) -> Dataset:
    """Draw a complete synthetic dataset, references included."""
    if parity_phases is None:
        parity_phases = (
            SYMMETRIC_PHASES if target == TARGET_SYMMETRIC else ANTISYM_PHASES
        )
    if parity_repeats is None:
        parity_repeats = 1 if target == TARGET_SYMMETRIC else 7
    population = [
        detect.synthesize_counts(
            rho, model, None, trials_per_set, (dataset_id, "population", i),
            "population",
        )
        for i in range(n_population_sets)
    ]
    parity = []
    idx = 0
    for rep in range(parity_repeats):
        for ph in parity_phases:
            parity.append(
                detect.synthesize_counts(
                    rho, model, ph, trials_per_set, (dataset_id, "parity", idx),
                    "parity",
                )
            )
            idx += 1
    bright_pmf, dark_pmf = detect.reference_state_pmfs(model)
    rng_b = counter_rng(dataset_id, "reference_bright")
    rng_d = counter_rng(dataset_id, "reference_dark")
    ref_b = CountHistogram(
        rng_b.multinomial(n_reference, bright_pmf), "reference_bright"
    )
    ref_d = CountHistogram(rng_d.multinomial(n_reference, dark_pmf), "reference_dark")
    return Dataset(dataset_id, target, population, parity, ref_b, ref_d)


# ---------------------------------------------------------------------------
# dataset bundles on disk


def save_bundle(dataset: Dataset, dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)

    def dump(hist, name):
        with open(os.path.join(dirpath, name), "w") as fh:
            json.dump(hist.to_json(), fh)
        return name

    manifest = {
        "dataset_id": dataset.dataset_id,
        "target_state": dataset.target,
        "phases": [h.phase for h in dataset.parity],
        "population_files": [
            dump(h, f"population_{i:03d}.json")
            for i, h in enumerate(dataset.population)
        ],
        "parity_files": [
            dump(h, f"parity_{i:03d}.json") for i, h in enumerate(dataset.parity)
        ],
        "reference_files": [
            dump(dataset.reference_bright, "reference_bright.json"),
            dump(dataset.reference_dark, "reference_dark.json"),
        ],
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_bundle(dirpath: str) -> Dataset:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)

    def read(name):
        with open(os.path.join(dirpath, name)) as fh:
            return CountHistogram.from_json(json.load(fh))

    ref_files = manifest["reference_files"]
    if len(ref_files) != 2:
        raise EstimationError("bundle must list bright and dark reference files")
    return Dataset(
        dataset_id=manifest["dataset_id"],
        target=manifest["target_state"],
        population=[read(n) for n in manifest["population_files"]],
        parity=[read(n) for n in manifest["parity_files"]],
        reference_bright=read(ref_files[0]),
        reference_dark=read(ref_files[1]),
    )


# ---------------------------------------------------------------------------
# bias harness


@dataclass
class BiasReport:
    """Estimator bias measured against known synthetic truths."""

    entries: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {str(k): dict(v) for k, v in self.entries.items()}


def _bias_replicate(args):
    f_true, eps, model, coeffs, shape, rep = args
    rho = embed_leak(dephasing_limited_state(f_true), eps, TARGET_SYMMETRIC)
    ds = synthesize_dataset(
        rho,
        model,
        f"bias-{f_true}-{rep}",
        TARGET_SYMMETRIC,
        n_population_sets=shape[0],
        trials_per_set=shape[2],
        parity_phases=tuple(
            k * 2.0 * math.pi / shape[1] for k in range(shape[1])
        ),
    )
    f_lin = linear_fidelity(ds, coeffs, model)
    f_m = bell_fidelity_parity(ds, model)
    f_par = correct_leakage(f_m, eps, TARGET_SYMMETRIC)
    return f_lin, f_par


def bias_harness(
    f_targets=(0.5, 0.99, 0.999),
    n_replicates: int = 1000,
    *,
    eps: float = 1.7e-3,
    model: ReferenceModel | None = None,
    shape=(40, 52, 200),
    threads: int = 1,
) -> BiasReport:
    """Monte-Carlo bias of both estimators on dephasing-limited states.

    Estimation uses the true detection model throughout (no per-replicate
    recalibration) so the measured bias is that of the estimators alone;
    estimates are raw, without truncation at 1.
    """
    if model is None:
        model = ReferenceModel(leak_prob=eps)
    else:
        model = replace(model, leak_prob=eps)
    report = BiasReport()
    for f_true in f_targets:
        settings = [(None, shape[0] * shape[2])] + [
            (k * 2.0 * math.pi / shape[1], shape[2]) for k in range(shape[1])
        ]
        coeffs = linear_coeffs(model, TARGET_SYMMETRIC, settings)
        jobs = [
            (f_true, eps, model, coeffs, shape, rep) for rep in range(n_replicates)
        ]
        if threads > 1:
            results = ordered_map(_bias_replicate, jobs, threads=threads)
        else:
            results = [_bias_replicate(j) for j in jobs]
        lin = np.array([r[0] for r in results])
        par = np.array([r[1] for r in results])
        report.entries[f_true] = {
            "linear_bias": float(lin.mean() - f_true),
            "linear_sem": float(lin.std(ddof=1) / math.sqrt(n_replicates)),
            "parity_bias": float(par.mean() - f_true),
            "parity_sem": float(par.std(ddof=1) / math.sqrt(n_replicates)),
        }
    return report
