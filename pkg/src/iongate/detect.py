"""Photon-count detection model, reference calibration, POVMs, synthesis.

State readout collects fluorescence photons from both ions at once; only the
number of bright ions (0, 1 or 2) is encoded in the count distribution, not
which ion is which.  A bright ion scatters Poisson(lambda_bright) counts per
detection, a dark ion Poisson(lambda_dark).  Optical pumping during the
window (a bright ion going dark or vice versa) is modeled as a single switch
at a time uniform over the window, which smears the mean count uniformly
between the two rates.  The auxiliary level scatters like any dark ion, so
leaked population is invisible to readout; it is handled downstream by the
leakage corrections.

Spin convention: the lower qubit level fluoresces.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammainc, gammaln

from .hilbert import DOWN, spin_index, spin_rotation

TWO_PI = 2.0 * np.pi


class DetectionError(ValueError):
    """Raised for invalid detection parameters or malformed histograms."""


class CalibrationError(RuntimeError):
    """Raised when reference calibration cannot proceed or converge."""


@dataclass(frozen=True)
class ReferenceModel:
    """Count-rate model for the two-ion fluorescence detection.

    repump_rate is the probability per detection that a dark ion brightens;
    depump_rate the probability a bright ion darkens; leak_prob the
    probability per qubit of preparation into the auxiliary level.
    """

    lambda_bright: float = 30.0
    lambda_dark: float = 1.0
    repump_rate: float = 0.005
    depump_rate: float = 0.005
    leak_prob: float = 0.0

    def __post_init__(self):
        if not self.lambda_bright > self.lambda_dark >= 0:
            raise DetectionError("need lambda_bright > lambda_dark >= 0")
        for name in ("repump_rate", "depump_rate", "leak_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DetectionError(f"{name} must be a probability")

    @property
    def max_count(self) -> int:
        """Last histogram bin; overflow mass is folded into it."""
        lam2 = 2.0 * self.lambda_bright
        return math.ceil(lam2 + 8.0 * math.sqrt(lam2))

    @property
    def n_bins(self) -> int:
        return self.max_count + 1


def _poisson_pmf(lam: float, n_bins: int) -> np.ndarray:
    k = np.arange(n_bins)
    if lam <= 0:
        out = np.zeros(n_bins)
        out[0] = 1.0
        return out
    logp = k * math.log(lam) - lam - gammaln(k + 1)
    out = np.exp(logp)
    out[-1] = max(1.0 - out[:-1].sum(), 0.0)  # fold the tail
    return out


def _switch_pmf(lam_lo: float, lam_hi: float, n_bins: int) -> np.ndarray:
    """Counts for a rate switching once at a uniform time during the window.

    The mean is then uniform on [lam_lo, lam_hi], and integrating the Poisson
    law over its mean gives a difference of regularized incomplete gammas.
    """
    if lam_hi <= lam_lo:
        return _poisson_pmf(lam_lo, n_bins)
    k = np.arange(n_bins)
    out = (gammainc(k + 1, lam_hi) - gammainc(k + 1, lam_lo)) / (lam_hi - lam_lo)
    out = np.clip(out, 0.0, None)
    out[-1] = max(1.0 - out[:-1].sum(), 0.0)
    return out


def single_ion_pmf(model: ReferenceModel, bright: bool) -> np.ndarray:
    """Count distribution of one ion, including the pumping correction."""
    n = model.n_bins
    sw = _switch_pmf(model.lambda_dark, model.lambda_bright, n)
    if bright:
        return (1.0 - model.depump_rate) * _poisson_pmf(model.lambda_bright, n) + (
            model.depump_rate
        ) * sw
    return (1.0 - model.repump_rate) * _poisson_pmf(model.lambda_dark, n) + (
        model.repump_rate
    ) * sw


def _fold_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    full = np.convolve(a, b)
    out = full[: a.size].copy()
    out[-1] += full[a.size :].sum()
    return out


def reference_pmfs(model: ReferenceModel) -> np.ndarray:
    """(3, n_bins) count PMFs for 0, 1 and 2 ions fluorescing."""
    pb = single_ion_pmf(model, bright=True)
    pd = single_ion_pmf(model, bright=False)
    return np.stack(
        [_fold_convolve(pd, pd), _fold_convolve(pb, pd), _fold_convolve(pb, pb)]
    )


def reference_state_pmfs(model: ReferenceModel) -> tuple[np.ndarray, np.ndarray]:
    """Count PMFs of the bright and dark reference preparations.

    Preparation leakage puts each ion of the bright reference in the (dark)
    auxiliary level with probability leak_prob; the dark reference is
    unaffected because leaked ions count exactly like dark ones.
    """
    e = model.leak_prob
    pb = single_ion_pmf(model, bright=True)
    pd = single_ion_pmf(model, bright=False)
    mix = (1.0 - e) * pb + e * pd
    return _fold_convolve(mix, mix), _fold_convolve(pd, pd)


def bright_class(i1: int, i2: int) -> int:
    """Number of fluorescing ions for a two-ion spin level."""
    return int(i1 == DOWN) + int(i2 == DOWN)


SPIN_BRIGHT_CLASS = np.array(
    [bright_class(i1, i2) for i1 in range(3) for i2 in range(3)]
)


# ---------------------------------------------------------------------------
# histograms


@dataclass
class CountHistogram:
    """Observed photon-count histogram for one measurement context."""

    bins: np.ndarray
    context: str
    phase: float | None = None

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64)
        if self.bins.ndim != 1 or (self.bins < 0).any():
            raise DetectionError("bins must be a 1-D array of non-negative counts")

    @property
    def n_trials(self) -> int:
        return int(self.bins.sum())

    def to_json(self) -> dict:
        return {
            "context": self.context,
            "phase_milliradians": None if self.phase is None else self.phase * 1e3,
            "n_trials": self.n_trials,
            "bins": [int(b) for b in self.bins],
        }

    @classmethod
    def from_json(cls, data: dict) -> "CountHistogram":
        mrad = data.get("phase_milliradians")
        hist = cls(
            bins=np.asarray(data["bins"], dtype=np.int64),
            context=data["context"],
            phase=None if mrad is None else mrad / 1e3,
        )
        if hist.n_trials != data["n_trials"]:
            raise DetectionError("histogram bins do not sum to n_trials")
        return hist


# ---------------------------------------------------------------------------
# POVMs


def analysis_rotation(phase: float | None) -> np.ndarray:
    """Global analysis pulse before detection: identity or a pi/2 rotation."""
    if phase is None:
        return np.eye(9, dtype=complex)
    return spin_rotation(np.pi / 2.0, phase)


@dataclass
class PovmSet:
    """POVM elements of one detection setting, one element per count bin."""

    elements: np.ndarray  # (n_bins, 9, 9)
    phase: float | None

    def check(self, tol: float = 1e-10) -> None:
        total = self.elements.sum(axis=0)
        if np.max(np.abs(total - np.eye(9))) > tol:
            raise DetectionError("POVM does not resolve the identity")
        for el in self.elements:
            evals = np.linalg.eigvalsh(el)
            if evals.min() < -tol:
                raise DetectionError("POVM element not positive semidefinite")


def build_povm(model: ReferenceModel, phase: float | None = None) -> PovmSet:
    """POVM of the count measurement preceded by an analysis rotation."""
    pmfs = reference_pmfs(model)  # (3, n_bins)
    r = analysis_rotation(phase)
    # P(count | spin level) depends only on the bright class of the level
    per_level = pmfs[SPIN_BRIGHT_CLASS]  # (9, n_bins)
    proj = np.einsum("si,sa,sb->iab", per_level, r.conj(), r)
    return PovmSet(elements=proj, phase=phase)


def spin_outcome_probs(
    rho: np.ndarray, model: ReferenceModel, phase: float | None
) -> np.ndarray:
    """Count-bin probabilities for a 9x9 spin density matrix."""
    r = analysis_rotation(phase)
    rot = r @ rho @ r.conj().T
    level_probs = np.real(np.diag(rot))
    pmfs = reference_pmfs(model)
    weights = np.zeros(3)
    for s, b in enumerate(SPIN_BRIGHT_CLASS):
        weights[b] += level_probs[s]
    weights = np.clip(weights, 0.0, None)
    weights /= weights.sum()
    return weights @ pmfs


def counter_rng(*parts) -> np.random.Generator:
    """Counter-based generator keyed by a hash of the given labels.

    Philox is used so independent histograms can be generated in parallel
    from disjoint, reproducible streams.
    """
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def synthesize_counts(
    rho: np.ndarray,
    model: ReferenceModel,
    phase: float | None,
    n_trials: int,
    seed,
    context: str = "",
) -> CountHistogram:
    """Draw a count histogram from the measurement model.

    ``seed`` may be anything hashable (dataset id plus indices); the same
    seed always reproduces the same histogram.
    """
    p = spin_outcome_probs(rho, model, phase)
    rng = seed if isinstance(seed, np.random.Generator) else counter_rng(seed)
    bins = rng.multinomial(n_trials, p / p.sum())
    return CountHistogram(bins=bins, context=context, phase=phase)


# ---------------------------------------------------------------------------
# reference calibration


@dataclass
class CalibrationResult:
    model: ReferenceModel
    sigma: dict[str, float] = field(default_factory=dict)
    nll: float = 0.0


_PARAM_NAMES = ("lambda_bright", "lambda_dark", "repump_rate", "depump_rate", "leak_prob")
_BOUNDS = ((5.0, 300.0), (1e-4, 15.0), (1e-7, 0.2), (1e-7, 0.2), (1e-7, 0.2))


def _raw_reference_pmfs(x, n_bins) -> tuple[np.ndarray, np.ndarray]:
    lb, ld, pr, pd, eps = x
    sw = _switch_pmf(ld, lb, n_bins)
    one_bright = (1.0 - pd) * _poisson_pmf(lb, n_bins) + pd * sw
    one_dark = (1.0 - pr) * _poisson_pmf(ld, n_bins) + pr * sw
    mix = (1.0 - eps) * one_bright + eps * one_dark
    return _fold_convolve(mix, mix), _fold_convolve(one_dark, one_dark)


def _reference_nll(x, bright_bins, dark_bins, n_bins) -> float:
    if not x[0] > x[1]:
        return 1e12
    pb, pdk = _raw_reference_pmfs(x, n_bins)
    pb = np.clip(pb, 1e-300, None)
    pdk = np.clip(pdk, 1e-300, None)
    return -float(bright_bins @ np.log(pb) + dark_bins @ np.log(pdk))


def calibrate_reference(
    bright_hist: CountHistogram,
    dark_hist: CountHistogram,
    init: ReferenceModel | None = None,
    uncertainties: bool = True,
) -> CalibrationResult:
    """Joint ML fit of the detection model to both reference histograms.

    The bright reference is sensitive to leakage (a leaked ion shows up
    dark), so leak_prob is estimated from it; the dark reference pins the
    dark rate and the repump tail.  Uncertainties come from the inverse of a
    numerical Hessian of the negative log likelihood at the optimum.
    """
    for h in (bright_hist, dark_hist):
        if h.n_trials < 100:
            raise CalibrationError("reference histogram too small to calibrate")
        if (h.bins > 0).sum() < 2:
            raise CalibrationError("degenerate reference histogram")
    n_bins = max(bright_hist.bins.size, dark_hist.bins.size)

    def padded(h):
        out = np.zeros(n_bins)
        out[: h.bins.size] = h.bins
        return out

    cb, cd = padded(bright_hist), padded(dark_hist)
    if init is not None:
        x0 = np.array(
            [
                init.lambda_bright,
                init.lambda_dark,
                max(init.repump_rate, 1e-6),
                max(init.depump_rate, 1e-6),
                max(init.leak_prob, 1e-6),
            ]
        )
    else:
        k = np.arange(n_bins)
        mean_b = float((cb @ k) / cb.sum())
        mean_d = float((cd @ k) / cd.sum())
        x0 = np.array(
            [max(mean_b / 2.0, 6.0), max(mean_d / 2.0, 0.05), 5e-3, 5e-3, 2e-3]
        )

    # warm starts sit near the optimum already; cap the polish so repeated
    # refits (bootstrap) stay cheap
    maxiter = 60 if init is not None else 400
    res = minimize(
        _reference_nll,
        x0,
        args=(cb, cd, n_bins),
        method="L-BFGS-B",
        bounds=_BOUNDS,
        options={
            "eps": np.array([1e-4, 1e-5, 1e-7, 1e-7, 1e-7]),
            "maxiter": maxiter,
        },
    )
    if not np.isfinite(res.fun):
        raise CalibrationError("calibration optimization failed")
    x = res.x
    f0 = float(res.fun)

    if not uncertainties:
        sig = {name: float("nan") for name in _PARAM_NAMES}
    else:
        # curvature-based uncertainties (central differences on the same
        # scales)
        steps = np.array([1e-3, 1e-4, 1e-6, 1e-6, 1e-6])
        n = x.size
        hess = np.zeros((n, n))
        for i in range(n):
            for j in range(i, n):
                ei = np.zeros(n)
                ej = np.zeros(n)
                ei[i] = steps[i]
                ej[j] = steps[j]
                fpp = _reference_nll(x + ei + ej, cb, cd, n_bins)
                fpm = _reference_nll(x + ei - ej, cb, cd, n_bins)
                fmp = _reference_nll(x - ei + ej, cb, cd, n_bins)
                fmm = _reference_nll(x - ei - ej, cb, cd, n_bins)
                hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (
                    4.0 * steps[i] * steps[j]
                )
        try:
            cov = np.linalg.pinv(hess)
            sig = {
                name: float(np.sqrt(max(cov[i, i], 0.0)))
                for i, name in enumerate(_PARAM_NAMES)
            }
        except np.linalg.LinAlgError:
            sig = {name: float("nan") for name in _PARAM_NAMES}

    model = ReferenceModel(
        lambda_bright=float(x[0]),
        lambda_dark=float(x[1]),
        repump_rate=float(x[2]),
        depump_rate=float(x[3]),
        leak_prob=float(x[4]),
    )
    return CalibrationResult(model=model, sigma=sig, nll=float(f0))
