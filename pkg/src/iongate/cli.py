"""Configuration-driven command line tying simulation, synthesis, and analysis.

Subcommands
-----------
simulate-gate  run the pulse schedule; fidelity report plus error budget
scan           sweep one config parameter, or the decoupling coherence scan
synthesize     draw a synthetic dataset bundle from a configured true state
estimate       fidelity report for one bundle, or trigger selection over many
bias-scan      estimator bias against known truths over a fidelity grid
error-budget   per-source infidelity decomposition of the configured noise

Every command writes ``run_manifest.json`` into the output directory: the
sha256 of the resolved config, the tool version, the seeds used, and a
checksum per output file.  All parallelism reduces in submission order with
seeds fixed ahead of the pool, so a rerun with the same config and seed is
byte-identical at any ``--threads`` value.

Config files are JSON.  Keys carry explicit unit suffixes (``_mhz``,
``_us``, ``_khz``, ...); frequencies are in cycles, not angular.  Unknown
keys are rejected.  Exit codes: 0 success, 2 config error, 3 estimation
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__, detect, svgplot
from . import dynamics as dyn
from . import estimate as est
from . import sequence as seq
from .hilbert import (
    HilbertSpec,
    bell_phi,
    bell_psi_minus,
    partial_trace_motion,
    state_fidelity,
)

TWO_PI = 2.0 * math.pi

_METHOD_NAMES = {"parity": est.METHOD_PARITY, "linear": est.METHOD_LINEAR}


class ConfigError(ValueError):
    """Invalid configuration file or command arguments (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment description, loaded from unit-suffixed JSON.

    ``delta_mhz`` is optional and redundant: the tone offset is derived from
    the other frequencies, and a provided value must agree with the derived
    one to 1e-9 relative.  ``omega_mu_khz`` and ``gradient_rabi_khz``
    override the operating-point drive amplitudes when given.
    """

    # drive and mode frequencies (cycles; converted to angular internally)
    omega_g_mhz: float = 5.0
    omega_r_mhz: float = 6.9
    loops: int = 8
    interaction_time_us: float = 580.0
    idd_branch: int = 1
    delta_mhz: float | None = None
    omega_mu_khz: float | None = None
    gradient_rabi_khz: float | None = None
    addressing: bool = False
    fock_dim: int = 16

    # noise sources
    motional_dephasing_time_ms: float = 0.0
    heating_rate_per_s: float = 0.0
    drift_mean_hz: float = 0.0
    drift_std_hz: float = 0.0
    qubit_detuning_khz: float = 0.0
    initial_nbar: float = 0.0

    # photon-count detection model (means are counts per detection window)
    lambda_bright: float = 30.0
    lambda_dark: float = 1.0
    repump_rate: float = 0.005
    depump_rate: float = 0.005
    leak_prob: float = 0.0

    # dataset shape
    target_state: str = est.TARGET_SYMMETRIC
    n_population_sets: int = 40
    trials_per_set: int = 200
    parity_repeats: int | None = None
    n_reference: int = 18500
    dataset_id: str | None = None
    true_state: dict = field(
        default_factory=lambda: {"source": "family", "fidelity": 1.0}
    )

    # estimation
    method: str = "both"
    n_boot: int = 5000
    jitter: float = 0.01

    # bias harness
    f_targets: tuple = (0.5, 0.99, 0.999)
    n_replicates: int = 1000
    harness_shape: tuple = (40, 52, 200)

    # Monte-Carlo budget and scan block
    mc_samples: int = 500
    scan: dict = field(default_factory=dict)

    def __post_init__(self):
        ck = _check
        ck(self.omega_g_mhz > 0, "omega_g_mhz must be positive")
        ck(self.omega_r_mhz > self.omega_g_mhz,
           "omega_r_mhz must exceed omega_g_mhz")
        ck(self.loops >= 1, "loops must be at least 1")
        ck(self.interaction_time_us > 0, "interaction_time_us must be positive")
        ck(self.idd_branch >= 1, "idd_branch must be at least 1")
        ck(self.fock_dim >= 4, "fock_dim must be at least 4")
        ck(self.motional_dephasing_time_ms >= 0,
           "motional_dephasing_time_ms must be nonnegative")
        ck(self.heating_rate_per_s >= 0, "heating_rate_per_s must be nonnegative")
        ck(self.drift_std_hz >= 0, "drift_std_hz must be nonnegative")
        ck(self.initial_nbar >= 0, "initial_nbar must be nonnegative")
        ck(self.lambda_bright > self.lambda_dark >= 0,
           "need lambda_bright > lambda_dark >= 0")
        for name in ("repump_rate", "depump_rate", "leak_prob", "jitter"):
            v = getattr(self, name)
            ck(0.0 <= v <= 1.0, f"{name} must be in [0, 1]")
        ck(self.target_state in (est.TARGET_SYMMETRIC, est.TARGET_ANTISYMMETRIC),
           f"unknown target_state {self.target_state!r}")
        for name in ("n_population_sets", "trials_per_set", "n_reference",
                     "n_boot", "n_replicates", "mc_samples"):
            ck(getattr(self, name) >= 1, f"{name} must be at least 1")
        ck(self.parity_repeats is None or self.parity_repeats >= 1,
           "parity_repeats must be at least 1")
        ck(self.method in ("parity", "linear", "both"),
           "method must be parity, linear, or both")
        ck(len(self.f_targets) >= 1
           and all(0.5 <= float(f) <= 1.0 for f in self.f_targets),
           "f_targets must lie in [0.5, 1]")
        ck(len(self.harness_shape) == 3
           and all(int(s) >= 1 for s in self.harness_shape),
           "harness_shape must be three positive integers")
        src = self.true_state.get("source")
        ck(src in ("family", "matrix", "simulated"),
           "true_state.source must be family, matrix, or simulated")
        if src == "family":
            f = self.true_state.get("fidelity")
            ck(isinstance(f, (int, float)) and 0.5 <= f <= 1.0,
               "true_state.fidelity must lie in [0.5, 1]")
        if src == "matrix":
            ck("re" in self.true_state, "true_state.re (9x9 matrix) is required")

    # -- unit conversion into the physics layer

    def effective_params(self) -> dyn.EffectiveParams:
        try:
            p = dyn.EffectiveParams.operating_point(
                loops=self.loops,
                interaction_time=self.interaction_time_us * 1e-6,
                omega_g=TWO_PI * self.omega_g_mhz * 1e6,
                omega_r=TWO_PI * self.omega_r_mhz * 1e6,
                idd_branch=self.idd_branch,
            )
            if self.omega_mu_khz is not None:
                p = dataclasses.replace(p, Omega_mu=TWO_PI * self.omega_mu_khz * 1e3)
            if self.gradient_rabi_khz is not None:
                p = dataclasses.replace(
                    p, Omega_g=TWO_PI * self.gradient_rabi_khz * 1e3
                )
        except dyn.ParameterError as e:
            raise ConfigError(str(e)) from e
        if self.delta_mhz is not None:
            given = TWO_PI * self.delta_mhz * 1e6
            if abs(given - p.delta) > 1e-9 * abs(p.delta):
                raise ConfigError(
                    "delta_mhz disagrees with (omega_r - omega_g)/2 + Delta/2: "
                    f"given {given:.6f} rad/s, derived {p.delta:.6f} rad/s"
                )
        return p

    def noise_spec(self) -> dyn.NoiseSpec:
        return dyn.NoiseSpec(
            motional_dephasing_time=self.motional_dephasing_time_ms * 1e-3,
            heating_rate=self.heating_rate_per_s,
            drift_mean_hz=self.drift_mean_hz,
            drift_std_hz=self.drift_std_hz,
            qubit_detuning=TWO_PI * self.qubit_detuning_khz * 1e3,
            initial_nbar=self.initial_nbar,
        )

    def detection_model(self) -> detect.ReferenceModel:
        try:
            return detect.ReferenceModel(
                lambda_bright=self.lambda_bright,
                lambda_dark=self.lambda_dark,
                repump_rate=self.repump_rate,
                depump_rate=self.depump_rate,
                leak_prob=self.leak_prob,
            )
        except detect.DetectionError as e:
            raise ConfigError(str(e)) from e

    def methods(self) -> list[str]:
        if self.method == "both":
            return [est.METHOD_PARITY, est.METHOD_LINEAR]
        return [_METHOD_NAMES[self.method]]

    # -- serialization

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["f_targets"] = [float(f) for f in self.f_targets]
        out["harness_shape"] = [int(s) for s in self.harness_shape]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for k in data:
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
        kw = dict(data)
        if "f_targets" in kw:
            kw["f_targets"] = tuple(kw["f_targets"])
        if "harness_shape" in kw:
            kw["harness_shape"] = tuple(int(s) for s in kw["harness_shape"])
        try:
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad config value: {e}") from e


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} line {e.lineno}: {e.msg}") from e
    cfg = ExperimentConfig.from_json(data)
    cfg.effective_params()  # validates the derived tone-offset relation
    cfg.detection_model()
    return cfg


def save_config(cfg: ExperimentConfig, path: str) -> None:
    _write_json(path, cfg.to_json())


# ---------------------------------------------------------------------------
# output plumbing


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out_dir: str, cfg: ExperimentConfig, seeds: dict,
                   names: list[str]) -> None:
    manifest = {
        "config_sha256": config_hash(cfg),
        "tool_version": __version__,
        "seeds": seeds,
        "outputs": {n: _sha256(os.path.join(out_dir, n)) for n in sorted(names)},
    }
    _write_json(os.path.join(out_dir, "run_manifest.json"), manifest)


def _flat_rows(d: dict, prefix: str = ""):
    for k in sorted(d):
        v = d[k]
        if isinstance(v, dict):
            yield from _flat_rows(v, prefix + k + ".")
        elif isinstance(v, (list, tuple)):
            yield (prefix + k, " ".join(str(x) for x in v))
        else:
            yield (prefix + k, v)


# ---------------------------------------------------------------------------
# simulation commands


def _run_schedules(cfg: ExperimentConfig, params, noise, with_addressing: bool):
    spec = HilbertSpec(fock_dim=cfg.fock_dim)
    state = seq.schedule_to_propagator(
        seq.build_entangling_schedule(), params, noise,
        seq.initial_state(spec, nbar=noise.initial_nbar),
    )
    if with_addressing:
        state = seq.schedule_to_propagator(
            seq.build_addressing_schedule(), params, noise, state
        )
    return state


def cmd_simulate_gate(cfg: ExperimentConfig, seed: int, out_dir: str,
                      threads: int, fmt: str):
    params = cfg.effective_params()
    noise = cfg.noise_spec()
    state = _run_schedules(cfg, params, noise, with_addressing=False)
    rho = partial_trace_motion(state)
    f_phi = state_fidelity(rho, bell_phi())
    report = {"fidelity_phi": f_phi, "infidelity": 1.0 - f_phi}
    if cfg.addressing:
        state = seq.schedule_to_propagator(
            seq.build_addressing_schedule(), params, noise, state
        )
        rho = partial_trace_motion(state)
        f_psi = state_fidelity(rho, bell_psi_minus())
        report["fidelity_psi_minus"] = f_psi
        report["infidelity"] = 1.0 - f_psi
    budget = dyn.error_budget(
        params, noise, fock_dim=cfg.fock_dim, mc_samples=cfg.mc_samples,
        seed=seed, threads=threads,
    )
    report["error_budget"] = budget.as_dict()
    _write_json(os.path.join(out_dir, "gate_report.json"), report)
    _write_csv(os.path.join(out_dir, "gate_report.csv"),
               ("quantity", "value"), list(_flat_rows(report)))
    _write_json(os.path.join(out_dir, "spin_state.json"),
                {"re": np.real(rho).tolist(), "im": np.imag(rho).tolist()})
    return ["gate_report.json", "gate_report.csv", "spin_state.json"], False


_SCANNABLE = {
    f.name for f in dataclasses.fields(ExperimentConfig)
    if f.type in ("float", "int", "float | None")
    and f.name not in ("delta_mhz", "fock_dim")
}


def _scan_parameter(cfg: ExperimentConfig, sc: dict, out_dir: str):
    name = sc.get("parameter")
    if not name:
        raise ConfigError("scan.parameter is required in parameter mode")
    if name not in _SCANNABLE:
        raise ConfigError(f"unresolvable scan parameter {name!r}")
    if name.startswith("drift_"):
        raise ConfigError(
            "frequency drift only enters shot-averaged quantities; "
            "use the error-budget command"
        )
    try:
        start, stop = float(sc["start"]), float(sc["stop"])
    except KeyError as e:
        raise ConfigError(f"scan.{e.args[0]} is required") from e
    points = int(sc.get("points", 21))
    _check(points >= 2, "scan.points must be at least 2")

    target = bell_psi_minus() if cfg.addressing else bell_phi()
    grid = np.linspace(start, stop, points)
    cast = int if isinstance(getattr(cfg, name), int) else float
    infids = []
    for v in grid:
        c2 = dataclasses.replace(cfg, **{name: cast(v)})
        state = _run_schedules(
            c2, c2.effective_params(), c2.noise_spec(), cfg.addressing
        )
        fid = state_fidelity(partial_trace_motion(state), target)
        # rounding can push a suppressed point a few ulp past 1
        infids.append(max(0.0, 1.0 - fid))

    _write_csv(os.path.join(out_dir, "scan.csv"), (name, "infidelity"),
               [(float(g), float(i)) for g, i in zip(grid, infids)])
    svgplot.line_plot(
        [("infidelity", list(grid), infids)],
        os.path.join(out_dir, "scan.svg"),
        title=f"Bell infidelity vs {name}",
        xlabel=name, ylabel="infidelity",
        logy=bool(sc.get("log_infidelity", True)),
    )
    k = int(np.argmin(infids))
    summary = {
        "mode": "parameter", "parameter": name,
        "min_infidelity": float(infids[k]), "argmin": float(grid[k]),
        "max_infidelity": float(max(infids)),
    }
    _write_json(os.path.join(out_dir, "scan_summary.json"), summary)
    return ["scan.csv", "scan.svg", "scan_summary.json"], False


def _scan_idd_coherence(cfg: ExperimentConfig, sc: dict, out_dir: str):
    params = cfg.effective_params()
    model_kw = {}
    if "lf_rms_khz" in sc:
        model_kw["lf_rms"] = TWO_PI * float(sc["lf_rms_khz"]) * 1e3
    if "residual_time_ms" in sc:
        model_kw["residual_rate"] = 1.0 / (float(sc["residual_time_ms"]) * 1e-3)
    noise_model = seq.DephasingNoiseModel(**model_kw)

    lo = float(sc.get("duration_lo_us", 20.0)) * 1e-6
    hi = float(sc.get("duration_hi_us", 50_000.0)) * 1e-6
    points = int(sc.get("points", 60))
    _check(0 < lo < hi, "need 0 < duration_lo_us < duration_hi_us")
    _check(points >= 2, "scan.points must be at least 2")

    durations = np.geomspace(lo, hi, points)
    con = [seq.idd_echo_experiment(float(t), True, noise_model, params)
           for t in durations]
    coff = [seq.idd_echo_experiment(float(t), False, noise_model, params)
            for t in durations]
    tau_on = seq.echo_coherence_time(True, noise_model, params)
    tau_off = seq.echo_coherence_time(False, noise_model, params)

    _write_csv(
        os.path.join(out_dir, "scan.csv"),
        ("duration_us", "contrast_drive_off", "contrast_drive_on"),
        [(float(t) * 1e6, float(a), float(b))
         for t, a, b in zip(durations, coff, con)],
    )
    svgplot.line_plot(
        [("drive off", list(durations * 1e6), coff),
         ("drive on", list(durations * 1e6), con)],
        os.path.join(out_dir, "scan.svg"),
        title="Echo contrast vs duration",
        xlabel="duration (us)", ylabel="contrast", logx=True,
    )

    def fin(x):  # JSON has no Infinity
        return float(x) if math.isfinite(x) else None

    summary = {
        "mode": "idd_coherence",
        "coherence_time_drive_on_s": fin(tau_on),
        "coherence_time_drive_off_s": fin(tau_off),
        "ratio": fin(tau_on / tau_off),
    }
    _write_json(os.path.join(out_dir, "scan_summary.json"), summary)
    return ["scan.csv", "scan.svg", "scan_summary.json"], False


def cmd_scan(cfg: ExperimentConfig, seed: int, out_dir: str,
             threads: int, fmt: str):
    sc = cfg.scan
    mode = sc.get("mode", "parameter")
    if mode == "parameter":
        return _scan_parameter(cfg, sc, out_dir)
    if mode == "idd_coherence":
        return _scan_idd_coherence(cfg, sc, out_dir)
    raise ConfigError(f"unknown scan.mode {mode!r}")


# ---------------------------------------------------------------------------
# synthesis


def _validated_matrix(ts: dict) -> np.ndarray:
    re = np.asarray(ts["re"], dtype=float)
    im = np.asarray(ts.get("im", np.zeros_like(re)), dtype=float)
    rho = re + 1j * im
    if rho.shape != (9, 9):
        raise ConfigError("true_state matrix must be 9x9 (full spin space)")
    if np.abs(rho - rho.conj().T).max() > 1e-8:
        raise ConfigError("true_state matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > 1e-8:
        raise ConfigError("true_state matrix must have unit trace")
    if np.linalg.eigvalsh(rho).min() < -1e-8:
        raise ConfigError("true_state matrix is not positive semidefinite")
    return rho


def true_state_matrix(cfg: ExperimentConfig) -> np.ndarray:
    """Resolve the configured true state into a 9x9 spin density matrix."""
    ts = cfg.true_state
    src = ts["source"]
    if src == "matrix":
        return _validated_matrix(ts)
    if src == "family":
        rho = est.dephasing_limited_state(float(ts["fidelity"]), cfg.target_state)
        return est.embed_leak(rho, cfg.leak_prob, cfg.target_state)
    # simulated: run the configured noisy schedule, then add preparation leak
    with_addr = cfg.addressing or cfg.target_state == est.TARGET_ANTISYMMETRIC
    state = _run_schedules(
        cfg, cfg.effective_params(), cfg.noise_spec(), with_addr
    )
    rho = partial_trace_motion(state)
    return est.embed_leak(rho, cfg.leak_prob, cfg.target_state)


def cmd_synthesize(cfg: ExperimentConfig, seed: int, out_dir: str,
                   threads: int, fmt: str):
    model = cfg.detection_model()
    rho = true_state_matrix(cfg)
    ds_id = cfg.dataset_id or f"synth-{seed}"
    ds = est.synthesize_dataset(
        rho, model, ds_id, cfg.target_state,
        n_population_sets=cfg.n_population_sets,
        trials_per_set=cfg.trials_per_set,
        parity_repeats=cfg.parity_repeats,
        n_reference=cfg.n_reference,
    )
    bundle_dir = os.path.join(out_dir, "bundle")
    est.save_bundle(ds, bundle_dir)

    psi = est.target_state(cfg.target_state)
    overlap = float(np.real(psi.conj() @ rho @ psi))
    renorm = (1.0 - cfg.leak_prob) ** 2
    truth = {
        "dataset_id": ds_id,
        "target_state": cfg.target_state,
        "source": cfg.true_state["source"],
        "target_overlap": overlap,
        "qubit_fidelity": overlap / renorm,
        "leak_prob": cfg.leak_prob,
    }
    _write_json(os.path.join(out_dir, "truth.json"), truth)

    names = ["truth.json"] + sorted(
        "bundle/" + n for n in os.listdir(bundle_dir)
    )
    return names, False


# ---------------------------------------------------------------------------
# estimation


def _estimate_payload(fe: est.FidelityEstimate) -> dict:
    return {
        "method": fe.method,
        "original": fe.point,
        "ci68": [fe.ci68[0], fe.ci68[1]],
        "mean": fe.boot_mean,
        "median": fe.boot_median,
        "truncated": fe.truncated,
        "raw_original": fe.raw_point,
    }


def _load_bundles(paths) -> list:
    out = []
    for p in paths:
        try:
            out.append(est.load_bundle(p))
        except OSError as e:
            raise est.EstimationError(f"cannot read bundle {p}: {e}") from e
    return out


def _population_block(ds) -> dict:
    cal = detect.calibrate_reference(ds.reference_bright, ds.reference_dark,
                                     uncertainties=False)
    pops = est.ml_populations(ds.population, cal.model)
    return {"p0": float(pops[0]), "p1": float(pops[1]), "p2": float(pops[2])}


def _single_report(ds, cfg: ExperimentConfig, threads: int):
    report = {
        "dataset_id": ds.dataset_id,
        "target_state": ds.target,
        "n_boot": cfg.n_boot,
        "populations": _population_block(ds),
        "methods": {},
    }
    failed = False
    for m in cfg.methods():
        try:
            fe = est.bootstrap(ds, m, n_boot=cfg.n_boot, jitter=cfg.jitter,
                               threads=threads)
            report["methods"][m] = _estimate_payload(fe)
        except est.EstimationError as e:
            # population block above stays valid; the method entry records
            # what failed so the report degrades instead of disappearing
            report["methods"][m] = {"method": m, "error": str(e)}
            failed = True
    return report, failed


def _trigger_report(datasets, cfg: ExperimentConfig, seed: int, threads: int):
    trig_method = cfg.methods()[0]
    halves, entries = [], []
    for ds in datasets:
        tr, an = est.trigger_split(ds, seed)
        tval, _ = est.point_estimate(tr, trig_method)
        halves.append(an)
        entries.append({"dataset_id": ds.dataset_id,
                        "trigger_value": float(tval)})
    k = int(np.argmax([e["trigger_value"] for e in entries]))
    analysis = halves[k]
    report = {
        "mode": "trigger-selection",
        "trigger_method": trig_method,
        "bundles": entries,
        "selected": {"index": k, "dataset_id": datasets[k].dataset_id},
        "n_boot": cfg.n_boot,
        "populations": _population_block(analysis),
        "methods": {},
    }
    failed = False
    for m in cfg.methods():
        try:
            fe = est.bootstrap(analysis, m, n_boot=cfg.n_boot,
                               jitter=cfg.jitter, threads=threads)
            report["methods"][m] = _estimate_payload(fe)
        except est.EstimationError as e:
            report["methods"][m] = {"method": m, "error": str(e)}
            failed = True
    return report, failed


def cmd_estimate(bundles, cfg: ExperimentConfig, seed: int, out_dir: str,
                 threads: int, fmt: str):
    datasets = _load_bundles(bundles)
    if len(datasets) == 1:
        report, failed = _single_report(datasets[0], cfg, threads)
    else:
        report, failed = _trigger_report(datasets, cfg, seed, threads)
    _write_json(os.path.join(out_dir, "estimate_report.json"), report)
    names = ["estimate_report.json"]
    if fmt == "csv":
        rows = []
        for m, payload in report["methods"].items():
            if "error" in payload:
                rows.append((m, "", "", "", "", payload["error"]))
            else:
                rows.append((m, payload["original"], payload["ci68"][0],
                             payload["ci68"][1], payload["mean"],
                             payload["median"]))
        _write_csv(os.path.join(out_dir, "estimate_report.csv"),
                   ("method", "original", "ci_lo", "ci_hi", "mean", "median"),
                   rows)
        names.append("estimate_report.csv")
    return names, failed


# ---------------------------------------------------------------------------
# bias scan and error budget


def cmd_bias_scan(cfg: ExperimentConfig, seed: int, out_dir: str,
                  threads: int, fmt: str):
    report = est.bias_harness(
        cfg.f_targets, cfg.n_replicates,
        eps=cfg.leak_prob, model=cfg.detection_model(),
        shape=tuple(cfg.harness_shape), threads=threads,
    )
    payload = {
        "f_targets": [float(f) for f in cfg.f_targets],
        "n_replicates": cfg.n_replicates,
        "leak_prob": cfg.leak_prob,
        "entries": report.as_dict(),
    }
    _write_json(os.path.join(out_dir, "bias_report.json"), payload)
    names = ["bias_report.json", "bias_scan.svg"]
    fs = [float(f) for f in cfg.f_targets]
    lin = [report.entries[f]["linear_bias"] for f in cfg.f_targets]
    par = [report.entries[f]["parity_bias"] for f in cfg.f_targets]
    svgplot.line_plot(
        [("linear", fs, lin), ("parity", fs, par)],
        os.path.join(out_dir, "bias_scan.svg"),
        title="Estimator bias vs true fidelity",
        xlabel="true fidelity", ylabel="bias",
    )
    if fmt == "csv":
        rows = [(f, report.entries[f]["linear_bias"],
                 report.entries[f]["linear_sem"],
                 report.entries[f]["parity_bias"],
                 report.entries[f]["parity_sem"]) for f in cfg.f_targets]
        _write_csv(os.path.join(out_dir, "bias_report.csv"),
                   ("f_true", "linear_bias", "linear_sem",
                    "parity_bias", "parity_sem"), rows)
        names.append("bias_report.csv")
    return names, False


def cmd_error_budget(cfg: ExperimentConfig, seed: int, out_dir: str,
                     threads: int, fmt: str):
    budget = dyn.error_budget(
        cfg.effective_params(), cfg.noise_spec(),
        fock_dim=cfg.fock_dim, mc_samples=cfg.mc_samples,
        seed=seed, threads=threads,
    )
    _write_json(os.path.join(out_dir, "budget.json"), budget.as_dict())
    rows = [(name, val) for name, val in budget.entries]
    rows.append(("total", budget.total))
    _write_csv(os.path.join(out_dir, "budget.csv"),
               ("source", "infidelity"), rows)
    return ["budget.json", "budget.csv"], False


# ---------------------------------------------------------------------------
# entry point


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="iongate",
        description="Simulate, synthesize, and analyze a microwave-driven "
                    "two-qubit phase gate.",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH",
                       help="JSON experiment config (defaults when omitted)")
        p.add_argument("--seed", type=_u64, default=0, metavar="U64")
        p.add_argument("--out", default="iongate-out", metavar="DIR")
        p.add_argument("--threads", type=int, default=1, metavar="N")
        p.add_argument("--format", choices=("json", "csv"), default="json")

    common(sub.add_parser(
        "simulate-gate", help="run the schedule; fidelity + error budget"))
    common(sub.add_parser(
        "scan", help="sweep a config parameter or the coherence experiment"))
    common(sub.add_parser(
        "synthesize", help="draw a synthetic dataset bundle"))
    p_est = sub.add_parser(
        "estimate", help="fidelity report for one or more bundles")
    p_est.add_argument("bundles", nargs="+", metavar="BUNDLE_DIR")
    common(p_est)
    common(sub.add_parser(
        "bias-scan", help="estimator bias over a fidelity grid"))
    common(sub.add_parser(
        "error-budget", help="per-source infidelity decomposition"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        os.makedirs(args.out, exist_ok=True)

        if args.command == "estimate":
            names, failed = cmd_estimate(args.bundles, cfg, args.seed,
                                         args.out, args.threads, args.format)
        else:
            fn = {
                "simulate-gate": cmd_simulate_gate,
                "scan": cmd_scan,
                "synthesize": cmd_synthesize,
                "bias-scan": cmd_bias_scan,
                "error-budget": cmd_error_budget,
            }[args.command]
            names, failed = fn(cfg, args.seed, args.out, args.threads,
                               args.format)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (est.EstimationError, detect.CalibrationError) as e:
        print(f"estimation error: {e}", file=sys.stderr)
        return 3

    write_manifest(args.out, cfg, {"root_seed": args.seed}, names)
    if failed:
        # partial (population-only) report was written; signal the failure
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
