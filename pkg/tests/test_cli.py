"""Command-line layer: config handling, subcommands, manifests, SVG output."""

import hashlib
import json
import math
import os
import subprocess

import numpy as np
import pytest
from scipy.special import jv

from iongate import cli, estimate as est, svgplot
from iongate.cli import ConfigError, ExperimentConfig


def write_cfg(path, **kw):
    cfg = ExperimentConfig.from_json(kw)  # validate before writing
    cli.save_config(cfg, str(path))
    return str(path)


def read_json(out_dir, name):
    with open(os.path.join(str(out_dir), name)) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# configuration


def test_config_round_trip_identity(tmp_path):
    cfg = ExperimentConfig(leak_prob=0.0017, n_boot=123,
                           f_targets=(0.5, 0.99), scan={"mode": "parameter"})
    p = tmp_path / "cfg.json"
    cli.save_config(cfg, str(p))
    loaded = cli.load_config(str(p))
    assert loaded == cfg
    # and a second save is byte-identical
    p2 = tmp_path / "cfg2.json"
    cli.save_config(loaded, str(p2))
    assert p.read_bytes() == p2.read_bytes()


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.from_json({"lambda_brite": 30.0})


@pytest.mark.parametrize("bad", [
    {"lambda_bright": 1.0, "lambda_dark": 2.0},
    {"target_state": "ghz"},
    {"method": "tomography"},
    {"f_targets": [0.2]},
    {"harness_shape": [40, 52]},
    {"true_state": {"source": "oracle"}},
    {"true_state": {"source": "family", "fidelity": 1.2}},
    {"omega_g_mhz": 7.0},
    {"repump_rate": 1.5},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(bad)


def test_config_unit_conversion():
    cfg = ExperimentConfig(qubit_detuning_khz=12.0,
                           motional_dephasing_time_ms=64.0)
    p = cfg.effective_params()
    assert p.omega_g == pytest.approx(2 * math.pi * 5e6)
    assert p.omega_r == pytest.approx(2 * math.pi * 6.9e6)
    # the operating point sits on the drive-dressing null
    assert abs(jv(0, p.modulation_index)) < 1e-12
    ns = cfg.noise_spec()
    assert ns.qubit_detuning == pytest.approx(2 * math.pi * 12e3)
    assert ns.motional_dephasing_time == pytest.approx(0.064)


def test_config_derived_offset_check():
    cfg = ExperimentConfig()
    derived = cfg.effective_params().delta / (2 * math.pi * 1e6)
    ok = ExperimentConfig(delta_mhz=derived)
    ok.effective_params()
    with pytest.raises(ConfigError, match="delta_mhz"):
        ExperimentConfig(delta_mhz=derived * (1 + 1e-6)).effective_params()
    # within 1e-9 relative still passes
    ExperimentConfig(delta_mhz=derived * (1 + 1e-10)).effective_params()


def test_config_hash_tracks_content():
    a = cli.config_hash(ExperimentConfig())
    b = cli.config_hash(ExperimentConfig(n_boot=4999))
    assert a != b
    assert a == cli.config_hash(ExperimentConfig())


# ---------------------------------------------------------------------------
# svg plots


def test_svg_plot_basic(tmp_path):
    path = tmp_path / "plot.svg"
    xs = list(range(10))
    svgplot.line_plot(
        [("a", xs, [x * x for x in xs]), ("b", xs, [50 - x for x in xs])],
        str(path), title="t", xlabel="x", ylabel="y",
    )
    text = path.read_text()
    assert text.startswith("<svg ")
    assert text.rstrip().endswith("</svg>")
    assert text.count("<polyline") == 2
    assert "t</text>" in text


def test_svg_plot_log_axis_skips_nonpositive(tmp_path):
    path = tmp_path / "log.svg"
    svgplot.line_plot(
        [("", [1, 2, 3, 4], [1e-8, 0.0, 1e-4, 1e-2])],
        str(path), logy=True,
    )
    text = path.read_text()
    # the zero sample cannot be placed; the polyline breaks around it
    assert "<polyline" in text
    assert "1e-8" in text or "1e-7" in text  # decade tick labels present


def test_svg_plot_deterministic(tmp_path):
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    series = [("s", [0.0, 1.0, 2.0], [0.3, 0.1, 0.7])]
    svgplot.line_plot(series, str(a))
    svgplot.line_plot(series, str(b))
    assert a.read_bytes() == b.read_bytes()


def test_linear_ticks_cover_range():
    ticks = svgplot._linear_ticks(-0.13, 1.07)
    assert ticks[0] >= -0.13 and ticks[-1] <= 1.07
    assert len(ticks) >= 4
    steps = np.diff(ticks)
    assert np.allclose(steps, steps[0])


def test_log_ticks_are_decades():
    ticks = svgplot._log_ticks(3e-7, 0.2)
    assert all(abs(math.log10(t) - round(math.log10(t))) < 1e-9 for t in ticks)
    assert ticks[0] >= 3e-7 and ticks[-1] <= 0.2


# ---------------------------------------------------------------------------
# simulate-gate


def test_simulate_gate_noiseless(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["simulate-gate", "--out", str(out)])
    assert rc == 0
    rep = read_json(out, "gate_report.json")
    assert rep["fidelity_phi"] >= 1 - 1e-8
    assert rep["error_budget"] == {"total": 0.0}
    state = read_json(out, "spin_state.json")
    assert np.array(state["re"]).shape == (9, 9)
    man = read_json(out, "run_manifest.json")
    assert man["tool_version"]
    assert set(man["outputs"]) == {
        "gate_report.json", "gate_report.csv", "spin_state.json"
    }
    # checksums are real sha256 of file contents
    for name, digest in man["outputs"].items():
        data = (out / name).read_bytes()
        assert hashlib.sha256(data).hexdigest() == digest


def test_simulate_gate_with_addressing(tmp_path):
    cfgp = write_cfg(tmp_path / "c.json", addressing=True)
    out = tmp_path / "run"
    rc = cli.main(["simulate-gate", "--config", cfgp, "--out", str(out)])
    assert rc == 0
    rep = read_json(out, "gate_report.json")
    assert rep["fidelity_psi_minus"] >= 1 - 1e-8
    assert rep["infidelity"] == pytest.approx(1 - rep["fidelity_psi_minus"])


def test_simulate_gate_bad_config_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"omega_g_mhz": -1}')
    assert cli.main(["simulate-gate", "--config", str(bad),
                     "--out", str(tmp_path / "o")]) == 2
    bad.write_text("{not json")
    assert cli.main(["simulate-gate", "--config", str(bad),
                     "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# scan


def test_scan_qubit_offset(tmp_path):
    cfgp = write_cfg(
        tmp_path / "c.json",
        scan={"parameter": "qubit_detuning_khz",
              "start": -200.0, "stop": 200.0, "points": 9},
    )
    out = tmp_path / "run"
    assert cli.main(["scan", "--config", cfgp, "--out", str(out)]) == 0
    rows = (out / "scan.csv").read_text().strip().splitlines()
    assert rows[0] == "qubit_detuning_khz,infidelity"
    assert len(rows) == 10
    grid = [tuple(map(float, r.split(","))) for r in rows[1:]]
    infids = dict(grid)
    assert all(0.0 <= v < 1e-2 for v in infids.values())
    # the unshifted design point is (weakly) a minimum of the curve
    assert infids[0.0] <= min(infids.values()) + 1e-12
    assert (out / "scan.svg").exists()


def test_scan_idd_coherence(tmp_path):
    cfgp = write_cfg(tmp_path / "c.json",
                     scan={"mode": "idd_coherence", "points": 30})
    out = tmp_path / "run"
    assert cli.main(["scan", "--config", cfgp, "--out", str(out)]) == 0
    summary = read_json(out, "scan_summary.json")
    ratio = summary["ratio"]
    assert ratio is None or ratio > 10.0
    rows = (out / "scan.csv").read_text().strip().splitlines()
    assert len(rows) == 31


def test_scan_unresolvable_parameter(tmp_path):
    cfgp = write_cfg(tmp_path / "c.json",
                     scan={"parameter": "no_such_field",
                           "start": 0.0, "stop": 1.0})
    assert cli.main(["scan", "--config", cfgp,
                     "--out", str(tmp_path / "o")]) == 2


def test_scan_rejects_drift_parameter(tmp_path):
    cfgp = write_cfg(tmp_path / "c.json",
                     scan={"parameter": "drift_std_hz",
                           "start": 0.0, "stop": 100.0})
    assert cli.main(["scan", "--config", cfgp,
                     "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# synthesize / estimate


SMALL = dict(
    leak_prob=0.0017,
    true_state={"source": "family", "fidelity": 0.9977},
    n_population_sets=8, trials_per_set=100,
    n_boot=40,
)


@pytest.fixture(scope="module")
def small_bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    cfgp = write_cfg(root / "c.json", dataset_id="cli-small", **SMALL)
    out = root / "run"
    assert cli.main(["synthesize", "--config", cfgp, "--out", str(out)]) == 0
    return str(out / "bundle"), cfgp


def test_synthesize_bundle_shape(small_bundle):
    bundle, _ = small_bundle
    ds = est.load_bundle(bundle)
    assert ds.dataset_id == "cli-small"
    assert len(ds.population) == 8
    assert len(ds.parity) == 52
    assert all(h.n_trials == 100 for h in ds.population)


def test_synthesize_truth_report(small_bundle):
    bundle, _ = small_bundle
    truth = read_json(os.path.dirname(bundle), "truth.json")
    assert truth["qubit_fidelity"] == pytest.approx(0.9977, abs=1e-12)
    assert truth["leak_prob"] == 0.0017


def test_synthesize_deterministic(tmp_path):
    cfgp = write_cfg(tmp_path / "c.json", dataset_id="det",
                     n_population_sets=2, trials_per_set=40)
    m = []
    for d in ("r1", "r2"):
        out = tmp_path / d
        assert cli.main(["synthesize", "--config", cfgp,
                         "--out", str(out)]) == 0
        m.append(read_json(out, "run_manifest.json"))
    assert m[0]["outputs"] == m[1]["outputs"]


def test_synthesize_matrix_source(tmp_path):
    rho = est.embed_leak(est.dephasing_limited_state(0.97), 0.002, "symmetric")
    cfgp = write_cfg(
        tmp_path / "c.json",
        leak_prob=0.002,
        true_state={"source": "matrix", "re": np.real(rho).tolist(),
                    "im": np.imag(rho).tolist()},
        n_population_sets=2, trials_per_set=40,
    )
    out = tmp_path / "run"
    assert cli.main(["synthesize", "--config", cfgp, "--out", str(out)]) == 0
    truth = read_json(out, "truth.json")
    assert truth["qubit_fidelity"] == pytest.approx(0.97, abs=1e-9)


def test_synthesize_rejects_bad_matrix(tmp_path):
    re = np.zeros((9, 9))
    re[0, 1] = 1.0  # not Hermitian
    re[0, 0] = 1.0
    cfgp = write_cfg(tmp_path / "c.json",
                     true_state={"source": "matrix", "re": re.tolist()})
    assert cli.main(["synthesize", "--config", cfgp,
                     "--out", str(tmp_path / "o")]) == 2


def test_synthesize_simulated_source(tmp_path):
    cfgp = write_cfg(tmp_path / "c.json",
                     true_state={"source": "simulated"},
                     n_population_sets=2, trials_per_set=40)
    out = tmp_path / "run"
    assert cli.main(["synthesize", "--config", cfgp, "--out", str(out)]) == 0
    truth = read_json(out, "truth.json")
    assert truth["qubit_fidelity"] > 1 - 1e-8


def test_estimate_single_bundle(small_bundle, tmp_path):
    bundle, cfgp = small_bundle
    out = tmp_path / "run"
    rc = cli.main(["estimate", bundle, "--config", cfgp, "--out", str(out),
                   "--format", "csv"])
    assert rc == 0
    rep = read_json(out, "estimate_report.json")
    assert rep["dataset_id"] == "cli-small"
    assert set(rep["methods"]) == {"parity-ML", "linear"}
    for payload in rep["methods"].values():
        lo, hi = payload["ci68"]
        assert lo <= payload["original"] <= hi <= 1.0
        assert 0.9 < payload["median"] <= 1.0
        assert {"method", "original", "ci68", "mean", "median"} <= set(payload)
    pops = rep["populations"]
    assert pops["p0"] + pops["p1"] + pops["p2"] == pytest.approx(1.0, abs=1e-6)
    lines = (out / "estimate_report.csv").read_text().strip().splitlines()
    assert lines[0].startswith("method,original,ci_lo")
    assert len(lines) == 3


def test_estimate_threads_byte_identical(small_bundle, tmp_path):
    bundle, cfgp = small_bundle
    manifests = []
    for t in ("1", "3"):
        out = tmp_path / f"t{t}"
        assert cli.main(["estimate", bundle, "--config", cfgp,
                         "--out", str(out), "--threads", t]) == 0
        manifests.append(read_json(out, "run_manifest.json"))
    assert manifests[0]["outputs"] == manifests[1]["outputs"]


def test_estimate_trigger_selection(tmp_path):
    bundles = []
    for i in range(3):
        cfgp = write_cfg(tmp_path / f"c{i}.json", dataset_id=f"trig-{i}",
                         **SMALL)
        out = tmp_path / f"syn{i}"
        assert cli.main(["synthesize", "--config", cfgp,
                         "--out", str(out)]) == 0
        bundles.append(str(out / "bundle"))
    cfgp = write_cfg(tmp_path / "est.json", method="parity", **SMALL)
    out = tmp_path / "est"
    rc = cli.main(["estimate", *bundles, "--config", cfgp, "--out", str(out),
                   "--seed", "7"])
    assert rc == 0
    rep = read_json(out, "estimate_report.json")
    assert rep["mode"] == "trigger-selection"
    vals = [b["trigger_value"] for b in rep["bundles"]]
    k = rep["selected"]["index"]
    assert vals[k] == max(vals)
    assert rep["selected"]["dataset_id"] == f"trig-{k}"
    assert "parity-ML" in rep["methods"]


def test_estimate_empty_parity_degrades(small_bundle, tmp_path):
    bundle, cfgp = small_bundle
    stripped = tmp_path / "stripped"
    stripped.mkdir()
    # copy the bundle without its parity files
    src_man = json.load(open(os.path.join(bundle, "manifest.json")))
    for name in (src_man["population_files"] + src_man["reference_files"]):
        data = open(os.path.join(bundle, name)).read()
        (stripped / name).write_text(data)
    src_man["parity_files"] = []
    src_man["phases"] = []
    (stripped / "manifest.json").write_text(json.dumps(src_man))

    out = tmp_path / "run"
    rc = cli.main(["estimate", str(stripped), "--config", cfgp,
                   "--out", str(out)])
    assert rc == 3
    rep = read_json(out, "estimate_report.json")
    assert all("error" in p for p in rep["methods"].values())
    assert rep["populations"]["p0"] > 0.4  # population block still reported
    # the manifest still accounts for the partial report
    man = read_json(out, "run_manifest.json")
    assert "estimate_report.json" in man["outputs"]


def test_estimate_missing_bundle_exit_3(tmp_path):
    assert cli.main(["estimate", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o")]) == 3


# ---------------------------------------------------------------------------
# bias-scan / error-budget


def test_bias_scan_small(tmp_path):
    cfgp = write_cfg(tmp_path / "c.json", f_targets=(0.9,), n_replicates=6,
                     harness_shape=(4, 8, 50), leak_prob=0.0017)
    out = tmp_path / "run"
    assert cli.main(["bias-scan", "--config", cfgp, "--out", str(out)]) == 0
    rep = read_json(out, "bias_report.json")
    entry = rep["entries"]["0.9"]
    assert set(entry) == {"linear_bias", "linear_sem",
                          "parity_bias", "parity_sem"}
    assert abs(entry["linear_bias"]) < 0.2
    assert (out / "bias_scan.svg").exists()


def test_error_budget_command(tmp_path):
    cfgp = write_cfg(tmp_path / "c.json", motional_dephasing_time_ms=64.0,
                     initial_nbar=0.05)
    out = tmp_path / "run"
    assert cli.main(["error-budget", "--config", cfgp, "--out", str(out)]) == 0
    rep = read_json(out, "budget.json")
    assert 1e-4 < rep["motional_dephasing"] < 1e-3
    assert rep["total"] == pytest.approx(rep["motional_dephasing"])
    lines = (out / "budget.csv").read_text().strip().splitlines()
    assert lines[-1].startswith("total,")


# ---------------------------------------------------------------------------
# entry point


def test_console_script_version():
    res = subprocess.run(["iongate", "--version"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    assert res.stdout.strip() == cli.__version__


def test_main_version_flag():
    with pytest.raises(SystemExit) as ex:
        cli.main(["--version"])
    assert ex.value.code == 0
