from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from clbayes.cli import SCENARIOS, ConfigError, ExperimentConfig, main
from clbayes.gp_model import load_dataset
from clbayes.samplers import load_trace
from clbayes.sandwich import SandwichFit


def manifest_without_timing(path: Path) -> dict:
    payload = json.loads(path.read_text())
    payload.pop("timing")
    return payload


def small_config(tmp_path: Path, **overrides) -> Path:
    from dataclasses import replace

    fields = dict(
        k_sites=6,
        n_replicates=25,
        iterations=1200,
        burn_in=200,
        replicates=3,
        seed=11,
        workers=1,
        output_dir=str(tmp_path / "out"),
    )
    fields.update(overrides)
    cfg = replace(SCENARIOS["omega3"], **fields)
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "exp.cfg"
    path.write_text(cfg.to_config_text())
    return path


# -- config round-trips -----------------------------------------------------------


def test_config_roundtrip_lossless():
    cfg = ExperimentConfig(scenario="omega15", omega=1.5, seed=123, workers=4,
                           partition="mu|tau,omega", output_dir="somewhere")
    again = ExperimentConfig.from_config_text(cfg.to_config_text())
    assert again == cfg


def test_checked_in_scenario_files_parse():
    for name in ("omega3", "omega15", "twoblock"):
        cfg = ExperimentConfig.from_config_file(Path("configs") / f"{name}.cfg")
        assert cfg.scenario == name
        assert cfg.mu == 0.0 and cfg.tau == 1.0
        assert cfg.prior.mu_var == 100.0
        assert cfg.prior.tau_shape == pytest.approx(0.1)
        assert cfg.prior.omega_shape == pytest.approx(0.1)
        assert cfg.k_sites == 20 and cfg.n_replicates == 50
        assert (cfg.interval_lo, cfg.interval_hi) == (0.0, 20.0)
    assert ExperimentConfig.from_config_file("configs/omega15.cfg").omega == 1.5
    two = ExperimentConfig.from_config_file("configs/twoblock.cfg")
    assert two.partition == "mu|tau,omega"
    assert two.sampler == "adaptive-gibbs"


def test_config_errors_are_anchored():
    with pytest.raises(ConfigError, match="missing \\[priors\\]"):
        ExperimentConfig.from_config_text("[scenario]\nmu = 0\n[run]\nsampler = mh\n")
    with pytest.raises(ConfigError, match="missing key"):
        ExperimentConfig.from_config_text(
            "[scenario]\nname = x\nmu = 0\ntau = 1\nomega = 3\nk_sites = 5\n"
            "n_replicates = 10\ninterval_lo = 0\ninterval_hi = 20\n"
            "[priors]\nmu_mean = 0\nmu_var = 100\ntau_shape = 0.1\ntau_scale = 1\n"
            "omega_shape = 0.1\nomega_scale = 1\n[run]\nsampler = mh\n"
        )


# -- simulate / fit / sample --------------------------------------------------------


def test_simulate_is_byte_deterministic(tmp_path):
    out1, out2, out3 = (tmp_path / f"d{i}.csv" for i in range(3))
    base = ["simulate", "--k-sites", "5", "--n", "8", "--seed", "7"]
    assert main(base + ["--out", str(out1)]) == 0
    assert main(base + ["--out", str(out2)]) == 0
    assert main(["simulate", "--k-sites", "5", "--n", "8", "--seed", "8",
                 "--out", str(out3)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert out1.read_bytes() != out3.read_bytes()
    data = load_dataset(out1)
    assert data.n_replicates == 8 and data.layout.k_sites == 5


def test_fit_reports_bartlett_case_for_k2(tmp_path, capsys):
    data_path = tmp_path / "k2.csv"
    main(["simulate", "--k-sites", "2", "--interval", "0,2", "--n", "4000",
          "--seed", "3", "--out", str(data_path)])
    fit_path = tmp_path / "fit.json"
    assert main(["fit", str(data_path), "--out", str(fit_path)]) == 0
    fit = SandwichFit.load_json(fit_path)
    assert np.allclose(fit.lambdas, 1.0, atol=0.2)
    assert fit.k == pytest.approx(1.0, abs=0.1)
    out = capsys.readouterr().out
    assert "lambdas" in out and "k:" in out


def test_sample_writes_trace_and_density(tmp_path):
    data_path = tmp_path / "data.csv"
    main(["simulate", "--k-sites", "6", "--n", "30", "--seed", "5",
          "--out", str(data_path)])
    prefix = tmp_path / "run1"
    code = main(["sample", str(data_path), "--sampler", "mh", "--adjustment", "curvature",
                 "--iterations", "1500", "--burn-in", "300", "--seed", "2",
                 "--out-prefix", str(prefix), "--density-csv"])
    assert code == 0
    trace = load_trace(f"{prefix}_trace.csv", f"{prefix}_trace.json")
    assert trace.n_stored == 1200
    assert trace.kind == "curvature"
    sidecar = json.loads(Path(f"{prefix}_trace.json").read_text())
    assert sidecar["sandwich_fit"] == f"{prefix}_fit.json"
    assert Path(f"{prefix}_fit.json").exists()
    density = Path(f"{prefix}_density.csv").read_text().splitlines()
    assert density[0] == "param,x,density"
    assert any(line.startswith("omega,") for line in density[1:])


# -- coverage runs --------------------------------------------------------------------


def test_coverage_run_artifacts_and_determinism(tmp_path):
    cfg_path = small_config(tmp_path)
    assert main(["coverage", "--config", str(cfg_path)]) == 0
    out = tmp_path / "out"
    for name in ("coverage.csv", "moments.csv", "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["results"]["completed"] == 3
    assert manifest["results"]["failed"] == 0
    assert manifest["config_sha256"]
    assert "wall_time_s" in manifest["timing"]
    reps = sorted(p.name for p in (out / "replicates").iterdir())
    assert "rep0000_trace.csv" in reps and "rep0000_fit.json" in reps

    # identical config + seed reproduces every artifact byte for byte
    cfg2 = small_config(tmp_path / "again")
    assert main(["coverage", "--config", str(cfg2)]) == 0
    out2 = tmp_path / "again" / "out"
    for name in ("coverage.csv", "moments.csv"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()
    for rep in reps:
        assert (out / "replicates" / rep).read_bytes() == (out2 / "replicates" / rep).read_bytes()
    m1 = manifest_without_timing(out / "manifest.json")
    m2 = manifest_without_timing(out2 / "manifest.json")
    m1["config"].pop("output_dir"), m2["config"].pop("output_dir")
    m1.pop("config_sha256"), m2.pop("config_sha256")
    assert m1 == m2


def test_coverage_rejects_zero_replicates(tmp_path, capsys):
    assert main(["coverage", "--scenario", "omega3", "--replicates", "0",
                 "--output-dir", str(tmp_path)]) == 2
    assert "replicates" in capsys.readouterr().err


def test_coverage_unknown_scenario(tmp_path, capsys):
    assert main(["coverage", "--scenario", "nope", "--output-dir", str(tmp_path)]) == 2
    assert "unknown scenario" in capsys.readouterr().err


def test_coverage_manifest_written_when_all_replicates_fail(tmp_path):
    # n <= p makes the score covariance rank deficient for every replicate
    cfg_path = small_config(tmp_path, n_replicates=3, adjustment="curvature")
    code = main(["coverage", "--config", str(cfg_path)])
    assert code == 1
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["results"]["completed"] == 0
    assert manifest["results"]["failed"] == 3
    assert all("SingularJ" in msg for _, msg in manifest["results"]["failures"])


# -- lr-compare and check-asymptotics ---------------------------------------------------


def test_lr_compare_run(tmp_path, capsys):
    cfg_path = small_config(tmp_path, replicates=4)
    assert main(["lr-compare", "--config", str(cfg_path), "--n", "30"]) == 0
    out = tmp_path / "out"
    lines = (out / "lr_scatter.csv").read_text().splitlines()
    assert lines[0] == "replicate,lambda_full,lambda_curv"
    assert len(lines) == 5
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["results"]["n_replicates"] == 30
    assert "correlation" in manifest["results"]
    assert "LR correlation" in capsys.readouterr().out


def test_check_asymptotics_run(tmp_path, capsys):
    cfg_path = small_config(tmp_path, k_sites=8, n_replicates=120,
                            iterations=4000, burn_in=800)
    assert main(["check-asymptotics", "--config", str(cfg_path)]) == 0
    report = json.loads((tmp_path / "out" / "asymptotics.json").read_text())
    assert report["p"] == 3
    assert report["trace_inequality_satisfied"] is True
    assert set(report["cells"]) == {"none", "magnitude", "curvature"}
    for cell in report["cells"].values():
        assert cell["frobenius_rel_err"] < 1.0
    stdout = capsys.readouterr().out
    assert "tr(H^-1 J)" in stdout
