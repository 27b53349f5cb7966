import json
import math
from fractions import Fraction

import jsonschema
import pytest
import yaml

from rwrp.cli import main
from rwrp.config import ConfigError, ExperimentConfig, load_schema
from rwrp.duality import cramer_rate
from rwrp.experiments import (
    CONCENTRATION_CAVEAT,
    common_multiple_schedule,
    run_concentration,
    run_continuity_scan,
    seed_stream,
)

PERIODIC = {
    "seed": 0,
    "geometry": {"dim": 1, "steps": [[1], [2]]},
    "environment": {"kind": "periodic", "table": [0.0, 1.0]},
    "potential": {"kind": "site", "beta": 1.0},
    "experiment": {"zeta_grid": 5, "n_schedule": [60, 120, 240]},
}


def _write(tmp_path, cfg, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"geometry": {"dim": 1, "steps": [[1]]}, "environment": {"kind": "iid"}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**PERIODIC, "potential": {"kind": "bogus"}})


def test_config_resolves_and_round_trips():
    cfg = ExperimentConfig.from_dict(PERIODIC)
    assert cfg.resolved()["output"] == {"dir": ".", "prefix": "rwrp"}
    again = ExperimentConfig.from_dict(cfg.resolved())
    assert again.resolved() == cfg.resolved()
    geom, env, pot = cfg.validate_model()
    assert geom.steps == ((1,), (2,)) and env.period == (2,)


def test_config_csv_table(tmp_path):
    (tmp_path / "t.csv").write_text("0.0,1.0,2.0\n")
    cfg = dict(PERIODIC, environment={"kind": "periodic", "table": "t.csv"})
    c = ExperimentConfig.load(_write(tmp_path, cfg))
    assert c.environment().period == (3,)


def test_rational_weights():
    cfg = ExperimentConfig.from_dict({**PERIODIC, "geometry": {"dim": 1, "steps": [[1], [2]], "weights": ["1/3", "2/3"]}})
    assert cfg.geometry().exact_weights == (Fraction(1, 3), Fraction(2, 3))


def test_geometry_describe(tmp_path, capsys):
    assert main(["geometry", "describe", "--config", _write(tmp_path, PERIODIC)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["extreme_points"] == [[1], [2]] and doc["strictly_directed"]


def test_dp_outputs_and_reproducibility(tmp_path, capsys):
    c = _write(tmp_path, PERIODIC)
    args = ["dp", "--config", c, "--n-schedule", "50,100,200"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for f in ("rwrp_dp.csv", "rwrp_dp.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "rwrp_dp.csv").read_text().splitlines()[0] == "n,logZ,F_over_n"
    doc = json.loads((tmp_path / "a" / "rwrp_dp.json").read_text())
    jsonschema.validate(doc, load_schema("summary.schema.json"))
    assert doc["config"]["environment"]["table"] == [0.0, 1.0]
    assert "wall_ms" not in doc
    assert abs(doc["metrics"]["extrapolate"] - math.log((1 + math.e) / 2)) < 1e-3
    assert main(args + ["--out", str(tmp_path / "c"), "--timing"]) == 0
    assert "wall_ms" in json.loads((tmp_path / "c" / "rwrp_dp.json").read_text())


def test_duality_columns(tmp_path):
    assert main(["duality", "--config", _write(tmp_path, PERIODIC), "--tilt-radius", "3", "--tilt-step", "0.5",
                 "--zeta-grid", "5", "--out", str(tmp_path)]) == 0
    header = (tmp_path / "rwrp_duality.csv").read_text().splitlines()[0]
    assert header == "zeta_1,lambda_usc,I,err"


def test_entropy_exit_codes(tmp_path):
    cfg = dict(PERIODIC, experiment={"zeta": "7/5"})
    c = _write(tmp_path, cfg)
    assert main(["entropy", "--config", c, "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "rwrp_entropy.json").read_text())
    assert doc["metrics"]["nu"] == "rwrp_entropy.csv" and doc["metrics"]["gap"] <= 1e-6
    assert main(["entropy", "--config", c, "--gap", "-1", "--out", str(tmp_path)]) == 2
    assert main(["entropy", "--config", c, "--zeta", "3", "--out", str(tmp_path)]) == 3


def test_budget_exit_code(tmp_path):
    cfg = dict(PERIODIC, geometry={"dim": 3, "steps": [[1, 0, 1], [-1, 0, 1], [0, 1, 1], [0, -1, 1]]},
               environment={"kind": "iid", "marginal": {"kind": "gaussian"}})
    assert main(["dp", "--config", _write(tmp_path, cfg), "--n-schedule", "20000", "--out", str(tmp_path)]) == 3


def test_selftest(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_seed_stream_and_schedule():
    assert seed_stream(5, 4) == seed_stream(5, 4)
    assert len(set(seed_stream(5, 100))) == 100
    assert common_multiple_schedule([(Fraction(1, 2), Fraction(1, 3))], [50, 100]) == [54, 102]


BERN = {
    "seed": 3,
    "geometry": {"dim": 2, "steps": [[0, 1], [1, 1]]},
    "environment": {"kind": "iid", "marginal": {"kind": "bernoulli", "p": 0.5, "low": -1.0, "high": 1.0}},
    "potential": {"kind": "site", "beta": 1.0},
    "experiment": {"zeta": "1/2,1", "samples": 100, "n_schedule": [10, 20, 40], "epsilon": 0.1, "lambda_hat": 0.0},
}


def test_concentration_constant_environment():
    cfg = ExperimentConfig.from_dict(dict(BERN, environment={"kind": "iid", "marginal": {"kind": "constant", "c": 0.5}},
                                          experiment={**BERN["experiment"], "centering": "mean"}))
    rep = run_concentration(cfg)
    assert rep.tail_freq == [0.0, 0.0, 0.0]
    assert rep.caveat == CONCENTRATION_CAVEAT


def test_concentration_large_epsilon():
    cfg = ExperimentConfig.from_dict(dict(BERN, experiment={**BERN["experiment"], "epsilon": 2.5, "centering": "mean"}))
    assert run_concentration(cfg).tail_freq == [0.0, 0.0, 0.0]


def test_concentration_rejects_unbounded():
    cfg = ExperimentConfig.from_dict(dict(BERN, environment={"kind": "iid", "marginal": {"kind": "gaussian"}}))
    with pytest.raises(ValueError, match="bounded"):
        run_concentration(cfg)


def test_concentration_worker_count_invariant(monkeypatch):
    cfg = ExperimentConfig.from_dict(BERN)
    a = run_concentration(cfg)
    monkeypatch.setenv("RWRP_THREADS", "2")
    b = run_concentration(cfg)
    assert a == b


def test_continuity_free_walk():
    cfg = ExperimentConfig.from_dict(dict(BERN, potential={"kind": "site", "beta": 0.0},
                                          experiment={"zeta_grid": 11, "n_schedule": [200, 400, 800]}))
    scan = run_continuity_scan(cfg)
    geom = cfg.geometry()
    for z, v, inside in zip(scan.zetas, scan.values, scan.interior):
        if inside:
            assert v == pytest.approx(-cramer_rate(geom, z), abs=1e-2)
        else:
            assert v == pytest.approx(math.log(0.5), abs=1e-12)
    assert scan.concavity_residual <= 1e-3


def test_continuity_periodic_vs_legendre():
    cfg = ExperimentConfig.from_dict(dict(PERIODIC, experiment={"zeta_grid": 11, "n_schedule": [200, 400, 800]}))
    scan = run_continuity_scan(cfg)
    for v, ref in zip(scan.values, scan.reference):
        if ref is not None:
            assert abs(v - ref) <= 2e-2
