import json
import math

import pytest
from pydantic import ValidationError

from nishilab import cli
from nishilab import verify as V
from nishilab.config import ExperimentConfig, build_system, bundled_configs, config_hash, load_config

EA = {
    "lattice": {"kind": "short_range", "d": 2, "L": 3},
    "families": [{"type": "random_field"}, {"type": "nearest_neighbor"}],
    "params": {"beta": 0.5, "species": [{"p": 2, "mu": 0.5, "delta": 1.0}, {"p": 1, "mu": 0.0, "delta": 0.0}]},
}


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def _lines(path):
    return path.read_text().splitlines()


def test_bundled_configs_parse():
    names = bundled_configs()
    assert "nm-identities-2site.json" in names
    for n in names:
        cfg = load_config(n)
        assert ExperimentConfig.model_validate_json(cfg.model_dump_json()) == cfg


def test_schema_is_strict():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"model": EA, "bogus": 1})
    bad = json.loads(json.dumps(EA))
    bad["lattice"]["shape"] = "square"
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"model": bad})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"model": EA, "study": {"scaling": {"sizes": [2, 4, 3]}}})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"model": EA, "study": {"scaling": {"sizes": [2, 3]}}})


def test_missing_beta_is_a_usage_error(tmp_path, capsys):
    data = {"model": json.loads(json.dumps(EA))}
    del data["model"]["params"]["beta"]
    assert cli.main(["verify", "--config", _write(tmp_path, data)]) == 2
    assert "beta" in capsys.readouterr().err


def test_malformed_json_is_a_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"model": {"lattice": ')
    assert cli.main(["verify", "--config", str(path)]) == 2
    assert "line 1" in capsys.readouterr().err
    assert cli.main(["verify", "--config", str(tmp_path / "missing.json")]) == 2


def test_two_site_identity_suite(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["verify", "--config", "nm-identities-2site.json", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "12 pass, 0 fail, 0 inconclusive" in text
    records = [json.loads(l) for l in _lines(out / "results.jsonl")]
    assert len(records) == 12 and all(r["verdict"] == "pass" for r in records)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["verdicts"] == {"pass": 12, "fail": 0, "inconclusive": 0}
    assert (out / "checks.csv").exists()


def test_rerun_is_byte_identical_and_seed_matters(tmp_path):
    cfg = "nm-identities-2site.json"
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for d in (a, b):
        assert cli.main(["verify", "--config", cfg, "--out", str(d), "--n", "400", "--engine", "exact", "--quiet"]) == 0
    assert (a / "results.jsonl").read_bytes() == (b / "results.jsonl").read_bytes()
    assert (a / "checks.csv").read_bytes() == (b / "checks.csv").read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma["config_hash"] == mb["config_hash"]
    cli.main(["verify", "--config", cfg, "--out", str(c), "--n", "400", "--engine", "exact", "--quiet", "--seed", "99"])
    ra = [json.loads(l) for l in _lines(a / "results.jsonl")]
    rc = [json.loads(l) for l in _lines(c / "results.jsonl")]
    assert [r["value"] for r in ra] != [r["value"] for r in rc]
    assert [r["verdict"] for r in ra] == [r["verdict"] for r in rc]
    mc = json.loads((c / "manifest.json").read_text())
    assert mc["config_hash"] != ma["config_hash"] and mc["seed"] == 99


def test_config_hash_tracks_content():
    cfg = ExperimentConfig.model_validate({"model": EA})
    fams = [f.to_json() for f in build_system(cfg.model).families.values()]
    other = ExperimentConfig.model_validate({"model": EA, "compute": {"n": 5}})
    assert config_hash(cfg, fams) == config_hash(cfg, fams)
    assert config_hash(cfg, fams) != config_hash(other, fams)


def test_failing_check_sets_exit_code(tmp_path, monkeypatch):
    def broken(system, **kw):
        return V.CheckReport("internal_energy_nm", 1.0, 0.0, V.FAIL, "forced", target=0.0)

    monkeypatch.setattr(V, "check_internal_energy_nm", broken)
    data = {"model": EA, "study": {"checks": [{"type": "internal_energy_nm"}]}, "compute": {"n": 10}}
    assert cli.main(["verify", "--config", _write(tmp_path, data), "--out", str(tmp_path / "o"), "--quiet"]) == 1


def test_worker_precedence(monkeypatch):
    cfg = ExperimentConfig.model_validate({"model": EA, "compute": {"workers": 3}})
    args = cli._parser().parse_args(["verify", "--config", "x"])
    assert cli.resolve_settings(cfg, args).workers == 3
    monkeypatch.setenv("NISHILAB_WORKERS", "2")
    assert cli.resolve_settings(cfg, args).workers == 2
    args = cli._parser().parse_args(["verify", "--config", "x", "--workers", "1"])
    assert cli.resolve_settings(cfg, args).workers == 1


def _phase(tmp_path, model, block, n=200):
    data = {"model": model, "study": {"phase_proxy": block}, "compute": {"engine": "exact", "n": n}}
    out = tmp_path / "phase"
    assert cli.main(["phase-proxy", "--config", _write(tmp_path, data), "--out", str(out), "--quiet"]) == 0
    return [r for r in map(json.loads, _lines(out / "results.jsonl")) if r["record"] == "phase_proxy"]


def test_phase_proxy_symmetric_and_trivial_rows(tmp_path):
    rows = _phase(tmp_path, EA, {"betas": [0.0, 1.0], "mu2": [0.0, 0.5], "delta2": 1.0, "mu1": 0.0})
    assert len(rows) == 4
    for r in rows:
        if r["mu2"] == 0.0 or r["beta"] == 0.0:
            assert abs(r["m1_mean"]) <= 1e-12
        if r["beta"] == 0.0:
            assert abs(r["r1_mean"]) <= 1e-12
    assert [r["on_nishimori"] for r in rows if r["mu2"] == 0.5] == [False, False]


def test_phase_proxy_ordered_region(tmp_path):
    model = json.loads(json.dumps(EA))
    model["lattice"]["L"] = 4
    # beta * mu2 = 5 with beta = 5, so the field splits the two ordered states by 2 beta N mu1 = 8
    rows = _phase(tmp_path, model, {"betas": [5.0], "mu2": [1.0], "delta2": 0.1, "mu1": 0.05}, n=20)
    assert rows[0]["m1_mean"] >= 0.9


def test_scaling_at_infinite_temperature(tmp_path):
    model = json.loads(json.dumps(EA))
    model["params"]["beta"] = 0.0
    data = {"model": model, "study": {"scaling": {"sizes": [2, 3, 4], "mu1": []}}, "compute": {"engine": "exact", "n": 20}}
    cfg = ExperimentConfig.model_validate(data)
    study = cli.run_scaling(cfg, cli.resolve_settings(cfg))
    for B, vp in zip(study.n_ranges, study.variances["R:2"]):
        assert abs(vp.thermal.mean - 1 / B) <= 1e-12
    assert all(math.isnan(p["m_plus"]) for p in study.proxies)
