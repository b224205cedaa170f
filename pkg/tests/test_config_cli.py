from __future__ import annotations

import json
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from tissuevocab import cli, errors
from tissuevocab.config import THREADS_ENV, RunConfig, dump_config, load_config, parse_overrides


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.low_max_grade == 1 and cfg.reference_sequence == "t1w"


@pytest.mark.parametrize("override", [
    {"clusters": 1}, {"folds": 1}, {"phenotypes": 11}, {"fusion": "XF"}, {"patch_size": 12},
    {"sequences": ("a", "a")}, {"reference": "nope"}, {"n_perm": 10},
])
def test_invalid_values(override):
    with pytest.raises(errors.ConfigInvalid):
        replace(RunConfig(), **override).validate()


def test_load_and_override(tmp_path, monkeypatch):
    path = tmp_path / "c.toml"
    path.write_text('clusters = 4\nsequences = ["a", "b"]\nout_dir = "o"\n')
    cfg = load_config(path, parse_overrides(["lam=0.25", "register=false", "synth_dims=32,32,8"]))
    assert cfg.clusters == 4 and cfg.sequences == ("a", "b") and cfg.lam == 0.25 and cfg.register is False
    assert cfg.synth_dims == (32, 32, 8)
    assert cfg.out_dir == str((tmp_path / "o").resolve())
    monkeypatch.setenv(THREADS_ENV, "3")
    assert load_config(path).threads == 3
    assert load_config(path, {"threads": 2}).threads == 2


@pytest.mark.parametrize("text", ["bogus = 1\n", "[section]\nk = 1\n", "clusters = 2.5\n", "clusters = \n"])
def test_bad_files(tmp_path, text):
    path = tmp_path / "c.toml"
    path.write_text(text)
    with pytest.raises(errors.ConfigInvalid):
        load_config(path)


def test_missing_file_and_bad_override(tmp_path):
    with pytest.raises(errors.ConfigInvalid):
        load_config(tmp_path / "nope.toml")
    with pytest.raises(errors.ConfigInvalid):
        parse_overrides(["novalue"])


@given(st.integers(2, 30), st.floats(0, 5), st.sampled_from(["SF", "IF"]), st.integers(0, 2**31))
def test_dump_roundtrip_and_hash(tmp_path_factory, K, lam, fusion, seed):
    cfg = replace(RunConfig(), clusters=K, lam=lam, fusion=fusion, seed=seed, out_dir="/x", manifest="/m.json")
    path = tmp_path_factory.mktemp("c") / "c.toml"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg and back.hash() == cfg.hash()
    assert replace(cfg, threads=8, out_dir="/y").hash() == cfg.hash()
    assert replace(cfg, seed=seed + 1).hash() != cfg.hash()


def test_cli_errors_and_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('manifest = "none/manifest.json"\n')
    assert cli.main(["predict", "-c", str(cfg)]) == 1
    assert "signatures.csv" in capsys.readouterr().err
    assert cli.main(["sample", "-c", str(cfg)]) == 1
    assert "manifest" in capsys.readouterr().err
    assert cli.main(["train", "-c", str(cfg), "--set", "nope=1"]) == 1
    assert cli.main(["unknown"]) == 1
    assert cli.main(["--version"]) == 0
    assert cli.main(["report", "-c", str(cfg)]) == 1


def test_cli_internal_error_is_2(tmp_path, monkeypatch):
    def boom(run):
        raise RuntimeError("bug")
    monkeypatch.setitem(cli.HANDLERS, "gradcheck", boom)
    assert cli.main(["gradcheck", "--set", f"out_dir={tmp_path}"]) == 2


def test_gradcheck_stage_records_metadata(tmp_path):
    assert cli.main(["gradcheck", "--set", f"out_dir={tmp_path}", "--threads", "1"]) == 0
    rec = json.loads((tmp_path / "stages" / "gradcheck.json").read_text())
    assert rec["config_hash"] == load_config(None, {"out_dir": str(tmp_path)}).hash()
    assert rec["outputs"] == ["gradcheck.csv"] and "numpy" in rec["versions"]


def test_report_refuses_mixed_hashes(tmp_path):
    out = f"out_dir={tmp_path}"
    assert cli.main(["gradcheck", "--set", out]) == 0
    assert cli.main(["gradcheck", "--set", out, "--set", "seed=5"]) == 0
    assert cli.main(["report", "--set", out, "--set", "seed=5"]) == 0
    # a stage from another config sneaks in
    stages = tmp_path / "stages"
    rec = json.loads((stages / "gradcheck.json").read_text())
    rec["stage"], rec["config_hash"] = "predict", "0" * 16
    (stages / "predict.json").write_text(json.dumps(rec))
    assert cli.main(["report", "--set", out, "--set", "seed=5"]) == 1
