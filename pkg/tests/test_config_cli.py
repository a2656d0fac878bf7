"""Config parsing, hashing, scenario syntax, and CLI exit-code tests."""

import numpy as np
import pytest

from modalcompose import runconfig as rc
from modalcompose.cli import _parse_scenario, cli_dispatch
from modalcompose.envs import Dataset
from modalcompose.errors import ConfigError


# ---------------------------------------------------------------------------
# defaults and parsing


def test_documented_defaults():
    cfg = rc.RunConfig()
    assert cfg.train.steps == 5000
    assert cfg.train.batch == 64
    assert cfg.train.lr == 1e-3
    assert cfg.train.router_steps == 2000
    assert cfg.diffusion.steps == 50
    assert cfg.diffusion.beta_start == 1e-4
    assert cfg.diffusion.beta_end == 0.02
    assert cfg.expert.n_sub == 2
    assert cfg.run.eval_n == 200
    assert cfg.probe.sigma_scale == 0.1
    assert cfg.probe.ema_alpha == 0.1


def test_parse_and_serialize_round_trip():
    cfg = rc.RunConfig()
    cfg = cfg.with_section("train", steps=123, lr=5e-4)
    cfg = cfg.with_section("expert", enc_hidden=(8, 4), noise_band_split=True)
    cfg = cfg.with_section("env", name="phase_reach", modalities=("wpa", "wpb"))
    back = rc.parse_config_text(rc.config_text(cfg))
    assert back == cfg


def test_parse_value_forms():
    text = """
[train]
steps = 42          # comment after value
lr = 2.5e-4

[expert]
noise_band_split = yes
enc_hidden = 16,8
[env]
modalities =
"""
    cfg = rc.parse_config_text(text)
    assert cfg.train.steps == 42
    assert cfg.train.lr == 2.5e-4
    assert cfg.expert.noise_band_split is True
    assert cfg.expert.enc_hidden == (16, 8)
    assert cfg.env.modalities == ()


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ConfigError, match="line 1"):
        rc.parse_config_text("[nowhere]")
    with pytest.raises(ConfigError, match="line 2"):
        rc.parse_config_text("[train]\nwidth = 3")
    with pytest.raises(ConfigError, match="line 2"):
        rc.parse_config_text("[train]\nsteps = many")
    with pytest.raises(ConfigError, match="line 1"):
        rc.parse_config_text("steps = 3")
    with pytest.raises(ConfigError, match="line 2"):
        rc.parse_config_text("[train]\nsteps 3")
    with pytest.raises(ConfigError, match="line 3"):
        rc.parse_config_text("[expert]\n\nnoise_band_split = maybe")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        rc.load_config(tmp_path / "nope.cfg")


def test_config_hash_tracks_all_sections():
    a = rc.RunConfig()
    assert rc.config_hash(a) == rc.config_hash(rc.RunConfig())
    b = a.with_section("run", seed=9)
    assert rc.config_hash(b) != rc.config_hash(a)


def test_model_hash_ignores_run_and_probe():
    a = rc.RunConfig()
    same = a.with_section("run", seed=9, out="elsewhere")
    same = same.with_section("probe", draws=5)
    assert rc.model_hash(same) == rc.model_hash(a)
    different = a.with_section("train", steps=10)
    assert rc.model_hash(different) != rc.model_hash(a)
    assert rc.model_hash(a.with_section("env", name="phase_reach")) != rc.model_hash(a)


# ---------------------------------------------------------------------------
# scenario syntax


def test_scenario_parsing():
    s = _parse_scenario("teleport@12")
    assert s.kind == "runtime_perturbation" and s.step_star == 12
    assert _parse_scenario("reposition").kind == "repositioning"
    c = _parse_scenario("corrupt:zero:vis")
    assert (c.kind, c.onset) == ("corruption", "start")
    assert c.corruption.kind == "zero" and c.corruption.modality == "vis"
    e = _parse_scenario("corrupt:freeze:tac@entry")
    assert e.onset == "occlusion_entry" and e.corruption.modality == "tac"
    g = _parse_scenario("corrupt:gaussian:vis:sigma=0.3")
    assert g.corruption.sigma_c == 0.3


def test_scenario_parse_errors():
    for bad in ("explode", "teleport@soon", "corrupt:zero",
                "corrupt:gaussian:vis:sigma=lots", "corrupt:zero:vis:color=red",
                "corrupt:melt:vis"):
        with pytest.raises(ConfigError):
            _parse_scenario(bad)


# ---------------------------------------------------------------------------
# CLI dispatch and exit codes


def test_unknown_subcommand_exits_2(capsys):
    assert cli_dispatch(["decompose"]) == 2
    capsys.readouterr()


def test_help_exits_0(capsys):
    assert cli_dispatch(["--help"]) == 0
    out = capsys.readouterr().out
    assert "gen-data" in out and "sweep" in out


def test_domain_errors_exit_1(tmp_path, capsys):
    assert cli_dispatch(["gen-data", "--env", "bogus", "--n", "1",
                         "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err
    assert cli_dispatch(["eval", "--manifest", str(tmp_path / "missing.mcpf"),
                         "--n", "1"]) == 1
    capsys.readouterr()


def test_gen_data_cli_round_trip(tmp_path, capsys):
    code = cli_dispatch(["gen-data", "--env", "occluded_reach", "--n", "2",
                         "--seed", "4", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    path = tmp_path / "occluded_reach_n2_seed4.mcds"
    assert str(path) in out
    ds = Dataset.read(path)
    assert ds.n_episodes == 2
    assert ds.env_name == "occluded_reach"


def test_gen_data_cli_explicit_file(tmp_path, capsys):
    target = tmp_path / "demos.mcds"
    code = cli_dispatch(["gen-data", "--env", "phase_reach", "--n", "1",
                         "--seed", "2", "--out", str(target)])
    assert code == 0
    capsys.readouterr()
    assert target.exists()
    assert Dataset.read(target).env_name == "phase_reach"


def test_config_file_drives_cli(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[env]\nname = phase_reach\n[run]\ndemos = 1\nseed = 6\n"
                   f"out = {tmp_path}\n")
    assert cli_dispatch(["gen-data", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert (tmp_path / "phase_reach_n1_seed6.mcds").exists()
