import pytest

from vdsm.config import ConfigError, RunConfig, TrainConfig, build_run_config, load_run_config, parse_config_text


def test_parse_comments_and_duplicates():
    text = "# header\nkappa_z = 4   # inline\n\nseed=3\n"
    assert parse_config_text(text) == {"kappa_z": "4", "seed": "3"}
    with pytest.raises(ConfigError):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError):
        parse_config_text("not a pair\n")


def test_build_routes_keys_and_converts_types():
    run = build_run_config(
        {"kappa_z": "4", "enc_channels": "8, 8, 16, 16", "blur": "yes", "tau_max": "5", "out": "x", "threads": "2"}
    )
    assert run.train.kappa_z == 4 and run.train.enc_channels == (8, 8, 16, 16) and run.train.blur is True
    assert run.train.schedule.tau_max == 5.0
    assert run.out == "x" and run.threads == 2


def test_unknown_and_bad_values_rejected():
    with pytest.raises(ConfigError):
        build_run_config({"kappa_q": "1"})
    with pytest.raises(ConfigError):
        build_run_config({"kappa_z": "four"})
    with pytest.raises(ConfigError):
        build_run_config({"blur": "maybe"})


def test_validation():
    with pytest.raises(ValueError):
        TrainConfig(kappa_s=4, n_experts=8)
    TrainConfig(kappa_s=4, n_experts=1)  # single-decoder ablation
    with pytest.raises(ValueError):
        TrainConfig(kappa_z=0)


def test_flags_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\nkappa_d = 6\n")
    run = load_run_config(path, {"seed": "9"})
    assert run.train.seed == 9 and run.train.kappa_d == 6


def test_round_trip_dict():
    cfg = TrainConfig(kappa_z=3, enc_channels=(4, 4, 8, 8))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert isinstance(RunConfig().train, TrainConfig)
