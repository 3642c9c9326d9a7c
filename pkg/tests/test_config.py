from __future__ import annotations

import json

import pytest

from src.config import ExperimentConfig, FearConfig, SearchConfig, SgdConfig
from src.errors import BalanceError, BenchError, ConfigError, NumericError


def _write(tmp_path, text: str):
    path = tmp_path / "exp.toml"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_are_valid_and_hashable() -> None:
    cfg = ExperimentConfig()
    assert cfg.kind == "rank_compare"
    assert hash(cfg) == hash(ExperimentConfig())
    assert cfg.gt_dir.as_posix() == cfg.output_dir


def test_from_file_nested_sections(tmp_path) -> None:
    path = _write(
        tmp_path,
        """
kind = "time_to_threshold"
seeds = [3, 4]

[macro]
init_channels = 4
image_hw = 8

[shortreg]
epochs = [1, 2]
batches = [16]

[dataset.synthetic]
n_total = 50
n_train = 40
hw = 8
""",
    )
    cfg = ExperimentConfig.from_file(path)
    assert cfg.kind == "time_to_threshold"
    assert cfg.seeds == (3, 4)
    assert cfg.macro.init_channels == 4
    assert cfg.shortreg.epochs == (1, 2)
    assert cfg.dataset.synthetic.n_total == 50


def test_to_dict_round_trips_through_from_dict() -> None:
    cfg = ExperimentConfig(seeds=(1,))
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_unknown_key_is_config_error(tmp_path) -> None:
    path = _write(tmp_path, "[fear]\ntua = 0.5\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(path)


def test_missing_file_is_config_error(tmp_path) -> None:
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "nope.toml")


def test_invariants_rejected() -> None:
    with pytest.raises(ConfigError):
        FearConfig(tau=1.0)
    with pytest.raises(ConfigError):
        FearConfig(reject_ratio=1.0)
    with pytest.raises(ConfigError):
        SearchConfig(fastest_update_mode="sometimes")
    with pytest.raises(ConfigError):
        SgdConfig(lr_min=0.2, lr_max=0.1)
    with pytest.raises(ConfigError):
        ExperimentConfig(kind="fig9")
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=())


def test_config_error_is_value_error() -> None:
    with pytest.raises(ValueError):
        FearConfig(freeze_fraction=0.0)


def test_error_to_dict_carries_context() -> None:
    err = NumericError("loss blew up", where="stem.bn", arch=7)
    payload = err.to_dict()
    assert payload == {"error": "NumericError", "message": "loss blew up", "where": "stem.bn", "arch": 7}
    assert isinstance(err, BenchError)
    assert BalanceError("short", counts=[1, 2]).to_dict()["counts"] == [1, 2]
