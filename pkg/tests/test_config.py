import pytest

from app.core.config import PipelineConfig, load_pipeline_config, parse_overrides
from app.core.errors import ConfigError, InputNotFound


def test_overrides_nest_and_parse_json_values():
    overrides = parse_overrides(["crf.pairwise_weight=5", "frontend.flow_provider=ground_truth", "seed=3"])
    assert overrides == {"crf": {"pairwise_weight": 5}, "frontend": {"flow_provider": "ground_truth"}, "seed": 3}


def test_malformed_override():
    with pytest.raises(ConfigError):
        parse_overrides(["crf.pairwise_weight"])
    with pytest.raises(ConfigError):
        parse_overrides(["=1"])


def test_defaults():
    config = load_pipeline_config()
    assert config == PipelineConfig()
    assert config.estimation_mode == "sparse+dense"
    assert config.ransac_seed() == config.seed


def test_file_then_overrides_take_precedence(tmp_path):
    path = tmp_path / "mmf.toml"
    path.write_text("seed = 7\n\n[crf]\npairwise_weight = 2.5\nspatial_sigma = 9.0\n")
    config = load_pipeline_config(str(path), parse_overrides(["crf.pairwise_weight=4"]))
    assert config.seed == 7
    assert config.crf.pairwise_weight == 4
    assert config.crf.spatial_sigma == 9.0


def test_environment_sits_below_the_file(tmp_path, monkeypatch):
    monkeypatch.setenv("MMF_SEED", "11")
    monkeypatch.setenv("MMF_ESTIMATION_MODE", "sparse")
    assert load_pipeline_config().seed == 11
    path = tmp_path / "mmf.toml"
    path.write_text("seed = 7\n")
    config = load_pipeline_config(str(path))
    assert config.seed == 7
    assert config.estimation_mode == "sparse"


def test_ransac_seed_falls_back_to_the_run_seed():
    assert load_pipeline_config(overrides={"seed": 5}).ransac_seed() == 5
    assert load_pipeline_config(overrides={"seed": 5, "ransac": {"seed": 9}}).ransac_seed() == 9


def test_unknown_and_invalid_keys_are_config_errors():
    with pytest.raises(ConfigError):
        load_pipeline_config(overrides={"no_such_key": 1})
    with pytest.raises(ConfigError) as info:
        load_pipeline_config(overrides={"crf": {"pairwise_weight": -1}})
    assert "crf.pairwise_weight" in str(info.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(InputNotFound):
        load_pipeline_config(str(tmp_path / "absent.toml"))
