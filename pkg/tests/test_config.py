import pytest

from orthospot.config import RunConfig, load_config, parse_config_text
from orthospot.errors import ConfigError


def test_defaults_follow_training_recipe():
    cfg = RunConfig()
    tc = cfg.train_config()
    assert (tc.batch_size, tc.lr_init, tc.momentum, tc.weight_decay) == (256, 0.01, 0.9, 0.001)
    assert (tc.lr_decay_factor, tc.plateau_patience, tc.stop_patience) == (2.0, 3, 10)
    assert cfg.partition == (1959, 159, 159) and cfg.min_utterances == 11
    assert cfg.excluded_words == ("happy", "marvin", "sheila")
    assert cfg.model_sizes()["gru_hidden"] == 256
    assert cfg.feature_config().n_mels == 40


def test_parse_file_with_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# a run\nlambda_orth = 0   # ablation\n\nscenario_mode=two\ncheck_grad_coverage = yes\n"
                    "partition = 10, 3, 3\n")
    cfg = load_config(path, ["seed=4"])
    assert cfg.lambda_orth == 0.0 and cfg.scenario_mode == "two" and cfg.check_grad_coverage
    assert cfg.partition == (10, 3, 3) and cfg.seed == 4


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\n")
    assert load_config(path, ["seed=2"]).seed == 2


@pytest.mark.parametrize("text, line", [("seed = 1\nbogus = 3\n", 2), ("seed 1\n", 1), ("\n\nseed = x\n", 3)])
def test_parse_errors_carry_line_number(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config_text(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        load_config(None, ["scenario_mode=three"])
    with pytest.raises(ConfigError):
        load_config(None, ["gru_hidden=0"])
    with pytest.raises(ConfigError):
        load_config(None, ["nokey"])
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")


def test_snapshot_round_trips(tmp_path):
    cfg = load_config(None, ["lambda_orth=0", "excluded_words=a,b", "lr_init=0.1", "input_norm=none"])
    path = tmp_path / "snap.cfg"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg
