from pathlib import Path

import pytest

from core.config_validator import CONFIG_KEYS, experiment_hash, load_experiment_config, read_config_file, resolve
from core.exceptions import ConfigurationError

EXAMPLE = Path(__file__).resolve().parent.parent / "config" / "experiment.example.env"


def _write(tmp_path, text):
    path = tmp_path / "experiment.env"
    path.write_text(text)
    return path


def test_defaults_load():
    cfg = load_experiment_config()
    assert cfg.kind == "point"
    assert cfg.window.horizon >= 1
    assert cfg.window_day.horizon == 24
    assert set(cfg.document) == set(CONFIG_KEYS)


def test_example_file_is_valid():
    cfg = load_experiment_config(EXAMPLE)
    assert cfg.seed == 20240101
    assert cfg.sim.start == "2024-01-01 00:00"


def test_example_file_covers_every_key():
    assert set(read_config_file(EXAMPLE)) == set(CONFIG_KEYS)


def test_sections_and_comments_are_ignored(tmp_path):
    path = _write(tmp_path, "# [sim]\nSIM_N_BASE_STATIONS=2\n\n# [meta]\n# tasks\nMETA_N_TASKS=3\n")
    cfg = load_experiment_config(path)
    assert cfg.sim.n_base_stations == 2
    assert cfg.n_tasks == 3


def test_lists_and_booleans(tmp_path):
    path = _write(tmp_path, "CONFORMAL_ALPHAS=0.05, 0.1\nCONFORMAL_FOLDS=2,5\nCONFORMAL_BONFERRONI=yes\n"
                            "EXPERIMENT_RATIOS=real-only,1:1,10:1\n")
    cfg = load_experiment_config(path)
    assert cfg.alphas == (0.05, 0.1)
    assert cfg.folds == (2, 5)
    assert cfg.bonferroni is True
    assert cfg.ratios == ("real-only", "1:1", "10:1")


def test_unknown_key(tmp_path):
    with pytest.raises(ConfigurationError, match="MODEL_WIDTH"):
        load_experiment_config(_write(tmp_path, "MODEL_WIDTH=8\n"))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="does not exist"):
        load_experiment_config(tmp_path / "nope.env")


@pytest.mark.parametrize("line, key", [
    ("MODEL_HIDDEN=eight", "MODEL_HIDDEN"),
    ("MODEL_DROPOUT=1.0", "MODEL_DROPOUT"),
    ("META_QUERY_SOURCE=both", "META_QUERY_SOURCE"),
    ("CONFORMAL_FOLDS=1", "CONFORMAL_FOLDS"),
    ("CONFORMAL_ALPHAS=0", "CONFORMAL_ALPHAS"),
    ("EXPERIMENT_RATIOS=3:2", "EXPERIMENT_RATIOS"),
    ("CONFORMAL_BONFERRONI=maybe", "CONFORMAL_BONFERRONI"),
    ("SIM_HORIZON_HOURS=24", "SIM_HORIZON_HOURS"),
    ("EXPERIMENT_KIND=backtest", "EXPERIMENT_KIND"),
])
def test_bad_value_names_the_key(tmp_path, line, key):
    with pytest.raises(ConfigurationError, match=key):
        load_experiment_config(_write(tmp_path, line + "\n"))


def test_heads_must_divide_hidden():
    with pytest.raises(ConfigurationError, match="MODEL_HEADS"):
        load_experiment_config(overrides={"MODEL_HIDDEN": 6, "MODEL_HEADS": 4})


def test_amplitude_range():
    with pytest.raises(ConfigurationError, match="SIM_AMPLITUDE_HI"):
        load_experiment_config(overrides={"SIM_AMPLITUDE_LO": 2.0, "SIM_AMPLITUDE_HI": 1.0})


@pytest.mark.parametrize("start, end", [(18, 8), (9, 9)])
def test_working_window_must_be_ordered(start, end):
    with pytest.raises(ConfigurationError, match="SIM_WORK_END_HOUR"):
        load_experiment_config(overrides={"SIM_WORK_START_HOUR": start, "SIM_WORK_END_HOUR": end})


def test_csv_source_needs_traffic_path():
    with pytest.raises(ConfigurationError, match="DATA_TRAFFIC_PATH"):
        load_experiment_config(overrides={"DATA_SOURCE": "csv"})


def test_csv_paths_must_exist(tmp_path):
    with pytest.raises(ConfigurationError, match="does not exist"):
        load_experiment_config(overrides={"DATA_SOURCE": "csv", "DATA_TRAFFIC_PATH": str(tmp_path / "t.csv")})


def test_overrides_win_and_none_is_ignored(tmp_path):
    path = _write(tmp_path, "SEED=5\n")
    assert load_experiment_config(path, {"SEED": 9}).seed == 9
    assert load_experiment_config(path, {"SEED": None}).seed == 5


def test_unknown_override():
    with pytest.raises(ConfigurationError, match="unknown override"):
        resolve({}, {"LEVERAGE": 2})


def test_hash_is_stable_and_seed_sensitive():
    a = load_experiment_config(overrides={"SEED": 1})
    b = load_experiment_config(overrides={"SEED": 1})
    c = load_experiment_config(overrides={"SEED": 2})
    assert experiment_hash(a) == experiment_hash(b)
    assert len(experiment_hash(a)) == 64
    assert experiment_hash(a) != experiment_hash(c)


def test_hash_ignores_file_formatting(tmp_path):
    plain = _write(tmp_path, "SEED=3\nMODEL_HIDDEN=8\n")
    spaced = tmp_path / "spaced.env"
    spaced.write_text("# header\nMODEL_HIDDEN=8\n\nSEED=3\n")
    assert experiment_hash(load_experiment_config(plain)) == experiment_hash(load_experiment_config(spaced))
