from pathlib import Path

import pytest

from afford.config import RunConfig, load_config, parse_config
from afford.errors import ConfigError

REPO = Path(__file__).resolve().parents[1]


def test_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    sl, sr = cfg.schedules()
    assert sl.kind.value == "scaled_linear" and sr.kind.value == "squared_cosine" and sl.n_steps == 100


def test_shipped_config_parses():
    cfg = load_config(REPO / "configs" / "desk.yaml")
    assert cfg.generator.n == 2500 and cfg.model.d_model == 64 and cfg.train.holdout == 0.2


def test_values_and_exponent_floats():
    cfg = parse_config("model:\n  lr: 1e-3\n  steps: 10\neval:\n  sigma_h: 4\n")
    assert cfg.model.lr == 1e-3 and cfg.model.steps == 10 and cfg.eval.sigma_h == 4.0


@pytest.mark.parametrize("text,line,needle", [
    ("generator:\n  n: 10\n  colour: red\n", 3, "unknown key 'colour'"),
    ("generator:\n  n: ten\n", 2, "expected an integer"),
    ("generator:\n  width: 4\n", 2, "outside"),
    ("generator:\n  archetypes: [mug, teapot]\n", 2, "teapot"),
    ("generator:\n  provenance: alien\n", 2, "alien"),
    ("model:\n  d_model: 30\n", 2, "divisible"),
    ("bogus: 1\n", 1, "unknown section"),
    ("schedules:\n  loc: {kind: linearish}\n", 2, "linearish"),
    ("schedules:\n  loc: {n_steps: 10}\n", 2, "same n_steps"),
    ("schedules:\n  loc:\n    beta_start: 0.5\n    beta_end: 0.1\n", 3, "schedules.loc"),
    ("eval:\n  samples_per_scene: 0\n", 2, "outside"),
    ("generator:\n  twin: 3\n", 2, "true/false"),
    ("generator: [1, 2]\n", 1, "mapping"),
    ("generator:\n  n: 1\n  n: 2\n", 3, "duplicate"),
    ("generator:\n  n: [1\n", 3, "invalid YAML"),
])
def test_line_anchored_errors(text, line, needle):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.yaml")
    assert exc.value.line == line
    assert needle in str(exc.value)
    assert "run.yaml" in str(exc.value)


def test_missing_file_names_path(tmp_path):
    p = tmp_path / "nope.yaml"
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert str(p) in str(exc.value)
