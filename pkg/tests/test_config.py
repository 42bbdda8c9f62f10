import json

import pytest

from survfuse.config import FitConfig, RunConfig, default_workers, load_config
from survfuse.errors import InvalidInputError


def test_round_trip():
    cfg = RunConfig.from_dict({"command": "simulate", "case": "S2", "methods": ["rct"],
                               "horizon": 2, "gamma_range": [1e-6, 1.0]})
    again = RunConfig.from_dict(json.loads(cfg.dumps()))
    assert again == cfg
    assert again.horizon == 2.0 and again.methods == ("rct",)


def test_unknown_key_rejected():
    with pytest.raises(InvalidInputError, match="bandwith"):
        RunConfig.from_dict({"bandwith": 3})


@pytest.mark.parametrize("bad", [
    {"horizon": 0.0}, {"horizon": float("inf")}, {"degree": 0}, {"m": 4},
    {"knots": -1}, {"gamma_grid": 0}, {"gamma_range": [1.0, 0.1]},
    {"propensity": 1.0}, {"propensity": "guess"}, {"interactions": "yes"},
    {"command": "plot"}, {"case": "7"}, {"n1": 0}, {"n0": -1}, {"reps": 0},
    {"seed": -1}, {"methods": ["ols"]}, {"methods": []},
])
def test_out_of_range_rejected(bad):
    with pytest.raises(InvalidInputError):
        RunConfig.from_dict(bad)


def test_fit_config_projection():
    cfg = RunConfig.from_dict({"knots": 2, "propensity": "estimate", "reps": 3})
    fc = cfg.fit_config()
    assert isinstance(fc, FitConfig) and fc.knots == 2
    assert fc.known_propensity is None
    assert FitConfig().known_propensity == 0.5


def test_workers_env(monkeypatch):
    monkeypatch.setenv("SURVFUSE_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("SURVFUSE_WORKERS", "many")
    with pytest.raises(InvalidInputError):
        default_workers()
    monkeypatch.delenv("SURVFUSE_WORKERS")
    assert default_workers() == 1


def test_load_config_errors(tmp_path):
    with pytest.raises(InvalidInputError):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(InvalidInputError, match="not valid JSON"):
        load_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(InvalidInputError, match="object"):
        load_config(p)
