import json
import os

import logging

import pydantic
import pytest

from config import RunConfig, load_env_var, resolve_threads
from data_io import CIFAR_STATS
from shared import ValidationError, set_log_level


def test_env_var_from_dotenv_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("REVIT_TEST_KEY", raising=False)
    (tmp_path / ".env").write_text("# comment\nexport REVIT_TEST_KEY='abc'\n")
    assert load_env_var("REVIT_TEST_KEY") == "abc"
    os.environ.pop("REVIT_TEST_KEY", None)


def test_env_var_missing(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("REVIT_ABSENT_KEY", raising=False)
    assert load_env_var("REVIT_ABSENT_KEY") is None


def test_threads(monkeypatch):
    monkeypatch.setenv("REVIT_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(2) == 2
    assert resolve_threads(0) >= 1
    monkeypatch.setenv("REVIT_THREADS", "many")
    with pytest.raises(ValidationError):
        resolve_threads()


def test_precedence(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"depth": 3, "epochs": 4}))
    run = RunConfig.load(path, {"epochs": 7, "seed": None}, base={"depth": 2, "heads": 2})
    assert (run.depth, run.heads, run.epochs, run.seed) == (3, 2, 7, 0)


def test_unknown_key_rejected():
    with pytest.raises(pydantic.ValidationError):
        RunConfig.load(overrides={"width": 3})


def test_invalid_model_rejected():
    with pytest.raises(pydantic.ValidationError):
        RunConfig.load(overrides={"heads": 5})


def test_synthetic_split_seeds_differ():
    run = RunConfig.load(overrides={"image_size": 16, "patch_size": 4, "synthetic_train": 8, "synthetic_test": 8})
    train, test = run.load_datasets()
    assert train.images.tobytes() != test.images.tobytes()
    assert train.image_shape == test.image_shape == (3, 16, 16)


def test_log_level_from_dotenv_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("REVIT_LOG_LEVEL", raising=False)
    (tmp_path / ".env").write_text("REVIT_LOG_LEVEL=warning\n")
    try:
        set_log_level(None)
        assert logging.getLogger("revit").level == logging.WARNING
    finally:
        os.environ.pop("REVIT_LOG_LEVEL", None)
        set_log_level("INFO")


def test_normalize_keeps_datasets_in_pixel_space():
    run = RunConfig.load(overrides={
        "image_size": 16, "patch_size": 4, "synthetic_train": 8, "synthetic_test": 8, "normalize": True,
    })
    train, test = run.load_datasets()
    assert run.input_stats() == CIFAR_STATS
    assert train.images.min() >= 0.0 and train.images.max() <= 1.0
    assert RunConfig.load(overrides={"normalize": False}).input_stats() is None


def test_normalize_needs_three_channels():
    with pytest.raises(pydantic.ValidationError):
        RunConfig.load(overrides={"normalize": True, "channels": 1})
