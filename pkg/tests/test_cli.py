import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import presets
from checkpoint import save_checkpoint
from cli import main
from model import init_params


@pytest.fixture
def small_data(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"synthetic_train": 64, "synthetic_test": 16}))
    return path


def _save(tmp_path, name, cfg):
    cfg = cfg.validate()
    return save_checkpoint(tmp_path / f"{name}.ckpt", cfg, init_params(cfg))


def _output(capsys):
    return dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines() if "=" in line)


class TestParser:
    def test_list(self, capsys):
        main(["list"])
        out = capsys.readouterr().out
        assert "toy" in out and "cifar_small" in out

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["train", "--no-such-flag"])
        assert info.value.code == 2

    def test_unknown_preset(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["train", "--preset", "huge", "--out", str(tmp_path)])
        assert info.value.code == 2

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"width": 3}))
        with pytest.raises(SystemExit) as info:
            main(["train", "--config", str(path), "--out", str(tmp_path)])
        assert info.value.code == 2


class TestTrain:
    def test_writes_checkpoint_and_log(self, tmp_path, small_data, capsys):
        out = tmp_path / "run"
        main([
            "train", "--preset", "smoke", "--config", str(small_data), "--out", str(out),
            "--epochs", "1", "--batch-size", "16", "--lr", "0.01",
        ])
        printed = _output(capsys)
        assert (out / "best.ckpt").is_file() and (out / "metrics.csv").is_file()
        assert printed["checkpoint"] == str(out / "best.ckpt")
        assert 0.0 <= float(printed["best_val"]) <= 1.0
        assert json.loads((out / "run_config.json").read_text())["depth"] == presets.smoke.depth

    def test_sweep_alpha(self, tmp_path, small_data, capsys):
        out = tmp_path / "sweep"
        main([
            "sweep-alpha", "--preset", "toy", "--config", str(small_data), "--out", str(out),
            "--epochs", "1", "--values", "0,1",
        ])
        table = pd.read_csv(out / "alpha_sweep.csv")
        assert table["alpha"].tolist() == [0.0, 1.0]

    def test_bad_alpha_values(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["sweep-alpha", "--preset", "toy", "--out", str(tmp_path), "--values", "0,half"])
        assert info.value.code == 2


class TestEval:
    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["eval", "--ckpt", str(tmp_path / "absent.ckpt")])
        assert info.value.code == 1

    def test_zero_shift_equals_plain(self, tmp_path, small_data, capsys):
        ckpt = str(_save(tmp_path, "m", presets.toy))
        main(["eval", "--ckpt", ckpt, "--config", str(small_data)])
        plain = _output(capsys)
        main(["eval", "--ckpt", ckpt, "--config", str(small_data), "--perturb", "hshift:0"])
        assert _output(capsys) == plain

    def test_scale_sweep_table(self, tmp_path, small_data, capsys):
        ckpt = str(_save(tmp_path, "m", presets.toy))
        main(["eval", "--ckpt", ckpt, "--config", str(small_data), "--perturb", "scale:all", "--out", str(tmp_path)])
        capsys.readouterr()
        table = pd.read_csv(tmp_path / "perturb_scale.csv")
        assert table["percent"].tolist() == [15, 30, 45, 60]

    def test_bad_perturbation(self, tmp_path, small_data):
        ckpt = str(_save(tmp_path, "m", presets.toy))
        with pytest.raises(SystemExit) as info:
            main(["eval", "--ckpt", ckpt, "--config", str(small_data), "--perturb", "hshift:20"])
        assert info.value.code == 2


class TestAnalyze:
    def test_non_locality_counts(self, tmp_path, small_data, capsys):
        ckpt = str(_save(tmp_path, "m", presets.toy))
        out = tmp_path / "an"
        main(["analyze", "--ckpt", ckpt, "--config", str(small_data), "--metric", "nonlocality",
              "--samples", "1", "--out", str(out)])
        heads = pd.read_csv(out / "revit_nonlocality_heads.csv")
        layers = pd.read_csv(out / "revit_nonlocality_layers.csv")
        assert len(heads) + len(layers) == 2 * presets.toy.heads + 2

    def test_compare_two(self, tmp_path, small_data, capsys):
        a = str(_save(tmp_path, "vit", replace(presets.toy, variant="vit")))
        b = str(_save(tmp_path, "revit", presets.toy))
        out = tmp_path / "an"
        main(["analyze", "--ckpt", a, "--ckpt", b, "--config", str(small_data), "--metric", "nonlocality",
              "--samples", "2", "--out", str(out)])
        compare = pd.read_csv(out / "compare_nonlocality.csv")
        assert list(compare.columns) == ["layer", "D_vit", "D_revit", "difference"]

    def test_alpha_on_vit(self, tmp_path, capsys):
        ckpt = str(_save(tmp_path, "vit", replace(presets.toy, variant="vit")))
        main(["analyze", "--ckpt", ckpt, "--metric", "alpha", "--out", str(tmp_path / "an")])
        assert "notice:" in capsys.readouterr().out
        assert (tmp_path / "an" / "vit_alpha.csv").read_text().strip() == "model,layer,alpha"

    def test_similarity_files(self, tmp_path, small_data, capsys):
        ckpt = str(_save(tmp_path, "m", presets.toy))
        out = tmp_path / "an"
        main(["analyze", "--ckpt", ckpt, "--config", str(small_data), "--metric", "similarity",
              "--samples", "3", "--out", str(out)])
        assert len(list(out.glob("revit_similarity_img*_layer*.csv"))) == 3 * presets.toy.depth


class TestExportAttention:
    def test_maps_and_index(self, tmp_path, small_data, capsys):
        cfg = presets.toy
        ckpt = str(_save(tmp_path, "m", cfg))
        args = ["export-attn", "--ckpt", ckpt, "--config", str(small_data), "--image", "0"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b")])
        csvs = sorted((tmp_path / "a").glob("attn_l*_h*.csv"))
        assert len(csvs) == cfg.depth * cfg.heads
        for path in csvs:
            attn = np.loadtxt(path, delimiter=",")
            assert attn.shape == (cfg.num_tokens, cfg.num_tokens)
            np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-6)
            assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()
        index = json.loads((tmp_path / "a" / "index.json").read_text())
        assert len(index["maps"]) == cfg.depth * cfg.heads

    def test_npy_image(self, tmp_path, capsys):
        cfg = presets.toy
        ckpt = str(_save(tmp_path, "m", cfg))
        image = tmp_path / "img.npy"
        np.save(image, np.zeros((cfg.channels, cfg.image_size, cfg.image_size), dtype=np.float32))
        main(["export-attn", "--ckpt", ckpt, "--image", str(image), "--out", str(tmp_path / "a")])
        blob = np.fromfile(tmp_path / "a" / "attn_l0_h0.f32", dtype="<f4")
        assert blob.size == cfg.num_tokens ** 2

    def test_bad_image(self, tmp_path):
        ckpt = str(_save(tmp_path, "m", presets.toy))
        with pytest.raises(SystemExit) as info:
            main(["export-attn", "--ckpt", ckpt, "--image", "cat.png", "--out", str(tmp_path / "a")])
        assert info.value.code == 2
