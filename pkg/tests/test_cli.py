import json

import numpy as np
import pytest

from ttdsr import cli, data, network


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("imgs")
    rng = np.random.default_rng(0)
    y, x = np.mgrid[0:48, 0:60]
    for i in range(2):
        base = 128 + 80 * np.sin(x / (2.5 + i)) * np.cos(y / 3.5) + rng.normal(0, 4, size=x.shape)
        data.write_image(d / f"gray{i}.png", base)
    rgb = np.stack([np.clip(128 + 60 * np.sin((x + 7 * c) / 4.0), 0, 255) for c in range(3)], axis=-1)
    data.write_image(d / "colour.png", rgb)
    return d


@pytest.fixture(scope="module")
def trained(image_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = cli.main(["train", "--train-dir", str(image_dir), "--out", str(out), "--epochs", "1",
                   "--limit-patches", "64", "--no-augment", "--stride", "8"])
    assert rc == 0
    return out


def record(out):
    return json.loads((out / "run_record.json").read_text())


class TestGenBasis:
    def test_outputs(self, tmp_path):
        assert cli.main(["gen-basis", "--out", str(tmp_path), "--tile-scale", "2"]) == 0
        grid = data.read_image(tmp_path / "kernels.png")
        assert grid.shape == (8 * 17 + 1, 8 * 17 + 1)
        assert grid[1:17, 1:17].min() == grid[1:17, 1:17].max()
        assert record(tmp_path)["results"]["tiles"] == 64
        assert len((tmp_path / "basis.txt").read_text().splitlines()) == 8

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["gen-basis", "--out", str(a)])
        cli.main(["gen-basis", "--out", str(b)])
        for name in ("basis.txt", "kernels.png"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_other_sizes_dump_matrix_only(self, tmp_path):
        assert cli.main(["gen-basis", "--n", "16", "--out", str(tmp_path)]) == 0
        assert not (tmp_path / "kernels.png").exists()
        assert len((tmp_path / "basis.txt").read_text().splitlines()) == 16

    def test_bad_n(self, tmp_path):
        assert cli.main(["gen-basis", "--n", "1", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


class TestAnalyzeFreq:
    def test_table(self, image_dir, tmp_path, capsys):
        assert cli.main(["analyze-freq", str(image_dir / "gray0.png"), "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "coefficient_loss.tsv").read_text().splitlines()
        assert rows[0].startswith("channel") and len(rows) == 65
        res = record(tmp_path)["results"]
        assert res["mean_abs_high"] > res["mean_abs_low"]

    def test_scale_one_is_zero(self, image_dir, tmp_path):
        assert cli.main(["analyze-freq", str(image_dir / "gray1.png"), "--scale", "1", "--out", str(tmp_path)]) == 0
        losses = [float(r.split("\t")[3]) for r in (tmp_path / "coefficient_loss.tsv").read_text().splitlines()[1:]]
        assert losses == [0.0] * 64

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        assert cli.main(["analyze-freq", str(bad), "--out", str(tmp_path)]) == cli.EXIT_IO


class TestTrain:
    def test_artifacts(self, trained):
        params = network.ModelParams.load(trained / "checkpoint.ttdsr")
        assert params.steps == 1
        log = (trained / "loss_log.tsv").read_text().splitlines()
        assert log[0] == "epoch\tloss" and len(log) == 2
        strip = data.read_image(trained / "itcl_kernels.png")
        assert strip.shape[1] > 60 * strip.shape[0] // 2
        rec = record(trained)
        assert rec["settings"]["epochs"] == 1 and rec["seed"] == 0
        assert rec["versions"]["ttdsr"]

    def test_config_file_and_override(self, image_dir, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# desk run\nepochs = 1\nlimit-patches = 16\nno_augment = true\nbatch_size = 8\nseed = 3\n")
        out = tmp_path / "out"
        rc = cli.main(["train", "--config", str(cfg), "--train-dir", str(image_dir), "--out", str(out),
                       "--seed", "4"])
        assert rc == 0
        settings = record(out)["settings"]
        assert settings["batch_size"] == 8 and settings["seed"] == 4 and settings["no_augment"] is True
        assert network.ModelParams.load(out / "checkpoint.ttdsr").steps == 2

    @pytest.mark.parametrize("text", ["epochs = many\n", "unknown_key = 1\n", "just words\n",
                                      "no_augment = maybe\n", "scale = 5\n"])
    def test_bad_config(self, tmp_path, image_dir, text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        rc = cli.main(["train", "--config", str(cfg), "--train-dir", str(image_dir), "--out", str(tmp_path)])
        assert rc == cli.EXIT_CONFIG

    def test_missing_data_source(self, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path), "--epochs", "1"]) == cli.EXIT_CONFIG

    def test_missing_output(self, image_dir, monkeypatch):
        monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)
        assert cli.main(["train", "--train-dir", str(image_dir)]) == cli.EXIT_CONFIG

    def test_output_env_override(self, image_dir, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        assert cli.main(["gen-basis"]) == 0
        assert (tmp_path / "env" / "basis.txt").exists()

    def test_diverged_is_reported(self, image_dir, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise network.TrainingDiverged("loss is nan")
        monkeypatch.setattr(cli.training, "fit", boom)
        rc = cli.main(["train", "--train-dir", str(image_dir), "--out", str(tmp_path), "--epochs", "1",
                       "--limit-patches", "8", "--no-augment"])
        assert rc == cli.EXIT_DIVERGED

    def test_manifest_source(self, image_dir, tmp_path):
        man = tmp_path / "list.txt"
        man.write_text("\n".join(str(p) for p in data.list_images(image_dir)) + "\n")
        rc = cli.main(["train", "--manifest", str(man), "--out", str(tmp_path / "m"), "--epochs", "1",
                       "--limit-patches", "8", "--no-augment"])
        assert rc == 0


class TestInference:
    def test_sr_gray(self, trained, image_dir, tmp_path):
        small = tmp_path / "small.png"
        data.write_image(small, data.read_image(image_dir / "gray0.png")[:16, :20])
        out = tmp_path / "sr.png"
        assert cli.main(["sr", "--checkpoint", str(trained / "checkpoint.ttdsr"), "--input", str(small),
                         "--output", str(out), "--scale", "3"]) == 0
        assert data.read_image(out).shape == (48, 60)
        assert (tmp_path / "run_record.json").exists()

    def test_sr_colour(self, trained, image_dir, tmp_path):
        out = tmp_path / "sr.png"
        assert cli.main(["sr", "--checkpoint", str(trained / "checkpoint.ttdsr"),
                         "--input", str(image_dir / "colour.png"), "--output", str(out), "--scale", "2"]) == 0
        assert data.read_image(out).shape == (96, 120, 3)

    def test_sr_bad_checkpoint(self, tmp_path, image_dir):
        bad = tmp_path / "bad.ttdsr"
        bad.write_bytes(b"garbage")
        rc = cli.main(["sr", "--checkpoint", str(bad), "--input", str(image_dir / "gray0.png"),
                       "--output", str(tmp_path / "o.png")])
        assert rc == cli.EXIT_IO

    def test_sr_untrained_checkpoint(self, tmp_path, image_dir):
        network.build_model().save(tmp_path / "fresh.ttdsr")
        rc = cli.main(["sr", "--checkpoint", str(tmp_path / "fresh.ttdsr"),
                       "--input", str(image_dir / "gray0.png"), "--output", str(tmp_path / "o.png")])
        assert rc == cli.EXIT_CONFIG

    def test_eval(self, trained, image_dir, tmp_path, capsys):
        assert cli.main(["eval", "--checkpoint", str(trained / "checkpoint.ttdsr"), "--hr-dir", str(image_dir),
                         "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "scores.tsv").read_text().splitlines()
        assert len(rows) == 4
        res = record(tmp_path)["results"]
        assert np.isfinite(res["psnr"]) and np.isfinite(res["bicubic_psnr"])
        assert "bicubic baseline" in capsys.readouterr().out


class TestSweep:
    def test_three_rows(self, image_dir, tmp_path):
        rc = cli.main(["sweep-t", "--train-dir", str(image_dir), "--val-dir", str(image_dir),
                       "--out", str(tmp_path), "--epochs", "1", "--limit-patches", "8",
                       "--no-augment", "--t-list", "3,5,8"])
        assert rc == 0
        rows = (tmp_path / "sweep_t.tsv").read_text().splitlines()[1:]
        assert [r.split("\t")[0] for r in rows] == ["3", "5", "8"]
        assert all(np.isfinite(float(r.split("\t")[1])) for r in rows)

    def test_needs_validation(self, image_dir, tmp_path):
        rc = cli.main(["sweep-t", "--train-dir", str(image_dir), "--out", str(tmp_path), "--epochs", "1"])
        assert rc == cli.EXIT_CONFIG

    def test_bad_list(self, image_dir, tmp_path):
        rc = cli.main(["sweep-t", "--train-dir", str(image_dir), "--val-dir", str(image_dir),
                       "--out", str(tmp_path), "--t-list", "a,b"])
        assert rc == cli.EXIT_CONFIG


def test_determinism(image_dir, tmp_path):
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        assert cli.main(["train", "--train-dir", str(image_dir), "--out", str(out), "--epochs", "2",
                         "--limit-patches", "16", "--batch-size", "8", "--no-augment"]) == 0
    for name in ("checkpoint.ttdsr", "loss_log.tsv", "itcl_kernels.png"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
