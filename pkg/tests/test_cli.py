import numpy as np
import pytest

from rescycle.cli import build_parser, main
from rescycle.config import ConfigError, load_run_config, parse_config_text
from rescycle.ingest import RadarGrid, read_png, write_png, write_rgrid
from rescycle.training import TrainConfig, build_from_config, save_checkpoint

TINY_FLAGS = ["--epochs", "1", "--batch-size", "2", "--crop", "32x32", "--res-blocks", "1", "--base-filters", "4"]


def constant_checkpoint(path, g_bias=0.5, f_bias=-0.5):
    """G and F ignore their input and emit tanh(bias) everywhere."""
    model = build_from_config(TrainConfig(base_filters=4, n_res_blocks=1))
    for gen, bias in ((model.G, g_bias), (model.F, f_bias)):
        gen.tail.weight.data[...] = 0
        gen.tail.bias.data[...] = bias
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path, 1)
    return path


def pixel(bias):
    return int(np.floor((np.tanh(bias) + 1) / 2 * 255 + 0.5))


# synth -------------------------------------------------------------------------


def test_synth_counts(tmp_path):
    assert main(["synth", str(tmp_path), "--n-clean", "5", "--n-noisy", "5", "--seed", "3"]) == 0
    assert len(list(tmp_path.glob("*/*.png"))) == 10
    lines = (tmp_path / "manifest.tsv").read_text().splitlines()
    assert len(lines) == 10
    name, domain, seed = lines[0].split("\t")
    assert (name, domain) == ("clean/clean_0000.png", "clean") and seed.isdigit()
    assert (tmp_path / "corpus.png").exists()


def test_synth_only_noisy(tmp_path):
    assert main(["synth", str(tmp_path), "--n-clean", "0", "--n-noisy", "3"]) == 0
    domains = {line.split("\t")[1] for line in (tmp_path / "manifest.tsv").read_text().splitlines()}
    assert domains == {"noisy"}


def test_synth_is_deterministic(tmp_path):
    for d in ("a", "b"):
        main(["synth", str(tmp_path / d), "--n-clean", "2", "--n-noisy", "2", "--seed", "11"])
    for rel in ("clean/clean_0001.png", "noisy/noisy_0000.png", "manifest.tsv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    main(["synth", str(tmp_path / "c"), "--n-clean", "2", "--n-noisy", "0", "--seed", "12"])
    assert (tmp_path / "a/clean/clean_0001.png").read_bytes() != (tmp_path / "c/clean/clean_0001.png").read_bytes()


def test_synth_rejects_negative_counts(tmp_path):
    assert main(["synth", str(tmp_path), "--n-clean", "-1"]) == 1


# ingest ------------------------------------------------------------------------


def test_ingest_one_file(tmp_path):
    write_rgrid(RadarGrid([[0, 5, 10], [10, 5, 0]]), tmp_path / "line7.rg1")
    assert main(["ingest", str(tmp_path / "out"), str(tmp_path / "line7.rg1")]) == 0
    np.testing.assert_array_equal(read_png(tmp_path / "out/line7.png"), [[0, 128, 255], [255, 128, 0]])


def test_ingest_mixed_inputs(tmp_path, capsys):
    write_rgrid(RadarGrid([[1, 2]]), tmp_path / "good.rg1")
    (tmp_path / "bad.rg1").write_bytes(b"NOPE" + bytes(12))
    code = main(["ingest", str(tmp_path / "out"), str(tmp_path / "good.rg1"), str(tmp_path / "bad.rg1"),
                 str(tmp_path / "missing.rg1")])
    assert code == 2
    assert (tmp_path / "out/good.png").exists()
    err = capsys.readouterr().err
    assert "bad.rg1" in err and "missing.rg1" in err and "good.rg1" not in err


def test_ingest_empty_list(tmp_path):
    assert main(["ingest", str(tmp_path / "out")]) == 0
    assert not (tmp_path / "out").exists()


def test_ingest_log_mode(tmp_path):
    write_rgrid(RadarGrid([[1, 10, 100]]), tmp_path / "g.rg1")
    assert main(["ingest", str(tmp_path / "out"), str(tmp_path / "g.rg1"), "--mode", "log"]) == 0
    np.testing.assert_array_equal(read_png(tmp_path / "out/g.png"), [[0, 128, 255]])


# config ------------------------------------------------------------------------


def test_config_defaults_and_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# desk run\nepochs = 7\nlearning_rate = 0.0002\n\nseed = 5\n")
    cfg = load_run_config(cfg_file, {"epochs": 1})
    assert cfg.train.epochs == 1
    assert cfg.train.learning_rate == 0.0002
    assert cfg.train.batch_size == 2 and (cfg.train.crop_w, cfg.train.crop_h) == (400, 100)
    assert cfg.seed == 5


def test_config_ranges_and_lists():
    text = "top_depth = 0.2, 0.3\nwidth = 64\nnoise_orientations = horizontal\nmode = log\n"
    from rescycle.config import build_run_config
    cfg = build_run_config(parse_config_text(text))
    assert cfg.ranges.top_depth == (0.2, 0.3) and cfg.ranges.width == (64, 64)
    assert cfg.noise.orientations == ("horizontal",)
    assert cfg.ingest.mode == "log"


@pytest.mark.parametrize("text,match", [
    ("epochs = 3\nthis line is wrong\n", r":2: expected 'key = value'"),
    ("epochs = 3\nepoch = 4\n", r":2: unknown key 'epoch'"),
    ("epochs = 3\n\nepochs = 4\n", r":3: duplicate key"),
])
def test_config_parse_errors_name_line(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text, "run.cfg")


def test_config_bad_value_names_line(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("seed = 1\nbatch_size = two\n")
    with pytest.raises(ConfigError, match=r"run.cfg:2: bad value for batch_size"):
        load_run_config(cfg_file)


def test_cli_config_error_is_usage_error(tmp_path, capsys):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("epochs = 0\n")
    assert main(["synth", str(tmp_path / "o"), "--config", str(cfg_file)]) == 1
    assert "epochs" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "a", "b", str(tmp_path / "o"), "--crop", "400by100"])
    assert exc.value.code == 1
    assert not (tmp_path / "o").exists()


def test_help_lists_flags():
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for flag in ("--seed", "--config", "--epochs", "--lr", "--batch-size", "--crop", "--checkpoint-every",
                 "--res-blocks", "--base-filters", "--resume"):
        assert flag in text


# train -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", str(root / "data"), "--n-clean", "4", "--n-noisy", "4", "--seed", "1"]) == 0
    cfg_file = root / "run.cfg"
    cfg_file.write_text("epochs = 5\ncheckpoint_every = 1\n")
    code = main(["train", str(root / "data/clean"), str(root / "data/noisy"), str(root / "run"),
                 "--config", str(cfg_file), *TINY_FLAGS])
    assert code == 0
    return root


def test_train_outputs(trained):
    run = trained / "run"
    assert [p.name for p in sorted((run / "checkpoints").iterdir())] == ["epoch_0001.ckpt"]
    assert len((run / "train_log.csv").read_text().splitlines()) == 3
    assert "epochs = 1" in (run / "train_config.txt").read_text()
    assert (run / "losses.png").exists()


def test_train_echoes_effective_config(tmp_path, caplog):
    main(["synth", str(tmp_path / "d"), "--n-clean", "2", "--n-noisy", "2"])
    with caplog.at_level("INFO", logger="rescycle"):
        main(["train", str(tmp_path / "d/clean"), str(tmp_path / "d/noisy"), str(tmp_path / "r"), *TINY_FLAGS])
    text = caplog.text
    assert "epochs = 1" in text and "learning_rate = 0.0001" in text and "checkpoint_every = 5" in text


def test_train_missing_dir_is_data_error(tmp_path):
    assert main(["train", str(tmp_path / "nope"), str(tmp_path / "nope"), str(tmp_path / "r")]) == 2


# translate ---------------------------------------------------------------------


@pytest.mark.parametrize("direction,bias", [("to_clean", -0.5), ("to_noisy", 0.5)])
def test_translate_direction(tmp_path, direction, bias):
    ck = constant_checkpoint(tmp_path / "ck/m.ckpt")
    write_png(np.full((10, 14), 77, np.uint8), tmp_path / "img.png")
    assert main(["translate", str(ck), str(tmp_path / "out"), str(tmp_path / "img.png"),
                 "--direction", direction]) == 0
    out = read_png(tmp_path / f"out/img_{direction}.png")
    assert out.shape == (10, 14)
    assert np.all(out == pixel(bias))
    assert pixel(-0.5) != pixel(0.5)
    assert read_png(tmp_path / "out/img_composite.png").shape == (10, 14 + 4 + 14)
    assert (tmp_path / "out/translations.png").exists()


def test_translate_empty_list(tmp_path):
    assert main(["translate", str(tmp_path / "none.ckpt"), str(tmp_path / "out")]) == 0
    assert not (tmp_path / "out").exists()


def test_translate_architecture_mismatch(tmp_path, capsys):
    ck = constant_checkpoint(tmp_path / "ck/m.ckpt")
    write_png(np.zeros((8, 8), np.uint8), tmp_path / "img.png")
    code = main(["translate", str(ck), str(tmp_path / "out"), str(tmp_path / "img.png"),
                 "--base-filters", "8", "--res-blocks", "1"])
    assert code == 2
    err = capsys.readouterr().err
    assert "(4, 1, 7, 7)" in err and "(8, 1, 7, 7)" in err


def test_translate_with_trained_checkpoint(trained, tmp_path):
    ck = trained / "run/checkpoints/epoch_0001.ckpt"
    img = trained / "data/noisy/noisy_0000.png"
    assert main(["translate", str(ck), str(tmp_path), str(img)]) == 0
    assert read_png(tmp_path / "noisy_0000_to_clean.png").shape == read_png(img).shape


# eval --------------------------------------------------------------------------


def eval_fixture(tmp_path, value):
    ck = constant_checkpoint(tmp_path / "ck/m.ckpt")
    (tmp_path / "noisy").mkdir()
    for i in range(3):
        write_png(np.full((12, 16), value, np.uint8), tmp_path / f"noisy/n{i}.png")
    return ck


def test_eval_report_and_csv(tmp_path, capsys):
    ck = eval_fixture(tmp_path, 129)
    assert main(["eval", str(ck), str(tmp_path / "noisy"), str(tmp_path / "out"), "--enforce-band"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[-1].startswith("Average")
    assert len((tmp_path / "out/metrics.csv").read_text().splitlines()) == 1 + 3
    expected = ((129 - pixel(0.5)) / 255) ** 2
    row = (tmp_path / "out/metrics.csv").read_text().splitlines()[1].split(",")
    assert float(row[1]) == pytest.approx(expected, rel=1e-12) and row[3] == "true"
    for name in ("metrics.txt", "metrics.png", "translations.png", "composites/n0_composite.png"):
        assert (tmp_path / "out" / name).exists()


def test_eval_enforce_band_fails_outside(tmp_path):
    ck = eval_fixture(tmp_path, pixel(0.5))  # reconstruction is exact, mse = 0
    assert main(["eval", str(ck), str(tmp_path / "noisy"), str(tmp_path / "out")]) == 0
    assert main(["eval", str(ck), str(tmp_path / "noisy"), str(tmp_path / "out2"), "--enforce-band"]) == 2


def test_eval_checkpoint_directory(trained, tmp_path):
    assert main(["eval", str(trained / "run/checkpoints"), str(trained / "data/noisy"), str(tmp_path)]) == 0
    sel = (tmp_path / "selection.txt").read_text().splitlines()
    assert sel[0] == "checkpoint\tavg_mse\tavg_psnr"
    assert sel[-1].startswith("selected\tepoch_0001")
    assert (tmp_path / "epoch_0001/metrics.csv").exists() and (tmp_path / "metrics.csv").exists()


def test_eval_empty_dir_is_data_error(tmp_path):
    (tmp_path / "noisy").mkdir()
    assert main(["eval", str(tmp_path / "x.ckpt"), str(tmp_path / "noisy"), str(tmp_path / "out")]) == 2
