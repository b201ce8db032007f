import csv
import json

import numpy as np
import pytest

from meltfusion import cli
from meltfusion.models import build_model, save_checkpoint

SMALL = ["--set", "synth.laser_on=5", "--set", "synth.laser_off=35"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A 40-frame dataset and three quick runs shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "ds", "--n-frames", 40, "-q", *SMALL) == 0
    assert run("train", "--model", "student", "--data", root / "ds", "--epochs", 3,
               "--out", root / "student", "-q") == 0
    assert run("train", "--model", "rnn", "--data", root / "ds", "--epochs", 3,
               "--out", root / "rnn", "-q") == 0
    assert run("train", "--model", "cnn", "--data", root / "ds", "--epochs", 1,
               "--out", root / "cnn", "-q") == 0
    return root


# -------------------------------------------------------------------- synth

def test_synth_defaults(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "d", "--seed", 7, "-q") == 0
    manifest = json.loads((tmp_path / "d" / "dataset.json").read_text())
    assert manifest["n_frames"] == 200 and manifest["seed"] == 7
    assert len(list((tmp_path / "d" / "frames").glob("*.pgm"))) == 200
    assert capsys.readouterr().out.strip() == str(tmp_path / "d")


def test_synth_same_seed_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--n-frames", 30, "--seed", 3, "-q", *SMALL) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_synth_refuses_non_empty_dir(tmp_path):
    out = tmp_path / "d"
    out.mkdir()
    (out / "notes.txt").write_text("keep me")
    assert run("synth", "--out", out, "--n-frames", 10, "-q", *SMALL) == cli.EXIT_IO
    assert run("synth", "--out", out, "--n-frames", 10, "--force", "-q", *SMALL) == 0
    assert (out / "notes.txt").read_text() == "keep me"


def test_synth_force_leaves_no_stale_frames(tmp_path):
    out = tmp_path / "d"
    assert run("synth", "--out", out, "--n-frames", 30, "-q", *SMALL) == 0
    assert run("synth", "--out", out, "--n-frames", 12, "--force", "-q", *SMALL) == 0
    assert len(list((out / "frames").glob("*.pgm"))) == 12


def test_tiny_synth_warns_then_windowing_fails(tmp_path, capsys):
    ds = tmp_path / "tiny"
    assert run("synth", "--out", ds, "--n-frames", 4, "--set", "synth.laser_on=0",
               "--set", "synth.laser_off=4") == 0
    assert "student window" in capsys.readouterr().err
    assert run("train", "--model", "student", "--data", ds, "--out", tmp_path / "r", "-q") == cli.EXIT_DATA


# -------------------------------------------------------------------- config

def test_run_directory_contents(workdir):
    names = {p.name for p in (workdir / "student").iterdir()}
    assert names == {"model.ckpt", "metrics.json", "predictions.csv", "trainlog.csv", "config.ini"}
    metrics = json.loads((workdir / "student" / "metrics.json").read_text())
    assert {"model", "target", "mae", "r2", "n", "seed", "config_hash"} <= set(metrics)
    assert np.isfinite(metrics["mae"])


def test_resolved_config_lists_defaults(workdir):
    text = (workdir / "rnn" / "config.ini").read_text()
    for needle in ("early_stop_patience = 80", "plateau_factor = 0.5", "lr_init = 0.0001",
                   "epochs_max = 3", "target = mp_ratio", "steady_ratio = 2.0"):
        assert needle in text


def test_flag_beats_config_file(tmp_path, workdir):
    ini = tmp_path / "run.ini"
    ini.write_text(f"[data]\npath = {workdir / 'ds'}\n[model]\nname = student\n"
                   "[training]\nepochs_max = 4\nlr_init = 0.01\n")
    assert run("train", "--config", ini, "--epochs", 2, "--out", tmp_path / "r", "-q") == 0
    metrics = json.loads((tmp_path / "r" / "metrics.json").read_text())
    text = (tmp_path / "r" / "config.ini").read_text()
    assert metrics["epochs"] == 2
    assert "epochs_max = 2" in text and "lr_init = 0.01" in text


def test_resolved_config_reruns_identically(tmp_path, workdir):
    assert run("train", "--config", workdir / "student" / "config.ini", "--out", tmp_path / "again", "-q") == 0
    for name in ("model.ckpt", "metrics.json", "predictions.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (workdir / "student" / name).read_bytes()


@pytest.mark.parametrize("text", ["[training]\nepochs = 3\n", "[optimizer]\nlr = 1\n",
                                  "[training]\nlr_init = fast\n", "[data]\ntarget = area\n"])
def test_bad_config_exits_2(tmp_path, text):
    ini = tmp_path / "bad.ini"
    ini.write_text(text)
    assert run("train", "--config", ini, "--out", tmp_path / "r", "-q") == cli.EXIT_CONFIG


def test_bad_set_override(tmp_path):
    assert run("train", "--set", "epochs_max=3", "--out", tmp_path / "r", "-q") == cli.EXIT_CONFIG


def test_default_recipe_per_model():
    cfg = cli.resolve_config(None, None, model="cnn")
    assert cfg["training"]["epochs_max"] == 10_000 and cfg["training"]["early_stop_patience"] is None
    cfg = cli.resolve_config({"model": {"name": "rnn"}}, None)
    assert cfg["training"]["early_stop_patience"] == 80 and cfg["training"]["batch_size"] == 32


def test_hash_ignores_output_location():
    a = cli.resolve_config(None, {"run": {"out": "x"}})
    b = cli.resolve_config(None, {"run": {"out": "y"}})
    c = cli.resolve_config(None, {"run": {"seed": 1}})
    assert a.digest() == b.digest() != c.digest()


# --------------------------------------------------------------------- train

def test_train_cnn_kh_ratio_smoke(tmp_path, workdir):
    out = tmp_path / "r"
    assert run("train", "--model", "cnn", "--target", "kh_ratio", "--data", workdir / "ds",
               "--epochs", 1, "--out", out, "-q") == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["target"] == "kh_ratio"
    assert np.isfinite(metrics["mae"]) and np.isfinite(metrics["r2"])


def test_train_prints_only_run_dir(tmp_path, workdir, capsys):
    out = tmp_path / "r"
    assert run("train", "--model", "student", "--data", workdir / "ds", "--epochs", 2, "--out", out) == 0
    captured = capsys.readouterr()
    assert captured.out == f"{out}\n"
    assert "recipe student" in captured.err


def test_train_on_generated_data_without_path(tmp_path):
    assert run("train", "--model", "student", "--epochs", 1, "--out", tmp_path / "r", "-q",
               "--set", "synth.n_frames=40", *SMALL) == 0


def test_train_refuses_non_empty_run_dir(workdir):
    assert run("train", "--model", "student", "--data", workdir / "ds", "--epochs", 1,
               "--out", workdir / "student", "-q") == cli.EXIT_IO


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_exits_4(tmp_path, workdir):
    assert run("train", "--model", "student", "--data", workdir / "ds", "--epochs", 5, "--lr", 1e30,
               "--out", tmp_path / "r", "-q") == cli.EXIT_NUMERICAL


def test_missing_dataset_exits_3(tmp_path):
    assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "r", "-q") == cli.EXIT_DATA


# ------------------------------------------------------------------- distill

def test_distill_outputs(tmp_path, workdir):
    out = tmp_path / "d"
    assert run("distill", "--teacher", workdir / "cnn" / "model.ckpt", "--data", workdir / "ds",
               "--epochs", 2, "--out", out, "-q") == 0
    preds = rows(out / "predictions.csv")
    assert list(preds[0]) == ["index", "y_true", "y_pred", "y_teacher"]
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["model"] == "student" and metrics["teacher"] == "cnn"
    assert set(metrics["vs_teacher"]) >= {"mae", "r2", "n"}
    teacher = rows(out / "teacher_predictions.csv")
    by_index = {r["index"]: r["y_teacher"] for r in teacher}
    assert all(by_index[r["index"]] == r["y_teacher"] for r in preds)


def test_distill_untrained_teacher_runs(tmp_path, workdir):
    teacher = build_model("fused", seed=0)
    teacher.metadata["target"] = "mp_ratio"
    path = save_checkpoint(teacher, tmp_path / "t.ckpt")
    assert run("distill", "--teacher", path, "--data", workdir / "ds", "--epochs", 1,
               "--out", tmp_path / "d", "-q") == 0
    assert json.loads((tmp_path / "d" / "metrics.json").read_text())["n"] > 0


def test_distill_image_size_mismatch_exits_2(tmp_path, workdir, capsys):
    teacher = build_model("cnn", seed=0, image_size=64)
    path = save_checkpoint(teacher, tmp_path / "t.ckpt")
    assert run("distill", "--teacher", path, "--data", workdir / "ds", "--out", tmp_path / "d") == cli.EXIT_CONFIG
    assert "expects images" in capsys.readouterr().err


def test_distill_target_mismatch_exits_2(tmp_path, workdir):
    assert run("distill", "--teacher", workdir / "cnn" / "model.ckpt", "--data", workdir / "ds",
               "--target", "kh_ratio", "--out", tmp_path / "d", "-q") == cli.EXIT_CONFIG


def test_distill_needs_teacher(tmp_path):
    assert run("distill", "--out", tmp_path / "d", "-q") == cli.EXIT_CONFIG


# ------------------------------------------------------------------ evaluate

def test_evaluate_matches_training_metrics(workdir, capsys):
    assert run("evaluate", "--checkpoint", workdir / "rnn" / "model.ckpt", "-q") == 0
    got = json.loads(capsys.readouterr().out)
    stored = json.loads((workdir / "rnn" / "metrics.json").read_text())
    assert (got["mae"], got["r2"], got["n"]) == (stored["mae"], stored["r2"], stored["n"])


def test_evaluate_writes_files(tmp_path, workdir):
    assert run("evaluate", "--checkpoint", workdir / "student" / "model.ckpt", "--part", "train",
               "--out", tmp_path / "e", "-q") == 0
    assert json.loads((tmp_path / "e" / "metrics.json").read_text())["part"] == "train"


# ------------------------------------------------------------------- compare

def fake_run(root, name, model, r2, mae=0.1, target="mp_ratio"):
    d = root / name
    d.mkdir()
    (d / "metrics.json").write_text(json.dumps({"model": model, "target": target, "mae": mae, "r2": r2, "n": 5}))
    return d


def test_compare_sorted_by_r2(tmp_path, capsys):
    dirs = [fake_run(tmp_path, n, n, r2) for n, r2 in
            [("rnn", 0.87), ("cnn", 0.96), ("fused", 0.92), ("student", 0.93)]]
    assert run("compare", *dirs, "--out", tmp_path / "table") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["model", "mp_ratio_mae", "mp_ratio_r2"]
    assert [line.split()[0] for line in lines[1:]] == ["cnn", "student", "fused", "rnn"]
    table = rows(tmp_path / "table" / "comparison.csv")
    assert [r["model"] for r in table] == ["cnn", "student", "fused", "rnn"]
    assert float(table[0]["mp_ratio_r2"]) == 0.96


def test_compare_ties_by_name(tmp_path, capsys):
    dirs = [fake_run(tmp_path, n, n, 0.9) for n in ("rnn", "cnn", "fused")]
    assert run("compare", *dirs) == 0
    body = capsys.readouterr().out.strip().splitlines()[1:]
    assert [line.split()[0] for line in body] == ["cnn", "fused", "rnn"]


def test_compare_both_targets_one_row_per_model(tmp_path, capsys):
    dirs = [fake_run(tmp_path, "a", "cnn", 0.96), fake_run(tmp_path, "b", "cnn", 0.97, target="kh_ratio"),
            fake_run(tmp_path, "c", "rnn", 0.87), fake_run(tmp_path, "d", "rnn", 0.81, target="kh_ratio")]
    targets, table = cli.comparison_rows(dirs)
    assert targets == ["mp_ratio", "kh_ratio"]
    assert [r["model"] for r in table] == ["cnn", "rnn"]
    assert table[1]["kh_ratio"] == (0.1, 0.81)


def test_compare_undefined_r2_sorts_last(tmp_path):
    dirs = [fake_run(tmp_path, "a", "flat", None), fake_run(tmp_path, "b", "rnn", -3.0)]
    assert [r["model"] for r in cli.comparison_rows(dirs)[1]] == ["rnn", "flat"]


def test_compare_arity_and_missing(tmp_path, workdir):
    assert run("compare", workdir / "student", "-q") == cli.EXIT_CONFIG
    assert run("compare", workdir / "student", tmp_path, "-q") == cli.EXIT_DATA


def test_compare_real_runs(workdir, capsys):
    assert run("compare", workdir / "student", workdir / "rnn", workdir / "cnn") == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 4


# ------------------------------------------------------------------- predict

def test_predict_student_from_bare_csv(tmp_path, workdir, capsys):
    bare = tmp_path / "absorptivity.csv"
    bare.write_bytes((workdir / "ds" / "absorptivity.csv").read_bytes())
    assert not (tmp_path / "frames").exists()
    assert run("predict", "--checkpoint", workdir / "student" / "model.ckpt", "--input", bare, "-q") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "index,y_pred"
    assert len(lines) - 1 == 40 - 4
    assert lines[1].split(",")[0] == "4"  # first window ends at the fifth sample


def test_predict_cnn_from_csv_names_ports(tmp_path, workdir, capsys):
    code = run("predict", "--checkpoint", workdir / "cnn" / "model.ckpt",
               "--input", workdir / "ds" / "absorptivity.csv")
    assert code == cli.EXIT_CONFIG
    assert "'image'" in capsys.readouterr().err


@pytest.mark.parametrize("kind", ["student", "rnn", "cnn"])
def test_predict_replays_stored_predictions(tmp_path, workdir, kind):
    out = tmp_path / "p.csv"
    assert run("predict", "--checkpoint", workdir / kind / "model.ckpt", "--input", workdir / "ds",
               "--part", "test", "--out", out, "-q") == 0
    got, stored = rows(out), rows(workdir / kind / "predictions.csv")
    assert [(r["index"], r["y_pred"]) for r in got] == [(r["index"], r["y_pred"]) for r in stored]


def test_predict_corrupt_checkpoint_exits_5(tmp_path, workdir):
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((workdir / "student" / "model.ckpt").read_bytes())
    raw[-1] ^= 0xFF
    bad.write_bytes(bytes(raw))
    assert run("predict", "--checkpoint", bad, "--input", workdir / "ds", "-q") == cli.EXIT_IO
    assert run("predict", "--checkpoint", tmp_path / "none.ckpt", "--input", workdir / "ds", "-q") == cli.EXIT_IO


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        run("train", "--model", "transformer")
    assert exc.value.code == cli.EXIT_CONFIG
