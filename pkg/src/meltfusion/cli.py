"""Command-line interface: ``meltfusion <command> [options]``.

Commands: synth, train, distill, evaluate, compare, predict.

Settings come from three layers, later ones winning: built-in defaults (the
per-model training recipe included), an INI file given with ``--config``, and
flags.  ``--set section.key=value`` reaches any config key.  Every run writes
the fully resolved ``config.ini`` next to its outputs.

Exit codes::

    0  success
    2  bad configuration or usage, model/data mismatch
    3  data error (unreadable or inconsistent dataset, missing metrics)
    4  numerical failure (non-finite loss)
    5  I/O error (unreadable checkpoint, output directory in the way)

Diagnostics go to stderr; stdout carries only artifact paths or tables.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import training as TR
from .models import CheckpointError, Model, load_checkpoint, save_checkpoint
from .tensor import NumericalError, ShapeError

log = logging.getLogger("meltfusion")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_IO = 2, 3, 4, 5
RUN_FORMAT = 1
STUDENT_WINDOW = 5


class ConfigError(Exception):
    """Bad configuration, usage, or a checkpoint that does not fit the data."""


class OutputExists(OSError):
    pass


# ------------------------------------------------------------------ config

def _opt(parse):
    def inner(text):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


def _bool(text):
    states = configparser.ConfigParser.BOOLEAN_STATES
    if text.strip().lower() not in states:
        raise ValueError(f"not a boolean: {text!r}")
    return states[text.strip().lower()]


def _choice(*options):
    def inner(text):
        if text not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return text
    return inner


_SYNTH_TYPES = {f.name: type(f.default) for f in dataclasses.fields(D.SynthConfig) if f.name != "seed"}

SCHEMA = {
    "run": {"seed": int, "out": str, "deterministic": _bool},
    "data": {"path": str, "target": _choice(*D.TARGETS), "fraction": float,
             "split": _choice("chronological", "random"), "rotation_deg": _opt(float)},
    "synth": {"seed": _opt(int), **_SYNTH_TYPES},
    "model": {"name": _choice(*TR.RECIPES), "seq_len": _opt(int)},
    "training": {"epochs_max": int, "batch_size": int, "lr_init": float,
                 "early_stop_patience": _opt(int), "plateau_factor": _opt(float),
                 "plateau_patience": _opt(int), "lr_min": float, "val_fraction": float,
                 "init_output_bias": _bool},
    "distill": {"teacher": str},
}

_FIXED_DEFAULTS = {
    "run": {"seed": 0, "out": "", "deterministic": True},
    "data": {"path": "", "target": "mp_ratio", "fraction": 0.8, "split": "chronological",
             "rotation_deg": None},
    "synth": {"seed": None, **{k: getattr(D.SynthConfig(), k) for k in _SYNTH_TYPES}},
    "model": {"name": "cnn", "seq_len": None},
    "distill": {"teacher": ""},
}


def _text(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(section: str, key: str, text: str):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]; known: {', '.join(SCHEMA)}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]; known: {', '.join(SCHEMA[section])}")
    try:
        return SCHEMA[section][key](text)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from None


def read_config_file(path) -> dict[str, dict]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values: dict[str, dict] = {}
    for section in parser.sections():
        for key, text in parser.items(section):
            values.setdefault(section, {})[key] = parse_value(section, key, text)
    return values


@dataclasses.dataclass
class RunConfig:
    """Fully resolved settings for one command."""

    values: dict[str, dict]

    def __getitem__(self, section):
        return self.values[section]

    @property
    def model(self) -> str:
        return self.values["model"]["name"]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def train_config(self) -> TR.TrainConfig:
        try:
            return TR.TrainConfig(**self.values["training"], seed=self.seed,
                                  shuffle=not self.values["run"]["deterministic"])
        except ValueError as exc:
            raise ConfigError(f"[training] {exc}") from None

    def synth_config(self) -> D.SynthConfig:
        kw = {k: v for k, v in self.values["synth"].items() if k != "seed"}
        return D.SynthConfig(seed=self.values["synth"]["seed"], **kw)

    def to_ini(self, include_out: bool = True) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, kv in self.values.items():
            parser[section] = {k: _text(v) for k, v in kv.items() if include_out or (section, k) != ("run", "out")}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        """Hash of everything that shapes the results (the output location does not)."""
        return hashlib.sha256(self.to_ini(include_out=False).encode()).hexdigest()[:16]


def resolve_config(file_values: dict | None, overrides: dict | None, model: str | None = None) -> RunConfig:
    """Merge defaults, file values and overrides; training defaults follow the model's recipe."""
    merged = {s: dict(kv) for s, kv in _FIXED_DEFAULTS.items()}
    layers = [file_values or {}, overrides or {}]
    for layer in layers:
        for section, kv in layer.items():
            if section == "training":
                continue
            merged.setdefault(section, {}).update(kv)
    if model is not None:
        merged["model"]["name"] = model
    name = merged["model"]["name"]
    base = TR.RECIPES[name]
    merged["training"] = {k: getattr(base, k) for k in SCHEMA["training"]}
    for layer in layers:
        merged["training"].update(layer.get("training", {}))
    if merged["synth"]["seed"] is None:
        merged["synth"]["seed"] = merged["run"]["seed"]
    if merged["model"]["seq_len"] is None:
        merged["model"]["seq_len"] = STUDENT_WINDOW if name == "student" else 1
    if merged["model"]["seq_len"] < 1:
        raise ConfigError("[model] seq_len must be >= 1")
    if not 0 < merged["data"]["fraction"] < 1:
        raise ConfigError("[data] fraction must lie in (0, 1)")
    return RunConfig(merged)


def _flag_overrides(args) -> dict[str, dict]:
    out: dict[str, dict] = {}

    def put(section, key, value):
        out.setdefault(section, {})[key] = value

    for item in args.set or []:
        dotted, sep, text = item.partition("=")
        section, dot, key = dotted.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        put(section, key, parse_value(section, key, text))
    flags = {
        "seed": ("run", "seed"), "out": ("run", "out"), "deterministic": ("run", "deterministic"),
        "data": ("data", "path"), "target": ("data", "target"), "seq_len": ("model", "seq_len"),
        "epochs": ("training", "epochs_max"), "lr": ("training", "lr_init"),
        "batch_size": ("training", "batch_size"), "n_frames": ("synth", "n_frames"),
        "teacher": ("distill", "teacher"),
    }
    for attr, (section, key) in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            put(section, key, str(value) if key in ("path", "out", "teacher") else value)
    if getattr(args, "model", None) is not None:
        put("model", "name", args.model)
    return out


def config_from_args(args, model: str | None = None) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else None
    cfg = resolve_config(file_values, _flag_overrides(args), model)
    if cfg["training"]["epochs_max"] < 1 or cfg["training"]["batch_size"] < 1:
        raise ConfigError("epochs_max and batch_size must be >= 1")
    return cfg


# ------------------------------------------------------------------ helpers

def _prepare_out(path: str, force: bool) -> Path:
    if not path:
        raise ConfigError("an output directory is required (--out DIR)")
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise OutputExists(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise OutputExists(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_samples(cfg: RunConfig) -> list[D.Sample]:
    path = cfg["data"]["path"]
    if path:
        return D.load_dataset(path, cfg["data"]["rotation_deg"]).samples
    log.info("no dataset path; generating synthetic data (seed %d)", cfg["synth"]["seed"])
    return D.synth_generate(cfg.synth_config())


def _prepared(cfg: RunConfig, samples, scaler: D.RangeScaler | None = None) -> D.PreparedData:
    d = cfg["data"]
    return D.prepare(samples, d["target"], d["fraction"], d["split"], cfg.seed, scaler)


def _model_arrays(model: Model, prepared: D.PreparedData, part: str) -> D.ArrayDataset:
    """Inputs for ``model``; a model/data modality mismatch is a usage error."""
    try:
        return TR.inputs_for(model, prepared, part)
    except D.DataError as exc:
        if "expects images" in str(exc):
            raise ConfigError(str(exc)) from None
        raise



def _stamp(model: Model, cfg: RunConfig, scaler: D.RangeScaler):
    model.metadata.update({
        "run_format": RUN_FORMAT,
        "kind": TR.model_kind(model),
        "target": cfg["data"]["target"],
        "seq_len": TR.model_seq_len(model),
        "scaler": {"min": scaler.min, "max": scaler.max},
        "config": cfg.to_ini(include_out=False),
    })


def _checkpoint_config(model: Model) -> RunConfig:
    text = model.metadata.get("config")
    if not text:
        raise ConfigError("checkpoint carries no run config; it was not written by this tool")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    values = {s: {k: parse_value(s, k, v) for k, v in parser.items(s)} for s in parser.sections()}
    values["run"].setdefault("out", "")
    return RunConfig(values)


def _checkpoint_scaler(model: Model) -> D.RangeScaler:
    s = model.metadata.get("scaler")
    if not s:
        raise ConfigError("checkpoint carries no absorptivity scaler")
    return D.RangeScaler(float(s["min"]), float(s["max"]))


def _load(path) -> Model:
    if not path:
        raise ConfigError("a checkpoint path is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _log_recipe(kind: str, tc: TR.TrainConfig):
    fields = ", ".join(f"{k}={_text(getattr(tc, k))}" for k in SCHEMA["training"])
    log.info("recipe %s: %s, shuffle=%s, seed=%d", kind, fields, _text(tc.shuffle), tc.seed)


def _progress(every: int = 10):
    def callback(epoch, model, train_log):
        if epoch % every == 0 or epoch == 1:
            val = train_log.val_loss[-1]
            log.info("epoch %d train %.6g%s lr %g", epoch, train_log.train_loss[-1],
                     "" if val is None else f" val {val:.6g}", train_log.lr[-1])
        return False
    return callback


def _write_run(out: Path, cfg: RunConfig, model: Model, train_log: TR.TrainLog,
               rep: TR.MetricsReport, preds: TR.Predictions, extra: dict | None = None) -> None:
    save_checkpoint(model, out / "model.ckpt")
    extra = {"epochs": train_log.epochs, "best_epoch": train_log.best_epoch, **(extra or {})}
    TR.write_metrics(out / "metrics.json", rep, cfg.seed, cfg.digest(), extra)
    preds.to_csv(out / "predictions.csv")
    train_log.to_csv(out / "trainlog.csv")
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = config_from_args(args)
    sc = cfg.synth_config()
    out = Path(cfg["run"]["out"] or "")
    if not cfg["run"]["out"]:
        raise ConfigError("synth needs --out DIR")
    if out.is_dir() and any(out.iterdir()):
        if not args.force:
            raise OutputExists(f"{out} is not empty; pass --force to overwrite")
        # remove only what a dataset consists of, never unrelated files
        for name in ("absorptivity.csv", "labels.csv", "dataset.json", "config.ini"):
            (out / name).unlink(missing_ok=True)
        if (out / "frames").is_dir():
            for p in (out / "frames").glob("*.pgm"):
                p.unlink()
    if sc.n_frames < STUDENT_WINDOW:
        log.warning("n_frames=%d is shorter than the student window (%d); windowed models "
                    "will fail on this dataset", sc.n_frames, STUDENT_WINDOW)
    samples = D.synth_generate(sc)
    D.save_dataset(samples, out, D.synth_manifest(sc))
    (out / "config.ini").write_text(cfg.to_ini(include_out=False), encoding="utf-8")
    log.info("wrote %d frames (%d with a melt pool)", len(samples), len(D.usable(samples)))
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    out = _prepare_out(cfg["run"]["out"], args.force)
    prepared = _prepared(cfg, _load_samples(cfg))
    tc = cfg.train_config()
    _log_recipe(cfg.model, tc)
    model, train_log, rep, preds = TR.fit_and_evaluate(
        cfg.model, prepared, tc, cfg["model"]["seq_len"], _progress())
    _stamp(model, cfg, prepared.scaler)
    _write_run(out, cfg, model, train_log, rep, preds)
    log.info("%s on %s: mae %.4g r2 %s (%d test samples, %.1fs)", rep.model, rep.target, rep.mae,
             TR.fmt_value(rep.r2) if rep.r2_defined else "undefined", rep.n, train_log.wall_time)
    print(out)
    return 0


def cmd_distill(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = _flag_overrides(args)
    cfg = resolve_config(file_values, overrides, model="student")
    teacher_path = cfg["distill"]["teacher"]
    if not teacher_path:
        raise ConfigError("distill needs a teacher checkpoint (--teacher PATH)")
    teacher = _load(teacher_path)
    t_target = teacher.metadata.get("target")
    explicit = "target" in overrides.get("data", {}) or "target" in file_values.get("data", {})
    if t_target and not explicit:
        cfg["data"]["target"] = t_target
    elif t_target and t_target != cfg["data"]["target"]:
        raise ConfigError(f"teacher predicts {t_target}, but the run asks for {cfg['data']['target']}")
    out = _prepare_out(cfg["run"]["out"], args.force)
    scaler = _checkpoint_scaler(teacher) if "scaler" in teacher.metadata else None
    prepared = _prepared(cfg, _load_samples(cfg), scaler)
    _model_arrays(teacher, prepared, "all")  # modality check before any work
    tc = cfg.train_config()
    _log_recipe("student", tc)
    res = TR.distill(teacher, prepared, tc, seq_len=cfg["model"]["seq_len"])
    _stamp(res.student, cfg, prepared.scaler)
    digest = hashlib.sha256(Path(teacher_path).read_bytes()).hexdigest()
    extra = {"vs_teacher": res.vs_teacher.to_dict(), "teacher": TR.model_kind(teacher),
             "teacher_sha256": digest}
    _write_run(out, cfg, res.student, res.log, res.vs_labels, res.predictions, extra)
    res.save_teacher_predictions(out / "teacher_predictions.csv")
    log.info("student vs labels: mae %.4g r2 %s; vs teacher: mae %.4g r2 %s",
             res.vs_labels.mae, _text(res.vs_labels.r2), res.vs_teacher.mae, _text(res.vs_teacher.r2))
    print(out)
    return 0


def _checkpoint_data(args, model: Model) -> tuple[RunConfig, D.PreparedData]:
    cfg = _checkpoint_config(model)
    if getattr(args, "data", None):
        cfg["data"]["path"] = str(args.data)
    return cfg, _prepared(cfg, _load_samples(cfg), _checkpoint_scaler(model))


def cmd_evaluate(args) -> int:
    model = _load(args.checkpoint)
    cfg, prepared = _checkpoint_data(args, model)
    ds = _model_arrays(model, prepared, args.part)
    rep, preds = TR.evaluate(model, ds, prepared.target, TR.model_kind(model))
    if args.out:
        out = _prepare_out(args.out, args.force)
        TR.write_metrics(out / "metrics.json", rep, cfg.seed, cfg.digest(), {"part": args.part})
        preds.to_csv(out / "predictions.csv")
        print(out / "metrics.json")
        print(out / "predictions.csv")
    else:
        print(json.dumps({**rep.to_dict(), "part": args.part}, sort_keys=True))
    return 0


def _fmt_metric(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def comparison_rows(run_dirs) -> tuple[list[str], list[dict]]:
    """Table rows (one per model) with MAE and R2 columns per target."""
    if len(run_dirs) < 2:
        raise ConfigError(f"compare needs at least 2 run directories, got {len(run_dirs)}")
    rows: dict[str, dict] = {}
    targets = set()
    for d in run_dirs:
        path = Path(d) / "metrics.json"
        if not path.is_file():
            raise D.DataError(f"{d}: no metrics.json")
        try:
            m = json.loads(path.read_text(encoding="utf-8"))
            name, target = m["model"], m["target"]
            values = (m["mae"], m["r2"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise D.DataError(f"{path}: unreadable metrics ({exc})") from None
        label = name
        if target in rows.get(label, {}):
            label = f"{name} ({Path(d).name})"
        rows.setdefault(label, {"model": label})[target] = values
        targets.add(target)
    order = [t for t in D.TARGETS if t in targets]

    def key(row):
        r2s = [row[t][1] for t in order if t in row and row[t][1] is not None]
        return (-r2s[0] if r2s else float("inf"), row["model"])

    return order, sorted(rows.values(), key=key)


def cmd_compare(args) -> int:
    targets, rows = comparison_rows(args.runs)
    header = ["model"] + [f"{t}_{m}" for t in targets for m in ("mae", "r2")]
    table = [[r["model"]] + [_fmt_metric(r[t][i]) if t in r else "" for t in targets for i in (0, 1)]
             for r in rows]
    widths = [max(len(str(c)) for c in col) for col in zip(header, *table)]
    for line in [header] + table:
        print("  ".join(str(c).ljust(w) for c, w in zip(line, widths)).rstrip())
    out = args.out
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        with open(Path(out) / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([r["model"]] + ["" if t not in r or r[t][i] is None else repr(float(r[t][i]))
                                           for t in targets for i in (0, 1)])
        log.info("wrote %s", Path(out) / "comparison.csv")
    return 0


def _csv_inputs(model: Model, path: Path) -> D.ArrayDataset:
    ports = sorted(model.inputs)
    if ports != ["absorptivity"]:
        raise ConfigError(f"model {TR.model_kind(model)!r} needs input ports {ports}; "
                          f"{path.name} supplies only 'absorptivity'")
    idx, vals = D.read_absorptivity_csv(path)
    seq_len = TR.model_seq_len(model)
    scaled = _checkpoint_scaler(model).transform(vals).astype(np.float32)
    seq = D.make_sequences(scaled, np.full(len(vals), np.nan, np.float32), seq_len)
    return D.ArrayDataset({"absorptivity": seq.x}, seq.y.reshape(-1, 1), idx[seq.end])


def cmd_predict(args) -> int:
    model = _load(args.checkpoint)
    src = Path(args.input)
    if src.is_dir():
        _, prepared = _checkpoint_data(argparse.Namespace(data=src), model)
        ds, labelled = _model_arrays(model, prepared, args.part), True
    elif src.is_file():
        ds, labelled = _csv_inputs(model, src), False
    else:
        raise FileNotFoundError(f"input {src} not found")
    pred = model.predict(ds.inputs)
    if args.out:
        target = Path(args.out)
        if target.is_dir():
            target = target / "predictions.csv"
        if target.exists() and not args.force:
            raise OutputExists(f"{target} exists; pass --force to overwrite")
        fh = open(target, "w", newline="", encoding="utf-8")
    else:
        fh = sys.stdout
    try:
        fh.write("index," + ("y_true," if labelled else "") + "y_pred\n")
        for i in range(len(pred)):
            truth = TR.fmt_value(ds.y[i, 0]) + "," if labelled else ""
            fh.write(f"{int(ds.index[i])},{truth}{TR.fmt_value(pred[i])}\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
            print(target)
    return 0


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", help="INI file with run settings")
    g.add_argument("--seed", type=int, help="run seed (model init, synthetic data, shuffling)")
    g.add_argument("--out", metavar="DIR", help="output directory")
    g.add_argument("--force", action="store_true", help="overwrite existing outputs")
    g.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="chronological batches, no shuffling (default on)")
    g.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")
    g.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")

    # global options sit on each subcommand: a top-level copy would be reset
    # by the subcommand's own defaults
    parser = argparse.ArgumentParser(prog="meltfusion", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n-frames", type=int)
    p.set_defaults(func=cmd_synth)

    def training_flags(p):
        p.add_argument("--data", metavar="DIR", help="dataset directory (default: synthetic)")
        p.add_argument("--target", choices=D.TARGETS)
        p.add_argument("--epochs", type=int, help="override epochs_max")
        p.add_argument("--lr", type=float, help="override lr_init")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seq-len", type=int, help="absorptivity window length")

    p = sub.add_parser("train", parents=[common], help="train and evaluate one model")
    p.add_argument("--model", choices=list(TR.RECIPES))
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", parents=[common], help="distill a student from a teacher checkpoint")
    p.add_argument("--teacher", metavar="CKPT")
    training_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on its dataset")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: the checkpoint's)")
    p.add_argument("--part", choices=("test", "train", "all"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="tabulate metrics of several runs")
    p.add_argument("runs", nargs="*", metavar="RUN_DIR")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("predict", parents=[common], help="predict with a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--input", required=True, metavar="PATH",
                   help="dataset directory, or an absorptivity CSV for absorptivity-only models")
    p.add_argument("--part", choices=("test", "train", "all"), default="all",
                   help="partition to predict when the input is a dataset directory")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (D.DataError, ShapeError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (CheckpointError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
