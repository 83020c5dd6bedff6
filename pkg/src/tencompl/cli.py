"""``tencompl <subcommand> [--config path] [--flag value]...``

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numeric failure.  Flags override keys of the ``--config`` file, which
override built-in defaults.  Progress goes to stderr; stdout carries only
machine-readable results.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .analysis import (
    categorize,
    cluster_tissues,
    reconstruct,
    tissue_deviation_report,
    tissue_similarity,
    write_dendrogram,
    write_deviation,
    write_histogram,
    write_similarity,
)
from .baseline import AlsConfig, cp_als
from .errors import ConfigError, TencomplError
from .ingest import IDENTITY, NormParams, RowMeta, apply_normalization, holdout_split, normalize, parse_matrix, remove_outliers
from .losses import MetricsReport
from .model import VARIANTS, load_model, save_model
from .synth import SynthSpec, gen_lowrank, gen_skewed, write_synth
from .tensor import TensorIndexMap, read_tensor, tensor_stats, to_tensor, write_tensor
from .training import EpochRecord, TrainConfig, TrainHistory, evaluate, train, write_history

log = logging.getLogger("tencompl")

THREADS_ENV = "TENCOMPL_THREADS"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _dims(s):
    if isinstance(s, (list, tuple)):
        return tuple(int(x) for x in s)
    try:
        return tuple(int(x) for x in s.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected R,U,I, got {s!r}") from None


# name -> list of (flag, type, default, help, choices)
_COMMON = [("seed", int, 0, "random seed", None), ("threads", int, None, "worker cap", None)]

_TRAIN_OPTS = [
    ("train", str, None, "training tensor file", None),
    ("val", str, None, "validation tensor file", None),
    ("tensor", str, None, "single tensor to split internally with --fraction", None),
    ("fraction", float, 0.1, "holdout fraction when --tensor is given", None),
    ("variant", str, "attention", "model variant", VARIANTS),
    ("rank", int, 300, "latent rank k", None),
    ("learning-rate", float, 0.001, "Adam learning rate", None),
    ("weight-decay", float, 5e-4, "L2 decay on factor matrices", None),
    ("max-epochs", int, 100, "epoch budget", None),
    ("patience", int, 5, "early stopping patience", None),
    ("batch-size", int, 8192, "mini-batch size", None),
    ("loss", str, "mse", "training loss", ("mse", "weighted")),
    ("lam", float, 0.0, "variance-term coefficient", None),
    ("t1", float, 0.585, "inner category threshold", None),
    ("t2", float, 2.0, "outer category threshold", None),
    ("w1", float, 5.0, "weight of moderate entries", None),
    ("w2", float, 50.0, "weight of extreme entries", None),
    ("monitor", str, "mse", "early-stopping metric", ("mse", "weighted_mae")),
    ("init-scale", float, 0.0, "init half-width (0 = automatic)", None),
    ("plain-bias", _bool, False, "add biases to the plain variant", None),
    ("norm", str, None, "NormParams file to reference in the manifest", None),
    ("checkpoint", str, None, "output checkpoint directory", None),
    ("history", str, None, "output history file", None),
]

COMMANDS = {
    "synth": [
        ("out", str, None, "output tensor file", None),
        ("mode", str, "gaussian", "value distribution", ("gaussian", "table2-skewed")),
        ("dims", _dims, (30, 40, 50), "R,U,I", None),
        ("rank", int, 3, "true rank", None),
        ("density", float, 0.2, "observed fraction", None),
        ("noise", float, 0.0, "gaussian noise stddev", None),
        ("sampling", str, "uniform", "observation mask", ("uniform", "stratified")),
        ("truth-out", str, None, "checkpoint directory for the true factors", None),
    ],
    "ingest": [
        ("matrix", str, None, "2D matrix file", None),
        ("meta", str, None, "row metadata file", None),
        ("out", str, None, "output tensor file", None),
        ("index-map-out", str, None, "output index map / row metadata JSON", None),
        ("stride-mode", str, "block", "row layout", ("block", "paper-exact")),
        ("tissue-key", str, "tissue", "tissue mode labels", ("tissue", "tissue-platform")),
        ("z-threshold", float, 4.0, "per-gene z-score cutoff (inf disables)", None),
    ],
    "split": [
        ("tensor", str, None, "input tensor file", None),
        ("fraction", float, 0.1, "holdout fraction", None),
        ("normalize", str, "standard", "normalization", ("minmax", "standard", "none")),
        ("paper-order", _bool, False, "normalize before splitting", None),
        ("train-out", str, None, "output training tensor", None),
        ("val-out", str, None, "output validation tensor", None),
        ("norm-out", str, None, "output NormParams JSON", None),
    ],
    "train": _TRAIN_OPTS,
    "als": [
        ("train", str, None, "training tensor file", None),
        ("val", str, None, "validation tensor file", None),
        ("rank", int, 3, "CP rank", None),
        ("max-iter", int, 200, "iteration cap", None),
        ("tol", float, 1e-10, "relative fit-change tolerance", None),
        ("ridge", float, 1e-9, "ridge epsilon", None),
        ("norm", str, None, "NormParams file to reference in the manifest", None),
        ("checkpoint", str, None, "output checkpoint directory", None),
        ("history", str, None, "output history file", None),
    ],
    "evaluate": [
        ("checkpoint", str, None, "model checkpoint directory", None),
        ("tensor", str, None, "tensor of reference entries", None),
        ("t1", float, 0.585, "inner category threshold", None),
        ("t2", float, 2.0, "outer category threshold", None),
        ("w1", float, 5.0, "weight of moderate entries", None),
        ("w2", float, 50.0, "weight of extreme entries", None),
        ("out", str, None, "optional metrics file", None),
    ],
    "complete": [
        ("checkpoint", str, None, "model checkpoint directory", None),
        ("index-map", str, None, "index map JSON (default: block layout of the model dims)", None),
        ("norm", str, None, "NormParams JSON (default: identity)", None),
        ("observed", str, None, "original tensor whose cells pass through", None),
        ("out", str, None, "output completed matrix", None),
    ],
    "analyze": [
        ("checkpoint", str, None, "model checkpoint directory", None),
        ("reference", str, None, "tensor for histogram and deviation reports", None),
        ("index-map", str, None, "index map JSON for tissue labels", None),
        ("out-dir", str, None, "report directory", None),
        ("linkage", str, "average", "clustering linkage", ("average", "single", "complete")),
        ("signed", _bool, False, "signed instead of absolute deviations", None),
        ("t1", float, 0.585, "inner category threshold", None),
        ("t2", float, 2.0, "outer category threshold", None),
    ],
    "stats": [("tensor", str, None, "tensor file", None)],
}

REQUIRED = {
    "synth": ("out",),
    "ingest": ("matrix", "meta", "out", "index-map-out"),
    "split": ("tensor", "train-out", "val-out"),
    "train": ("checkpoint",),
    "als": ("train", "checkpoint"),
    "evaluate": ("checkpoint", "tensor"),
    "complete": ("checkpoint", "out"),
    "analyze": ("checkpoint", "out-dir"),
    "stats": ("tensor",),
}


def build_parser():
    parser = _Parser(prog="tencompl", description="Sparse 3D tensor completion.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file; flags take precedence")
        for flag, typ, _, help_, choices in _COMMON + opts:
            p.add_argument("--" + flag, type=typ, default=None, help=help_, choices=choices)
    return parser


def read_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("_", "-")] = value
    return out


def resolve(command, args) -> dict:
    """Merge defaults, config-file keys and explicit flags (in that order)."""
    opts = {flag: (typ, default, choices) for flag, typ, default, _, choices in _COMMON + COMMANDS[command]}
    resolved = {flag: default for flag, (_, default, _) in opts.items()}
    if args.config:
        for key, raw in read_config_file(args.config).items():
            if key not in opts:
                raise UsageError(f"unknown option {key!r} in {args.config}")
            typ, _, choices = opts[key]
            try:
                value = typ(raw)
            except (ValueError, argparse.ArgumentTypeError):
                raise UsageError(f"invalid value {raw!r} for --{key} in {args.config}") from None
            if choices and value not in choices:
                raise UsageError(f"--{key} must be one of {', '.join(choices)}")
            resolved[key] = value
    for flag in opts:
        value = getattr(args, flag.replace("-", "_"))
        if value is not None:
            resolved[flag] = value
    if resolved["threads"] is None:
        env = os.environ.get(THREADS_ENV)
        try:
            resolved["threads"] = int(env) if env else (os.cpu_count() or 1)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if resolved["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    for flag in REQUIRED[command]:
        if resolved.get(flag) is None:
            raise UsageError(f"--{flag} is required for {command}")
    return resolved


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def write_config_record(path, command, resolved):
    """Resolved configuration next to an output; the only place with a timestamp."""
    record = {
        "command": command,
        "version": __version__,
        "resolved": {k: _jsonable(v) for k, v in sorted(resolved.items())},
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(str(path).rstrip("/\\") + ".config.json", "w", newline="\n") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path, obj):
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_index_map(path):
    with open(path) as fh:
        d = json.load(fh)
    meta = RowMeta.from_dict(d["meta"]) if "meta" in d else None
    return TensorIndexMap.from_dict(d["index_map"]), meta


def _metrics_line(rep: MetricsReport):
    return f"mse={rep.mse!r} mae={rep.mae!r} wmae={rep.weighted_mae!r} maxae={rep.max_ae!r} n={rep.n}"


def cmd_synth(c):
    spec = SynthSpec(c["dims"], c["rank"], c["density"], c["noise"], c["mode"], c["seed"], c["sampling"])
    result = gen_skewed(spec) if spec.mode == "table2-skewed" else gen_lowrank(spec)
    write_synth(result, spec, c["out"])
    outputs = [c["out"], c["out"] + ".json"]
    if c["truth-out"]:
        save_model(result.truth.as_model(), c["truth-out"], {"solver": "truth"})
        outputs.append(c["truth-out"])
    print(f"nnz={result.tensor.nnz}")
    return outputs


def cmd_ingest(c):
    with open(c["matrix"]) as mf, open(c["meta"]) as tf:
        matrix, meta, imap = parse_matrix(mf, tf, stride_mode=c["stride-mode"], tissue_key=c["tissue-key"])
    tensor = to_tensor(matrix, imap)
    if not c["z-threshold"] > 0:
        raise ConfigError("--z-threshold must be positive", flag="--z-threshold")
    cleaned = remove_outliers(tensor, c["z-threshold"])
    write_tensor(cleaned, c["out"])
    _write_json(c["index-map-out"], {"index_map": imap.to_dict(), "meta": meta.to_dict()})
    print(f"nnz={cleaned.nnz} removed={tensor.nnz - cleaned.nnz} dims={','.join(map(str, imap.dims))}")
    return [c["out"], c["index-map-out"]]


def _check_fraction(f):
    if not (0 < f < 1):
        raise ConfigError(f"--fraction must be in (0, 1), got {f}", flag="--fraction")


def cmd_split(c):
    _check_fraction(c["fraction"])
    tensor = read_tensor(c["tensor"])
    if c["paper-order"]:
        normed, params = normalize(tensor, c["normalize"])
        split = holdout_split(normed, c["fraction"], c["seed"])
        tr, va = split.train, split.validation
    else:
        split = holdout_split(tensor, c["fraction"], c["seed"])
        tr, params = normalize(split.train, c["normalize"])
        va = apply_normalization(split.validation, params)
    write_tensor(tr, c["train-out"])
    write_tensor(va, c["val-out"])
    outputs = [c["train-out"], c["val-out"]]
    if c["norm-out"]:
        params.dump(c["norm-out"])
        outputs.append(c["norm-out"])
    print(f"train={tr.nnz} validation={va.nnz}")
    return outputs


def _train_inputs(c):
    if c["tensor"]:
        _check_fraction(c["fraction"])
        split = holdout_split(read_tensor(c["tensor"]), c["fraction"], c["seed"])
        return split.train, split.validation
    if not c["train"]:
        raise UsageError("train needs --train or --tensor")
    return read_tensor(c["train"]), (read_tensor(c["val"]) if c["val"] else None)


def cmd_train(c):
    if c["tensor"] is not None:
        _check_fraction(c["fraction"])
    keys = ("rank", "learning-rate", "weight-decay", "max-epochs", "patience", "batch-size", "loss", "lam",
            "t1", "t2", "w1", "w2", "seed", "monitor", "init-scale", "plain-bias")
    config = TrainConfig.from_mapping({k: c[k] for k in keys})
    tr, va = _train_inputs(c)

    def progress(rec: EpochRecord):
        msg = f"epoch {rec.epoch} train_loss={rec.train_loss:.6g}"
        if rec.validation is not None:
            msg += f" val_mse={rec.validation.mse:.6g}"
        print(msg, file=sys.stderr)

    model, history = train(tr, va, c["variant"], config, progress=progress)
    save_model(model, c["checkpoint"], {"solver": "sgd", "norm_params": c["norm"]})
    outputs = [c["checkpoint"]]
    if c["history"]:
        write_history(history, c["history"])
        outputs.append(c["history"])
    best = history.epochs[history.best_epoch - 1]
    line = f"best_epoch={history.best_epoch} stop={history.stop_reason}"
    if best.validation is not None:
        line += " " + _metrics_line(best.validation)
    print(line)
    return outputs


def cmd_als(c):
    tr = read_tensor(c["train"])
    va = read_tensor(c["val"]) if c["val"] else None
    cfg = AlsConfig(c["rank"], c["max-iter"], c["tol"], c["ridge"], c["seed"], c["threads"])
    history = TrainHistory()

    def on_iteration(it, model, sse):
        rep = evaluate(model, va) if va is not None and va.nnz else None
        history.epochs.append(EpochRecord(it, sse / tr.nnz, rep))

    model, ah = cp_als(tr, cfg, callback=on_iteration)
    history.best_epoch = ah.iterations
    history.stop_reason = "converged" if ah.converged else "max_iter"
    save_model(model, c["checkpoint"], {"solver": "als", "norm_params": c["norm"], "zero_rows": {str(k): v for k, v in ah.zero_rows.items()}})
    outputs = [c["checkpoint"]]
    if c["history"]:
        write_history(history, c["history"])
        outputs.append(c["history"])
    line = f"iterations={ah.iterations} converged={ah.converged} fit={ah.fits[-1]!r}"
    if history.epochs and history.epochs[-1].validation is not None:
        line += " " + _metrics_line(history.epochs[-1].validation)
    print(line)
    return outputs


def cmd_evaluate(c):
    from .losses import WeightScheme

    model = load_model(c["checkpoint"])
    tensor = read_tensor(c["tensor"])
    rep = evaluate(model, tensor, WeightScheme(c["t1"], c["t2"], c["w1"], c["w2"]))
    text = _metrics_line(rep) + "\n" + "histogram " + " ".join(str(h) for h in rep.histogram) + "\n"
    sys.stdout.write(text)
    if c["out"]:
        with open(c["out"], "w", newline="\n") as fh:
            fh.write(text)
        return [c["out"]]
    return []


def cmd_complete(c):
    model = load_model(c["checkpoint"])
    if c["index-map"]:
        imap, _ = _load_index_map(c["index-map"])
    else:
        imap = TensorIndexMap.create(*model.dims)
    norm = NormParams.load(c["norm"]) if c["norm"] else IDENTITY
    observed = read_tensor(c["observed"]) if c["observed"] else None
    with open(c["out"], "w", newline="\n") as fh:
        n = reconstruct(model, imap, norm, fh, observed=observed, threads=c["threads"])
    print(f"cells={n}")
    return [c["out"]]


def cmd_analyze(c):
    model = load_model(c["checkpoint"])
    labels = None
    if c["index-map"]:
        _, meta = _load_index_map(c["index-map"])
        if meta is not None:
            labels = meta.tissue_labels
    os.makedirs(c["out-dir"], exist_ok=True)
    join = lambda name: os.path.join(c["out-dir"], name)  # noqa: E731
    outputs = []
    sim = tissue_similarity(model, labels)
    write_similarity(sim, join("similarity.tsv"))
    outputs.append(join("similarity.tsv"))
    if not sim.zero_rows and model.dims[0] >= 2:
        write_dendrogram(cluster_tissues(sim, c["linkage"]), join("clusters.tsv"))
        outputs.append(join("clusters.tsv"))
    else:
        log.warning("skipping clustering: zero tissue rows %s", sim.zero_rows)
    if c["reference"]:
        ref = read_tensor(c["reference"])
        from .model import predict

        write_histogram(categorize(ref.values, (c["t1"], c["t2"])), join("histogram_input.tsv"))
        preds = predict(model, ref.coords, data_units=True)
        write_histogram(categorize(preds, (c["t1"], c["t2"])), join("histogram_predicted.tsv"))
        write_deviation(tissue_deviation_report(model, ref, labels, c["signed"]), join("deviation.tsv"))
        outputs += [join("histogram_input.tsv"), join("histogram_predicted.tsv"), join("deviation.tsv")]
    print(f"reports={len(outputs)}")
    return outputs


def cmd_stats(c):
    s = tensor_stats(read_tensor(c["tensor"]))
    print(
        f"nnz={s.nnz} density={s.density!r} min={s.min_value!r} max={s.max_value!r} mean={s.mean_value!r} "
        f"per_tissue={','.join(map(str, s.per_tissue_counts))}"
    )
    return []


HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "train": cmd_train,
    "als": cmd_als,
    "evaluate": cmd_evaluate,
    "complete": cmd_complete,
    "analyze": cmd_analyze,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        resolved = resolve(args.command, args)
        outputs = HANDLERS[args.command](resolved)
        for path in outputs:
            write_config_record(path, args.command, resolved)
    except TencomplError as exc:
        flag = getattr(exc, "flag", None)
        prefix = f"invalid {flag}: " if flag and flag not in str(exc) else ""
        print(f"tencompl: {type(exc).__name__}: {prefix}{exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"tencompl: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
