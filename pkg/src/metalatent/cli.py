"""Command-line entry points: train, eval, ablate, gradcheck, synth-export.

Configuration is a flat text file of `key = value` pairs; command-line flags
override file values. Every command is deterministic under a fixed master
seed (`--seed`, falling back to the METALATENT_SEED environment variable).
Exit status is 0 only when the command completed and every internal check
passed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import episodes as eps_mod
from . import gradcheck as gc_mod
from . import model as model_mod
from . import training

__all__ = ["main", "parse_config_text", "config_to_text", "build_run_config"]


class ConfigError(ValueError):
    """A configuration field is missing, malformed, or inconsistent."""


# ---------------------------------------------------------------------------
# flat key = value config files
# ---------------------------------------------------------------------------


def parse_config_text(text):
    """Parse `key = value` lines; blank lines and # comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def config_to_text(cfg_dict):
    lines = [f"{k} = {cfg_dict[k]}" for k in sorted(cfg_dict)]
    return "\n".join(lines) + "\n"


def _coerce(value, kind):
    try:
        if kind is bool:
            if value in ("true", "True", "1"):
                return True
            if value in ("false", "False", "0"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError as err:
        raise ConfigError(f"cannot parse {value!r} as {kind.__name__}") from err


_FIELDS = {
    # name: (type, default)
    "synthetic": (str, ""),
    "dataset_root": (str, ""),
    "split_manifest": (str, ""),
    "n_classes": (int, 30),
    "per_class": (int, 40),
    "image_side": (int, 32),
    "channels": (int, 1),
    "difficulty": (float, 0.5),
    "train_classes": (int, 20),
    "val_classes": (int, 5),
    "test_classes": (int, 5),
    "way": (int, 5),
    "shot": (int, 1),
    "query": (int, 15),
    "base_learner": (str, "svm"),
    "latent_dim": (int, 64),
    "epochs": (int, 60),
    "episodes_per_epoch": (int, 1000),
    "meta_batch": (int, 4),
    "inner_steps": (int, 1),
    "val_episodes": (int, 200),
    "eval_episodes": (int, 1000),
    "threads": (int, 1),
    "seed": (int, 0),
    "svm_c": (float, 0.1),
    "ridge_reg": (float, 1.0),
    "lambda_init": (float, 0.01),
    "varphi_init": (float, 1.0),
    "beta_init": (float, 0.1),
    "var_loss_on": (str, "both"),
    "lr_anchors": (str, "1:0.1,20:0.006,40:0.0012,50:0.00024"),
    "conv_channels": (str, "16,32,64"),
    "checkpoint": (str, ""),
    "checkpoint_out": (str, "checkpoint.mlat"),
    "metrics_out": (str, "metrics.csv"),
    "summary_out": (str, "summary.json"),
    "episodes_out": (str, ""),
    "out_dir": (str, ""),
    "latent_dims": (str, "8,16,32,64"),
    "stochastic_eval": (bool, False),
}


def build_run_config(file_values, flag_values):
    """Merge config-file values with CLI flags (flags win) over defaults."""
    merged = {}
    for key, (kind, default) in _FIELDS.items():
        merged[key] = default
        if key in file_values:
            merged[key] = _coerce(file_values[key], kind)
    for key, value in flag_values.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config field {key!r}")
        merged[key] = value
    unknown = set(file_values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return merged


def _parse_anchors(text):
    anchors = []
    for part in text.split(","):
        epoch, _, lr = part.partition(":")
        try:
            anchors.append((int(epoch), float(lr)))
        except ValueError as err:
            raise ConfigError(f"bad lr anchor {part!r} (want epoch:lr)") from err
    return tuple(anchors)


def _train_config(rc, image_side, in_channels):
    conv = tuple(int(c) for c in rc["conv_channels"].split(","))
    mcfg = model_mod.ModelConfig(
        in_channels=in_channels,
        image_side=image_side,
        conv_channels=conv,
        latent_dim=rc["latent_dim"],
    )
    return training.TrainConfig(
        epochs=rc["epochs"],
        episodes_per_epoch=rc["episodes_per_epoch"],
        meta_batch_size=rc["meta_batch"],
        way=rc["way"],
        shot=rc["shot"],
        query_per_class=rc["query"],
        lr_anchors=_parse_anchors(rc["lr_anchors"]),
        inner_steps=rc["inner_steps"],
        base_learner=rc["base_learner"],
        latent_dim=rc["latent_dim"],
        master_seed=rc["seed"],
        var_loss_on=rc["var_loss_on"],
        val_episodes=rc["val_episodes"],
        threads=rc["threads"],
        svm_c=rc["svm_c"],
        ridge_reg=rc["ridge_reg"],
        lambda_init=rc["lambda_init"],
        varphi_init=rc["varphi_init"],
        beta_init=rc["beta_init"],
        model=mcfg,
    )


def _load_splits(rc):
    """Materialize (train, val, test) datasets from synthetic or on-disk config."""
    if rc["synthetic"]:
        data = eps_mod.synth_generate(
            rc["synthetic"],
            n_classes=rc["n_classes"],
            per_class=rc["per_class"],
            image_side=rc["image_side"],
            seed=rc["seed"],
            difficulty=rc["difficulty"],
            channels=rc["channels"],
        )
        n_train, n_val, n_test = rc["train_classes"], rc["val_classes"], rc["test_classes"]
        if n_train + n_val + n_test > data.n_classes():
            raise ConfigError(
                f"split sizes {n_train}+{n_val}+{n_test} exceed {data.n_classes()} classes"
            )
        ids = list(data.class_ids)
        train, val, test = eps_mod.make_splits(
            data, ids[:n_train], ids[n_train : n_train + n_val], ids[n_train + n_val : n_train + n_val + n_test]
        )
        (train, val, test), _ = eps_mod.normalize_by_train(train, val, test)
    elif rc["dataset_root"]:
        data = eps_mod.load_image_dir(rc["dataset_root"])
        if not rc["split_manifest"]:
            raise ConfigError("dataset_root requires split_manifest")
        sections = eps_mod.parse_split_manifest(rc["split_manifest"])
        train, val, test = eps_mod.make_splits(
            data, sections["train"], sections["val"], sections["test"]
        )
        (train, val, test), _ = eps_mod.normalize_by_train(train, val, test)
    else:
        raise ConfigError("either synthetic or dataset_root must be set")
    return train, val, test


def _image_shape(split):
    c, h, _ = split.image_shape()
    return h, c


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def run_train(rc):
    train, val, test = _load_splits(rc)
    side, chans = _image_shape(train)
    cfg = _train_config(rc, side, chans)
    mp, report = training.meta_train(train, val if val.n_classes() else None, cfg)

    arrays = mp.checkpoint_arrays()
    if report.optimizer_state is not None:
        opt = report.optimizer_state
        arrays["opt.momentum"] = np.asarray(opt.momentum, dtype=np.float64)
        arrays["opt.weight_decay"] = np.asarray(opt.weight_decay, dtype=np.float64)
        for name, v in opt.velocity.items():
            arrays[f"opt.vel.{name}"] = v
    ckpt_mod.save_checkpoint(rc["checkpoint_out"], arrays)
    Path(rc["metrics_out"]).write_text(training.metrics_csv(report.curves))
    Path(rc["summary_out"]).write_text(
        training.summary_json(cfg, report, extra={"command": "train"})
    )
    print(f"best validation accuracy: {report.mean_acc:.4f}")
    print(f"checkpoint: {rc['checkpoint_out']}")
    print(f"metrics: {rc['metrics_out']}")
    return 0


def _format_ci(ci):
    return "n/a" if ci is None else f"{ci:.3f}"


def run_eval(rc):
    if not rc["checkpoint"]:
        raise ConfigError("eval requires checkpoint")
    arrays = ckpt_mod.load_checkpoint(rc["checkpoint"])
    mp = model_mod.MetaParams.from_checkpoint_arrays(arrays)
    _, _, test = _load_splits(rc)
    side, chans = _image_shape(test)
    if side != mp.config.image_side or chans != mp.config.in_channels:
        raise ConfigError(
            f"checkpoint expects {mp.config.in_channels}x{mp.config.image_side} inputs, "
            f"dataset provides {chans}x{side}"
        )
    cfg = _train_config(rc, side, chans)
    report = training.meta_evaluate(
        test, mp, episodes=rc["eval_episodes"], seed=rc["seed"], cfg=cfg,
        stochastic=rc["stochastic_eval"],
    )
    print(f"{report.mean_acc:.3f} ± {_format_ci(report.ci95)}")
    if rc["episodes_out"]:
        lines = ["episode,acc"] + [f"{i},{a:.6f}" for i, a in enumerate(report.accuracies)]
        Path(rc["episodes_out"]).write_text("\n".join(lines) + "\n")
    Path(rc["summary_out"]).write_text(
        training.summary_json(cfg, report, extra={"command": "eval"})
    )
    return 0


def run_ablate(rc):
    dims_text = rc["latent_dims"].strip()
    if not dims_text:
        raise ConfigError("latent_dims must list at least one dimension")
    dims = [int(d) for d in dims_text.split(",")]
    if any(d <= 0 for d in dims):
        raise ConfigError(f"latent dims must be positive, got {dims}")
    learners = ["rr", "svm"] if rc["base_learner"] == "both" else [rc["base_learner"]]

    train, val, test = _load_splits(rc)
    side, chans = _image_shape(train)
    rows = []
    for dim in dims:
        row = {"dim": dim}
        for learner in learners:
            sub = dict(rc)
            sub["latent_dim"] = dim
            sub["base_learner"] = learner
            cfg = _train_config(sub, side, chans)
            mp, _ = training.meta_train(train, val if val.n_classes() else None, cfg)
            rep = training.meta_evaluate(
                test, mp, episodes=rc["eval_episodes"], seed=rc["seed"], cfg=cfg
            )
            row[learner] = rep
            print(f"dim={dim} {learner}: {rep.mean_acc:.4f} ± {_format_ci(rep.ci95)}")
        rows.append(row)

    header = "latent_dim," + ",".join(f"{l}_mean,{l}_ci95" for l in learners)
    lines = [header]
    for row in rows:
        cells = [str(row["dim"])]
        for learner in learners:
            rep = row[learner]
            cells.append(f"{rep.mean_acc:.6f}")
            cells.append("na" if rep.ci95 is None else f"{rep.ci95:.6f}")
        lines.append(",".join(cells))
    out = rc["metrics_out"]
    Path(out).write_text("\n".join(lines) + "\n")
    print(f"ablation table: {out}")
    return 0


def run_gradcheck(rc):
    results = gc_mod.run_gradient_suites(seed=rc["seed"])
    failed = 0
    for name, err, tol, ok in results:
        status = "PASS" if ok else "FAIL"
        print(f"{name:20s} max_rel_err={err:.3e} tol={tol:.0e} {status}")
        failed += 0 if ok else 1
    return 1 if failed else 0


def run_synth_export(rc):
    if not rc["synthetic"]:
        raise ConfigError("synth-export requires synthetic")
    if not rc["out_dir"]:
        raise ConfigError("synth-export requires out_dir")
    data = eps_mod.synth_generate(
        rc["synthetic"],
        n_classes=rc["n_classes"],
        per_class=rc["per_class"],
        image_side=rc["image_side"],
        seed=rc["seed"],
        difficulty=rc["difficulty"],
        channels=rc["channels"],
    )
    root = eps_mod.export_image_dir(data, rc["out_dir"])
    manifest = Path(rc["out_dir"]) / "splits.txt"
    names = [c if isinstance(c, str) else f"class_{c:04d}" for c in data.class_ids]
    n = len(names)
    n_train = rc["train_classes"] if rc["train_classes"] < n else max(n - 2, 1)
    n_val = min(rc["val_classes"], max(n - n_train - 1, 0))
    eps_mod.write_split_manifest(
        manifest, names[:n_train], names[n_train : n_train + n_val], names[n_train + n_val :]
    )
    print(f"exported {n} classes to {root} (split manifest: {manifest})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed (fallback: METALATENT_SEED)")
    p.add_argument("--threads", type=int)
    p.add_argument("--synthetic", choices=["gaussian_blobs", "ring_shapes"])
    p.add_argument("--dataset-root", dest="dataset_root")
    p.add_argument("--split-manifest", dest="split_manifest")
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--image-side", dest="image_side", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--difficulty", type=float)
    p.add_argument("--train-classes", dest="train_classes", type=int)
    p.add_argument("--val-classes", dest="val_classes", type=int)
    p.add_argument("--test-classes", dest="test_classes", type=int)
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--query", type=int)
    p.add_argument("--base-learner", dest="base_learner", choices=["svm", "rr", "both"])
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes-per-epoch", dest="episodes_per_epoch", type=int)
    p.add_argument("--meta-batch", dest="meta_batch", type=int)
    p.add_argument("--inner-steps", dest="inner_steps", type=int)
    p.add_argument("--val-episodes", dest="val_episodes", type=int)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    p.add_argument("--lr-anchors", dest="lr_anchors")
    p.add_argument("--conv-channels", dest="conv_channels")
    p.add_argument("--svm-c", dest="svm_c", type=float)
    p.add_argument("--ridge-reg", dest="ridge_reg", type=float)
    p.add_argument("--summary-out", dest="summary_out")
    p.add_argument("--metrics-out", dest="metrics_out")


def _build_parser():
    parser = argparse.ArgumentParser(prog="metalatent", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train and save the best-on-validation checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint-out", dest="checkpoint_out")

    p = sub.add_parser("eval", help="evaluate a checkpoint over seeded test episodes")
    _add_common(p)
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--episodes-out", dest="episodes_out")
    p.add_argument("--stochastic-eval", dest="stochastic_eval", action="store_true", default=None)

    p = sub.add_parser("ablate", help="train/evaluate across latent dimensions")
    _add_common(p)
    p.add_argument("--latent-dims", dest="latent_dims")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    _add_common(p)

    p = sub.add_parser("synth-export", help="write a synthetic dataset as an image folder")
    _add_common(p)
    p.add_argument("--out-dir", dest="out_dir")
    return parser


_COMMANDS = {
    "train": run_train,
    "eval": run_eval,
    "ablate": run_ablate,
    "gradcheck": run_gradcheck,
    "synth-export": run_synth_export,
}


def main(argv=None):
    parser = _build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)

    file_values = {}
    if config_path:
        try:
            file_values = parse_config_text(Path(config_path).read_text())
        except OSError as err:
            print(f"error: cannot read config {config_path}: {err}", file=sys.stderr)
            return 2
    if args.get("seed") is None and os.environ.get("METALATENT_SEED"):
        args["seed"] = int(os.environ["METALATENT_SEED"])

    try:
        rc = build_run_config(file_values, args)
        return _COMMANDS[command](rc)
    except (ConfigError, FileNotFoundError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RuntimeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
