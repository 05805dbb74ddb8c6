"""imbtext command line: stats, synth, train, eval, gradcheck, compare, rerank.

Every command resolves a config (defaults, then --config JSON, then
key=value overrides, then --seed), writes its artifacts to --out and a
manifest.json listing the resolved config, seed and artifact hashes.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    ConfusionMap,
    SynthConfig,
    class_distribution,
    dataset_stats,
    inject_label_noise,
    load_jsonl,
    load_label_map,
    save_jsonl,
    save_label_map,
    split_dataset,
    synth_generate,
)
from .errors import ConfigError, DataError, ImbError
from .experiments import compare_arms, noisy_synth_split
from .gradcheck import GradCheckConfig, model_gradcheck
from .numerics import Rng
from .rerank import DEFAULT_K, backend_from_config, pipeline_eval
from .trainer import TrainConfig, evaluate, history_jsonl, train

log = logging.getLogger("imbtext")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS: dict = {
    "data": {"train": None, "dev": None, "test": None, "label_map": None},
    "stats": {"clip_percentile": 99.5, "word_bin": 1, "char_bin": 5},
    "synth": SynthConfig().to_dict(),
    "noise": {"rate": 0.0},
    "split": {"dev_fraction": 0.2},
    "train": TrainConfig().to_dict(),
    "gradcheck": {"vocab_size": 40, "num_classes": 6, "eps": 1e-5, "max_entries": 24, "probe_seed": 0, "randomize": True},
    "compare": {"seeds": [0]},
    "rerank": {"k": DEFAULT_K, "backend": {"kind": "oracle"}},
}


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; value parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, _, raw = item.partition("=")
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section in override {key!r}")
        node = node[p]
    node[parts[-1]] = parse_value(raw)


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            cfg = merge(cfg, json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    for item in args.overrides:
        apply_override(cfg, item)
    for flag, (section, key) in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    if args.seed is not None:
        cfg["train"]["seed"] = cfg["synth"]["seed"] = args.seed
        cfg["gradcheck"]["probe_seed"] = args.seed
        cfg["rerank"]["backend"]["seed"] = args.seed
    return cfg


FLAG_KEYS = {
    "train_path": ("data", "train"),
    "dev_path": ("data", "dev"),
    "data_path": ("data", "test"),
    "label_map": ("data", "label_map"),
    "clip": ("stats", "clip_percentile"),
    "k": ("rerank", "k"),
}


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, out: Path, cfg: dict, seed):
        self.command = command
        self.out = out
        self.cfg = cfg
        self.seed = seed
        self.artifacts: list[Path] = []
        self.inputs: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def json(self, name: str, obj) -> Path:
        p = write_json(self.out / name, obj)
        self.artifacts.append(p)
        return p

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(p)
        return p

    def input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise DataError(f"input file not found: {p}")
        self.inputs.append(p)
        return p

    def manifest(self, status: str) -> None:
        write_json(
            self.out / "manifest.json",
            {
                "command": self.command,
                "status": status,
                "config": self.cfg,
                "seed": self.seed,
                "version": __version__,
                "kernel_backend": kernels.BACKEND,
                "inputs": {str(p): sha256(p) for p in self.inputs},
                "artifacts": {p.name: sha256(p) for p in self.artifacts if p.exists()},
                "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            },
        )


def _label_map(run: Run):
    lm = run.cfg["data"]["label_map"]
    return load_label_map(run.input(lm)) if lm else None


def _require(run: Run, key: str):
    path = run.cfg["data"][key]
    if not path:
        flag = {"train": "--train", "dev": "--dev", "test": "--data"}[key]
        raise ConfigError(f"{run.command} needs {flag} (or data.{key} in the config)")
    return run.input(path)


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_stats(run: Run) -> int:
    ds = load_jsonl(_require(run, "test"), _label_map(run))
    if not ds.examples:
        raise DataError("dataset is empty")
    s = run.cfg["stats"]
    stats = dataset_stats(ds, float(s["clip_percentile"]), int(s["word_bin"]), int(s["char_bin"]))
    out = stats.to_json()
    out["label_names"] = ds.label_names()
    run.json("stats.json", out)
    return EXIT_OK


def cmd_synth(run: Run) -> int:
    sc = SynthConfig.from_dict(run.cfg["synth"])
    data = synth_generate(sc)
    rate = float(run.cfg["noise"]["rate"])
    save_label_map(data.label_map, run.path("label_map.json"))
    save_jsonl(data, run.path("all.jsonl"))
    frac = run.cfg["split"]["dev_fraction"]
    flips = 0
    if frac:
        tr, dev = split_dataset(data, float(frac), seed=sc.seed)
        if rate > 0:
            noisy = inject_label_noise(tr, rate, ConfusionMap.siblings(sc.num_classes), Rng(sc.seed).spawn(7))
            tr, flips = noisy.dataset, noisy.flips
        save_jsonl(tr, run.path("train.jsonl"))
        save_jsonl(dev, run.path("dev.jsonl"))
    run.json("confusion_map.json", ConfusionMap.siblings(sc.num_classes).to_json())
    run.json("synth_summary.json", {"num_examples": len(data), "class_counts": class_distribution(data), "noise_flips": flips})
    return EXIT_OK


def cmd_train(run: Run) -> int:
    lm = _label_map(run)
    tr = load_jsonl(_require(run, "train"), lm)
    dev = load_jsonl(run.input(run.cfg["data"]["dev"]), tr.label_map) if run.cfg["data"]["dev"] else None
    result = train(_train_config(run.cfg), tr, dev)
    save_checkpoint(result.checkpoint, run.path("checkpoint.imb"))
    save_checkpoint(result.final, run.path("final.imb"))
    hist = run.path("history.jsonl")
    hist.write_text(history_jsonl(result.history), encoding="utf-8")
    return EXIT_OK


def cmd_eval(run: Run) -> int:
    ckpt = load_checkpoint(run.input(run.args.checkpoint))
    ds = load_jsonl(_require(run, "test"), ckpt.label_map)
    report = evaluate(ckpt, ds, int(run.cfg["train"]["eval_batch_size"]))
    run.json("metrics.json", report.to_dict())
    print(f"accuracy {report.accuracy:.4f}  macro_f1 {report.macro_f1:.4f}")
    return EXIT_OK


def cmd_gradcheck(run: Run) -> int:
    g = run.cfg["gradcheck"]
    cfg = GradCheckConfig(
        train=_train_config(run.cfg),
        vocab_size=int(g["vocab_size"]),
        num_classes=int(g["num_classes"]),
        eps=float(g["eps"]),
        max_entries=g["max_entries"],
        probe_seed=int(g["probe_seed"]),
        randomize=bool(g["randomize"]),
    )
    report = model_gradcheck(cfg)
    report.pop("seconds")  # keep the report byte-stable across reruns
    run.json("gradcheck.json", report)
    print(f"max relative error {report['max_rel_error']:.3e} (tolerance {report['tolerance']:g}): {'PASS' if report['passed'] else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def cmd_compare(run: Run) -> int:
    base = _train_config(run.cfg)
    seeds = [int(s) for s in run.cfg["compare"]["seeds"]]
    if run.seed is not None:
        seeds = [run.seed]
    rows = []
    for seed in seeds:
        if run.cfg["data"]["train"]:
            lm = _label_map(run)
            tr = load_jsonl(_require(run, "train"), lm)
            dev = load_jsonl(_require(run, "dev"), tr.label_map)
            split = (tr, dev)
        else:
            sc = SynthConfig.from_dict({**run.cfg["synth"], "seed": seed})
            split = noisy_synth_split(sc, float(run.cfg["noise"]["rate"]), float(run.cfg["split"]["dev_fraction"]))
        res = compare_arms(replace(base, seed=seed), split)
        rows.append({"seed": seed, **res.to_dict()})
        print(f"seed {seed}: arm_a {res.arm_a.macro_f1:.4f}  arm_b {res.arm_b.macro_f1:.4f}")
    wins = sum(r["delta_macro_f1"] > 0 for r in rows)
    run.json("compare.json", {"runs": rows, "arm_a_wins": wins, "num_seeds": len(rows)})
    return EXIT_OK


def cmd_rerank(run: Run) -> int:
    ckpt = load_checkpoint(run.input(run.args.checkpoint))
    ds = load_jsonl(_require(run, "test"), ckpt.label_map)
    rc = run.cfg["rerank"]
    backend = backend_from_config(dict(rc["backend"]), len(ckpt.label_map))
    report = pipeline_eval(ckpt, backend, ds, int(rc["k"]))
    run.json("rerank.json", report.to_dict())
    print(f"classifier {report.classifier.macro_f1:.4f}  reranked {report.reranked.macro_f1:.4f}  delta {report.delta_macro_f1:+.4f}")
    return EXIT_OK


COMMANDS = {
    "stats": (cmd_stats, "class distribution and length histograms of a JSONL dataset"),
    "synth": (cmd_synth, "generate a synthetic long-tail dataset"),
    "train": (cmd_train, "train a classifier, write checkpoint and history"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the full model gradient"),
    "compare": (cmd_compare, "fine-tuned bidirectional vs frozen causal feature extraction"),
    "rerank": (cmd_rerank, "top-K candidates + re-ranker pipeline evaluation"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default="runs/latest", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="seed for every random stream of the command")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, e.g. train.epochs=3")

    parser = _Parser(prog="imbtext", description="Long-tail text classification toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("stats", "eval", "rerank"):
            p.add_argument("--data", dest="data_path", help="JSONL dataset")
        if name in ("train", "compare"):
            p.add_argument("--train", dest="train_path", help="training JSONL")
            p.add_argument("--dev", dest="dev_path", help="dev JSONL")
        if name in ("stats", "train", "compare"):
            p.add_argument("--label-map", dest="label_map", help="label map JSON")
        if name in ("eval", "rerank"):
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        if name == "stats":
            p.add_argument("--clip", type=float, help="clip percentile (default 99.5)")
        if name == "rerank":
            p.add_argument("--k", type=int, help="number of candidates (default 15)")
            p.add_argument("--backend", help="oracle | simulated_mismatch | http")
            p.add_argument("--p", type=float, help="mismatch probability of the simulated backend")
            p.add_argument("--url", help="endpoint of the http backend")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = resolve_config(args)
        if args.command == "rerank":
            be = cfg["rerank"]["backend"]
            if args.backend:
                be["kind"] = args.backend
            if args.p is not None:
                be["p"] = args.p
            if args.url:
                be["url"] = args.url
        run = Run(args.command, Path(args.out), cfg, args.seed)
        run.args = args
        code = COMMANDS[args.command][0](run)
    except ImbError as exc:
        print(f"imbtext {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        print(f"imbtext {args.command}: {exc}", file=sys.stderr)
        code = EXIT_DATA
    if run is not None:
        run.manifest("ok" if code == EXIT_OK else f"exit {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
