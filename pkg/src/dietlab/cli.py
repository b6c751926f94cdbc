"""Command-line surface: ingest, train, diet, simulate, eval, report.

Every subcommand reads an optional flat JSON config (``--config``); flags
given on the command line win over the file.  Nothing is read from the
environment.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .backbone import (
    ARCHS, CheckpointError, Diet, DietError, Hyper, MaskedBackbone, build_backbone, load_checkpoint,
    save_checkpoint,
)
from .data import (
    DataError, FORMATS, SPLIT_KINDS, Split, SplitSpec, build_sequences, cache_key, load_dataset,
    markov_dataset, read_split_cache, split, window, write_split_cache,
)
from .dietgen import GeneratorStack, SharedBuffer, build_stack, generate_diet
from .metrics import evaluate
from .protocol import (
    POLICIES, WireError, count_flops, encode_diet, events_from_split, simulate_session,
    storage_bits, zero_row_series,
)
from .trainer import MODES, STACK_KIND, Model, TrainConfig, canonical_mode, fit, random_diet

log = logging.getLogger("dietlab")

SYNTHETIC = "synthetic:markov"
SWEEP_KEEP = (0.05, 0.1, 0.2, 0.3, 0.4)
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "data/ml-100k/u.data"
    format: str = "tab"
    arch: str = "SASRec"
    mode: str = "DIET"
    keep_ratio: float = 0.1
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    split: str = "leave-one-out"
    k_core: int = 20
    positive_threshold: float = 4.0
    split_seed: int = 0
    output: str = "runs"
    epochs: int = 2
    batch_size: int = 128
    lr_base: float = 0.001
    d: int = 64
    blocks: int = 2
    heads: int = 4
    max_len: int = 5
    exclude_history: bool = True
    ste: str = "magnitude"
    train_embeddings: bool = False
    top_n: int = 10

    def __post_init__(self):
        try:
            self.mode = canonical_mode(self.mode)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        self.seeds = [int(s) for s in self.seeds]
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.split not in SPLIT_KINDS:
            raise ConfigError(f"split must be one of {SPLIT_KINDS}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError("keep_ratio must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.lr_base <= 0 or self.top_n < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, lr_base > 0 and top_n >= 1 required")

    @classmethod
    def from_json(cls, path: str | Path | None, overrides: dict) -> "ExperimentConfig":
        raw = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from None
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: expected a flat JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**raw)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @property
    def hyper(self) -> Hyper:
        return Hyper(d=self.d, blocks=self.blocks, heads=self.heads, max_len=self.max_len)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(kind=self.split, k_core=self.k_core, seed=self.split_seed,
                         positive_threshold=self.positive_threshold)

    def train_config(self, seed: int, mode: str | None = None, keep_ratio: float | None = None) -> TrainConfig:
        return TrainConfig(mode=mode or self.mode, keep_ratio=keep_ratio or self.keep_ratio, epochs=self.epochs,
                           batch_size=self.batch_size, lr_base=self.lr_base, seed=seed, ste=self.ste,
                           train_embeddings=self.train_embeddings)


# --- shared plumbing ---------------------------------------------------------

def load_split(cfg: ExperimentConfig) -> Split:
    """Split for ``cfg``, read from or written to ``<output>/split.bin``."""
    if cfg.dataset == SYNTHETIC:
        return split(markov_dataset(), SplitSpec(kind=cfg.split, k_core=1, seed=cfg.split_seed))
    if not Path(cfg.dataset).is_file():
        raise DataError(f"missing input: {cfg.dataset}")
    key = cache_key(cfg.dataset, cfg.format, cfg.split_spec())
    cache = Path(cfg.output) / "split.bin"
    if cache.is_file():
        try:
            return read_split_cache(cache, key)
        except DataError as e:
            log.info("ignoring split cache: %s", e)
    sp = load_dataset(cfg.dataset, cfg.format, cfg.split_spec())[1]
    cache.parent.mkdir(parents=True, exist_ok=True)
    write_split_cache(cache, key, sp)
    return sp


def untrained_model(cfg: ExperimentConfig, n_items: int, seed: int, mode: str | None = None,
                    keep_ratio: float | None = None) -> Model:
    mode = canonical_mode(mode or cfg.mode)
    keep = keep_ratio or cfg.keep_ratio
    root = nx.Rng(seed)
    bb = build_backbone(cfg.arch, n_items, cfg.hyper, nx.Rng(seed))
    if mode == "base":
        return Model(mode, bb)
    if mode == "random":
        return Model(mode, bb, fixed_diet=random_diet(bb, keep, root.child(1)))
    stack = build_stack(bb, STACK_KIND[mode], keep, root.child(2))
    buffer = SharedBuffer.for_backbone(bb, root.child(3)) if mode == "DIETING" else None
    return Model(mode, bb, stack, buffer=buffer)


def train_one(cfg: ExperimentConfig, sp: Split, seed: int, mode: str | None = None,
              keep_ratio: float | None = None, curves: bool = False):
    tc = cfg.train_config(seed, mode, keep_ratio)
    bb = build_backbone(cfg.arch, sp.n_items, cfg.hyper, nx.Rng(seed))
    data = build_sequences(sp.train, cfg.max_len)
    on_epoch = None
    if curves:
        def on_epoch(epoch, model):
            return evaluate(model, sp, cfg.top_n, cfg.exclude_history)
    return fit(tc, data, bb, on_epoch=on_epoch)


def model_path(cfg: ExperimentConfig, mode: str, seed: int, keep_ratio: float | None = None) -> Path:
    keep = keep_ratio or cfg.keep_ratio
    return Path(cfg.output) / f"model-{mode}-k{keep:g}-seed{seed}.ckpt"


def save_model(path: Path, model: Model, keep_ratio: float) -> None:
    sections = {}
    if model.stack is not None:
        sections[b"STCK"] = dict(model.stack.params)
    if model.buffer is not None:
        sections[b"WMAX"] = {"w_max": model.buffer.w_max}
    if model.fixed_diet is not None:
        sections[b"RAND"] = {k: m.astype(float) for k, m in model.fixed_diet.masks.items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model.backbone, sections)
    meta = {"mode": model.mode, "keep_ratio": keep_ratio,
            "stack_kind": model.stack.kind if model.stack is not None else None}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_model(path: str | Path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing input: {path}")
    meta = json.loads(Path(str(path) + ".json").read_text())
    bb, sections = load_checkpoint(path)
    stack = buffer = fixed = None
    if meta["stack_kind"] is not None:
        stack = GeneratorStack(meta["stack_kind"], meta["keep_ratio"], bb.hyper.d, list(bb.layers),
                               dict(sections[b"STCK"]))
    if b"WMAX" in sections:
        buffer = SharedBuffer(sections[b"WMAX"]["w_max"])
    if b"RAND" in sections:
        fixed = Diet({k: v > 0.5 for k, v in sections[b"RAND"].items()}, meta["keep_ratio"])
    return Model(meta["mode"], bb, stack, fixed, buffer)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- subcommands -------------------------------------------------------------

def cmd_ingest(cfg: ExperimentConfig, args) -> dict:
    sp = load_split(cfg)
    stats = {"users_train": len(sp.train), "users_test": len(sp), "items": sp.n_items,
             "train_samples": len(build_sequences(sp.train, cfg.max_len)) if sp.train else 0}
    write_json(Path(cfg.output) / "ingest.json", stats)
    return stats


def cmd_train(cfg: ExperimentConfig, args) -> dict:
    sp = load_split(cfg)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    rows, out = [], {}
    for seed in seeds:
        res = train_one(cfg, sp, seed, curves=True)
        path = model_path(cfg, cfg.mode, seed)
        save_model(path, res.model, cfg.keep_ratio)
        (Path(cfg.output) / f"trainlog-{cfg.mode}-seed{seed}.csv").write_text(res.log_csv())
        for epoch, (loss, m) in enumerate(zip(res.epoch_loss, res.epoch_metrics)):
            rows.append([cfg.mode, seed, epoch, loss, m["ndcg"], m["hit"]])
        out[seed] = res.epoch_metrics[-1] if res.epoch_metrics else {}
    write_csv(Path(cfg.output) / f"curves-{cfg.mode}.csv", ["mode", "seed", "epoch", "loss", "ndcg", "hit"], rows)
    return {"models": [str(model_path(cfg, cfg.mode, s)) for s in seeds], "final": out}


def _model_for(cfg: ExperimentConfig, args, sp: Split) -> Model:
    if getattr(args, "model", None):
        return load_model(args.model)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    return untrained_model(cfg, sp.n_items, seed)


def cmd_eval(cfg: ExperimentConfig, args) -> dict:
    sp = load_split(cfg)
    model = _model_for(cfg, args, sp)
    res = evaluate(model, sp, cfg.top_n, cfg.exclude_history)
    for k in ("ndcg", "hit"):
        if not np.isfinite(res[k]):
            raise nx.NumericError(f"non-finite {k}")
    res["exclude_history"] = cfg.exclude_history
    write_json(Path(cfg.output) / "eval.json", res)
    return res


def cmd_diet(cfg: ExperimentConfig, args) -> dict:
    sp = load_split(cfg)
    model = _model_for(cfg, args, sp)
    if model.stack is None and model.fixed_diet is None:
        raise ConfigError(f"mode {model.mode} has no diet")
    if args.items:
        seq = np.array([int(x) for x in args.items.split(",")])
    else:
        if args.user is None:
            raise ConfigError("diet needs --user or --items")
        rows = np.nonzero(sp.test_users == args.user)[0]
        if not len(rows):
            raise DataError(f"user {args.user} has no test context")
        seq = sp.test_contexts[rows[0]]
    bb = model.serving_backbone
    if seq.size and (seq.min() < 0 or seq.max() >= bb.n_items):
        raise DataError("item outside the catalogue")
    diet = generate_diet(model.stack, seq, bb) if model.stack is not None else model.fixed_diet
    wire = encode_diet(diet)
    out = Path(args.out) if args.out else Path(cfg.output) / "diet.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(wire)
    return {"bits": 8 * len(wire), "ones": diet.ones, "n_params": diet.n_params, "path": str(out),
            "flops": count_flops(MaskedBackbone(bb, diet))}


def cmd_simulate(cfg: ExperimentConfig, args) -> dict:
    sp = load_split(cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    model = _model_for(cfg, args, sp)
    if args.scenarios < 1:
        raise ConfigError("--scenarios must be >= 1")
    events = events_from_split(sp, shift_prob=args.shift_prob, seed=seed)
    targets = dict(zip(sp.test_users.tolist(), sp.test_targets.tolist()))
    res = simulate_session(model, events, args.refresh_policy, targets, n=cfg.top_n,
                           exclude_history=cfg.exclude_history)
    out = Path(cfg.output)
    storage_mode = "DIETING" if model.mode == "DIETING" else "DIET"
    bb = model.serving_backbone
    # per-edge storage sums over edges; ``storage_bits`` is one edge holding every scenario
    summary = {**asdict(res.aggregate), "mode": model.mode, "policy": args.refresh_policy,
               "scenarios": args.scenarios, "storage_mode": storage_mode}
    summary["storage_bits_all_edges"] = summary.pop("storage_bits")
    summary["storage_bits"] = storage_bits(storage_mode, bb, args.scenarios)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"simulate-{model.mode}.csv").write_text(res.to_csv())
    (out / f"simulate-{model.mode}.json").write_text(res.to_json() + "\n")
    write_json(out / f"simulate-{model.mode}-summary.json", summary)
    return summary


def cmd_report(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.output)
    manifest = {"config": asdict(cfg), "files": []}
    sp = load_split(cfg)
    if args.sweep == "keep_ratio":
        rows = []
        for keep in SWEEP_KEEP:
            for seed in cfg.seeds:
                res = train_one(cfg, sp, seed, keep_ratio=keep)
                m = evaluate(res.model, sp, cfg.top_n, cfg.exclude_history)
                rows.append([cfg.mode, keep, seed, m["ndcg"], m["hit"], res.final_loss])
        write_csv(out / "sweep-keep_ratio.csv", ["mode", "keep_ratio", "seed", "ndcg", "hit", "final_loss"], rows)
        manifest["files"].append("sweep-keep_ratio.csv")
    if args.curves:
        rows = []
        for seed in cfg.seeds:
            res = train_one(cfg, sp, seed, curves=True)
            for epoch, (loss, m) in enumerate(zip(res.epoch_loss, res.epoch_metrics)):
                rows.append([cfg.mode, seed, epoch, loss, m["ndcg"], m["hit"]])
        write_csv(out / "curves.csv", ["mode", "seed", "epoch", "loss", "ndcg", "hit"], rows)
        manifest["files"].append("curves.csv")
    if args.zero_rows:
        rows = []
        for seed in cfg.seeds:
            model = train_one(cfg, sp, seed).model
            if model.stack is None:
                raise ConfigError("zero-row report needs a generator mode")
            contexts = np.stack([window(c, cfg.max_len) for c in sp.test_contexts])
            for r in zero_row_series(model.stack, model.serving_backbone, contexts):
                rows.append([cfg.mode, seed, r["layer"], r["uncorrected"], r["corrected"]])
        write_csv(out / "zero-rows.csv", ["mode", "seed", "layer", "uncorrected", "corrected"], rows)
        manifest["files"].append("zero-rows.csv")
    if not manifest["files"]:
        raise ConfigError("report needs --sweep keep_ratio, --curves or --zero-rows")
    write_json(out / "manifest.json", manifest)
    return manifest


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "diet": cmd_diet, "simulate": cmd_simulate,
            "eval": cmd_eval, "report": cmd_report}


# --- argument parsing --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dietlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat JSON experiment config")
        sp.add_argument("--dataset", help=f"interaction file, or {SYNTHETIC}")
        sp.add_argument("--format", choices=FORMATS)
        sp.add_argument("--arch", choices=ARCHS)
        sp.add_argument("--mode", help=f"one of {MODES} (aliases accepted)")
        sp.add_argument("--keep-ratio", type=float, dest="keep_ratio")
        sp.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], help="comma separated")
        sp.add_argument("--split", choices=SPLIT_KINDS)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--train-embeddings", action="store_const", const=True, dest="train_embeddings",
                        help="masked modes also learn the item-embedding table")
        sp.add_argument("--output", help="output directory")
        sp.add_argument("--seed", type=int, dest="seed", help="single seed for this command")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name in ("ingest", "train", "eval"):
        s = sub.add_parser(name)
        common(s)
        if name == "eval":
            s.add_argument("--model", help="checkpoint from `train`; untrained model if omitted")
    s = sub.add_parser("diet")
    common(s)
    s.add_argument("--model")
    s.add_argument("--user", type=int)
    s.add_argument("--items", help="comma separated item ids")
    s.add_argument("--out")
    s = sub.add_parser("simulate")
    common(s)
    s.add_argument("--model")
    s.add_argument("--refresh-policy", choices=POLICIES, default="per-session", dest="refresh_policy")
    s.add_argument("--scenarios", type=int, default=1)
    s.add_argument("--shift-prob", type=float, default=0.1, dest="shift_prob")
    s = sub.add_parser("report")
    common(s)
    s.add_argument("--sweep", choices=["keep_ratio"])
    s.add_argument("--curves", action="store_true")
    s.add_argument("--zero-rows", action="store_true", dest="zero_rows")
    return p


CONFIG_KEYS = ("dataset", "format", "arch", "mode", "keep_ratio", "seeds", "split", "epochs", "output",
               "train_embeddings")


def run_cli(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = ExperimentConfig.from_json(args.config, {k: getattr(args, k) for k in CONFIG_KEYS})
        result = COMMANDS[args.command](cfg, args)
    except (ConfigError, DietError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, WireError, FileNotFoundError, IndexError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (nx.NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())
