"""Command-line pipeline: prepare -> embed -> codes -> train -> eval / recommend.

Every command reads one flat ``key = value`` config file; any key can be
overridden with ``--key value`` (dashes and underscores are interchangeable).
Outputs land in ``work_dir``:

    dataset/            manifest.json, vocab.txt, users.txt, sequences.txt
    split.txt
    embeddings/<stream>.bin
    codes/<stream>.txt
    checkpoint/         manifest.json, params.bin
    train_log.tsv
    metrics_valid.txt, metrics_test.txt
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import filelock

from . import __version__
from .codes import CodeTreeError, build_code_tree, load_code_tree, save_code_tree
from .corpus import (
    CorpusError,
    k_core_filter,
    leave_one_out_split,
    load_dataset,
    load_interactions,
    load_split,
    make_training_examples,
    save_dataset,
    save_split,
    training_sequences,
)
from .embed import (
    EmbeddingError,
    cooccurrence_behavior_embeddings,
    load_embeddings,
    load_item_texts,
    save_embeddings,
    text_semantic_embeddings,
)
from .evaluation import evaluate_leave_one_out, format_table, save_metrics
from .infer import DEFAULT_BEAM, EagerRecommender, InferenceError
from .model import EagerModel, ModelConfig, ModelError, StreamConfig
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingDiverged, train

logger = logging.getLogger("eager")

LOG_ENV = "EAGER_LOG_LEVEL"
PROVIDERS = ("cooc", "text", "file")
STREAM_NAMES = ("behavior", "semantic")

GENERAL_DEFAULTS: Dict[str, object] = {
    "work_dir": "work",
    "interactions": "",
    "delimiter": ",",
    "columns": "0,1,2",
    "core_k": 5,
    "item_texts": "",
    "streams": "behavior,semantic",
    "embed_dim": 128,
    "cooc_window": 3,
    "branch_k": 256,
    "normalize_embeddings": False,
    "seed": 0,
    "beam": DEFAULT_BEAM,
    "k": 10,
    "ks": "5,10,20",
}
STREAM_DEFAULTS = {
    "behavior": {"provider": "cooc", "path": ""},
    "semantic": {"provider": "text", "path": ""},
}
MODEL_KEYS = {f.name: f.default for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}
PATH_KEYS = {"work_dir", "interactions", "item_texts"}


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


def default_config() -> Dict[str, object]:
    cfg = dict(GENERAL_DEFAULTS)
    cfg.update(MODEL_KEYS)
    cfg.update(TRAIN_KEYS)
    for name, opts in STREAM_DEFAULTS.items():
        for key, value in opts.items():
            cfg[f"stream.{name}.{key}"] = value
    return cfg


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _canonical(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_config_text(text: str, base: Optional[Dict[str, object]] = None, origin: str = "<config>"):
    cfg = dict(base or default_config())
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{line_no}: expected key = value")
        key, value = line.split("=", 1)
        set_option(cfg, key, value.strip(), origin=f"{origin}:{line_no}")
    return cfg


def set_option(cfg: Dict[str, object], key: str, value: str, origin: str = "override") -> None:
    key = _canonical(key)
    if key not in cfg:
        raise ConfigError(f"{origin}: unknown key {key!r}")
    cfg[key] = _coerce(key, value, cfg[key])


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> Dict[str, object]:
    """Defaults, then the file (if any), then ``--key value`` overrides."""
    cfg = default_config()
    base_dir = Path(".")
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg = parse_config_text(p.read_text(), cfg, origin=str(p))
        base_dir = p.parent
    # File paths are relative to the file; command-line paths stay relative to the CWD.
    for key in list(cfg):
        if (key in PATH_KEYS or key.endswith(".path")) and cfg[key]:
            q = Path(str(cfg[key]))
            cfg[key] = str(q if q.is_absolute() else base_dir / q)
    apply_overrides(cfg, overrides)
    _check_values(cfg)
    return cfg


def apply_overrides(cfg: Dict[str, object], tokens: Sequence[str]) -> None:
    i = 0
    tokens = list(tokens)
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = _canonical(tok[2:])
        if "=" in key:
            key, value = tok[2:].split("=", 1)
            i += 1
        elif isinstance(cfg.get(key), bool) and (i + 1 == len(tokens) or tokens[i + 1].startswith("--")):
            value = "true"
            i += 1
        else:
            if i + 1 == len(tokens):
                raise ConfigError(f"--{key} needs a value")
            value = tokens[i + 1]
            i += 2
        set_option(cfg, key, value)


def _check_values(cfg: Dict[str, object]) -> None:
    for name in stream_names(cfg):
        provider = cfg[f"stream.{name}.provider"]
        if provider not in PROVIDERS:
            raise ConfigError(f"stream.{name}.provider must be one of {PROVIDERS}")
    if int(cfg["beam"]) < int(cfg["k"]):
        raise UsageError(f"beam ({cfg['beam']}) must be >= k ({cfg['k']})")


def stream_names(cfg: Dict[str, object]) -> List[str]:
    names = [s.strip() for s in str(cfg["streams"]).split(",") if s.strip()]
    if not names:
        raise ConfigError("streams must name at least one stream")
    for n in names:
        if n not in STREAM_NAMES:
            raise ConfigError(f"unknown stream {n!r}; choose from {STREAM_NAMES}")
    if len(set(names)) != len(names):
        raise ConfigError("duplicate stream")
    return names


def derive_seed(seed: int, component: str) -> int:
    """Stable per-component seed from the global seed and a component name."""
    digest = hashlib.sha256(f"{seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is not set")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {path} does not exist")
    return p


# -- artifact paths -----------------------------------------------------------

class Layout:
    def __init__(self, cfg: Dict[str, object]):
        self.root = Path(str(cfg["work_dir"]))
        self.dataset = self.root / "dataset"
        self.split = self.root / "split.txt"
        self.checkpoint = self.root / "checkpoint"
        self.train_log = self.root / "train_log.tsv"

    def embeddings(self, stream: str) -> Path:
        return self.root / "embeddings" / f"{stream}.bin"

    def codes(self, stream: str) -> Path:
        return self.root / "codes" / f"{stream}.txt"

    def metrics(self, target: str) -> Path:
        return self.root / f"metrics_{target}.txt"


def _lock(layout: Layout) -> filelock.FileLock:
    layout.root.mkdir(parents=True, exist_ok=True)
    return filelock.FileLock(str(layout.root / ".lock"), timeout=0)


# -- commands -----------------------------------------------------------------

def cmd_prepare(cfg: Dict[str, object]) -> int:
    src = _require(str(cfg["interactions"]), "interactions file")
    columns = tuple(int(c) for c in str(cfg["columns"]).split(","))
    delimiter = str(cfg["delimiter"]).replace("\\t", "\t")
    layout = Layout(cfg)
    rows = load_interactions(src, delimiter=delimiter, columns=columns)
    dataset = k_core_filter(rows, int(cfg["core_k"]))
    split = leave_one_out_split(dataset)
    save_dataset(dataset, layout.dataset)
    save_split(split, layout.split)
    stats = dataset.stats()
    logger.info("prepared %d users, %d items, %d interactions (%d users excluded from split)",
                stats["num_users"], stats["num_items"], stats["num_interactions"], split.excluded)
    print(json.dumps(stats, sort_keys=True))
    return 0


def build_stream_embeddings(cfg: Dict[str, object], name: str, dataset):
    provider = cfg[f"stream.{name}.provider"]
    d = int(cfg["embed_dim"])
    seed = derive_seed(int(cfg["seed"]), f"embed.{name}")
    if provider == "cooc":
        return cooccurrence_behavior_embeddings(training_sequences(dataset), dataset.num_items, d=d,
                                                window=int(cfg["cooc_window"]), seed=seed)
    if provider == "text":
        path = _require(str(cfg["item_texts"]), "item_texts file")
        return text_semantic_embeddings(load_item_texts(path, dataset.item_ids), d=d, seed=seed)
    path = _require(str(cfg[f"stream.{name}.path"]), f"stream.{name}.path")
    return load_embeddings(path, dataset.num_items, source_tag=f"file:{Path(path).name}")


def cmd_embed(cfg: Dict[str, object]) -> int:
    layout = Layout(cfg)
    dataset = load_dataset(_require(str(layout.dataset), "dataset directory"))
    for name in stream_names(cfg):
        emb = build_stream_embeddings(cfg, name, dataset)
        out = layout.embeddings(name)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_embeddings(emb, out)
        print(f"{name}\t{emb.n}x{emb.dim}\t{emb.source_tag}")
    return 0


def cmd_codes(cfg: Dict[str, object], validate_only: bool = False) -> int:
    layout = Layout(cfg)
    dataset = load_dataset(_require(str(layout.dataset), "dataset directory"))
    for name in stream_names(cfg):
        if validate_only:
            tree = load_code_tree(_require(str(layout.codes(name)), f"{name} code file"))
            if tree.num_items != dataset.num_items:
                raise CodeTreeError(f"{name}: {tree.num_items} codes for {dataset.num_items} items")
            # construction re-checks the leaf map; round-trip every item as well
            for item in range(tree.num_items):
                if tree.code_to_item(tree.item_to_code(item)) != item:
                    raise CodeTreeError(f"{name}: item {item} does not round-trip")
            print(f"{name}\tbijection ok\tN={tree.num_items}\tl={tree.depth}")
            continue
        emb = load_embeddings(_require(str(layout.embeddings(name)), f"{name} embeddings"), dataset.num_items)
        tree = build_code_tree(emb.matrix, int(cfg["branch_k"]), seed=derive_seed(int(cfg["seed"]), f"codes.{name}"),
                               stream_tag=name, normalize=bool(cfg["normalize_embeddings"]))
        out = layout.codes(name)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_code_tree(tree, out)
        print(f"{name}\tN={tree.num_items}\tK={tree.branch_k}\tl={tree.depth}\tmax_imbalance={tree.max_imbalance()}")
    return 0


def model_config(cfg: Dict[str, object]) -> ModelConfig:
    return ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})


def train_config(cfg: Dict[str, object]) -> TrainConfig:
    kwargs = {k: cfg[k] for k in TRAIN_KEYS}
    kwargs["seed"] = derive_seed(int(cfg["seed"]), "train")
    return TrainConfig(**kwargs)


def build_model(cfg: Dict[str, object], layout: Layout, num_items: int) -> EagerModel:
    streams = []
    for name in stream_names(cfg):
        tree = load_code_tree(_require(str(layout.codes(name)), f"{name} code file"))
        emb = load_embeddings(_require(str(layout.embeddings(name)), f"{name} embeddings"), num_items)
        streams.append(StreamConfig(name, tree, emb.matrix))
    return EagerModel(num_items, streams, model_config(cfg), seed=derive_seed(int(cfg["seed"]), "model"))


def _checkpoint_meta(cfg: Dict[str, object], model: EagerModel) -> dict:
    return {
        "version": __version__,
        "streams": model.stream_names,
        "model": model.config.to_dict(),
        "depths": {n: model.tree(n).depth for n in model.stream_names},
        "branch_k": {n: model.tree(n).branch_k for n in model.stream_names},
    }


def cmd_train(cfg: Dict[str, object]) -> int:
    layout = Layout(cfg)
    dataset = load_dataset(_require(str(layout.dataset), "dataset directory"))
    split = load_split(_require(str(layout.split), "split file"))
    model = build_model(cfg, layout, dataset.num_items)
    tc = train_config(cfg)
    if tc.enable_stt and not model.has_transfer:
        logger.info("one stream configured: transfer objectives disabled")
        tc.enable_stt = False
    examples = make_training_examples(split, tc.max_history)
    with open(layout.train_log, "w") as log:
        report = train(model, examples, split, tc, log=log)
    save_checkpoint(model.state_dict(), layout.checkpoint, extra=_checkpoint_meta(cfg, model))
    logger.info("trained %d steps in %.1fs; best N@10 %.4f at step %d", report.steps, report.seconds,
                report.best_ndcg10, report.best_step)
    print(f"steps={report.steps} best_step={report.best_step} best_ndcg@10={report.best_ndcg10:.6f}")
    return 0


def load_trained(cfg: Dict[str, object], layout: Layout, checkpoint: Optional[str]):
    dataset = load_dataset(_require(str(layout.dataset), "dataset directory"))
    model = build_model(cfg, layout, dataset.num_items)
    ckpt = _require(checkpoint or str(layout.checkpoint), "checkpoint")
    state = load_checkpoint(ckpt, expected=model.state_dict())
    model.load_state_dict(state)
    model.eval()
    return dataset, model


def parse_ks(text: str) -> List[int]:
    try:
        ks = sorted({int(k) for k in str(text).split(",") if k.strip()})
    except ValueError:
        raise UsageError(f"bad --ks {text!r}") from None
    if not ks or ks[0] < 1:
        raise UsageError("ks must be positive integers")
    return ks


def cmd_eval(cfg: Dict[str, object], checkpoint: Optional[str] = None) -> int:
    layout = Layout(cfg)
    ks = parse_ks(str(cfg["ks"]))
    if int(cfg["beam"]) < max(ks):
        raise UsageError(f"beam ({cfg['beam']}) must be >= max K ({max(ks)})")
    _, model = load_trained(cfg, layout, checkpoint)
    split = load_split(_require(str(layout.split), "split file"))
    rec = EagerRecommender(model, beam_size=int(cfg["beam"]))
    for target in ("valid", "test"):
        report = evaluate_leave_one_out(rec, split, ks=ks, target_field=target, max_history=int(cfg["max_history"]))
        save_metrics(report, layout.metrics(target))
        print(format_table(report, title=target))
    return 0


def read_histories(path: Path, item_index: Dict[str, int]):
    """Yield (line_no, user_id, item indices or None, error) for each non-blank line."""
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        user, raw = parts[0], parts[1:]
        if not raw:
            yield line_no, user, None, "empty history"
            continue
        unknown = [r for r in raw if r not in item_index]
        if unknown:
            yield line_no, user, None, f"unknown item id {unknown[0]!r}"
            continue
        yield line_no, user, [item_index[r] for r in raw], None


def format_recommendation(user: str, ranked, item_ids: Sequence[str]) -> str:
    return " ".join([user] + [f"{item_ids[i]}:{s:.6f}" for i, s in ranked.entries])


def cmd_recommend(cfg: Dict[str, object], histories: str, output: Optional[str] = None,
                  checkpoint: Optional[str] = None) -> int:
    layout = Layout(cfg)
    k, beam = int(cfg["k"]), int(cfg["beam"])
    if k < 1:
        raise UsageError("k must be >= 1")
    src = _require(histories, "histories file")
    dataset, model = load_trained(cfg, layout, checkpoint)
    index = dataset.item_index
    good, failures = [], 0
    for line_no, user, items, err in read_histories(src, index):
        if err:
            failures += 1
            print(f"{src}:{line_no}: {err}", file=sys.stderr)
            continue
        good.append((user, items[-int(cfg["max_history"]):]))
    rec = EagerRecommender(model, beam_size=beam)
    ranked = rec.recommend([h for _, h in good], k) if good else []
    lines = [format_recommendation(user, r, dataset.item_ids) + "\n" for (user, _), r in zip(good, ranked)]
    if output:
        Path(output).write_text("".join(lines))
    else:
        sys.stdout.write("".join(lines))
    if failures:
        logger.warning("%d history line(s) skipped", failures)
        return 1
    return 0


def cmd_selfcheck(cfg: Dict[str, object]) -> int:
    from .selfcheck import run_selfcheck

    ok = run_selfcheck(seed=int(cfg["seed"]), out=sys.stdout)
    return 0 if ok else 1


# -- entry point --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eager", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("prepare", "filter raw interactions and write the dataset and split"),
        ("embed", "build or load per-stream item embeddings"),
        ("codes", "build per-stream code trees"),
        ("train", "train the model and write the best checkpoint"),
        ("eval", "write validation and test metrics"),
        ("recommend", "top-k recommendations for a histories file"),
        ("selfcheck", "gradient and beam-search oracle checks"),
    ]:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("-c", "--config", help="flat key = value config file")
        if name in ("eval", "recommend"):
            sp.add_argument("--checkpoint", help="checkpoint directory (default: work_dir/checkpoint)")
        if name == "codes":
            sp.add_argument("--validate", action="store_true", help="check existing code files instead")
        if name == "recommend":
            sp.add_argument("--histories", required=True, help="lines of 'user_id item_id item_id ...'")
            sp.add_argument("--output", help="write recommendations here instead of stdout")
    return p


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, extra)
    except UsageError as exc:
        parser.error(str(exc))
    except ConfigError as exc:
        print(f"eager: config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "selfcheck":
        return cmd_selfcheck(cfg)
    layout = Layout(cfg)
    try:
        with _lock(layout):
            if args.command == "prepare":
                return cmd_prepare(cfg)
            if args.command == "embed":
                return cmd_embed(cfg)
            if args.command == "codes":
                return cmd_codes(cfg, validate_only=args.validate)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint)
            if args.command == "recommend":
                return cmd_recommend(cfg, args.histories, args.output, args.checkpoint)
    except UsageError as exc:
        parser.error(str(exc))
    except filelock.Timeout:
        print(f"eager: {layout.root} is locked by another command", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"eager: config error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, EmbeddingError, CodeTreeError, ModelError, CheckpointError,
            InferenceError, TrainingDiverged, OSError) as exc:
        print(f"eager: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
