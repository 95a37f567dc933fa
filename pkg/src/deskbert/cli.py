"""``deskbert`` command line: tokenizer training, pretraining, annealing,
fine-tuning, evaluation, ranking and invariant checks.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .config import PRESET_NAMES, ConfigError, RunConfig
from .datamix import (
    CorpusFormatError, CroppedSource, Document, MixSampler, MixSpec, PackedSource, doc_tokens, ingest,
)
from .encoder import EncoderModel
from .evalstats import ScoreTable, accuracy, f1_entity, ndcg_at_k, rank_systems, spearman
from .finetune import (
    TASK_KINDS, FinetuneProtocol, TaskHead, finetune, load_examples, lr_grid,
)
from .tokenizer import Vocab, train_bpe
from .trainer import AdamWConfig, CheckpointError, JsonlSink, load_checkpoint, save_checkpoint, train
from .verify import SUITES, run_suite

log = logging.getLogger("deskbert")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
OUT_DIR_ENV = "DESKBERT_OUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _out_dir(default: str | Path) -> Path:
    out = Path(os.environ.get(OUT_DIR_ENV) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_yaml(path: Path, data) -> None:
    path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")


def _existing(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# -- tokenizer ------------------------------------------------------------

def _texts(paths: Sequence[str]):
    for path in paths:
        p = _existing(path, "corpus")
        if p.suffix == ".txt":
            yield from (ln for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip())
        else:
            for doc in ingest(p):
                yield from ((doc.src, doc.tgt) if doc.kind == "parallel-pair" else (doc.text,))


def cmd_tokenizer_train(args) -> int:
    texts = list(_texts(args.corpus))
    vocab = train_bpe(texts, args.vocab_size)
    out = Path(args.out)
    if os.environ.get(OUT_DIR_ENV):
        out = _out_dir(os.environ[OUT_DIR_ENV]) / out.name
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    print(f"wrote {out} ({vocab.vocab_size} ids, {len(vocab.merges)} merges from {len(texts)} texts)")
    return EXIT_OK


# -- pretrain / anneal ----------------------------------------------------

def _load_docs(cfg: RunConfig) -> list[Document]:
    if not cfg.corpus:
        raise UsageError("config lists no corpus files")
    docs = []
    for path in cfg.corpus:
        docs.extend(ingest(_existing(path, "corpus")))
    if not docs:
        raise UsageError("corpus is empty")
    return docs


def _default_mix(docs: Sequence[Document], name: str, min_quality: int | None) -> MixSpec:
    sources = sorted({d.source for d in docs})
    extra = {} if min_quality is None else {"min_quality": min_quality}
    return MixSpec.from_weights(name, [({"source": s, **extra}, 1.0) for s in sources])


def _vocab_for(cfg: RunConfig, docs: Sequence[Document], out: Path, model_vocab: int) -> tuple[Vocab, Path]:
    if cfg.vocab:
        path = _existing(cfg.vocab, "vocab")
        vocab = Vocab.load(path)
    else:
        path = out / "vocab.txt"
        if path.exists():
            vocab = Vocab.load(path)
        else:
            texts = [t for d in docs for t in ((d.src, d.tgt) if d.kind == "parallel-pair" else (d.text,))]
            vocab = train_bpe(texts, model_vocab)
            vocab.save(path)
    if vocab.vocab_size != model_vocab:
        raise UsageError(f"vocab has {vocab.vocab_size} ids but the model expects {model_vocab}")
    return vocab, path.resolve()


def _sampler(cfg: RunConfig, spec: MixSpec, docs, vocab: Vocab, phase_index: int) -> MixSampler:
    lengths = {id(d): len(doc_tokens(d, vocab)) for d in docs}
    return MixSampler(spec, docs, seed=cfg.seed * 1000 + phase_index, weighting=cfg.weighting,
                      length_fn=lambda d: lengths[id(d)], unlabeled_pass=cfg.unlabeled_pass)


def _build_sources(cfg: RunConfig, docs, vocab: Vocab) -> dict:
    pre_spec = MixSpec.load(cfg.pretrain_mix) if cfg.pretrain_mix else _default_mix(docs, "pretrain", None)
    ann_spec = MixSpec.load(cfg.anneal_mix) if cfg.anneal_mix else _default_mix(docs, "anneal", cfg.min_quality)
    return {
        "pretrain": PackedSource(_sampler(cfg, pre_spec, docs, vocab, 0), vocab, cfg.seq_len, cfg.batch_size,
                                 cfg.add_bos),
        "anneal": CroppedSource(_sampler(cfg, ann_spec, docs, vocab, 1), vocab, cfg.batch_size, cfg.crop_max,
                                cfg.crop_min, seed=cfg.seed, add_bos=cfg.add_bos,
                                distribution=cfg.crop_distribution),
    }


def _run_phase(args, phase: str) -> int:
    if Path(args.config).exists() or args.config.lower() not in PRESET_NAMES:
        _existing(args.config, "config")
    cfg = RunConfig.load(args.config)
    if args.corpus:
        cfg = dataclasses.replace(cfg, corpus=list(cfg.corpus) + list(args.corpus)).validate()
    out = _out_dir(cfg.out_dir)
    cfg.save(out / "config.resolved.yaml")
    plan = cfg.plan()
    model_cfg = cfg.encoder_config()
    docs = _load_docs(cfg)
    vocab, vocab_path = _vocab_for(cfg, docs, out, model_cfg.vocab_size)
    sources = _build_sources(cfg, docs, vocab)
    start = plan.phase_start(phase)
    stop = start + plan.phases[[p.name for p in plan.phases].index(phase)].steps
    tokens_seen, optimizer = 0, None

    ckpt_path = args.resume or getattr(args, "init", None)
    if ckpt_path:
        ckpt = load_checkpoint(_existing(ckpt_path, "checkpoint"))
        if ckpt.model.config != model_cfg:
            raise UsageError("checkpoint model configuration differs from the config file")
        step = int(ckpt.meta["step"])
        if args.resume and not start <= step <= stop:
            raise UsageError(f"checkpoint at step {step} is outside the {phase} phase [{start}, {stop}]")
        if not args.resume and step != start:
            raise UsageError(f"--init needs a completed pretrain checkpoint at step {start}, got step {step}")
        model, optimizer = ckpt.model, ckpt.optimizer
        tokens_seen = int(ckpt.meta.get("tokens_seen", 0))
        if args.resume:
            for name, state in (ckpt.meta.get("sources") or {}).items():
                if state is not None and name in sources:
                    sources[name].load_state_dict(state)
            start = step
    elif phase == "anneal":
        raise UsageError("anneal needs --init <pretrain checkpoint> or --resume <anneal checkpoint>")
    else:
        model = EncoderModel.init(model_cfg, seed=cfg.seed)

    sink = JsonlSink(out / "metrics.jsonl", truncate_from_step=start)
    meta = {"vocab": str(vocab_path), "config": cfg.name}
    if cfg.tokens_per_step:
        meta["full_scale_tokens_per_step"] = cfg.tokens_per_step
    result = train(plan, model, sources, optimizer=optimizer, start_step=start, stop_step=stop, out_dir=out,
                   metrics_sink=sink, tokens_seen=tokens_seen, meta=meta)
    losses = [r["loss"] for r in result.log if r["loss"] is not None]
    summary = f"{phase}: steps {start}..{stop}"
    if losses:
        summary += f", loss {losses[0]:.4f} -> {losses[-1]:.4f}"
    print(summary + f", {len(result.checkpoints)} checkpoint(s) in {out / 'checkpoints'}")
    if args.plot:
        from .plots import loss_curve
        loss_curve(out / "metrics.jsonl", out / "loss.png")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _run_phase(args, "pretrain")


def cmd_anneal(args) -> int:
    return _run_phase(args, "anneal")


# -- finetune -------------------------------------------------------------

_PROTOCOL_KEYS = {f.name for f in dataclasses.fields(FinetuneProtocol)} | {"vocab", "num_labels", "lr_min", "lr_max"}


def _protocol(args) -> tuple[FinetuneProtocol, dict]:
    raw: dict = {}
    if args.config:
        raw = yaml.safe_load(_existing(args.config, "config").read_text(encoding="utf-8")) or {}
        unknown = sorted(set(raw) - _PROTOCOL_KEYS)
        if unknown:
            raise ConfigError([f"unknown key {k!r}" for k in unknown], args.config)
    extra = {k: raw.pop(k) for k in ("vocab", "num_labels", "lr_min", "lr_max") if k in raw}
    if args.task == "retrieval-embed":
        raw.setdefault("steps", 1000)
    if "optimizer" in raw:
        raw["optimizer"] = AdamWConfig(**raw["optimizer"])
    for key in ("steps", "batch_size"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    lo, hi = float(extra.get("lr_min", args.lr_min)), float(extra.get("lr_max", args.lr_max))
    if args.grid_size is not None:
        raw["lr_grid"] = [lo] if args.grid_size == 1 else lr_grid(lo, hi, args.grid_size)
    elif "lr_grid" not in raw:
        raw["lr_grid"] = lr_grid(lo, hi, 10)
    raw["lr_grid"] = tuple(float(x) for x in raw["lr_grid"])
    return FinetuneProtocol(**raw), extra


def _n_out(task: str, examples, requested: int | None) -> int:
    if requested:
        return requested
    if task == "seq-class":
        return int(max(ex.label for ex in examples)) + 1
    if task == "token-class":
        return max([lab for ex in examples for *_, lab in ex.entities] + [0]) + 1
    return 1


def cmd_finetune(args) -> int:
    protocol, extra = _protocol(args)
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    vocab_path = args.vocab or extra.get("vocab") or ckpt.meta.get("vocab")
    if not vocab_path:
        raise UsageError("no vocabulary: pass --vocab")
    vocab = Vocab.load(_existing(vocab_path, "vocab"))
    max_len = ckpt.model.config.max_seq_len
    train_ex = load_examples(_existing(args.train, "train file"), args.task, vocab, max_len)
    val_ex = load_examples(_existing(args.val, "validation file"), args.task, vocab, max_len)
    n_out = _n_out(args.task, train_ex + val_ex, args.num_labels or extra.get("num_labels"))
    head = TaskHead.init(args.task, ckpt.model.config.d_model, n_out, pooling=protocol.pooling, seed=args.seed)
    out = _out_dir(args.out)
    resolved = dataclasses.asdict(protocol)
    resolved.update(task=args.task, n_out=n_out, checkpoint=str(Path(args.checkpoint).resolve()),
                    vocab=str(Path(vocab_path).resolve()), seed=args.seed, lr_grid=list(protocol.lr_grid))
    _write_yaml(out / "config.resolved.yaml", resolved)
    result = finetune(ckpt.model, head, protocol, train_ex, val_ex, seed=args.seed)
    with open(out / "grid_report.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.report:
            fh.write(json.dumps(rec) + "\n")
    extra_tensors = {} if result.head.weight is None else {"head": result.head.weight.data}
    save_checkpoint(out / "best.ckpt", result.model, None,
                    {"task": args.task, "n_out": n_out, "pooling": protocol.pooling, "lr": result.best_lr,
                     "metric": result.metric, "score": result.best_score, "vocab": str(Path(vocab_path).resolve())},
                    extra_tensors=extra_tensors)
    summary = {"best_lr": result.best_lr, "metric": result.metric, "best_score": result.best_score,
               "scores": {repr(k): v for k, v in result.scores.items()}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"best lr {result.best_lr:.3g}: {result.metric} = {result.best_score:.4f} ({len(result.scores)} grid points)")
    return EXIT_OK


# -- evaluate -------------------------------------------------------------

METRICS = ("accuracy", "f1", "spearman", "ndcg@10")


def _read_jsonl(path: Path) -> dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if "example_id" not in rec:
                raise UsageError(f"{path}:{lineno}: missing field 'example_id'")
            key = str(rec["example_id"])
            if key in out:
                raise UsageError(f"{path}:{lineno}: duplicate example_id {key!r}")
            out[key] = rec
    return out


def _field(rec: dict, key: str, path: Path, ex: str):
    if key not in rec:
        raise UsageError(f"{path}: example {ex!r} lacks field {key!r}")
    return rec[key]


def cmd_evaluate(args) -> int:
    pred_path, gold_path = _existing(args.pred, "predictions"), _existing(args.gold, "gold file")
    pred, gold = _read_jsonl(pred_path), _read_jsonl(gold_path)
    if set(pred) != set(gold):
        only_p, only_g = sorted(set(pred) - set(gold)), sorted(set(gold) - set(pred))
        raise UsageError(f"example ids differ: {len(only_p)} only in predictions (e.g. {only_p[:3]}), "
                         f"{len(only_g)} only in gold (e.g. {only_g[:3]})")
    ids = sorted(gold)
    per_example: list[float] | None
    if args.metric == "accuracy":
        p = [_field(pred[i], "label", pred_path, i) for i in ids]
        g = [_field(gold[i], "label", gold_path, i) for i in ids]
        per_example = [float(a == b) for a, b in zip(p, g)]
        value = accuracy(p, g)
    elif args.metric == "spearman":
        p = [float(_field(pred[i], "score", pred_path, i)) for i in ids]
        g = [float(_field(gold[i], "score", gold_path, i)) for i in ids]
        per_example = None
        value = spearman(p, g)
    elif args.metric == "f1":
        p = [[tuple(e) for e in _field(pred[i], "entities", pred_path, i)] for i in ids]
        g = [[tuple(e) for e in _field(gold[i], "entities", gold_path, i)] for i in ids]
        per_example = [f1_entity([a], [b]) for a, b in zip(p, g)]
        value = f1_entity(p, g)
    else:
        per_example = [ndcg_at_k([str(d) for d in _field(pred[i], "ranking", pred_path, i)],
                                 {str(k): float(v) for k, v in _field(gold[i], "relevance", gold_path, i).items()}, 10)
                       for i in ids]
        value = float(np.mean(per_example))
    out = _out_dir(args.out)
    if per_example is not None:
        with open(out / "scores.jsonl", "w", encoding="utf-8") as fh:
            for i, s in zip(ids, per_example):
                lang = gold[i].get("language", args.lang)
                fh.write(json.dumps({"system": args.system, "language": lang, "example_id": i, "score": s}) + "\n")
    metrics = {"system": args.system, "metric": args.metric, "value": value, "n": len(ids)}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(f"{args.system}: {args.metric} = {value:.4f} over {len(ids)} examples")
    return EXIT_OK


# -- rank -----------------------------------------------------------------

def cmd_rank(args) -> int:
    table = ScoreTable.load([_existing(p, "score file") for p in args.scores])
    report = rank_systems(table, args.confidence, args.resamples, args.seed, args.test)
    out = _out_dir(args.out)
    with open(out / "ranking.jsonl", "w", encoding="utf-8") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec) + "\n")
    (out / "ranking.txt").write_text(report.table() + "\n")
    _write_yaml(out / "config.resolved.yaml", {"scores": [str(Path(p).resolve()) for p in args.scores],
                                                **report.meta})
    print(report.table())
    if args.plot:
        from .plots import borda_chart
        borda_chart(report, out / "borda.png")
    return EXIT_OK


# -- verify ---------------------------------------------------------------

def cmd_verify(args) -> int:
    suites = list(SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    for name in suites:
        print(f"[{name}]")
        for check in run_suite(name, args.seed):
            print("  " + check.line())
            failed += not check.ok
    print("all checks passed" if not failed else f"{failed} check(s) failed")
    return EXIT_OK if not failed else EXIT_VERIFY


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deskbert", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tokenizer-train", help="learn a byte-level BPE vocabulary")
    p.add_argument("corpus", nargs="+", help="JSONL corpus files or .txt files with one text per line")
    p.add_argument("--vocab-size", type=int, default=1024)
    p.add_argument("--out", default="vocab.txt")
    p.set_defaults(func=cmd_tokenizer_train)

    for name, func, helptext in (("pretrain", cmd_pretrain, "run the pre-training phase"),
                                 ("anneal", cmd_anneal, "run the annealing phase")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="run config YAML or a preset name")
        p.add_argument("--corpus", nargs="+", help="extra JSONL corpus files appended to the config's list")
        p.add_argument("--resume", help="checkpoint to resume this phase from")
        if name == "anneal":
            p.add_argument("--init", help="completed pre-training checkpoint")
        p.add_argument("--plot", action="store_true", help="write loss.png")
        p.set_defaults(func=func)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint over a learning-rate grid")
    p.add_argument("--config", help="protocol YAML (FinetuneProtocol fields)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=TASK_KINDS)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--vocab")
    p.add_argument("--num-labels", type=int)
    p.add_argument("--grid-size", type=int)
    p.add_argument("--lr-min", type=float, default=1e-5)
    p.add_argument("--lr-max", type=float, default=1e-4)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/finetune")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score predictions against gold labels")
    p.add_argument("--metric", required=True, choices=METRICS)
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--system", default="system")
    p.add_argument("--lang", default="all")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rank", help="significance clusters and normalized Borda ranking")
    p.add_argument("--scores", required=True, nargs="+")
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test", choices=("bootstrap", "permutation"), default="bootstrap")
    p.add_argument("--out", default="runs/rank")
    p.add_argument("--plot", action="store_true", help="write borda.png")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("verify", help="run an invariant suite")
    p.add_argument("--suite", required=True, choices=sorted(SUITES) + ["all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"deskbert: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, CorpusFormatError, CheckpointError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"deskbert: error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"deskbert: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
