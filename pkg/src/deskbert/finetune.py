"""Task heads, fine-tuning losses and the learning-rate grid search."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderModel, encode
from .evalstats import accuracy, f1_entity, ndcg_at_k, spearman
from .tensor import Tensor, backward, softmax_cross_entropy
from .tokenizer import BOS, EOS, PAD, Encoding, Vocab, tokens_in_span
from .trainer import AdamWConfig, OptimizerState, adamw_step

TASK_KINDS = ("seq-class", "seq-regress", "token-class", "retrieval-embed")
IGNORE = -100


def lr_grid(lo: float = 1e-5, hi: float = 1e-4, n: int = 10) -> list[float]:
    """``n`` log-spaced rates from ``lo`` to ``hi`` inclusive."""
    if not 0 < lo < hi or n < 2:
        raise ValueError(f"invalid grid: lo={lo}, hi={hi}, n={n}")
    ratio = (hi / lo) ** (1.0 / (n - 1))
    grid = [lo * ratio**i for i in range(n)]
    grid[0], grid[-1] = lo, hi
    return grid


@dataclass(frozen=True)
class FinetuneProtocol:
    steps: int = 10_000
    batch_size: int = 32
    warmup_fraction: float = 0.1
    lr_grid: tuple[float, ...] = tuple(lr_grid())
    patience_epochs: int = 1
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    tune_encoder: bool = True
    temperature: float = 0.05
    pooling: str = "mean"

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if not self.lr_grid:
            raise ValueError("empty learning-rate grid")


RETRIEVAL_PROTOCOL = FinetuneProtocol(steps=1_000)


def protocol_lr(step: int, peak: float, protocol: FinetuneProtocol) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then linear decay to zero."""
    warm = int(math.ceil(protocol.warmup_fraction * protocol.steps))
    if step < warm:
        return peak * (step + 1) / warm
    return peak * max(protocol.steps - step, 0) / max(protocol.steps - warm, 1)


# -- heads ---------------------------------------------------------------

@dataclass
class TaskHead:
    kind: str
    n_out: int
    pooling: str = "mean"
    weight: Tensor | None = None

    @classmethod
    def init(cls, kind: str, d_model: int, n_out: int = 1, pooling: str = "mean", seed: int = 0,
             std: float = 0.02, dtype=None) -> "TaskHead":
        if kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
        if pooling not in ("mean", "first"):
            raise ValueError(f"unknown pooling {pooling!r}")
        if kind == "retrieval-embed":
            return cls(kind, d_model, pooling, None)
        if kind == "seq-regress":
            n_out = 1
        rng = np.random.default_rng([seed, 7])
        w = Tensor(rng.normal(0.0, std, size=(d_model, n_out)), requires_grad=True, dtype=dtype, name="head")
        return cls(kind, n_out, pooling, w)

    def params(self) -> dict[str, Tensor]:
        return {} if self.weight is None else {"head": self.weight}

    def copy(self) -> "TaskHead":
        w = None if self.weight is None else Tensor(self.weight.data.copy(), requires_grad=True, name="head")
        return TaskHead(self.kind, self.n_out, self.pooling, w)


def pool(hidden: Tensor, pad_mask, mode: str = "mean") -> Tensor:
    """Sequence vectors from [B, S, d] hidden states."""
    if mode == "first":
        return hidden[:, 0, :]
    keep = (~np.asarray(pad_mask, dtype=bool)).astype(hidden.dtype)[..., None]
    counts = keep.sum(axis=1)
    return (hidden * Tensor(keep, dtype=hidden.dtype)).sum(axis=1) / Tensor(counts, dtype=hidden.dtype)


def head_forward(model: EncoderModel, head: TaskHead, ids, pad_mask, rope_theta: float | None = None,
                 tune_encoder: bool = True) -> Tensor:
    if tune_encoder:
        hidden = encode(model, ids, pad_mask, rope_theta)
    else:
        with T.no_grad():
            hidden = encode(model, ids, pad_mask, rope_theta)
    if head.kind == "token-class":
        return hidden @ head.weight
    pooled = pool(hidden, pad_mask, head.pooling)
    if head.kind == "retrieval-embed":
        return pooled
    return pooled @ head.weight


# -- losses --------------------------------------------------------------

def seq_losses(kind: str, predictions: Tensor, targets) -> Tensor:
    """Cross-entropy for classification, MSE for regression, token-level
    cross-entropy (ignoring positions labelled -100) for token classification."""
    targets = np.asarray(targets)
    if kind == "seq-class":
        return softmax_cross_entropy(predictions, targets.astype(np.int64))
    if kind == "seq-regress":
        pred = predictions.reshape(-1)
        if pred.shape[0] != targets.size:
            raise T.DimensionError(f"{pred.shape[0]} predictions for {targets.size} targets")
        diff = pred - Tensor(targets.reshape(-1), dtype=pred.dtype)
        return (diff * diff).mean()
    if kind == "token-class":
        K = predictions.shape[-1]
        flat = targets.reshape(-1).astype(np.int64)
        mask = flat != IGNORE
        if np.any(mask & ((flat < 0) | (flat >= K))):
            raise ValueError(f"token labels must lie in [0, {K}) or equal {IGNORE}")
        return softmax_cross_entropy(predictions.reshape(-1, K), np.where(mask, flat, 0), mask)
    raise ValueError(f"no supervised loss for task kind {kind!r}")


def _l2_normalize(x: Tensor) -> Tensor:
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(norms == 0):
        raise ValueError("cannot take cosine similarity of a zero-norm embedding")
    return x * ((x * x).sum(axis=-1, keepdims=True) ** -0.5)


def infonce_loss(query_embs: Tensor, doc_embs: Tensor, temperature: float = 0.05) -> Tensor:
    """In-batch-negative InfoNCE on cosine similarities scaled by 1/temperature."""
    if query_embs.ndim != 2 or query_embs.shape != doc_embs.shape:
        raise T.DimensionError(f"query {query_embs.shape} and document {doc_embs.shape} embeddings must be [B, d]")
    B = query_embs.shape[0]
    if B < 2:
        raise ValueError("InfoNCE needs at least two pairs for in-batch negatives")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q, d = _l2_normalize(query_embs), _l2_normalize(doc_embs)
    sims = (q @ d.T) * (1.0 / temperature)
    return softmax_cross_entropy(sims, np.arange(B))


# -- token classification inference -------------------------------------

def majority_vote(labels: Sequence[int]) -> int:
    """Most frequent label; among tied labels the one seen first wins."""
    if not len(labels):
        raise ValueError("cannot vote over an empty span")
    counts = Counter(labels)
    top = max(counts.values())
    return next(lab for lab in labels if counts[lab] == top)


def token_class_predict(token_logits, encoding: Encoding, spans: Sequence[tuple[int, int]],
                        token_offset: int = 0) -> list[int]:
    """Entity label per character span, by majority vote over its sub-token argmaxes.

    ``token_offset`` shifts encoding positions into ``token_logits`` rows (e.g. 1
    when a BOS token was prepended).
    """
    argmax = np.asarray(token_logits).argmax(axis=-1)
    out = []
    for span in spans:
        toks = tokens_in_span(encoding, span)
        if not toks:
            raise ValueError(f"span {span} covers no tokens")
        out.append(majority_vote([int(argmax[t + token_offset]) for t in toks]))
    return out


# -- task data -----------------------------------------------------------

@dataclass
class TaskExample:
    ids: np.ndarray
    label: float | int | None = None
    token_labels: np.ndarray | None = None
    entities: list[tuple[tuple[int, int], list[int], int]] = field(default_factory=list)
    doc_ids: np.ndarray | None = None
    example_id: str = ""


def _frame(ids: Sequence[int], max_len: int) -> np.ndarray:
    body = list(ids)[: max_len - 2]
    return np.array([BOS] + body + [EOS], dtype=np.int64)


def make_examples(records: Sequence[Mapping], kind: str, vocab: Vocab, max_len: int = 512,
                  outside_label: int = 0) -> list[TaskExample]:
    """Encode task records: ``text`` + ``label`` | ``score`` | ``spans``, or ``query`` + ``positive``."""
    out = []
    for n, rec in enumerate(records, start=1):
        ex_id = str(rec.get("example_id", n - 1))
        try:
            if kind == "retrieval-embed":
                q, d = rec["query"], rec["positive"]
                out.append(TaskExample(_frame(vocab.encode(q).ids, max_len),
                                       doc_ids=_frame(vocab.encode(d).ids, max_len), example_id=ex_id))
                continue
            enc = vocab.encode(rec["text"])
            ids = _frame(enc.ids, max_len)
            if kind == "seq-class":
                out.append(TaskExample(ids, label=int(rec["label"]), example_id=ex_id))
            elif kind == "seq-regress":
                out.append(TaskExample(ids, label=float(rec["score"]), example_id=ex_id))
            elif kind == "token-class":
                labels = np.full(len(ids), IGNORE, dtype=np.int64)
                labels[1:-1] = outside_label
                entities = []
                for start, end, lab in rec["spans"]:
                    toks = [t + 1 for t in tokens_in_span(enc, (int(start), int(end))) if t + 1 < len(ids) - 1]
                    if not toks:
                        continue
                    labels[toks] = int(lab)
                    entities.append(((int(start), int(end)), toks, int(lab)))
                out.append(TaskExample(ids, token_labels=labels, entities=entities, example_id=ex_id))
            else:
                raise ValueError(f"unknown task kind {kind!r}")
        except KeyError as exc:
            raise ValueError(f"record {n}: missing field {exc.args[0]!r} for task {kind}") from None
    return out


def load_examples(path: str | Path, kind: str, vocab: Vocab, max_len: int = 512) -> list[TaskExample]:
    """Read task records from JSONL; errors name the file and 1-based line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec.setdefault("example_id", str(lineno))
                out.extend(make_examples([rec], kind, vocab, max_len))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            except (ValueError, TypeError, AttributeError) as exc:
                msg = str(exc).removeprefix("record 1: ")
                raise ValueError(f"{path}:{lineno}: {msg}") from None
    return out


def _batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    pad = np.ones((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        pad[i, :len(s)] = False
    return ids, pad


def _labels_batch(examples: Sequence[TaskExample], width: int) -> np.ndarray:
    out = np.full((len(examples), width), IGNORE, dtype=np.int64)
    for i, ex in enumerate(examples):
        out[i, :len(ex.token_labels)] = ex.token_labels
    return out


def batch_loss(model: EncoderModel, head: TaskHead, batch: Sequence[TaskExample], protocol: FinetuneProtocol,
               rope_theta: float | None = None) -> Tensor:
    if head.kind == "retrieval-embed":
        qi, qp = _batch([ex.ids for ex in batch])
        di, dp = _batch([ex.doc_ids for ex in batch])
        q = head_forward(model, head, qi, qp, rope_theta, protocol.tune_encoder)
        d = head_forward(model, head, di, dp, rope_theta, protocol.tune_encoder)
        return infonce_loss(q, d, protocol.temperature)
    ids, pad = _batch([ex.ids for ex in batch])
    preds = head_forward(model, head, ids, pad, rope_theta, protocol.tune_encoder)
    if head.kind == "token-class":
        return seq_losses(head.kind, preds, _labels_batch(batch, ids.shape[1]))
    return seq_losses(head.kind, preds, [ex.label for ex in batch])


# -- evaluation ----------------------------------------------------------

METRIC_FOR_KIND = {"seq-class": "accuracy", "seq-regress": "spearman", "token-class": "f1", "retrieval-embed": "ndcg@10"}


def _predict(model, head, examples, rope_theta, batch_size=64) -> list[np.ndarray]:
    outs = []
    with T.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            ids, pad = _batch([ex.ids for ex in chunk])
            preds = head_forward(model, head, ids, pad, rope_theta).data
            outs.extend(preds[j, :len(ex.ids)] if head.kind == "token-class" else preds[j] for j, ex in enumerate(chunk))
    return outs


def _embed(model, head, seqs, rope_theta, batch_size=64) -> np.ndarray:
    outs = []
    with T.no_grad():
        for i in range(0, len(seqs), batch_size):
            ids, pad = _batch(seqs[i:i + batch_size])
            outs.append(head_forward(model, head, ids, pad, rope_theta).data)
    emb = np.concatenate(outs).astype(np.float64)
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def evaluate_head(model: EncoderModel, head: TaskHead, examples: Sequence[TaskExample],
                  rope_theta: float | None = None, outside_label: int = 0) -> float:
    """Validation metric for the head's task kind."""
    if not examples:
        raise ValueError("empty evaluation set")
    if head.kind == "retrieval-embed":
        q = _embed(model, head, [ex.ids for ex in examples], rope_theta)
        d = _embed(model, head, [ex.doc_ids for ex in examples], rope_theta)
        sims = q @ d.T
        scores = []
        for i in range(len(examples)):
            ranking = list(np.argsort(-sims[i], kind="mergesort"))
            scores.append(ndcg_at_k(ranking, {i: 1.0}, 10))
        return float(np.mean(scores))
    preds = _predict(model, head, examples, rope_theta)
    if head.kind == "seq-class":
        return accuracy([int(np.argmax(p)) for p in preds], [ex.label for ex in examples])
    if head.kind == "seq-regress":
        try:
            return spearman([float(p[0]) for p in preds], [ex.label for ex in examples])
        except ValueError:
            return 0.0
    pred_sets, gold_sets = [], []
    for p, ex in zip(preds, examples):
        argmax = p.argmax(axis=-1)
        voted = [(span, majority_vote([int(argmax[t]) for t in toks])) for span, toks, _ in ex.entities]
        pred_sets.append({(s[0], s[1], lab) for s, lab in voted if lab != outside_label})
        gold_sets.append({(s[0], s[1], lab) for s, _, lab in ex.entities})
    return f1_entity(pred_sets, gold_sets)


# -- grid search ---------------------------------------------------------

@dataclass
class FinetuneResult:
    best_lr: float
    best_score: float
    metric: str
    scores: dict[float, float]
    report: list[dict]
    model: EncoderModel
    head: TaskHead


def _run_one(model: EncoderModel, head: TaskHead, protocol: FinetuneProtocol, lr: float,
             train: Sequence[TaskExample], val: Sequence[TaskExample], seed: int, rope_theta, metric: str):
    model = model.copy()
    head = head.copy()
    params = dict(head.params())
    if protocol.tune_encoder:
        params.update(model.params)
    opt = OptimizerState(hyper=protocol.optimizer)
    n = len(train)
    bs = min(protocol.batch_size, n)
    per_epoch = math.ceil(n / bs)
    multi_epoch = protocol.steps > per_epoch
    records: list[dict] = []
    best, best_state, stale = -math.inf, None, 0

    def snapshot():
        return model.state_dict(), None if head.weight is None else head.weight.data.copy()

    order: np.ndarray = np.arange(n)
    for step in range(protocol.steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            order = np.random.default_rng([seed, epoch]).permutation(n)
        batch = [train[i] for i in order[pos * bs:(pos + 1) * bs]]
        if len(batch) < 2 and head.kind == "retrieval-embed":
            batch = [train[i] for i in order[-bs:]]
        loss = batch_loss(model, head, batch, protocol, rope_theta)
        for p in params.values():
            p.grad = None
        backward(loss)
        adamw_step(params, opt, protocol_lr(step, lr, protocol))
        last = step + 1 == protocol.steps
        if (multi_epoch and pos + 1 == per_epoch) or last:
            score = evaluate_head(model, head, val, rope_theta)
            records.append({"lr": lr, "step": step + 1, "split": "train", "metric": "loss", "value": loss.item()})
            records.append({"lr": lr, "step": step + 1, "split": "val", "metric": metric, "value": score})
            if score > best:
                best, best_state, stale = score, snapshot(), 0
            else:
                stale += 1
                if multi_epoch and stale >= protocol.patience_epochs:
                    break
    state, hw = best_state
    model.load_state_dict(state)
    if hw is not None:
        head.weight.data = hw
    return best, records, model, head


def finetune(model: EncoderModel, head: TaskHead, protocol: FinetuneProtocol, train: Sequence[TaskExample],
             val: Sequence[TaskExample], *, seed: int = 0, rope_theta: float | None = None) -> FinetuneResult:
    """Train one copy per grid learning rate; keep the one with the best validation metric.

    Ties go to the smaller learning rate, so the result does not depend on grid order.
    """
    if not train:
        raise ValueError("empty training data")
    if not val:
        raise ValueError("empty validation data")
    metric = METRIC_FOR_KIND[head.kind]
    scores: dict[float, float] = {}
    report: list[dict] = []
    best = None
    for lr in sorted(set(protocol.lr_grid)):
        score, records, m, h = _run_one(model, head, protocol, lr, train, val, seed, rope_theta, metric)
        scores[lr] = score
        report.extend(records)
        if best is None or score > best[0]:
            best = (score, lr, m, h)
    score, lr, m, h = best
    return FinetuneResult(lr, score, metric, scores, report, m, h)
