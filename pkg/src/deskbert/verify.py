"""Invariant suites runnable on demand (``deskbert verify --suite ...``)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .datamix import Document, MixEntry, MixSampler, MixSpec, random_crop
from .encoder import EncoderConfig, EncoderModel, forward, gqa_attention, rope_rotate
from .mlm import KEEP, MASKED, RANDOM, MaskingPolicy, apply_masking, mlm_loss
from .tensor import Tensor, backward
from .trainer import full_scale_plan, wsd_lr


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


def finite_difference_check(model: EncoderModel, loss_fn: Callable[[], Tensor], h: float = 1e-3) -> dict[str, float]:
    """Relative error ||g - g_fd|| / (||g|| + ||g_fd||) per parameter, central differences."""
    model.zero_grad()
    backward(loss_fn())
    errors = {}
    with T.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * h)
            denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
            errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(analytic - numeric) / denom)
    model.zero_grad()
    return errors


def suite_grad(seed: int = 0) -> list[Check]:
    with T.precision(np.float64):
        cfg = EncoderConfig(n_layers=1, d_model=16, d_ffn=24, n_heads=4, n_kv_heads=2, vocab_size=40, init_std=0.2)
        model = EncoderModel.init(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed)
        ids = rng.integers(5, cfg.vocab_size, size=(2, 6))
        pad = np.zeros(ids.shape, dtype=bool)
        pad[1, 4:] = True
        batch = apply_masking(ids, MaskingPolicy(0.5), cfg.vocab_size, pad_mask=pad)
        errors = finite_difference_check(model, lambda: mlm_loss(forward(model, batch.input_ids, batch.pad_mask).logits, batch))
    worst = max(errors, key=errors.get)
    return [Check("finite differences, every parameter", errors[worst] < 1e-5, f"worst {worst}: {errors[worst]:.2e}")]


def _attn_weights(rng, d, kv_dim):
    return {k: Tensor(rng.normal(0, 0.3, size=s), dtype=np.float64)
            for k, s in (("wq", (d, d)), ("wk", (d, kv_dim)), ("wv", (d, kv_dim)), ("wo", (d, d)))}


def reference_mha(x, w, positions, n_heads, theta):
    """Plain per-head loop attention used as an oracle."""
    S, d = x.shape
    hd = d // n_heads
    q = rope_rotate(Tensor(x @ w["wq"].data).reshape(S, n_heads, hd), positions, theta).data
    k = rope_rotate(Tensor(x @ w["wk"].data).reshape(S, n_heads, hd), positions, theta).data
    v = (x @ w["wv"].data).reshape(S, n_heads, hd)
    out = np.zeros((S, d))
    for h in range(n_heads):
        s = q[:, h] @ k[:, h].T / math.sqrt(hd)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        out[:, h * hd:(h + 1) * hd] = p @ v[:, h]
    return out @ w["wo"].data


def suite_gqa(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    S, d, H = 7, 24, 4
    with T.precision(np.float64):
        x = rng.normal(size=(S, d))
        w = _attn_weights(rng, d, d)
        got = gqa_attention(Tensor(x), w, np.arange(S), None, H, H, 1e4).data
        ref = reference_mha(x, w, np.arange(S), H, 1e4)
        err = float(np.abs(got - ref).max())
        # group of 2: duplicating kv heads into a full MHA must agree
        kv = 2
        wg = _attn_weights(rng, d, kv * d // H)
        hd = d // H
        expand = lambda m: np.concatenate([m[:, (h // 2) * hd:(h // 2 + 1) * hd] for h in range(H)], axis=1)
        wf = {"wq": wg["wq"], "wo": wg["wo"], "wk": Tensor(expand(wg["wk"].data)), "wv": Tensor(expand(wg["wv"].data))}
        got2 = gqa_attention(Tensor(x), wg, np.arange(S), None, H, kv, 1e4).data
        err2 = float(np.abs(got2 - reference_mha(x, wf, np.arange(S), H, 1e4)).max())
    return [Check("n_kv_heads == n_heads matches multi-head oracle", err < 1e-6, f"max abs err {err:.1e}"),
            Check("grouped heads match expanded multi-head", err2 < 1e-6, f"max abs err {err2:.1e}")]


def suite_rope(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        x = Tensor(rng.normal(size=(1, 3, 8)))
        ident = float(np.abs(rope_rotate(x, np.array([0]), 1e4).data - x.data).max())
        q, k = rng.normal(size=(1, 1, 8)), rng.normal(size=(1, 1, 8))
        dots = []
        for m, n in ((3, 1), (10, 8), (102, 100)):
            rq = rope_rotate(Tensor(q), np.array([m]), 1e4).data.ravel()
            rk = rope_rotate(Tensor(k), np.array([n]), 1e4).data.ravel()
            dots.append(rq @ rk)
        spread = float(np.ptp(dots))
        v = rng.normal(size=(5, 2, 8))
        norms = np.linalg.norm(rope_rotate(Tensor(v), np.arange(5), 2.5e5).data, axis=-1)
        norm_err = float(np.abs(norms - np.linalg.norm(v, axis=-1)).max())
    return [Check("position 0 is the identity", ident < 1e-5, f"{ident:.1e}"),
            Check("scores depend only on relative offset", spread < 1e-5, f"spread {spread:.1e}"),
            Check("rotation preserves norms", norm_err < 1e-9, f"{norm_err:.1e}")]


def suite_mask(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, 100, size=(64, 40))
    ids[:, 0], ids[:, -1] = 2, 3
    pad = np.zeros(ids.shape, dtype=bool)
    pad[::3, 30:] = True
    ok_count, ok_special = True, True
    cats = []
    for step in range(50):
        b = apply_masking(ids, MaskingPolicy(0.3, seed=seed), 100, pad_mask=pad, step=step)
        n_elig = b.eligible.sum(axis=1)
        ok_count &= bool(np.all(b.selected.sum(axis=1) == np.floor(0.3 * n_elig + 0.5)))
        ok_special &= not bool((b.selected & ~b.eligible).any())
        cats.append(b.category[b.selected])
    cats = np.concatenate(cats)
    freqs = [float(np.mean(cats == c)) for c in (MASKED, RANDOM, KEEP)]
    ok_freq = abs(freqs[0] - 0.8) < 0.01 and abs(freqs[1] - 0.1) < 0.01 and abs(freqs[2] - 0.1) < 0.01
    with T.precision(np.float64):
        logits = Tensor(rng.normal(size=(10, 7)), requires_grad=True)
        mask = rng.random(10) < 0.5
        mask[0] = True
        backward(T.softmax_cross_entropy(logits, rng.integers(0, 7, 10), mask))
        zero_grad = bool(np.all(logits.grad[~mask] == 0.0))
    return [Check("exact selection count per sequence", ok_count),
            Check("special and padding tokens never selected", ok_special),
            Check("80/10/10 category frequencies within 1%", ok_freq,
                  "mask {:.3f} random {:.3f} keep {:.3f}".format(*freqs)),
            Check("unselected positions get zero gradient", zero_grad)]


def suite_mix(seed: int = 0) -> list[Check]:
    docs = [Document(text="x" * 10, lang=lang, source=src)
            for src, lang in (("a", "en"), ("b", "fr"), ("c", "de")) for _ in range(20)]
    spec = MixSpec("check", [MixEntry({"source": "a"}, 0.5), MixEntry({"source": "b"}, 0.3),
                             MixEntry({"source": "c"}, 0.2)])
    sampler = MixSampler(spec, docs, seed=seed)
    n = 100_000
    for _ in range(n):
        sampler.draw()
    shares = sampler.draws / n
    dev = float(np.abs(shares - spec.weights).max())
    rng = np.random.default_rng(seed)
    doc = np.arange(9000)
    lengths = [len(random_crop(doc, rng)) for _ in range(20_000)]
    in_range = 12 <= min(lengths) and max(lengths) <= 8192
    return [Check("mixture shares within 1% of weights", dev < 0.01, f"max deviation {dev:.4f}"),
            Check("crop lengths within [12, 8192]", in_range, f"min {min(lengths)} max {max(lengths)}")]


def suite_sched(seed: int = 0) -> list[Check]:
    plan = full_scale_plan()
    pre = plan.phases[0].steps
    last = plan.total_steps - 1
    stable = [wsd_lr(s, plan) for s in (2000, 100_000, pre - 1)]
    mid = plan.phase_start("anneal") + (plan.phases[1].steps - 1) / 2
    return [Check("step 0 is zero", wsd_lr(0, plan) == 0.0),
            Check("warmup midpoint is 5e-5", abs(wsd_lr(1000, plan) - 5e-5) < 1e-15),
            Check("stable segment is exactly 1e-4", all(v == 1e-4 for v in stable)),
            Check("anneal midpoint is 5e-5", abs(wsd_lr(mid, plan) - 5e-5) < 1e-12),
            Check("final anneal step is zero", abs(wsd_lr(last, plan)) <= 1e-12, f"{wsd_lr(last, plan):.1e}")]


SUITES: dict[str, Callable[[int], list[Check]]] = {
    "grad": suite_grad, "rope": suite_rope, "gqa": suite_gqa,
    "mask": suite_mask, "mix": suite_mix, "sched": suite_sched,
}


def run_suite(name: str, seed: int = 0) -> list[Check]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](seed)
