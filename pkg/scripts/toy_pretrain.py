"""End-to-end desk-scale run: toy corpus -> pretrain -> anneal -> loss curve.

    python scripts/toy_pretrain.py --out runs/toy --steps 200 --anneal-steps 50
"""

import argparse
import json
from pathlib import Path

import yaml

from deskbert import cli
from deskbert.config import load_preset
from make_toy_corpus import make_records


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--docs", type=int, default=400)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--anneal-steps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--plot", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = out / "corpus.jsonl"
    with open(corpus, "w", encoding="utf-8") as fh:
        for rec in make_records(args.docs, args.seed):
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    cfg = load_preset("tiny").to_dict()
    cfg.update(name="toy", corpus=[str(corpus)], out_dir=str(out), seed=args.seed,
               pretrain_steps=args.steps, anneal_steps=args.anneal_steps,
               warmup_steps=max(1, args.steps // 10), checkpoint_every=max(1, args.steps // 4))
    cfg_path = out / "toy.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg, sort_keys=False))

    plot = ["--plot"] if args.plot else []
    if cli.main(["pretrain", "--config", str(cfg_path), *plot]) != 0:
        raise SystemExit("pretraining failed")
    last = out / "checkpoints" / f"step_{args.steps:08d}.ckpt"
    if cli.main(["anneal", "--config", str(cfg_path), "--init", str(last), *plot]) != 0:
        raise SystemExit("annealing failed")


if __name__ == "__main__":
    main()
