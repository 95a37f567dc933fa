"""Print closed-form parameter counts and full-scale step budgets for each preset.

    python scripts/param_counts.py
"""

from deskbert.config import PRESET_NAMES, load_preset
from deskbert.encoder import count_params


def main() -> None:
    print(f"{'preset':>6}  {'params':>14}  {'with head':>14}  {'tokens/step':>11}  {'pretrain':>8}  {'anneal':>6}")
    for name in PRESET_NAMES:
        cfg = load_preset(name)
        enc = cfg.encoder_config()
        per_step = cfg.tokens_per_step or cfg.batch_size * cfg.seq_len
        print(f"{name:>6}  {count_params(enc):>14,}  {count_params(enc, include_mlm_head=True):>14,}  "
              f"{per_step:>11,}  {cfg.pretrain_steps:>8}  {cfg.anneal_steps:>6}")


if __name__ == "__main__":
    main()
