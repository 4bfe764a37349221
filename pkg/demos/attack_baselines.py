"""Train a re-identification attacker against a few non-learned encodings.

Identity and the fixed-projection scheme leak everything; Laplace pixel noise
starts to hurt the attacker only once the scale approaches the pixel range.

    python demos/attack_baselines.py --epochs 60 --n 128
"""

import argparse
import time

import torch

from neurobf.attacker import evaluate_attacker, train_attacker
from neurobf.baselines import DauntlessScheme, DpSimpleScheme
from neurobf.data import SyntheticSpec, generate_synthetic
from neurobf.metrics import aggregate
from neurobf.nn import Rng
from neurobf.scheme import IdentityScheme, SchemeConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = SchemeConfig()
    ds = generate_synthetic(SyntheticSpec(n=args.n, seed=args.seed))
    schemes = [IdentityScheme(cfg), DauntlessScheme(cfg)] + [DpSimpleScheme(cfg, b) for b in (0.05, 0.2, 0.8)]

    print(f"{'scheme':<16}{'b':>6}{'guesswork':>12}{'ReID AUC':>10}{'secs':>7}")
    for scheme in schemes:
        t = time.time()
        att, _ = train_attacker(scheme, ds.images, None, args.epochs, Rng(args.seed + 1))
        trials = evaluate_attacker(att, scheme, ds.images, None, min(64, args.n), 2, 2, Rng(args.seed + 2))
        r = aggregate(trials, scheme.name)
        b = f"{scheme.scale:.2f}" if hasattr(scheme, "scale") else "-"
        print(f"{scheme.name:<16}{b:>6}{r.guesswork.mean:>12.2f}{r.reid_auc.mean:>10.3f}{time.time() - t:>7.0f}")


if __name__ == "__main__":
    main()
