"""Learn an obfuscator adversarially, then ask two questions of it.

1. Privacy: does a fresh attacker re-identify trained encodings less often
   than encodings from an untrained obfuscator?
2. Utility: can a classifier still learn the label from the encodings?

The defaults finish in a few minutes; ``--steps 2000`` matches the acceptance
run and takes about ten minutes per seed on one core.

    python demos/obfuscate_and_classify.py --steps 300
"""

import argparse
import time

import numpy as np
import torch

from neurobf.attacker import evaluate_attacker, train_attacker
from neurobf.baselines import random_obfuscator_scheme
from neurobf.data import SyntheticSpec, generate_synthetic, split
from neurobf.metrics import aggregate
from neurobf.nn import Rng
from neurobf.scheme import IdentityScheme, KeyedObfuscationScheme, SchemeConfig
from neurobf.training import TrainConfig, Trainer, uniform_reid_loss
from neurobf.utility import ClassifierConfig, run_utility


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--attack-epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    s = args.seed
    cfg = SchemeConfig()

    public = generate_synthetic(SyntheticSpec(n=512, seed=1000 + s))
    t = time.time()
    trainer = Trainer(public.images, cfg, TrainConfig(steps=args.steps), Rng(s))
    history = trainer.run()
    tail = history[-min(50, len(history)):]
    print(f"trained {args.steps} steps in {time.time() - t:.0f}s")
    print(f"  in-training attacker loss {np.mean([r['L_reid'] for r in tail]):.1f} (chance {uniform_reid_loss(128):.1f})")
    print(f"  decoder reconstruction MSE {np.mean([r['L_rec'] for r in tail]):.4f}\n")

    trained = KeyedObfuscationScheme(trainer.obfuscator.eval())
    untrained = random_obfuscator_scheme(cfg, Rng(s + 77))

    held = generate_synthetic(SyntheticSpec(n=256, seed=2000 + s))
    print("privacy against a fresh attacker (held-out images)")
    for scheme in (trained, untrained):
        att, _ = train_attacker(scheme, held.images, None, args.attack_epochs, Rng(s + 5))
        r = aggregate(evaluate_attacker(att, scheme, held.images, None, 256, 1, 3, Rng(s + 9)))
        print(f"  {scheme.name:<18} guesswork {r.guesswork.mean:8.1f}   ReID AUC {r.reid_auc.mean:.3f}")

    task = generate_synthetic(SyntheticSpec(n=512, seed=3000 + s))
    train, dev, test = split(task, (0.6, 0.2, 0.2), Rng(s))
    print("\nutility: classifier test AUC")
    for scheme in (IdentityScheme(cfg), untrained, trained):
        rep = run_utility(scheme, train, dev, test, ClassifierConfig(), Rng(s + 11))
        print(f"  {scheme.name:<18} {rep.auc:.3f}")


if __name__ == "__main__":
    main()
