"""Adversarial training of the obfuscator.

Two groups of players alternate, one update per step, starting with the
estimators:

* estimators: the contrastive attacker (fresh key every step, null labels)
  and ``s`` decoders, each tied to a key drawn once and never resampled;
* the obfuscator, which minimises ``lambda_rec * L_rec - lambda_reid * L_reid``.

Every group has its own Adam state. A step is logged as one JSON line.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .attacker import Attacker, AttackerConfig, contrastive_loss
from .container import load_container, save_container
from .errors import ConfigError, DataError, TrainingDiverged
from .nn import Adam, Dense, Rng, load_module_tensors, module_tensors, param_digest
from .sau import SauStack
from .scheme import EncoderKey, Obfuscator, SchemeConfig, as_tensor, encode_images, key_from_seed, patchify, unpatchify


class Decoder(nn.Module):
    """Gated attention stack over encoded tokens, projected back to pixels."""

    def __init__(self, cfg: SchemeConfig, rng: Rng, depth: int = 3):
        super().__init__()
        self.cfg = cfg
        self.stack = SauStack(cfg.dim, depth, rng, tokens=cfg.tokens, heads=cfg.heads)
        self.out = Dense(cfg.dim, cfg.patch_dim, rng)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        c = self.cfg
        return unpatchify(self.out(self.stack(z)), c.height, c.width, c.patch)


def reconstruction_loss(images, decoders, obfuscator: Obfuscator, keys, training: bool = True) -> torch.Tensor:
    """Sum over decoders of the mean squared pixel error of D_i(T_i(x))."""
    x = as_tensor(images)
    total = x.new_zeros(())
    for decoder, key in zip(decoders, keys):
        recon = decoder(encode_images(x, obfuscator, key, training=training))
        total = total + ((recon - x) ** 2).mean()
    return total


def obfuscator_loss(l_rec, l_reid, lambda_rec: float = 20.0, lambda_reid: float = 2.0):
    return lambda_rec * l_rec - lambda_reid * l_reid


def uniform_reid_loss(b: int) -> float:
    """L_reid of a b x b batch when every pair scores 1 / b**2."""
    return 2.0 * b * float(np.log(b))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 128
    lr: float = 1e-3
    lambda_rec: float = 20.0
    lambda_reid: float = 2.0
    decoders: int = 1
    decoder_depth: int = 3
    checkpoint_every: int = 0
    attacker: AttackerConfig = field(default_factory=lambda: AttackerConfig(batch=128))

    def __post_init__(self):
        if self.decoders < 1:
            raise ConfigError(f"need at least one decoder, got {self.decoders}")
        if self.batch < 2:
            raise ConfigError(f"batch must be >= 2, got {self.batch}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        d = json.loads(text)
        d["attacker"] = AttackerConfig(**d.get("attacker", {}))
        return cls(**d)


class Trainer:
    """Holds every player, optimiser and the rng; ``step`` runs one iteration."""

    def __init__(self, images, scheme_cfg: SchemeConfig, cfg: TrainConfig, rng: Rng, log_path=None):
        self.images = np.asarray(images, dtype=np.float32)
        if self.images.shape[0] < cfg.batch:
            raise ConfigError(f"batch {cfg.batch} exceeds the {self.images.shape[0]} training images")
        self.scheme_cfg = scheme_cfg
        self.cfg = cfg
        self.rng = rng
        self.obfuscator = Obfuscator(scheme_cfg, rng.spawn())
        self.attacker = Attacker(scheme_cfg.patch_dim, scheme_cfg.dim, scheme_cfg.tokens, cfg.attacker, rng.spawn())
        self.decoder_keys = [key_from_seed(rng.next_seed(), scheme_cfg) for _ in range(cfg.decoders)]
        self.decoders = nn.ModuleList(Decoder(scheme_cfg, rng.spawn(), cfg.decoder_depth) for _ in range(cfg.decoders))
        self.opt_obfuscator = Adam(self.obfuscator.parameters(), lr=cfg.lr)
        self.opt_attacker = Adam(self.attacker.parameters(), lr=cfg.lr)
        self.opt_decoders = [Adam(d.parameters(), lr=cfg.lr) for d in self.decoders]
        self.step_count = 0
        self.optimize_estimators = True
        self.history: list[dict] = []
        self.log_path = Path(log_path) if log_path is not None else None

    def _batch(self) -> tuple[np.ndarray, EncoderKey]:
        idx = np.sort(self.rng.choice(self.images.shape[0], self.cfg.batch))
        key = key_from_seed(self.rng.next_seed(), self.scheme_cfg)
        return self.images[idx], key

    def _losses(self, x, key, through_obfuscator: bool):
        # estimator steps treat the encodings as data
        with torch.set_grad_enabled(through_obfuscator):
            z = encode_images(x, self.obfuscator, key, training=True)
            zs = [encode_images(x, self.obfuscator, k, training=True) for k in self.decoder_keys]
        l_reid = contrastive_loss(self.attacker.log_scores(patchify(x, self.scheme_cfg.patch), None, z, None))
        xt = as_tensor(x)
        l_rec = sum(((d(zi) - xt) ** 2).mean() for d, zi in zip(self.decoders, zs))
        return l_reid, l_rec

    def step(self) -> dict:
        x, key = self._batch()
        self.obfuscator.train()
        self.attacker.train()
        self.decoders.train()
        l_reid, l_rec = self._losses(x, key, not self.optimize_estimators)
        l_obf = obfuscator_loss(l_rec, l_reid, self.cfg.lambda_rec, self.cfg.lambda_reid)
        record = {
            "step": self.step_count,
            "L_reid": float(l_reid.detach()),
            "L_rec": float(l_rec.detach()),
            "L_obfuscator": float(l_obf.detach()),
            "which_updated": "estimators" if self.optimize_estimators else "obfuscator",
            "key_seed": key.seed,
        }
        if not all(np.isfinite(record[k]) for k in ("L_reid", "L_rec", "L_obfuscator")):
            self._diverged(record)
        if self.optimize_estimators:
            est = list(self.attacker.parameters()) + list(self.decoders.parameters())
            grads = torch.autograd.grad(l_reid + l_rec, est, allow_unused=True)
            _assign(est, grads)
            self.opt_attacker.step()
            for opt in self.opt_decoders:
                opt.step()
        else:
            params = list(self.obfuscator.parameters())
            _assign(params, torch.autograd.grad(l_obf, params, allow_unused=True))
            self.opt_obfuscator.step()
        self.optimize_estimators = not self.optimize_estimators
        self.step_count += 1
        self.history.append(record)
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def _diverged(self, record: dict) -> None:
        where = ""
        if self.log_path is not None:
            path = self.log_path.with_suffix(".diverged.ckpt")
            self.save_checkpoint(path)
            where = f"; state saved to {path}"
        raise TrainingDiverged(f"non-finite loss at step {record['step']}: {record}{where}")

    def run(self, checkpoint_path=None) -> list[dict]:
        while self.step_count < self.cfg.steps:
            self.step()
            every = self.cfg.checkpoint_every
            if checkpoint_path is not None and every and self.step_count % every == 0:
                self.save_checkpoint(checkpoint_path)
        self.obfuscator.eval()
        return self.history

    def digests(self) -> dict[str, str]:
        return {
            "obfuscator": param_digest(self.obfuscator),
            "attacker": param_digest(self.attacker),
            "decoders": param_digest(self.decoders),
            "decoder_keys": param_digest([k.weights for k in self.decoder_keys]),
        }

    def tensors(self) -> dict:
        out = {}
        out.update(self.obfuscator.tensors())
        out.update(self.attacker.tensors())
        out.update(module_tensors(self.decoders, "decoders"))
        for i, key in enumerate(self.decoder_keys):
            out.update({f"decoder_key/{i}/{k[4:]}": v for k, v in key.tensors().items()})
        out.update(self.opt_obfuscator.state_tensors("opt/obfuscator"))
        out.update(self.opt_attacker.state_tensors("opt/attacker"))
        for i, opt in enumerate(self.opt_decoders):
            out.update(opt.state_tensors(f"opt/decoder/{i}"))
        out["train/rng"] = self.rng.get_state()
        out["train/step"] = np.array([self.step_count, int(self.optimize_estimators)], dtype=np.uint32)
        return out

    def metadata(self) -> dict:
        meta = {"train_config": self.cfg.to_json(), "rng_seed": str(self.rng.seed)}
        meta.update(self.obfuscator.metadata())
        meta.update(self.attacker.metadata())
        return meta

    def save_checkpoint(self, path) -> None:
        save_container(path, self.tensors(), self.metadata())

    @classmethod
    def from_checkpoint(cls, path, images, log_path=None, steps: int | None = None) -> Trainer:
        """Rebuild a trainer mid-run; ``steps`` may raise the step budget."""
        tensors, meta = load_container(path)
        try:
            cfg = TrainConfig.from_json(meta["train_config"])
            scheme_cfg = SchemeConfig.from_json(meta["scheme_config"])
            seed = int(meta["rng_seed"])
        except KeyError as exc:
            raise DataError(f"{path} is not a training checkpoint (missing {exc.args[0]!r})") from None
        if steps is not None:
            cfg = replace(cfg, steps=steps)
        trainer = cls(images, scheme_cfg, cfg, Rng(seed), log_path)
        load_module_tensors(trainer.obfuscator, tensors, "scheme")
        load_module_tensors(trainer.attacker, tensors, "attacker")
        load_module_tensors(trainer.decoders, tensors, "decoders")
        for i in range(cfg.decoders):
            part = {f"key/{k}": tensors[f"decoder_key/{i}/{k}"] for k in ("weights", "perm", "seed")}
            trainer.decoder_keys[i] = EncoderKey.from_tensors(part)
        trainer.opt_obfuscator.load_state_tensors(tensors, "opt/obfuscator")
        trainer.opt_attacker.load_state_tensors(tensors, "opt/attacker")
        for i, opt in enumerate(trainer.opt_decoders):
            opt.load_state_tensors(tensors, f"opt/decoder/{i}")
        trainer.rng.set_state(tensors["train/rng"])
        step, flag = (int(v) for v in tensors["train/step"])
        trainer.step_count = step
        trainer.optimize_estimators = bool(flag)
        return trainer


def _assign(params, grads) -> None:
    for p, g in zip(params, grads):
        p.grad = g


def train_obfuscator(images, scheme_cfg: SchemeConfig, cfg: TrainConfig, rng: Rng, log_path=None) -> tuple[Obfuscator, list[dict]]:
    trainer = Trainer(images, scheme_cfg, cfg, rng, log_path)
    history = trainer.run()
    return trainer.obfuscator, history


def train_private_decoder(
    images,
    obfuscator: Obfuscator,
    key: EncoderKey,
    epochs: int,
    rng: Rng,
    batch: int = 64,
    depth: int = 3,
    lr: float = 1e-3,
) -> tuple[Decoder, dict]:
    """Fit a decoder to one fixed key from (x, T(x)) pairs; needs the key."""
    x = as_tensor(images)
    with torch.no_grad():
        z = encode_images(x, obfuscator, key)
    decoder = Decoder(obfuscator.cfg, rng.spawn(), depth)
    opt = Adam(decoder.parameters(), lr=lr)
    n = x.shape[0]
    batch = min(batch, n)
    before = decoder_mse(decoder, z, x)
    losses = []
    for _ in range(epochs):
        decoder.train()
        order = torch.from_numpy(rng.shuffled(n))
        total, steps = 0.0, 0
        for start in range(0, n - batch + 1, batch):
            idx = order[start : start + batch]
            loss = ((decoder(z[idx]) - x[idx]) ** 2).mean()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            steps += 1
        losses.append(total / max(steps, 1))
    decoder.eval()
    return decoder, {"mse_before": before, "mse_after": decoder_mse(decoder, z, x), "epoch_loss": losses}


@torch.no_grad()
def decoder_mse(decoder: Decoder, z: torch.Tensor, images) -> float:
    decoder.eval()
    x = as_tensor(images)
    return float(((decoder(z) - x) ** 2).mean())

