"""Comparison encoders behind the common scheme interface.

* Dauntless-style: one random Gaussian linear map per patch, fixed per key.
* InstaHide-style: mix each image with two others, then flip pixel signs.
* DP-Simple: per-pixel Laplace noise.
* DP-Image: Laplace noise on the latent code of a convolutional autoencoder.
* Random obfuscator: the keyed obfuscation architecture, never trained.

Keyless schemes draw their randomness per call from the ``rng`` argument and
release raw labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InsufficientDataError
from .nn import Adam, Rng, load_module_tensors, module_tensors, sample_laplace
from .scheme import (
    KeyedObfuscationScheme,
    Obfuscator,
    Scheme,
    SchemeConfig,
    as_tensor,
    patchify,
)


@dataclass
class DauntlessKey:
    seed: int
    weights: torch.Tensor  # (tokens, patch_dim, patch_dim)


def dauntless_encode(images, key: DauntlessKey, cfg: SchemeConfig) -> torch.Tensor:
    tokens = patchify(images, cfg.patch)
    if key.weights.shape != (cfg.tokens, cfg.patch_dim, cfg.patch_dim):
        raise ConfigError(f"key weights {tuple(key.weights.shape)} do not fit the scheme")
    return torch.einsum("ntd,tde->nte", tokens, key.weights)


class DauntlessScheme(Scheme):
    name = "dauntless"
    keyed = True

    def sample_key(self, rng: Rng) -> DauntlessKey:
        seed = rng.next_seed()
        return DauntlessKey(seed, Rng(seed).normal((self.cfg.tokens, self.cfg.patch_dim, self.cfg.patch_dim)))

    def encode_images(self, images, key, rng=None):
        return dauntless_encode(images, key, self.cfg)


def instahide_encode(images, rng: Rng, coefficients=None, flip: bool = True) -> torch.Tensor:
    """Convex mix of each image with two distinct others, then random sign flips.

    ``coefficients`` (n, 3) overrides the flat-Dirichlet mixing weights; the
    first column weighs the image itself.
    """
    x = as_tensor(images)
    n = x.shape[0]
    if n < 3:
        raise InsufficientDataError(f"mixing needs at least 3 images, got {n}")
    partners = np.empty((n, 2), dtype=np.int64)
    for i in range(n):
        others = rng.choice(n - 1, 2)
        partners[i] = others + (others >= i)
    lam = rng.dirichlet(np.ones(3), size=n) if coefficients is None else np.asarray(coefficients, dtype=np.float64)
    lam = torch.from_numpy(lam.astype(np.float32))
    p = torch.from_numpy(partners)
    mixed = lam[:, 0, None, None] * x + lam[:, 1, None, None] * x[p[:, 0]] + lam[:, 2, None, None] * x[p[:, 1]]
    if not flip:
        return mixed
    signs = torch.from_numpy(np.where(rng.random(tuple(x.shape)) < 0.5, -1.0, 1.0).astype(np.float32))
    return mixed * signs


class InstaHideScheme(Scheme):
    name = "instahide"

    def encode_images(self, images, key, rng):
        return patchify(instahide_encode(images, rng), self.cfg.patch)


def dp_simple_encode(images, scale: float, rng: Rng) -> torch.Tensor:
    x = as_tensor(images)
    return x + sample_laplace(rng, tuple(x.shape), scale)


class DpSimpleScheme(Scheme):
    name = "dp-simple"

    def __init__(self, cfg: SchemeConfig, scale: float):
        super().__init__(cfg)
        if scale < 0:
            raise ConfigError(f"noise scale must be >= 0, got {scale}")
        self.scale = scale

    def encode_images(self, images, key, rng):
        return patchify(dp_simple_encode(images, self.scale, rng), self.cfg.patch)

    def describe(self):
        return {"name": self.name, "b": self.scale}


class DpImageAutoencoder(nn.Module):
    """Strided conv encoder to a pooled latent, transposed-conv decoder.

    One stride-2 layer per halving of the side length, capped at six; the
    decoder starts from the latent as a 1x1 map and doubles back up. The
    layer producing the latent and the decoder carry no batch norm: at 1x1
    resolution a near-constant batch has almost no variance to normalise by,
    and eval-mode outputs then blow up.
    """

    def __init__(self, size: int, rng: Rng, latent: int = 256, width: int = 16):
        super().__init__()
        if size < 2 or size & (size - 1):
            raise ConfigError(f"image side must be a power of two, got {size}")
        self.size = size
        self.latent = latent
        self.width = width
        self.layers = min(6, int(math.log2(size)))
        if 2**self.layers != size:
            raise ConfigError(f"side {size} must equal 2**layers with at most 6 layers")
        chans = [1] + [min(width * 2**i, latent) for i in range(self.layers - 1)] + [latent]
        enc = []
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            enc.append(nn.Conv2d(cin, cout, 3, stride=2, padding=1))
            if i < self.layers - 1:
                enc += [nn.LeakyReLU(0.2), nn.BatchNorm2d(cout)]
        self.encoder = nn.Sequential(*enc)
        rev = chans[::-1]
        dec = []
        for i, (cin, cout) in enumerate(zip(rev[:-1], rev[1:])):
            dec.append(nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1))
            if i < self.layers - 1:
                dec.append(nn.LeakyReLU(0.2))
        self.decoder = nn.Sequential(*dec)
        _init_from_rng(self, rng)

    def encode(self, images) -> torch.Tensor:
        x = as_tensor(images)[:, None]
        return self.encoder(x).mean(dim=(2, 3))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z[:, :, None, None])[:, 0]

    def forward(self, images):
        return self.decode(self.encode(images))

    def tensors(self) -> dict:
        return module_tensors(self, "dp_image")

    @classmethod
    def from_tensors(cls, tensors: dict, metadata: dict) -> DpImageAutoencoder:
        ae = cls(int(metadata["size"]), Rng(0), latent=int(metadata["latent"]), width=int(metadata.get("width", 16)))
        load_module_tensors(ae, tensors, "dp_image")
        ae.eval()
        return ae

    def metadata(self) -> dict:
        return {"size": str(self.size), "latent": str(self.latent), "width": str(self.width)}


def _init_from_rng(module: nn.Module, rng: Rng) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.copy_(torch.from_numpy(rng.uniform(m.weight.shape, -bound, bound).astype(np.float32)))
                m.bias.copy_(torch.from_numpy(rng.uniform(m.bias.shape, -bound, bound).astype(np.float32)))


def train_dp_image(
    images,
    epochs: int,
    rng: Rng,
    ae: DpImageAutoencoder | None = None,
    batch: int = 64,
    lr: float = 1e-3,
    holdout: float = 0.1,
) -> tuple[DpImageAutoencoder, dict]:
    """Noise-free MSE training; reports held-out MSE before and after."""
    x = as_tensor(images)
    n, h, w = x.shape
    if h != w:
        raise ConfigError(f"images must be square, got {h}x{w}")
    ae = ae or DpImageAutoencoder(h, rng.spawn())
    order = rng.shuffled(n)
    n_hold = max(1, int(round(holdout * n))) if n > 2 else 0
    hold, train = x[order[:n_hold]], x[order[n_hold:]]
    opt = Adam(ae.parameters(), lr=lr)

    def held_out_mse():
        if not n_hold:
            return float("nan")
        ae.eval()
        with torch.no_grad():
            return float(((ae(hold) - hold) ** 2).mean())

    before = held_out_mse()
    batch = min(batch, train.shape[0])
    losses = []
    for _ in range(epochs):
        ae.train()
        perm = rng.shuffled(train.shape[0])
        total = 0.0
        steps = 0
        for start in range(0, train.shape[0] - batch + 1, batch):
            xb = train[torch.from_numpy(perm[start : start + batch])]
            loss = ((ae(xb) - xb) ** 2).mean()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            steps += 1
        losses.append(total / max(steps, 1))
    _recalibrate_norms(ae, train, batch)
    after = held_out_mse()
    ae.eval()
    return ae, {"heldout_mse_before": before, "heldout_mse_after": after, "epoch_loss": losses}


@torch.no_grad()
def _recalibrate_norms(ae: DpImageAutoencoder, images: torch.Tensor, batch: int) -> None:
    """Recompute batch-norm running statistics as exact averages under the final weights.

    Momentum averages trail the weights they were collected under; on
    low-variance data that lag is amplified at every layer in eval mode.
    """
    norms = [m for m in ae.modules() if isinstance(m, nn.BatchNorm2d)]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    ae.train()
    for start in range(0, images.shape[0] - batch + 1, batch):
        ae(images[start : start + batch])
    for m in norms:
        m.momentum = 0.1
    ae.eval()


@torch.no_grad()
def dp_image_encode(ae: DpImageAutoencoder, images, scale: float, rng: Rng) -> torch.Tensor:
    ae.eval()
    z = ae.encode(images)
    z = z + sample_laplace(rng, tuple(z.shape), scale)
    return ae.decode(z).clamp(0.0, 1.0)


class DpImageScheme(Scheme):
    name = "dp-image"

    def __init__(self, cfg: SchemeConfig, ae: DpImageAutoencoder, scale: float):
        super().__init__(cfg)
        self.ae = ae
        self.scale = scale

    def encode_images(self, images, key, rng):
        return patchify(dp_image_encode(self.ae, images, self.scale, rng), self.cfg.patch)

    def describe(self):
        return {"name": self.name, "b": self.scale}


def random_obfuscator_scheme(cfg: SchemeConfig, rng: Rng, label_encoding: bool = True) -> KeyedObfuscationScheme:
    """Same architecture as the trained scheme with freshly initialised weights."""
    return KeyedObfuscationScheme(Obfuscator(cfg, rng), label_encoding=label_encoding, name="obfuscator-random")
