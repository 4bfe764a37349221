"""Differentiable primitives, seeded samplers and the Adam optimiser.

Forward rules are written out explicitly on top of torch tensors; torch
autograd supplies the backward pass. Everything trains in float32. The
gradient tests rerun the same functions in float64 against central finite
differences.

All randomness flows through :class:`Rng`, a Philox (counter-based) stream,
so a seed reproduces the same samples on every platform. Module weights are
drawn from an ``Rng`` too; torch's global generator is never consulted.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DegenerateBatchError, DimensionError

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1

_STATE_WORDS = 23


class Rng:
    """Seeded random stream.

    ``spawn`` derives an independent child stream, which is how callers hand
    randomness to sub-computations without coupling their consumption.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, std: float = 1.0) -> torch.Tensor:
        x = self._gen.standard_normal(tuple(shape)) * std
        return torch.from_numpy(x.astype(np.float32))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def shuffled(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def dirichlet(self, alpha, size=None) -> np.ndarray:
        return self._gen.dirichlet(alpha, size=size)

    def fisher_yates(self, k: int) -> np.ndarray:
        perm = np.arange(k)
        for i in range(k - 1, 0, -1):
            j = int(self._gen.integers(0, i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def next_seed(self) -> int:
        return int(self._gen.integers(0, 2**63 - 1))

    def spawn(self) -> Rng:
        return Rng(self.next_seed())

    def get_state(self) -> np.ndarray:
        """Pack the full generator state into 23 uint32 words."""
        st = self._gen.bit_generator.state
        words = [
            np.asarray(st["state"]["counter"], dtype=np.uint64).view(np.uint32),
            np.asarray(st["state"]["key"], dtype=np.uint64).view(np.uint32),
            np.asarray(st["buffer"], dtype=np.uint64).view(np.uint32),
            np.array([st["buffer_pos"], st["has_uint32"], st["uinteger"]], dtype=np.uint32),
        ]
        out = np.concatenate(words)
        assert out.size == _STATE_WORDS
        return out

    def set_state(self, words: np.ndarray) -> None:
        words = np.asarray(words, dtype=np.uint32)
        if words.size != _STATE_WORDS:
            raise ConfigError(f"rng state needs {_STATE_WORDS} words, got {words.size}")
        st = self._gen.bit_generator.state
        st["state"]["counter"] = words[0:8].copy().view(np.uint64)
        st["state"]["key"] = words[8:12].copy().view(np.uint64)
        st["buffer"] = words[12:20].copy().view(np.uint64)
        st["buffer_pos"] = int(words[20])
        st["has_uint32"] = int(words[21])
        st["uinteger"] = int(words[22])
        self._gen.bit_generator.state = st


def sample_gaussian(rng: Rng, shape) -> torch.Tensor:
    return rng.normal(shape)


def sample_laplace(rng: Rng, shape, scale: float) -> torch.Tensor:
    """Laplace(0, scale) by inverse CDF: x = -b sign(u) ln(1 - 2|u|)."""
    if scale < 0:
        raise ConfigError(f"laplace scale must be >= 0, got {scale}")
    u = rng.random(tuple(shape)) - 0.5
    u = np.where(u == -0.5, np.nextafter(-0.5, 0.0), u)
    x = -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return torch.from_numpy(x.astype(np.float32))


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} does not match weight {tuple(w.shape)}")
    y = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {tuple(b.shape)} does not match weight {tuple(w.shape)}")
        y = y + b
    return y


def selu(x: torch.Tensor) -> torch.Tensor:
    # clamp keeps expm1 finite on the unused branch so its gradient is not nan
    neg = SELU_ALPHA * torch.expm1(torch.clamp(x, max=0.0))
    return SELU_SCALE * torch.where(x > 0, x, neg)


def logistic(x):
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def layer_norm(x: torch.Tensor, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps)


def batch_norm(
    x: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    training: bool,
    momentum: float = BATCH_NORM_MOMENTUM,
    eps: float = BATCH_NORM_EPS,
    track: bool = True,
) -> torch.Tensor:
    """Normalise the last axis with statistics pooled over every leading axis.

    In training mode the running statistics are updated in place (unbiased
    variance, as is conventional) unless ``track`` is false.
    """
    d = x.shape[-1]
    flat = x.reshape(-1, d)
    if training:
        rows = flat.shape[0]
        if rows < 2:
            raise DegenerateBatchError("batch_norm in training mode needs at least 2 rows")
        mean = flat.mean(dim=0)
        centered = flat - mean
        var = (centered * centered).mean(dim=0)
        if track:
            with torch.no_grad():
                running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
                running_var.mul_(1 - momentum).add_(momentum * var.detach() * rows / (rows - 1))
        normed = centered / torch.sqrt(var + eps)
    else:
        normed = (flat - running_mean) / torch.sqrt(running_var + eps)
    return (normed * weight + bias).reshape(x.shape)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if x.shape[dim] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def mhsa(x: torch.Tensor, w_qkv: torch.Tensor, w_attn: torch.Tensor, heads: int, norm=None) -> torch.Tensor:
    """Multi-head scaled dot-product self-attention over axis 1 of (n, t, d).

    ``norm`` is applied to the projected concatenation of heads.
    """
    n, t, d = x.shape
    if d % heads:
        raise ConfigError(f"hidden dim {d} is not divisible by {heads} heads")
    dk = d // heads
    qkv = linear(x, w_qkv).reshape(n, t, 3, heads, dk).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    weights = softmax(q @ k.transpose(-1, -2) / math.sqrt(dk), dim=-1)
    heads_out = (weights @ v).permute(0, 2, 1, 3).reshape(n, t, d)
    out = linear(heads_out, w_attn)
    return norm(out) if norm is not None else out


def init_weight(rng: Rng, fan_in: int, fan_out: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform((fan_in, fan_out), -bound, bound).astype(np.float32)
    return nn.Parameter(torch.from_numpy(w))


def init_bias(rng: Rng, fan_in: int, size: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    b = rng.uniform((size,), -bound, bound).astype(np.float32)
    return nn.Parameter(torch.from_numpy(b))


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        super().__init__()
        self.weight = init_weight(rng, d_in, d_out)
        self.bias = init_bias(rng, d_in, d_out) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class BatchNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))
        self.set_statistics = False

    def forward(self, x):
        # a single row has no spread, so it falls back to the running statistics
        if self.set_statistics and not self.training and x[..., 0].numel() > 1:
            return batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias, True, track=False)
        return batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias, self.training)


@contextmanager
def set_statistics(module: nn.Module):
    """Evaluate with the statistics of the batch at hand, leaving running stats untouched."""
    norms = [m for m in module.modules() if isinstance(m, BatchNorm)]
    for m in norms:
        m.set_statistics = True
    try:
        yield module
    finally:
        for m in norms:
            m.set_statistics = False


class Adam:
    """Adam with bias correction; gradients are cleared after each step.

    ``weight_decay`` adds an L2 term to the gradient (classic, not decoupled).
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.steps += 1
        c1 = 1 - self.beta1**self.steps
        c2 = 1 - self.beta2**self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))
        self.zero_grad()

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/steps": np.array([self.steps], dtype=np.uint32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}/m/{i}"] = m.detach().numpy().copy()
            out[f"{prefix}/v/{i}"] = v.detach().numpy().copy()
        return out

    def load_state_tensors(self, tensors: dict, prefix: str) -> None:
        self.steps = int(tensors[f"{prefix}/steps"][0])
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            m.copy_(torch.from_numpy(np.asarray(tensors[f"{prefix}/m/{i}"])))
            v.copy_(torch.from_numpy(np.asarray(tensors[f"{prefix}/v/{i}"])))


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def module_tensors(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten parameters and buffers into a name -> float32 array mapping."""
    return {f"{prefix}/{k}": v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: dict, prefix: str) -> None:
    plen = len(prefix) + 1
    state = {k[plen:]: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in tensors.items() if k.startswith(prefix + "/")}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise ConfigError(f"checkpoint is missing {sorted(missing)[:3]} under '{prefix}/'")
    module.load_state_dict(state, strict=True)


def param_digest(module_or_params) -> str:
    """Short content hash of parameter values (buffers excluded)."""
    params = module_or_params.parameters() if isinstance(module_or_params, nn.Module) else module_or_params
    h = hashlib.sha1()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]
