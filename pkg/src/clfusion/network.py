"""Causal-transformer denoiser for the latent diffusion prior.

Each sample becomes a four-token sequence::

    [condition, timestep, noised latent, query]

and the prediction is read from the query position after causal
self-attention, so the query sees every other token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

N_TOKENS = 4


@dataclass
class PriorConfig:
    latent_dim: int = 8
    embed_dim: int = 32
    param_kind: str = "predict_w0"
    depth: int = 4
    width: int = 256
    heads: int = 4
    cond_dropout_prob: float = 0.1
    extended_latent: Optional[int] = None
    num_timesteps: int = 1000

    def __post_init__(self):
        for name in ("latent_dim", "embed_dim", "depth", "width", "heads", "num_timesteps"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.width % self.heads:
            raise ValueError(f"width ({self.width}) must be divisible by heads ({self.heads})")
        if self.param_kind not in ("predict_w0", "predict_eps"):
            raise ValueError(f"param_kind must be predict_w0 or predict_eps, got {self.param_kind!r}")
        if not 0.0 <= self.cond_dropout_prob < 1.0:
            raise ValueError(f"cond_dropout_prob must lie in [0, 1), got {self.cond_dropout_prob!r}")
        if self.extended_latent is not None and self.extended_latent < 1:
            raise ValueError(f"extended_latent must be >= 1, got {self.extended_latent!r}")

    @property
    def latent_size(self) -> int:
        """Flattened latent length (layer count x latent_dim in W+ mode)."""
        return self.latent_dim * (self.extended_latent or 1)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": dict(latent_dim=8, embed_dim=32, depth=2, width=64, heads=4),
    "reference": dict(latent_dim=8, embed_dim=32, depth=4, width=256, heads=4),
    "full": dict(latent_dim=512, embed_dim=512, depth=4, width=256, heads=4),
}


def sinusoidal_features(t, dim: int) -> np.ndarray:
    """Interleaved ``(sin, cos)`` features; frequencies ``10000**(-2i/dim)``.

    Accepts a scalar or an array of timesteps and returns shape ``(..., dim)``.
    At ``t = 0`` the vector is ``(0, 1, 0, 1, ...)``.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"dim must be a positive even integer, got {dim}")
    t = np.asarray(t, dtype=np.float64)[..., None]
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    out = np.empty(t.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(t * freqs)
    out[..., 1::2] = np.cos(t * freqs)
    return out


def apply_cfg(cond_pred, uncond_pred, scale: float):
    """Classifier-free guidance: ``uncond + scale * (cond - uncond)``.

    Scales 1 and 0 return the corresponding input unchanged so that the
    guided sampler reproduces single-branch sampling bit for bit.
    """
    if tuple(cond_pred.shape) != tuple(uncond_pred.shape):
        raise ValueError(
            f"apply_cfg: shape mismatch {tuple(cond_pred.shape)} vs {tuple(uncond_pred.shape)}"
        )
    if scale == 1:
        return cond_pred
    if scale == 0:
        return uncond_pred
    return uncond_pred + scale * (cond_pred - uncond_pred)


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, 4 * width)
        self.fc2 = nn.Linear(4 * width, width)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        n, L, W = x.shape
        hd = W // self.heads
        q, k, v = self.qkv(self.norm1(x)).split(W, dim=-1)
        q = q.view(n, L, self.heads, hd).transpose(1, 2)
        k = k.view(n, L, self.heads, hd).transpose(1, 2)
        v = v.view(n, L, self.heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(n, L, W)
        x = x + self.proj(y)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class PriorNetwork(nn.Module):
    """Denoiser ``f(w_t, t, e)`` predicting either ``w_0`` or ``eps``.

    ``null_embedding`` replaces the condition wherever ``drop_cond`` is set;
    the replacement is a select, so dropped outputs do not depend on ``e``
    at all.
    """

    def __init__(self, config: PriorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c = config
        self.cond_proj = nn.Linear(c.embed_dim, c.width)
        self.time_fc1 = nn.Linear(c.width, c.width)
        self.time_fc2 = nn.Linear(c.width, c.width)
        self.latent_proj = nn.Linear(c.latent_size, c.width)
        self.query = nn.Parameter(torch.zeros(c.width))
        self.pos = nn.Parameter(torch.zeros(N_TOKENS, c.width))
        self.null_embedding = nn.Parameter(torch.zeros(c.embed_dim))
        self.blocks = nn.ModuleList(_Block(c.width, c.heads) for _ in range(c.depth))
        self.norm_out = nn.LayerNorm(c.width)
        self.head = nn.Linear(c.width, c.latent_size)
        self.register_buffer(
            "causal_mask",
            torch.triu(torch.ones(N_TOKENS, N_TOKENS, dtype=torch.bool), diagonal=1),
            persistent=False,
        )
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0) -> None:
        g = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if name == "head.weight":
                # Near-zero output head keeps early predictions small.
                p.normal_(0.0, 1e-3, generator=g)
            elif ".norm" in name or name.startswith("norm"):
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            elif p.dim() == 2 and name != "pos":
                p.normal_(0.0, 1.0 / math.sqrt(p.shape[1]), generator=g)
            else:
                p.normal_(0.0, 0.02, generator=g)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters())

    def _timesteps(self, t, n: int) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.is_floating_point():
            raise TypeError("timesteps must be integers")
        t = t.reshape(-1).expand(n) if t.numel() == 1 else t.reshape(-1)
        if t.numel() != n:
            raise ValueError(f"expected {n} timesteps, got {t.numel()}")
        if int(t.min()) < 1 or int(t.max()) > self.config.num_timesteps:
            raise ValueError(f"timestep out of range [1, {self.config.num_timesteps}]")
        return t

    def embed_timestep(self, t) -> torch.Tensor:
        """Sinusoidal features of ``t`` passed through a learned two-layer projection."""
        t = self._timesteps(t, torch.as_tensor(t).numel())
        ref = self.time_fc1.weight
        feats = torch.as_tensor(
            sinusoidal_features(t.cpu().numpy(), self.config.width), dtype=ref.dtype, device=ref.device
        )
        return self.time_fc2(F.silu(self.time_fc1(feats)))

    def forward(self, wt: torch.Tensor, t, e: torch.Tensor, drop_cond=False) -> torch.Tensor:
        c = self.config
        if wt.dim() != 2 or wt.shape[1] != c.latent_size:
            raise ValueError(f"wt must have shape (n, {c.latent_size}), got {tuple(wt.shape)}")
        n = wt.shape[0]
        if e.dim() != 2 or e.shape != (n, c.embed_dim):
            raise ValueError(f"e must have shape ({n}, {c.embed_dim}), got {tuple(e.shape)}")
        t = self._timesteps(t, n)

        drop = torch.as_tensor(drop_cond, dtype=torch.bool, device=wt.device)
        if drop.dim() == 0:
            drop = drop.expand(n)
        e = torch.where(drop[:, None], self.null_embedding.to(e.dtype).expand(n, -1), e)

        tokens = torch.stack(
            [
                self.cond_proj(e),
                self.embed_timestep(t),
                self.latent_proj(wt),
                self.query.expand(n, -1),
            ],
            dim=1,
        )
        x = tokens + self.pos
        for block in self.blocks:
            x = block(x, self.causal_mask)
        return self.head(self.norm_out(x[:, -1]))
