"""Ancestral reverse diffusion from a conditioning embedding to a latent."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .network import PriorNetwork, apply_cfg
from .schedule import NoiseSchedule, mu_from_eps, mu_from_w0


class SamplingError(FloatingPointError):
    pass


@dataclass
class SampleTrace:
    """Initial state and every injected noise draw of one sampling run."""

    w_T: np.ndarray  # (n, D)
    noise: np.ndarray  # (T, n, D); noise[T - t] is the draw used at step t


@dataclass
class TimingReport:
    per_item: list = field(default_factory=list)
    cumulative: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.cumulative[-1] if self.cumulative else 0.0


def _as_2d(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    return e[None] if e.ndim == 1 else e


def _predict(net, w, t, e, drop, dtype):
    with torch.no_grad():
        out = net(
            torch.as_tensor(w, dtype=dtype),
            torch.full((w.shape[0],), t, dtype=torch.long),
            torch.as_tensor(e, dtype=dtype),
            drop,
        )
    return out.double().numpy()


def reverse_chain(
    net: PriorNetwork,
    e: np.ndarray,
    sched: NoiseSchedule,
    w_T: np.ndarray,
    noise_fn,
    guidance_scale: Optional[float] = 3.0,
    clamp_w0: Optional[float] = None,
    variance: str = "posterior",
    unconditional: bool = False,
) -> np.ndarray:
    """Run ``t = T..1`` from ``w_T``; ``noise_fn(t)`` supplies ``z`` for ``t > 1``.

    ``guidance_scale=None`` evaluates only the conditional branch;
    ``unconditional=True`` only the null-condition branch. Otherwise each
    step evaluates both and mixes them with :func:`apply_cfg`.
    """
    kind = net.config.param_kind
    dtype = next(net.parameters()).dtype
    sigmas = sched.sigmas(variance)
    w = np.array(w_T, dtype=np.float64)
    was_training = net.training
    net.eval()
    try:
        for t in range(sched.T, 0, -1):
            if unconditional:
                pred = _predict(net, w, t, e, True, dtype)
            elif guidance_scale is None:
                pred = _predict(net, w, t, e, False, dtype)
            else:
                cond = _predict(net, w, t, e, False, dtype)
                uncond = _predict(net, w, t, e, True, dtype)
                pred = apply_cfg(cond, uncond, guidance_scale)
            if kind == "predict_w0":
                if clamp_w0 is not None:
                    pred = np.clip(pred, -clamp_w0, clamp_w0)
                mu = mu_from_w0(w, t, pred, sched)
            else:
                mu = mu_from_eps(w, t, pred, sched)
            w = mu + sigmas[t - 1] * noise_fn(t) if t > 1 else mu
            if not np.all(np.isfinite(w)):
                raise SamplingError(f"non-finite sampler state at t={t}")
    finally:
        net.train(was_training)
    return w


def sample(
    net: PriorNetwork,
    e,
    sched: NoiseSchedule,
    guidance_scale: Optional[float] = 3.0,
    seed: int = 0,
    clamp_w0: Optional[float] = None,
    variance: str = "posterior",
    unconditional: bool = False,
    return_trace: bool = False,
    first_index: int = 0,
):
    """Sample one latent per row of ``e``.

    Row ``i`` uses its own generator seeded with ``(seed, first_index + i)``
    for both ``w_T`` and the per-step noise, so results do not depend on
    how rows are batched together.
    """
    e = _as_2d(e)
    D = net.config.latent_size
    if e.shape[1] != net.config.embed_dim:
        raise ValueError(f"embedding dim {e.shape[1]} != network embed_dim {net.config.embed_dim}")
    if guidance_scale is not None and guidance_scale < 0:
        raise ValueError(f"guidance_scale must be >= 0, got {guidance_scale!r}")
    rngs = [np.random.default_rng([seed, first_index + i]) for i in range(len(e))]
    w_T = np.stack([r.standard_normal(D) for r in rngs])
    drawn = []

    def noise_fn(t):
        z = np.stack([r.standard_normal(D) for r in rngs])
        if return_trace:
            drawn.append(z)
        return z

    w0 = reverse_chain(
        net, e, sched, w_T, noise_fn, guidance_scale, clamp_w0, variance, unconditional
    )
    if return_trace:
        drawn.append(np.zeros_like(w_T))  # t = 1 injects no noise
        return w0, SampleTrace(w_T=w_T, noise=np.stack(drawn))
    return w0


def replay(
    net: PriorNetwork,
    e,
    sched: NoiseSchedule,
    trace: SampleTrace,
    guidance_scale: Optional[float] = 3.0,
    clamp_w0: Optional[float] = None,
    variance: str = "posterior",
) -> np.ndarray:
    """Re-run a chain from a recorded :class:`SampleTrace`."""
    e = _as_2d(e)
    return reverse_chain(
        net, e, sched, trace.w_T, lambda t: trace.noise[sched.T - t],
        guidance_scale, clamp_w0, variance,
    )


def sample_batch(
    net: PriorNetwork,
    embeddings,
    sched: NoiseSchedule,
    guidance_scale: Optional[float] = 3.0,
    seed: int = 0,
    chunk_size: int = 1,
    clamp_w0: Optional[float] = None,
    text_encoder=None,
    variance: str = "posterior",
) -> tuple[np.ndarray, TimingReport]:
    """Sample a latent for each embedding (or prompt) with per-item timing.

    Strings are embedded with ``text_encoder.embed_text``. Items are
    processed ``chunk_size`` at a time; each item in a chunk is charged an
    equal share of that chunk's wall-clock time.
    """
    items = list(embeddings) if not isinstance(embeddings, np.ndarray) else embeddings
    if len(items) and isinstance(items[0], str):
        if text_encoder is None:
            from .data import BackendUnavailableError

            raise BackendUnavailableError("text prompts need a backend with embed_text")
        items = [text_encoder.embed_text(p) for p in items]
    e = _as_2d(np.asarray(items, dtype=np.float64))
    out = []
    timing = TimingReport()
    elapsed = 0.0
    for start in range(0, len(e), chunk_size):
        chunk = e[start : start + chunk_size]
        t0 = time.perf_counter()
        out.append(
            sample(net, chunk, sched, guidance_scale, seed, clamp_w0, variance, first_index=start)
        )
        dt = (time.perf_counter() - t0) / len(chunk)
        for _ in chunk:
            elapsed += dt
            timing.per_item.append(dt)
            timing.cumulative.append(elapsed)
    return np.concatenate(out) if out else np.zeros((0, net.config.latent_size)), timing
