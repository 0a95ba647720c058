"""Discrete-time diffusion schedule and the closed-form algebra around it.

Timesteps are 1-based: ``t`` runs over ``1..T`` and array index ``t - 1``
holds the constants for step ``t``. The convention ``alpha_bar_0 = 1`` makes
the ``t = 1`` posterior degenerate (zero variance), so the reverse chain
ends deterministically.

All coefficients are kept in float64. The helpers accept numpy arrays or
torch tensors for the latent arguments; coefficients are cast to the dtype
of the latent they multiply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

ScheduleKind = Literal["linear", "cosine"]
ParamKind = Literal["predict_w0", "predict_eps"]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep constants of the forward process.

    ``posterior_vars[t-1]`` is the variance of ``q(w_{t-1} | w_t, w_0)``.
    """

    kind: str
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bars_prev: np.ndarray
    one_minus_alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "NoiseSchedule":
        return build_schedule(desc["kind"], desc["T"], desc["beta_start"], desc["beta_end"])

    def sigmas(self, variance: Literal["posterior", "beta"] = "posterior") -> np.ndarray:
        """Fixed reverse-process standard deviations, one per timestep."""
        if variance == "posterior":
            return np.sqrt(self.posterior_vars)
        if variance == "beta":
            return np.sqrt(self.betas)
        raise ValueError(f"variance must be 'posterior' or 'beta', got {variance!r}")

    def to_csv(self) -> str:
        lines = ["t,beta,alpha_bar,posterior_var"]
        for i in range(self.T):
            lines.append(
                f"{i + 1},{self.betas[i]!r},{self.alpha_bars[i]!r},{self.posterior_vars[i]!r}"
            )
        return "\n".join(lines) + "\n"


def _cosine_betas(T: int, max_beta: float, s: float = 0.008) -> np.ndarray:
    def f(u):
        return math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2

    betas = [min(1.0 - f(i + 1) / f(i), max_beta) for i in range(T)]
    return np.asarray(betas, dtype=np.float64)


def build_schedule(
    kind: ScheduleKind = "linear",
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Build a schedule.

    For ``kind="cosine"`` the betas follow the squared-cosine ``alpha_bar``
    curve and ``beta_end`` acts as the upper clip; ``beta_start`` is only
    validated.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ValueError(f"T must be an integer >= 1, got {T!r}")
    if not 0.0 < beta_start < 1.0:
        raise ValueError(f"beta_start must lie in (0, 1), got {beta_start!r}")
    if not 0.0 < beta_end < 1.0:
        raise ValueError(f"beta_end must lie in (0, 1), got {beta_end!r}")
    if beta_start > beta_end:
        raise ValueError(f"beta_start ({beta_start!r}) must not exceed beta_end ({beta_end!r})")

    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        betas = _cosine_betas(T, beta_end)
    else:
        raise ValueError(f"kind must be 'linear' or 'cosine', got {kind!r}")

    alphas = 1.0 - betas
    # log-space accumulation keeps 1 - alpha_bar accurate for small t
    log_alpha_bars = np.cumsum(np.log1p(-betas))
    alpha_bars = np.exp(log_alpha_bars)
    one_minus = -np.expm1(log_alpha_bars)
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    one_minus_prev = np.concatenate([[0.0], one_minus[:-1]])
    posterior_vars = one_minus_prev / one_minus * betas

    for arr in (betas, alphas, alpha_bars, alpha_bars_prev, one_minus, posterior_vars):
        arr.setflags(write=False)
    return NoiseSchedule(
        kind=kind,
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        alpha_bars_prev=alpha_bars_prev,
        one_minus_alpha_bars=one_minus,
        posterior_vars=posterior_vars,
    )


def _index(t, sched: NoiseSchedule) -> np.ndarray:
    idx = np.asarray(t)
    if not np.issubdtype(idx.dtype, np.integer):
        if isinstance(t, torch.Tensor) and not t.is_floating_point():
            idx = t.cpu().numpy()
        else:
            raise TypeError(f"timesteps must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 1 or idx.max() > sched.T):
        raise ValueError(f"timestep out of range [1, {sched.T}]: {t!r}")
    return idx - 1


def _coef(values: np.ndarray, like):
    """Broadcast per-sample coefficients against a latent of shape (..., D)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim:
        values = values.reshape(values.shape + (1,))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(values, dtype=like.dtype, device=like.device)
    return values


def _check_same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(w0, t, eps, sched: NoiseSchedule):
    """Draw ``w_t`` from ``q(w_t | w_0)`` given the noise ``eps``."""
    _check_same_shape(w0, eps, "q_sample")
    i = _index(t, sched)
    ab, omab = sched.alpha_bars[i], sched.one_minus_alpha_bars[i]
    return _coef(np.sqrt(ab), w0) * w0 + _coef(np.sqrt(omab), eps) * eps


def posterior_coefficients(t, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``(c_w0, c_wt)`` of the posterior mean ``c_w0*w0 + c_wt*wt``."""
    i = _index(t, sched)
    beta = sched.betas[i]
    omab = sched.one_minus_alpha_bars[i]
    omab_prev = np.where(i > 0, sched.one_minus_alpha_bars[np.maximum(i - 1, 0)], 0.0)
    c_w0 = np.sqrt(sched.alpha_bars_prev[i]) * beta / omab
    c_wt = np.sqrt(sched.alphas[i]) * omab_prev / omab
    return c_w0, c_wt


def mu_from_w0(wt, t, w0_pred, sched: NoiseSchedule):
    _check_same_shape(wt, w0_pred, "mu_from_w0")
    c_w0, c_wt = posterior_coefficients(t, sched)
    return _coef(c_w0, wt) * w0_pred + _coef(c_wt, wt) * wt


def posterior_mean_var(w0, wt, t, sched: NoiseSchedule):
    """Mean and variance of ``q(w_{t-1} | w_t, w_0)``."""
    mean = mu_from_w0(wt, t, w0, sched)
    var = sched.posterior_vars[_index(t, sched)]
    return mean, var


def mu_from_eps(wt, t, eps_pred, sched: NoiseSchedule):
    _check_same_shape(wt, eps_pred, "mu_from_eps")
    i = _index(t, sched)
    scale = 1.0 / np.sqrt(sched.alphas[i])
    k = sched.betas[i] / np.sqrt(sched.one_minus_alpha_bars[i])
    return _coef(scale, wt) * (wt - _coef(k, wt) * eps_pred)


def w0_from_eps(wt, t, eps_pred, sched: NoiseSchedule):
    # Divides by sqrt(alpha_bar_t), not sqrt(alpha_t): only this form inverts q_sample.
    _check_same_shape(wt, eps_pred, "w0_from_eps")
    i = _index(t, sched)
    ab, omab = sched.alpha_bars[i], sched.one_minus_alpha_bars[i]
    return (wt - _coef(np.sqrt(omab), wt) * eps_pred) / _coef(np.sqrt(ab), wt)


def eps_from_w0(wt, t, w0_pred, sched: NoiseSchedule):
    _check_same_shape(wt, w0_pred, "eps_from_w0")
    i = _index(t, sched)
    ab, omab = sched.alpha_bars[i], sched.one_minus_alpha_bars[i]
    return (wt - _coef(np.sqrt(ab), wt) * w0_pred) / _coef(np.sqrt(omab), wt)


def w0_from_prediction(pred, wt, t, sched: NoiseSchedule, param_kind: ParamKind):
    """Map a network output to its implied clean latent."""
    if param_kind == "predict_w0":
        return pred
    if param_kind == "predict_eps":
        return w0_from_eps(wt, t, pred, sched)
    raise ValueError(f"unknown param_kind {param_kind!r}")
