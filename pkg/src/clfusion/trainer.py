"""Optimization loop for the contrastive latent diffusion prior."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import LatentViewDataset, TrainingBatch, make_batch
from .losses import (
    LossReport,
    LossWeights,
    diffusion_loss,
    l2_view_loss,
    total_loss,
    triplet_distances,
    triplet_loss,
    weighted_total,
)
from .network import PriorConfig, PriorNetwork
from .schedule import NoiseSchedule, build_schedule, w0_from_prediction

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "clfusion-checkpoint"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, report: Optional[dict] = None, step: Optional[int] = None):
        super().__init__(message)
        self.report = report
        self.step = step


@dataclass
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 1e-3
    n_id: int = 16
    k: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    l2_enabled: bool = True
    triplet_enabled: bool = True
    seed: int = 0
    log_interval: int = 1
    checkpoint_interval: int = 0
    pseudo_text_xi: float = 0.1
    pseudo_text_fraction: float = 0.5
    grad_clip: Optional[float] = None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    dtype: str = "float32"
    prior: PriorConfig = field(default_factory=PriorConfig)
    schedule: dict = field(
        default_factory=lambda: {"kind": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02}
    )

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.prior, dict):
            self.prior = PriorConfig(**self.prior)
        self.adam_betas = tuple(self.adam_betas)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations!r}")
        if self.n_id < 1 or self.k < 1:
            raise ValueError("n_id and k must be >= 1")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        if self.prior.num_timesteps != self.schedule["T"]:
            self.prior.num_timesteps = int(self.schedule["T"])

    @property
    def param_kind(self) -> str:
        return self.prior.param_kind

    @property
    def cond_dropout_prob(self) -> float:
        return self.prior.cond_dropout_prob

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


def mine_triplets(valid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random triplet mining over a ``(n, k)`` mask of usable views.

    Every usable view is an anchor; its positive is another usable view of
    the same identity and its negative a usable view of a different
    identity, both uniform. Returns rows ``(identity, anchor_view,
    positive_view, negative_identity, negative_view)``.
    """
    n, k = valid.shape
    anchors = np.argwhere(valid)
    if n < 2 or len(anchors) == 0:
        return np.zeros((0, 5), dtype=np.int64)
    u_pos = rng.random(len(anchors))
    u_neg = rng.random(len(anchors))
    rows = []
    for (i, a), up, un in zip(anchors, u_pos, u_neg):
        cands = np.flatnonzero(valid[i])
        cands = cands[cands != a]
        negs = anchors[anchors[:, 0] != i]
        if len(cands) == 0 or len(negs) == 0:
            continue
        j, c = negs[int(un * len(negs))]
        rows.append((i, a, cands[int(up * len(cands))], j, c))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 5)


def batch_losses(
    net: PriorNetwork,
    batch: TrainingBatch,
    sched: NoiseSchedule,
    drop: np.ndarray,
    triplets: np.ndarray,
    l2_enabled: bool = True,
    triplet_enabled: bool = True,
    margin: float = 0.5,
):
    """Differentiable ``(l_diff, l_2, l_tri)`` for a batch with fixed randomness.

    Contrastive terms act on the implied clean latent and skip views whose
    condition was dropped. Negatives are re-evaluated at the anchor's own
    ``(w_t, t)``.
    """
    ref = next(net.parameters())
    kind = net.config.param_kind
    n, k, E = batch.embeddings.shape

    def tensor(x):
        return torch.as_tensor(x, dtype=ref.dtype)

    wt = tensor(batch.wt)
    t = torch.as_tensor(batch.t, dtype=torch.long)
    wt_rep = wt.repeat_interleave(k, 0)
    t_rep = t.repeat_interleave(k, 0)
    e = tensor(batch.embeddings)
    pred = net(wt_rep, t_rep, e.reshape(n * k, E), torch.as_tensor(drop.reshape(-1)))

    target = batch.w0 if kind == "predict_w0" else batch.eps
    target = tensor(target).repeat_interleave(k, 0)
    l_diff = diffusion_loss(pred, target, kind)

    zero = pred.sum() * 0.0
    l_2, l_tri = zero, zero
    if not (l2_enabled or triplet_enabled):
        return l_diff, l_2, l_tri

    w0_hat = w0_from_prediction(pred, wt_rep, t_rep, sched, kind).reshape(n, k, -1)
    valid = torch.as_tensor(~drop)
    if l2_enabled:
        l_2 = l2_view_loss(w0_hat, valid)
    if triplet_enabled and len(triplets):
        tr = torch.as_tensor(triplets)
        i, a, p, j, c = tr.unbind(1)
        neg_pred = net(wt[i], t[i], e[j, c], False)
        neg_hat = w0_from_prediction(neg_pred, wt[i], t[i], sched, kind)
        d_pos, d_neg = triplet_distances(w0_hat[i, a], w0_hat[i, p], neg_hat)
        l_tri = triplet_loss(d_pos, d_neg, margin).mean()
    return l_diff, l_2, l_tri


class Trainer:
    """Owns the network, optimizer, schedule and the training RNG stream.

    All randomness after initialization (batch sampling, condition dropout,
    triplet mining) comes from one numpy generator whose state is saved in
    checkpoints, so a resumed run continues the exact same trajectory.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.sched = build_schedule(**config.schedule)
        self.net = PriorNetwork(config.prior, seed=config.seed).to(_DTYPES[config.dtype])
        self.optimizer = torch.optim.Adam(
            self.net.parameters(),
            lr=config.learning_rate,
            betas=config.adam_betas,
            eps=config.adam_eps,
        )
        self.rng = np.random.default_rng([config.seed, 1])
        self.step = 0
        self.history: list[LossReport] = []

    def train_step(self, batch: TrainingBatch) -> LossReport:
        cfg = self.config
        w = cfg.weights
        contrast_on = w.lambda_contrast > 0
        drop = self.rng.random((batch.n_identities, batch.k)) < cfg.cond_dropout_prob
        triplets = np.zeros((0, 5), dtype=np.int64)
        if contrast_on and cfg.triplet_enabled:
            triplets = mine_triplets(~drop, self.rng)
            if batch.n_identities < 2:
                warnings.warn("batch has a single identity; triplet term is 0", RuntimeWarning)

        self.net.train()
        l_diff, l_2, l_tri = batch_losses(
            self.net,
            batch,
            self.sched,
            drop,
            triplets,
            l2_enabled=contrast_on and cfg.l2_enabled,
            triplet_enabled=contrast_on and cfg.triplet_enabled,
            margin=w.margin,
        )
        loss = weighted_total(l_diff, l_2, l_tri, w)
        try:
            report = total_loss(l_diff.detach(), l_2.detach(), l_tri.detach(), w)
        except FloatingPointError as exc:
            raise NonFiniteLossError(
                f"step {self.step + 1}: {exc}",
                report={"l_diff": l_diff.item(), "l_2": l_2.item(), "l_tri": l_tri.item()},
                step=self.step + 1,
            ) from exc

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.net.parameters(), cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        return report

    def next_batch(self, dataset: LatentViewDataset) -> TrainingBatch:
        cfg = self.config
        return make_batch(
            dataset,
            cfg.n_id,
            cfg.k,
            self.sched,
            self.rng,
            pseudo_text_xi=cfg.pseudo_text_xi,
            pseudo_text_fraction=cfg.pseudo_text_fraction,
        )

    def fit(
        self,
        dataset: LatentViewDataset,
        iterations: Optional[int] = None,
        log_path: Optional[str | Path] = None,
        checkpoint_path: Optional[str | Path] = None,
    ) -> list[LossReport]:
        """Train until ``self.step == iterations`` (default ``config.iterations``).

        Log records are appended to ``log_path`` as JSON lines. With
        ``checkpoint_path`` set, a checkpoint is written every
        ``checkpoint_interval`` steps and once at the end.
        """
        cfg = self.config
        target = cfg.iterations if iterations is None else iterations
        if dataset.latent_size != cfg.prior.latent_size or dataset.embed_dim != cfg.prior.embed_dim:
            raise ValueError(
                f"dataset dims (latent {dataset.latent_size}, embed {dataset.embed_dim}) do not match "
                f"prior config (latent {cfg.prior.latent_size}, embed {cfg.prior.embed_dim})"
            )
        log_fh = open(log_path, "a") if log_path else None
        reports = []
        try:
            while self.step < target:
                report = self.train_step(self.next_batch(dataset))
                reports.append(report)
                self.history.append(report)
                if log_fh and (self.step % cfg.log_interval == 0 or self.step == target):
                    record = {"step": self.step, **report.to_dict(), "wall_clock": time.time()}
                    log_fh.write(json.dumps(record) + "\n")
                if (
                    checkpoint_path
                    and cfg.checkpoint_interval
                    and self.step % cfg.checkpoint_interval == 0
                ):
                    self.save(checkpoint_path)
        finally:
            if log_fh:
                log_fh.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return reports

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "train_config": self.config.to_dict(),
            "prior_config": self.config.prior.to_dict(),
            "schedule": self.sched.descriptor(),
            "params": self.net.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "step": self.step,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.state(), tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Trainer":
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
        if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if state.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {state.get('version')} is not supported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        trainer = cls(TrainConfig.from_dict(state["train_config"]))
        trainer.net.load_state_dict(state["params"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.rng.bit_generator.state = state["rng_state"]
        trainer.step = int(state["step"])
        return trainer


def load_network(path: str | Path) -> tuple[PriorNetwork, NoiseSchedule]:
    """Network and schedule from a checkpoint, for inference."""
    trainer = Trainer.load(path)
    trainer.net.eval()
    return trainer.net, trainer.sched
