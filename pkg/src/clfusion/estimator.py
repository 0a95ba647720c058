"""scikit-learn style wrappers around the trainer and sampler."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .data import LatentViewDataset, pseudo_text_augment, unit_normalize
from .losses import LossWeights
from .network import PriorConfig
from .sampler import sample_batch
from .trainer import TrainConfig, Trainer


class ContrastiveLatentPrior(BaseEstimator):
    """Diffusion prior from conditioning embeddings to generator latents.

    ``fit(X, y)`` takes multi-view embeddings ``X`` of shape
    ``(n_identities, k, embed_dim)`` and the latents ``y`` of shape
    ``(n_identities, latent_dim)`` that produced them. ``predict(X)``
    samples one latent per embedding row of a 2-D ``X``.

    Parameters mirror :class:`~clfusion.trainer.TrainConfig`; ``random_state``
    seeds both initialization and training, and sampling.
    """

    def __init__(
        self,
        param_kind="predict_w0",
        depth=2,
        width=64,
        heads=4,
        cond_dropout_prob=0.1,
        schedule="linear",
        timesteps=1000,
        beta_start=1e-4,
        beta_end=0.02,
        iterations=2000,
        learning_rate=1e-3,
        n_id=16,
        k=4,
        lambda_diff=1.0,
        lambda_contrast=1.0,
        margin=0.5,
        l2_enabled=True,
        triplet_enabled=True,
        pseudo_text_xi=0.1,
        pseudo_text_fraction=0.5,
        guidance_scale=3.0,
        dtype="float32",
        random_state=0,
    ):
        self.param_kind = param_kind
        self.depth = depth
        self.width = width
        self.heads = heads
        self.cond_dropout_prob = cond_dropout_prob
        self.schedule = schedule
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.n_id = n_id
        self.k = k
        self.lambda_diff = lambda_diff
        self.lambda_contrast = lambda_contrast
        self.margin = margin
        self.l2_enabled = l2_enabled
        self.triplet_enabled = triplet_enabled
        self.pseudo_text_xi = pseudo_text_xi
        self.pseudo_text_fraction = pseudo_text_fraction
        self.guidance_scale = guidance_scale
        self.dtype = dtype
        self.random_state = random_state

    def _train_config(self, n_identities, k, latent_dim, embed_dim) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            n_id=min(self.n_id, n_identities),
            k=min(self.k, k),
            weights=LossWeights(self.lambda_diff, self.lambda_contrast, self.margin),
            l2_enabled=self.l2_enabled,
            triplet_enabled=self.triplet_enabled,
            seed=int(self.random_state or 0),
            pseudo_text_xi=self.pseudo_text_xi,
            pseudo_text_fraction=self.pseudo_text_fraction,
            dtype=self.dtype,
            prior=PriorConfig(
                latent_dim=latent_dim,
                embed_dim=embed_dim,
                param_kind=self.param_kind,
                depth=self.depth,
                width=self.width,
                heads=self.heads,
                cond_dropout_prob=self.cond_dropout_prob,
                num_timesteps=self.timesteps,
            ),
            schedule={
                "kind": self.schedule,
                "T": self.timesteps,
                "beta_start": self.beta_start,
                "beta_end": self.beta_end,
            },
        )

    def fit(self, X, y):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"X must have shape (n_identities, k, embed_dim), got {X.shape}")
        y = check_array(y, dtype=np.float64)
        check_consistent_length(X, y)
        n, k, E = X.shape
        dataset = LatentViewDataset(
            y.astype(np.float32), np.zeros((n, k, 2), np.float32), X.astype(np.float32)
        )
        self.trainer_ = Trainer(self._train_config(n, k, y.shape[1], E))
        self.loss_history_ = self.trainer_.fit(dataset)
        self.network_ = self.trainer_.net.eval()
        self.schedule_ = self.trainer_.sched
        self.n_features_in_ = E
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        latents, self.last_timing_ = sample_batch(
            self.network_, X, self.schedule_, self.guidance_scale,
            int(self.random_state or 0), chunk_size=len(X),
        )
        return latents

    def score(self, X, y):
        """Mean cosine similarity between sampled and reference latents."""
        y = check_array(y, dtype=np.float64)
        pred = self.predict(X)
        return float(np.mean(np.sum(unit_normalize(pred) * unit_normalize(y), axis=-1)))


class PseudoTextAugmenter(TransformerMixin, BaseEstimator):
    """Stateless transformer perturbing embeddings on the unit sphere."""

    def __init__(self, xi=0.1, random_state=None):
        self.xi = xi
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        return pseudo_text_augment(X, self.xi, self.random_state)
