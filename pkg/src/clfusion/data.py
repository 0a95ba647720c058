"""Multi-view training data: backends, dataset files, augmentation and batches.

A backend turns a latent ``w`` and a camera pose into a conditioning
embedding (``encode_image(render(w, pose))``). Real generator/encoder pairs
plug in through :class:`BackendAdapter`; :class:`SyntheticBackend` is a
seeded closed-form stand-in that needs no checkpoints.

Dataset file layout (all little-endian)::

    8 bytes   magic b"CLFDSET\\0"
    uint32    format version
    uint32    header length H
    H bytes   UTF-8 JSON header (sorted keys)
    records   one per identity, float32:
              w0[latent_size], then k x (yaw, pitch, embedding[embed_dim])
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from .schedule import NoiseSchedule, q_sample

DATASET_MAGIC = b"CLFDSET\0"
DATASET_VERSION = 1
POSE_DIM = 2


class BackendUnavailableError(RuntimeError):
    """A real encoder/generator backend was required but is not available."""


class DatasetError(ValueError):
    pass


@dataclass
class CondEmbedding:
    values: np.ndarray
    source: str = "image_view"

    def __post_init__(self):
        if self.source not in ("image_view", "pseudo_text", "text"):
            raise ValueError(f"unknown embedding source {self.source!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding values must be finite")


@runtime_checkable
class BackendAdapter(Protocol):
    """What a generator + image/text encoder pair must expose."""

    latent_size: int
    embed_dim: int
    normalizes: bool
    pose_range: tuple  # ((yaw_lo, yaw_hi), (pitch_lo, pitch_hi)) in degrees

    def sample_latent(self, rng: np.random.Generator) -> np.ndarray: ...

    def render(self, w: np.ndarray, pose: np.ndarray): ...

    def encode_image(self, image) -> np.ndarray: ...

    def embed_text(self, prompt: str) -> np.ndarray: ...

    def descriptor(self) -> dict: ...


def unit_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero-norm vector")
    return x / norm


class SyntheticBackend:
    """Seeded nonlinear map standing in for generator + image encoder.

    ``g(w, p) = normalize(A tanh(B w) + C phi(p) + noise)`` where ``phi`` is
    a fixed trigonometric featurization of (yaw, pitch). ``render`` returns
    the noise-free pre-normalization vector; per-view noise is added by
    :meth:`embed_views` from the caller's generator.

    The default ``pose_scale`` makes views of one identity nearly as far
    apart as different identities (mean distance ratio about 0.87), which
    is the regime where view invariance has to be learned.
    """

    normalizes = True
    pose_range = ((-45.0, 45.0), (0.0, 0.0))

    def __init__(
        self,
        seed: int,
        latent_dim: int,
        embed_dim: int,
        noise_scale: float = 0.05,
        pose_scale: float = 4.0,
    ):
        if latent_dim < 2 or embed_dim < 2:
            raise ValueError("latent_dim and embed_dim must be >= 2")
        self.seed = int(seed)
        self.latent_size = self.latent_dim = int(latent_dim)
        self.embed_dim = int(embed_dim)
        self.noise_scale = float(noise_scale)
        self.pose_scale = float(pose_scale)
        rng = np.random.default_rng([self.seed, 0x5EED])
        self.B = rng.standard_normal((embed_dim, latent_dim)) / math.sqrt(latent_dim)
        self.A = rng.standard_normal((embed_dim, embed_dim)) / math.sqrt(embed_dim)
        self.C = rng.standard_normal((embed_dim, 6)) * (pose_scale / math.sqrt(6))

    def descriptor(self) -> dict:
        return {
            "name": "synthetic",
            "seed": self.seed,
            "latent_dim": self.latent_dim,
            "embed_dim": self.embed_dim,
            "noise_scale": self.noise_scale,
            "pose_scale": self.pose_scale,
        }

    @staticmethod
    def pose_features(pose: np.ndarray) -> np.ndarray:
        pose = np.radians(np.asarray(pose, dtype=np.float64))
        yaw, pitch = pose[..., 0], pose[..., 1]
        return np.stack(
            [np.sin(yaw), np.cos(yaw), np.sin(2 * yaw), np.cos(2 * yaw), np.sin(pitch), np.cos(pitch)],
            axis=-1,
        )

    def sample_latent(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.latent_dim)

    def sample_poses(self, rng: np.random.Generator, k: int) -> np.ndarray:
        (ylo, yhi), (plo, phi) = self.pose_range
        return np.stack([rng.uniform(ylo, yhi, k), rng.uniform(plo, phi, k)], axis=-1)

    def render(self, w: np.ndarray, pose: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        identity = self.A @ np.tanh(self.B @ w)
        return identity + self.pose_features(pose) @ self.C.T

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        return unit_normalize(np.asarray(image, dtype=np.float64))

    def embed_views(self, w, poses, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        image = self.render(w, poses)
        if rng is not None and self.noise_scale > 0:
            image = image + self.noise_scale * rng.standard_normal(image.shape)
        return self.encode_image(image)

    def embed_text(self, prompt: str) -> np.ndarray:
        raise BackendUnavailableError("the synthetic world has no text encoder")


def synth_world(seed: int, latent_dim: int, embed_dim: int, **kwargs) -> SyntheticBackend:
    return SyntheticBackend(seed, latent_dim, embed_dim, **kwargs)


@dataclass
class LatentViewDataset:
    """Identity-grouped latents with k posed views each (float32 storage)."""

    w0: np.ndarray  # (n, latent_size)
    poses: np.ndarray  # (n, k, 2)
    embeddings: np.ndarray  # (n, k, embed_dim)
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        n, k = self.embeddings.shape[:2]
        if self.w0.shape[0] != n or self.poses.shape[:2] != (n, k):
            raise DatasetError("inconsistent identity/view counts")

    @property
    def n_identities(self) -> int:
        return self.w0.shape[0]

    @property
    def k(self) -> int:
        return self.embeddings.shape[1]

    @property
    def latent_size(self) -> int:
        return self.w0.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[2]

    def subset(self, ids) -> "LatentViewDataset":
        ids = np.asarray(ids)
        return LatentViewDataset(self.w0[ids], self.poses[ids], self.embeddings[ids], dict(self.header))


def _identity_record(backend, seed: int, index: int, k: int):
    rng = np.random.default_rng([seed, index])
    w0 = np.asarray(backend.sample_latent(rng), dtype=np.float64)
    if hasattr(backend, "sample_poses"):
        poses = backend.sample_poses(rng, k)
    else:
        (ylo, yhi), (plo, phi) = backend.pose_range
        poses = np.stack([rng.uniform(ylo, yhi, k), rng.uniform(plo, phi, k)], axis=-1)
    if hasattr(backend, "embed_views"):
        emb = backend.embed_views(w0, poses, rng)
    else:
        emb = np.stack([backend.encode_image(backend.render(w0, p)) for p in poses])
    return w0, poses, emb


def generate_dataset(
    backend,
    n_identities: int,
    k: int,
    seed: int,
    path: Optional[str | Path] = None,
    workers: int = 1,
) -> LatentViewDataset:
    """Sample ``n_identities`` latents and embed ``k`` random views of each.

    Identity ``i`` draws from its own stream seeded by ``(seed, i)``, so the
    result does not depend on ``workers``.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n_identities < 1:
        raise ValueError(f"n_identities must be >= 1, got {n_identities}")

    def one(i):
        try:
            return _identity_record(backend, seed, i, k)
        except Exception as exc:
            raise DatasetError(f"backend failed on identity {i}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, range(n_identities)))
    else:
        records = [one(i) for i in range(n_identities)]

    w0 = np.stack([r[0] for r in records]).astype(np.float32)
    poses = np.stack([r[1] for r in records]).astype(np.float32)
    emb = np.stack([r[2] for r in records]).astype(np.float32)
    header = {
        "format": "clfusion-dataset",
        "version": DATASET_VERSION,
        "n_identities": int(n_identities),
        "k": int(k),
        "latent_size": int(w0.shape[1]),
        "embed_dim": int(emb.shape[2]),
        "pose_dim": POSE_DIM,
        "seed": int(seed),
        "normalized": bool(getattr(backend, "normalizes", False)),
        "backend": backend.descriptor(),
    }
    ds = LatentViewDataset(w0, poses, emb, header)
    if path is not None:
        write_dataset(ds, path)
    return ds


def write_dataset(ds: LatentViewDataset, path: str | Path) -> None:
    header = dict(ds.header)
    header.update(
        n_identities=ds.n_identities, k=ds.k, latent_size=ds.latent_size,
        embed_dim=ds.embed_dim, pose_dim=POSE_DIM, version=DATASET_VERSION,
    )
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    views = np.concatenate([ds.poses, ds.embeddings], axis=-1).reshape(ds.n_identities, -1)
    records = np.concatenate([ds.w0, views], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(records.tobytes())


def read_dataset(path: str | Path, mmap: bool = False) -> LatentViewDataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise DatasetError(f"{path}: not a dataset file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != DATASET_VERSION:
            raise DatasetError(f"{path}: unsupported dataset version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        offset = fh.tell()
    n, k = header["n_identities"], header["k"]
    d, e = header["latent_size"], header["embed_dim"]
    stride = d + k * (POSE_DIM + e)
    if mmap:
        flat = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(n, stride))
    else:
        flat = np.fromfile(path, dtype="<f4", offset=offset)
        if flat.size != n * stride:
            raise DatasetError(f"{path}: expected {n * stride} floats, found {flat.size}")
        flat = flat.reshape(n, stride)
    views = flat[:, d:].reshape(n, k, POSE_DIM + e)
    return LatentViewDataset(
        np.asarray(flat[:, :d], dtype=np.float32),
        np.asarray(views[..., :POSE_DIM], dtype=np.float32),
        np.asarray(views[..., POSE_DIM:], dtype=np.float32),
        header,
    )


def pseudo_text_augment(e_img, xi: float, seed=None):
    """Perturb image embeddings on the unit sphere to mimic text embeddings.

    ``e' = normalize(e + xi * |e| * eta / |eta|)`` with Gaussian ``eta``,
    applied row-wise. ``seed`` may be an int or a ``numpy.random.Generator``.
    A :class:`CondEmbedding` input yields a ``pseudo_text`` CondEmbedding.
    """
    if xi < 0:
        raise ValueError(f"xi must be >= 0, got {xi!r}")
    wrapped = isinstance(e_img, CondEmbedding)
    e = np.asarray(e_img.values if wrapped else e_img, dtype=np.float64)
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot augment a zero-norm embedding")
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal(e.shape)
    out = unit_normalize(e + xi * norm * unit_normalize(eta))
    return CondEmbedding(out, "pseudo_text") if wrapped else out


@dataclass
class TrainingBatch:
    identity_ids: np.ndarray  # (n,)
    view_ids: np.ndarray  # (n, k)
    w0: np.ndarray  # (n, D)
    eps: np.ndarray  # (n, D), shared by all views of an identity
    t: np.ndarray  # (n,), shared by all views of an identity
    wt: np.ndarray  # (n, D)
    embeddings: np.ndarray  # (n, k, E)
    pseudo_text: np.ndarray  # (n, k) bool

    @property
    def n_identities(self) -> int:
        return self.w0.shape[0]

    @property
    def k(self) -> int:
        return self.embeddings.shape[1]


def make_batch(
    dataset: LatentViewDataset,
    n_identities: int,
    k: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    pseudo_text_xi: float = 0.0,
    pseudo_text_fraction: float = 0.0,
) -> TrainingBatch:
    """Draw identities without replacement and one ``(eps, t)`` per identity."""
    if n_identities > dataset.n_identities:
        raise ValueError(
            f"batch needs {n_identities} identities, dataset has {dataset.n_identities}"
        )
    if k > dataset.k:
        raise ValueError(f"batch needs {k} views per identity, dataset has {dataset.k}")
    if k < 1 or n_identities < 1:
        raise ValueError("n_identities and k must be >= 1")
    ids = rng.choice(dataset.n_identities, size=n_identities, replace=False)
    view_ids = np.argsort(rng.random((n_identities, dataset.k)), axis=1)[:, :k]
    t = rng.integers(1, sched.T + 1, size=n_identities)
    w0 = dataset.w0[ids].astype(np.float64)
    eps = rng.standard_normal(w0.shape)
    emb = np.take_along_axis(
        dataset.embeddings[ids], view_ids[..., None], axis=1
    ).astype(np.float64)
    pseudo = rng.random((n_identities, k)) < pseudo_text_fraction
    if pseudo.any() and pseudo_text_xi > 0:
        emb[pseudo] = pseudo_text_augment(emb[pseudo], pseudo_text_xi, rng)
    else:
        pseudo[:] = False
    return TrainingBatch(
        identity_ids=ids,
        view_ids=view_ids,
        w0=w0,
        eps=eps,
        t=t,
        wt=q_sample(w0, t, eps, sched),
        embeddings=emb,
        pseudo_text=pseudo,
    )
