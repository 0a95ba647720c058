"""View-invariance, recovery and frontal-view similarity metrics; ablations."""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .data import BackendUnavailableError, LatentViewDataset, unit_normalize
from .network import PriorNetwork
from .sampler import sample_batch
from .schedule import NoiseSchedule, q_sample, w0_from_prediction
from .trainer import TrainConfig, Trainer

# Reference CLIP scores (frontal view) for context; not reproducible without
# pretrained generators and encoders.
REFERENCE_CLIP_SCORES = {
    "ours_f": {"stylenerf": 0.337, "eg3d": 0.291},
    "optimization": {"stylenerf": 0.358, "eg3d": 0.343},
    "clip2latent": {"stylenerf": 0.282, "eg3d": 0.245},
    "ours_eps": {"stylenerf": 0.287, "eg3d": 0.254},
    "ours_no_l2": {"stylenerf": 0.305, "eg3d": 0.272},
    "ours_no_tri": {"stylenerf": 0.311, "eg3d": 0.282},
}


def _probe_predictions(net, dataset, sched, n_probes, seed, cross_identity=False):
    """Implied clean latents for ``n_probes`` random ``(identity, t, eps)``.

    Returns ``(n_probes, k, D)``. With ``cross_identity`` the k embeddings
    come from k distinct identities instead of k views of the probed one.
    """
    rng = np.random.default_rng([seed, 2])
    n, k = dataset.n_identities, dataset.k
    ids = rng.integers(0, n, n_probes)
    t = rng.integers(1, sched.T + 1, n_probes)
    w0 = dataset.w0[ids].astype(np.float64)
    eps = rng.standard_normal(w0.shape)
    wt = q_sample(w0, t, eps, sched)
    if cross_identity:
        if n < k:
            raise ValueError("cross-identity probing needs at least k identities")
        others = np.stack([rng.choice(n, k, replace=False) for _ in range(n_probes)])
        emb = dataset.embeddings[others, rng.integers(0, k, (n_probes, k))]
    else:
        emb = dataset.embeddings[ids]
    dtype = next(net.parameters()).dtype
    kind = net.config.param_kind
    with torch.no_grad():
        wt_rep = np.repeat(wt, k, axis=0)
        t_rep = np.repeat(t, k)
        pred = net(
            torch.as_tensor(wt_rep, dtype=dtype),
            torch.as_tensor(t_rep),
            torch.as_tensor(emb.reshape(n_probes * k, -1), dtype=dtype),
            False,
        ).double().numpy()
    return w0_from_prediction(pred, wt_rep, t_rep, sched, kind).reshape(n_probes, k, -1)


def _invariance_from_preds(preds: np.ndarray) -> float:
    k = preds.shape[1]
    iu, ju = np.triu_indices(k, 1)
    pair_dist = np.linalg.norm(preds[:, iu] - preds[:, ju], axis=-1).mean()
    mean_norm = np.linalg.norm(preds, axis=-1).mean()
    if mean_norm == 0:
        return 0.0
    return float(pair_dist / mean_norm)


def view_invariance_score(
    net: PriorNetwork,
    dataset: LatentViewDataset,
    sched: NoiseSchedule,
    n_probes: int = 256,
    seed: int = 0,
) -> float:
    """Mean pairwise distance between views' predictions over mean prediction norm.

    0 means every view of a probed identity yields the same clean latent;
    lower is better.
    """
    if dataset.k < 2:
        raise ValueError("view_invariance_score needs at least 2 views per identity")
    return _invariance_from_preds(_probe_predictions(net, dataset, sched, n_probes, seed))


def inter_identity_baseline(net, dataset, sched, n_probes: int = 256, seed: int = 0) -> float:
    """Same statistic with embeddings from distinct identities at a shared ``(w_t, t)``."""
    return _invariance_from_preds(
        _probe_predictions(net, dataset, sched, n_probes, seed, cross_identity=True)
    )


def recovery_score(
    net: PriorNetwork,
    heldout: LatentViewDataset,
    sched: NoiseSchedule,
    guidance_scale: Optional[float] = 3.0,
    seed: int = 0,
    view: int = 0,
    permutation: Optional[np.ndarray] = None,
    chunk_size: int = 64,
) -> tuple[float, float]:
    """Mean cosine similarity and L2 distance between sampled and true latents.

    Each identity is conditioned on one view embedding. ``permutation``
    pairs identity ``i``'s latent with the embedding of identity
    ``permutation[i]`` (a mismatched-conditioning control).
    """
    if heldout.n_identities == 0:
        raise ValueError("recovery_score needs a non-empty dataset")
    emb = heldout.embeddings[:, view]
    if permutation is not None:
        emb = emb[np.asarray(permutation)]
    w, _ = sample_batch(net, emb, sched, guidance_scale, seed, chunk_size=chunk_size)
    w0 = heldout.w0.astype(np.float64)
    cos = np.sum(unit_normalize(w) * unit_normalize(w0), axis=-1)
    l2 = np.linalg.norm(w - w0, axis=-1)
    return float(cos.mean()), float(l2.mean())


def clip_score(backend, prompts: Sequence[str], latents, frontal_pose=(0.0, 0.0)) -> float:
    """Mean cosine between prompt text embeddings and frontal-view image embeddings."""
    if backend is None:
        raise BackendUnavailableError("clip_score needs a real text/image backend (integration mode)")
    if len(prompts) != len(latents):
        raise ValueError("prompts and latents must have the same length")
    pose = np.asarray(frontal_pose, dtype=np.float64)
    scores = []
    for prompt, w in zip(prompts, latents):
        txt = unit_normalize(np.asarray(backend.embed_text(prompt), dtype=np.float64))
        img = unit_normalize(np.asarray(backend.encode_image(backend.render(w, pose)), dtype=np.float64))
        scores.append(float(txt @ img))
    return float(np.mean(scores))


def load_prompts(path) -> list[str]:
    """One prompt per non-empty line."""
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


ABLATION_VARIANTS = ("full", "eps", "no_l2", "no_tri", "no_contrast")


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    cfg = copy.deepcopy(base)
    if variant == "full":
        pass
    elif variant == "eps":
        cfg.prior.param_kind = "predict_eps"
    elif variant == "no_l2":
        cfg.l2_enabled = False
    elif variant == "no_tri":
        cfg.triplet_enabled = False
    elif variant == "no_contrast":
        cfg.weights.lambda_contrast = 0.0
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return cfg


@dataclass
class VariantResult:
    variant: str
    seed: int
    view_invariance: Optional[float]
    recovery_cosine: Optional[float]
    recovery_l2: Optional[float]
    final_loss: Optional[float]
    error: Optional[str] = None
    seconds: float = 0.0


def evaluate_network(net, sched, train_ds, heldout, guidance_scale, seed, n_probes) -> dict:
    inv = view_invariance_score(net, heldout, sched, n_probes, seed)
    cos, l2 = recovery_score(net, heldout, sched, guidance_scale, seed)
    train_cos, _ = recovery_score(net, train_ds.subset(np.arange(min(64, train_ds.n_identities))),
                                  sched, guidance_scale, seed)
    return {
        "view_invariance": inv,
        "recovery_cosine": cos,
        "recovery_l2": l2,
        "train_recovery_cosine": train_cos,
    }


def ablation_suite(
    base: TrainConfig,
    train_ds: LatentViewDataset,
    heldout: LatentViewDataset,
    seeds: Sequence[int],
    variants: Sequence[str] = ABLATION_VARIANTS,
    guidance_scale: Optional[float] = 1.0,
    n_probes: int = 256,
) -> dict:
    """Train every variant on every seed and rank them.

    A diverging variant is recorded with its error instead of aborting
    the suite.
    """
    results = []
    for seed in seeds:
        for variant in variants:
            cfg = variant_config(base, variant)
            cfg.seed = int(seed)
            t0 = time.perf_counter()
            try:
                trainer = Trainer(cfg)
                reports = trainer.fit(train_ds)
                net = trainer.net.eval()
                inv = view_invariance_score(net, heldout, trainer.sched, n_probes, seed)
                cos, l2 = recovery_score(net, heldout, trainer.sched, guidance_scale, seed)
                results.append(VariantResult(variant, int(seed), inv, cos, l2, reports[-1].l_total))
            except (FloatingPointError, RuntimeError) as exc:
                results.append(VariantResult(variant, int(seed), None, None, None, None, str(exc)))
            results[-1].seconds = time.perf_counter() - t0
    return build_ablation_report(results, variants, seeds, base)


def _rank(values: dict, reverse: bool) -> list[str]:
    ok = {k: v for k, v in values.items() if v is not None}
    return sorted(ok, key=lambda k: ok[k], reverse=reverse)


def build_ablation_report(results, variants, seeds, base: TrainConfig) -> dict:
    per_seed = {}
    for seed in seeds:
        rows = {r.variant: r for r in results if r.seed == seed}
        per_seed[str(seed)] = {
            "recovery_order": _rank({v: rows[v].recovery_cosine for v in rows}, reverse=True),
            "invariance_order": _rank({v: rows[v].view_invariance for v in rows}, reverse=False),
        }
    mean = {}
    for v in variants:
        rs = [r for r in results if r.variant == v and r.error is None]
        mean[v] = {
            "view_invariance": float(np.mean([r.view_invariance for r in rs])) if rs else None,
            "recovery_cosine": float(np.mean([r.recovery_cosine for r in rs])) if rs else None,
        }
    report = {
        "config": base.to_dict(),
        "seeds": [int(s) for s in seeds],
        "variants": list(variants),
        "results": [
            {k: v for k, v in r.__dict__.items() if k != "seconds"} for r in results
        ],
        "per_seed": per_seed,
        "mean": mean,
        "reference_clip_scores": REFERENCE_CLIP_SCORES,
    }
    report["report_hash"] = report_hash(report)
    report["timing_seconds"] = {f"{r.variant}/{r.seed}": r.seconds for r in results}
    return report


def report_hash(report: dict) -> str:
    """SHA-256 over the deterministic part of a report (timings excluded)."""
    body = {k: v for k, v in report.items() if k not in ("report_hash", "timing_seconds")}
    blob = json.dumps(body, sort_keys=True, default=repr).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def report_csv(report: dict) -> str:
    lines = ["variant,seed,view_invariance,recovery_cosine,recovery_l2,final_loss,error"]
    for r in report["results"]:
        lines.append(
            ",".join(
                "" if r[k] is None else str(r[k])
                for k in ("variant", "seed", "view_invariance", "recovery_cosine", "recovery_l2", "final_loss", "error")
            )
        )
    return "\n".join(lines) + "\n"
