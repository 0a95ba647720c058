import numpy as np
import pytest
import torch

from clfusion import evaluation
from clfusion.data import BackendUnavailableError, generate_dataset, synth_world
from clfusion.evaluation import (
    ABLATION_VARIANTS,
    REFERENCE_CLIP_SCORES,
    _invariance_from_preds,
    ablation_suite,
    clip_score,
    inter_identity_baseline,
    load_prompts,
    recovery_score,
    report_csv,
    report_hash,
    variant_config,
    view_invariance_score,
)
from clfusion.network import PRESETS, PriorConfig, PriorNetwork
from clfusion.schedule import build_schedule
from clfusion.trainer import NonFiniteLossError, TrainConfig, Trainer

from conftest import tiny_config, tiny_net


class ConstantNet(torch.nn.Module):
    """Ignores the condition: predicts half the noisy latent."""

    def __init__(self):
        super().__init__()
        self.config = PriorConfig(latent_dim=8, embed_dim=12, depth=1, width=8, heads=1)
        self.scale = torch.nn.Parameter(torch.tensor(0.5, dtype=torch.float64))

    def forward(self, wt, t, e, drop_cond=False):
        return self.scale * wt


@pytest.fixture(scope="module")
def short_sched():
    return build_schedule("linear", 50, 1e-4, 0.2)


@pytest.fixture(scope="module")
def world():
    return synth_world(0, 8, 12)


@pytest.fixture(scope="module")
def heldout(world):
    return generate_dataset(world, 64, 4, seed=2)


class TestViewInvariance:
    def test_constant_network_scores_zero(self, heldout, sched):
        assert view_invariance_score(ConstantNet(), heldout, sched, 64, 0) == 0.0

    def test_untrained_matches_inter_identity_baseline(self, sched):
        ds = generate_dataset(synth_world(0, 8, 32), 64, 4, seed=2)
        for seed in range(4):
            net = PriorNetwork(PriorConfig(**PRESETS["desk"]), seed=seed).double()
            score = view_invariance_score(net, ds, sched, 256, 0)
            base = inter_identity_baseline(net, ds, sched, 256, 0)
            assert abs(score - base) < 0.2 * base

    def test_baseline_tracks_embedding_geometry(self, sched):
        # With weak pose dependence views cluster in embedding space, and an untrained
        # network inherits that clustering without having learned anything.
        ds = generate_dataset(synth_world(0, 8, 32, pose_scale=1.0), 64, 4, seed=2)
        net = PriorNetwork(PriorConfig(**PRESETS["desk"]), seed=0).double()
        assert view_invariance_score(net, ds, sched, 256, 0) < 0.6 * inter_identity_baseline(net, ds, sched, 256, 0)

    def test_view_permutation_invariance(self):
        preds = np.random.default_rng(0).standard_normal((50, 4, 8))
        base = _invariance_from_preds(preds)
        perm = preds[:, [2, 0, 3, 1]]
        assert _invariance_from_preds(perm) == pytest.approx(base, rel=1e-10)
        # Relabeling identities reorders probes only.
        assert _invariance_from_preds(preds[::-1]) == pytest.approx(base, rel=1e-10)

    def test_pure_function_of_inputs(self, heldout, sched):
        net = tiny_net()
        assert view_invariance_score(net, heldout, sched, 32, 5) == view_invariance_score(net, heldout, sched, 32, 5)

    def test_needs_two_views(self, heldout, sched):
        one_view = heldout.subset(np.arange(4))
        one_view.embeddings = one_view.embeddings[:, :1]
        one_view.poses = one_view.poses[:, :1]
        with pytest.raises(ValueError):
            view_invariance_score(tiny_net(), one_view, sched)


class TestRecovery:
    def test_untrained_isotropic(self, heldout, sched):
        cos, l2 = recovery_score(tiny_net(dtype=torch.float32), heldout, sched, 1.0, 0)
        assert abs(cos) < 3 / np.sqrt(64 * 8)
        assert l2 > 0

    def test_permutation_control(self, world, short_sched):
        train = generate_dataset(world, 32, 4, seed=1)
        cfg = TrainConfig(iterations=400, n_id=16, k=4, prior=tiny_config(num_timesteps=50, width=32),
                          schedule={"kind": "linear", "T": 50, "beta_start": 1e-4, "beta_end": 0.2})
        tr = Trainer(cfg)
        tr.fit(train)
        net = tr.net.eval()
        matched, _ = recovery_score(net, train, tr.sched, 1.0, 0)
        perm = np.roll(np.arange(32), 7)
        mismatched, _ = recovery_score(net, train, tr.sched, 1.0, 0, permutation=perm)
        assert matched > mismatched + 0.2

    def test_empty(self, heldout, sched):
        with pytest.raises(ValueError):
            recovery_score(tiny_net(), heldout.subset(np.arange(0)), sched)


class FakeBackend:
    def __init__(self, text, image):
        self.text, self.image = text, image

    def embed_text(self, prompt):
        return self.text[prompt]

    def render(self, w, pose):
        assert np.array_equal(pose, [0.0, 0.0])
        return w

    def encode_image(self, image):
        return self.image[int(image[0])]


class TestClipScore:
    def test_identical_is_one(self):
        b = FakeBackend({"a": np.array([1.0, 2.0])}, {0: np.array([2.0, 4.0])})
        assert clip_score(b, ["a"], [np.zeros(3)]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal_is_zero(self):
        b = FakeBackend({"a": np.array([1.0, 0.0])}, {1: np.array([0.0, 3.0])})
        assert clip_score(b, ["a"], [np.ones(3)]) == 0.0

    def test_missing_backend(self):
        with pytest.raises(BackendUnavailableError):
            clip_score(None, ["a"], [np.zeros(3)])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            clip_score(FakeBackend({}, {}), ["a", "b"], [np.zeros(3)])

    def test_reference_values(self):
        assert REFERENCE_CLIP_SCORES["ours_f"] == {"stylenerf": 0.337, "eg3d": 0.291}
        assert REFERENCE_CLIP_SCORES["clip2latent"]["stylenerf"] == 0.282
        assert REFERENCE_CLIP_SCORES["optimization"]["eg3d"] == 0.343
        sn = [REFERENCE_CLIP_SCORES[k]["stylenerf"] for k in ("ours_f", "ours_no_tri", "ours_no_l2", "ours_eps")]
        assert sn == sorted(sn, reverse=True)

    def test_load_prompts(self, tmp_path):
        (tmp_path / "p.txt").write_text("a smiling man\n\n  an old woman \n")
        assert load_prompts(tmp_path / "p.txt") == ["a smiling man", "an old woman"]


@pytest.fixture(scope="module")
def setup(world):
    train = generate_dataset(world, 16, 3, seed=1)
    held = generate_dataset(world, 6, 3, seed=2)
    base = TrainConfig(iterations=3, n_id=4, k=3, prior=tiny_config(num_timesteps=20),
                       schedule={"kind": "linear", "T": 20, "beta_start": 1e-4, "beta_end": 0.2})
    return base, train, held


class TestAblation:
    def test_variant_config(self):
        base = TrainConfig(prior=tiny_config())
        assert variant_config(base, "eps").prior.param_kind == "predict_eps"
        assert variant_config(base, "no_l2").l2_enabled is False
        assert variant_config(base, "no_tri").triplet_enabled is False
        assert variant_config(base, "no_contrast").weights.lambda_contrast == 0.0
        assert base.prior.param_kind == "predict_w0" and base.weights.lambda_contrast == 1.0
        with pytest.raises(ValueError):
            variant_config(base, "bogus")

    def test_report_deterministic(self, setup):
        base, train, held = setup
        a = ablation_suite(base, train, held, seeds=[0, 1], n_probes=8)
        b = ablation_suite(base, train, held, seeds=[0, 1], n_probes=8)
        assert a["report_hash"] == b["report_hash"] == report_hash(a)
        assert len(a["results"]) == 2 * len(ABLATION_VARIANTS)
        assert set(a["per_seed"]["0"]["recovery_order"]) == set(ABLATION_VARIANTS)
        c = ablation_suite(base, train, held, seeds=[2], n_probes=8)
        assert c["report_hash"] != a["report_hash"]

    def test_divergence_reported(self, setup, monkeypatch):
        base, train, held = setup
        real_fit = Trainer.fit

        def fit(self, *args, **kw):
            if self.config.prior.param_kind == "predict_eps":
                raise NonFiniteLossError("step 1: l_diff is not finite", step=1)
            return real_fit(self, *args, **kw)

        monkeypatch.setattr(evaluation.Trainer, "fit", fit)
        rep = ablation_suite(base, train, held, seeds=[0], variants=["full", "eps"], n_probes=8)
        eps = [r for r in rep["results"] if r["variant"] == "eps"][0]
        assert "not finite" in eps["error"] and eps["recovery_cosine"] is None
        assert rep["per_seed"]["0"]["recovery_order"] == ["full"]
        csv = report_csv(rep).splitlines()
        assert csv[0].startswith("variant,seed") and len(csv) == 3
