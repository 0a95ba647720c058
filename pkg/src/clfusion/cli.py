"""Command-line entry point: ``clfusion <subcommand> ...``.

Subcommands: gen-data, train, sample, eval, inspect-schedule. Exit codes:
0 success, 1 configuration or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError
from .data import BackendUnavailableError, DatasetError, generate_dataset, read_dataset, synth_world
from .schedule import build_schedule

log = logging.getLogger("clfusion")

LATENT_MAGIC = b"CLFLAT\0\0"
LATENT_VERSION = 1


def write_latents(path, latents: np.ndarray, header: dict) -> None:
    """Latent file: magic, uint32 version, uint32 header length, JSON header, float32 rows."""
    latents = np.asarray(latents, dtype="<f4")
    header = dict(header, dim=int(latents.shape[1]), count=int(latents.shape[0]))
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC)
        fh.write(struct.pack("<II", LATENT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(latents.tobytes())


def read_latents(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(LATENT_MAGIC)) != LATENT_MAGIC:
            raise ValueError(f"{path}: not a latent file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != LATENT_VERSION:
            raise ValueError(f"{path}: unsupported latent file version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(header["count"], header["dim"]), header


def _world(cfg: dict):
    d = cfg["data"]
    return synth_world(
        d["world_seed"], cfg["prior"]["latent_dim"], cfg["prior"]["embed_dim"],
        noise_scale=d["noise_scale"], pose_scale=d["pose_scale"],
    )


def cmd_gen_data(args, cfg) -> int:
    if args.backend != "synthetic":
        raise BackendUnavailableError(f"backend {args.backend!r} is not installed; only 'synthetic' ships")
    d = cfg["data"]
    n = args.n_identities or (d["n_heldout"] if args.heldout else d["n_identities"])
    seed = args.seed if args.seed is not None else (d["heldout_seed"] if args.heldout else d["seed"])
    ds = generate_dataset(_world(cfg), n, args.k or d["k"], seed)
    ds.header["effective_config"] = cfg
    from .data import write_dataset

    write_dataset(ds, args.out)
    print(f"wrote {ds.n_identities} identities x {ds.k} views to {args.out}")
    return 0


def cmd_train(args, cfg) -> int:
    from .trainer import Trainer

    dataset = read_dataset(args.data)
    if args.resume:
        trainer = Trainer.load(args.resume)
        # The effective config decides how far to go; everything else comes from the checkpoint.
        trainer.config.iterations = cfg["train"]["iterations"]
    else:
        trainer = Trainer(config_mod.train_config(cfg))
    trainer.fit(dataset, log_path=args.log, checkpoint_path=args.out)
    # Echo provenance next to the checkpoint.
    Path(str(args.out) + ".config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    last = trainer.history[-1] if trainer.history else None
    print(f"trained to step {trainer.step}; final loss {last.l_total if last else float('nan'):.6f}")
    return 0


def _load_embeddings(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".npy"):
        return np.load(path)
    return read_dataset(path).embeddings[:, 0]


def cmd_sample(args, cfg) -> int:
    from .sampler import sample_batch
    from .trainer import load_network

    net, sched = load_network(args.checkpoint)
    scale = args.guidance if args.guidance is not None else cfg["sample"]["guidance_scale"]
    if args.prompt:
        embeddings = [args.prompt]
        backend = _world(cfg)
    else:
        embeddings = _load_embeddings(args.embeddings)
        backend = None
    latents, timing = sample_batch(
        net, embeddings, sched, scale, args.seed, clamp_w0=cfg["sample"]["clamp_w0"],
        text_encoder=backend, variance=cfg["sample"]["variance"],
    )
    write_latents(
        args.out, latents,
        {"seed": args.seed, "guidance_scale": scale, "effective_config": cfg},
    )
    print(f"sampled {len(latents)} latents in {timing.total:.2f}s -> {args.out}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .evaluation import ablation_suite, evaluate_network, report_csv, report_hash
    from .trainer import Trainer

    train_ds = read_dataset(args.data)
    heldout = read_dataset(args.heldout)
    e = cfg["eval"]
    if args.ablation:
        base = Trainer.load(args.checkpoint).config if args.checkpoint else config_mod.train_config(cfg)
        report = ablation_suite(
            base, train_ds, heldout, e["seeds"], e["variants"], e["guidance_scale"], e["n_probes"]
        )
        csv = report_csv(report)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint unless --ablation is given")
        trainer = Trainer.load(args.checkpoint)
        net = trainer.net.eval()
        scores = evaluate_network(
            net, trainer.sched, train_ds, heldout, e["guidance_scale"], e["seeds"][0], e["n_probes"]
        )
        report = {"scores": scores, "checkpoint_step": trainer.step, "seeds": e["seeds"]}
        report["report_hash"] = report_hash(report)
        csv = "metric,value\n" + "".join(f"{k},{v}\n" for k, v in scores.items())
    report["effective_config"] = cfg
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    Path(args.csv or str(Path(args.out).with_suffix(".csv"))).write_text(csv)
    print(f"report_hash {report['report_hash']}")
    return 0


def cmd_inspect_schedule(args, cfg) -> int:
    s = cfg["schedule"]
    sched = build_schedule(
        args.kind or s["kind"],
        args.T if args.T is not None else s["T"],
        args.beta_start if args.beta_start is not None else s["beta_start"],
        args.beta_end if args.beta_end is not None else s["beta_end"],
    )
    sys.stdout.write(sched.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p):
        p.add_argument("--config", help="YAML/JSON config file")
        p.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )

    p = sub.add_parser("gen-data", help="generate a multi-view dataset file")
    common(p)
    p.add_argument("--backend", default="synthetic")
    p.add_argument("--n-identities", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--heldout", action="store_true", help="use the held-out size and seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the prior")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines loss log")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample latents from embeddings or a prompt")
    common(p)
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--embeddings", help=".npy array (n, embed_dim) or dataset file (view 0)")
    src.add_argument("--prompt", help="text prompt (needs a text-encoder backend)")
    p.add_argument("--guidance", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint or run the ablation suite")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--heldout", required=True)
    p.add_argument("--ablation", action="store_true")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", help="CSV path (default: report path with .csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-schedule", help="print the noise schedule as CSV")
    common(p)
    p.add_argument("--kind", choices=["linear", "cosine"])
    p.add_argument("--T", type=int)
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.set_defaults(func=cmd_inspect_schedule)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = config_mod.load_config(args.config, args.override)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (BackendUnavailableError, DatasetError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
