"""Command-line entry point: ``surds {synth,split,pretrain,finetune,evaluate}``.

Values resolve as command-line flag > ``--config`` file > built-in default.
The config file is plain ``key = value`` lines (``#`` comments allowed) whose
keys are the long flag names with dashes turned into underscores, e.g.::

    epochs = 50
    width = 8
    image_size = 32
    stride = 4
"""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

from . import data, evaluation, trainer
from .checkpoint import load_checkpoint, read_checkpoint
from .errors import SurdsError

log = logging.getLogger("surds")

DEFAULTS = {
    "seed": 0,
    # synth
    "writers": 12, "per_writer": 6, "forged_per_writer": None, "split": None,
    # split
    "train_ratio": 0.7,
    # training
    "epochs": 200, "batch_size": None, "warmup_epochs": 10,
    "lr": 0.1, "momentum": 0.9,
    "encoder_lr": 0.005, "projector_lr": 1.0, "weight_decay": 0.0005,
    "rmsprop_alpha": 0.99, "rmsprop_eps": 1e-8, "margin": 1.0, "normalize": False,
    "no_attention": False, "from_scratch": False, "init": None,
    "width": 64, "image_size": 256, "stride": 32, "embed_dim": 512,
    "save_every": 1, "workers": 1,
    # evaluation
    "k": 8, "step": evaluation.DEFAULT_STEP, "exact": False, "report": None,
    "embeddings": None,
}
BOOL_KEYS = {"normalize", "no_attention", "from_scratch", "exact"}
NONE_DEFAULT_TYPES = {"batch_size": int, "forged_per_writer": int, "split": float}


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    """Parse a ``key = value`` file into typed values keyed like DEFAULTS."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + Path(path).read_text(encoding="utf-8"))
    except (OSError, configparser.Error) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    out = {}
    for key, raw in cp["run"].items():
        key = key.strip().replace("-", "_")
        if key not in DEFAULTS and key not in ("out", "manifest", "checkpoint"):
            raise UsageError(f"{path}: unknown config key {key!r}")
        if key in BOOL_KEYS:
            out[key] = cp["run"].getboolean(key)
            continue
        default = DEFAULTS.get(key)
        try:
            if raw.lower() in ("", "none"):
                out[key] = None
            elif key in NONE_DEFAULT_TYPES:
                out[key] = NONE_DEFAULT_TYPES[key](raw)
            elif isinstance(default, int):
                out[key] = int(raw)
            elif isinstance(default, float):
                out[key] = float(raw)
            else:
                out[key] = raw
        except ValueError as e:
            raise UsageError(f"{path}: bad value for {key}: {raw!r}") from e
    return out


def _common(suppress: bool = False) -> argparse.ArgumentParser:
    # sub-commands must not reset flags given before the command name
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value config file", **kw)
    p.add_argument("--seed", type=int, **kw)
    p.add_argument("--out", help="output directory", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)
    return p


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--width", type=int, help="ResNet base width (feature dim = 8 * width)")
    g.add_argument("--image-size", type=int)
    g.add_argument("--stride", type=int, choices=(32, 8, 4))
    g.add_argument("--embed-dim", type=int)


def _train_flags(p):
    p.add_argument("--manifest", help="training manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--save-every", type=int, help="checkpoint every N epochs (0: final only)")
    p.add_argument("--workers", type=int, help="preprocessing threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surds", description=__doc__.split("\n")[0], parents=[_common()])
    common = _common(suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic signature corpus")
    p.add_argument("--writers", type=int)
    p.add_argument("--per-writer", type=int, help="genuine samples per writer")
    p.add_argument("--forged-per-writer", type=int, help="defaults to --per-writer")
    p.add_argument("--split", type=float, metavar="RATIO",
                   help="also write writer-disjoint train.csv / test.csv")

    p = sub.add_parser("split", parents=[common], help="writer-disjoint train/test manifests")
    p.add_argument("--manifest")
    p.add_argument("--train-ratio", type=float)

    p = sub.add_parser("pretrain", parents=[common], help="stage 1: attention-guided reconstruction")
    _train_flags(p)
    _model_flags(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--no-attention", action="store_true", default=None,
                   help="plain autoencoder (AE-DTL precursor)")

    p = sub.add_parser("finetune", parents=[common], help="stage 2: dual triplet metric learning")
    _train_flags(p)
    _model_flags(p)
    p.add_argument("--init", help="stage-1 checkpoint")
    p.add_argument("--from-scratch", action="store_true", default=None,
                   help="random encoder (RN-DTL baseline)")
    p.add_argument("--encoder-lr", type=float)
    p.add_argument("--projector-lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--rmsprop-alpha", type=float)
    p.add_argument("--rmsprop-eps", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--normalize", action="store_true", default=None, help="L2-normalize embeddings")

    p = sub.add_parser("evaluate", parents=[common], help="reference-based verification report")
    p.add_argument("--manifest", help="evaluation manifest (held-out writers)")
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int, help="reference signatures per writer")
    p.add_argument("--step", type=float, help="threshold sweep step")
    p.add_argument("--exact", action="store_true", default=None, help="exact midpoint sweep")
    p.add_argument("--report", help="report path (default OUT/report.json)")
    p.add_argument("--embeddings", help="also write the embedding cache here")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config(args.config))
    explicit = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "verbose")}
    cfg.update(explicit)
    cfg["command"] = args.command
    cfg["_explicit"] = sorted(explicit) + (sorted(read_config(args.config)) if args.config else [])
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _train_config(cfg: dict, stage: str) -> trainer.TrainConfig:
    warmup = cfg["warmup_epochs"]
    if warmup >= cfg["epochs"] and "warmup_epochs" not in cfg["_explicit"]:
        warmup = cfg["epochs"] - 1
        log.info("warmup shortened to %d epoch(s) to fit --epochs %d", warmup, cfg["epochs"])
    if stage == "pretrain":
        ablation = "no_attention" if cfg["no_attention"] else "none"
    else:
        ablation = "no_pretrain" if cfg["from_scratch"] else "none"
    kw = dict(stage=stage, epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
              pretrain_lr=cfg["lr"], momentum=cfg["momentum"],
              finetune_encoder_lr=cfg["encoder_lr"], finetune_projector_lr=cfg["projector_lr"],
              weight_decay=cfg["weight_decay"], rmsprop_alpha=cfg["rmsprop_alpha"],
              rmsprop_eps=cfg["rmsprop_eps"], margin=cfg["margin"], normalize=cfg["normalize"],
              warmup_epochs=warmup, ablation=ablation, width=cfg["width"],
              image_size=cfg["image_size"], stride=cfg["stride"], embed_dim=cfg["embed_dim"],
              save_every=cfg["save_every"], workers=cfg["workers"])
    try:
        return trainer.TrainConfig(**kw)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _provenance(cfg: dict, manifest=None) -> dict:
    run = {k: v for k, v in cfg.items() if not k.startswith("_")}
    prov = {"run_config": run}
    if manifest:
        prov["manifest_sha256"] = data.manifest_hash(manifest)
    return prov


def cmd_synth(cfg: dict) -> Path:
    _require(cfg, "out")
    out = Path(cfg["out"])
    manifest = data.generate_synthetic_corpus(cfg["writers"], cfg["per_writer"], out, rng=cfg["seed"],
                                              forged_per_writer=cfg["forged_per_writer"])
    if cfg["split"] is not None:
        _write_split(manifest, cfg["split"], cfg["seed"], out)
    print(f"wrote {manifest}")
    return manifest


def _write_split(manifest, ratio, seed, out_dir) -> tuple[Path, Path]:
    ws = data.load_manifest(manifest)
    spec = data.make_split(ws.writer_ids, ratio, seed)
    out_dir = Path(out_dir)
    paths = []
    for name, ids in (("train", spec.train_ids), ("test", spec.test_ids)):
        sub = ws.subset(ids)
        recs = [data.SampleRecord(_rel(ws.abspath(r), out_dir), r.writer_id, r.label, r.sample_index)
                for r in sub.records()]
        paths.append(data.write_manifest(recs, out_dir / f"{name}.csv"))
        print(f"wrote {out_dir / f'{name}.csv'} ({len(ids)} writers)")
    return tuple(paths)


def _rel(path: Path, base: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), Path(base).resolve())).as_posix()


def cmd_split(cfg: dict):
    _require(cfg, "out", "manifest")
    return _write_split(cfg["manifest"], cfg["train_ratio"], cfg["seed"], cfg["out"])


def cmd_pretrain(cfg: dict) -> Path:
    _require(cfg, "out", "manifest")
    tc = _train_config(cfg, "pretrain")
    ws = data.load_manifest(cfg["manifest"])
    res = trainer.pretrain(tc, ws, out_dir=cfg["out"], provenance=_provenance(cfg, cfg["manifest"]))
    print(f"wrote {res.checkpoint} (final loss {res.log[-1]['loss']:.6f})")
    return res.checkpoint


def cmd_finetune(cfg: dict) -> Path:
    _require(cfg, "out", "manifest")
    if cfg["from_scratch"] and cfg["init"]:
        raise UsageError("--init and --from-scratch are mutually exclusive")
    if not cfg["from_scratch"] and not cfg["init"]:
        raise UsageError("finetune needs --init <checkpoint> or --from-scratch")
    if cfg["init"]:
        # architecture comes from the stage-1 checkpoint
        mc = read_checkpoint(cfg["init"])["model_config"]
        for key in ("width", "image_size", "stride", "embed_dim"):
            if key in cfg["_explicit"] and cfg[key] != mc[key]:
                raise UsageError(f"--{key.replace('_', '-')} {cfg[key]} conflicts with checkpoint ({mc[key]})")
            cfg[key] = mc[key]
    tc = _train_config(cfg, "finetune")
    ws = data.load_manifest(cfg["manifest"])
    res = trainer.finetune(tc, ws, init=cfg["init"], out_dir=cfg["out"],
                           provenance=_provenance(cfg, cfg["manifest"]))
    print(f"wrote {res.checkpoint} (final loss {res.log[-1]['loss']:.6f})")
    return res.checkpoint


def cmd_evaluate(cfg: dict) -> Path:
    _require(cfg, "out", "manifest", "checkpoint")
    model, meta = load_checkpoint(cfg["checkpoint"])
    ws = data.load_manifest(cfg["manifest"])
    corpus = data.ProcessedCorpus(ws, model.config.image_size, workers=cfg["workers"])
    emb = evaluation.embed_corpus(corpus, model)
    if cfg["embeddings"]:
        evaluation.write_embeddings(emb, cfg["embeddings"])
    rep = evaluation.evaluate(model, corpus, k=cfg["k"], seed=cfg["seed"],
                              step=None if cfg["exact"] else cfg["step"], embeddings=emb)
    rep.provenance = _provenance(cfg, cfg["manifest"])
    rep.provenance["checkpoint"] = {k: meta.get(k) for k in ("stage", "epoch", "seed", "config_hash",
                                                            "pretrained", "attention")}
    path = rep.write(cfg["report"] or Path(cfg["out"]) / "report.json")
    print(f"Accuracy: {100 * rep.accuracy:.2f}%  FAR: {100 * rep.far:.2f}%  FRR: {100 * rep.frr:.2f}%  "
          f"(tau={rep.best_threshold:.5f}, {rep.n_genuine} genuine / {rep.n_forged} forged queries)")
    print(f"wrote {path}")
    return path


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except UsageError as e:
        parser.error(str(e))  # exits 2
    except (SurdsError, OSError, ValueError) as e:
        print(f"surds {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
