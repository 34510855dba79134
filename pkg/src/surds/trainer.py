"""Stage-1 reconstruction pre-training and stage-2 dual-triplet fine-tuning."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import ProcessedCorpus, WriterSet, sample_quadruplet
from .errors import DataError, NumericalError
from .losses import dual_triplet_loss, reconstruction_loss
from .model import ModelConfig, SurdsNet, to_tensor

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no_pretrain", "no_attention")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 200
    batch_size: int | None = None    # None: 32 images (pretrain) / 16 quadruplets (finetune)
    seed: int = 0
    pretrain_lr: float = 0.1
    momentum: float = 0.9
    pretrain_weight_decay: float = 0.0
    finetune_encoder_lr: float = 0.005
    finetune_projector_lr: float = 1.0
    weight_decay: float = 0.0005
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    margin: float = 1.0
    normalize: bool = False
    warmup_epochs: int = 10
    ablation: str = "none"
    # architecture
    width: int = 64
    image_size: int = 256
    stride: int = 32
    embed_dim: int = 512
    # bookkeeping
    save_every: int = 1               # 0: only the final checkpoint
    workers: int = 1

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs} / {self.epochs}")
        for name in ("pretrain_lr", "finetune_encoder_lr", "finetune_projector_lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size:
            return self.batch_size
        return 32 if self.stage == "pretrain" else 16

    def model_config(self) -> ModelConfig:
        return ModelConfig(width=self.width, image_size=self.image_size, stride=self.stride,
                           embed_dim=self.embed_dim, attention=self.ablation != "no_attention")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: SurdsNet
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def lr_at(epoch: int, base_lr: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_epochs``, then cosine decay to 0."""
    w, n = cfg.warmup_epochs, cfg.epochs
    if epoch < w:
        return base_lr * epoch / w
    t = (epoch - w) / (n - w)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def patchify_batch(images: torch.Tensor, grid: int = 4) -> torch.Tensor:
    """``(N, C, S, S) -> (N, grid*grid, C, S/grid, S/grid)``, row-major patches."""
    n, c, s, _ = images.shape
    p = s // grid
    return (images.reshape(n, c, grid, p, grid, p)
            .permute(0, 2, 4, 1, 3, 5).reshape(n, grid * grid, c, p, p))


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def _corpus(dataset, cfg: TrainConfig) -> ProcessedCorpus:
    if isinstance(dataset, ProcessedCorpus):
        if dataset.size != cfg.image_size:
            raise DataError(f"corpus preprocessed at {dataset.size}px, model expects {cfg.image_size}px")
        return dataset
    if isinstance(dataset, WriterSet):
        return ProcessedCorpus(dataset, cfg.image_size, workers=cfg.workers)
    raise TypeError(f"unsupported dataset type {type(dataset).__name__}")


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int, lrs) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, "
                             f"step {step} (lr={lrs})")


class _Run:
    """Checkpoint + jsonl log bookkeeping shared by both stages."""

    def __init__(self, stage, cfg, out_dir, provenance, extra_meta):
        self.stage, self.cfg = stage, cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.meta = {"stage": stage, "seed": cfg.seed, "config": cfg.to_dict(),
                     "config_hash": ckpt.config_hash(cfg.to_dict()),
                     "provenance": provenance or {}, **extra_meta}
        self.records: list[dict] = []
        self.last: Path | None = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.log_path = self.out_dir / f"{stage}-log.jsonl"
            self.log_path.write_text("")

    def end_epoch(self, model, epoch, loss, lrs, started):
        rec = {"stage": self.stage, "epoch": epoch, "loss": loss, "lr": lrs,
               "wall_time": time.time() - started}
        self.records.append(rec)
        log.info("%s epoch %d/%d loss %.6f lr %s", self.stage, epoch, self.cfg.epochs, loss, lrs)
        if self.out_dir is None:
            return
        with self.log_path.open("a") as f:
            f.write(json.dumps(rec) + "\n")
        every = self.cfg.save_every
        if epoch == self.cfg.epochs or (every and epoch % every == 0):
            path = self.out_dir / f"{self.stage}-{epoch:04d}.ckpt"
            ckpt.save_checkpoint(path, model, {**self.meta, "epoch": epoch})
            ckpt.link_latest(path, self.out_dir / f"{self.stage}-latest.ckpt")
            self.last = path


def pretrain(cfg: TrainConfig, dataset, out_dir=None, provenance: dict | None = None) -> TrainResult:
    """Self-supervised reconstruction training of encoder, attention and decoder."""
    if cfg.stage != "pretrain":
        raise ValueError("pretrain() needs cfg.stage == 'pretrain'")
    corpus = _corpus(dataset, cfg)
    if len(corpus) == 0:
        raise DataError("empty training corpus")
    set_seed(cfg.seed)
    model = SurdsNet(cfg.model_config())
    images = to_tensor(corpus.images)
    rng = np.random.default_rng(cfg.seed)
    params = [p for n, p in model.named_parameters() if not n.startswith("projector.")]
    opt = torch.optim.SGD(params, lr=cfg.pretrain_lr, momentum=cfg.momentum,
                          weight_decay=cfg.pretrain_weight_decay)
    run = _Run("pretrain", cfg, out_dir, provenance,
               {"attention": model.config.attention, "pretrained": False})
    bs = cfg.effective_batch_size
    grid = model.config.grid
    model.train()
    for epoch in range(cfg.epochs):
        started = time.time()
        lr = lr_at(epoch, cfg.pretrain_lr, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(len(corpus))
        total = 0.0
        for step, start in enumerate(range(0, len(order), bs)):
            batch = images[order[start:start + bs]]
            patches = patchify_batch(batch, grid) if model.config.attention else None
            loss = reconstruction_loss(batch, model.forward_pretrain(batch, patches))
            _check_finite(loss, "pretrain", epoch + 1, step, lr)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        run.end_epoch(model, epoch + 1, total / len(corpus), {"all": lr}, started)
    model.eval()
    return TrainResult(model, run.records, run.last)


def _init_finetune_model(cfg: TrainConfig, init) -> tuple[SurdsNet, bool]:
    set_seed(cfg.seed)
    if isinstance(init, SurdsNet):
        return init, True
    if init is None:
        if cfg.ablation != "no_pretrain":
            raise ValueError("finetune needs an init checkpoint unless ablation='no_pretrain'")
        return SurdsNet(cfg.model_config()), False
    archive = ckpt.read_checkpoint(init)
    # projector starts fresh; everything else comes from stage 1
    model = SurdsNet(ModelConfig(**archive["model_config"]))
    state = {k: v for k, v in archive["state_dict"].items() if not k.startswith("projector.")}
    model.load_state_dict(state, strict=False)
    return model, True


def finetune(cfg: TrainConfig, dataset, init=None, out_dir=None,
             provenance: dict | None = None) -> TrainResult:
    """Metric fine-tuning of encoder + projector with the dual triplet loss.

    ``init`` is a stage-1 checkpoint path, a ``SurdsNet`` to continue from,
    or ``None`` (random encoder, only with ``ablation='no_pretrain'``).
    One epoch draws as many quadruplets as there are genuine training samples.
    """
    if cfg.stage != "finetune":
        raise ValueError("finetune() needs cfg.stage == 'finetune'")
    corpus = _corpus(dataset, cfg)
    ws = corpus.ws
    model, pretrained = _init_finetune_model(cfg, init)
    if model.config.image_size != corpus.size:
        raise DataError(f"model expects {model.config.image_size}px images, corpus has {corpus.size}px")
    images = to_tensor(corpus.images)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.RMSprop(
        [{"params": list(model.encoder.parameters()), "lr": cfg.finetune_encoder_lr, "name": "encoder"},
         {"params": list(model.projector.parameters()), "lr": cfg.finetune_projector_lr, "name": "projector"}],
        alpha=cfg.rmsprop_alpha, eps=cfg.rmsprop_eps, weight_decay=cfg.weight_decay)
    base = [cfg.finetune_encoder_lr, cfg.finetune_projector_lr]
    run = _Run("finetune", cfg, out_dir, provenance,
               {"attention": model.config.attention, "pretrained": pretrained,
                "init": str(init) if isinstance(init, (str, Path)) else None})
    n_genuine = sum(len(ws.genuine(w)) for w in ws.writer_ids)
    bs = cfg.effective_batch_size
    steps = max(1, math.ceil(n_genuine / bs))
    model.train()
    for epoch in range(cfg.epochs):
        started = time.time()
        lrs = {}
        for g, b in zip(opt.param_groups, base):
            g["lr"] = lr_at(epoch, b, cfg)
            lrs[g["name"]] = g["lr"]
        total, drawn = 0.0, 0
        for step in range(steps):
            n = min(bs, n_genuine - step * bs) if n_genuine > bs else n_genuine
            quads = [sample_quadruplet(ws, rng) for _ in range(n)]
            ids = [r.sample_id for q in quads for r in (q.anchor, q.positive, q.neg_intra, q.neg_cross)]
            emb = model.embed(images[[corpus.index[i] for i in ids]]).reshape(n, 4, -1)
            loss = dual_triplet_loss(emb[:, 0], emb[:, 1], emb[:, 2], emb[:, 3],
                                     cfg.margin, normalize=cfg.normalize)
            _check_finite(loss, "finetune", epoch + 1, step, lrs)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * n
            drawn += n
        run.end_epoch(model, epoch + 1, total / drawn, lrs, started)
    model.eval()
    return TrainResult(model, run.records, run.last)


def with_stage(cfg: TrainConfig, stage: str, **kw) -> TrainConfig:
    return replace(cfg, stage=stage, **kw)
