"""Encoder, patch-wise 2D attention, decoder and projector head.

Tensors are channels-first (``N, C, H, W``). With the default configuration a
256x256 image encodes to a ``512 x 8 x 8`` feature map and each 64x64 patch
to ``512 x 2 x 2``. ``ModelConfig`` can shrink everything (narrower ResNet,
smaller images, lower total stride) for desk-scale runs and gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import CountMismatch, ShapeMismatch


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64          # ResNet base width; feature channels = 8 * width
    image_size: int = 256
    grid: int = 4            # patches per side
    stride: int = 32         # total encoder stride: 32, 8 or 4
    attn_dim: int | None = None
    embed_dim: int = 512
    attention: bool = True

    @property
    def feat_dim(self) -> int:
        return 8 * self.width

    @property
    def patch_size(self) -> int:
        return self.image_size // self.grid

    def to_dict(self) -> dict:
        return asdict(self)


def reduced_config(image_size: int = 32, width: int = 8, stride: int = 4, **kw) -> ModelConfig:
    """Small variant for CPU-scale runs. With the defaults a 32px image maps to
    8x8 and an 8px patch to 2x2, the same geometry as the full model."""
    return ModelConfig(width=width, image_size=image_size, stride=stride, **kw)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class ResNet18Encoder(nn.Module):
    """ResNet-18 without the pooling/classification head.

    ``stride=32`` is the standard network. Smaller strides swap in a 3x3
    stride-1 stem without max-pooling (8) and also keep ``layer4`` at full
    resolution (4).
    """

    def __init__(self, width: int = 64, stride: int = 32):
        super().__init__()
        if stride not in (32, 8, 4):
            raise ValueError(f"stride must be 32, 8 or 4, got {stride}")
        if stride == 32:
            self.stem = nn.Sequential(
                nn.Conv2d(3, width, 7, 2, 3, bias=False), nn.BatchNorm2d(width),
                nn.ReLU(inplace=True), nn.MaxPool2d(3, 2, 1))
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width),
                nn.ReLU(inplace=True))
        widths = [width, 2 * width, 4 * width, 8 * width]
        strides = [1, 2, 2, 1 if stride == 4 else 2]
        layers, cin = [], width
        for w, s in zip(widths, strides):
            layers.append(nn.Sequential(BasicBlock(cin, w, s), BasicBlock(w, w)))
            cin = w
        self.layer1, self.layer2, self.layer3, self.layer4 = layers

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        x = self.stem(x)
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


class PatchAttention(nn.Module):
    """2D soft attention of a patch feature map guided by a global feature.

    ``M = tanh(W_f * C + W_h z)``, one logit ``W_att . M_ij`` per position,
    softmax jointly over the ``h*w`` positions, context ``sum_ij A_ij C_ij``.
    """

    def __init__(self, feat_dim: int, attn_dim: int | None = None):
        super().__init__()
        attn_dim = attn_dim or feat_dim
        self.feat_dim = feat_dim
        self.w_f = nn.Conv2d(feat_dim, attn_dim, 1)
        self.w_h = nn.Linear(feat_dim, attn_dim)
        self.w_att = nn.Linear(attn_dim, 1)

    def logits(self, fm: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        m = torch.tanh(self.w_f(fm) + self.w_h(z)[:, :, None, None])
        return self.w_att(m.permute(0, 2, 3, 1)).squeeze(-1)  # (N, h, w)

    def forward(self, fm: torch.Tensor, z: torch.Tensor):
        if fm.dim() != 4 or fm.shape[1] != self.feat_dim or z.shape != (fm.shape[0], self.feat_dim):
            raise ShapeMismatch(f"attend: feature map {tuple(fm.shape)} vs global {tuple(z.shape)}")
        n, _, h, w = fm.shape
        weights = torch.softmax(self.logits(fm, z).reshape(n, h * w), dim=1)
        context = torch.einsum("np,ncp->nc", weights, fm.reshape(n, self.feat_dim, h * w))
        return weights.reshape(n, h, w), context


class Decoder(nn.Module):
    """Skip-free U-Net style decoder from a single feature vector."""

    def __init__(self, feat_dim: int, image_size: int, stride: int):
        super().__init__()
        self.start = image_size // stride
        self.feat_dim = feat_dim
        self.fc = nn.Linear(feat_dim, feat_dim * self.start * self.start)
        stages, c = [], feat_dim
        for _ in range(int(math.log2(stride))):
            out = max(c // 2, 1)
            stages += [nn.ConvTranspose2d(c, out, 4, 2, 1, bias=False),
                       nn.BatchNorm2d(out), nn.ReLU(inplace=True)]
            c = out
        self.up = nn.Sequential(*stages)
        self.head = nn.Conv2d(c, 3, 3, 1, 1)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.dim() != 2 or v.shape[1] != self.feat_dim:
            raise ShapeMismatch(f"decode expects (N, {self.feat_dim}), got {tuple(v.shape)}")
        x = self.fc(v).reshape(-1, self.feat_dim, self.start, self.start)
        return self.head(self.up(x))


class Projector(nn.Module):
    def __init__(self, feat_dim: int, embed_dim: int = 512):
        super().__init__()
        self.fc1 = nn.Linear(feat_dim, embed_dim)
        self.fc2 = nn.Linear(embed_dim, embed_dim)

    def forward(self, z):
        return self.fc2(F.relu(self.fc1(z)))


def global_pool(fm: torch.Tensor) -> torch.Tensor:
    """Channel-wise spatial mean, ``(N, C, h, w) -> (N, C)``."""
    return fm.mean(dim=(2, 3))


def aggregate_contexts(contexts: torch.Tensor, count: int = 16) -> torch.Tensor:
    """Mean of the per-patch context vectors, ``(N, count, C) -> (N, C)``."""
    if contexts.dim() != 3 or contexts.shape[1] != count:
        raise CountMismatch(f"expected {count} context vectors per image, got shape {tuple(contexts.shape)}")
    return contexts.mean(dim=1)


class SurdsNet(nn.Module):
    """All trainable parts of the two-stage model under one parameter set."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        c = config
        self.encoder = ResNet18Encoder(c.width, c.stride)
        self.attention = PatchAttention(c.feat_dim, c.attn_dim)
        self.decoder = Decoder(c.feat_dim, c.image_size, c.stride)
        self.projector = Projector(c.feat_dim, c.embed_dim)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        c = self.config
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != x.shape[3] \
                or x.shape[2] not in (c.image_size, c.patch_size):
            raise ShapeMismatch(
                f"encode expects (N, 3, S, S) with S in {{{c.image_size}, {c.patch_size}}}, got {tuple(x.shape)}")
        return self.encoder(x)

    def attend(self, patch_fm: torch.Tensor, z: torch.Tensor):
        return self.attention(patch_fm, z)

    def decode(self, v: torch.Tensor) -> torch.Tensor:
        return self.decoder(v)

    def project(self, z: torch.Tensor) -> torch.Tensor:
        return self.projector(z)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(global_pool(self.encode(x)))

    def pretrain_features(self, img: torch.Tensor, patches: torch.Tensor | None) -> torch.Tensor:
        """Vector handed to the decoder: attention-aggregated patch contexts,
        or the pooled full-image feature when attention is disabled."""
        z = global_pool(self.encode(img))
        if not self.config.attention:
            return z
        n, k = patches.shape[:2]
        if k != self.config.grid ** 2:
            raise CountMismatch(f"expected {self.config.grid ** 2} patches, got {k}")
        fm = self.encode(patches.reshape(n * k, *patches.shape[2:]))
        _, ctx = self.attend(fm, z.repeat_interleave(k, dim=0))
        return aggregate_contexts(ctx.reshape(n, k, -1), k)

    def forward_pretrain(self, img: torch.Tensor, patches: torch.Tensor | None = None) -> torch.Tensor:
        return self.decode(self.pretrain_features(img, patches))

    def forward(self, img, patches=None):
        return self.forward_pretrain(img, patches)


def to_tensor(images) -> torch.Tensor:
    """``(..., H, W, 3)`` channels-last numpy/tensor to channels-first float tensor."""
    t = torch.as_tensor(images, dtype=torch.float32)
    return t.movedim(-1, -3).contiguous()
