"""Loss terms: attention regression, mask-weighted PatchNCE, mask-weighted LSGAN, weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import MetricError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_mask: float = 1.0
    lambda_att: float = 4.0
    lambda_gan: float = 2.0

    def __post_init__(self):
        if min(self.lambda_mask, self.lambda_att, self.lambda_gan) < 0:
            raise ValueError("loss weights must be nonnegative")

    def combine(self, l_mask, l_att, l_gan):
        return self.lambda_mask * l_mask + self.lambda_att * l_att + self.lambda_gan * l_gan


@dataclass
class LossReport:
    l_att: float
    l_mask: float
    l_gan: float
    total: float
    step: int = 0
    extras: Optional[dict] = None

    def as_record(self):
        rec = {"step": self.step, "l_att": self.l_att, "l_mask": self.l_mask, "l_gan": self.l_gan, "total": self.total}
        rec.update(self.extras or {})
        return rec


@dataclass(frozen=True)
class PatchSamplingConfig:
    patches_per_image: int = 64
    temperature: float = 0.07
    mask_weight_alpha: float = 1.0
    l1_weight: float = 10.0  # masked L1 folded into the mask loss; 0 disables it

    def __post_init__(self):
        if self.patches_per_image < 1 or self.temperature <= 0:
            raise ValueError("patches_per_image must be >= 1 and temperature > 0")


def _as_nchw(m, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(getattr(m, "map", m))
    while m.ndim < 4:
        m = m.unsqueeze(0)
    return m.to(dtype=like.dtype, device=like.device)


def downsample_mask(m: torch.Tensor, size) -> torch.Tensor:
    """Area-average a (N, 1, H, W) mask onto a coarser grid."""
    if tuple(m.shape[-2:]) == tuple(size):
        return m
    if m.shape[-2] < size[0] or m.shape[-1] < size[1]:
        raise ShapeError(f"mask {tuple(m.shape[-2:])} smaller than target grid {tuple(size)}")
    return F.adaptive_avg_pool2d(m, size)


def attention_loss(A, m) -> torch.Tensor:
    A = torch.as_tensor(getattr(A, "map", A))
    m = torch.as_tensor(getattr(m, "map", m)).to(A.dtype)
    if A.shape != m.shape:
        raise ShapeError(f"attention {tuple(A.shape)} and mask {tuple(m.shape)} differ")
    return ((A - m) ** 2).mean()


def sample_locations(n_locations: int, k: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if k >= n_locations:
        return torch.arange(n_locations)
    return torch.randperm(n_locations, generator=generator)[:k]


def patchnce_terms(real: torch.Tensor, fake: torch.Tensor, idx: torch.Tensor, temperature: float) -> torch.Tensor:
    """Per-location InfoNCE terms, shape (N, K).

    ``real``/``fake`` are (N, C, H, W); ``idx`` indexes flattened spatial positions.
    The query is the fake feature, its positive the real feature at the same
    place, negatives the real features at the other sampled places.
    """
    n, c = real.shape[:2]
    q = F.normalize(fake.flatten(2)[:, :, idx].transpose(1, 2), dim=-1)  # (N, K, C)
    k = F.normalize(real.detach().flatten(2)[:, :, idx].transpose(1, 2), dim=-1)
    logits = torch.bmm(q, k.transpose(1, 2)) / temperature  # (N, K, K), diagonal = positives
    target = torch.arange(logits.shape[1], device=logits.device).expand(n, -1)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1), reduction="none").view(n, -1)


def masked_patchnce_loss(real_feats: Sequence[torch.Tensor], fake_feats: Sequence[torch.Tensor], m,
                         cfg: PatchSamplingConfig = PatchSamplingConfig(), generator=None,
                         locations: Optional[Sequence[torch.Tensor]] = None, projectors=None) -> torch.Tensor:
    """Mean over layers of mean_location((1 + alpha * mbar) * InfoNCE term)."""
    if isinstance(real_feats, torch.Tensor):
        real_feats, fake_feats = [real_feats], [fake_feats]
    if len(real_feats) != len(fake_feats):
        raise ShapeError("real and fake feature lists differ in length")
    total = 0.0
    for li, (real, fake) in enumerate(zip(real_feats, fake_feats)):
        if real.shape != fake.shape:
            raise ShapeError(f"feature grids differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
        hw = real.shape[2] * real.shape[3]
        idx = locations[li] if locations is not None else sample_locations(hw, cfg.patches_per_image, generator)
        idx = torch.as_tensor(idx, device=real.device)
        if idx.numel() < 2:
            raise ShapeError("PatchNCE needs at least 2 sampled locations")
        mbar = downsample_mask(_as_nchw(m, real), real.shape[2:]).flatten(1)[:, idx]
        if projectors is not None:
            real = _project(projectors[li], real, idx)
            fake = _project(projectors[li], fake, idx)
            idx = torch.arange(idx.numel(), device=real.device)
        terms = patchnce_terms(real, fake, idx, cfg.temperature)
        w = 1.0 + cfg.mask_weight_alpha * mbar
        total = total + (w * terms).mean()
    return total / len(real_feats)


def _project(proj, feat, idx):
    # (N, C, H, W) -> (N, D, 1, K) so sampled positions survive as a flat grid
    x = feat.flatten(2)[:, :, idx].transpose(1, 2)
    return proj(x).transpose(1, 2).unsqueeze(2)


def masked_l1(fake, real, m, alpha: float = 1.0) -> torch.Tensor:
    w = 1.0 + alpha * _as_nchw(m, fake)
    return (w * (fake - real).abs()).mean()


def gan_loss(scores_real, scores_fake, m, role: str) -> torch.Tensor:
    """Least-squares adversarial loss with per-patch weights 1 + mbar, averaged over scales."""
    if role not in ("generator", "discriminator"):
        raise ValueError(f"role must be generator or discriminator, got {role!r}")
    if isinstance(scores_fake, torch.Tensor):
        scores_fake = [scores_fake]
        scores_real = None if scores_real is None else [scores_real]
    total = 0.0
    for i, fake in enumerate(scores_fake):
        mt = _as_nchw(m, fake)
        if mt.shape[0] not in (1, fake.shape[0]):
            raise ShapeError(f"mask batch {mt.shape[0]} does not match scores batch {fake.shape[0]}")
        w = 1.0 + downsample_mask(mt, fake.shape[-2:])
        if role == "generator":
            total = total + (w * (fake - 1) ** 2).mean()
        else:
            real = scores_real[i]
            if real.shape != fake.shape:
                raise ShapeError("real and fake score grids differ")
            total = total + 0.5 * ((w * (real - 1) ** 2).mean() + (w * fake ** 2).mean())
    return total / len(scores_fake)


def feature_matching_loss(real_feats, fake_feats) -> torch.Tensor:
    """L1 between discriminator intermediate features, averaged over layers and scales."""
    total, n = 0.0, 0
    for rs, fs in zip(real_feats, fake_feats):
        for r, f in zip(rs, fs):
            total = total + F.l1_loss(f, r.detach())
            n += 1
    return total / max(n, 1)


def total_loss(l_mask, l_att, l_gan, w: LossWeights = LossWeights(), step: int = 0) -> LossReport:
    vals = {}
    for name, v in (("l_mask", l_mask), ("l_att", l_att), ("l_gan", l_gan)):
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise MetricError(f"non-finite loss term {name}: {v}")
        vals[name] = v
    total = w.lambda_mask * vals["l_mask"] + w.lambda_att * vals["l_att"] + w.lambda_gan * vals["l_gan"]
    return LossReport(vals["l_att"], vals["l_mask"], vals["l_gan"], total, step)
