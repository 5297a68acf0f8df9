"""Video quality, classification, segmentation and retrieval metrics plus run statistics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg, stats

from .errors import MetricError, ShapeError

logger = logging.getLogger(__name__)

INF = float("inf")


# ---------------------------------------------------------------------------
# pixel metrics


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_value: float = 1.0) -> float:
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return INF
    return 10.0 * math.log10(max_value ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, win):
    from numpy.lib.stride_tricks import sliding_window_view

    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM, Gaussian window, mean over all valid window positions."""
    a, b = _same_shape(a, b)
    if a.ndim != 2:
        raise ShapeError("ssim expects grayscale 2-D frames")
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise ShapeError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def dice(pred, truth) -> float:
    p, t = np.asarray(pred), np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    for name, arr in (("pred", p), ("truth", t)):
        if not np.isin(arr, (0, 1)).all():
            raise MetricError(f"dice expects binary maps; {name} has non-binary values")
    p, t = p.astype(bool), t.astype(bool)
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2 * np.logical_and(p, t).sum() / denom)


# ---------------------------------------------------------------------------
# feature extractors (fixed-seed random networks)


def _seeded(builder, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = builder()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


class FrameBackbone:
    """Multi-layer 2-D conv features of a single grayscale frame."""

    def __init__(self, seed: int = 0, name: str = "random-conv2d"):
        self.name, self.seed = name, seed

        def build():
            return nn.ModuleList([
                nn.Sequential(nn.Conv2d(1, 16, 3, 1, 1), nn.LeakyReLU(0.2)),
                nn.Sequential(nn.Conv2d(16, 32, 3, 2, 1), nn.LeakyReLU(0.2)),
                nn.Sequential(nn.Conv2d(32, 64, 3, 2, 1), nn.LeakyReLU(0.2)),
            ])

        self.net = _seeded(build, seed)

    @torch.no_grad()
    def __call__(self, frame) -> list:
        x = torch.as_tensor(np.asarray(frame, dtype=np.float32))
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        x = x * 2 - 1
        out = []
        for layer in self.net:
            x = layer(x)
            out.append(x.double())
        return out


class VideoFeatureExtractor:
    """Spatiotemporal conv stack mapping a (T, H, W) video to a fixed-length vector."""

    def __init__(self, seed: int = 0, size: int = 64, name: str = "random-conv3d"):
        self.name, self.seed, self.size = name, seed, size

        def build():
            return nn.Sequential(
                nn.Conv3d(1, 16, 3, (1, 2, 2), 1), nn.LeakyReLU(0.2),
                nn.Conv3d(16, 32, 3, 2, 1), nn.LeakyReLU(0.2),
                nn.Conv3d(32, 32, 3, 2, 1), nn.LeakyReLU(0.2),
            )

        self.net = _seeded(build, seed)
        self.dim = 64  # mean and std pooled

    @torch.no_grad()
    def __call__(self, videos) -> np.ndarray:
        arrs = [getattr(v, "frames", v) for v in videos]
        x = torch.as_tensor(np.stack([np.asarray(a, dtype=np.float32) for a in arrs]))  # (N, T, H, W)
        if x.shape[-1] != self.size or x.shape[-2] != self.size:
            n, t = x.shape[:2]
            x = F.interpolate(x.reshape(n * t, 1, *x.shape[-2:]), size=(self.size, self.size),
                              mode="bilinear", align_corners=False, antialias=True).reshape(n, t, self.size, self.size)
        h = self.net(x[:, None] * 2 - 1)
        flat = h.flatten(2)
        return torch.cat([flat.mean(-1), flat.std(-1)], 1).double().numpy()


def perceptual_distance(a, b, backbone: Optional[FrameBackbone] = None) -> float:
    a, b = _same_shape(a, b)
    backbone = backbone or default_backbone()
    fa, fb = backbone(a), backbone(b)
    if len(fa) != len(fb):
        raise ShapeError("backbone returned different layer counts")
    total = 0.0
    for x, y in zip(fa, fb):
        if x.shape != y.shape:
            raise ShapeError("backbone feature maps misaligned")
        x = x / (x.norm(dim=1, keepdim=True) + 1e-10)
        y = y / (y.norm(dim=1, keepdim=True) + 1e-10)
        total += float(((x - y) ** 2).sum(1).mean())
    return total / len(fa)


_DEFAULTS: dict = {}


def default_backbone() -> FrameBackbone:
    return _DEFAULTS.setdefault("backbone", FrameBackbone(0))


def default_video_extractor() -> VideoFeatureExtractor:
    return _DEFAULTS.setdefault("video", VideoFeatureExtractor(0))


# ---------------------------------------------------------------------------
# Frechet distance


def _psd_sqrt(s):
    vals, vecs = np.linalg.eigh((s + s.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) for Gaussian fits.

    The cross term is taken as Tr((sqrt(S1) S2 sqrt(S1))^(1/2)), which has the
    same trace and stays symmetric; on failure both covariances get ``eps * I``.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ShapeError("mean / covariance dimensions disagree")
    diff = float(np.sum((mu1 - mu2) ** 2))

    def cross(a, b):
        r = _psd_sqrt(a)
        vals = np.linalg.eigvalsh(r @ b @ r)
        return float(np.sum(np.sqrt(np.clip(vals, 0, None))))

    try:
        tr_cross = cross(s1, s2)
        if not math.isfinite(tr_cross):
            raise np.linalg.LinAlgError("non-finite matrix square root")
    except np.linalg.LinAlgError:
        logger.warning("matrix square root failed; regularizing covariances with %g * I", eps)
        off = eps * np.eye(s1.shape[0])
        s1, s2 = s1 + off, s2 + off
        tr_cross = float(np.trace(linalg.sqrtm(s1 @ s2).real))
    return max(diff + float(np.trace(s1) + np.trace(s2)) - 2 * tr_cross, 0.0)


def gaussian_stats(feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise MetricError("need at least 2 feature vectors to estimate a covariance")
    return feats.mean(0), np.cov(feats, rowvar=False)


def fvd(real, fake, extractor: Optional[VideoFeatureExtractor] = None) -> float:
    extractor = extractor or default_video_extractor()
    if len(real) < 2 or len(fake) < 2:
        raise MetricError("FVD needs at least 2 videos per set")
    m1, s1 = gaussian_stats(extractor(real))
    m2, s2 = gaussian_stats(extractor(fake))
    return frechet_distance(m1, s1, m2, s2)


@dataclass
class VideoQualityReport:
    fvd: Optional[float]
    ssim: float
    psnr: float
    perceptual: float
    per_video: list = field(default_factory=list)

    def as_record(self):
        return {"fvd": self.fvd, "ssim": self.ssim, "psnr": self.psnr, "perceptual": self.perceptual}


def video_quality(real_videos, fake_videos, extractor=None, backbone=None) -> VideoQualityReport:
    """Per-frame SSIM/PSNR/perceptual averaged per video then over videos; FVD over the sets."""
    if len(real_videos) != len(fake_videos) or not real_videos:
        raise MetricError("need equally many (>= 1) real and generated videos")
    backbone = backbone or default_backbone()
    rows = []
    for r, f in zip(real_videos, fake_videos):
        rf, ff = getattr(r, "frames", r), getattr(f, "frames", f)
        if np.shape(rf) != np.shape(ff):
            raise ShapeError(f"video shapes differ: {np.shape(rf)} vs {np.shape(ff)}")
        rows.append({
            "ssim": float(np.mean([ssim(a, b) for a, b in zip(rf, ff)])),
            "psnr": float(np.mean([psnr(a, b) for a, b in zip(rf, ff)])),
            "perceptual": float(np.mean([perceptual_distance(a, b, backbone) for a, b in zip(rf, ff)])),
        })
    v = None
    if len(real_videos) >= 2:
        v = fvd(real_videos, fake_videos, extractor)
    agg = {k: float(np.mean([row[k] for row in rows])) for k in ("ssim", "psnr", "perceptual")}
    return VideoQualityReport(v, agg["ssim"], agg["psnr"], agg["perceptual"], rows)


# ---------------------------------------------------------------------------
# classification


def _binary_auroc(y, s) -> float:
    pos = int(y.sum())
    neg = y.size - pos
    ranks = stats.rankdata(s)  # ties get averaged ranks
    return float((ranks[y].sum() - pos * (pos + 1) / 2) / (pos * neg))


def _binary_aupr(y, s) -> float:
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # one operating point per distinct score
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * envelope))


def _per_class(labels, scores, fn):
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        yb = y.astype(bool)
        if yb.all() or not yb.any():
            raise MetricError("binary labels need at least one positive and one negative (class 1)")
        return fn(yb, s)
    if s.ndim != 2 or s.shape[0] != y.shape[0]:
        raise ShapeError("multiclass scores must be (n_samples, n_classes)")
    vals = []
    for c in range(s.shape[1]):
        yb = y == c
        if yb.all() or not yb.any():
            raise MetricError(f"class {c} lacks positives or negatives")
        vals.append(fn(yb, s[:, c]))
    return float(np.mean(vals))


def auroc(labels, scores) -> float:
    """Rank-statistic AUROC; 2-D scores give the one-vs-rest macro average."""
    return _per_class(labels, scores, _binary_auroc)


def aupr(labels, scores) -> float:
    """Area under the precision-recall step curve with precision envelope; macro for 2-D scores."""
    return _per_class(labels, scores, _binary_aupr)


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RecallReport:
    recall: dict
    mean_recall: float
    n_queries: int
    excluded: int


def recall_at_k(ranked_ids, query_patients, gallery_patients: dict, ks=(1, 5, 10), query_ids=None) -> RecallReport:
    """``ranked_ids[q]`` lists gallery ids best-first; ``gallery_patients`` maps id -> patient."""
    hits = {k: 0 for k in ks}
    used = excluded = 0
    for qi, (ranking, qp) in enumerate(zip(ranked_ids, query_patients)):
        qid = None if query_ids is None else query_ids[qi]
        pool = [g for g in gallery_patients if g != qid]
        if not any(gallery_patients[g] == qp for g in pool):
            excluded += 1
            continue
        used += 1
        ranking = [g for g in ranking if g != qid]
        for k in ks:
            if any(gallery_patients[g] == qp for g in ranking[:k]):
                hits[k] += 1
    if used == 0:
        raise MetricError("no query has a same-patient item in the gallery")
    rec = {k: hits[k] / used for k in ks}
    return RecallReport(rec, float(np.mean(list(rec.values()))), used, excluded)


# ---------------------------------------------------------------------------
# statistics


@dataclass
class StatSummary:
    mean: float
    se: float
    ci95_low: float
    ci95_high: float
    n: int
    p_value: Optional[float] = None

    def as_record(self):
        return {"mean": self.mean, "se": self.se, "ci95_low": self.ci95_low, "ci95_high": self.ci95_high,
                "n": self.n, "p_value": self.p_value}


def summarize(runs: Sequence[float], comparator: Optional[Sequence[float]] = None, paired: bool = True) -> StatSummary:
    """Mean with a 1.96 * SE interval; two-sided t-test against ``comparator`` when given."""
    x = np.asarray(runs, dtype=np.float64)
    if x.size < 2:
        raise MetricError("summarize needs at least 2 runs")
    mean = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(x.size))
    p = None
    if comparator is not None:
        c = np.asarray(comparator, dtype=np.float64)
        if paired and c.shape != x.shape:
            raise MetricError("paired comparator must match runs in length")
        with np.errstate(all="ignore"):
            res = stats.ttest_rel(x, c) if paired else stats.ttest_ind(x, c)
        p = None if not np.isfinite(res.pvalue) else float(res.pvalue)
    return StatSummary(mean, se, mean - 1.96 * se, mean + 1.96 * se, int(x.size), p)


# ---------------------------------------------------------------------------
# flat tables


TABLE_FIELDS = ("metric", "split", "seed", "value")


def write_table(path, rows, fields=TABLE_FIELDS) -> None:
    extra = sorted({k for r in rows for k in r} - set(fields))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields) + extra)
        w.writeheader()
        for r in rows:
            w.writerow(r)
