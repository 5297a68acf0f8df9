"""Transfer harness for a frozen or fine-tuned generator encoder.

Covers embeddings, prototype (zero-shot) scoring, few-shot and fused supervised
probes, segmentation fine-tuning, and same-patient retrieval.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics as M
from .errors import ConfigError, DataError, MetricError, ShapeError
from .model import Generator, GeneratorConfig, encode_tensor, state_hash


# ---------------------------------------------------------------------------
# encoders and embeddings


class EncoderHandle:
    """A generator whose encoder serves as a feature extractor.

    Baselines (random init, other translation models) plug in through the same
    interface by wrapping a different generator.
    """

    def __init__(self, generator: Generator, encoder_id: str, resolution: Optional[int] = None):
        self.generator = generator.eval()
        self.encoder_id = encoder_id
        self.resolution = resolution

    @classmethod
    def random(cls, cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0, resolution=None):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            gen = Generator(cfg)
        return cls(gen, f"random-{seed}", resolution)

    @property
    def dim(self):
        return self.generator.cfg.feature_dim

    def state_hash(self) -> str:
        return state_hash(self.generator)

    def embed(self, images, batch_size: int = 32) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float32)
        if imgs.ndim == 3:
            imgs = imgs[None]
        if self.resolution and imgs.shape[1:3] != (self.resolution, self.resolution):
            raise ShapeError(f"images are {imgs.shape[1:3]}, encoder expects {self.resolution}x{self.resolution}")
        out = []
        for i in range(0, len(imgs), batch_size):
            x = torch.from_numpy(imgs[i:i + batch_size].transpose(0, 3, 1, 2).copy())
            out.append(encode_tensor(self.generator, x).mean(dim=(2, 3)).double().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.dim))


@contextlib.contextmanager
def assert_frozen(*handles):
    """Raise if any handle's parameters change inside the block."""
    before = [h.state_hash() for h in handles]
    yield
    for h, b in zip(handles, before):
        if h.state_hash() != b:
            raise RuntimeError(f"encoder {h.encoder_id} was modified on a frozen path")


@dataclass
class Embedding:
    vector: np.ndarray
    encoder_id: str
    input_id: str
    patient_id: str


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (N, D)
    labels: Optional[np.ndarray] = None
    patient_ids: Sequence[str] = ()
    ids: Sequence[str] = ()

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = len(self.vectors)
        if not len(self.ids):
            self.ids = [str(i) for i in range(n)]
        if not len(self.patient_ids):
            self.patient_ids = list(self.ids)
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
        if len(self.ids) != n or len(self.patient_ids) != n or (self.labels is not None and len(self.labels) != n):
            raise ShapeError("embedding set fields differ in length")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("embeddings must be finite")

    def __len__(self):
        return len(self.vectors)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return EmbeddingSet(
            self.vectors[idx],
            None if self.labels is None else self.labels[idx],
            [self.patient_ids[i] for i in idx],
            [self.ids[i] for i in idx],
        )


def input_hash(image) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float32).tobytes()).hexdigest()[:32]


class EmbeddingCache:
    """On-disk cache keyed by (encoder id, input hash)."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, encoder_id, key):
        return self.dir / f"{encoder_id}__{key}.npy"

    def get_or_compute(self, handle: EncoderHandle, images) -> np.ndarray:
        out = [None] * len(images)
        todo = []
        for i, im in enumerate(images):
            p = self._path(handle.encoder_id, input_hash(im))
            if p.exists():
                out[i] = np.load(p)
            else:
                todo.append(i)
        if todo:
            vecs = handle.embed(np.stack([images[i] for i in todo]))
            for i, v in zip(todo, vecs):
                np.save(self._path(handle.encoder_id, input_hash(images[i])), v)
                out[i] = v
        return np.stack(out)


def extract_embeddings(handle: EncoderHandle, images, ids=None, patient_ids=None, cache: Optional[EmbeddingCache] = None):
    images = np.asarray(images, dtype=np.float32)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    patient_ids = list(patient_ids) if patient_ids is not None else list(ids)
    vecs = cache.get_or_compute(handle, images) if cache else handle.embed(images)
    return [Embedding(v, handle.encoder_id, i, p) for v, i, p in zip(vecs, ids, patient_ids)]


def embed_set(handle: EncoderHandle, images, labels=None, patient_ids=(), ids=(), cache=None) -> EmbeddingSet:
    embs = extract_embeddings(handle, images, ids or None, patient_ids or None, cache)
    return EmbeddingSet(np.stack([e.vector for e in embs]), labels,
                        [e.patient_id for e in embs], [e.input_id for e in embs])


# ---------------------------------------------------------------------------
# zero-shot prototype scoring


def zero_shot_classify(queries, reference, reference_labels=None, classes=None) -> np.ndarray:
    """Cosine similarity of each query to each class centroid of the reference pool; (N, C)."""
    if isinstance(reference, EmbeddingSet):
        reference_labels = reference.labels if reference_labels is None else reference_labels
        reference = reference.vectors
    q = np.asarray(getattr(queries, "vectors", queries), dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    lab = np.asarray(reference_labels)
    classes = np.unique(lab) if classes is None else classes
    cents = []
    for c in classes:
        sel = lab == c
        if not sel.any():
            raise DataError(f"class {c} has no reference examples")
        cents.append(ref[sel].mean(0))
    cents = np.stack(cents)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    cn = cents / np.maximum(np.linalg.norm(cents, axis=1, keepdims=True), 1e-12)
    return qn @ cn.T


def class_scores_metrics(labels, scores):
    """AUROC/AUPR from (N, C) scores; binary tasks use the positive-class column."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[1] == 2:
        return M.auroc(labels, scores[:, 1] - scores[:, 0]), M.aupr(labels, scores[:, 1] - scores[:, 0])
    return M.auroc(labels, scores), M.aupr(labels, scores)


# ---------------------------------------------------------------------------
# probes


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "few_shot"  # zero_shot | few_shot | supervised
    support_per_class: int = 1
    split_ratios: tuple = (55, 15, 30)
    label_smoothing: float = 0.1
    epochs: int = 50
    batch_size: int = 16
    warmup_epochs: int = 10
    lr_peak: float = 5e-4
    lr_floor: float = 1e-6
    hidden: int = 256
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "split_ratios", tuple(self.split_ratios))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.mode not in ("zero_shot", "few_shot", "supervised"):
            raise ConfigError(f"unknown probe mode {self.mode!r}")
        if sum(self.split_ratios) != 100:
            raise ConfigError("split ratios must sum to 100")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be smaller than epochs")


def lr_at(epoch: int, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Learning rate for 1-based ``epoch``: linear warmup from 0, then cosine to the floor."""
    if epoch <= cfg.warmup_epochs:
        return cfg.lr_peak * epoch / cfg.warmup_epochs
    frac = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1 + math.cos(math.pi * frac))


def lr_trace(cfg: ProbeConfig = ProbeConfig()) -> list:
    return [lr_at(e, cfg) for e in range(1, cfg.epochs + 1)]


def _prep(x):
    # scale-free input: unit norm times sqrt(dim)
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    return F.normalize(x, dim=1) * math.sqrt(x.shape[1])


class ProbeHead(nn.Module):
    def __init__(self, dim, n_classes, hidden=256):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(True), nn.Linear(hidden, n_classes))

    def forward(self, x):
        return self.net(x)


class FusionHead(nn.Module):
    """Projects two encoders to a shared width and mixes them with a per-sample softmax gate."""

    def __init__(self, dim_a, dim_b, n_classes, width=256, hidden=256):
        super().__init__()
        self.proj_a = nn.Linear(dim_a, width)
        self.proj_b = nn.Linear(dim_b, width)
        self.gate = nn.Linear(width, 1)
        self.classifier = nn.Sequential(nn.Linear(width, hidden), nn.ReLU(True), nn.Linear(hidden, n_classes))

    def forward(self, xa, xb, return_gates=False):
        h = torch.stack([torch.tanh(self.proj_a(xa)), torch.tanh(self.proj_b(xb))], 1)  # (N, 2, W)
        gates = torch.softmax(self.gate(h).squeeze(-1), dim=1)
        logits = self.classifier((gates.unsqueeze(-1) * h).sum(1))
        return (logits, gates) if return_gates else logits


def _train_loop(model, inputs, y, cfg: ProbeConfig, seed: int, evaluate=None):
    """Shared schedule; ``inputs`` is a tuple of tensors.

    ``evaluate`` returns ``(score, tiebreak)``; the weights with the highest pair are kept.
    """
    opt = torch.optim.Adam(model.parameters(), lr=0.0)
    loss_fn = nn.CrossEntropyLoss(label_smoothing=cfg.label_smoothing)
    y = torch.as_tensor(y, dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    trace, history = [], []
    best, best_state, best_epoch = None, None, None
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        trace.append(lr)
        model.train()
        perm = torch.randperm(len(y), generator=gen)
        for i in range(0, len(y), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss = loss_fn(model(*[t[idx] for t in inputs]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if evaluate is not None:
            model.eval()
            score = evaluate(model)
            history.append(score[0])
            if best is None or score > best:
                best, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return trace, history, best_epoch


@dataclass
class ProbeRun:
    seed: int
    shots: int
    auroc: float
    aupr: float
    scores: Optional[np.ndarray] = None


def _check_disjoint(a_patients, b_patients, what="support and test"):
    shared = set(a_patients) & set(b_patients)
    if shared:
        raise DataError(f"patients shared between {what}: {sorted(shared)[:5]}")


def draw_support(labels, shots: int, rng: np.random.Generator, classes=None) -> np.ndarray:
    labels = np.asarray(labels)
    classes = np.unique(labels) if classes is None else classes
    picked = []
    for c in classes:
        pool = np.flatnonzero(labels == c)
        if len(pool) < shots:
            raise DataError(f"class {c} has {len(pool)} samples, {shots} shots requested")
        picked.extend(rng.choice(pool, size=shots, replace=False).tolist())
    return np.asarray(sorted(picked))


def few_shot_train(pool: EmbeddingSet, test: EmbeddingSet, shots: int, cfg: ProbeConfig = ProbeConfig(),
                   seeds=None) -> list:
    """One probe per seed, each on a freshly drawn support set of ``shots`` examples per class."""
    classes = np.unique(pool.labels)
    runs = []
    for seed in (cfg.seeds if seeds is None else seeds):
        rng = np.random.default_rng([seed, shots])
        sup = pool.subset(draw_support(pool.labels, shots, rng, classes))
        _check_disjoint(sup.patient_ids, test.patient_ids)
        y = np.searchsorted(classes, sup.labels)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            head = ProbeHead(pool.vectors.shape[1], len(classes), cfg.hidden)
        _train_loop(head, (_prep(sup.vectors),), y, cfg, seed)
        with torch.no_grad():
            scores = torch.softmax(head(_prep(test.vectors)), 1).double().numpy()
        au, ap = class_scores_metrics(np.searchsorted(classes, test.labels), scores)
        runs.append(ProbeRun(seed, shots, au, ap, scores))
    return runs


def zero_shot_eval(reference: EmbeddingSet, test: EmbeddingSet) -> ProbeRun:
    _check_disjoint(reference.patient_ids, test.patient_ids, "reference and test")
    classes = np.unique(reference.labels)
    scores = zero_shot_classify(test, reference.vectors, reference.labels, classes)
    au, ap = class_scores_metrics(np.searchsorted(classes, test.labels), scores)
    return ProbeRun(0, 0, au, ap, scores)


def patient_split(patient_ids, labels=None, ratios=(55, 15, 30), seed: int = 0):
    """Split indices into train/val/test by patient, stratified by each patient's first label."""
    patient_ids = list(patient_ids)
    first: dict = {}
    for i, p in enumerate(patient_ids):
        first.setdefault(p, None if labels is None else labels[i])
    groups: dict = {}
    for p, lab in first.items():
        groups.setdefault(lab, []).append(p)
    rng = np.random.default_rng(seed)
    assign = {}
    for lab in sorted(groups, key=str):
        ps = list(groups[lab])
        rng.shuffle(ps)
        n = len(ps)
        n_val = max(1, round(n * ratios[1] / 100)) if n >= 3 else 0
        n_test = max(1, round(n * ratios[2] / 100)) if n >= 2 else 0
        n_train = n - n_val - n_test
        for j, p in enumerate(ps):
            assign[p] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    out = {k: np.asarray([i for i, p in enumerate(patient_ids) if assign[p] == k], dtype=int)
           for k in ("train", "val", "test")}
    return out


@dataclass
class FusedResult:
    head: FusionHead
    test_auroc: float
    test_aupr: float
    lr_trace: list
    val_aurocs: list
    best_epoch: int
    test_gates: np.ndarray


def supervised_train_fused(set_a: EmbeddingSet, set_b: EmbeddingSet, cfg: ProbeConfig = ProbeConfig(),
                           seed: int = 0) -> FusedResult:
    """Fusion probe over two frozen encoders' embeddings of the same images."""
    if list(set_a.ids) != list(set_b.ids):
        raise DataError("the two embedding sets must cover the same inputs in the same order")
    classes = np.unique(set_a.labels)
    split = patient_split(set_a.patient_ids, set_a.labels, cfg.split_ratios, seed)
    if len(split["val"]) == 0:
        raise DataError("validation split is empty")
    y = np.searchsorted(classes, set_a.labels)
    xa, xb = _prep(set_a.vectors), _prep(set_b.vectors)
    tr, va, te = (torch.as_tensor(split[k]) for k in ("train", "val", "test"))

    def val_auroc(model):
        # AUROC saturates quickly on easy data; validation loss breaks the ties
        with torch.no_grad():
            logits = model(xa[va], xb[va])
        neg_loss = -float(F.cross_entropy(logits, torch.as_tensor(y[split["val"]])))
        s = torch.softmax(logits, 1).double().numpy()
        try:
            return class_scores_metrics(y[split["val"]], s)[0], neg_loss
        except MetricError:
            return neg_loss, neg_loss

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = FusionHead(xa.shape[1], xb.shape[1], len(classes), hidden=cfg.hidden)
    trace, hist, best_epoch = _train_loop(head, (xa[tr], xb[tr]), y[split["train"]], cfg, seed, val_auroc)
    with torch.no_grad():
        logits, gates = head(xa[te], xb[te], return_gates=True)
    s = torch.softmax(logits, 1).double().numpy()
    au, ap = class_scores_metrics(y[split["test"]], s)
    return FusedResult(head, au, ap, trace, hist, best_epoch, gates.double().numpy())


# ---------------------------------------------------------------------------
# segmentation


@dataclass(frozen=True)
class SegmentationConfig:
    shots: int = 1
    epochs: int = 100
    resolution: int = 512
    lr: float = 1e-3
    encoder_lr_scale: float = 0.01  # few labels: nudge the pretrained encoder, train the fresh decoder
    brightness: float = 0.15
    contrast: float = 0.15
    crop_scale: float = 0.85
    flips: bool = True
    zero_shot_calibration: int = 1  # labeled images used to fit the linear decode when shots == 0

    def __post_init__(self):
        if self.shots < 0 or self.epochs < 1:
            raise ConfigError("shots must be >= 0 and epochs >= 1")


class SegmentationNet(nn.Module):
    """Copied generator encoder plus an upsampling decoder with skip connections."""

    def __init__(self, gen: Generator):
        super().__init__()
        self.window = gen.cfg.window_size
        self.stem = copy.deepcopy(gen.stem)
        self.down = copy.deepcopy(gen.down)
        b = gen.cfg.base_channels
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for i in reversed(range(gen.cfg.downsample_stages)):
            c_in, c_out = b * 2 ** (i + 1), b * 2 ** i
            self.up.append(nn.ConvTranspose2d(c_in, c_out, 4, 2, 1))
            self.fuse.append(nn.Sequential(nn.Conv2d(2 * c_out, c_out, 3, 1, 1), nn.ReLU(True)))
        self.head = nn.Conv2d(b, 1, 1)

    def encode(self, x):
        x = torch.cat([x, x.new_zeros(x.shape[0], self.window, *x.shape[2:])], 1)
        feats = [self.stem(x)]
        for d in self.down:
            feats.append(d(feats[-1]))
        return feats

    def forward(self, x):
        feats = self.encode(x)
        h = feats[-1]
        for up, fuse, skip in zip(self.up, self.fuse, reversed(feats[:-1])):
            h = fuse(torch.cat([up(h), skip], 1))
        return self.head(h)


class LinearDecode(nn.Module):
    """Per-pixel linear map over upsampled frozen encoder features."""

    def __init__(self, gen: Generator):
        super().__init__()
        self.window = gen.cfg.window_size
        self.gen = gen
        b = gen.cfg.base_channels
        self.head = nn.Conv2d(sum(b * 2 ** i for i in range(gen.cfg.downsample_stages + 1)), 1, 1)

    def forward(self, x):
        with torch.no_grad():
            xin = torch.cat([x, x.new_zeros(x.shape[0], self.window, *x.shape[2:])], 1)
            feats = self.gen.encode_stages(xin)
            cols = torch.cat([F.interpolate(f, size=x.shape[2:], mode="bilinear", align_corners=False)
                              for f in feats], 1)
        return self.head(cols)


def _augment(img, mask, cfg: SegmentationConfig, gen: torch.Generator):
    n, _, h, w = img.shape

    def u(lo, hi):
        return lo + (hi - lo) * float(torch.rand((), generator=gen))

    img = (img - 0.5) * u(1 - cfg.contrast, 1 + cfg.contrast) + 0.5 + u(-cfg.brightness, cfg.brightness)
    img = img.clamp(0, 1)
    if cfg.crop_scale < 1:
        s = u(cfg.crop_scale, 1.0)
        ch, cw = max(8, int(h * s)), max(8, int(w * s))
        y0 = int(torch.randint(0, h - ch + 1, (), generator=gen))
        x0 = int(torch.randint(0, w - cw + 1, (), generator=gen))
        img = F.interpolate(img[:, :, y0:y0 + ch, x0:x0 + cw], size=(h, w), mode="bilinear", align_corners=False)
        mask = (F.interpolate(mask[:, :, y0:y0 + ch, x0:x0 + cw], size=(h, w), mode="bilinear",
                              align_corners=False) > 0.5).float()
    if cfg.flips:
        if float(torch.rand((), generator=gen)) < 0.5:
            img, mask = img.flip(3), mask.flip(3)
        if float(torch.rand((), generator=gen)) < 0.5:
            img, mask = img.flip(2), mask.flip(2)
    return img, mask


@dataclass
class SegResult:
    seed: int
    shots: int
    dice: float
    auroc: float
    model: nn.Module = field(repr=False, default=None)
    pred_shape: tuple = ()


def _seg_loss(logits, y):
    # BCE alone under-calibrates thin, sparse foreground; the soft Dice term keeps Dice@0.5 meaningful
    p = torch.sigmoid(logits)
    soft_dice = 1 - (2 * (p * y).sum() + 1) / (p.sum() + y.sum() + 1)
    return F.binary_cross_entropy_with_logits(logits, y) + soft_dice


def _to_tensors(images, masks, res):
    from .data import resize_grid

    imgs = np.stack([resize_grid(im, res) for im in images])
    ms = np.stack([(resize_grid(np.asarray(m, np.float32), res) > 0.5).astype(np.float32) for m in masks])
    return torch.from_numpy(imgs.transpose(0, 3, 1, 2).copy()), torch.from_numpy(ms[:, None].copy())


def finetune_segmentation(handle: EncoderHandle, cfg: SegmentationConfig, train_images, train_masks,
                          test_images, test_masks, seed: int = 0) -> SegResult:
    """Fine-tune encoder + decoder on ``cfg.shots`` images (shots=0: linear decode on frozen features)."""
    if len(train_images) != len(train_masks) or len(test_images) != len(test_masks):
        raise ShapeError("images and masks differ in count")
    for im, m in zip(list(train_images) + list(test_images), list(train_masks) + list(test_masks)):
        if np.shape(im)[:2] != np.shape(m)[:2]:
            raise ShapeError(f"mask {np.shape(m)} misaligned with image {np.shape(im)}")
    k = 2 ** handle.generator.cfg.downsample_stages
    if cfg.resolution % k:
        raise ConfigError(f"segmentation resolution must be divisible by {k}")
    rng = np.random.default_rng([seed, cfg.shots, 17])
    n_sup = cfg.shots if cfg.shots > 0 else cfg.zero_shot_calibration
    if n_sup > len(train_images):
        raise DataError(f"{n_sup} support images requested, {len(train_images)} available")
    pick = rng.choice(len(train_images), size=n_sup, replace=False)
    x_tr, y_tr = _to_tensors([train_images[i] for i in pick], [train_masks[i] for i in pick], cfg.resolution)
    x_te, y_te = _to_tensors(test_images, test_masks, cfg.resolution)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = LinearDecode(handle.generator) if cfg.shots == 0 else SegmentationNet(handle.generator)
    if cfg.shots == 0:
        groups = [{"params": net.head.parameters()}]
    else:
        enc = list(net.stem.parameters()) + list(net.down.parameters())
        enc_ids = {id(p) for p in enc}
        groups = [{"params": enc, "lr": cfg.lr * cfg.encoder_lr_scale},
                  {"params": [p for p in net.parameters() if id(p) not in enc_ids]}]
    opt = torch.optim.Adam(groups, lr=cfg.lr)
    gen = torch.Generator().manual_seed(seed)
    bs = min(len(x_tr), 4)
    for _ in range(cfg.epochs):
        net.train()
        perm = torch.randperm(len(x_tr), generator=gen)
        for i in range(0, len(x_tr), bs):
            xb, yb = _augment(x_tr[perm[i:i + bs]], y_tr[perm[i:i + bs]], cfg, gen)
            loss = _seg_loss(net(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    with torch.no_grad():
        prob = torch.sigmoid(net(x_te)).double().numpy()[:, 0]
    truth = y_te.numpy()[:, 0]
    d = float(np.mean([M.dice((p > 0.5).astype(np.uint8), t.astype(np.uint8)) for p, t in zip(prob, truth)]))
    au = M.auroc(truth.ravel().astype(int), prob.ravel())
    return SegResult(seed, cfg.shots, d, au, net, tuple(prob.shape[1:]))


# ---------------------------------------------------------------------------
# retrieval


def retrieve(embeddings: EmbeddingSet, query_ids=None, ks=(1, 5, 10)):
    """Cosine ranking of the gallery for each query (query removed); stable tie-break by input order."""
    if len(embeddings) < 2:
        raise DataError("retrieval needs a gallery of at least one item besides the query")
    ids = list(embeddings.ids)
    pos = {g: i for i, g in enumerate(ids)}
    query_ids = ids if query_ids is None else list(query_ids)
    v = embeddings.vectors / np.maximum(np.linalg.norm(embeddings.vectors, axis=1, keepdims=True), 1e-12)
    rankings = {}
    for q in query_ids:
        sim = v @ v[pos[q]]
        order = np.argsort(-sim, kind="stable")
        rankings[q] = [ids[j] for j in order if ids[j] != q]
    gallery_patients = dict(zip(ids, embeddings.patient_ids))
    report = M.recall_at_k([rankings[q] for q in query_ids], [gallery_patients[q] for q in query_ids],
                           gallery_patients, ks, query_ids=query_ids)
    return rankings, report
