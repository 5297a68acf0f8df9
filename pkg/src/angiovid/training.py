"""Teacher-forced sliding-window training, temporal smoothing and checkpointed fitting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import metrics as M
from .data import AngioVideo, DatasetManifest, load_sample
from .errors import CheckpointError, ConfigError, DataError
from .mask import KnowledgeMask, ThresholdPolicy, compute_mask
from .model import (
    DiscriminatorBank,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    load_module_blobs,
    module_blobs,
    read_archive,
    rollout_tensor,
    write_archive,
    FORMAT_VERSION,
    _config_dict,
)
from .objectives import (
    LossReport,
    LossWeights,
    PatchSamplingConfig,
    attention_loss,
    feature_matching_loss,
    gan_loss,
    masked_l1,
    masked_patchnce_loss,
    total_loss,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 4
    generator_lr: float = 2e-4
    discriminator_lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    seed: int = 0
    smoothing: bool = True
    checkpoint_every: int = 0  # steps; 0 keeps only the final checkpoint
    resolution: int = 64
    max_steps: Optional[int] = None
    feature_matching_weight: float = 10.0
    validate: bool = True

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.generator_lr <= 0 or self.discriminator_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")


def temporal_smooth(video):
    """Three-frame moving average with edge replication; tags and length are kept."""
    frames = np.asarray(getattr(video, "frames", video), dtype=np.float64)
    if frames.shape[0] == 0:
        raise DataError("cannot smooth an empty video")
    padded = np.concatenate([frames[:1], frames, frames[-1:]], 0)
    out = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
    if isinstance(video, AngioVideo):
        return AngioVideo(out.astype(np.float32), video.phase_tags, video.timestamps)
    return out


def collate(samples, masks):
    source = torch.from_numpy(np.stack([s.source.pixels.transpose(2, 0, 1) for s in samples]))
    target = torch.from_numpy(np.stack([s.target.frames for s in samples]))
    mask = torch.from_numpy(np.stack([m.map if isinstance(m, KnowledgeMask) else m for m in masks]))[:, None]
    return source.float(), target.float(), mask.float()


def teacher_forced_inputs(source, target, window_size):
    """(B*T, 3 + w, H, W) inputs whose previous-frame channels hold ground truth (zeros before t=0)."""
    b, t, h, w = target.shape
    padded = torch.cat([target.new_zeros(b, window_size, h, w), target], 1)
    windows = torch.stack([padded[:, i:i + window_size] for i in range(t)], 1)
    src = source[:, None].expand(b, t, *source.shape[1:])
    return torch.cat([src, windows], 2).reshape(b * t, 3 + window_size, h, w), padded


class Trainer:
    """Owns generator, discriminator bank, optimizers and the step counter."""

    def __init__(self, gen_cfg=GeneratorConfig(), disc_cfg=DiscriminatorConfig(), train_cfg=TrainConfig(),
                 weights=LossWeights(), patch_cfg=PatchSamplingConfig(), total_steps: Optional[int] = None):
        self.gen_cfg, self.disc_cfg, self.cfg = gen_cfg, disc_cfg, train_cfg
        self.weights, self.patch_cfg = weights, patch_cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(train_cfg.seed)
            self.G = Generator(gen_cfg)
            self.D = DiscriminatorBank(disc_cfg)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=train_cfg.generator_lr, betas=train_cfg.betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=train_cfg.discriminator_lr, betas=train_cfg.betas)
        self.step = 0
        self.epoch = 0
        self.total_steps = total_steps

    def lr_scale(self) -> float:
        """1 for the first half of training, then linear decay towards 0."""
        if not self.total_steps:
            return 1.0
        half = self.total_steps / 2
        return 1.0 - max(0.0, self.step - half) / (self.total_steps - half + 1)

    def _set_lr(self):
        s = self.lr_scale()
        for g in self.opt_g.param_groups:
            g["lr"] = self.cfg.generator_lr * s
        for g in self.opt_d.param_groups:
            g["lr"] = self.cfg.discriminator_lr * s

    def teacher_forced_step(self, source, target, mask) -> LossReport:
        if target.shape[1] != self.gen_cfg.frame_count:
            raise DataError(f"target has {target.shape[1]} frames; phase-sample to {self.gen_cfg.frame_count} first")
        self.G.train()
        self.D.train()
        self._set_lr()
        b, t, h, w = target.shape
        ws = self.gen_cfg.window_size
        x, padded = teacher_forced_inputs(source, target, ws)
        real = target.reshape(b * t, 1, h, w)
        src = x[:, :3]
        m = mask.repeat_interleave(t, 0)

        fake, att = self.G(x)

        # discriminator update
        for p in self.D.parameters():
            p.requires_grad_(True)
        l_d = gan_loss(self.D(src, real, m), self.D(src, fake.detach(), m), m, "discriminator")
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.opt_d.step()

        # generator update
        for p in self.D.parameters():
            p.requires_grad_(False)
        scores_fake, feats_fake = self.D(src, fake, m, return_features=True)
        with torch.no_grad():
            _, feats_real = self.D(src, real, m, return_features=True)
        l_adv = gan_loss(None, scores_fake, m, "generator")
        l_fm = feature_matching_loss(feats_real, feats_fake)
        l_gan = l_adv + self.cfg.feature_matching_weight * l_fm

        # contrastive term: encoder view of the next-step input, holding the real or generated frame
        nxt = torch.stack([padded[:, i + 1:i + 1 + ws] for i in range(t)], 1).reshape(b * t, ws, h, w)
        with torch.no_grad():
            nce_real = self.G.nce_features(torch.cat([src, nxt], 1))
        nce_fake = self.G.nce_features(torch.cat([src, nxt[:, :-1], fake], 1))
        rng = torch.Generator().manual_seed(self.cfg.seed * 1_000_003 + self.step)
        l_nce = masked_patchnce_loss(nce_real, nce_fake, m, self.patch_cfg, generator=rng,
                                     projectors=self.G.nce_heads)
        l_l1 = masked_l1(fake, real, m, self.patch_cfg.mask_weight_alpha)
        l_mask = l_nce + self.patch_cfg.l1_weight * l_l1
        l_att = attention_loss(att, m)

        total = self.weights.combine(l_mask, l_att, l_gan)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        for p in self.D.parameters():
            p.requires_grad_(True)

        self.step += 1
        report = total_loss(l_mask, l_att, l_gan, self.weights, step=self.step)
        report.extras = {"l_d": float(l_d.detach()), "l_nce": float(l_nce.detach()), "l_l1": float(l_l1.detach()),
                         "l_adv": float(l_adv.detach()), "l_fm": float(l_fm.detach())}
        return report

    # -- persistence

    def state_blobs(self):
        blobs = module_blobs("generator", self.G)
        blobs.update(module_blobs("discriminator", self.D))
        meta = {}
        for name, opt in (("optim_g", self.opt_g), ("optim_d", self.opt_d)):
            sd = opt.state_dict()
            for idx, st in sd["state"].items():
                for k, v in st.items():
                    blobs[f"{name}/state/{idx}/{k}"] = v.detach().cpu().numpy()
            meta[name] = {"param_groups": [
                {k: list(v) if isinstance(v, tuple) else v for k, v in g.items()} for g in sd["param_groups"]
            ]}
        return meta, blobs

    def save(self, path):
        meta, blobs = self.state_blobs()
        meta.update({
            "format_version": FORMAT_VERSION,
            "kind": "train_state",
            "step": self.step,
            "epoch": self.epoch,
            "total_steps": self.total_steps,
            "generator_config": _config_dict(self.gen_cfg),
            "discriminator_config": _config_dict(self.disc_cfg),
            "train_config": _config_dict(self.cfg),
            "loss_weights": asdict(self.weights),
            "patch_config": asdict(self.patch_cfg),
        })
        write_archive(path, meta, blobs)

    @classmethod
    def load(cls, path, train_cfg: Optional[TrainConfig] = None):
        meta, blobs = read_archive(path)
        if meta.get("kind") != "train_state":
            raise CheckpointError(f"{path} is not a training-state checkpoint")
        gcfg = GeneratorConfig(**meta["generator_config"])
        dcfg = DiscriminatorConfig(**meta["discriminator_config"])
        tcfg = train_cfg or TrainConfig(**meta["train_config"])
        tr = cls(gcfg, dcfg, tcfg, LossWeights(**meta["loss_weights"]), PatchSamplingConfig(**meta["patch_config"]),
                 meta.get("total_steps"))
        load_module_blobs("generator", tr.G, blobs)
        load_module_blobs("discriminator", tr.D, blobs)
        for name, opt in (("optim_g", tr.opt_g), ("optim_d", tr.opt_d)):
            state: dict = {}
            prefix = f"{name}/state/"
            for key, arr in blobs.items():
                if key.startswith(prefix):
                    idx, k = key[len(prefix):].split("/")
                    state.setdefault(int(idx), {})[k] = torch.from_numpy(arr.copy())
            groups = [{k: tuple(v) if k == "betas" else v for k, v in g.items()} for g in meta[name]["param_groups"]]
            opt.load_state_dict({"state": state, "param_groups": groups})
        tr.step, tr.epoch = meta["step"], meta["epoch"]
        return tr

    # -- inference

    def generate(self, source, T=None, smooth=None):
        self.G.eval()
        frames, _ = rollout_tensor(self.G, source, T or self.gen_cfg.frame_count)
        out = frames.numpy()
        if self.cfg.smoothing if smooth is None else smooth:
            out = np.stack([temporal_smooth(v) for v in out])
        return out


# ---------------------------------------------------------------------------
# fitting


def prepare_samples(manifest: DatasetManifest, split: str, resolution: int, per_phase: int = 4,
                    policy: ThresholdPolicy = ThresholdPolicy()):
    samples = [load_sample(manifest, r, resolution, per_phase) for r in manifest.split(split)]
    masks = [compute_mask(s.target, policy) for s in samples]
    return samples, masks


def _read_log(path: Path):
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _append(path: Path, record: dict):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def validation_record(trainer: Trainer, samples, extractor=None, backbone=None) -> dict:
    source, target, _ = collate(samples, [np.zeros(s.source.shape, np.float32) for s in samples])
    fake = trainer.generate(source, target.shape[1])
    report = M.video_quality(list(target.numpy()), list(fake), extractor, backbone)
    return report.as_record()


def fit(manifest: DatasetManifest, cfg: TrainConfig, out_dir, gen_cfg=GeneratorConfig(),
        disc_cfg=DiscriminatorConfig(), weights=LossWeights(), patch_cfg=PatchSamplingConfig(),
        policy: ThresholdPolicy = ThresholdPolicy(), resume: Optional[str] = None,
        samples=None, val_samples=None):
    """Train on the manifest's ``train`` split; returns (trainer, list of train LossReports this call).

    Writes ``metrics.jsonl`` and checkpoints under ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    if samples is None:
        samples, masks = prepare_samples(manifest, "train", cfg.resolution, policy=policy)
    else:
        samples, masks = samples
    if not samples:
        raise DataError("training split is empty")
    if cfg.validate and val_samples is None:
        val_samples = [load_sample(manifest, r, cfg.resolution) for r in manifest.split("val")]
        if not val_samples:
            raise ConfigError("manifest has no 'val' split; add one or disable validation")
    n = len(samples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch if cfg.max_steps is None else min(cfg.max_steps, cfg.epochs * per_epoch)

    if resume:
        trainer = Trainer.load(resume, cfg)
        kept = [r for r in _read_log(log_path) if r.get("step", 0) <= trainer.step]
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
    else:
        trainer = Trainer(gen_cfg, disc_cfg, cfg, weights, patch_cfg, total)
        log_path.write_text("")
    trainer.total_steps = total

    reports = []
    while trainer.step < total:
        epoch = trainer.step // per_epoch
        trainer.epoch = epoch
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for bi in range(trainer.step - epoch * per_epoch, per_epoch):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            batch = collate([samples[i] for i in idx], [masks[i] for i in idx])
            rep = trainer.teacher_forced_step(*batch)
            reports.append(rep)
            _append(log_path, {"kind": "train", "epoch": epoch, **rep.as_record()})
            if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                trainer.save(out / f"ckpt_step{trainer.step:06d}.zip")
            if trainer.step >= total:
                break
        if trainer.step % per_epoch == 0 or trainer.step >= total:
            trainer.epoch = epoch + 1
            if cfg.validate and val_samples:
                rec = validation_record(trainer, val_samples)
                _append(log_path, {"kind": "val", "epoch": epoch, "step": trainer.step, **rec})
    trainer.save(out / "final.zip")
    return trainer, reports
