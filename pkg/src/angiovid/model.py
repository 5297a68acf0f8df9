"""Autoregressive frame generator and mask-aware multi-scale patch discriminators."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import AngioVideo, FundusImage, even_phase_tags
from .errors import CheckpointError, ShapeError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 32
    downsample_stages: int = 3
    residual_blocks: int = 4
    window_size: int = 3
    frame_count: int = 12
    nce_layers: tuple = (1, 2)
    nce_dim: int = 128

    def __post_init__(self):
        if self.window_size < 1 or self.frame_count < 2:
            raise ValueError("window_size must be >= 1 and frame_count >= 2")
        object.__setattr__(self, "nce_layers", tuple(self.nce_layers))
        if any(not 0 <= i <= self.downsample_stages for i in self.nce_layers):
            raise ValueError("nce_layers must index encoder stages 0..downsample_stages")

    @property
    def input_channels(self):
        return 3 + self.window_size

    @property
    def feature_dim(self):
        return self.base_channels * 2 ** self.downsample_stages

    @classmethod
    def full_scale(cls):
        # encoder (stem + downsampling path) lands near 57M parameters
        return cls(base_channels=96, downsample_stages=5, residual_blocks=3)


@dataclass(frozen=True)
class DiscriminatorConfig:
    scales: int = 2
    base_channels: int = 32
    n_layers: int = 4  # stride-2 layers; each scale's patch grid is input / 2**n_layers

    def __post_init__(self):
        if self.scales < 2:
            raise ValueError("discriminator bank needs at least 2 scales")

    @classmethod
    def full_scale(cls):
        return cls(scales=3, base_channels=64)


class ResnetBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Global-generator style encoder / residual trunk / decoder.

    Input channels are the RGB source followed by ``window_size`` previous frames.
    Outputs a frame and an attention map, both in [0, 1].
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(cfg.input_channels, b, 7), nn.InstanceNorm2d(b), nn.ReLU(True)
        )
        self.down = nn.ModuleList()
        for i in range(cfg.downsample_stages):
            c = b * 2 ** i
            self.down.append(nn.Sequential(nn.Conv2d(c, 2 * c, 3, 2, 1), nn.InstanceNorm2d(2 * c), nn.ReLU(True)))
        deep = cfg.feature_dim
        self.trunk = nn.Sequential(*[ResnetBlock(deep) for _ in range(cfg.residual_blocks)])
        self.up = nn.ModuleList()
        for i in reversed(range(cfg.downsample_stages)):
            c = b * 2 ** (i + 1)
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(c, c // 2, 3, 2, 1, output_padding=1), nn.InstanceNorm2d(c // 2), nn.ReLU(True)
            ))
        self.to_frame = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(b, 1, 7))
        self.to_attention = nn.Conv2d(b, 1, 3, padding=1)
        # per-layer projection MLPs for the patch contrastive loss
        self.nce_heads = nn.ModuleList([
            nn.Sequential(nn.Linear(b * 2 ** i, cfg.nce_dim), nn.ReLU(True), nn.Linear(cfg.nce_dim, cfg.nce_dim))
            for i in cfg.nce_layers
        ])

    def encoder_parameters(self):
        yield from self.stem.parameters()
        yield from self.down.parameters()

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ShapeError(f"generator expects (N, {self.cfg.input_channels}, H, W), got {tuple(x.shape)}")
        k = 2 ** self.cfg.downsample_stages
        if x.shape[2] % k or x.shape[3] % k:
            raise ShapeError(f"spatial size {tuple(x.shape[2:])} not divisible by {k}")

    def encode_stages(self, x):
        """Features after the stem and after every downsampling stage."""
        self.check_input(x)
        feats = [self.stem(x)]
        for stage in self.down:
            feats.append(stage(feats[-1]))
        return feats

    def forward(self, x):
        h = self.encode_stages(x)[-1]
        h = self.trunk(h)
        for stage in self.up:
            h = stage(h)
        return torch.sigmoid(self.to_frame(h)), torch.sigmoid(self.to_attention(h))

    def nce_features(self, x):
        feats = self.encode_stages(x)
        return [feats[i] for i in self.cfg.nce_layers]


class PatchDiscriminator(nn.Module):
    def __init__(self, in_ch, ndf, n_layers):
        super().__init__()
        layers = [nn.Sequential(nn.Conv2d(in_ch, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True))]
        c = ndf
        for _ in range(1, n_layers):
            nc = min(c * 2, ndf * 8)
            layers.append(nn.Sequential(nn.Conv2d(c, nc, 4, 2, 1), nn.InstanceNorm2d(nc), nn.LeakyReLU(0.2, True)))
            c = nc
        layers.append(nn.Sequential(nn.Conv2d(c, 1, 3, 1, 1)))
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats  # last entry is the patch score grid


class DiscriminatorBank(nn.Module):
    """Patch discriminators at successively halved resolutions.

    Every scale sees ``(source, frame, mask)`` stacked on the channel axis.
    """

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        self.scales = nn.ModuleList([PatchDiscriminator(5, cfg.base_channels, cfg.n_layers) for _ in range(cfg.scales)])

    def forward(self, source, frame, mask, return_features=False):
        if source.shape[1] != 3 or frame.shape[1] != 1 or mask.shape[1] != 1:
            raise ShapeError("discriminator expects 3-channel source, 1-channel frame and mask")
        if not (source.shape[2:] == frame.shape[2:] == mask.shape[2:]):
            raise ShapeError("source, frame and mask must share spatial size")
        x = torch.cat([source, frame, mask.to(frame.dtype)], 1)
        scores, feats = [], []
        for i, d in enumerate(self.scales):
            if i:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            out = d(x)
            scores.append(out[-1])
            feats.append(out[:-1])
        return (scores, feats) if return_features else scores


# ---------------------------------------------------------------------------
# numpy-facing inference helpers


@dataclass
class AttentionMap:
    map: np.ndarray


@dataclass
class EncoderFeatures:
    grid: np.ndarray  # (C, h, w)
    vector: np.ndarray  # (C,)

    @property
    def dim(self):
        return self.vector.shape[0]


def source_tensor(source) -> torch.Tensor:
    px = source.pixels if isinstance(source, FundusImage) else np.asarray(source, dtype=np.float32)
    if px.ndim == 3:
        px = px[None]
    return torch.from_numpy(np.ascontiguousarray(px.transpose(0, 3, 1, 2))).float()


def initial_window(source: torch.Tensor, window_size: int) -> torch.Tensor:
    n, _, h, w = source.shape
    return source.new_zeros(n, window_size, h, w)


def _dtype(model):
    return next(model.parameters()).dtype


def generate_next_frame(gen: Generator, source: FundusImage, window):
    """One generator step from numpy inputs; returns (frame, AttentionMap)."""
    src = source_tensor(source).to(_dtype(gen))
    win = np.asarray(window, dtype=np.float32)
    if win.ndim != 3 or win.shape[0] != gen.cfg.window_size:
        raise ShapeError(f"window must hold {gen.cfg.window_size} frames, got shape {win.shape}")
    if win.shape[1:] != src.shape[2:]:
        raise ShapeError(f"window frames {win.shape[1:]} do not match source {tuple(src.shape[2:])}")
    x = torch.cat([src, torch.from_numpy(win)[None].to(src.dtype)], 1)
    with torch.no_grad():
        frame, att = gen(x)
    return frame[0, 0].float().numpy(), AttentionMap(att[0, 0].float().numpy())


@torch.no_grad()
def rollout_tensor(gen: Generator, source: torch.Tensor, T: int):
    """Free-running generation from a batch of sources; returns (N, T, H, W) frames and attentions."""
    if T < 1:
        raise ValueError("rollout length must be >= 1")
    window = initial_window(source, gen.cfg.window_size)
    frames, atts = [], []
    for _ in range(T):
        frame, att = gen(torch.cat([source, window], 1))
        frames.append(frame)
        atts.append(att)
        window = torch.cat([window[:, 1:], frame], 1)
    return torch.cat(frames, 1), torch.cat(atts, 1)


def rollout(gen: Generator, source: FundusImage, T: int = 12):
    if T < 1:
        raise ValueError("rollout length must be >= 1")
    frames, atts = rollout_tensor(gen, source_tensor(source).to(_dtype(gen)), T)
    video = AngioVideo(frames[0].float().numpy(), even_phase_tags(T))
    return video, [AttentionMap(a.float().numpy()) for a in atts[0]]


@torch.no_grad()
def encode_tensor(gen: Generator, source: torch.Tensor) -> torch.Tensor:
    """Deepest encoder-stage features (before the residual trunk) for a batch of sources."""
    x = torch.cat([source, initial_window(source, gen.cfg.window_size)], 1)
    return gen.encode_stages(x)[-1]


def encode(gen: Generator, source: FundusImage) -> EncoderFeatures:
    grid = encode_tensor(gen, source_tensor(source).to(_dtype(gen)))[0]
    return EncoderFeatures(grid.float().numpy(), grid.mean(dim=(1, 2)).float().numpy())


def discriminate(bank: DiscriminatorBank, source: FundusImage, frame, mask) -> list:
    src = source_tensor(source).to(_dtype(bank))
    fr = torch.as_tensor(np.asarray(frame, dtype=np.float32))[None, None].to(src.dtype)
    m = mask.map if hasattr(mask, "map") else mask
    mt = torch.as_tensor(np.asarray(m, dtype=np.float32))[None, None].to(src.dtype)
    with torch.no_grad():
        scores = bank(src, fr, mt)
    return [s[0, 0].float().numpy() for s in scores]


def count_parameters(params) -> int:
    return sum(p.numel() for p in params)


def encoder_parameter_count(cfg: GeneratorConfig) -> int:
    with torch.device("meta"):
        gen = Generator(cfg)
    return count_parameters(gen.encoder_parameters())


# ---------------------------------------------------------------------------
# checkpoint archives

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def write_archive(path, meta: dict, blobs: dict) -> None:
    """Zip of ``meta.json`` plus one ``.npy`` per blob; fixed timestamps keep it byte-stable."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", _EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for key in sorted(blobs):
            info = zipfile.ZipInfo(f"blobs/{key}.npy", _EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, _npy_bytes(blobs[key]))


def read_archive(path):
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            blobs = {}
            for name in zf.namelist():
                if name.startswith("blobs/") and name.endswith(".npy"):
                    blobs[name[6:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError, ValueError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version mismatch: expected {FORMAT_VERSION}, got {meta.get('format_version')}"
        )
    return meta, blobs


def module_blobs(prefix: str, module: nn.Module) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_blobs(prefix: str, module: nn.Module, blobs: dict) -> None:
    own = module.state_dict()
    state = {}
    for k in own:
        key = f"{prefix}/{k}"
        if key not in blobs:
            raise CheckpointError(f"checkpoint lacks parameter {key}")
        if tuple(blobs[key].shape) != tuple(own[k].shape):
            raise CheckpointError(f"shape mismatch for {key}: {blobs[key].shape} vs {tuple(own[k].shape)}")
        state[k] = torch.from_numpy(blobs[key].copy())
    module.load_state_dict(state)


def _config_dict(cfg):
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_models(path, gen: Generator, bank: Optional[DiscriminatorBank] = None, extra_meta=None, extra_blobs=None):
    meta = {"format_version": FORMAT_VERSION, "generator_config": _config_dict(gen.cfg)}
    blobs = module_blobs("generator", gen)
    if bank is not None:
        meta["discriminator_config"] = _config_dict(bank.cfg)
        blobs.update(module_blobs("discriminator", bank))
    meta.update(extra_meta or {})
    blobs.update(extra_blobs or {})
    write_archive(path, meta, blobs)


def load_models(path, expect: Optional[GeneratorConfig] = None):
    """Returns (generator, discriminator bank or None, meta, blobs)."""
    meta, blobs = read_archive(path)
    try:
        gcfg = GeneratorConfig(**meta["generator_config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad generator config in {path}: {e}") from None
    if expect is not None and expect != gcfg:
        raise CheckpointError(f"checkpoint generator config {gcfg} incompatible with requested {expect}")
    gen = Generator(gcfg)
    load_module_blobs("generator", gen, blobs)
    bank = None
    if "discriminator_config" in meta:
        bank = DiscriminatorBank(DiscriminatorConfig(**meta["discriminator_config"]))
        load_module_blobs("discriminator", bank, blobs)
    gen.eval()
    return gen, bank, meta, blobs


def state_hash(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
