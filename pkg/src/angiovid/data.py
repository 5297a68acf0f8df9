"""Paired fundus / angiography data: types, manifest I/O, phase sampling, phantoms."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import (
    DataError,
    ManifestError,
    MissingFileError,
    PatientLeakageError,
    PhaseError,
    ShapeError,
)

PHASES = ("arterial", "venous", "late")
_PHASE_RANK = {p: i for i, p in enumerate(PHASES)}

# seconds after injection; arterial < 25 <= venous < 120 <= late
DEFAULT_PHASE_CUTOFFS = (25.0, 120.0)


@dataclass
class FundusImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    patient_id: str = ""
    eye: str = "unknown"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"fundus image must be HxWx3, got {px.shape}")
        if px.shape[0] < 16 or px.shape[1] < 16:
            raise ShapeError(f"fundus image must be at least 16x16, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise DataError("fundus pixels must be finite and within [0, 1]")
        if self.eye not in ("left", "right", "unknown"):
            raise DataError(f"eye must be left/right/unknown, got {self.eye!r}")
        self.pixels = px

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass
class AngioVideo:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    phase_tags: tuple = ()
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        fr = np.asarray(self.frames, dtype=np.float32)
        if fr.ndim != 3:
            raise ShapeError(f"video frames must be (T, H, W), got {fr.shape}")
        self.frames = fr
        tags = tuple(self.phase_tags)
        if len(tags) != fr.shape[0]:
            raise PhaseError(f"{len(tags)} phase tags for {fr.shape[0]} frames")
        for t in tags:
            if t not in _PHASE_RANK:
                raise PhaseError(f"unknown phase tag {t!r}")
        ranks = [_PHASE_RANK[t] for t in tags]
        if any(b < a for a, b in zip(ranks, ranks[1:])):
            raise PhaseError("phase tags must be ordered arterial -> venous -> late")
        self.phase_tags = tags
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=np.float64)
            if ts.shape != (fr.shape[0],):
                raise DataError("one timestamp per frame required")
            if np.any(ts < 0) or np.any(np.diff(ts) < 0):
                raise DataError("timestamps must be nonnegative and monotone")
            self.timestamps = ts

    def __len__(self):
        return self.frames.shape[0]

    def phase_counts(self):
        return {p: sum(1 for t in self.phase_tags if t == p) for p in PHASES}


@dataclass
class PairedSample:
    source: FundusImage
    target: AngioVideo
    patient_id: str
    lesion_truth: Optional[np.ndarray] = None
    vessel_truth: Optional[np.ndarray] = None
    sample_id: str = ""

    def __post_init__(self):
        if not self.patient_id:
            raise DataError("patient_id must be nonempty")
        if tuple(self.source.shape) != tuple(self.target.frames.shape[1:]):
            raise ShapeError(
                f"source {self.source.shape} and target {self.target.frames.shape[1:]} not registered"
            )


def even_indices(length: int, k: int) -> list[int]:
    """``k`` indices spread evenly over ``range(length)``, repeating when ``length < k``."""
    if length < 1:
        raise PhaseError("cannot sample from an empty phase")
    if k == 1:
        return [int(math.floor((length - 1) / 2 + 0.5))]
    # round half up, not banker's rounding
    return [int(math.floor(i * (length - 1) / (k - 1) + 0.5)) for i in range(k)]


def sample_phase_frames(video: AngioVideo, per_phase: int = 4) -> AngioVideo:
    if per_phase < 1:
        raise PhaseError("per_phase must be >= 1")
    picked = []
    for phase in PHASES:
        idx = [i for i, t in enumerate(video.phase_tags) if t == phase]
        if not idx:
            raise PhaseError(f"phase {phase!r} has no frames")
        picked.extend(idx[j] for j in even_indices(len(idx), per_phase))
    ts = None if video.timestamps is None else video.timestamps[picked]
    return AngioVideo(
        frames=video.frames[picked],
        phase_tags=tuple(video.phase_tags[i] for i in picked),
        timestamps=ts,
    )


def phase_tags_from_timestamps(timestamps, cutoffs=DEFAULT_PHASE_CUTOFFS) -> tuple:
    venous_start, late_start = cutoffs
    if not venous_start < late_start:
        raise PhaseError("phase cutoffs must be increasing")
    tags = []
    for t in timestamps:
        if t < venous_start:
            tags.append("arterial")
        elif t < late_start:
            tags.append("venous")
        else:
            tags.append("late")
    return tuple(tags)


def even_phase_tags(n: int) -> tuple:
    """Split ``n`` frames into contiguous arterial/venous/late thirds (4/4/4 for 12)."""
    counts = [len(c) for c in np.array_split(np.arange(n), 3)]
    return tuple(p for p, c in zip(PHASES, counts) for _ in range(c))


def normalize_frame(raw, bit_depth: int) -> np.ndarray:
    if bit_depth not in (8, 16):
        raise DataError(f"bit_depth must be 8 or 16, got {bit_depth}")
    arr = np.asarray(raw)
    top = (1 << bit_depth) - 1
    if arr.size and (arr.min() < 0 or arr.max() > top):
        raise DataError(f"values outside the {bit_depth}-bit range [0, {top}]")
    return (arr.astype(np.float64) / top).astype(np.float32)


def quantize_frame(grid, bit_depth: int) -> np.ndarray:
    top = (1 << bit_depth) - 1
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    return np.round(np.clip(np.asarray(grid, dtype=np.float64), 0, 1) * top).astype(dtype)


def resize_grid(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) grid to ``size`` x ``size``."""
    arr = np.asarray(grid, dtype=np.float32)
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr))
    t = t[None, None] if arr.ndim == 2 else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    out = out[0, 0] if arr.ndim == 2 else out[0].permute(1, 2, 0)
    return out.clamp(0, 1).numpy()


# ---------------------------------------------------------------------------
# frame files


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing file: {path}")
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.dtype == bool:
        return arr.astype(np.float32)
    depth = 16 if arr.dtype in (np.uint16, np.int32) else 8
    return normalize_frame(arr, depth)


def write_gray(path, grid, bit_depth: int = 16):
    q = quantize_frame(grid, bit_depth)
    im = Image.fromarray(q)
    im.save(path, format="PNG")


def write_rgb(path, pixels):
    Image.fromarray(quantize_frame(pixels, 8)).save(path, format="PNG")


def write_mask(path, grid):
    Image.fromarray(np.asarray(grid) > 0.5).save(path, format="PNG")


def write_video(directory, video: AngioVideo, bit_depth: int = 16) -> list[str]:
    """Write frames plus ``index.json``; returns frame file names in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(video.frames):
        name = f"frame_{i:03d}.png"
        write_gray(directory / name, frame, bit_depth)
        names.append(name)
    index = {
        "frames": names,
        "phase_tags": list(video.phase_tags),
        "timestamps": None if video.timestamps is None else [float(t) for t in video.timestamps],
    }
    (directory / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return names


def read_video(directory) -> AngioVideo:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise MissingFileError(f"missing file: {index_path}")
    index = json.loads(index_path.read_text())
    frames = np.stack([read_image(directory / n) for n in index["frames"]])
    ts = index.get("timestamps")
    tags = index.get("phase_tags") or phase_tags_from_timestamps(ts)
    return AngioVideo(frames, tuple(tags), None if ts is None else np.asarray(ts))


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestRecord:
    source_path: str
    target_frame_paths: list
    phase_tags: tuple
    patient_id: str
    split: str
    timestamps: Optional[list] = None
    lesion_path: Optional[str] = None
    vessel_path: Optional[str] = None
    eye: str = "unknown"
    sample_id: str = ""


_REQUIRED = ("source_path", "target_frame_paths", "phase_tags", "patient_id", "split")
_OPTIONAL = ("timestamps", "lesion_path", "vessel_path", "eye", "sample_id")


@dataclass
class DatasetManifest:
    records: list
    root: Path = field(default_factory=Path)

    @property
    def splits(self) -> dict:
        out: dict = {}
        for r in self.records:
            out.setdefault(r.split, []).append(r)
        return out

    def split(self, name: str) -> list:
        return self.splits.get(name, [])

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def check_split_hygiene(records) -> None:
    owner: dict = {}
    for r in records:
        prev = owner.setdefault(r.patient_id, r.split)
        if prev != r.split:
            raise PatientLeakageError(
                f"patient leakage: patient {r.patient_id!r} appears in splits {prev!r} and {r.split!r}"
            )


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing file: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: cannot parse record ({e.msg})") from None
            if not isinstance(raw, dict):
                raise ManifestError(f"{path}:{lineno}: record must be an object")
            missing = [k for k in _REQUIRED if k not in raw]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {missing}")
            unknown = set(raw) - set(_REQUIRED) - set(_OPTIONAL)
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            if not raw["patient_id"]:
                raise ManifestError(f"{path}:{lineno}: empty patient_id")
            if len(raw["phase_tags"]) != len(raw["target_frame_paths"]):
                raise ManifestError(f"{path}:{lineno}: phase_tags and target_frame_paths differ in length")
            raw["phase_tags"] = tuple(raw["phase_tags"])
            records.append(ManifestRecord(**raw))
    manifest = DatasetManifest(records, path.parent)
    check_split_hygiene(records)
    if check_files:
        missing = []
        for r in records:
            paths = [r.source_path, *r.target_frame_paths]
            paths += [p for p in (r.lesion_path, r.vessel_path) if p]
            missing += [str(manifest.resolve(p)) for p in paths if not manifest.resolve(p).exists()]
        if missing:
            raise MissingFileError("missing referenced files: " + ", ".join(missing))
    return manifest


def write_manifest(path, records) -> None:
    check_split_hygiene(records)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            raw = {k: getattr(r, k) for k in _REQUIRED + _OPTIONAL}
            raw["phase_tags"] = list(raw["phase_tags"])
            raw = {k: v for k, v in raw.items() if v is not None}
            fh.write(json.dumps(raw, sort_keys=True) + "\n")


def load_sample(manifest: DatasetManifest, record: ManifestRecord, resolution=None,
                per_phase: Optional[int] = 4) -> PairedSample:
    """Read one record; resize to ``resolution`` and phase-sample the target when asked."""
    src = read_image(manifest.resolve(record.source_path))
    if src.ndim == 2:
        src = np.repeat(src[..., None], 3, axis=2)
    frames = [read_image(manifest.resolve(p)) for p in record.target_frame_paths]
    frames = [f if f.ndim == 2 else f.mean(axis=2) for f in frames]
    lesion = vessel = None
    if record.lesion_path:
        lesion = read_image(manifest.resolve(record.lesion_path))
    if record.vessel_path:
        vessel = read_image(manifest.resolve(record.vessel_path))
    if resolution:
        src = resize_grid(src, resolution)
        frames = [resize_grid(f, resolution) for f in frames]
        lesion = None if lesion is None else (resize_grid(lesion, resolution) > 0.5).astype(np.float32)
        vessel = None if vessel is None else (resize_grid(vessel, resolution) > 0.5).astype(np.float32)
    video = AngioVideo(
        np.stack(frames),
        record.phase_tags,
        None if record.timestamps is None else np.asarray(record.timestamps),
    )
    if per_phase:
        video = sample_phase_frames(video, per_phase)
    return PairedSample(
        source=FundusImage(src, record.patient_id, record.eye),
        target=video,
        patient_id=record.patient_id,
        lesion_truth=lesion,
        vessel_truth=vessel,
        sample_id=record.sample_id,
    )


# ---------------------------------------------------------------------------
# procedural phantoms


@dataclass(frozen=True)
class PhantomSpec:
    resolution: int = 64
    vessel_branching_depth: int = 4
    lesion_count: int = 1
    leakage_fraction: float = 1.0  # share of lesions that leak; the rest are nonperfusion
    artery_arrival: float = 10.0  # seconds, midpoint of arterial filling
    venous_arrival: float = 22.0
    washout_tau: float = 400.0
    frames_per_phase: int = 4
    noise_level: float = 0.02
    seed: int = 0
    view: int = 0  # acquisition variant of the same anatomy (illumination, shift, noise)

    def validate(self):
        if self.resolution < 16:
            raise DataError("phantom resolution must be >= 16")
        if self.lesion_count < 0:
            raise DataError("lesion_count must be >= 0")
        if not 0 <= self.noise_level <= 0.5:
            raise DataError("noise_level must lie in [0, 0.5]")
        if not 0 <= self.leakage_fraction <= 1:
            raise DataError("leakage_fraction must lie in [0, 1]")
        if self.vessel_branching_depth < 0 or self.frames_per_phase < 1:
            raise DataError("invalid branching depth or frames_per_phase")


def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    denom = dx * dx + dy * dy
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / max(denom, 1e-12), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def _grow_tree(rng, x, y, angle, length, width, depth, out):
    # each branch is drawn as three slightly kinked pieces
    for _ in range(3):
        angle += rng.normal(0, 0.15)
        nx, ny = x + length / 3 * math.cos(angle), y + length / 3 * math.sin(angle)
        out.append((x, y, nx, ny, width))
        x, y = nx, ny
    if depth > 0:
        spread = rng.uniform(0.35, 0.7)
        for sign in (-1, 1):
            _grow_tree(rng, x, y, angle + sign * spread, length * rng.uniform(0.65, 0.8),
                       width * 0.75, depth - 1, out)


def _rasterize(segments, px, py, res):
    out = np.zeros_like(px)
    for x0, y0, x1, y1, w in segments:
        half = max(w * res, 0.9) / 2
        d = _segment_distance(px, py, x0 * res, y0 * res, x1 * res, y1 * res)
        out = np.maximum(out, np.clip(half + 0.5 - d, 0, 1))
    return out


def _smooth_noise(rng, shape, sigma):
    from scipy.ndimage import gaussian_filter

    n = gaussian_filter(rng.standard_normal(shape), sigma)
    return n / (n.std() + 1e-12)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def phantom_timestamps(per_phase: int) -> np.ndarray:
    return np.concatenate([
        np.linspace(10.0, 22.0, per_phase),
        np.linspace(30.0, 100.0, per_phase),
        np.linspace(150.0, 600.0, per_phase),
    ])


def generate_phantom(spec: PhantomSpec) -> PairedSample:
    """Deterministic synthetic fundus photograph and matching angiography video."""
    spec.validate()
    res = spec.resolution
    rng = np.random.default_rng(spec.seed)  # anatomy
    vrng = np.random.default_rng([spec.seed, spec.view, 7919])  # acquisition

    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    cx = cy = res / 2
    fov = (np.hypot(xx - cx, yy - cy) <= 0.48 * res).astype(np.float64)

    side = rng.choice([-1.0, 1.0])
    disc = (0.5 + side * rng.uniform(0.17, 0.22), 0.5 + rng.uniform(-0.05, 0.05))
    disc_r = 0.07
    arteries, veins = [], []
    n_trunks = 4
    for k in range(n_trunks):
        base = (k + 0.5) * 2 * math.pi / n_trunks + rng.uniform(-0.3, 0.3)
        target = arteries if k % 2 == 0 else veins
        _grow_tree(rng, disc[0], disc[1], base, rng.uniform(0.22, 0.3), 0.03,
                   spec.vessel_branching_depth, target)
        # a sibling vessel of the other kind runs alongside each trunk
        other = veins if k % 2 == 0 else arteries
        _grow_tree(rng, disc[0], disc[1], base + rng.uniform(0.25, 0.4), rng.uniform(0.2, 0.28), 0.024,
                   max(spec.vessel_branching_depth - 1, 0), other)
    art = _rasterize(arteries, xx, yy, res) * fov
    ven = _rasterize(veins, xx, yy, res) * fov
    vessel_truth = (np.maximum(art, ven) >= 0.5).astype(np.float32)
    disc_map = np.exp(-(np.hypot(xx - disc[0] * res, yy - disc[1] * res) / (disc_r * res)) ** 2)

    # lesions, placed inside the field of view and away from the disc
    n_leak = int(round(spec.lesion_count * spec.leakage_fraction))
    leak_maps, np_maps = [], []
    for i in range(spec.lesion_count):
        leaking = i < n_leak
        for _ in range(100):
            lx, ly = rng.uniform(0.2, 0.8, size=2)
            if math.hypot(lx - disc[0], ly - disc[1]) > 0.2 and math.hypot(lx - 0.5, ly - 0.5) < 0.33:
                break
        r = rng.uniform(0.06, 0.09) if leaking else rng.uniform(0.08, 0.13)
        aspect = rng.uniform(0.75, 1.0)
        rot = rng.uniform(0, math.pi)
        u = (xx - lx * res) * math.cos(rot) + (yy - ly * res) * math.sin(rot)
        v = -(xx - lx * res) * math.sin(rot) + (yy - ly * res) * math.cos(rot)
        rho = np.hypot(u / (r * res), v / (r * res * aspect))
        (leak_maps if leaking else np_maps).append(rho)
    leak_fp = np.zeros((res, res), bool)
    for rho in leak_maps:
        leak_fp |= rho <= 1.0
    np_fp = np.zeros((res, res), bool)
    for rho in np_maps:
        np_fp |= rho <= 1.0
    lesion_truth = (leak_fp | np_fp).astype(np.float32)

    # small acquisition shift between views of the same eye
    shift = (0, 0) if spec.view == 0 else tuple(int(s) for s in vrng.integers(-1, 2, size=2))

    def move(a):
        return np.roll(a, shift, axis=(0, 1)) if shift != (0, 0) else a

    # --- angiography video
    per = spec.frames_per_phase
    ts = phantom_timestamps(per)
    n_frames = len(ts)
    choroid = 0.5 + 0.15 * _smooth_noise(rng, (res, res), res / 16)
    fixed_noise = vrng.standard_normal((res, res))
    frames = []
    for k, t in enumerate(ts):
        a_fill = _sigmoid((t - spec.artery_arrival) / 3.0)
        v_fill = _sigmoid((t - spec.venous_arrival) / 6.0)
        wash = math.exp(-max(0.0, t - 60.0) / spec.washout_tau)
        bg = (0.06 + 0.1 * a_fill * wash) * choroid
        frame = bg + 0.85 * np.maximum(art * a_fill, ven * v_fill * 0.95) * wash
        frame = np.maximum(frame, 0.55 * disc_map * a_fill * wash)
        # leakage: dye pools and brightens steadily over the whole examination
        ramp = k / max(n_frames - 1, 1)
        for rho in leak_maps:
            core = 0.12 + 0.83 * ramp * (1.0 - 0.25 * np.clip(rho, 0, 1) ** 2)
            halo = 0.12 + 0.6 * ramp * np.exp(-((rho - 1.0) / 0.12) ** 2)
            frame = np.where(rho <= 1.0, core, np.maximum(frame, np.where(rho < 1.4, halo, 0)))
        frame = frame * fov
        fresh = vrng.standard_normal((res, res))
        frame = frame + spec.noise_level * (0.8 * fixed_noise + 0.2 * fresh) * fov
        frame = np.clip(frame, 0, 1)
        # capillary dropout stays dark throughout
        frame = np.where(np_fp, np.clip(0.03 + 0.2 * spec.noise_level * fixed_noise, 0, 0.09), frame)
        frames.append(move(frame))
    video = AngioVideo(np.stack(frames).astype(np.float32),
                       tuple(p for p in PHASES for _ in range(per)), ts)

    # --- color photograph
    illum = 1.0 + 0.12 * ((xx - cx) * vrng.uniform(-1, 1) + (yy - cy) * vrng.uniform(-1, 1)) / res
    vign = 1.0 - 0.35 * (np.hypot(xx - cx, yy - cy) / (0.48 * res)) ** 2
    tex = 0.04 * _smooth_noise(rng, (res, res), res / 24)
    base = np.array([0.78, 0.36, 0.16])
    img = (base[None, None] + tex[..., None]) * (vign * illum)[..., None]
    art_c, ven_c = np.array([0.62, 0.16, 0.08]), np.array([0.42, 0.07, 0.05])
    img = img * (1 - art[..., None]) + art_c * art[..., None]
    img = img * (1 - ven[..., None]) + ven_c * ven[..., None]
    img = img + np.array([0.3, 0.45, 0.35])[None, None] * disc_map[..., None]
    for rho in leak_maps:
        w = np.clip(1.15 - rho, 0, 1)[..., None]
        img = img + w * np.array([0.14, 0.2, 0.02])
    for rho in np_maps:
        w = np.clip(1.0 - rho, 0, 1)[..., None] ** 0.5
        img = img * (1 - 0.3 * w) + 0.3 * w * np.array([0.72, 0.5, 0.38])
    img = img + (0.5 * spec.noise_level) * vrng.standard_normal((res, res, 3))
    img = np.clip(img * fov[..., None], 0, 1)
    img = move(img)

    pid = f"P{spec.seed:05d}"
    return PairedSample(
        source=FundusImage(img.astype(np.float32), pid, "right" if side > 0 else "left"),
        target=video,
        patient_id=pid,
        lesion_truth=move(lesion_truth),
        vessel_truth=move(vessel_truth),
        sample_id=f"{pid}_v{spec.view}",
    )


def phantom_dataset(n: int, seed: int = 0, **spec_kwargs) -> list:
    """``n`` phantoms with seeds derived from ``seed``; each is its own patient."""
    return [generate_phantom(PhantomSpec(seed=seed * 100003 + i, **spec_kwargs)) for i in range(n)]


def write_phantom_dataset(out_dir, samples, splits: Sequence[str], bit_depth: int = 16) -> Path:
    """Write samples as frame directories and a JSON-lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for sample, split in zip(samples, splits):
        name = sample.sample_id or sample.patient_id
        d = out_dir / name
        os.makedirs(d, exist_ok=True)
        write_rgb(d / "source.png", sample.source.pixels)
        names = write_video(d / "frames", sample.target, bit_depth)
        rec = ManifestRecord(
            source_path=f"{name}/source.png",
            target_frame_paths=[f"{name}/frames/{n}" for n in names],
            phase_tags=sample.target.phase_tags,
            patient_id=sample.patient_id,
            split=split,
            timestamps=None if sample.target.timestamps is None else [float(t) for t in sample.target.timestamps],
            eye=sample.source.eye,
            sample_id=name,
        )
        if sample.lesion_truth is not None:
            write_mask(d / "lesion.png", sample.lesion_truth)
            rec.lesion_path = f"{name}/lesion.png"
        if sample.vessel_truth is not None:
            write_mask(d / "vessels.png", sample.vessel_truth)
            rec.vessel_path = f"{name}/vessels.png"
        records.append(rec)
    path = out_dir / "manifest.jsonl"
    write_manifest(path, records)
    return path


def with_target(sample: PairedSample, video: AngioVideo) -> PairedSample:
    return replace(sample, target=video)
