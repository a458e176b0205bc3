"""Feature ingestion, rescaling and windowing, and a seeded synthetic corpus.

On disk a corpus is a directory holding one tensor file per stream per
video (``<id>.rgb.dctn`` / ``<id>.flow.dctn``, shape T_raw x C) and a
``manifest.json`` mapping video ids to duration, length, paths, and
ActivityNet-style annotations in seconds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .labels import VideoAnnotation
from .tensor import load_tensor, save_tensor

__all__ = [
    "FeatureSequence",
    "Window",
    "SyntheticSpec",
    "GenerationError",
    "rescale",
    "window",
    "window_to_video",
    "generate_synthetic",
    "write_corpus",
    "load_manifest",
    "load_features",
    "load_annotations",
]


class GenerationError(RuntimeError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    rgb: np.ndarray  # (T_raw, C_rgb)
    flow: np.ndarray  # (T_raw, C_flow)
    frame_interval: int = 16
    duration_seconds: float = 0.0

    def __post_init__(self):
        if self.rgb.shape[0] != self.flow.shape[0]:
            raise ValueError(f"{self.video_id}: rgb has {self.rgb.shape[0]} steps, flow {self.flow.shape[0]}")
        if not (np.all(np.isfinite(self.rgb)) and np.all(np.isfinite(self.flow))):
            raise ValueError(f"{self.video_id}: non-finite features")

    @property
    def t_raw(self) -> int:
        return self.rgb.shape[0]


def _resample(x: np.ndarray, length: int) -> np.ndarray:
    src = x.shape[0]
    pos = np.arange(length) * (src - 1) / (length - 1) if length > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    w = (pos - lo)[:, None]
    return x[lo] * (1.0 - w) + x[hi] * w


def rescale(seq: FeatureSequence, length: int) -> FeatureSequence:
    """Linear interpolation to ``length`` steps; target t reads source t*(T_raw-1)/(L-1)."""
    if seq.t_raw < 2:
        raise ValueError(f"{seq.video_id}: need at least 2 steps to rescale, got {seq.t_raw}")
    if length == seq.t_raw:
        return FeatureSequence(seq.video_id, seq.rgb.copy(), seq.flow.copy(), seq.frame_interval, seq.duration_seconds)
    return FeatureSequence(
        seq.video_id,
        _resample(seq.rgb, length),
        _resample(seq.flow, length),
        seq.frame_interval,
        seq.duration_seconds,
    )


@dataclass
class Window:
    video_id: str
    offset: int
    size: int
    rgb: np.ndarray  # (size, C_rgb), zero-padded past the end
    flow: np.ndarray
    annotation: VideoAnnotation  # normalized by window size
    t_raw: int


def window_to_video(x: float, offset: int, size: int, t_raw: int) -> float:
    """Map a window-normalized position back to the video's normalized time."""
    return (offset + x * size) / t_raw


def window(seq: FeatureSequence, ann: VideoAnnotation | None = None, size: int = 256, stride: int = 128,
           training: bool = False) -> list[Window]:
    """Overlapping fixed-size clips.

    A video no longer than ``size`` yields one window; otherwise starts run
    0, stride, 2*stride, ... while inside the video.  In training mode
    windows containing no (clipped) instance are dropped.
    """
    t_raw = seq.t_raw
    starts = [0] if t_raw <= size else list(range(0, t_raw, stride))
    out = []
    inst = [] if ann is None else [(s * t_raw, e * t_raw) for s, e in ann.instances]
    for off in starts:
        rgb = np.zeros((size, seq.rgb.shape[1]))
        flow = np.zeros((size, seq.flow.shape[1]))
        n = min(size, t_raw - off)
        rgb[:n] = seq.rgb[off : off + n]
        flow[:n] = seq.flow[off : off + n]
        clipped = []
        for s, e in inst:
            cs, ce = max(s, off), min(e, off + size)
            if ce > cs:
                clipped.append(((cs - off) / size, (ce - off) / size))
        if training and not clipped:
            continue
        duration = (ann.duration_seconds if ann else seq.duration_seconds) * size / t_raw
        out.append(Window(seq.video_id, off, size, rgb, flow, VideoAnnotation(clipped, duration), t_raw))
    return out


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass
class SyntheticSpec:
    n_videos: int = 250
    n_test: int = 50
    t_raw: tuple[int, int] = (100, 200)
    instances: tuple[int, int] = (1, 3)
    duration_fraction: tuple[float, float] = (0.05, 0.4)
    min_gap: float = 0.03
    rgb_dim: int = 16
    flow_dim: int = 16
    pattern_channels: int = 4
    noise: float = 1.0
    offset: float = 2.0
    ramp: float = 2.0
    seconds_per_step: float = 0.5
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.t_raw[0] < 2 or self.t_raw[0] > self.t_raw[1]:
            raise ValueError(f"bad t_raw range {self.t_raw}")
        if not 0 < self.duration_fraction[0] <= self.duration_fraction[1] <= 1:
            raise ValueError(f"bad duration_fraction {self.duration_fraction}")
        if self.instances[0] < 1 or self.instances[0] > self.instances[1]:
            raise ValueError(f"bad instances range {self.instances}")
        if 2 * self.pattern_channels > self.flow_dim or self.pattern_channels > self.rgb_dim:
            raise ValueError("not enough channels for disjoint rgb/flow patterns")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("t_raw", "instances", "duration_fraction"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def _try_place(rng: np.random.Generator, spec: SyntheticSpec, t_raw: int, n: int, tries: int):
    placed: list[tuple[int, int]] = []
    gap = max(1, int(np.ceil(spec.min_gap * t_raw)))
    for _ in range(n):
        for _ in range(tries):
            length = int(round(rng.uniform(*spec.duration_fraction) * t_raw))
            length = max(length, 2)
            if length >= t_raw:
                continue
            start = int(rng.integers(0, t_raw - length + 1))
            end = start + length
            if all(end + gap <= s or start >= e + gap for s, e in placed):
                placed.append((start, end))
                break
        else:
            return None
    return sorted(placed)


def _place_instances(rng: np.random.Generator, spec: SyntheticSpec, t_raw: int, tries: int = 200,
                     restarts: int = 20):
    """Rejection-sample non-overlapping instances; early choices can block later ones, so restart."""
    n = int(rng.integers(spec.instances[0], spec.instances[1] + 1))
    for _ in range(restarts):
        placed = _try_place(rng, spec, t_raw, n, tries)
        if placed is not None:
            return placed
    raise GenerationError(f"could not pack {n} instances into {t_raw} steps")


def _profile(t_raw: int, start: int, end: int, ramp: float) -> np.ndarray:
    # snippet k spans [k, k+1); its centre rises linearly through the boundary over `ramp` snippets
    x = np.arange(t_raw) + 0.5
    inside = np.minimum(x - start, end - x)
    return np.clip(inside / ramp + 0.5, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec):
    """Returns ``(features, annotations, subsets)`` dicts keyed by video id."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    features: dict[str, FeatureSequence] = {}
    annotations: dict[str, VideoAnnotation] = {}
    subsets: dict[str, str] = {}
    pc = spec.pattern_channels
    width = len(str(spec.n_videos - 1))
    for v in range(spec.n_videos):
        vid = f"v_{v:0{width}d}"
        t_raw = int(rng.integers(spec.t_raw[0], spec.t_raw[1] + 1))
        placed = _place_instances(rng, spec, t_raw)
        rgb = rng.standard_normal((t_raw, spec.rgb_dim)) * spec.noise
        flow = rng.standard_normal((t_raw, spec.flow_dim)) * spec.noise
        for s, e in placed:
            prof = spec.offset * _profile(t_raw, s, e, spec.ramp)[:, None]
            rgb[:, :pc] += prof
            flow[:, pc : 2 * pc] += prof
        duration = t_raw * spec.seconds_per_step
        features[vid] = FeatureSequence(vid, rgb, flow, 16, duration)
        annotations[vid] = VideoAnnotation([(s / t_raw, e / t_raw) for s, e in placed], duration)
        subsets[vid] = "test" if v >= spec.n_videos - spec.n_test else "train"
    return features, annotations, subsets


# ---------------------------------------------------------------------------
# Disk format


def write_corpus(directory, features: dict, annotations: dict, subsets: dict | None = None) -> Path:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    manifest = {}
    for vid, seq in features.items():
        rgb_path = f"features/{vid}.rgb.dctn"
        flow_path = f"features/{vid}.flow.dctn"
        save_tensor(directory / rgb_path, seq.rgb)
        save_tensor(directory / flow_path, seq.flow)
        ann = annotations[vid]
        manifest[vid] = {
            "duration": ann.duration_seconds,
            "t_raw": seq.t_raw,
            "frame_interval": seq.frame_interval,
            "rgb_path": rgb_path,
            "flow_path": flow_path,
            "subset": (subsets or {}).get(vid, "train"),
            "annotations": [
                {"segment": [s * ann.duration_seconds, e * ann.duration_seconds]} for s, e in ann.instances
            ],
        }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text()), path.parent


def load_features(manifest: dict, root: Path, video_id: str) -> FeatureSequence:
    entry = manifest[video_id]
    rgb = load_tensor(root / entry["rgb_path"]).data
    flow = load_tensor(root / entry["flow_path"]).data
    return FeatureSequence(video_id, rgb, flow, entry.get("frame_interval", 16), entry["duration"])


def load_annotations(source) -> dict[str, VideoAnnotation]:
    """Read ActivityNet-style ``{id: {duration, annotations: [{segment: [s, e]}]}}`` (seconds)."""
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text())
    else:
        data = source
    data = data.get("database", data)
    out = {}
    for vid, entry in data.items():
        segs = [a["segment"] for a in entry.get("annotations", [])]
        out[vid] = VideoAnnotation.from_seconds(segs, float(entry["duration"]))
    return out
