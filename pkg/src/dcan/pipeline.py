"""Run configuration, Adam, and the train / infer / evaluate drivers."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .data import FeatureSequence, load_annotations, load_features, load_manifest, rescale, window, window_to_video
from .evaluation import MetricConfig, evaluate_all
from .inference import FusionConfig, Proposal, proposals_from_maps, soft_nms
from .labels import VideoAnnotation, ground_truth, stack_ground_truth
from .loss import LossConfig, total_loss
from .model import DCAN, ConfigError, ModelConfig
from .nn import load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

__all__ = [
    "NumericFailure",
    "OptimizerConfig",
    "RunConfig",
    "Adam",
    "load_config",
    "train",
    "infer",
    "evaluate",
    "checkpoint_hash",
    "format_table",
]

MODES = ("activitynet_like", "thumos_like", "synthetic")


class NumericFailure(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    schedule: list[tuple[int, float]] = field(default_factory=lambda: [(7, 1e-3), (3, 1e-4)])
    batch_size: int = 16
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self) -> "OptimizerConfig":
        if self.kind != "adam":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")
        if not self.schedule or any(int(e) < 1 or lr <= 0 for e, lr in self.schedule):
            raise ConfigError(f"bad lr schedule {self.schedule}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = [(int(e), float(lr)) for e, lr in d["schedule"]]
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d).validate()

    @property
    def epochs(self) -> int:
        return sum(int(e) for e, _ in self.schedule)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        seen = 0
        for n, lr in self.schedule:
            seen += int(n)
            if epoch < seen:
                return lr
        return self.schedule[-1][1]


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    dataset_mode: str = "synthetic"

    def validate(self) -> "RunConfig":
        if self.dataset_mode not in MODES:
            raise ConfigError(f"dataset_mode must be one of {MODES}")
        self.model.validate()
        self.loss.validate()
        self.fusion.validate()
        self.metric.validate()
        self.optimizer.validate()
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"model", "loss", "fusion", "metric", "optimizer", "seed", "dataset_mode"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        metric = d.get("metric", {})
        if isinstance(metric, str):
            if metric not in ("activitynet", "thumos"):
                raise ConfigError(f"unknown metric preset {metric!r}")
            metric_cfg = getattr(MetricConfig, metric)()
        else:
            metric_cfg = MetricConfig.from_dict(metric)
        return cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            loss=LossConfig.from_dict(d.get("loss", {})),
            fusion=FusionConfig.from_dict(d.get("fusion", {})),
            metric=metric_cfg,
            optimizer=OptimizerConfig.from_dict(d.get("optimizer", {})),
            seed=int(d.get("seed", 0)),
            dataset_mode=d.get("dataset_mode", "synthetic"),
        ).validate()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python 3.10
                import tomli as tomllib
            raw = tomllib.loads(path.read_text())
        else:
            raw = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(raw)


class Adam:
    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("DCAN_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Sample preparation


@dataclass
class Clip:
    video_id: str
    rgb: np.ndarray  # (C_rgb, T)
    flow: np.ndarray  # (C_flow, T)
    annotation: VideoAnnotation
    offset: int = 0
    size: int = 0
    t_raw: int = 0


def _clips(seq: FeatureSequence, ann: VideoAnnotation | None, cfg: RunConfig, training: bool) -> list[Clip]:
    T = cfg.model.T
    if cfg.dataset_mode == "thumos_like":
        return [
            Clip(w.video_id, w.rgb.T.copy(), w.flow.T.copy(), w.annotation, w.offset, w.size, w.t_raw)
            for w in window(seq, ann, size=T, stride=T // 2, training=training)
        ]
    r = rescale(seq, T)
    return [Clip(seq.video_id, r.rgb.T.copy(), r.flow.T.copy(), ann or VideoAnnotation([]), 0, 0, seq.t_raw)]


def _load_clips(corpus, cfg: RunConfig, subset: str | None, training: bool) -> list[Clip]:
    manifest, root = load_manifest(corpus)
    annotations = load_annotations(manifest)
    ids = sorted(v for v, e in manifest.items() if subset is None or e.get("subset", "train") == subset)
    if not ids:
        raise ConfigError(f"no videos in subset {subset!r}")

    def one(vid):
        return _clips(load_features(manifest, root, vid), annotations[vid], cfg, training)

    with ThreadPoolExecutor(_workers()) as pool:
        nested = list(pool.map(one, ids))
    return [c for group in nested for c in group]


def _batch(clips: list[Clip]) -> tuple[Tensor, Tensor]:
    return Tensor(np.stack([c.rgb for c in clips])), Tensor(np.stack([c.flow for c in clips]))


def checkpoint_hash(directory) -> str:
    return hashlib.sha256((Path(directory) / "params.bin").read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Drivers


def train(cfg: RunConfig, corpus, out_dir, subset: str | None = "train", max_steps: int | None = None,
          plot: bool = True) -> dict:
    """Train from a corpus manifest; writes checkpoints, a JSON-lines log and a loss figure."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = _load_clips(corpus, cfg, subset, training=True)
    mc = cfg.model
    gts = [ground_truth(c.annotation, mc.T, mc.D, cfg.loss.region_scale, cfg.loss.cls_binarize) for c in clips]
    model = DCAN(mc, seed=cfg.seed)
    params = list(model.named_parameters())
    opt = Adam(params, cfg.optimizer.betas, cfg.optimizer.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    bs = cfg.optimizer.batch_size
    records = []
    step = 0
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w") as log_fh:
        for epoch in range(cfg.optimizer.epochs):
            lr = cfg.optimizer.lr_at(epoch)
            order = rng.permutation(len(clips))
            for k in range(0, len(order), bs):
                idx = order[k : k + bs]
                rgb, flow = _batch([clips[i] for i in idx])
                out = model(rgb, flow)
                loss, parts = total_loss(out, stack_ground_truth([gts[i] for i in idx]),
                                         [p for _, p in params], cfg.loss, rng)
                if not math.isfinite(parts["total"]):
                    raise NumericFailure(f"non-finite loss at step {step + 1}: {parts}")
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                step += 1
                rec = {"step": step, "epoch": epoch, "lr": lr, "L_b": parts["L_b"], "L_cls": parts["L_cls"],
                       "L_reg": parts["L_reg"], "L2": parts["L2"], "total": parts["total"]}
                records.append(rec)
                log_fh.write(json.dumps(rec) + "\n")
                if max_steps is not None and step >= max_steps:
                    break
            extra = {"model_config": mc.to_dict(), "epoch": epoch, "step": step, "seed": cfg.seed}
            save_checkpoint(model, out_dir / "checkpoints" / f"epoch_{epoch:03d}", extra)
            save_checkpoint(model, out_dir / "checkpoint", extra)
            logger.info("epoch %d  lr %.2g  loss %.4f", epoch, lr, records[-1]["total"])
            if max_steps is not None and step >= max_steps:
                break
    if plot and records:
        plotting.plot_loss(records, out_dir / "loss.png")
    return {"checkpoint": str(out_dir / "checkpoint"), "steps": step, "records": records,
            "hash": checkpoint_hash(out_dir / "checkpoint")}


def load_model(checkpoint, cfg: RunConfig | None = None) -> DCAN:
    manifest = json.loads((Path(checkpoint) / "manifest.json").read_text())
    mc = ModelConfig.from_dict(manifest["model_config"])
    if cfg is not None and cfg.model.to_dict() != mc.to_dict():
        raise ConfigError("checkpoint model config differs from the run config")
    model = DCAN(mc, seed=0)
    load_checkpoint(model, checkpoint)
    return model


def predict_clips(model: DCAN, clips: list[Clip], cfg: RunConfig, batch_size: int = 16) -> dict[str, list[Proposal]]:
    """Per-video proposals in video-normalized time, after pooling windows and Soft-NMS."""
    pooled: dict[str, list[Proposal]] = {}
    T = model.cfg.T
    for k in range(0, len(clips), batch_size):
        chunk = clips[k : k + batch_size]
        with no_grad():
            out = model(*_batch(chunk))

        def post(b):
            return proposals_from_maps(out.maps(b), cfg.fusion, nms=False)

        with ThreadPoolExecutor(_workers()) as pool:
            per_clip = list(pool.map(post, range(len(chunk))))
        for clip, props in zip(chunk, per_clip):
            bucket = pooled.setdefault(clip.video_id, [])
            if clip.size:
                for p in props:
                    s = window_to_video(p.start, clip.offset, clip.size, clip.t_raw)
                    e = min(window_to_video(p.end, clip.offset, clip.size, clip.t_raw), 1.0)
                    if e > s and s < 1.0:
                        bucket.append(Proposal(s, e, p.score))
            else:
                bucket.extend(props)
    with ThreadPoolExecutor(_workers()) as pool:
        ids = sorted(pooled)
        finals = list(pool.map(lambda v: soft_nms(pooled[v], cfg.fusion), ids))
    return dict(zip(ids, finals))


def infer(checkpoint, corpus, cfg: RunConfig, out_path=None, subset: str | None = None) -> dict:
    """Proposal JSON ``{video_id: [{segment: [s, e], score}]}`` with segments in seconds."""
    model = load_model(checkpoint, cfg)
    clips = _load_clips(corpus, cfg, subset, training=False)
    manifest, _ = load_manifest(corpus)
    results = {}
    for vid, props in predict_clips(model, clips, cfg).items():
        dur = float(manifest[vid]["duration"])
        results[vid] = [{"segment": [p.start * dur, p.end * dur], "score": p.score} for p in props]
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(results, sort_keys=True) + "\n")
    return results


def format_table(metrics: dict) -> str:
    rows = [(k, metrics[k]) for k in ("AR@1", "AR@5", "AR@10", "AR@50", "AR@100") if k in metrics]
    rows.append(("AUC", metrics["AUC"]))
    rows += [(f"mAP@{k}", v) for k, v in metrics["mAP"].items()]
    rows.append(("mAP avg", metrics["mAP_average"]))
    width = max(len(k) for k, _ in rows)
    lines = [f"{'metric':<{width}}  {'value':>8}", f"{'-' * width}  {'-' * 8}"]
    lines += [f"{k:<{width}}  {v:>8.2f}" for k, v in rows]
    return "\n".join(lines) + "\n"


def evaluate(proposals, annotations, cfg: MetricConfig, out_dir=None, plot: bool = True,
             subset: str | None = None) -> dict:
    """Metrics for proposal JSON vs annotation JSON; unmatched video ids are excluded with a warning.

    ``subset`` keeps only annotation entries whose ``subset`` field matches.
    """
    if isinstance(proposals, (str, Path)):
        proposals = json.loads(Path(proposals).read_text())
    proposals = proposals.get("results", proposals)
    if isinstance(annotations, (str, Path)):
        annotations = json.loads(Path(annotations).read_text())
    annotations = annotations.get("database", annotations)
    if subset is not None:
        annotations = {v: e for v, e in annotations.items() if e.get("subset") == subset}
    gts_ann = load_annotations(annotations)
    missing = sorted(set(gts_ann) - set(proposals))
    extra = sorted(set(proposals) - set(gts_ann))
    if missing or extra:
        logger.warning("excluding video ids without a counterpart: missing proposals %s, unknown %s",
                       missing, extra)
    common = sorted(set(gts_ann) & set(proposals))
    gts = {v: np.array(gts_ann[v].instances).reshape(-1, 2) * gts_ann[v].duration_seconds for v in common}
    props = {
        v: np.array([(p["segment"][0], p["segment"][1], p["score"]) for p in proposals[v]]).reshape(-1, 3)
        for v in common
    }
    metrics = evaluate_all(props, gts, cfg)
    metrics["meta"]["excluded"] = {"missing_proposals": missing, "unknown_videos": extra}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        (out_dir / "metrics.txt").write_text(format_table(metrics))
        if plot:
            plotting.plot_ar_curve(metrics["curve"], out_dir / "ar_an.png", metrics["AUC"])
    return metrics
