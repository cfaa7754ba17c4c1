"""Datasets, the 80/20 protocol, training and evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mmasd import ACTION_NAMES, N_ACTIONS
from mmasd.autograd.optim import Adam
from mmasd.autograd.tensor import backward, no_grad
from mmasd.errors import ConfigurationError, StateError, ValidationError
from mmasd.flow import FlowField, colorize
from mmasd.model import N_ASD, Batch, ModelConfig, MultimodalModel, prepare_batch
from mmasd.preprocess import (
    AUGMENT_ANGLES, MESH_VERTICES, Sample, build_sample, mesh_to_pixels, rotate_clip, rotate_skeleton,
)

log = logging.getLogger(__name__)

# reference clip counts per action class, in ACTION_NAMES order
REFERENCE_CLASS_COUNTS = (105, 119, 114, 168, 113, 120, 129, 113, 101, 103, 130)


class DivergenceError(StateError):
    pass


@dataclass
class Dataset:
    samples: list
    provenance: str = "real"

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def class_counts(self) -> dict[int, int]:
        c = Counter(s.action_label for s in self.samples)
        return {k: c.get(k, 0) for k in range(N_ACTIONS)}

    def asd_counts(self) -> dict[int, int]:
        c = Counter(s.asd_label for s in self.samples)
        return {k: c.get(k, 0) for k in range(N_ASD)}

    def subset(self, idx: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.provenance)


# ---------------------------------------------------------------------------
# synthetic data

# 33-joint stick figure (x right, y up); index layout follows the common
# 33-landmark body convention: face 0-10, shoulders 11-12, elbows 13-14,
# wrists 15-16, hands 17-22, hips 23-24, knees 25-26, ankles 27-28, feet 29-32
_HALF = [(0.40, 1.30), (0.62, 0.90), (0.72, 0.50), (0.78, 0.42), (0.76, 0.40), (0.74, 0.43),
         (0.25, 0.40), (0.30, -0.20), (0.30, -0.80), (0.34, -0.88), (0.22, -0.86)]


def _template() -> np.ndarray:
    face = [(0.0, 1.65), (-0.05, 1.70), (-0.07, 1.70), (-0.09, 1.70), (0.05, 1.70), (0.07, 1.70),
            (0.09, 1.70), (-0.13, 1.66), (0.13, 1.66), (-0.04, 1.58), (0.04, 1.58)]
    pts = list(face)
    # alternate left / right for each body landmark pair
    order = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
    pairs = [_HALF[i] for i in order]
    for (x, y) in pairs:
        pts += [(-x, y), (x, y)]
    xy = np.asarray(pts)
    assert xy.shape == (33, 2)
    return np.c_[xy, np.zeros(33)]


SKELETON_TEMPLATE = _template()
_BONES = [(11, 12), (11, 13), (13, 15), (12, 14), (14, 16), (15, 17), (16, 18), (11, 23), (12, 24),
          (23, 24), (23, 25), (25, 27), (24, 26), (26, 28), (27, 29), (28, 30), (0, 11), (0, 12),
          (7, 8), (27, 31), (28, 32)]
_GROUPS = {
    "arms": [13, 14, 15, 16, 17, 18, 19, 20, 21, 22],
    "legs": [25, 26, 27, 28, 29, 30, 31, 32],
    "upper": list(range(0, 23)),
    "body": list(range(33)),
}


@dataclass(frozen=True)
class MotionSignature:
    group: str
    angle_deg: float   # motion direction in the image plane
    cycles: float      # oscillations per clip
    mirror: bool       # left and right sides move in opposite x directions


# one distinct signature per action class; the rendered clips keep only 4-8
# frames at micro scale, so classes differ mainly by body part, direction and
# mirroring, with slow oscillations that survive frame subsampling
CLASS_SIGNATURES = (
    MotionSignature("arms", 0, 1.0, False),     # Arm Swing
    MotionSignature("body", 0, 1.0, False),     # Body Swing
    MotionSignature("arms", 0, 1.0, True),      # Chest Expansion
    MotionSignature("arms", 90, 1.5, False),    # Drumming
    MotionSignature("upper", 0, 1.5, True),     # Sing and Clap
    MotionSignature("upper", 45, 1.0, False),   # Twist Pose
    MotionSignature("legs", 90, 1.0, False),    # Tree Pose
    MotionSignature("legs", 0, 1.0, True),      # Frog Pose
    MotionSignature("body", 90, 1.0, False),    # Squat Pose
    MotionSignature("body", 45, 1.5, False),    # Marcas Forward Shaking
    MotionSignature("legs", 135, 1.5, False),   # Marcas Shaking
)

ASD_AMPLITUDE = (1.0, 0.5)  # amplitude factor for asd_label 0 / 1


@dataclass
class SynthConfig:
    frames: int = 40           # rendered clip length
    size: int = 100            # rendered resolution
    amplitude: float = 0.4     # body-height units
    flow_max: float = 3.0      # px/frame mapped to full brightness
    splat: int = 1             # flow written to a (2 splat + 1)^2 pixel block per vertex
    radius_px: float = 1.0
    noise: float = 0.01

    def __post_init__(self):
        if self.frames < 2 or self.size < 8 or self.amplitude <= 0 or self.flow_max <= 0 or self.splat < 0:
            raise ConfigurationError("synthetic config needs frames >= 2, size >= 8, positive scales, splat >= 0")


def _mesh_binding(seed: int = 0):
    """Fixed vertex-to-bone attachment shared by every synthetic body."""
    rng = np.random.default_rng(seed)
    bone = rng.integers(0, len(_BONES), MESH_VERTICES)
    t = rng.uniform(0, 1, MESH_VERTICES)
    offset = rng.normal(0, 0.04, (MESH_VERTICES, 3))
    a = np.array([_BONES[b][0] for b in bone])
    b = np.array([_BONES[b][1] for b in bone])
    return a, b, t, offset


_BINDING = _mesh_binding()


def _joint_motion(sig: MotionSignature, times: np.ndarray, amp: float, cycles: float, phase: float) -> np.ndarray:
    """Per-frame displacement of every joint, ``[len(times), 33, 3]``."""
    wave = amp * np.sin(2 * np.pi * cycles * times + phase)
    theta = np.deg2rad(sig.angle_deg)
    weights = np.zeros(33)
    weights[_GROUPS[sig.group]] = 1.0
    side = np.ones(33)
    if sig.mirror:
        side[SKELETON_TEMPLATE[:, 0] < 0] = -1.0
    disp = np.zeros((len(times), 33, 3))
    disp[..., 0] = wave[:, None] * (weights * side * np.cos(theta))
    disp[..., 1] = wave[:, None] * (weights * np.sin(theta))
    return disp


def synth_modalities(action: int, asd: int, rng: np.random.Generator, cfg: SynthConfig | None = None):
    """Raw modalities of one synthetic clip: (flow clip, mesh sequence, skeleton sequence)."""
    cfg = cfg or SynthConfig()
    sig = CLASS_SIGNATURES[action]
    amp = cfg.amplitude * ASD_AMPLITUDE[asd] * rng.uniform(0.9, 1.1)
    cycles = sig.cycles * rng.uniform(0.95, 1.05)
    phase = rng.uniform(-0.3, 0.3)
    body = SKELETON_TEMPLATE * rng.uniform(0.95, 1.05)
    n_skel = int(rng.integers(150, 221))

    t_skel = np.arange(n_skel) / n_skel
    skel = body + _joint_motion(sig, t_skel, amp, cycles, phase)
    skel = skel + rng.normal(0, cfg.noise, skel.shape)

    t_clip = np.arange(cfg.frames) / cfg.frames
    joints = body + _joint_motion(sig, t_clip, amp, cycles, phase)
    a, b, t, offset = _BINDING
    mesh = joints[:, a] * (1 - t)[None, :, None] + joints[:, b] * t[None, :, None] + offset

    # analytic flow: forward difference of projected vertex positions, splatted per pixel
    pix = mesh_to_pixels(mesh, cfg.size)
    vel = np.diff(pix, axis=0, append=pix[-1:] + (pix[-1:] - pix[-2:-1]))
    fields = []
    offsets = np.array([(dx, dy) for dx in range(-cfg.splat, cfg.splat + 1) for dy in range(-cfg.splat, cfg.splat + 1)])
    for k in range(cfg.frames):
        idx = (np.rint(pix[k]).astype(np.int64)[:, None, :] + offsets[None]).reshape(-1, 2)
        vk = np.repeat(vel[k], len(offsets), axis=0)
        ok = np.all((idx >= 0) & (idx < cfg.size), axis=1)
        flat = idx[ok, 1] * cfg.size + idx[ok, 0]
        cnt = np.bincount(flat, minlength=cfg.size ** 2)
        u = np.bincount(flat, vk[ok, 0], cfg.size ** 2) / np.maximum(cnt, 1)
        v = np.bincount(flat, vk[ok, 1], cfg.size ** 2) / np.maximum(cnt, 1)
        fields.append(FlowField(u.reshape(cfg.size, cfg.size), v.reshape(cfg.size, cfg.size)))
    flow_clip = colorize(fields, max_magnitude=cfg.flow_max)
    return flow_clip, mesh, skel


def synth_dataset(n_per_class: int, seed: int = 0, cfg: SynthConfig | None = None) -> Dataset:
    """``n_per_class`` clips for each of the 11 actions, ASD flags balanced within each class."""
    if n_per_class < 2:
        raise ValidationError(f"n_per_class must be >= 2, got {n_per_class}", "per_class")
    cfg = cfg or SynthConfig()
    samples = []
    for action in range(N_ACTIONS):
        for j in range(n_per_class):
            asd = j % 2
            rng = np.random.default_rng([seed, action, j])
            flow_clip, mesh, skel = synth_modalities(action, asd, rng, cfg)
            samples.append(build_sample(flow_clip, mesh, skel, action, asd, clip_id=f"synth_a{action:02d}_{j:03d}",
                                        frames=cfg.frames, size=cfg.size, radius_px=cfg.radius_px))
    return Dataset(samples, "synthetic")


@dataclass
class LabelOnly:
    """Stand-in sample carrying only labels, for protocol arithmetic on large label sets."""

    action_label: int
    asd_label: int
    clip_id: str = ""


def reference_label_fixture() -> Dataset:
    """1315 label-only samples with the per-class counts of the source dataset; ASD split n//2 per class."""
    samples = []
    for action, n in enumerate(REFERENCE_CLASS_COUNTS):
        for j in range(n):
            samples.append(LabelOnly(action, int(j < n // 2), f"a{action}_{j}"))
    return Dataset(samples, "fixture")


# ---------------------------------------------------------------------------
# split


def stratified_indices(actions: Sequence[int], asds: Sequence[int], ratio: float = 0.8,
                       seed: int = 0) -> tuple[list[int], list[int]]:
    """Per (action, asd) stratum: seeded shuffle, ``floor(ratio n)`` to train, the rest to test."""
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"split ratio must lie in (0, 1), got {ratio}")
    strata: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(zip(actions, asds)):
        strata.setdefault((int(key[0]), int(key[1])), []).append(i)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for key in sorted(strata):
        members = list(np.array(strata[key])[rng.permutation(len(strata[key]))])
        if len(members) == 1:
            log.warning("stratum %s has one sample; placed in train", key)
            train += members
            continue
        k = math.floor(ratio * len(members) + 1e-9)
        train += members[:k]
        test += members[k:]
    return sorted(int(i) for i in train), sorted(int(i) for i in test)


def stratified_split(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    tr, te = stratified_indices([s.action_label for s in ds.samples], [s.asd_label for s in ds.samples],
                                ratio, seed)
    train, test = ds.subset(tr), ds.subset(te)
    missing = [ACTION_NAMES[k] for k, n in train.class_counts().items() if n == 0]
    if missing and len(ds):
        log.warning("training split lacks action classes: %s", ", ".join(missing))
    return train, test


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    confusion: list  # rows = true class, columns = predicted class

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(labels: Sequence[int], preds: Sequence[int], n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return m


def metrics_from_confusion(conf) -> Metrics:
    """Accuracy and macro-F1 (mean over all classes, F1 = 0 where undefined)."""
    conf = np.asarray(conf, dtype=np.int64)
    total = int(conf.sum())
    tp = np.diag(conf).astype(np.float64)
    pred_n = conf.sum(axis=0)
    true_n = conf.sum(axis=1)
    f1 = np.zeros(len(conf))
    for k in range(len(conf)):
        if tp[k] > 0:
            p, r = tp[k] / pred_n[k], tp[k] / true_n[k]
            f1[k] = 2 * p * r / (p + r)
    acc = float(tp.sum() / total) if total else 0.0
    return Metrics(acc, float(f1.mean()), conf.tolist())


def compute_metrics(labels, preds, n_classes: int) -> Metrics:
    return metrics_from_confusion(confusion_matrix(labels, preds, n_classes))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = False
    w_action: float = 0.5
    w_asd: float = 0.5
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.eval_batch_size < 1:
            raise ConfigurationError("epochs must be >= 1, batch_size >= 2 (batch norm) and eval_batch_size >= 1")
        if self.lr < 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("invalid optimizer settings")
        if self.w_action < 0 or self.w_asd < 0 or self.w_action + self.w_asd == 0:
            raise ConfigurationError("loss weights must be >= 0 and not both zero")


@dataclass
class History:
    initial_loss: float = float("nan")
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, action_acc, asd_acc

    def to_dict(self) -> dict:
        return asdict(self)


def as_batch(data, cfg: ModelConfig) -> Batch:
    if isinstance(data, Batch):
        return data
    samples = data.samples if isinstance(data, Dataset) else list(data)
    return prepare_batch(samples, cfg)


def augment_batch(batch: Batch, angles: Sequence[float] = AUGMENT_ANGLES) -> Batch:
    """Original samples followed by one rotated copy per angle (labels unchanged)."""
    parts = [batch]
    n = len(batch)
    for a in angles:
        mesh = np.stack([rotate_clip(batch.mesh[i], a) for i in range(n)])
        flow = np.stack([rotate_clip(batch.flow[i], a) for i in range(n)])
        skel = np.stack([rotate_skeleton(batch.skeleton[i].reshape(batch.skeleton.shape[1], -1, 3), a)
                         .reshape(batch.skeleton.shape[1:]) for i in range(n)])
        parts.append(Batch(mesh, flow, skel, batch.action.copy(), batch.asd.copy()))
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return Batch(cat("mesh"), cat("flow"), cat("skeleton"), cat("action"), cat("asd"))


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        # batch norm needs two samples; fold a lone straggler into the previous batch
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def train_loop(model: MultimodalModel, data, cfg: TrainConfig) -> History:
    """Mini-batch Adam on the weighted two-task loss; deterministic for a fixed seed."""
    batch = as_batch(data, model.cfg)
    if len(batch) < 2:
        raise ValidationError("training needs at least 2 samples", "train")
    if cfg.augment:
        batch = augment_batch(batch)
    weights = (cfg.w_action, cfg.w_asd)
    params = [p for n, p in model.params.items()
              if not (cfg.w_asd == 0 and n.startswith("head_asd"))
              and not (cfg.w_action == 0 and n.startswith("head_action"))]
    opt = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    hist = History()

    # loss at initialization, without disturbing batch-norm statistics
    saved = copy.deepcopy(model.bn)
    with no_grad():
        losses = [model.loss(batch.subset(idx), True, weights)[0].item() * len(idx)
                  for idx in _batches(len(batch), cfg.batch_size, np.random.default_rng(0))]
    model.bn = saved
    hist.initial_loss = float(np.sum(losses) / len(batch))

    for epoch in range(1, cfg.epochs + 1):
        total, correct_a, correct_s = 0.0, 0, 0
        for bi, idx in enumerate(_batches(len(batch), cfg.batch_size, rng)):
            sub = batch.subset(idx)
            opt.zero_grad()
            loss, out = model.loss(sub, True, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, batch {bi}")
            backward(loss)
            opt.step()
            total += value * len(idx)
            correct_a += int((out.action_logits.data.argmax(-1) == sub.action).sum())
            correct_s += int((out.asd_logits.data.argmax(-1) == sub.asd).sum())
        rec = {"epoch": epoch, "loss": total / len(batch),
               "action_acc": correct_a / len(batch), "asd_acc": correct_s / len(batch)}
        hist.epochs.append(rec)
        log.info("epoch %d loss %.4f action %.3f asd %.3f", epoch, rec["loss"], rec["action_acc"],
                 rec["asd_acc"])
    return hist


def predict(model: MultimodalModel, data, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode softmax probabilities ``(action [N, 11], asd [N, 2])``."""
    batch = as_batch(data, model.cfg)
    pa, ps = [], []
    with no_grad():
        for i in range(0, len(batch), batch_size):
            out = model.forward(batch.subset(slice(i, i + batch_size)), training=False)
            for logits, acc in ((out.action_logits.data, pa), (out.asd_logits.data, ps)):
                z = np.exp(logits - logits.max(-1, keepdims=True))
                acc.append(z / z.sum(-1, keepdims=True))
    return np.concatenate(pa), np.concatenate(ps)


def evaluate(model: MultimodalModel, data, batch_size: int = 16) -> tuple[Metrics, Metrics]:
    batch = as_batch(data, model.cfg)
    pa, ps = predict(model, batch, batch_size)
    return (compute_metrics(batch.action, pa.argmax(-1), model.cfg.n_actions),
            compute_metrics(batch.asd, ps.argmax(-1), N_ASD))


# ---------------------------------------------------------------------------
# experiment protocols


def results_dict(train_m: tuple[Metrics, Metrics], test_m: tuple[Metrics, Metrics]) -> dict:
    return {"train": {"action": train_m[0].to_dict(), "asd": train_m[1].to_dict()},
            "test": {"action": test_m[0].to_dict(), "asd": test_m[1].to_dict()}}


def run_joint(train, test, model_cfg: ModelConfig, cfg: TrainConfig) -> tuple[MultimodalModel, History, dict]:
    model = MultimodalModel(model_cfg, seed=cfg.seed)
    tr, te = as_batch(train, model_cfg), as_batch(test, model_cfg)
    hist = train_loop(model, tr, cfg)
    return model, hist, results_dict(evaluate(model, tr), evaluate(model, te))


def independent_mode(train, test, model_cfg: ModelConfig, cfg: TrainConfig) -> dict:
    """Two single-task models (loss weights (1, 0) and (0, 1)), each scored on its own task."""
    out = {}
    tr, te = as_batch(train, model_cfg), as_batch(test, model_cfg)
    for task, w in (("action", (1.0, 0.0)), ("asd", (0.0, 1.0))):
        tc = TrainConfig(**{**asdict(cfg), "w_action": w[0], "w_asd": w[1]})
        model = MultimodalModel(model_cfg, seed=cfg.seed)
        hist = train_loop(model, tr, tc)
        k = 0 if task == "action" else 1
        out[task] = {"train": evaluate(model, tr)[k].to_dict(), "test": evaluate(model, te)[k].to_dict(),
                     "history": hist.to_dict()}
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_confusion_csv(path, metrics: Metrics, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, metrics.confusion):
            w.writerow([name, *row])
