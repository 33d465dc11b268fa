"""Evaluation metrics and the self-trained detection oracle.

VAD compares feature-extractor embeddings of paired videos (lower is
closer).  OA and mIoU judge generated videos through a small detector
that is trained on clean rendered frames and validated against held-out
clean renders before it may be used; its validation numbers travel with
its checkpoint.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .data import EditSample, FG_THRESHOLD, videos_to_model
from .errors import InputError, UsageError, VideditError
from .model import load_model_state, load_checkpoint, model_state, save_checkpoint
from .nn import Conv2d, Conv3d, Linear, Module
from .optim import Adam
from .tensor import Tensor

CROP_SIZE = 16
MIN_COMPONENT_AREA = 8


def iou(box_a, box_b) -> float:
    """Intersection over union of (x_min, y_min, x_max, y_max) boxes."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    if ax0 >= ax1 or ay0 >= ay1 or bx0 >= bx1 or by0 >= by1:
        raise InputError(f"degenerate box: {box_a} / {box_b}")
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    inter = max(0, ix1 - ix0) * max(0, iy1 - iy0)
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


# ---------------------------------------------------------------------------
# video feature extractor for VAD
# ---------------------------------------------------------------------------

class FixedRandomExtractor:
    """Frozen random spatio-temporal conv features.

    Absolute VAD values under this extractor are not comparable with any
    published numbers; only relative comparisons under the same
    extractor id are meaningful.
    """

    def __init__(self, channels: int, seed: int = 0, width: int = 16):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 314159]))
        self.conv1 = Conv3d(channels, width, 3, rng)
        self.conv2 = Conv3d(width, 2 * width, 3, rng)
        self.ident = f"fixed-random-conv3d-seed{seed}-w{width}-c{channels}"

    def __call__(self, videos: np.ndarray) -> np.ndarray:
        """videos: (B, N, H, W, C) uint8 -> features (B, D)."""
        x = T.constant(videos_to_model(videos))
        with T.no_grad():
            h = T.relu(self.conv1(x))
            h = T.avgpool2d(h)
            h = T.relu(self.conv2(h))
            feats = T.tmean(h, axis=(1, 2, 3))
        return feats.data


def vad(generated: list[np.ndarray], reference: list[np.ndarray], extractor) -> float:
    """Mean L2 distance between extractor features of paired videos."""
    if not generated or len(generated) != len(reference):
        raise InputError("vad needs equal-length non-empty video lists")
    gen = extractor(np.stack(generated))
    ref = extractor(np.stack(reference))
    return float(np.mean(np.linalg.norm(gen - ref, axis=1)))


# ---------------------------------------------------------------------------
# detection oracle
# ---------------------------------------------------------------------------

class _OracleNet(Module):
    def __init__(self, channels: int, heads: dict[str, int], rng, width: int = 24):
        self.conv1 = Conv2d(channels, width, 3, rng)
        self.conv2 = Conv2d(width, 2 * width, 3, rng)
        self.heads = {}
        flat = 2 * width * (CROP_SIZE // 4) * (CROP_SIZE // 4)
        for name, n_out in heads.items():
            self.heads[name] = Linear(flat, n_out, rng)
        # expose head parameters to named_parameters via attributes
        for name, lin in self.heads.items():
            setattr(self, f"head_{name}", lin)

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key == "heads":
                continue
            if isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, Tensor) and val.requires_grad:
                yield f"{prefix}{key}", val

    def __call__(self, crops: Tensor) -> dict[str, Tensor]:
        h = T.relu(self.conv1(crops))
        h = T.avgpool2d(h)
        h = T.relu(self.conv2(h))
        h = T.avgpool2d(h)
        b = h.shape[0]
        flat = T.reshape(h, (b, -1))
        return {name: lin(flat) for name, lin in self.heads.items()}


def _crop(frame: np.ndarray, box, out_size: int = CROP_SIZE) -> np.ndarray:
    """Square crop around a box, nearest-resized to the oracle input size."""
    x0, y0, x1, y1 = [int(v) for v in box]
    h, w = frame.shape[:2]
    side = max(x1 - x0, y1 - y0, 2)
    cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
    half = (side + 1) // 2
    sx0, sy0 = cx - half, cy - half
    sx1, sy1 = sx0 + 2 * half, sy0 + 2 * half
    canvas = np.zeros((2 * half, 2 * half, frame.shape[2]), dtype=frame.dtype)
    fx0, fy0 = max(sx0, 0), max(sy0, 0)
    fx1, fy1 = min(sx1, w), min(sy1, h)
    canvas[fy0 - sy0:fy1 - sy0, fx0 - sx0:fx1 - sx0] = frame[fy0:fy1, fx0:fx1]
    idx = (np.arange(out_size) * canvas.shape[0]) // out_size
    return canvas[idx][:, idx]


def _foreground_boxes(frame: np.ndarray, threshold: float, min_area: int):
    """Connected components of the thresholded foreground -> tight boxes."""
    level = int(round(threshold * 255))
    fg = frame.max(axis=-1) > level
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    boxes = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        area = (sl[0].stop - sl[0].start) * (sl[1].stop - sl[1].start)
        if area < min_area:
            continue
        boxes.append((sl[1].start, sl[0].start, sl[1].stop, sl[0].stop))
    return boxes


@dataclass
class Detection:
    box: tuple
    label: dict          # {"class": str, ...property values}

    def tuple_key(self) -> tuple:
        return tuple(sorted(self.label.items()))


class DetectionOracle:
    """Foreground proposals + a crop classifier with objectness rejection.

    ``validated`` is set by training (or checkpoint load) only when the
    held-out clean-render accuracy targets are met; metric entry points
    refuse an unvalidated oracle.
    """

    def __init__(self, net: _OracleNet, kind: str, channels: int,
                 label_values: dict[str, list[str]],
                 class_accuracy: float = 0.0, localization_iou: float = 0.0,
                 validated: bool = False):
        self.net = net
        self.kind = kind
        self.channels = channels
        self.label_values = label_values     # head name -> ordered values
        self.class_accuracy = class_accuracy
        self.localization_iou = localization_iou
        self.validated = validated

    # -- inference -------------------------------------------------------
    def classify_crops(self, crops: np.ndarray) -> tuple[list[dict], np.ndarray]:
        """crops: (B, S, S, C) uint8 -> (labels, objectness probabilities)."""
        x = T.constant(crops.astype(np.float32) / 255.0)
        with T.no_grad():
            logits = self.net(x)
        labels = []
        b = crops.shape[0]
        for i in range(b):
            rec = {}
            for head, values in self.label_values.items():
                idx = int(np.argmax(logits[head].data[i]))
                rec[head] = values[idx]
            labels.append(rec)
        obj = 1.0 / (1.0 + np.exp(-logits["objectness"].data[:, 0]))
        return labels, obj

    def detect(self, frame: np.ndarray) -> list[Detection]:
        boxes = _foreground_boxes(frame, FG_THRESHOLD, MIN_COMPONENT_AREA)
        if not boxes:
            return []
        crops = np.stack([_crop(frame, b) for b in boxes])
        labels, obj = self.classify_crops(crops)
        return [Detection(box=b, label=lab)
                for b, lab, o in zip(boxes, labels, obj) if o >= 0.5]

    def fingerprint(self) -> str:
        blob = b"".join(p.data.tobytes() for _, p in sorted(self.net.named_parameters()))
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- persistence -------------------------------------------------------
    def save(self, path):
        config = {"kind": self.kind, "channels": self.channels,
                  "label_values": self.label_values,
                  "class_accuracy": self.class_accuracy,
                  "localization_iou": self.localization_iou,
                  "validated": self.validated,
                  "heads": {h: len(v) for h, v in self.label_values.items()}}
        config["heads"]["objectness"] = 1
        save_checkpoint(path, config, model_state(self.net), None, {})

    @classmethod
    def load(cls, path) -> "DetectionOracle":
        config, params, _, _ = load_checkpoint(path)
        net = _OracleNet(config["channels"], config["heads"], np.random.default_rng(0))
        load_model_state(net, params)
        return cls(net=net, kind=config["kind"], channels=config["channels"],
                   label_values=config["label_values"],
                   class_accuracy=config["class_accuracy"],
                   localization_iou=config["localization_iou"],
                   validated=config["validated"])


def _object_label(rec: dict, kind: str) -> dict:
    if kind in ("smnist", "dmnist"):
        return {"class": rec["class"]}
    return {"class": rec["class"], "color": rec["properties"]["color"],
            "size": rec["properties"]["size_label"]}


def expected_tuples(sample: EditSample) -> set[tuple]:
    """The (class, properties) tuples the generated target must contain."""
    recs = sample.annotations["target"][0]
    return {tuple(sorted(_object_label(r, sample.kind).items())) for r in recs}


def _collect_crops(samples: list[EditSample], kind: str, rng: np.random.Generator,
                   frame_stride: int = 4):
    """Labelled positive crops + background negatives from clean renders."""
    crops, labels = [], []
    for s in samples:
        for side, video in (("source", s.source_video), ("target", s.target_video)):
            for fi in range(0, video.shape[0], frame_stride):
                frame = video[fi]
                for rec in s.annotations[side][fi]:
                    box = list(rec["bbox"])
                    jitter = rng.integers(-1, 2, size=4)
                    box = [box[i] + int(jitter[i]) for i in range(4)]
                    if box[0] >= box[2] - 1 or box[1] >= box[3] - 1:
                        box = rec["bbox"]
                    crops.append(_crop(frame, box))
                    lab = _object_label(rec, kind)
                    lab["objectness"] = 1
                    labels.append(lab)
                # one background crop per frame
                h, w = frame.shape[:2]
                for _ in range(4):
                    bx = int(rng.integers(0, w - 8))
                    by = int(rng.integers(0, h - 8))
                    box = (bx, by, bx + 8, by + 8)
                    if all(iou(box, tuple(r["bbox"])) < 0.05 for r in s.annotations[side][fi]):
                        crops.append(_crop(frame, box))
                        labels.append({"objectness": 0})
                        break
    return np.stack(crops), labels


def train_oracle_detector(samples: list[EditSample], kind: str,
                          seed: int = 0, steps: int = 400,
                          batch_size: int = 64,
                          min_class_accuracy: float = 0.99,
                          min_localization_iou: float = 0.95) -> DetectionOracle:
    """Train and validate the oracle on clean renders.

    Raises VideditError when held-out validation misses the accuracy
    targets; a failed oracle must not be used for OA/mIoU.
    """
    if not samples:
        raise InputError("oracle training needs samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4242]))
    channels = samples[0].source_video.shape[-1]
    if kind in ("smnist", "dmnist"):
        classes = sorted({o.cls for s in samples for o in s.source_scene.objects}
                         | {o.cls for s in samples for o in s.target_scene.objects})
        label_values = {"class": classes}
    else:
        from .data import CLEVR_COLORS, SHAPES, SIZES
        label_values = {"class": list(SHAPES), "color": list(CLEVR_COLORS),
                        "size": list(SIZES)}
    heads = {h: len(v) for h, v in label_values.items()}
    heads["objectness"] = 1

    crops, labels = _collect_crops(samples, kind, rng)
    order = rng.permutation(len(crops))
    n_val = max(1, len(order) // 5)
    val_idx, train_idx = order[:n_val], order[n_val:]

    net = _OracleNet(channels, heads, rng)
    opt = Adam(net.parameters(), lr=1e-3)
    xs = crops.astype(np.float32) / 255.0

    def batch_loss(idx):
        x = T.constant(xs[idx])
        logits = net(x)
        losses = []
        pos = np.array([labels[i].get("objectness", 0) for i in idx], dtype=np.float32)
        obj_logit = T.reshape(logits["objectness"], (len(idx),))
        # BCE via softplus: -y*log(s) - (1-y)*log(1-s)
        losses.append(T.tmean(T.add(T.softplus(obj_logit),
                                    T.neg(T.mul(T.constant(pos), obj_logit)))))
        for head, values in label_values.items():
            mask = np.array([head in labels[i] for i in idx])
            if not mask.any():
                continue
            sub = [i for i, m in zip(idx, mask) if m]
            targets = np.array([values.index(labels[i][head]) for i in sub])
            z = T.softmax(logits[head], axis=-1)
            keep = T.take_rows(T.log(T.add_scalar(z, 1e-9)), np.nonzero(mask)[0])
            onehot = np.zeros((len(sub), len(values)), dtype=np.float32)
            onehot[np.arange(len(sub)), targets] = 1.0
            losses.append(T.neg(T.tmean(T.tsum(T.mul(keep, T.constant(onehot)), axis=-1))))
        total = losses[0]
        for piece in losses[1:]:
            total = T.add(total, piece)
        return total

    for _ in range(steps):
        T.clear_tape()
        opt.zero_grad()
        idx = rng.choice(train_idx, size=min(batch_size, len(train_idx)), replace=False)
        loss = batch_loss(idx)
        T.backward(loss)
        opt.step()
    T.clear_tape()

    oracle = DetectionOracle(net=net, kind=kind, channels=channels,
                             label_values=label_values)
    # held-out crop accuracy: every labelled head must be right
    v_crops = crops[val_idx]
    preds, obj = oracle.classify_crops(v_crops)
    good = 0
    total = 0
    for row, i in enumerate(val_idx):
        lab = labels[i]
        if lab.get("objectness", 0) == 0:
            continue
        total += 1
        if all(preds[row][h] == lab[h] for h in label_values):
            good += 1
    class_acc = good / max(1, total)

    # held-out localization on clean frames
    ious = []
    for s in samples[: max(2, len(samples) // 10)]:
        for fi in range(0, s.target_video.shape[0], 4):
            frame = s.target_video[fi]
            dets = oracle.detect(frame)
            for rec in s.annotations["target"][fi]:
                best = 0.0
                for d in dets:
                    best = max(best, iou(d.box, tuple(rec["bbox"])))
                ious.append(best)
    loc = float(np.mean(ious)) if ious else 0.0

    oracle.class_accuracy = float(class_acc)
    oracle.localization_iou = loc
    if class_acc < min_class_accuracy or loc < min_localization_iou:
        raise VideditError(
            f"oracle validation failed: class accuracy {class_acc:.4f} "
            f"(need {min_class_accuracy}), localization IoU {loc:.4f} "
            f"(need {min_localization_iou})")
    oracle.validated = True
    return oracle


# ---------------------------------------------------------------------------
# OA and mIoU
# ---------------------------------------------------------------------------

def _require_validated(oracle):
    if not getattr(oracle, "validated", False):
        raise UsageError("detection oracle is not validated")


def _majority_tuples(per_frame: list[list[Detection]]) -> tuple[set, set]:
    """Tuples/classes present in at least half the frames."""
    n = len(per_frame)
    tuple_counts: dict = {}
    class_counts: dict = {}
    for dets in per_frame:
        seen_t = {d.tuple_key() for d in dets}
        seen_c = {d.label["class"] for d in dets}
        for t in seen_t:
            tuple_counts[t] = tuple_counts.get(t, 0) + 1
        for c in seen_c:
            class_counts[c] = class_counts.get(c, 0) + 1
    present_t = {t for t, c in tuple_counts.items() if c * 2 >= n}
    present_c = {c for c, k in class_counts.items() if k * 2 >= n}
    return present_t, present_c


def object_accuracy(videos: list[np.ndarray], expected: list[set], oracle) -> float:
    """Fraction of videos whose detected object set matches expectations.

    A tuple counts as detected when it appears in at least half the
    frames; any extra majority-present class makes the sample wrong.
    """
    _require_validated(oracle)
    if len(videos) != len(expected):
        raise InputError("videos/expected length mismatch")
    correct = 0
    for video, exp in zip(videos, expected):
        per_frame = [oracle.detect(frame) for frame in video]
        present_t, present_c = _majority_tuples(per_frame)
        exp_classes = {dict(t)["class"] for t in exp}
        if exp <= present_t and present_c <= exp_classes:
            correct += 1
    return correct / len(videos)


def _frame_miou(dets: list[Detection], gt: list[dict], kind: str) -> float:
    matched_pred = set()
    scores = []
    for rec in gt:
        cls = rec["class"]
        best, best_j = 0.0, None
        for j, d in enumerate(dets):
            if j in matched_pred or d.label["class"] != cls:
                continue
            v = iou(d.box, tuple(rec["bbox"]))
            if v > best:
                best, best_j = v, j
        if best_j is not None:
            matched_pred.add(best_j)
        scores.append(best)
    unmatched_pred = len(dets) - len(matched_pred)
    scores.extend([0.0] * unmatched_pred)
    return float(np.mean(scores)) if scores else 1.0


def miou(videos: list[np.ndarray], gt_annotations: list[list], oracle,
         kind: str = "smnist") -> float:
    """Greedy class-matched IoU, averaged over frames then samples."""
    _require_validated(oracle)
    if len(videos) != len(gt_annotations):
        raise InputError("videos/annotations length mismatch")
    per_sample = []
    for video, annos in zip(videos, gt_annotations):
        frame_scores = [_frame_miou(oracle.detect(frame), frame_gt, kind)
                        for frame, frame_gt in zip(video, annos)]
        per_sample.append(float(np.mean(frame_scores)))
    return float(np.mean(per_sample))


@dataclass
class MetricReport:
    vad: float
    oa: float | None
    miou: float | None
    sample_count: int
    extractor_id: str
    oracle_fingerprint: str | None = None
    fps: float | None = None
    per_sample: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "vad": self.vad, "oa": self.oa, "miou": self.miou,
            "sample_count": self.sample_count,
            "extractor_id": self.extractor_id,
            "oracle_fingerprint": self.oracle_fingerprint,
            "fps": self.fps,
            "per_sample": self.per_sample,
        }, sort_keys=True, indent=2)
