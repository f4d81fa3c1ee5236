"""Mask head over decoder slots and the unified panoptic merge.

Each slot embedding attends over the encoder memory, producing one
heatmap per attention head; a small conv + bilinear-upsample stack turns
the stacked heatmaps into per-slot mask logits at twice the feature
resolution (stride 4 for the default stride-8 backbone).  Merging is a
per-pixel argmax over confident slots, followed by collapsing stuff
classes and removing tiny segments.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import ConfigError, xavier_uniform
from .tensor import Parameter, Tensor

PANOPTIC_MAGIC = b"SPAN"
PANOPTIC_VERSION = 1


@dataclass(frozen=True)
class SegmentInfo:
    class_id: int
    is_thing: bool


@dataclass
class PanopticMap:
    """Label map of segment ids (0 = void) plus the segment table."""

    labels: np.ndarray                # [H, W] int
    segments: dict                    # id -> SegmentInfo

    @property
    def shape(self):
        return self.labels.shape

    def area(self, segment_id: int) -> int:
        return int((self.labels == segment_id).sum())


@dataclass
class MaskOutput:
    """Per-slot mask logits [N, h, w] plus the raw per-head heatmaps."""

    logits: Tensor
    heatmaps: Tensor                  # [M, N, HW], rows sum to 1 over HW


class MaskHead:
    """Multi-head attention heatmaps -> conv stack -> per-slot logits."""

    def __init__(self, d: int, num_heads: int, rng, hidden: int = 8,
                 name: str = "mask_head"):
        if d % num_heads != 0:
            raise ConfigError(f"width {d} not divisible by {num_heads} heads")
        self.d = d
        self.num_heads = num_heads
        self.d_head = d // num_heads
        stack = lambda: np.stack([
            xavier_uniform(rng, (self.d_head, d), d, self.d_head)
            for _ in range(num_heads)])
        self.q_proj = Parameter(f"{name}.q_proj.weight", Tensor(stack()))
        self.k_proj = Parameter(f"{name}.k_proj.weight", Tensor(stack()))
        self.q_bias = Parameter(f"{name}.q_proj.bias",
                                Tensor(np.zeros((num_heads, self.d_head, 1))))
        self.k_bias = Parameter(f"{name}.k_proj.bias",
                                Tensor(np.zeros((num_heads, self.d_head, 1))))
        self.conv1_w = Parameter(f"{name}.conv1.weight",
                                 Tensor(kaiming(rng, (hidden, num_heads, 3, 3))))
        self.conv1_b = Parameter(f"{name}.conv1.bias", Tensor(np.zeros(hidden)))
        self.conv2_w = Parameter(f"{name}.conv2.weight",
                                 Tensor(kaiming(rng, (1, hidden, 3, 3))))
        self.conv2_b = Parameter(f"{name}.conv2.bias", Tensor(np.zeros(1)))

    def parameters(self):
        return [self.q_proj, self.q_bias, self.k_proj, self.k_bias,
                self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.zero_grad()

    def attention_maps(self, decoder_embs: Tensor, memory: Tensor) -> Tensor:
        """Heatmaps [M, N, HW]; each row is a softmax over the HW grid."""
        q = T.matmul(self.q_proj.tensor, decoder_embs) + self.q_bias.tensor
        k = T.matmul(self.k_proj.tensor, memory) + self.k_bias.tensor
        scores = T.matmul(T.transpose(q * (1.0 / math.sqrt(self.d_head))), k)
        return T.softmax_lastdim(scores)

    def __call__(self, decoder_embs: Tensor, memory: Tensor,
                 height: int, width: int) -> MaskOutput:
        """Mask logits for N slots given [d,N] embeddings and [d,HW] memory."""
        if memory.shape[-1] != height * width:
            raise T.DimensionError(
                f"memory length {memory.shape[-1]} != {height}x{width}")
        n = decoder_embs.shape[-1]
        heat = self.attention_maps(decoder_embs, memory)          # [M,N,HW]
        maps = T.reshape(T.transpose(heat, (1, 0, 2)),
                         (n, self.num_heads, height, width))
        x = T.relu(T.conv2d(maps, self.conv1_w.tensor, self.conv1_b.tensor,
                            padding=1))
        x = T.upsample2x_bilinear(x)
        x = T.conv2d(x, self.conv2_w.tensor, self.conv2_b.tensor, padding=1)
        logits = T.reshape(x, (n, 2 * height, 2 * width))
        return MaskOutput(logits=logits, heatmaps=heat)


def kaiming(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def panoptic_merge(mask_logits: np.ndarray, confidences: np.ndarray,
                   classes: np.ndarray, thing_classes: int,
                   conf_thresh: float = 0.85, min_area: int = 4) -> PanopticMap:
    """Fuse per-slot masks into a disjoint segmentation.

    Slots below the confidence threshold are dropped; each pixel goes to
    the highest-logit surviving slot; slots of the same stuff class
    collapse into one segment; segments smaller than ``min_area`` are
    deleted and their pixels move to the next-best surviving slot (void
    if none remains).
    """
    mask_logits = np.asarray(mask_logits, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    n, h, w = mask_logits.shape
    labels = np.zeros((h, w), dtype=np.int64)
    keep = np.flatnonzero(confidences >= conf_thresh)
    if len(keep) == 0:
        return PanopticMap(labels=labels, segments={})

    logits = mask_logits[keep]                      # [k, h, w]
    kept_classes = classes[keep]

    # slot -> segment id, collapsing stuff classes into one segment
    seg_of_slot = np.zeros(len(keep), dtype=np.int64)
    segments: dict[int, SegmentInfo] = {}
    stuff_segment: dict[int, int] = {}
    next_id = 1
    for i, cls in enumerate(kept_classes):
        is_thing = cls < thing_classes
        if not is_thing and int(cls) in stuff_segment:
            seg_of_slot[i] = stuff_segment[int(cls)]
            continue
        seg_of_slot[i] = next_id
        segments[next_id] = SegmentInfo(int(cls), bool(is_thing))
        if not is_thing:
            stuff_segment[int(cls)] = next_id
        next_id += 1

    winner = np.argmax(logits, axis=0)              # [h, w] kept-slot index
    labels = seg_of_slot[winner]

    ids, areas = np.unique(labels, return_counts=True)
    dead = {int(s) for s, a in zip(ids, areas) if a < min_area}
    if dead:
        alive_slots = np.array([i for i in range(len(keep))
                                if seg_of_slot[i] not in dead])
        dead_pixels = np.isin(labels, list(dead))
        if len(alive_slots) == 0:
            labels[dead_pixels] = 0
        else:
            ys, xs = np.nonzero(dead_pixels)
            if len(ys):
                best = alive_slots[np.argmax(logits[alive_slots][:, ys, xs], axis=0)]
                labels[ys, xs] = seg_of_slot[best]
        for seg in dead:
            segments.pop(seg, None)

    present = set(np.unique(labels).tolist()) - {0}
    segments = {sid: info for sid, info in segments.items() if sid in present}
    return PanopticMap(labels=labels, segments=segments)


def panoptic_from_sample(sample, num_thing_classes: int) -> PanopticMap:
    """Ground-truth PanopticMap from a synthetic Sample."""
    stuff = sample.stuff_map
    h, w = stuff.shape
    labels = np.zeros((h, w), dtype=np.int64)
    segments = {}
    next_id = 1
    for cls in sorted(set(stuff.reshape(-1).tolist())):
        region = stuff == cls
        labels[region] = next_id
        segments[next_id] = SegmentInfo(int(cls), False)
        next_id += 1
    masks = sample.masks if sample.masks is not None else []
    for cls, mask in zip(sample.targets.classes, masks):
        if not mask.any():
            continue
        labels[mask] = next_id
        segments[next_id] = SegmentInfo(int(cls), True)
        next_id += 1
    present = set(np.unique(labels).tolist()) - {0}
    segments = {sid: info for sid, info in segments.items() if sid in present}
    return PanopticMap(labels=labels, segments=segments)


def downsample_map(pmap: PanopticMap, factor: int) -> PanopticMap:
    """Majority-vote downsampling (for comparing against stride-4 masks)."""
    h, w = pmap.labels.shape
    hh, ww = h // factor, w // factor
    blocks = pmap.labels[:hh * factor, :ww * factor] \
        .reshape(hh, factor, ww, factor).transpose(0, 2, 1, 3).reshape(hh, ww, -1)
    out = np.zeros((hh, ww), dtype=np.int64)
    for i in range(hh):
        for j in range(ww):
            vals, counts = np.unique(blocks[i, j], return_counts=True)
            out[i, j] = vals[np.argmax(counts)]
    present = set(np.unique(out).tolist()) - {0}
    segments = {sid: info for sid, info in pmap.segments.items() if sid in present}
    return PanopticMap(labels=out, segments=segments)


def save_panoptic(pmap: PanopticMap, path: str):
    """Binary dump: JSON segment table + row-major u16 label grid."""
    table = {"segments": [{"id": int(sid), "class": info.class_id,
                           "is_thing": info.is_thing}
                          for sid, info in sorted(pmap.segments.items())]}
    encoded = json.dumps(table).encode("utf-8")
    h, w = pmap.labels.shape
    if pmap.labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("segment ids exceed u16 range")
    with open(path, "wb") as fh:
        fh.write(PANOPTIC_MAGIC)
        fh.write(struct.pack("<II", PANOPTIC_VERSION, len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<II", h, w))
        fh.write(pmap.labels.astype("<u2").tobytes())


def load_panoptic(path: str) -> PanopticMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PANOPTIC_MAGIC:
            raise ValueError(f"bad panoptic magic {magic!r}")
        version, json_len = struct.unpack("<II", fh.read(8))
        if version != PANOPTIC_VERSION:
            raise ValueError(f"unsupported panoptic version {version}")
        table = json.loads(fh.read(json_len).decode("utf-8"))
        h, w = struct.unpack("<II", fh.read(8))
        labels = np.frombuffer(fh.read(2 * h * w), dtype="<u2") \
            .reshape(h, w).astype(np.int64)
    segments = {int(rec["id"]): SegmentInfo(int(rec["class"]), bool(rec["is_thing"]))
                for rec in table["segments"]}
    return PanopticMap(labels=labels, segments=segments)
