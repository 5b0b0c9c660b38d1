"""Label-transformation geometry and synthetic multi-task datasets.

The chain: rotated boxes are rasterized into binary instance masks
(pixel-center containment, boundary inclusive), each mask yields its minimum
circumscribed horizontal rectangle, and the masks painted with their class
ids in list order compose the semantic map (background/ignore = 255, later
instances overwrite earlier ones on overlap).

A rotated box maps box-frame points (u, v) to the image plane with
p = center + [[cos t, sin t], [-sin t, cos t]] (u, v); a pixel center is
inside iff its inverse-rotated coordinates satisfy |u| <= w/2 and |v| <= h/2.

On-disk dataset format ("MTSD1"), binary, all text lines ASCII:

    b"MTSD1 <n_samples> <H> <W> <n_classes> <dataset_id>\\n"
    per sample:
        b"SMPL <n_instances> <n_rboxes>\\n"
        one TNSR1 block (the [C,H,W] image)
        b"SEM\\n" + H*W raw bytes (row-major class map, 255 = ignore)
        per instance:
            b"INST <xmin> <ymin> <xmax> <ymax> <class> <n_runs>\\n"
            b"<run lengths, space separated>\\n"
        per rotated box:
            b"RBOX <cx> <cy> <w> <h> <theta> <class>\\n"

Instance masks are run-length encoded over the row-major flattened mask:
runs alternate zeros/ones starting with the zero run (which may be 0) and
must sum to H*W. Floats are written with ``repr`` so the round trip is
bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DatasetError,
    DegenerateSampleError,
    EmptyMaskError,
    LabelError,
    ShapeError,
)
from .tensorcore import Rng, Tensor
from .tensorcore.rng import _fold
from .tensorcore.tensor import tensor_from_bytes, tensor_to_bytes

IGNORE_INDEX = 255


def normalize_theta(theta: float) -> float:
    """Map an angle to [-pi/2, pi/2) (rectangle symmetry period)."""
    t = math.fmod(theta + math.pi / 2.0, math.pi)
    if t < 0.0:
        t += math.pi
    return t - math.pi / 2.0


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float
    class_id: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise LabelError(f"box sides must be positive, got w={self.w} h={self.h}")
        if not (0 <= self.class_id < IGNORE_INDEX):
            raise LabelError(f"class_id {self.class_id} outside [0, {IGNORE_INDEX})")
        if not (-math.pi / 2.0 <= self.theta < math.pi / 2.0):
            raise LabelError(
                f"theta {self.theta} not normalized to [-pi/2, pi/2); "
                "use normalize_theta"
            )


@dataclass(frozen=True)
class InstanceAnnotation:
    hbox: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max (inclusive)
    mask: np.ndarray
    class_id: int


@dataclass
class MultiTaskSample:
    image: Tensor
    semantic: np.ndarray  # [H,W] uint8, 255 = ignore
    instances: list[InstanceAnnotation]
    rboxes: list[RotatedBox]
    dataset_id: int


def rasterize_rbox(box: RotatedBox, grid: tuple[int, int]) -> np.ndarray:
    """Boolean [H,W] mask of pixel centers inside (or on) the rotated box.

    May be all-false when the box lies off the grid; callers decide whether
    an empty mask is an error.
    """
    H, W = grid
    if H < 1 or W < 1:
        raise ShapeError(f"grid must be at least 1x1, got {grid}")
    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    dx = xs - box.cx
    dy = ys - box.cy
    ct, st = math.cos(box.theta), math.sin(box.theta)
    u = ct * dx - st * dy
    v = st * dx + ct * dy
    return (np.abs(u) <= box.w / 2.0) & (np.abs(v) <= box.h / 2.0)


def min_hbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Exact pixel extent (x_min, y_min, x_max, y_max) of a nonempty mask."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise EmptyMaskError("cannot take the horizontal box of an empty mask")
    return (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def compose_semantic(
    painted: list[tuple[np.ndarray, int]], grid: tuple[int, int]
) -> np.ndarray:
    """Class map from (mask, class_id) pairs; later entries win on overlap."""
    H, W = grid
    out = np.full((H, W), IGNORE_INDEX, dtype=np.uint8)
    for mask, class_id in painted:
        if mask.shape != (H, W):
            raise ShapeError(f"mask shape {mask.shape} != grid {(H, W)}")
        if not (0 <= class_id < IGNORE_INDEX):
            raise LabelError(f"class_id {class_id} outside [0, {IGNORE_INDEX})")
        out[mask] = class_id
    return out


def build_sample(
    rboxes: list[RotatedBox], image: Tensor, dataset_id: int
) -> tuple[MultiTaskSample, int]:
    """Run the full label chain; returns (sample, dropped_empty_boxes)."""
    if image.data.ndim != 3:
        raise ShapeError(f"image must be [C,H,W], got shape {image.shape}")
    H, W = image.shape[1], image.shape[2]
    instances: list[InstanceAnnotation] = []
    kept_boxes: list[RotatedBox] = []
    dropped = 0
    for box in rboxes:
        mask = rasterize_rbox(box, (H, W))
        if not mask.any():
            dropped += 1
            continue
        instances.append(InstanceAnnotation(min_hbox(mask), mask, box.class_id))
        kept_boxes.append(box)
    if not instances:
        raise DegenerateSampleError(
            f"all {len(rboxes)} boxes rasterized to empty masks"
        )
    semantic = compose_semantic([(i.mask, i.class_id) for i in instances], (H, W))
    return MultiTaskSample(image, semantic, instances, kept_boxes, dataset_id), dropped


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings for one synthetic stream."""

    n_samples: int
    height: int
    width: int
    n_classes: int
    boxes_min: int
    boxes_max: int
    n_channels: int = 3
    dataset_id: int = 1
    min_side: float = 3.0
    max_side: float | None = None
    noise: float = 0.1
    brightness: float = 0.7

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.height < 4 or self.width < 4:
            raise ConfigError("grid must be at least 4x4")
        if not (1 <= self.n_classes < IGNORE_INDEX):
            raise ConfigError(f"n_classes must lie in [1, {IGNORE_INDEX})")
        if self.boxes_min < 0 or self.boxes_max < self.boxes_min:
            raise ConfigError(
                f"invalid boxes-per-image range [{self.boxes_min}, {self.boxes_max}]"
            )
        if self.n_channels < 1:
            raise ConfigError("n_channels must be >= 1")
        if self.min_side <= 0 or (self.max_side is not None and self.max_side < self.min_side):
            raise ConfigError("invalid box side range")

    @property
    def side_range(self) -> tuple[float, float]:
        hi = self.max_side if self.max_side is not None else min(self.height, self.width) / 2.0
        return (self.min_side, hi)


def class_color(dataset_id: int, class_id: int, channel: int) -> float:
    """Deterministic per-class channel brightness in [0.3, 1.0)."""
    return 0.3 + 0.7 * Rng(_fold(0x5EED, (dataset_id, class_id, channel))).uniform()


def _draw_boxes(spec: SynthSpec, rng: Rng) -> list[RotatedBox]:
    lo, hi = spec.side_range
    n = rng.randint(spec.boxes_min, spec.boxes_max)
    boxes = []
    for _ in range(n):
        cx = rng.uniform_in(2.0, spec.width - 3.0)
        cy = rng.uniform_in(2.0, spec.height - 3.0)
        w = rng.uniform_in(lo, hi)
        h = rng.uniform_in(lo, hi)
        theta = normalize_theta(rng.uniform_in(-math.pi / 2.0, math.pi / 2.0))
        boxes.append(RotatedBox(cx, cy, w, h, theta, rng.randrange(spec.n_classes)))
    return boxes


def render_image(spec: SynthSpec, boxes: list[RotatedBox], rng: Rng) -> Tensor:
    img = rng.uniforms((spec.n_channels, spec.height, spec.width)) * spec.noise
    for box in boxes:
        mask = rasterize_rbox(box, (spec.height, spec.width))
        for c in range(spec.n_channels):
            img[c][mask] += spec.brightness * class_color(spec.dataset_id, box.class_id, c)
    return Tensor._wrap(img)


def synth_dataset(spec: SynthSpec, rng: Rng) -> list[MultiTaskSample]:
    """Deterministic samples; sample i depends only on (rng.seed, i).

    Degenerate draws (every box missing the grid) are retried a bounded
    number of times and the sample is skipped if none succeed; an error is
    raised only when nothing at all could be generated.
    """
    samples: list[MultiTaskSample] = []
    for i in range(spec.n_samples):
        child = rng.derive(i)
        for _attempt in range(64):
            boxes = _draw_boxes(spec, child)
            try:
                sample, _ = build_sample(boxes, render_image(spec, boxes, child), spec.dataset_id)
            except DegenerateSampleError:
                continue
            samples.append(sample)
            break
    if not samples:
        raise DatasetError(
            f"all {spec.n_samples} samples rejected "
            f"(boxes-per-image range [{spec.boxes_min}, {spec.boxes_max}])"
        )
    return samples


# ---------------------------------------------------------------------------
# MTSD1 serialization


def rle_encode(mask: np.ndarray) -> list[int]:
    """Alternating run lengths over the flattened mask, zeros first."""
    flat = mask.reshape(-1).astype(np.uint8)
    runs: list[int] = []
    current = 0
    count = 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current = 1 - current
            count = 1
    runs.append(count)
    return runs


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = shape[0] * shape[1]
    flat = np.zeros(total, dtype=bool)
    at = 0
    val = False
    for r in runs:
        if r < 0 or at + r > total:
            raise DatasetError(f"run-length data overruns mask of {total} pixels")
        if val:
            flat[at : at + r] = True
        at += r
        val = not val
    if at != total:
        raise DatasetError(f"run lengths sum to {at}, expected {total}")
    return flat.reshape(shape)


@dataclass
class LoadedDataset:
    samples: list[MultiTaskSample]
    n_classes: int
    dataset_id: int
    height: int
    width: int


def dataset_to_bytes(samples: list[MultiTaskSample], n_classes: int) -> bytes:
    if not samples:
        raise DatasetError("cannot serialize an empty dataset")
    H, W = samples[0].semantic.shape
    dataset_id = samples[0].dataset_id
    out = [f"MTSD1 {len(samples)} {H} {W} {n_classes} {dataset_id}\n".encode("ascii")]
    for s in samples:
        if s.semantic.shape != (H, W) or s.dataset_id != dataset_id:
            raise DatasetError("samples disagree on grid size or dataset id")
        out.append(f"SMPL {len(s.instances)} {len(s.rboxes)}\n".encode("ascii"))
        out.append(tensor_to_bytes(s.image))
        out.append(b"SEM\n")
        out.append(s.semantic.astype(np.uint8).tobytes())
        for inst in s.instances:
            runs = rle_encode(inst.mask)
            x0, y0, x1, y1 = inst.hbox
            out.append(
                f"INST {x0} {y0} {x1} {y1} {inst.class_id} {len(runs)}\n".encode("ascii")
            )
            out.append((" ".join(str(r) for r in runs) + "\n").encode("ascii"))
        for box in s.rboxes:
            out.append(
                f"RBOX {box.cx!r} {box.cy!r} {box.w!r} {box.h!r} {box.theta!r} "
                f"{box.class_id}\n".encode("ascii")
            )
    return b"".join(out)


def _take_line(buf: bytes, at: int) -> tuple[str, int]:
    end = buf.find(b"\n", at)
    if end < 0:
        raise DatasetError(f"unterminated line at byte offset {at}")
    return buf[at:end].decode("ascii"), end + 1


def dataset_from_bytes(buf: bytes) -> LoadedDataset:
    line, at = _take_line(buf, 0)
    parts = line.split()
    if len(parts) != 6 or parts[0] != "MTSD1":
        raise DatasetError("bad MTSD1 header")
    n_samples, H, W, n_classes, dataset_id = (int(p) for p in parts[1:])
    samples: list[MultiTaskSample] = []
    for _ in range(n_samples):
        line, at = _take_line(buf, at)
        parts = line.split()
        if len(parts) != 3 or parts[0] != "SMPL":
            raise DatasetError(f"bad sample header at byte offset {at}")
        n_inst, n_box = int(parts[1]), int(parts[2])
        image, at = tensor_from_bytes(buf, at)
        if image.shape[1] != H or image.shape[2] != W:
            raise DatasetError(f"image grid {image.shape} disagrees with header {H}x{W}")
        line, at = _take_line(buf, at)
        if line != "SEM":
            raise DatasetError(f"expected SEM marker at byte offset {at}")
        sem = np.frombuffer(buf[at : at + H * W], dtype=np.uint8).reshape(H, W).copy()
        if sem.size != H * W:
            raise DatasetError("truncated semantic map")
        at += H * W
        instances = []
        for _ in range(n_inst):
            line, at = _take_line(buf, at)
            parts = line.split()
            if len(parts) != 7 or parts[0] != "INST":
                raise DatasetError(f"bad instance header at byte offset {at}")
            x0, y0, x1, y1, cls, n_runs = (int(p) for p in parts[1:])
            line, at = _take_line(buf, at)
            runs = [int(p) for p in line.split()]
            if len(runs) != n_runs:
                raise DatasetError(f"expected {n_runs} runs, got {len(runs)}")
            instances.append(InstanceAnnotation((x0, y0, x1, y1), rle_decode(runs, (H, W)), cls))
        rboxes = []
        for _ in range(n_box):
            line, at = _take_line(buf, at)
            parts = line.split()
            if len(parts) != 7 or parts[0] != "RBOX":
                raise DatasetError(f"bad box record at byte offset {at}")
            rboxes.append(
                RotatedBox(
                    float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]),
                    float(parts[5]), int(parts[6]),
                )
            )
        samples.append(MultiTaskSample(image, sem, instances, rboxes, dataset_id))
    if at != len(buf):
        raise DatasetError(f"trailing bytes after dataset at byte offset {at}")
    return LoadedDataset(samples, n_classes, dataset_id, H, W)


def write_dataset(path, samples: list[MultiTaskSample], n_classes: int) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(samples, n_classes))


def read_dataset(path) -> LoadedDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
