"""Multi-task pretraining engine.

One shared backbone feeds three per-stream head groups (semantic, instance,
rotated detection); the twelve loss terms are summed unweighted, stream by
stream, and the single total is backpropagated once per iteration. Streams
keep structurally disjoint class spaces: every stream owns its own heads,
and ``stream_class_offsets`` maps local class ids into one global space.

Heads are deliberately small dense predictors over the shared pyramid:

* semantic: per-level 1x1 projection to class logits, bilinearly upsampled
  to image resolution and averaged across levels;
* instance: per-cell objectness, class logits and horizontal-box regression
  on the fused pyramid, plus a per-pixel foreground logit map;
* rotated: per-cell objectness, class logits and 5-parameter regression
  (dx, dy, log w, log h, theta).

A cell is positive when a box center falls inside it; when two boxes share
a cell the lower list index wins. Regression targets are
((cx - cell_cx)/stride, (cy - cell_cy)/stride, log(w/stride), log(h/stride)
[, theta]).

Checkpoints are TNSR1 containers keyed by the flat scheme
``stem.* / pos_embed / layerNN.* / heads.s{i}.{task}.*``; everything outside
``heads.`` counts as backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .annotation_pipeline import (
    IGNORE_INDEX,
    InstanceAnnotation,
    LoadedDataset,
    MultiTaskSample,
    RotatedBox,
    SynthSpec,
    read_dataset,
    synth_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    LabelError,
    ScheduleError,
    ShapeError,
    TrainingError,
)
from .rvsa_attention import RvsaConfig, backbone_tokens, backbone_weight_names, init_backbone, preset
from .tensorcore import Rng, Tensor, Var, apply_op, backward, composite
from .tensorcore.autodiff import grads_by_name, leaves_of
from .tensorcore.gradcheck import register_case
from .tensorcore.ops import (
    bce_mean_op,
    ce_rows_mean_op,
    chw_to_tokens_op,
    gather_rows_op,
    patchify_op,
    reshape_op,
    semantic_ce_op,
    smooth_l1_mean_op,
    tokens_to_chw_op,
    upsample_bilinear_op,
    v_add,
    v_linear_rows,
    v_scale,
)
from .tensorcore.tensor import read_container, write_container

N_STREAMS = 3


def stream_class_offsets(stream_classes: tuple[int, ...]) -> tuple[int, ...]:
    """Offset of each stream's local class 0 in the global class space."""
    offsets = []
    at = 0
    for k in stream_classes:
        offsets.append(at)
        at += k
    return tuple(offsets)


# ---------------------------------------------------------------------------
# loss reports


@dataclass(frozen=True)
class StreamLossTerms:
    l_rod: float
    l_ins_b: float
    l_ins_m: float
    l_sem: float


@dataclass(frozen=True)
class MtpLossReport:
    l_rod: tuple[float, float, float]
    l_ins_b: tuple[float, float, float]
    l_ins_m: tuple[float, float, float]
    l_sem: tuple[float, float, float]
    total: float


def aggregate_mtp(reports: list[StreamLossTerms]) -> MtpLossReport:
    """Unweighted sum of all 12 terms, accumulated stream-major, term order
    (rod, ins_b, ins_m, sem); the summation order is part of the contract."""
    if len(reports) != N_STREAMS:
        raise ConfigError(f"need exactly {N_STREAMS} stream reports, got {len(reports)}")
    total = 0.0
    for r in reports:
        total = total + r.l_rod
        total = total + r.l_ins_b
        total = total + r.l_ins_m
        total = total + r.l_sem
    return MtpLossReport(
        l_rod=tuple(r.l_rod for r in reports),
        l_ins_b=tuple(r.l_ins_b for r in reports),
        l_ins_m=tuple(r.l_ins_m for r in reports),
        l_sem=tuple(r.l_sem for r in reports),
        total=total,
    )


# ---------------------------------------------------------------------------
# cell target assignment


def _cell_of(coord: float, stride: int, n_cells: int, what: str) -> int:
    idx = math.floor((coord + 0.5) / stride)
    if not 0 <= idx < n_cells:
        raise LabelError(f"{what} center coordinate {coord} falls outside the cell grid")
    return int(idx)


def _cell_center(idx: int, stride: int) -> float:
    return idx * stride + (stride - 1) / 2.0


def rotated_cell_targets(
    rboxes: list[RotatedBox], hp: int, wp: int, stride: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(objectness targets [N], positive cell indices, classes, 5-d targets)."""
    obj = np.zeros(hp * wp, dtype=np.float64)
    taken: dict[int, None] = {}
    idxs, classes, regs = [], [], []
    for box in rboxes:
        col = _cell_of(box.cx, stride, wp, "box")
        row = _cell_of(box.cy, stride, hp, "box")
        cell = row * wp + col
        if cell in taken:  # lower list index wins
            continue
        taken[cell] = None
        obj[cell] = 1.0
        idxs.append(cell)
        classes.append(box.class_id)
        regs.append(
            [
                (box.cx - _cell_center(col, stride)) / stride,
                (box.cy - _cell_center(row, stride)) / stride,
                math.log(box.w / stride),
                math.log(box.h / stride),
                box.theta,
            ]
        )
    return (
        obj,
        np.asarray(idxs, dtype=np.int64),
        np.asarray(classes, dtype=np.int64),
        np.asarray(regs, dtype=np.float64).reshape(len(idxs), 5),
    )


def hbox_cell_targets(
    instances: list[InstanceAnnotation], hp: int, wp: int, stride: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Same scheme as rotated targets, from horizontal boxes, without theta."""
    obj = np.zeros(hp * wp, dtype=np.float64)
    taken: dict[int, None] = {}
    idxs, classes, regs = [], [], []
    for inst in instances:
        x0, y0, x1, y1 = inst.hbox
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        w, h = x1 - x0 + 1.0, y1 - y0 + 1.0
        col = _cell_of(cx, stride, wp, "instance")
        row = _cell_of(cy, stride, hp, "instance")
        cell = row * wp + col
        if cell in taken:
            continue
        taken[cell] = None
        obj[cell] = 1.0
        idxs.append(cell)
        classes.append(inst.class_id)
        regs.append(
            [
                (cx - _cell_center(col, stride)) / stride,
                (cy - _cell_center(row, stride)) / stride,
                math.log(w / stride),
                math.log(h / stride),
            ]
        )
    return (
        obj,
        np.asarray(idxs, dtype=np.int64),
        np.asarray(classes, dtype=np.int64),
        np.asarray(regs, dtype=np.float64).reshape(len(idxs), 4),
    )


def union_mask(instances: list[InstanceAnnotation], grid: tuple[int, int]) -> np.ndarray:
    out = np.zeros(grid, dtype=np.float64)
    for inst in instances:
        out[inst.mask] = 1.0
    return out


# ---------------------------------------------------------------------------
# loss functions (Var builders + value-level wrappers)


def _validate_semantic(logits_shape, semantic: np.ndarray) -> None:
    K = logits_shape[0]
    if logits_shape[1:] != semantic.shape:
        raise ShapeError(f"logits {logits_shape} vs semantic map {semantic.shape}")
    labels = np.unique(semantic)
    bad = labels[(labels != IGNORE_INDEX) & (labels >= K)]
    if bad.size:
        raise LabelError(f"semantic label {int(bad[0])} >= class count {K}")


def semantic_loss_var(logits: Var, semantic: np.ndarray) -> Var:
    _validate_semantic(logits.value.shape, semantic)
    return apply_op(semantic_ce_op(semantic), logits)


def loss_semantic(logits: Tensor, semantic: np.ndarray) -> float:
    """Mean cross-entropy over non-ignore pixels; 0 when all pixels ignored."""
    return semantic_loss_var(Var(logits), semantic).item()


def rotated_loss_var(
    obj: Var, cls: Var, reg: Var, rboxes: list[RotatedBox], hp: int, wp: int, stride: int
) -> Var:
    obj_t, idxs, classes, regs = rotated_cell_targets(rboxes, hp, wp, stride)
    loss = apply_op(bce_mean_op(obj_t), obj)
    if len(idxs):
        gather = gather_rows_op(idxs)
        loss = v_add(loss, apply_op(ce_rows_mean_op(classes), apply_op(gather, cls)))
        loss = v_add(loss, apply_op(smooth_l1_mean_op(regs), apply_op(gather, reg)))
    return loss


def loss_rotated(
    obj: Tensor, cls: Tensor, reg: Tensor, rboxes: list[RotatedBox], hp: int, wp: int, stride: int
) -> float:
    """Objectness BCE + class CE at positives + smooth-L1 on 5-d regression."""
    return rotated_loss_var(Var(obj), Var(cls), Var(reg), rboxes, hp, wp, stride).item()


def instance_loss_var(
    obj: Var,
    cls: Var,
    reg: Var,
    fg: Var,
    instances: list[InstanceAnnotation],
    hp: int,
    wp: int,
    stride: int,
) -> tuple[Var, Var]:
    obj_t, idxs, classes, regs = hbox_cell_targets(instances, hp, wp, stride)
    box_loss = apply_op(bce_mean_op(obj_t), obj)
    if len(idxs):
        gather = gather_rows_op(idxs)
        box_loss = v_add(box_loss, apply_op(ce_rows_mean_op(classes), apply_op(gather, cls)))
        box_loss = v_add(box_loss, apply_op(smooth_l1_mean_op(regs), apply_op(gather, reg)))
    mask_loss = apply_op(bce_mean_op(union_mask(instances, fg.value.shape)), fg)
    return box_loss, mask_loss


def loss_instance(
    obj: Tensor,
    cls: Tensor,
    reg: Tensor,
    fg: Tensor,
    instances: list[InstanceAnnotation],
    hp: int,
    wp: int,
    stride: int,
) -> tuple[float, float]:
    """(box loss without theta, foreground-map BCE against the union mask)."""
    b, m = instance_loss_var(Var(obj), Var(cls), Var(reg), Var(fg), instances, hp, wp, stride)
    return b.item(), m.item()


# ---------------------------------------------------------------------------
# schedules and optimizer


@dataclass
class OptimState:
    base_lr: float
    weight_decay: float
    layer_decay_rate: float
    warmup_iters: int
    warmup_init_lr: float
    total_iters: int
    depth: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def lr_at(iteration: int, st: OptimState) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at total_iters."""
    if not 0 <= iteration <= st.total_iters:
        raise ScheduleError(f"iteration {iteration} outside [0, {st.total_iters}]")
    if iteration < st.warmup_iters:
        frac = iteration / st.warmup_iters
        return st.warmup_init_lr + (st.base_lr - st.warmup_init_lr) * frac
    span = st.total_iters - st.warmup_iters
    progress = (iteration - st.warmup_iters) / span if span > 0 else 1.0
    return st.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def layer_lr_scale(layer_index: int, depth: int, rate: float) -> float:
    """rate^(depth+1-layer_index); the head group (index depth+1) gets 1."""
    if not 1 <= layer_index <= depth + 1:
        raise ScheduleError(f"layer index {layer_index} outside [1, {depth + 1}]")
    return rate ** (depth + 1 - layer_index)


def param_layer_index(name: str, depth: int) -> int:
    """Heads sit at depth+1; the stem and positional table share layer 1."""
    if name.startswith("heads."):
        return depth + 1
    if name.startswith("layer"):
        return int(name[5:7])
    if name.startswith("stem.") or name == "pos_embed":
        return 1
    raise ConfigError(f"cannot assign a layer index to parameter {name!r}")


def optimizer_step(params: dict[str, Tensor], grads: dict[str, Tensor], st: OptimState) -> None:
    """Decoupled-weight-decay adaptive update with bias correction.

    Weight decay applies only to parameters of rank >= 2 (biases and
    normalization gains are skipped). Per-parameter lr is
    lr_at(step) * layer_lr_scale(layer of the parameter).
    """
    lr_now = lr_at(st.step, st)
    t = st.step + 1
    bc1 = 1.0 - st.beta1**t
    bc2 = 1.0 - st.beta2**t
    for name, p in params.items():
        g = grads[name].data
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if name not in st.m:
            st.m[name] = Tensor.zeros(p.shape)
            st.v[name] = Tensor.zeros(p.shape)
        m = st.beta1 * st.m[name].data + (1.0 - st.beta1) * g
        v = st.beta2 * st.v[name].data + (1.0 - st.beta2) * (g * g)
        st.m[name] = Tensor._wrap(m)
        st.v[name] = Tensor._wrap(v)
        update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
        if p.data.ndim >= 2 and st.weight_decay != 0.0:
            update = update + st.weight_decay * p.data
        scale = lr_now * layer_lr_scale(param_layer_index(name, st.depth), st.depth, st.layer_decay_rate)
        params[name] = Tensor._wrap(p.data - scale * update)
    st.step += 1


# ---------------------------------------------------------------------------
# model assembly


@dataclass(frozen=True)
class ModelConfig:
    backbone: RvsaConfig
    patch_size: int
    in_channels: int
    image_hw: tuple[int, int]
    stream_classes: tuple[int, int, int]

    def __post_init__(self):
        H, W = self.image_hw
        p = self.patch_size
        if H % p or W % p:
            raise ConfigError(f"patch size {p} does not divide image {H}x{W}")
        if H // p != self.backbone.image_size or W // p != self.backbone.image_size:
            raise ConfigError(
                f"image {H}x{W} with patch {p} gives a {H // p}x{W // p} token grid, "
                f"but the backbone expects {self.backbone.image_size}"
            )

    @property
    def grid_hw(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.patch_size, self.image_hw[1] // self.patch_size)

    @property
    def n_pyramid(self) -> int:
        return len(self.backbone.pyramid_layers)


HEAD_SHAPES = {
    "sem": None,  # per-level, handled separately
    "ins": (("obj", 1), ("cls", None), ("reg", 4), ("fg", 1)),
    "rod": (("obj", 1), ("cls", None), ("reg", 5)),
}


def head_weight_names(mc: ModelConfig) -> list[str]:
    names = []
    for si in range(1, N_STREAMS + 1):
        for lvl in range(1, mc.n_pyramid + 1):
            names += [f"heads.s{si}.sem.lvl{lvl}.weight", f"heads.s{si}.sem.lvl{lvl}.bias"]
        for task in ("ins", "rod"):
            for sub, _rows in HEAD_SHAPES[task]:
                names += [f"heads.s{si}.{task}.{sub}.weight", f"heads.s{si}.{task}.{sub}.bias"]
    return names


def is_backbone_key(name: str) -> bool:
    return not name.startswith("heads.")


def init_model(mc: ModelConfig, rng: Rng, init_scale: float = 0.02) -> dict[str, Tensor]:
    C = mc.backbone.embed_dim
    p = mc.patch_size
    hp, wp = mc.grid_hw
    params: dict[str, Tensor] = {}
    srng = rng.derive(1)
    params["stem.weight"] = Tensor._wrap(srng.normals((C, mc.in_channels * p * p)) * init_scale)
    params["stem.bias"] = Tensor.zeros((C,))
    params["pos_embed"] = Tensor._wrap(rng.derive(2).normals((hp * wp, C)) * init_scale)
    params.update(init_backbone(mc.backbone, rng.derive(3), init_scale))
    hrng = rng.derive(4)
    for si in range(1, N_STREAMS + 1):
        K = mc.stream_classes[si - 1]
        for lvl in range(1, mc.n_pyramid + 1):
            params[f"heads.s{si}.sem.lvl{lvl}.weight"] = Tensor._wrap(
                hrng.derive(si, 0, lvl).normals((K, C)) * init_scale
            )
            params[f"heads.s{si}.sem.lvl{lvl}.bias"] = Tensor.zeros((K,))
        for ti, task in enumerate(("ins", "rod"), start=1):
            for bi, (sub, rows) in enumerate(HEAD_SHAPES[task]):
                n_rows = K if rows is None else rows
                params[f"heads.s{si}.{task}.{sub}.weight"] = Tensor._wrap(
                    hrng.derive(si, ti, bi).normals((n_rows, C)) * init_scale
                )
                params[f"heads.s{si}.{task}.{sub}.bias"] = Tensor.zeros((n_rows,))
    return params


@dataclass
class StreamOutputs:
    sem: Var  # [K, H, W]
    ins_obj: Var  # [N]
    ins_cls: Var  # [N, K]
    ins_reg: Var  # [N, 4]
    fg: Var  # [H, W]
    rod_obj: Var  # [N]
    rod_cls: Var  # [N, K]
    rod_reg: Var  # [N, 5]


def forward_stream(
    image: Var, mc: ModelConfig, wv: dict[str, Var], stream_index: int
) -> StreamOutputs:
    """Stem -> backbone pyramid -> one stream's heads (1-indexed stream)."""
    H, W = mc.image_hw
    hp, wp = mc.grid_hw
    n = hp * wp
    tok = v_linear_rows(
        apply_op(patchify_op(mc.patch_size), image), wv["stem.weight"], wv["stem.bias"]
    )
    tok = v_add(tok, wv["pos_embed"])
    taps = backbone_tokens(tok, hp, wp, mc.backbone, wv)

    pre = f"heads.s{stream_index}"
    up = upsample_bilinear_op(H, W)
    sem_acc = None
    for lvl, (t, th, tw) in enumerate(taps, start=1):
        logits = v_linear_rows(t, wv[f"{pre}.sem.lvl{lvl}.weight"], wv[f"{pre}.sem.lvl{lvl}.bias"])
        K = logits.value.shape[1]
        m = apply_op(up, apply_op(tokens_to_chw_op(th, tw), logits))
        sem_acc = m if sem_acc is None else v_add(sem_acc, m)
    sem = v_scale(sem_acc, 1.0 / len(taps))

    fused = taps[0][0]
    for t, _, _ in taps[1:]:
        fused = v_add(fused, t)
    fused = v_scale(fused, 1.0 / len(taps))

    def cell_head(task: str, sub: str, squeeze: bool = False) -> Var:
        out = v_linear_rows(fused, wv[f"{pre}.{task}.{sub}.weight"], wv[f"{pre}.{task}.{sub}.bias"])
        if squeeze:
            out = apply_op(reshape_op((n,)), out)
        return out

    fg_map = apply_op(
        up, apply_op(tokens_to_chw_op(hp, wp), cell_head("ins", "fg"))
    )
    fg = apply_op(reshape_op((H, W)), fg_map)
    return StreamOutputs(
        sem=sem,
        ins_obj=cell_head("ins", "obj", squeeze=True),
        ins_cls=cell_head("ins", "cls"),
        ins_reg=cell_head("ins", "reg"),
        fg=fg,
        rod_obj=cell_head("rod", "obj", squeeze=True),
        rod_cls=cell_head("rod", "cls"),
        rod_reg=cell_head("rod", "reg"),
    )


def sample_loss_terms(
    image: Var, sample: MultiTaskSample, mc: ModelConfig, wv: dict[str, Var], stream_index: int
) -> tuple[Var, Var, Var, Var]:
    """(l_rod, l_ins_b, l_ins_m, l_sem) for one sample."""
    hp, wp = mc.grid_hw
    outs = forward_stream(image, mc, wv, stream_index)
    rod = rotated_loss_var(outs.rod_obj, outs.rod_cls, outs.rod_reg, sample.rboxes, hp, wp, mc.patch_size)
    ins_b, ins_m = instance_loss_var(
        outs.ins_obj, outs.ins_cls, outs.ins_reg, outs.fg, sample.instances, hp, wp, mc.patch_size
    )
    sem = semantic_loss_var(outs.sem, sample.semantic)
    return rod, ins_b, ins_m, sem


# ---------------------------------------------------------------------------
# training configuration


@dataclass(frozen=True)
class StreamSource:
    path: str | None = None
    synth: SynthSpec | None = None


@dataclass(frozen=True)
class TrainConfig:
    preset_name: str
    iters: int
    seed: int
    streams: tuple[StreamSource, StreamSource, StreamSource]
    base_lr: float = 6e-5
    weight_decay: float = 0.05
    layer_decay: float = 0.9
    warmup_iters: int = 100
    warmup_init_lr: float = 1e-6
    batch_size: int = 2
    patch_size: int = 4
    window_size: int | None = None

    def backbone_config(self) -> RvsaConfig:
        cfg = preset(self.preset_name)
        if self.window_size is not None and self.window_size != cfg.window_size:
            cfg = replace(cfg, window_size=self.window_size)
        return cfg


_CONFIG_DEFAULTS = {
    "base_lr": 6e-5,
    "weight_decay": 0.05,
    "layer_decay": 0.9,
    "warmup_iters": 100,
    "warmup_init_lr": 1e-6,
    "batch_size": 2,
    "patch_size": 4,
    "window_size": None,
}


def parse_train_config(obj: dict) -> TrainConfig:
    """Validate a JSON config document. Documented keys:

    required: preset (str), iters (int), seed (int), streams (list of 3,
    each {"path": str} or {"synth": {...SynthSpec fields...}});
    optional: base_lr, weight_decay, layer_decay, warmup_iters,
    warmup_init_lr, batch_size, patch_size, window_size.
    """
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    for key in ("preset", "iters", "seed", "streams"):
        if key not in obj:
            raise ConfigError(f"config missing required key {key!r}")
    streams_raw = obj["streams"]
    if not isinstance(streams_raw, list) or len(streams_raw) != N_STREAMS:
        raise ConfigError(
            f"config key 'streams' must list exactly {N_STREAMS} streams, "
            f"got {len(streams_raw) if isinstance(streams_raw, list) else type(streams_raw).__name__}"
        )
    sources = []
    for i, entry in enumerate(streams_raw, start=1):
        if not isinstance(entry, dict) or ("path" in entry) == ("synth" in entry):
            raise ConfigError(f"stream {i} must have exactly one of 'path' or 'synth'")
        if "path" in entry:
            sources.append(StreamSource(path=str(entry["path"])))
        else:
            spec_obj = dict(entry["synth"])
            spec_obj.setdefault("dataset_id", i)
            try:
                spec = SynthSpec(**spec_obj)
            except TypeError as e:
                raise ConfigError(f"stream {i} synth spec: {e}") from None
            sources.append(StreamSource(synth=spec))
    kwargs = {}
    for key, default in _CONFIG_DEFAULTS.items():
        kwargs[key] = obj.get(key, default)
    unknown = set(obj) - {"preset", "iters", "seed", "streams"} - set(_CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = TrainConfig(
        preset_name=str(obj["preset"]),
        iters=int(obj["iters"]),
        seed=int(obj["seed"]),
        streams=tuple(sources),
        **kwargs,
    )
    if cfg.iters < 0 or cfg.batch_size < 1:
        raise ConfigError("iters must be >= 0 and batch_size >= 1")
    cfg.backbone_config()  # validates the preset name
    return cfg


@dataclass
class LoadedStream:
    samples: list[MultiTaskSample]
    n_classes: int
    dataset_id: int
    height: int
    width: int


def load_streams(cfg: TrainConfig) -> list[LoadedStream]:
    streams = []
    for i, src in enumerate(cfg.streams, start=1):
        if src.path is not None:
            ds = read_dataset(src.path)
            streams.append(LoadedStream(ds.samples, ds.n_classes, ds.dataset_id, ds.height, ds.width))
        else:
            spec = src.synth
            samples = synth_dataset(spec, Rng(cfg.seed).derive(0x57A, i))
            streams.append(
                LoadedStream(samples, spec.n_classes, spec.dataset_id, spec.height, spec.width)
            )
    return streams


def model_config(cfg: TrainConfig, streams: list[LoadedStream]) -> ModelConfig:
    h, w = streams[0].height, streams[0].width
    chans = streams[0].samples[0].image.shape[0]
    for s in streams:
        if (s.height, s.width) != (h, w):
            raise ConfigError("streams disagree on image grid size")
        if s.samples[0].image.shape[0] != chans:
            raise ConfigError("streams disagree on image channel count")
    return ModelConfig(
        backbone=cfg.backbone_config(),
        patch_size=cfg.patch_size,
        in_channels=chans,
        image_hw=(h, w),
        stream_classes=tuple(s.n_classes for s in streams),
    )


# ---------------------------------------------------------------------------
# training loop


class _Sampler:
    """Round-robin over one stream, reshuffled per epoch by a seeded stream."""

    def __init__(self, samples: list[MultiTaskSample], batch: int, rng: Rng):
        self._samples = samples
        self._batch = batch
        self._rng = rng
        self._epoch = 0
        self._queue: list[int] = []

    def next_batch(self) -> list[MultiTaskSample]:
        out = []
        for _ in range(self._batch):
            if not self._queue:
                order = list(range(len(self._samples)))
                self._rng.derive(self._epoch).shuffle(order)
                self._queue = order
                self._epoch += 1
            out.append(self._samples[self._queue.pop(0)])
        return out


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    lr: float
    report: MtpLossReport


@dataclass
class TrainResult:
    trace: list[IterationRecord]
    params: dict[str, Tensor]
    model: ModelConfig


def train_mtp(streams: list[LoadedStream], cfg: TrainConfig) -> TrainResult:
    """Joint training over three streams; bit-deterministic given the seed."""
    if len(streams) != N_STREAMS:
        raise ConfigError(f"need exactly {N_STREAMS} streams, got {len(streams)}")
    for i, s in enumerate(streams, start=1):
        if not s.samples:
            raise ConfigError(f"stream {i} is empty")
    mc = model_config(cfg, streams)
    rng = Rng(cfg.seed)
    params = init_model(mc, rng.derive(1))
    samplers = [
        _Sampler(s.samples, cfg.batch_size, rng.derive(2, i)) for i, s in enumerate(streams, 1)
    ]
    opt = OptimState(
        base_lr=cfg.base_lr,
        weight_decay=cfg.weight_decay,
        layer_decay_rate=cfg.layer_decay,
        warmup_iters=cfg.warmup_iters,
        warmup_init_lr=cfg.warmup_init_lr,
        total_iters=cfg.iters,
        depth=mc.backbone.depth,
    )
    trace: list[IterationRecord] = []
    for it in range(cfg.iters):
        wv = leaves_of(params)
        stream_vars: list[tuple[Var, Var, Var, Var]] = []
        for si in range(1, N_STREAMS + 1):
            batch = samplers[si - 1].next_batch()
            acc: list[Var | None] = [None, None, None, None]
            for sample in batch:
                terms = sample_loss_terms(Var(sample.image), sample, mc, wv, si)
                for k in range(4):
                    acc[k] = terms[k] if acc[k] is None else v_add(acc[k], terms[k])
            stream_vars.append(tuple(v_scale(a, 1.0 / len(batch)) for a in acc))
        total: Var | None = None
        for terms in stream_vars:
            for term in terms:
                total = term if total is None else v_add(total, term)
        total_value = total.item()
        if not math.isfinite(total_value):
            raise TrainingError(f"loss diverged (non-finite total) at iteration {it}")
        lr_now = lr_at(it, opt)
        grads = backward(total)
        named = grads_by_name(grads, wv, params)
        optimizer_step(params, named, opt)
        report = aggregate_mtp(
            [StreamLossTerms(*(t.item() for t in terms)) for terms in stream_vars]
        )
        trace.append(IterationRecord(it, lr_now, report))
    return TrainResult(trace, params, mc)


TRACE_COLUMNS = (
    ["iter", "lr"]
    + [f"l_rod_{i}" for i in (1, 2, 3)]
    + [f"l_ins_b_{i}" for i in (1, 2, 3)]
    + [f"l_ins_m_{i}" for i in (1, 2, 3)]
    + [f"l_sem_{i}" for i in (1, 2, 3)]
    + ["total"]
)


def trace_to_csv(trace: list[IterationRecord]) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for rec in trace:
        r = rec.report
        vals = [str(rec.iteration), repr(rec.lr)]
        vals += [repr(v) for v in r.l_rod]
        vals += [repr(v) for v in r.l_ins_b]
        vals += [repr(v) for v in r.l_ins_m]
        vals += [repr(v) for v in r.l_sem]
        vals.append(repr(r.total))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class LoadReport:
    restored: list[str]
    reinitialized: list[str]
    unused_file_keys: list[str]


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    write_container(path, params)


def load_checkpoint(path, template: dict[str, Tensor], mode: str) -> tuple[dict[str, Tensor], LoadReport]:
    """Overlay checkpoint weights onto freshly initialized ``template`` params.

    'load-backbone-only' restores only backbone keys (heads keep their fresh
    initialization); 'load-with-decoders' also restores matching head keys.
    A backbone key absent from the file is an error; every other mismatch is
    reported, never silently dropped.
    """
    if mode not in ("load-backbone-only", "load-with-decoders"):
        raise ConfigError(f"unknown checkpoint mode {mode!r}")
    file_entries = read_container(path)
    out: dict[str, Tensor] = {}
    restored, reinitialized = [], []
    for name, tmpl in template.items():
        if is_backbone_key(name):
            if name not in file_entries:
                raise CheckpointError(f"checkpoint missing backbone key {name!r}")
            loaded = file_entries[name]
            if loaded.shape != tmpl.shape:
                raise CheckpointError(
                    f"checkpoint key {name!r} has shape {loaded.shape}, expected {tmpl.shape}"
                )
            out[name] = loaded
            restored.append(name)
        elif mode == "load-with-decoders" and name in file_entries:
            loaded = file_entries[name]
            if loaded.shape != tmpl.shape:
                raise CheckpointError(
                    f"checkpoint key {name!r} has shape {loaded.shape}, expected {tmpl.shape}"
                )
            out[name] = loaded
            restored.append(name)
        else:
            out[name] = tmpl
            reinitialized.append(name)
    unused = [k for k in file_entries if k not in restored]
    return out, LoadReport(restored, reinitialized, unused)


def checkpoint_io(path, mode: str, params: dict[str, Tensor] | None = None,
                  template: dict[str, Tensor] | None = None):
    """Single entry point: mode is 'save', 'load-backbone-only' or
    'load-with-decoders'."""
    if mode == "save":
        if params is None:
            raise ConfigError("save mode needs params")
        save_checkpoint(path, params)
        return None
    if template is None:
        raise ConfigError("load modes need freshly initialized template params")
    return load_checkpoint(path, template, mode)


# ---------------------------------------------------------------------------
# gradient-check registrations for the loss families


def _rotated_case(rng: Rng):
    hp = wp = 2
    stride = 4
    boxes = [
        RotatedBox(2.5, 3.0, 4.0, 3.0, 0.3, 1),
        RotatedBox(6.0, 5.5, 3.0, 5.0, -0.7, 0),
    ]

    def fn(obj, cls, reg):
        return rotated_loss_var(obj, cls, reg, boxes, hp, wp, stride)

    op = composite("loss_rotated", fn)
    n, K = hp * wp, 3
    return op, (
        Tensor._wrap(rng.normals((n,))),
        Tensor._wrap(rng.normals((n, K))),
        Tensor._wrap(rng.normals((n, 5))),
    )


def _instance_box_case(rng: Rng):
    hp = wp = 2
    stride = 4
    mask = np.zeros((8, 8), dtype=bool)
    mask[1:4, 2:6] = True
    mask2 = np.zeros((8, 8), dtype=bool)
    mask2[5:8, 4:7] = True
    insts = [
        InstanceAnnotation((2, 1, 5, 3), mask, 0),
        InstanceAnnotation((4, 5, 6, 7), mask2, 2),
    ]

    def fn(obj, cls, reg):
        obj_t, idxs, classes, regs = hbox_cell_targets(insts, hp, wp, stride)
        from .tensorcore.ops import bce_mean_op, ce_rows_mean_op, gather_rows_op, smooth_l1_mean_op

        loss = apply_op(bce_mean_op(obj_t), obj)
        gather = gather_rows_op(idxs)
        loss = v_add(loss, apply_op(ce_rows_mean_op(classes), apply_op(gather, cls)))
        loss = v_add(loss, apply_op(smooth_l1_mean_op(regs), apply_op(gather, reg)))
        return loss

    op = composite("loss_instance_box", fn)
    n, K = hp * wp, 3
    return op, (
        Tensor._wrap(rng.normals((n,))),
        Tensor._wrap(rng.normals((n, K))),
        Tensor._wrap(rng.normals((n, 4))),
    )


def _instance_mask_case(rng: Rng):
    mask = np.zeros((6, 6), dtype=bool)
    mask[2:5, 1:4] = True
    insts = [InstanceAnnotation((1, 2, 3, 4), mask, 0)]
    targets = union_mask(insts, (6, 6))
    return bce_mean_op(targets), (Tensor._wrap(rng.normals((6, 6))),)


register_case("loss_rotated", _rotated_case)
register_case("loss_instance_box", _instance_box_case)
register_case("loss_instance_mask", _instance_mask_case)
