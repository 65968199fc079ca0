"""Full-network assembly for the CIFAR-scale model family.

Architecture (input 3x32x32): 3x3 stride-1 stem conv (24 ch, BN+ReLU),
three stages of [1 stride-2 downsample block + n stride-1 shuffle blocks]
with n = (3, 7, 3), a 1x1 head conv to 1024 (BN+ReLU), 4x4 global average
pool and a fully-connected classifier. Stage widths per family/width
multiplier; the augmented family additionally carries one global split
ratio shared by all stride-1 blocks.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import Node, Tape
from .channel_ops import split_point
from .errors import ConfigurationError, DimensionError, FormatError
from .ops import ConvParams, NormParams

FAMILY_AUG = "augshufflenet"
FAMILY_V2 = "shufflenetv2"
FAMILIES = (FAMILY_AUG, FAMILY_V2)

STAGE_CHANNELS = {
    FAMILY_AUG: {0.5: (48, 96, 192), 1.0: (120, 240, 480), 1.5: (176, 352, 704)},
    FAMILY_V2: {0.5: (48, 96, 192), 1.0: (116, 232, 464), 1.5: (176, 352, 704)},
}

DEFAULT_RATIO = 0.375
INPUT_SIZE = 32
INPUT_CHANNELS = 3


@dataclass(frozen=True)
class ArchConfig:
    family: str
    width: float
    stage_channels: tuple[int, int, int]
    stage_repeats: tuple[int, int, int] = (3, 7, 3)
    stem_channels: int = 24
    head_channels: int = 1024
    num_classes: int = 10
    split_ratio: float | None = None

    @staticmethod
    def create(family: str, width: float, num_classes: int = 10,
               split_ratio: float | None = None,
               stage_channels: tuple[int, int, int] | None = None) -> "ArchConfig":
        family = normalize_family(family)
        if stage_channels is None:
            try:
                stage_channels = STAGE_CHANNELS[family][width]
            except KeyError:
                raise ConfigurationError(
                    f"unknown width {width}; supported: 0.5, 1.0, 1.5"
                ) from None
        if family == FAMILY_AUG and split_ratio is None:
            split_ratio = DEFAULT_RATIO
        if family == FAMILY_V2:
            split_ratio = None
        cfg = ArchConfig(
            family=family,
            width=width,
            stage_channels=tuple(stage_channels),
            num_classes=num_classes,
            split_ratio=split_ratio,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        for c in self.stage_channels:
            if c % 2:
                raise ConfigurationError(f"stage channel count {c} must be even")
            if self.family == FAMILY_AUG:
                split_point(c, self.split_ratio)  # raises on non-integral r*c


def normalize_family(name: str) -> str:
    aliases = {
        "aug": FAMILY_AUG, "augshufflenet": FAMILY_AUG,
        "v2": FAMILY_V2, "shufflenetv2": FAMILY_V2,
    }
    try:
        return aliases[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown family {name!r}") from None


@dataclass
class ConvNorm:
    conv: ConvParams
    norm: NormParams


@dataclass
class Stage:
    down: blocks.DownsampleParams
    normal: list[blocks.BlockParams] = field(default_factory=list)


@dataclass
class Model:
    cfg: ArchConfig
    stem: ConvNorm
    stages: list[Stage]
    head: ConvNorm
    fc_w: np.ndarray
    fc_b: np.ndarray


def build(cfg: ArchConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialized model; identical seeds give identical weights."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    stem = ConvNorm(
        conv=ConvParams(
            blocks.conv_weight(rng, cfg.stem_channels, INPUT_CHANNELS, 3, dtype),
            stride=1,
            padding=1,
        ),
        norm=NormParams.identity(cfg.stem_channels, dtype),
    )
    stages = []
    c_in = cfg.stem_channels
    for c_out, repeats in zip(cfg.stage_channels, cfg.stage_repeats):
        down = blocks.downsample_params(c_in, c_out, rng, dtype)
        if cfg.family == FAMILY_AUG:
            normal = [blocks.aug_block_params(c_out, cfg.split_ratio, rng, dtype)
                      for _ in range(repeats)]
        else:
            normal = [blocks.v2_block_params(c_out, rng, dtype) for _ in range(repeats)]
        stages.append(Stage(down=down, normal=normal))
        c_in = c_out
    head = ConvNorm(
        conv=blocks.pointwise(rng, c_in, cfg.head_channels, dtype),
        norm=NormParams.identity(cfg.head_channels, dtype),
    )
    fc_w = (rng.standard_normal((cfg.head_channels, cfg.num_classes))
            * np.sqrt(1.0 / cfg.head_channels)).astype(dtype)
    fc_b = np.zeros(cfg.num_classes, dtype=dtype)
    return Model(cfg=cfg, stem=stem, stages=stages, head=head, fc_w=fc_w, fc_b=fc_b)


def forward_nodes(model: Model, t: Tape | None, x: Node, training: bool,
                  trace: list | None = None) -> Node:
    """Run the network over activation nodes; optionally record a shape trace."""

    def note(name, node):
        if trace is not None:
            trace.append((name, tuple(node.value.shape)))

    h = ad.conv2d(t, x, model.stem.conv)
    h = ad.batch_norm(t, h, model.stem.norm, training)
    h = ad.relu(t, h)
    note("stem", h)
    for idx, stage in enumerate(model.stages, start=2):
        h = blocks.downsample_block_nodes(t, h, stage.down, training)
        note(f"stage{idx}.down", h)
        for bidx, bp in enumerate(stage.normal, start=1):
            if model.cfg.family == FAMILY_AUG:
                h = blocks.aug_block_nodes(t, h, bp, model.cfg.split_ratio, training)
            else:
                h = blocks.v2_block_nodes(t, h, bp, training)
            note(f"stage{idx}.block{bidx}", h)
    h = ad.conv2d(t, h, model.head.conv)
    h = ad.batch_norm(t, h, model.head.norm, training)
    h = ad.relu(t, h)
    note("head", h)
    h = ad.global_avg_pool(t, h)
    note("pool", h)
    h = ad.flatten(t, h)
    logits = ad.linear(t, h, model.fc_w, model.fc_b)
    note("fc", logits)
    return logits


def forward(model: Model, x: np.ndarray, training: bool = False) -> np.ndarray:
    if x.ndim != 4 or x.shape[1:] != (INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE):
        raise DimensionError(
            f"expected input of shape (N, {INPUT_CHANNELS}, {INPUT_SIZE}, {INPUT_SIZE}), "
            f"got {x.shape}"
        )
    return forward_nodes(model, None, Node(x, constant=True), training).value


def shape_trace(model: Model, batch: int = 1) -> list[tuple[str, tuple]]:
    x = np.zeros((batch, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE), dtype=np.float32)
    trace: list[tuple[str, tuple]] = []
    forward_nodes(model, None, Node(x, constant=True), False, trace=trace)
    return trace


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Class indices via argmax over logits; ties resolve to the lower index."""
    return np.argmax(forward(model, x), axis=1)


# ---------------------------------------------------------------------------
# parameter traversal
# ---------------------------------------------------------------------------

def _norm_entries(path: str, n: NormParams):
    yield f"{path}.gamma", n.gamma, "param"
    yield f"{path}.beta", n.beta, "param"
    yield f"{path}.running_mean", n.running_mean, "buffer"
    yield f"{path}.running_var", n.running_var, "buffer"


def _block_entries(path: str, p: blocks.BlockParams):
    yield f"{path}.conv1.weights", p.conv1.weights, "param"
    yield from _norm_entries(f"{path}.norm1", p.norm1)
    yield f"{path}.dwconv.weights", p.dwconv.weights, "param"
    yield from _norm_entries(f"{path}.norm2", p.norm2)
    yield f"{path}.conv2.weights", p.conv2.weights, "param"
    yield from _norm_entries(f"{path}.norm3", p.norm3)


def _down_entries(path: str, p: blocks.DownsampleParams):
    yield f"{path}.left_dw.weights", p.left_dw.weights, "param"
    yield from _norm_entries(f"{path}.left_norm1", p.left_norm1)
    yield f"{path}.left_conv.weights", p.left_conv.weights, "param"
    yield from _norm_entries(f"{path}.left_norm2", p.left_norm2)
    yield f"{path}.right_conv1.weights", p.right_conv1.weights, "param"
    yield from _norm_entries(f"{path}.right_norm1", p.right_norm1)
    yield f"{path}.right_dw.weights", p.right_dw.weights, "param"
    yield from _norm_entries(f"{path}.right_norm2", p.right_norm2)
    yield f"{path}.right_conv2.weights", p.right_conv2.weights, "param"
    yield from _norm_entries(f"{path}.right_norm3", p.right_norm3)


def named_tensors(model: Model):
    """All tensors in a stable order as (path, array, kind) with kind param|buffer."""
    yield "stem.conv.weights", model.stem.conv.weights, "param"
    yield from _norm_entries("stem.norm", model.stem.norm)
    for idx, stage in enumerate(model.stages, start=2):
        yield from _down_entries(f"stage{idx}.down", stage.down)
        for bidx, bp in enumerate(stage.normal, start=1):
            yield from _block_entries(f"stage{idx}.block{bidx}", bp)
    yield "head.conv.weights", model.head.conv.weights, "param"
    yield from _norm_entries("head.norm", model.head.norm)
    yield "fc.weights", model.fc_w, "param"
    yield "fc.bias", model.fc_b, "param"


def named_parameters(model: Model):
    for path, arr, kind in named_tensors(model):
        if kind == "param":
            yield path, arr


# ---------------------------------------------------------------------------
# serialization: flat versioned binary of named float32 arrays
# ---------------------------------------------------------------------------

MAGIC = b"ASNF0001"


def _config_record(cfg: ArchConfig) -> dict:
    return {
        "family": cfg.family,
        "width": cfg.width,
        "stage_channels": list(cfg.stage_channels),
        "stage_repeats": list(cfg.stage_repeats),
        "stem_channels": cfg.stem_channels,
        "head_channels": cfg.head_channels,
        "num_classes": cfg.num_classes,
        "split_ratio": cfg.split_ratio,
    }


def _config_from_record(rec: dict) -> ArchConfig:
    return ArchConfig(
        family=rec["family"],
        width=rec["width"],
        stage_channels=tuple(rec["stage_channels"]),
        stage_repeats=tuple(rec["stage_repeats"]),
        stem_channels=rec["stem_channels"],
        head_channels=rec["head_channels"],
        num_classes=rec["num_classes"],
        split_ratio=rec["split_ratio"],
    )


def save_model(model: Model, path: str) -> None:
    tensors = list(named_tensors(model))
    header = {
        "config": _config_record(model.cfg),
        "tensors": [
            {"name": name, "shape": list(arr.shape), "kind": kind}
            for name, arr, kind in tensors
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(header_bytes)).newbyteorder("<").tobytes())
        f.write(header_bytes)
        for _, arr, _ in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: str) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(len(MAGIC)) != MAGIC:
        raise FormatError("not a model file (bad magic)")
    header_len = int(np.frombuffer(buf.read(4), dtype="<u4")[0])
    try:
        header = json.loads(buf.read(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt model header: {exc}") from None
    cfg = _config_from_record(header["config"])
    model = build(cfg, seed=0)
    declared = header["tensors"]
    tensors = list(named_tensors(model))
    if [d["name"] for d in declared] != [name for name, _, _ in tensors]:
        raise FormatError("tensor list does not match the declared configuration")
    for decl, (name, arr, _) in zip(declared, tensors):
        if tuple(decl["shape"]) != arr.shape:
            raise FormatError(f"tensor {name} has shape {decl['shape']}, expected {arr.shape}")
        nbytes = arr.size * 4
        data = buf.read(nbytes)
        if len(data) != nbytes:
            raise FormatError(f"model file truncated while reading {name}")
        arr[...] = np.frombuffer(data, dtype="<f4").reshape(arr.shape)
    if buf.read(1):
        raise FormatError("trailing bytes after the last declared tensor")
    return model
