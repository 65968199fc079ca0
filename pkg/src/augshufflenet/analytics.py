"""Closed-form block cost model and an exact per-layer MAdds/parameter walker.

Counting convention (frozen after calibrating against the published totals
for the baseline family, which it reproduces to the table's 0.01M rounding):

* convolution: out_channels * (in_channels / groups) * K^2 * H_out * W_out
  multiply-adds per sample; parameters = weight count (convs carry no bias);
* fully connected: in * out multiply-adds; parameters = weights + bias;
* batch norm: 0 multiply-adds, 2 parameters per channel (scale + shift;
  running statistics are buffers, not parameters);
* activations, pooling and every channel permutation: 0 multiply-adds,
  0 parameters.

MAdds are reported per single sample, independent of batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .channel_ops import split_point, validate_ratio
from .errors import ConfigurationError
from .network import (
    FAMILY_AUG,
    FAMILY_V2,
    INPUT_SIZE,
    ArchConfig,
    Model,
    build,
)
from .ops import ConvParams, NormParams, conv_output_size


@dataclass(frozen=True)
class CostModel:
    """Symbols of the stride-1 shuffle block cost formulas."""

    m: int          # input channels
    d_f: int        # spatial size of the feature map
    d_k: int = 3    # depthwise kernel size
    r: float = 0.5  # split ratio (0.5 reproduces the baseline block)

    def __post_init__(self):
        if self.m < 2 or self.m % 2:
            raise ConfigurationError(f"m must be a positive even channel count, got {self.m}")
        if self.d_f < 1 or self.d_k < 1:
            raise ConfigurationError("d_f and d_k must be positive")
        validate_ratio(self.r)

    @property
    def branch_channels(self) -> int:
        return split_point(self.m, self.r)


def block_cost(cm: CostModel) -> int:
    """Multiply-adds of one stride-1 block: r^2 M^2 Df^2 + r M Df^2 Dk^2 + M^2 Df^2 / 4."""
    x = cm.branch_channels
    return cm.d_f ** 2 * (x * x + x * cm.d_k ** 2 + (cm.m // 2) ** 2)


def block_params(cm: CostModel) -> int:
    """Convolution weights of one stride-1 block: r^2 M^2 + r M Dk^2 + M^2 / 4."""
    x = cm.branch_channels
    return x * x + x * cm.d_k ** 2 + (cm.m // 2) ** 2


def cost_ratio(cm: CostModel) -> tuple[float, float]:
    """(exact, approximate) block cost relative to the r=0.5 baseline block.

    exact  = ((4 r^2 + 1) M + 4 r Dk^2) / (2 M + 2 Dk^2)
    approx = (4 r^2 + 1) / 2   (depthwise term dropped)
    """
    r, m, dk2 = cm.r, cm.m, cm.d_k ** 2
    exact = ((4 * r * r + 1) * m + 4 * r * dk2) / (2 * m + 2 * dk2)
    return exact, (4 * r * r + 1) / 2


def params_ratio(cm: CostModel) -> tuple[float, float]:
    """Parameter ratio relative to the baseline block; identical to cost_ratio."""
    return cost_ratio(cm)


# ---------------------------------------------------------------------------
# exact layer walker
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerCount:
    path: str
    kind: str  # conv | norm | fc | relu | pool | split | crossover | concat | shuffle
    madds: int
    params: int
    spatial: int | None = None


@dataclass
class CountReport:
    family: str
    width: float
    num_classes: int
    split_ratio: float | None
    layers: list[LayerCount]

    @property
    def total_madds(self) -> int:
        return sum(l.madds for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    def subtotal(self, prefix: str, kinds: tuple[str, ...] | None = None) -> tuple[int, int]:
        """(madds, params) summed over layers under ``prefix.``."""
        madds = params = 0
        for l in self.layers:
            if l.path.startswith(prefix + ".") and (kinds is None or l.kind in kinds):
                madds += l.madds
                params += l.params
        return madds, params

    def block_paths(self) -> list[str]:
        seen = []
        for l in self.layers:
            parts = l.path.split(".")
            if len(parts) >= 2 and parts[1].startswith("block"):
                prefix = ".".join(parts[:2])
                if prefix not in seen:
                    seen.append(prefix)
        return seen

    def to_dict(self) -> dict:
        return {
            "model": {
                "family": self.family,
                "width": self.width,
                "num_classes": self.num_classes,
                "split_ratio": self.split_ratio,
            },
            "layers": [
                {"name": l.path, "kind": l.kind, "madds": l.madds, "params": l.params,
                 "spatial": l.spatial}
                for l in self.layers
            ],
            "totals": {"madds": self.total_madds, "params": self.total_params},
        }


def _conv_entry(path: str, p: ConvParams, spatial_in: int) -> tuple[LayerCount, int]:
    spatial_out = conv_output_size(spatial_in, p.kernel_size, p.stride, p.padding)
    madds = (p.out_channels * (p.in_channels // p.groups)
             * p.kernel_size ** 2 * spatial_out ** 2)
    return LayerCount(path, "conv", madds, p.weights.size, spatial_out), spatial_out


def _norm_entry(path: str, n: NormParams, spatial: int) -> LayerCount:
    return LayerCount(path, "norm", 0, 2 * n.channels, spatial)


def _zero(path: str, kind: str, spatial: int | None = None) -> LayerCount:
    return LayerCount(path, kind, 0, 0, spatial)


def _walk_normal_block(path: str, p, is_aug: bool, spatial: int) -> list[LayerCount]:
    out = [_zero(f"{path}.split", "split", spatial)]
    c1, _ = _conv_entry(f"{path}.conv1", p.conv1, spatial)
    out.append(c1)
    out.append(_norm_entry(f"{path}.norm1", p.norm1, spatial))
    if not is_aug:
        out.append(_zero(f"{path}.relu1", "relu", spatial))
    dw, _ = _conv_entry(f"{path}.dwconv", p.dwconv, spatial)
    out.append(dw)
    out.append(_norm_entry(f"{path}.norm2", p.norm2, spatial))
    if is_aug:
        out.append(_zero(f"{path}.crossover", "crossover", spatial))
    c2, _ = _conv_entry(f"{path}.conv2", p.conv2, spatial)
    out.append(c2)
    out.append(_norm_entry(f"{path}.norm3", p.norm3, spatial))
    out.append(_zero(f"{path}.relu2", "relu", spatial))
    out.append(_zero(f"{path}.concat", "concat", spatial))
    out.append(_zero(f"{path}.shuffle", "shuffle", spatial))
    return out


def _walk_down_block(path: str, p, spatial: int) -> tuple[list[LayerCount], int]:
    out = []
    ldw, s_half = _conv_entry(f"{path}.left_dw", p.left_dw, spatial)
    out.append(ldw)
    out.append(_norm_entry(f"{path}.left_norm1", p.left_norm1, s_half))
    lconv, _ = _conv_entry(f"{path}.left_conv", p.left_conv, s_half)
    out.append(lconv)
    out.append(_norm_entry(f"{path}.left_norm2", p.left_norm2, s_half))
    out.append(_zero(f"{path}.left_relu", "relu", s_half))
    rconv1, _ = _conv_entry(f"{path}.right_conv1", p.right_conv1, spatial)
    out.append(rconv1)
    out.append(_norm_entry(f"{path}.right_norm1", p.right_norm1, spatial))
    out.append(_zero(f"{path}.right_relu1", "relu", spatial))
    rdw, _ = _conv_entry(f"{path}.right_dw", p.right_dw, spatial)
    out.append(rdw)
    out.append(_norm_entry(f"{path}.right_norm2", p.right_norm2, s_half))
    rconv2, _ = _conv_entry(f"{path}.right_conv2", p.right_conv2, s_half)
    out.append(rconv2)
    out.append(_norm_entry(f"{path}.right_norm3", p.right_norm3, s_half))
    out.append(_zero(f"{path}.right_relu2", "relu", s_half))
    out.append(_zero(f"{path}.concat", "concat", s_half))
    out.append(_zero(f"{path}.shuffle", "shuffle", s_half))
    return out, s_half


def count_network(model: Model) -> CountReport:
    """Walk every layer of a built model and tally MAdds and parameters."""
    cfg = model.cfg
    layers: list[LayerCount] = []
    stem, spatial = _conv_entry("stem.conv", model.stem.conv, INPUT_SIZE)
    layers.append(stem)
    layers.append(_norm_entry("stem.norm", model.stem.norm, spatial))
    layers.append(_zero("stem.relu", "relu", spatial))
    is_aug = cfg.family == FAMILY_AUG
    for idx, stage in enumerate(model.stages, start=2):
        down_layers, spatial = _walk_down_block(f"stage{idx}.down", stage.down, spatial)
        layers.extend(down_layers)
        for bidx, bp in enumerate(stage.normal, start=1):
            layers.extend(_walk_normal_block(f"stage{idx}.block{bidx}", bp, is_aug, spatial))
    head, spatial = _conv_entry("head.conv", model.head.conv, spatial)
    layers.append(head)
    layers.append(_norm_entry("head.norm", model.head.norm, spatial))
    layers.append(_zero("head.relu", "relu", spatial))
    layers.append(_zero("pool", "pool", 1))
    fc_in, fc_out = model.fc_w.shape
    layers.append(LayerCount("fc", "fc", fc_in * fc_out, fc_in * fc_out + fc_out, 1))
    return CountReport(
        family=cfg.family,
        width=cfg.width,
        num_classes=cfg.num_classes,
        split_ratio=cfg.split_ratio,
        layers=layers,
    )


def count_config(cfg: ArchConfig, seed: int = 0) -> CountReport:
    return count_network(build(cfg, seed=seed))


# ---------------------------------------------------------------------------
# split-ratio sweep
# ---------------------------------------------------------------------------

SWEEP_CSV_HEADER = "family,width,num_classes,r,madds,params"


def sweep_ratio(cfg: ArchConfig, ratios: list[float], seed: int = 0) -> list[dict]:
    """One (madds, params) summary row per ratio; ratios must divide the stage widths."""
    if cfg.family != FAMILY_AUG:
        raise ConfigurationError("ratio sweeps apply to the augmented family only")
    rows = []
    for r in ratios:
        for c in cfg.stage_channels:
            split_point(c, r)  # raises ConfigurationError per entry
        swept = ArchConfig.create(
            cfg.family, cfg.width, cfg.num_classes, split_ratio=r,
            stage_channels=cfg.stage_channels,
        )
        report = count_config(swept, seed=seed)
        rows.append({
            "family": swept.family,
            "width": swept.width,
            "num_classes": swept.num_classes,
            "r": r,
            "madds": report.total_madds,
            "params": report.total_params,
        })
    return rows


def sweep_csv(rows: list[dict]) -> str:
    lines = [SWEEP_CSV_HEADER]
    for row in rows:
        lines.append(
            f"{row['family']},{row['width']},{row['num_classes']},"
            f"{row['r']},{row['madds']},{row['params']}"
        )
    return "\n".join(lines) + "\n"


def format_millions(value: int) -> str:
    """Render a raw count the way the comparison tables do (0.01M rounding)."""
    return f"{value / 1e6:.2f}M"


def approx_equal(a: float, b: float, rel: float = 1e-12) -> bool:
    return math.isclose(a, b, rel_tol=rel, abs_tol=0.0)
