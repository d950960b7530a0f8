"""Two-stream convolutional backbone with fusion insertions and a grid head.

The backbone is a stem plus three stride-2 stages per branch (cumulative
strides 4, 8, 16). In ``cft`` mode a fusion module runs after every stage
pair and its deltas are added to both branches; ``two_stream`` is the same
network without the fusion modules; the mono modes keep a single branch.
Each scale's pyramid feature is a 1x1 projection of the branch features
(channel-concatenated when two branches exist) and feeds a small head that
predicts (tx, ty, tw, th, obj, class logits) per cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fusion, tensor as T
from .tensor import ContractError, DimensionError, Rng, Tensor

MODES = ("cft", "two_stream", "rgb_only", "thermal_only")

# exp() argument cap in box decode; keeps sizes finite for any head map
_SIZE_LOG_CAP = 8.0


@dataclass
class StageSpec:
    in_channels: int
    out_channels: int
    stride: int = 2
    kernel: int = 3


@dataclass
class PyramidFeatures:
    """Per-scale fused maps at strides 4, 8 and 16."""

    p1: Tensor
    p2: Tensor
    p3: Tensor

    def as_list(self):
        return [self.p1, self.p2, self.p3]


@dataclass
class Detection:
    box: tuple
    class_id: int
    confidence: float


@dataclass
class GroundTruth:
    box: tuple
    class_id: int


@dataclass
class FusionDiagnostics:
    """Inputs and deltas of one fusion insertion, for reporting."""

    module: int
    f_r: np.ndarray
    f_t: np.ndarray
    delta_r: np.ndarray
    delta_t: np.ndarray


@dataclass
class ForwardResult:
    pyramid: PyramidFeatures
    head_maps: list
    attention: Optional[list] = None       # list[(module_index, CorrelationMatrix)]
    diagnostics: Optional[list] = None     # list[FusionDiagnostics]


@dataclass
class DetectorConfig:
    mode: str = "cft"
    num_classes: int = 3
    image_size: int = 64
    stem_channels: int = 8
    stage_channels: tuple = (16, 32, 64)
    pyramid_channels: int = 32
    cft_heads: int = 4
    cft_blocks: int = 2
    cft_pooled_size: int = 8
    cft_mlp_ratio: int = 2
    cft_paper_literal_heads: bool = False
    cft_use_layernorm: bool = False

    def validate(self) -> "DetectorConfig":
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.image_size % 16:
            raise DimensionError(f"image size {self.image_size} not divisible by 16")
        if len(self.stage_channels) != 3:
            raise ContractError("exactly three backbone stages are supported")
        return self

    def stage_specs(self) -> list:
        chans = [self.stem_channels, *self.stage_channels]
        return [StageSpec(chans[i], chans[i + 1]) for i in range(3)]

    def strides(self) -> list:
        return [4, 8, 16]

    def grid_sizes(self) -> list:
        return [self.image_size // s for s in self.strides()]


class Detector:
    """The detection network; owns a parameter registry keyed by layer names."""

    def __init__(self, config: DetectorConfig, seed: int = 0):
        self.config = config.validate()
        self.registry = T.ParameterRegistry()
        rng = Rng(seed)
        cfg = self.config
        self.two_branch = cfg.mode in ("cft", "two_stream")
        self.use_rgb = cfg.mode != "thermal_only"
        self.use_thermal = cfg.mode != "rgb_only"

        if self.use_rgb:
            self._add_conv("rgb.stem", 3, cfg.stem_channels, 3, rng)
            for i, spec in enumerate(cfg.stage_specs()):
                self._add_conv(f"rgb.s{i + 1}", spec.in_channels, spec.out_channels,
                               spec.kernel, rng)
        if self.use_thermal:
            self._add_conv("thermal.stem", 1, cfg.stem_channels, 3, rng)
            for i, spec in enumerate(cfg.stage_specs()):
                self._add_conv(f"thermal.s{i + 1}", spec.in_channels, spec.out_channels,
                               spec.kernel, rng)

        self.cft_configs: list = []
        self.cft_params: list = []
        if cfg.mode == "cft":
            size = cfg.image_size // 2
            for i, c in enumerate(cfg.stage_channels):
                size //= 2
                fcfg = fusion.CftConfig(
                    channels=c, heads=cfg.cft_heads, blocks=cfg.cft_blocks,
                    pooled_size=cfg.cft_pooled_size, mlp_ratio=cfg.cft_mlp_ratio,
                    paper_literal_heads=cfg.cft_paper_literal_heads,
                    use_layernorm=cfg.cft_use_layernorm)
                eff = min(cfg.cft_pooled_size, size)
                self.cft_configs.append(fcfg)
                self.cft_params.append(fusion.init_cft_params(
                    fcfg, rng, registry=self.registry, prefix=f"cft{i + 1}", pooled_size=eff))

        merge_in = [2 * c if self.two_branch else c for c in cfg.stage_channels]
        for i, cin in enumerate(merge_in):
            self._add_conv(f"merge{i + 1}", cin, cfg.pyramid_channels, 1, rng)
        out_ch = 5 + cfg.num_classes
        for i in range(3):
            self._add_conv(f"head{i + 1}.hidden", cfg.pyramid_channels, cfg.pyramid_channels, 3, rng)
            self._add_conv(f"head{i + 1}.out", cfg.pyramid_channels, out_ch, 1, rng)

    # -- parameters -----------------------------------------------------------

    def _add_conv(self, name: str, cin: int, cout: int, k: int, rng: Rng) -> None:
        w = T.uniform_init(rng, (cout, cin, k, k), cin * k * k, cout * k * k)
        self.registry.add(f"{name}.w", Tensor(w))
        self.registry.add(f"{name}.b", Tensor(np.zeros(cout, dtype=T.DEFAULT_DTYPE)))

    def _conv(self, name: str, x: Tensor, stride: int, padding: int) -> Tensor:
        w = self.registry.get(f"{name}.w").value
        b = self.registry.get(f"{name}.b").value
        return T.conv2d(x, w, bias=b, stride=stride, padding=padding)

    def parameter_count(self) -> int:
        return self.registry.total_elements()

    # -- forward --------------------------------------------------------------

    def forward(self, rgb: Optional[Tensor], thermal: Optional[Tensor],
                zero_cft: bool = False, collect: bool = False) -> ForwardResult:
        """Run the backbone and head; ``zero_cft`` skips the fusion deltas.

        ``collect`` retains attention matrices and per-insertion diagnostics.
        """
        cfg = self.config
        fr = ft = None
        if self.use_rgb:
            if rgb is None:
                raise ContractError("mode requires an RGB input")
            rgb = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
            self._check_input(rgb, 3)
            fr = T.leaky_relu(self._conv("rgb.stem", rgb, 2, 1))
        if self.use_thermal:
            if thermal is None:
                raise ContractError("mode requires a thermal input")
            thermal = thermal if isinstance(thermal, Tensor) else Tensor(thermal)
            self._check_input(thermal, 1)
            ft = T.leaky_relu(self._conv("thermal.stem", thermal, 2, 1))

        attention = [] if collect else None
        diagnostics = [] if collect else None
        pyramid = []
        head_maps = []
        for i in range(3):
            if fr is not None:
                fr = T.leaky_relu(self._conv(f"rgb.s{i + 1}", fr, 2, 1))
            if ft is not None:
                ft = T.leaky_relu(self._conv(f"thermal.s{i + 1}", ft, 2, 1))
            if cfg.mode == "cft" and not zero_cft:
                out = fusion.fuse(fr, ft, self.cft_configs[i], self.cft_params[i],
                                  collect_attention=collect)
                if collect:
                    attention.extend((i, corr) for corr in out.attention)
                    diagnostics.append(FusionDiagnostics(
                        i, np.array(fr.data), np.array(ft.data),
                        np.array(out.delta_r.data), np.array(out.delta_t.data)))
                fr = fr + out.delta_r
                ft = ft + out.delta_t
            if fr is not None and ft is not None:
                merged = T.concat0([fr, ft])
            else:
                merged = fr if fr is not None else ft
            p = self._conv(f"merge{i + 1}", merged, 1, 0)
            pyramid.append(p)
            hid = T.leaky_relu(self._conv(f"head{i + 1}.hidden", p, 1, 1))
            head_maps.append(self._conv(f"head{i + 1}.out", hid, 1, 0))
        return ForwardResult(PyramidFeatures(*pyramid), head_maps, attention, diagnostics)

    def _check_input(self, x: Tensor, channels: int) -> None:
        if x.data.ndim != 3 or x.data.shape[0] != channels:
            raise DimensionError(f"expected {channels} x H x W input, got {x.shape}")
        _, h, w = x.data.shape
        if h % 16 or w % 16:
            raise DimensionError(f"input extents {h}x{w} not divisible by 16")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_boxes(head_map, stride: int, score_threshold: float, image_size: int,
                 num_classes: int) -> list:
    """Turn one S x S head map into detections.

    center = (cell + sigmoid(tx, ty)) * stride; size = exp(tw, th) * stride
    (log-size capped at 8); confidence = sigmoid(obj) * max_c sigmoid(cls_c).
    Boxes are clamped to the image; empty boxes and scores below the
    threshold are dropped. Cells are scanned row-major, so output order is
    deterministic.
    """
    data = head_map.data if isinstance(head_map, Tensor) else np.asarray(head_map)
    if data.ndim != 3 or data.shape[0] != 5 + num_classes:
        raise DimensionError(f"head map shape {data.shape}, expected ({5 + num_classes}, S, S)")
    _, s, s2 = data.shape
    if s != s2:
        raise DimensionError("head map grid must be square")
    gx, gy = np.meshgrid(np.arange(s), np.arange(s))
    cx = (gx + _sigmoid(data[0])) * stride
    cy = (gy + _sigmoid(data[1])) * stride
    bw = np.exp(np.minimum(data[2], _SIZE_LOG_CAP)) * stride
    bh = np.exp(np.minimum(data[3], _SIZE_LOG_CAP)) * stride
    cls_prob = _sigmoid(data[5:])
    best_cls = np.argmax(cls_prob, axis=0)
    conf = _sigmoid(data[4]) * np.max(cls_prob, axis=0)

    x1 = np.clip(cx - bw / 2, 0, image_size)
    y1 = np.clip(cy - bh / 2, 0, image_size)
    x2 = np.clip(cx + bw / 2, 0, image_size)
    y2 = np.clip(cy + bh / 2, 0, image_size)

    dets = []
    for i in range(s):
        for j in range(s):
            c = float(conf[i, j])
            if c < score_threshold:
                continue
            if x2[i, j] - x1[i, j] <= 0 or y2[i, j] - y1[i, j] <= 0:
                continue
            dets.append(Detection(
                (float(x1[i, j]), float(y1[i, j]), float(x2[i, j]), float(y2[i, j])),
                int(best_cls[i, j]), c))
    return dets


def _box_iou(a: tuple, b: tuple) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms(dets: list, iou_threshold: float) -> list:
    """Greedy suppression by descending confidence, per class.

    A detection is dropped when its IoU with an already kept detection of
    the same class reaches the threshold. Ties in confidence keep input
    order, so the result is stable under permutation whenever confidences
    are distinct.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list = []
    for i in order:
        d = dets[i]
        suppressed = any(
            k.class_id == d.class_id and _box_iou(k.box, d.box) >= iou_threshold
            for k in kept)
        if not suppressed:
            kept.append(d)
    return kept
