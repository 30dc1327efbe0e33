"""Toy detectors built on a 4-stage CNN backbone.

Variants
--------
``drnet``   backbone -> anchor offsets (ARM branch) and top-down fused ODM
            features -> anchor-offset detection with L deformable paths.
``ssd4s``   same backbone and fusion, plain conv heads on original anchors.
``trnet``   reference generator (RG) emitting anchor offsets only, plus a
            refinement detector (RD) with plain conv heads.
``tdrnet``  RG also emits per-path sampling offsets; RD heads are deformable.

RG and RD each own a full backbone unless ``tie_rg_rd`` is set.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import BoxSet, OffsetCoding, generate_anchors
from .checkpoint import read_afw1, write_afw1
from .config import dataclass_from_kv, dataclass_to_kv, dump_kv, read_kv
from .deform import offsets_from_features
from .heads import (DetectionOutput, PathWeights, RefinementState, feature_location_refine,
                    flatten_levels, level_head, refined_anchors)

VARIANTS = ("drnet", "ssd4s", "trnet", "tdrnet")
FEATURE_REFINE_MODES = ("anchor", "feature", "none")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    in_channels: int = 1
    stem_channels: int = 8
    channels: tuple = (16, 32, 64, 64)
    odm_channels: int = 32
    strides: tuple = (4, 8, 16, 32)
    anchor_scales: tuple = (8.0, 16.0, 32.0, 48.0)
    ratios: tuple = (1.0, 2.0, 0.5)
    num_classes: int = 3
    head_paths: tuple = ((3, 1), (5, 1))
    variant: str = "drnet"
    # anchor: offsets from anchor offsets (1x1 conv); feature: from ODM features; none: zero
    feature_refine: str = "anchor"
    deformable_head: bool = True
    grad_through_refined: bool = False
    clip_refined: bool = False
    tie_rg_rd: bool = False
    center_variance: float = 0.1
    size_variance: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.feature_refine not in FEATURE_REFINE_MODES:
            raise ValueError(f"feature_refine must be one of {FEATURE_REFINE_MODES}")
        if not (len(self.channels) == len(self.strides) == len(self.anchor_scales) == 4):
            raise ValueError("channels, strides and anchor_scales must each have 4 entries")
        if self.strides[0] not in (2, 4):
            raise ValueError("first stride must be 2 or 4")
        for a, b in zip(self.strides, self.strides[1:]):
            if b != 2 * a:
                raise ValueError(f"strides must double between stages, got {self.strides}")
        if self.input_size % self.strides[-1]:
            raise ValueError(f"input size {self.input_size} not divisible by stride {self.strides[-1]}")
        for k, d in self.head_paths:
            if k % 2 == 0 or d < 1:
                raise ValueError(f"invalid head path {(k, d)}")
        if not self.ratios or self.num_classes < 1:
            raise ValueError("need at least one ratio and one class")

    @property
    def feature_shapes(self) -> List[Tuple[int, int]]:
        return [(self.input_size // s, self.input_size // s) for s in self.strides]

    @property
    def anchors_per_cell(self) -> int:
        return len(self.ratios)

    @property
    def coding(self) -> OffsetCoding:
        return OffsetCoding(self.center_variance, self.size_variance)

    @property
    def is_pair(self) -> bool:
        return self.variant in ("trnet", "tdrnet")

    @property
    def refines_anchors(self) -> bool:
        return self.variant != "ssd4s"

    @property
    def uses_offsets(self) -> bool:
        if self.variant == "drnet":
            return self.deformable_head and self.feature_refine != "none"
        return self.variant == "tdrnet"

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return dump_kv(dataclass_to_kv(self))

    @classmethod
    def from_kv(cls, values: Dict[str, str]) -> "ModelConfig":
        return dataclass_from_kv(cls, values)


class Model:
    """Named parameters plus the anchor layout for one configuration."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor], step: int = 0):
        self.config = config
        self.params = params
        self.step = step
        self.anchors: BoxSet = generate_anchors(config.feature_shapes, config.strides,
                                                config.anchor_scales, config.ratios)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def save(self, path) -> None:
        path = Path(path)
        write_afw1(path, {k: v.data for k, v in self.params.items()})
        path.with_suffix(".cfg").write_text(self.config.to_text() + f"step={self.step}\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        values = read_kv(path.with_suffix(".cfg"))
        step = int(values.pop("step", 0))
        config = ModelConfig.from_kv(values)
        tensors = read_afw1(path)
        expected = parameter_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"{path}: parameter mismatch, missing={missing} extra={extra}")
        params = {}
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
            params[name] = Tensor(tensors[name], requires_grad=True)
        return cls(config, params, step)


# ------------------------------------------------------------------ parameters


def _backbone_shapes(cfg: ModelConfig, prefix: str) -> Dict[str, tuple]:
    shapes = {f"{prefix}stem.w": (cfg.stem_channels, cfg.in_channels, 3, 3),
              f"{prefix}stem.b": (cfg.stem_channels,)}
    cin = cfg.stem_channels
    for l, c in enumerate(cfg.channels):
        shapes[f"{prefix}s{l}.down.w"] = (c, cin, 3, 3)
        shapes[f"{prefix}s{l}.down.b"] = (c,)
        shapes[f"{prefix}s{l}.conv.w"] = (c, c, 3, 3)
        shapes[f"{prefix}s{l}.conv.b"] = (c,)
        cin = c
    return shapes


def _arm_shapes(cfg: ModelConfig, prefix: str) -> Dict[str, tuple]:
    a4 = 4 * cfg.anchors_per_cell
    shapes = {}
    for l, c in enumerate(cfg.channels):
        shapes[f"{prefix}arm{l}.w"] = (a4, c, 3, 3)
        shapes[f"{prefix}arm{l}.b"] = (a4,)
    return shapes


def _fpn_shapes(cfg: ModelConfig, prefix: str) -> Dict[str, tuple]:
    d = cfg.odm_channels
    shapes = {}
    for l, c in enumerate(cfg.channels):
        shapes[f"{prefix}lat{l}.w"] = (d, c, 1, 1)
        shapes[f"{prefix}lat{l}.b"] = (d,)
        shapes[f"{prefix}fuse{l}.w"] = (d, d, 3, 3)
        shapes[f"{prefix}fuse{l}.b"] = (d,)
    return shapes


def _head_shapes(cfg: ModelConfig, prefix: str) -> Dict[str, tuple]:
    a = cfg.anchors_per_cell
    d = cfg.odm_channels
    shapes = {}
    for l in range(4):
        for i, (k, _) in enumerate(cfg.head_paths):
            p = f"{prefix}head{l}.p{i}."
            shapes[p + "local.w"] = (4 * a, d, k, k)
            shapes[p + "local.b"] = (4 * a,)
            shapes[p + "conf.w"] = (a * (cfg.num_classes + 1), d, k, k)
            shapes[p + "conf.b"] = (a * (cfg.num_classes + 1),)
    return shapes


def _offset_shapes(cfg: ModelConfig, prefix: str, source: str) -> Dict[str, tuple]:
    a4 = 4 * cfg.anchors_per_cell
    shapes = {}
    for l in range(4):
        for i, (k, _) in enumerate(cfg.head_paths):
            p = f"{prefix}fr{l}.p{i}."
            if source == "anchor":
                shapes[p + "w"] = (2 * k * k, a4, 1, 1)
            else:
                shapes[p + "w"] = (2 * k * k, cfg.odm_channels, 3, 3)
            shapes[p + "b"] = (2 * k * k,)
    return shapes


def parameter_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Every parameter name and shape, in initialization order."""
    shapes: Dict[str, tuple] = {}
    if cfg.is_pair:
        shapes.update(_backbone_shapes(cfg, "rg."))
        shapes.update(_arm_shapes(cfg, "rg."))
        if cfg.variant == "tdrnet":
            shapes.update(_offset_shapes(cfg, "rg.", "anchor"))
        if not cfg.tie_rg_rd:
            shapes.update(_backbone_shapes(cfg, "rd."))
        shapes.update(_fpn_shapes(cfg, "rd."))
        shapes.update(_head_shapes(cfg, "rd."))
        return shapes
    shapes.update(_backbone_shapes(cfg, ""))
    if cfg.variant == "drnet":
        shapes.update(_arm_shapes(cfg, ""))
    shapes.update(_fpn_shapes(cfg, ""))
    shapes.update(_head_shapes(cfg, ""))
    if cfg.uses_offsets:
        shapes.update(_offset_shapes(cfg, "", cfg.feature_refine))
    return shapes


def _is_refinement(name: str) -> bool:
    return any(part.startswith(("arm", "fr")) for part in name.split("."))


def build(config: ModelConfig, seed: int = 0, zero_refinement: bool = True,
          head_std: float = 0.01) -> Model:
    """Seeded initialization.

    Conv weights get He fan-in scaling, prediction layers a small normal,
    biases zero. With ``zero_refinement`` the anchor-offset and sampling-offset
    layers start at zero, so a fresh DRNet computes exactly what SSD4s does.
    """
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        elif _is_refinement(name):
            data = np.zeros(shape) if zero_refinement else rng.normal(0.0, head_std, size=shape)
        elif ".local." in name or ".conf." in name:
            data = rng.normal(0.0, head_std, size=shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, params)


# ------------------------------------------------------------------ forward


def _conv(model: Model, name: str, x: Tensor, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    w = model.params[name + ".w"]
    pad = w.shape[2] // 2 if padding is None else padding
    return ad.conv2d(x, w, model.params[name + ".b"], stride=stride, padding=pad)


def _check_image(model: Model, image: Tensor) -> None:
    cfg = model.config
    if image.ndim != 4 or image.shape[1] != cfg.in_channels or image.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ValueError(f"image shape {image.shape} does not match config "
                         f"(N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size})")


def backbone(model: Model, image: Tensor, prefix: str = "") -> List[Tensor]:
    stem_stride = model.config.strides[0] // 2
    x = ad.relu(_conv(model, prefix + "stem", image, stride=stem_stride))
    feats = []
    for l in range(4):
        x = ad.relu(_conv(model, f"{prefix}s{l}.down", x, stride=2))
        x = ad.relu(_conv(model, f"{prefix}s{l}.conv", x))
        feats.append(x)
    return feats


def top_down(model: Model, feats: List[Tensor], prefix: str = "") -> List[Tensor]:
    """Upsample-add-conv fusion, coarsest level first; keeps each level's extent."""
    out: List[Optional[Tensor]] = [None] * 4
    above = None
    for l in range(3, -1, -1):
        x = _conv(model, f"{prefix}lat{l}", feats[l])
        if above is not None:
            x = ad.add(x, ad.upsample_nearest2x(above))
        above = ad.relu(_conv(model, f"{prefix}fuse{l}", x))
        out[l] = above
    return out


def path_weights(model: Model, level: int, prefix: str = "") -> List[PathWeights]:
    p = model.params
    out = []
    for i, (k, d) in enumerate(model.config.head_paths):
        base = f"{prefix}head{level}.p{i}."
        fr = f"{prefix}fr{level}.p{i}."
        out.append(PathWeights(k, d, p[base + "local.w"], p[base + "local.b"],
                               p[base + "conf.w"], p[base + "conf.b"],
                               p.get(fr + "w"), p.get(fr + "b")))
    return out


def anchor_offsets(model: Model, feats: List[Tensor], prefix: str = "") -> List[Tensor]:
    return [_conv(model, f"{prefix}arm{l}", f) for l, f in enumerate(feats)]


def sampling_offsets(model: Model, ar: List[Tensor], odm: Optional[List[Tensor]] = None,
                     prefix: str = "") -> List[List[Tensor]]:
    """Per level, per path offset fields from anchor offsets (or ODM features)."""
    cfg = model.config
    source = "anchor" if cfg.is_pair else cfg.feature_refine
    p = model.params
    dp = []
    for l in range(4):
        level = []
        for i, (k, _) in enumerate(cfg.head_paths):
            w, b = p[f"{prefix}fr{l}.p{i}.w"], p[f"{prefix}fr{l}.p{i}.b"]
            if source == "anchor":
                level.append(feature_location_refine(ar[l], w, b))
            else:
                level.append(offsets_from_features(odm[l], w, b, kernel=k))
        dp.append(level)
    return dp


def _detect(model: Model, odm: List[Tensor], state: Optional[RefinementState], prefix: str,
            deformable: bool) -> DetectionOutput:
    cfg = model.config
    locs, confs = [], []
    for l in range(4):
        dps = None if state is None or state.dp is None else state.dp[l]
        loc, conf = level_head(odm[l], path_weights(model, l, prefix), dps, deformable)
        locs.append(loc)
        confs.append(conf)
    n = odm[0].shape[0]
    anchors = model.anchors.boxes
    if state is None:
        reference = np.broadcast_to(anchors, (n,) + anchors.shape).copy()
    else:
        clip = float(cfg.input_size) if cfg.clip_refined else None
        reference = refined_anchors([t.data for t in state.ar], anchors, cfg.coding, clip)
    return DetectionOutput(flatten_levels(confs, cfg.num_classes + 1), flatten_levels(locs, 4),
                           reference, cfg.coding)


def forward_drnet(model: Model, image: Tensor) -> Tuple[RefinementState, DetectionOutput]:
    cfg = model.config
    if cfg.variant not in ("drnet", "ssd4s"):
        raise ValueError(f"forward_drnet needs a drnet/ssd4s model, got {cfg.variant}")
    _check_image(model, image)
    feats = backbone(model, image)
    odm = top_down(model, feats)
    if cfg.variant == "ssd4s":
        return None, _detect(model, odm, None, "", deformable=False)
    ar = anchor_offsets(model, feats)
    dp = sampling_offsets(model, ar, odm) if cfg.uses_offsets else None
    state = RefinementState(ar, dp)
    return state, _detect(model, odm, state, "", deformable=cfg.uses_offsets)


def forward_ssd4s(model: Model, image: Tensor) -> DetectionOutput:
    return forward_drnet(model, image)[1]


def _require_pair(model: Model) -> None:
    if not model.config.is_pair:
        raise ValueError(f"RG/RD forward needs a trnet/tdrnet model, got {model.config.variant}")


def forward_rg(model: Model, image: Tensor) -> RefinementState:
    """Reference generator: anchor offsets, plus sampling offsets for TDRNet."""
    _require_pair(model)
    _check_image(model, image)
    feats = backbone(model, image, "rg.")
    ar = anchor_offsets(model, feats, "rg.")
    dp = sampling_offsets(model, ar, prefix="rg.") if model.config.variant == "tdrnet" else None
    return RefinementState(ar, dp)


def rg_offsets_from(model: Model, ar: List[Tensor]) -> Optional[List[List[Tensor]]]:
    if model.config.variant != "tdrnet":
        return None
    return sampling_offsets(model, ar, prefix="rg.")


def forward_rd(model: Model, image: Tensor, state: RefinementState) -> DetectionOutput:
    """Refinement detector on ``image`` using an externally supplied state."""
    _require_pair(model)
    _check_image(model, image)
    cfg = model.config
    shapes = cfg.feature_shapes
    a4 = 4 * cfg.anchors_per_cell
    if len(state.ar) != 4 or any(t.shape[1:] != (a4,) + s for t, s in zip(state.ar, shapes)):
        raise ValueError("refinement state does not match the detector's scale layout")
    if cfg.variant == "tdrnet":
        if state.dp is None or len(state.dp) != 4 or any(len(lv) != len(cfg.head_paths) for lv in state.dp):
            raise ValueError("TDRNet detector needs one offset field per level and path")
    else:
        state = RefinementState(state.ar, None)
    feats = backbone(model, image, "rg." if cfg.tie_rg_rd else "rd.")
    odm = top_down(model, feats, "rd.")
    return _detect(model, odm, state, "rd.", deformable=cfg.variant == "tdrnet")


def forward(model: Model, image: Tensor) -> Tuple[Optional[RefinementState], DetectionOutput]:
    """Same-frame forward for any variant (RG then RD for the temporal pair)."""
    if model.config.is_pair:
        state = forward_rg(model, image)
        return state, forward_rd(model, image, state)
    return forward_drnet(model, image)


def zero_state(model: Model, batch: int = 1) -> RefinementState:
    cfg = model.config
    a4 = 4 * cfg.anchors_per_cell
    ar = [Tensor(np.zeros((batch, a4) + s)) for s in cfg.feature_shapes]
    dp = None
    if cfg.variant == "tdrnet":
        dp = [[Tensor(np.zeros((batch, 2 * k * k) + s)) for k, _ in cfg.head_paths] for s in cfg.feature_shapes]
    return RefinementState(ar, dp)
