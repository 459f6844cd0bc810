"""Fully-convolutional keypoint detector/descriptor network.

A shared VGG-style encoder reduces the image by 8 in each direction; two
heads predict 65-way per-cell detector logits (64 pixel positions plus a
"no keypoint" dustbin) and a dense descriptor map.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .tensor import (
    Tensor,
    conv2d,
    maxpool2,
    relu,
    softmax_channels,
    tensor_from_bytes,
    tensor_to_bytes,
)

CELL = 8
CHECKPOINT_MAGIC = b"KPW1"


class ConfigError(ValueError):
    """Invalid architecture or checkpoint configuration."""


@dataclass(frozen=True)
class ModelConfig:
    width_multiplier: Fraction = Fraction(1)
    base_channels: tuple[int, ...] = (64, 64, 128, 128)
    head_channels: int = 256
    descriptor_dim: int = 256
    # The descriptor output width is normally scaled with the rest of the
    # network; distillation students keep the teacher's width instead.
    scale_descriptor: bool = True
    cell: int = CELL

    def __post_init__(self):
        object.__setattr__(self, "width_multiplier", Fraction(self.width_multiplier).limit_denominator(1000))
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        if not 0 < self.width_multiplier <= 1:
            raise ConfigError(f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")
        if self.cell != CELL:
            raise ConfigError(f"cell size is fixed at {CELL}, got {self.cell}")
        if len(self.base_channels) != 4:
            raise ConfigError(f"base_channels needs 4 stage widths, got {self.base_channels}")

    def scaled(self, c: int) -> int:
        return max(1, round(c * self.width_multiplier))

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.scaled(c) for c in self.base_channels)

    @property
    def head_width(self) -> int:
        return self.scaled(self.head_channels)

    @property
    def desc_channels(self) -> int:
        return self.scaled(self.descriptor_dim) if self.scale_descriptor else self.descriptor_dim

    @property
    def detector_channels(self) -> int:
        return self.cell * self.cell + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_multiplier"] = str(self.width_multiplier)
        d["base_channels"] = list(self.base_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "width_multiplier" in d:
            d["width_multiplier"] = Fraction(str(d["width_multiplier"]))
        if "base_channels" in d:
            d["base_channels"] = tuple(d["base_channels"])
        return cls(**d)


PRESETS = {
    "default": ModelConfig(),
    "desk": ModelConfig(base_channels=(16, 16, 32, 32), head_channels=64, descriptor_dim=64),
    "toy": ModelConfig(base_channels=(8, 8, 16, 16), head_channels=32, descriptor_dim=32),
}


def preset(name: str, width_multiplier=1) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], width_multiplier=Fraction(str(width_multiplier)))


def student_config(teacher: ModelConfig, width_multiplier) -> ModelConfig:
    """Narrower copy of ``teacher`` whose descriptor output still matches the teacher's."""
    return replace(
        teacher,
        width_multiplier=Fraction(str(width_multiplier)),
        descriptor_dim=teacher.desc_channels,
        scale_descriptor=False,
    )


def layer_specs(config: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every conv layer, in forward order."""
    c1, c2, c3, c4 = config.stage_channels
    specs = []
    cin = 1
    for stage, cout in enumerate((c1, c2, c3, c4), start=1):
        specs.append((f"conv{stage}a", cin, cout, 3))
        specs.append((f"conv{stage}b", cout, cout, 3))
        cin = cout
    specs += [
        ("det_a", c4, config.head_width, 3),
        ("det_b", config.head_width, config.detector_channels, 1),
        ("desc_a", c4, config.head_width, 3),
        ("desc_b", config.head_width, config.desc_channels, 1),
    ]
    return specs


def param_count(config: ModelConfig) -> int:
    return sum(cout * cin * k * k + cout for _, cin, cout, k in layer_specs(config))


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def requires_grad_(self, flag: bool = True) -> "ModelWeights":
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self, dtype=None) -> "ModelWeights":
        return ModelWeights(
            self.config,
            {k: Tensor(v.data.astype(dtype or v.dtype, copy=True), requires_grad=v.requires_grad) for k, v in self.params.items()},
        )

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def init_weights(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    """He-uniform fan-in initialization, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, cin, cout, k in layer_specs(config):
        bound = np.sqrt(6.0 / (cin * k * k))
        params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype))
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype))
    return ModelWeights(config, params)


def _conv(weights: ModelWeights, name: str, x: Tensor) -> Tensor:
    w = weights.params[f"{name}.weight"]
    pad = w.shape[-1] // 2
    return conv2d(x, w, weights.params[f"{name}.bias"], stride=1, padding=pad)


def forward(weights: ModelWeights, image: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
    """Run the network on ``(N, 1, H, W)`` images; returns raw detector logits and descriptors."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=weights.dtype))
    x = image if image.dtype == weights.dtype else Tensor(image.data.astype(weights.dtype), image.requires_grad)
    if x.data.ndim == 2:
        x = Tensor(x.data[None, None], x.requires_grad)
    h, w = x.shape[-2:]
    if h % CELL or w % CELL:
        raise ConfigError(f"image size {h}x{w} must be a multiple of {CELL} in both directions")
    for stage in range(1, 5):
        x = relu(_conv(weights, f"conv{stage}a", x))
        x = relu(_conv(weights, f"conv{stage}b", x))
        if stage < 4:
            x = maxpool2(x)
    det = _conv(weights, "det_b", relu(_conv(weights, "det_a", x)))
    desc = _conv(weights, "desc_b", relu(_conv(weights, "desc_a", x)))
    return det, desc


# --------------------------------------------------------------------------
# keypoint extraction


@dataclass
class KeypointSet:
    points: np.ndarray  # (K, 2) integer pixel coordinates (x, y)
    scores: np.ndarray  # (K,)
    descriptors: np.ndarray  # (K, D), unit rows; (0, D) or (K, 0) when absent

    def __len__(self) -> int:
        return len(self.points)


def depth_to_space(prob: np.ndarray) -> np.ndarray:
    """(64, Hc, Wc) per-cell channel map -> (8*Hc, 8*Wc) pixel map."""
    c, hc, wc = prob.shape
    return prob.reshape(CELL, CELL, hc, wc).transpose(2, 0, 3, 1).reshape(hc * CELL, wc * CELL)


def space_to_depth(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // CELL, CELL, w // CELL, CELL).transpose(1, 3, 0, 2).reshape(CELL * CELL, h // CELL, w // CELL)


def score_map(det_raw: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel keypoint probability (H, W) for a single image."""
    data = det_raw.data if isinstance(det_raw, Tensor) else np.asarray(det_raw)
    if data.ndim == 3:
        data = data[None]
    if data.shape[1] != CELL * CELL + 1:
        raise ConfigError(f"detector output needs {CELL * CELL + 1} channels, got {data.shape[1]}")
    prob = softmax_channels(Tensor(data[:1])).data[0]
    return depth_to_space(prob[:-1])


def nms(scores: np.ndarray, threshold: float, radius: int, max_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy suppression by descending score within a Chebyshev radius.

    Returns integer (x, y) points and their scores.  Equal scores are visited
    in row-major pixel order.
    """
    h, w = scores.shape
    ys, xs = np.nonzero(scores >= threshold)
    vals = scores[ys, xs]
    order = np.lexsort((ys * w + xs, -vals))
    taken = np.zeros((h, w), dtype=bool)
    keep = []
    for k in order:
        y, x = ys[k], xs[k]
        if taken[y, x]:
            continue
        keep.append(k)
        taken[max(0, y - radius) : y + radius + 1, max(0, x - radius) : x + radius + 1] = True
        if len(keep) >= max_points:
            break
    keep = np.asarray(keep, dtype=np.int64)
    pts = np.stack([xs[keep], ys[keep]], axis=1) if len(keep) else np.zeros((0, 2), dtype=np.int64)
    return pts.astype(np.int64), vals[keep].astype(np.float64)


def detect(
    det_raw: Tensor | np.ndarray,
    score_threshold: float = 0.015,
    nms_radius: int = 4,
    max_points: int = 500,
) -> KeypointSet:
    pts, sc = nms(score_map(det_raw), score_threshold, nms_radius, max_points)
    return KeypointSet(pts, sc, np.zeros((len(pts), 0)))


def sample_descriptors(desc_raw: Tensor | np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinearly sample the descriptor grid at pixel points and L2-normalize.

    Pixel ``(x, y)`` maps to grid coordinate ``((x + 0.5) / 8 - 0.5, (y + 0.5) / 8 - 0.5)``;
    coordinates outside the grid are clamped to its border.
    """
    data = desc_raw.data if isinstance(desc_raw, Tensor) else np.asarray(desc_raw)
    if data.ndim == 4:
        data = data[0]
    d, hc, wc = data.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros((0, d))
    gx = np.clip((pts[:, 0] + 0.5) / CELL - 0.5, 0, wc - 1)
    gy = np.clip((pts[:, 1] + 0.5) / CELL - 0.5, 0, hc - 1)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, wc - 1)
    y1 = np.minimum(y0 + 1, hc - 1)
    ax = gx - x0
    ay = gy - y0
    grid = data.astype(np.float64)
    v = (
        grid[:, y0, x0] * ((1 - ax) * (1 - ay))
        + grid[:, y0, x1] * (ax * (1 - ay))
        + grid[:, y1, x0] * ((1 - ax) * ay)
        + grid[:, y1, x1] * (ax * ay)
    ).T
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(norm, 1e-12)


def extract(
    weights: ModelWeights,
    image: np.ndarray,
    score_threshold: float = 0.015,
    nms_radius: int = 4,
    max_points: int = 500,
) -> KeypointSet:
    """Detect keypoints in a single (H, W) image and attach their descriptors."""
    det, desc = forward(weights, np.asarray(image)[None, None])
    kps = detect(det, score_threshold, nms_radius, max_points)
    kps.descriptors = sample_descriptors(desc, kps.points)
    return kps


# --------------------------------------------------------------------------
# checkpoints


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    """Write a checkpoint: magic, u32 manifest length, JSON manifest, tensor buffers."""
    blobs, layers, offset = [], [], 0
    for name, t in weights.params.items():
        b = tensor_to_bytes(t)
        layers.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    manifest = json.dumps({"config": weights.config.to_dict(), "layers": layers}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for b in blobs:
            fh.write(b)


def load_weights(path: str | Path) -> ModelWeights:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a weight checkpoint")
    (n,) = struct.unpack_from("<I", buf, 4)
    manifest = json.loads(buf[8 : 8 + n])
    base = 8 + n
    config = ModelConfig.from_dict(manifest["config"])
    params = {}
    for layer in manifest["layers"]:
        t, _ = tensor_from_bytes(buf, base + layer["offset"])
        if list(t.shape) != layer["shape"]:
            raise ConfigError(f"{path}: layer {layer['name']} shape {t.shape} disagrees with manifest")
        params[layer["name"]] = t
    weights = ModelWeights(config, params)
    expected = {f"{name}.{kind}" for name, *_ in layer_specs(config) for kind in ("weight", "bias")}
    if set(params) != expected or weights.count() != param_count(config):
        raise ConfigError(f"{path}: parameters do not match the stored architecture")
    return weights
