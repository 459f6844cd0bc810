"""Teacher training on homography pairs and teacher-to-student distillation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import (
    CELL,
    ConfigError,
    ModelConfig,
    ModelWeights,
    forward,
    init_weights,
    preset,
    save_weights,
    student_config,
)
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    conv2d,
    l2_normalize_channels,
    mse,
    pad_replicate,
    record,
    reshape,
    scale,
    softmax_channels,
)

logger = logging.getLogger(__name__)

DUSTBIN = CELL * CELL
RANDOM_COS_GATE = 0.2


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data containers


@dataclass
class HomographyPair:
    image_a: np.ndarray  # (H, W) float in [0, 1]
    image_b: np.ndarray
    h_ab: np.ndarray  # 3x3, maps a-pixels to b-pixels
    labels_a: np.ndarray  # (H/8, W/8) ints in 0..64
    labels_b: np.ndarray

    def __post_init__(self):
        self.h_ab = np.asarray(self.h_ab, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(self.h_ab)) <= 1e-8:
            raise ValueError("homography is not invertible")

    def match_ids(self) -> np.ndarray:
        """(M, 2) array of (cell index in a, cell index in b) for labeled cells of a.

        Each labeled point of a is warped into b; the cell containing the
        warped point (equivalently, the nearest cell center) is its match.
        """
        return match_ids(self.labels_a, self.h_ab, self.image_b.shape)


def label_points(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (x, y) of every labeled cell and the flat cell indices."""
    hc, wc = labels.shape
    cy, cx = np.nonzero(labels < DUSTBIN)
    k = labels[cy, cx]
    pts = np.stack([cx * CELL + k % CELL, cy * CELL + k // CELL], axis=1).astype(np.float64)
    return pts, cy * wc + cx


def match_ids(labels_a: np.ndarray, h_ab: np.ndarray, shape_b: tuple[int, int]) -> np.ndarray:
    from .geometry import warp_homography

    pts, cells = label_points(labels_a)
    if len(pts) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    warped, valid = warp_homography(h_ab, pts)
    h, w = shape_b
    xi = np.floor(warped[:, 0] + 0.5)
    yi = np.floor(warped[:, 1] + 0.5)
    valid &= (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    cell_b = (yi[valid] // CELL) * (w // CELL) + xi[valid] // CELL
    return np.stack([cells[valid], cell_b.astype(np.int64)], axis=1)


@dataclass
class DistillBatch:
    images: Tensor
    kt_v: Tensor
    dk_v: Tensor
    kt_t: Tensor
    dk_t: Tensor

    def __post_init__(self):
        if self.kt_v.shape != self.kt_t.shape or self.dk_v.shape != self.dk_t.shape:
            raise ShapeError(
                f"teacher/student output shapes differ: {self.kt_v.shape} vs {self.kt_t.shape}, "
                f"{self.dk_v.shape} vs {self.dk_t.shape}"
            )


# --------------------------------------------------------------------------
# losses


def detector_loss(det_raw: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over cells between per-cell softmax and class labels."""
    labels = np.asarray(labels)
    n, c, h, w = det_raw.shape
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match detector grid {(n, h, w)}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in 0..{c - 1}, got range {labels.min()}..{labels.max()}")
    x = det_raw.data
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    logp = z - np.log(e.sum(axis=1, keepdims=True))
    lab = labels[:, None].astype(np.int64)
    count = n * h * w
    out = np.asarray(-np.take_along_axis(logp, lab, axis=1).sum() / count, dtype=x.dtype)

    def backward(g):
        grad = s.copy()
        np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=1) - 1, axis=1)
        return (grad * (g / count),)

    return record("detector_loss", out, (det_raw,), backward)


def _cell_vectors(t: np.ndarray) -> np.ndarray:
    n, d, h, w = t.shape
    return t.reshape(n, d, h * w).transpose(0, 2, 1)


def descriptor_pairs(desc_a: np.ndarray, desc_b: np.ndarray, ids: np.ndarray, rng: np.random.Generator) -> dict:
    """Select the pairings contributing to the descriptor loss for one image pair.

    ``desc_a``/``desc_b`` are (cells, D).  Returns index arrays for expected
    matches, hardest wrong pairings, and random pairings.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1, 2)
    na, nb = len(desc_a), len(desc_b)
    an = desc_a / np.maximum(np.linalg.norm(desc_a, axis=1, keepdims=True), 1e-12)
    bn = desc_b / np.maximum(np.linalg.norm(desc_b, axis=1, keepdims=True), 1e-12)
    if len(ids):
        sims = an[ids[:, 0]] @ bn.T
        sims[np.arange(len(ids)), ids[:, 1]] = -np.inf
        neg = np.argmax(sims, axis=1)
    else:
        neg = np.zeros(0, dtype=np.int64)
    n_rand = len(ids) if len(ids) else na
    ri = rng.integers(0, na, size=n_rand)
    rj = rng.integers(0, nb, size=n_rand)
    return {"pos": ids, "neg": np.stack([ids[:, 0], neg], axis=1), "rand": np.stack([ri, rj], axis=1)}


def descriptor_loss(
    desc_a: Tensor,
    desc_b: Tensor,
    ids: Sequence[np.ndarray] | np.ndarray,
    rng: np.random.Generator | int,
) -> Tensor:
    """Three-part cosine descriptor loss, averaged over the batch.

    Per pair of images: mean of ``1 - cos`` over expected matches, plus mean
    of ``cos`` over the hardest non-matching cell for each expected match,
    plus mean over random cell pairs of ``cos`` where ``cos > 0.2`` (0 elsewhere).
    ``ids`` holds one (M, 2) array of (cell in a, cell in b) per batch item.
    """
    if desc_a.shape != desc_b.shape:
        raise ShapeError(f"descriptor maps differ: {desc_a.shape} vs {desc_b.shape}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = desc_a.shape[0]
    if isinstance(ids, np.ndarray) and ids.ndim == 2:
        ids = [ids]
    if len(ids) != n:
        raise ShapeError(f"need one id array per batch item ({n}), got {len(ids)}")
    va = _cell_vectors(desc_a.data).astype(np.float64)
    vb = _cell_vectors(desc_b.data).astype(np.float64)

    # loss = (total + sum of coef * cos(a[bi, ii], b[bi, jj])) / n
    total = 0.0
    bi, ii, jj, coef = [], [], [], []
    for k in range(n):
        sel = descriptor_pairs(va[k], vb[k], ids[k], rng)
        pos, neg, rnd = sel["pos"], sel["neg"], sel["rand"]
        if len(pos):
            m = len(pos)
            total += 1.0  # constant part of mean(1 - cos)
            for arr, c in ((pos, -1.0 / m), (neg, 1.0 / m)):
                bi.append(np.full(len(arr), k))
                ii.append(arr[:, 0])
                jj.append(arr[:, 1])
                coef.append(np.full(len(arr), c))
        if len(rnd):
            cos_r = _cos_rows(va[k][rnd[:, 0]], vb[k][rnd[:, 1]])
            gate = cos_r > RANDOM_COS_GATE
            bi.append(np.full(int(gate.sum()), k))
            ii.append(rnd[gate, 0])
            jj.append(rnd[gate, 1])
            coef.append(np.full(int(gate.sum()), 1.0 / len(rnd)))
    bi = np.concatenate(bi) if bi else np.zeros(0, dtype=np.int64)
    ii = np.concatenate(ii) if ii else np.zeros(0, dtype=np.int64)
    jj = np.concatenate(jj) if jj else np.zeros(0, dtype=np.int64)
    coef = np.concatenate(coef) if coef else np.zeros(0)

    a = va[bi, ii]
    b = vb[bi, jj]
    na_ = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    nb_ = np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    ah, bh = a / na_, b / nb_
    cos = np.sum(ah * bh, axis=1)
    value = (total + float(np.sum(coef * cos))) / n
    out = np.asarray(value, dtype=desc_a.dtype)

    def backward(g):
        w = (coef * float(g) / n)[:, None]
        ga_rows = w * (bh - cos[:, None] * ah) / na_
        gb_rows = w * (ah - cos[:, None] * bh) / nb_
        ga = np.zeros_like(va)
        gb = np.zeros_like(vb)
        np.add.at(ga, (bi, ii), ga_rows)
        np.add.at(gb, (bi, jj), gb_rows)
        shape = desc_a.shape
        back = lambda v: v.transpose(0, 2, 1).reshape(shape).astype(desc_a.dtype)
        return back(ga), back(gb)

    return record("descriptor_loss", out, (desc_a, desc_b), backward)


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.maximum(np.linalg.norm(a, axis=1), 1e-12)
    nb = np.maximum(np.linalg.norm(b, axis=1), 1e-12)
    return np.sum(a * b, axis=1) / (na * nb)


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel(x: Tensor) -> Tensor:
    """Per-channel Sobel gradients with edge replication.

    ``(N, C, h, w)`` -> ``(N, 2C, h, w)``; output channel ``2c`` is the
    horizontal derivative of input channel ``c`` and ``2c + 1`` the vertical.
    """
    n, c, h, w = x.shape
    kernel = Tensor(np.stack([SOBEL_X, SOBEL_X.T])[:, None].astype(x.dtype))
    flat = reshape(x, (n * c, 1, h, w))
    g = conv2d(pad_replicate(flat, 1), kernel, None, stride=1, padding=0)
    return reshape(g, (n, 2 * c, h, w))


@dataclass
class LossWeights:
    keypoints: float = 1.0
    descriptors: float = 1.0
    gradients: float = 1.0


def distill_loss(
    batch: DistillBatch,
    use_gradient_term: bool = True,
    weights: LossWeights | None = None,
    target: str = "logits",
) -> tuple[Tensor, dict[str, float]]:
    """Output-matching loss of student against detached teacher outputs.

    ``target="logits"`` compares raw head outputs; ``"activated"`` compares the
    per-cell softmax and L2-normalized descriptor maps instead.
    Returns the loss tensor and a dict of its unweighted terms.
    """
    weights = weights or LossWeights()
    kt_v, dk_v = batch.kt_v.detach(), batch.dk_v.detach()
    kt_t, dk_t = batch.kt_t, batch.dk_t
    if target == "activated":
        kt_v, dk_v = softmax_channels(kt_v), l2_normalize_channels(dk_v)
        kt_t, dk_t = softmax_channels(kt_t), l2_normalize_channels(dk_t)
    elif target != "logits":
        raise ConfigError(f"target must be 'logits' or 'activated', got {target!r}")
    l_kt = mse(kt_v, kt_t)
    l_dk = mse(dk_v, dk_t)
    loss = add(scale(l_kt, weights.keypoints), scale(l_dk, weights.descriptors))
    terms = {"keypoints": float(l_kt.data), "descriptors": float(l_dk.data)}
    if use_gradient_term:
        l_g = mse(sobel(kt_v), sobel(kt_t))
        loss = add(loss, scale(l_g, weights.gradients))
        terms["gradients"] = float(l_g.data)
    return loss, terms


# --------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, weights: ModelWeights) -> None:
        adam_step(weights, {k: p.grad for k, p in weights.params.items()}, self)


def adam_step(weights: ModelWeights, grads: dict, state: Adam, lr=None, beta1=None, beta2=None, eps=None) -> None:
    """One bias-corrected Adam update in place. Missing gradients count as zero."""
    lr = state.lr if lr is None else lr
    b1 = state.beta1 if beta1 is None else beta1
    b2 = state.beta2 if beta2 is None else beta2
    eps = state.eps if eps is None else eps
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in layer {name}")
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in weights.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    preset: str = "toy"
    width_multiplier: str = "1"
    student_width: str = "1/2"
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_d: float = 1.0
    w_keypoints: float = 1.0
    w_descriptors: float = 1.0
    w_gradients: float = 1.0
    use_gradient_term: bool = True
    target: str = "logits"
    checkpoint_every: int = 0
    dtype: str = "float32"

    def model_config(self) -> ModelConfig:
        return preset(self.preset, self.width_multiplier)

    def adam(self) -> Adam:
        return Adam(self.lr, self.beta1, self.beta2, self.eps)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_keypoints, self.w_descriptors, self.w_gradients)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value, kind: type, key: str):
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"field {key!r}: expected a boolean, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"field {key!r}: expected {kind.__name__}, got {value!r}") from None


def parse_config(text: str) -> TrainConfig:
    """Parse a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    text = text.strip()
    if text.startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
    types = {f.name: f.type for f in fields(TrainConfig)}
    kinds = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"unknown field {key!r}")
        out[key] = _coerce(value, kinds[types[key]], key)
    cfg = TrainConfig(**out)
    if cfg.steps < 0 or cfg.batch_size < 1:
        raise ConfigError("field 'steps' must be >= 0 and 'batch_size' >= 1")
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"field 'dtype': expected float32 or float64, got {cfg.dtype!r}")
    if cfg.target not in ("logits", "activated"):
        raise ConfigError(f"field 'target': expected logits or activated, got {cfg.target!r}")
    cfg.model_config()
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def write_history(history: list[dict], path: str | Path) -> None:
    if not history:
        Path(path).write_text("step,total\n")
        return
    cols = list(history[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in cols[1:]])


# --------------------------------------------------------------------------
# training loops


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    order = np.zeros(0, dtype=np.int64)
    for _ in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch_size]
        order = order[batch_size:]


def teacher_loss(weights: ModelWeights, pairs: Sequence[HomographyPair], lambda_d: float, rng) -> tuple[Tensor, dict]:
    """Detector cross-entropy on both images plus weighted descriptor loss."""
    dt = weights.dtype
    xa = np.stack([p.image_a for p in pairs])[:, None].astype(dt)
    xb = np.stack([p.image_b for p in pairs])[:, None].astype(dt)
    det_a, desc_a = forward(weights, xa)
    det_b, desc_b = forward(weights, xb)
    lp = add(detector_loss(det_a, np.stack([p.labels_a for p in pairs])), detector_loss(det_b, np.stack([p.labels_b for p in pairs])))
    terms = {"detector": float(lp.data)}
    if lambda_d == 0:
        return lp, terms | {"descriptor": 0.0}
    ld = descriptor_loss(desc_a, desc_b, [p.match_ids() for p in pairs], rng)
    terms["descriptor"] = float(ld.data)
    return add(lp, scale(ld, lambda_d)), terms


def train_teacher(
    config: ModelConfig,
    dataset: Sequence[HomographyPair],
    hp: TrainConfig,
    seed: int | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelWeights, list[dict]]:
    if not dataset:
        raise ValueError("training dataset is empty")
    seed = hp.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    weights = init_weights(config, seed=seed, dtype=np.dtype(hp.dtype)).requires_grad_()
    opt = hp.adam()
    history = []
    for step, idx in enumerate(_batches(len(dataset), hp.batch_size, hp.steps, rng)):
        weights.zero_grad()
        with Tape() as tape:
            loss, terms = teacher_loss(weights, [dataset[i] for i in idx], hp.lambda_d, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became non-finite at step {step}")
            tape.backward(loss)
        history.append({"step": step, "total": value, **terms})
        opt.step(weights)
        _maybe_checkpoint(weights, hp, step, checkpoint_dir, "teacher")
    weights.requires_grad_(False)
    return weights, history


def distill(
    teacher: ModelWeights,
    student_cfg: ModelConfig,
    images: np.ndarray,
    hp: TrainConfig,
    seed: int | None = None,
    init: ModelWeights | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelWeights, list[dict]]:
    """Train a student to reproduce the teacher's raw head outputs on ``images`` (N, H, W)."""
    if teacher.config.desc_channels != student_cfg.desc_channels:
        raise ConfigError(
            f"descriptor width mismatch: teacher {teacher.config.desc_channels}, student {student_cfg.desc_channels}"
        )
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("distillation image set is empty")
    seed = hp.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    dt = np.dtype(hp.dtype)
    if init is not None:
        student = init.copy(dtype=dt)
    else:
        student = init_weights(student_cfg, seed=seed + 1, dtype=dt)
    student.requires_grad_()
    frozen = teacher.copy(dtype=dt).requires_grad_(False)
    opt = hp.adam()
    lw = hp.loss_weights()
    history = []
    for step, idx in enumerate(_batches(len(images), hp.batch_size, hp.steps, rng)):
        x = images[idx][:, None].astype(dt)
        kt_v, dk_v = forward(frozen, x)
        student.zero_grad()
        with Tape() as tape:
            kt_t, dk_t = forward(student, x)
            loss, terms = distill_loss(DistillBatch(Tensor(x), kt_v, dk_v, kt_t, dk_t), hp.use_gradient_term, lw, hp.target)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became non-finite at step {step}")
            tape.backward(loss)
        history.append({"step": step, "total": value, **terms})
        opt.step(student)
        _maybe_checkpoint(student, hp, step, checkpoint_dir, "student")
    student.requires_grad_(False)
    return student, history


def _maybe_checkpoint(weights, hp, step, checkpoint_dir, stem):
    if checkpoint_dir and hp.checkpoint_every and (step + 1) % hp.checkpoint_every == 0:
        path = Path(checkpoint_dir) / f"{stem}_step{step + 1:06d}.kpw"
        save_weights(weights, path)
        logger.info("wrote checkpoint %s", path)


def make_student_config(hp: TrainConfig, teacher: ModelConfig) -> ModelConfig:
    return student_config(teacher, hp.student_width)
