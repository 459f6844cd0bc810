"""Run a model over an evaluation dataset and collect per-pair metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CameraFrame, homography_correspondences, reproject
from .metrics import DEFAULT_THRESHOLD_PX, PairMetrics, evaluate_pair
from .model import KeypointSet, ModelWeights, extract
from .training import HomographyPair


@dataclass
class EvalOptions:
    threshold_px: float = DEFAULT_THRESHOLD_PX
    mutual: bool = True
    occlusion: bool = True
    score_threshold: float = 0.015
    nms_radius: int = 4
    max_points: int = 500
    pair_gap: int = 1
    random_descriptors: bool = False
    seed: int = 0


def _keypoints(weights: ModelWeights, image: np.ndarray, opts: EvalOptions, rng: np.random.Generator) -> KeypointSet:
    kps = extract(weights, image, opts.score_threshold, opts.nms_radius, opts.max_points)
    if opts.random_descriptors:
        d = rng.normal(size=kps.descriptors.shape)
        kps.descriptors = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    return kps


def sequence_pairs(n_frames: int, gap: int) -> list[tuple[int, int]]:
    return [(i, i + gap) for i in range(n_frames - gap)]


def evaluate_sequence(weights: ModelWeights, frames: Sequence[CameraFrame], opts: EvalOptions) -> list[tuple[int, int, PairMetrics]]:
    """Metrics for frame pairs ``(i, i + gap)`` of a depth sequence."""
    rng = np.random.default_rng(opts.seed)
    kps = [_keypoints(weights, f.image, opts, rng) for f in frames]
    out = []
    for i, j in sequence_pairs(len(frames), opts.pair_gap):
        fi, fj = frames[i], frames[j]
        m = evaluate_pair(
            kps[i],
            kps[j],
            lambda p, a=fi, b=fj: reproject(a, b, p, opts.occlusion),
            lambda p, a=fi, b=fj: reproject(b, a, p, opts.occlusion),
            opts.threshold_px,
            opts.mutual,
        )
        out.append((i, j, m))
    return out


def evaluate_homography_pairs(weights: ModelWeights, pairs: Sequence[HomographyPair], opts: EvalOptions) -> list[tuple[int, int, PairMetrics]]:
    """Metrics for image pairs related by a known homography."""
    rng = np.random.default_rng(opts.seed)
    out = []
    for k, pair in enumerate(pairs):
        ka = _keypoints(weights, pair.image_a, opts, rng)
        kb = _keypoints(weights, pair.image_b, opts, rng)
        h_inv = np.linalg.inv(pair.h_ab)
        m = evaluate_pair(
            ka,
            kb,
            lambda p, h=pair.h_ab, s=pair.image_b.shape: homography_correspondences(h, p, s),
            lambda p, h=h_inv, s=pair.image_a.shape: homography_correspondences(h, p, s),
            opts.threshold_px,
            opts.mutual,
        )
        out.append((2 * k, 2 * k + 1, m))
    return out


PAIR_COLUMNS = [
    "frame_i", "frame_j", "n_a", "n_b",
    "precision_ab", "precision_ba", "precision_mean",
    "repeatability_ab", "repeatability_ba", "repeatability_mean",
    "f1", "tp_ab", "fp_ab", "tp_ba", "fp_ba", "threshold_px", "degenerate",
]


def write_pair_csv(results: Sequence[tuple[int, int, PairMetrics]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIR_COLUMNS)
        for i, j, m in results:
            row = m.as_row() | {"frame_i": i, "frame_j": j}
            w.writerow([f"{row[c]:.6f}" if isinstance(row[c], float) else int(row[c]) for c in PAIR_COLUMNS])
