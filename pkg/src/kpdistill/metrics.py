"""Descriptor matching and the precision / repeatability / F1 quality measures."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Correspondences
from .model import KeypointSet

DEFAULT_THRESHOLD_PX = 3.0


@dataclass
class MatchSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    similarity: np.ndarray
    mutual: bool

    def __len__(self) -> int:
        return len(self.idx_a)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(s)) for i, j, s in zip(self.idx_a, self.idx_b, self.similarity)]


def _empty_matches(mutual: bool) -> MatchSet:
    return MatchSet(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0), mutual)


def match_descriptors(desc_a: np.ndarray, desc_b: np.ndarray, mutual: bool = True) -> MatchSet:
    """Nearest neighbor by cosine similarity; ties go to the lowest index.

    With ``mutual`` only pairs that are each other's nearest neighbor are kept.
    """
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    if len(desc_a) == 0 or len(desc_b) == 0:
        return _empty_matches(mutual)
    sim = desc_a @ desc_b.T
    nn_ab = np.argmax(sim, axis=1)
    idx_a = np.arange(len(desc_a))
    if mutual:
        nn_ba = np.argmax(sim, axis=0)
        idx_a = idx_a[nn_ba[nn_ab] == idx_a]
    idx_b = nn_ab[idx_a]
    return MatchSet(idx_a, idx_b, sim[idx_a, idx_b], mutual)


@dataclass
class PrecisionResult:
    tp: int
    fp: int
    precision: float
    excluded: int  # matches whose source point has no valid reprojection
    degenerate: bool  # tp + fp == 0


def precision(
    matches: MatchSet,
    corr: Correspondences,
    points_b: np.ndarray,
    threshold_px: float = DEFAULT_THRESHOLD_PX,
) -> PrecisionResult:
    """Share of matches landing within ``threshold_px`` of the reprojected source point."""
    if len(matches) == 0:
        return PrecisionResult(0, 0, 0.0, 0, True)
    valid = corr.valid[matches.idx_a]
    src = corr.projected[matches.idx_a[valid]]
    dst = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)[matches.idx_b[valid]]
    dist = np.linalg.norm(src - dst, axis=1)
    tp = int(np.sum(dist <= threshold_px))
    fp = int(valid.sum()) - tp
    n = tp + fp
    return PrecisionResult(tp, fp, tp / n if n else 0.0, int((~valid).sum()), n == 0)


def greedy_assignment(proj_a: np.ndarray, points_b: np.ndarray, threshold_px: float) -> list[tuple[int, int]]:
    """One-to-one pairs within the threshold, taken in ascending distance order."""
    if len(proj_a) == 0 or len(points_b) == 0:
        return []
    d = np.linalg.norm(proj_a[:, None, :] - points_b[None, :, :], axis=2)
    ii, jj = np.nonzero(d <= threshold_px)
    order = np.lexsort((jj, ii, d[ii, jj]))
    used_a, used_b, out = set(), set(), []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j))
    return out


@dataclass
class RepeatabilityResult:
    r_ab: float  # share of valid points of b reproduced from a
    r_ba: float
    mean: float
    degenerate: bool


def _reproduced(corr_src: Correspondences, corr_dst: Correspondences, points_dst: np.ndarray, threshold_px: float) -> tuple[int, int]:
    va = corr_src.valid
    vb = corr_dst.valid
    pairs = greedy_assignment(corr_src.projected[va], np.asarray(points_dst, dtype=np.float64).reshape(-1, 2)[vb], threshold_px)
    return len(pairs), int(vb.sum())


def repeatability(
    points_a: np.ndarray,
    points_b: np.ndarray,
    corr_ab: Correspondences,
    corr_ba: Correspondences,
    threshold_px: float = DEFAULT_THRESHOLD_PX,
) -> RepeatabilityResult:
    """Fraction of points of one image re-detected in the other, both directions.

    Only points whose reprojection into the other image is valid count, on
    either side.  ``corr_ab`` holds the reprojection of ``points_a`` into b.
    """
    hit_b, n_b = _reproduced(corr_ab, corr_ba, points_b, threshold_px)
    hit_a, n_a = _reproduced(corr_ba, corr_ab, points_a, threshold_px)
    r_ab = hit_b / n_b if n_b else 0.0
    r_ba = hit_a / n_a if n_a else 0.0
    return RepeatabilityResult(r_ab, r_ba, (r_ab + r_ba) / 2, n_a == 0 or n_b == 0)


def f1(p: float, r: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    s = p + r
    return 2.0 * p * r / s if s > 0 else 0.0


@dataclass
class PairMetrics:
    precision_ab: float
    precision_ba: float
    precision_mean: float
    repeatability_ab: float
    repeatability_ba: float
    repeatability_mean: float
    f1: float
    tp_ab: int
    fp_ab: int
    tp_ba: int
    fp_ba: int
    n_a: int
    n_b: int
    threshold_px: float = DEFAULT_THRESHOLD_PX
    degenerate: bool = False

    def as_row(self) -> dict:
        return asdict(self)


Mapper = Callable[[np.ndarray], Correspondences]


def evaluate_pair(
    kps_a: KeypointSet,
    kps_b: KeypointSet,
    map_ab: Mapper,
    map_ba: Mapper,
    threshold_px: float = DEFAULT_THRESHOLD_PX,
    mutual: bool = True,
) -> PairMetrics:
    """Matching precision both ways, repeatability both ways, and their F1.

    ``map_ab`` maps pixel points of image a to correspondences in image b.
    """
    pa = np.asarray(kps_a.points, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(kps_b.points, dtype=np.float64).reshape(-1, 2)
    corr_ab, corr_ba = map_ab(pa), map_ba(pb)
    m_ab = match_descriptors(kps_a.descriptors, kps_b.descriptors, mutual)
    m_ba = match_descriptors(kps_b.descriptors, kps_a.descriptors, mutual)
    p_ab = precision(m_ab, corr_ab, pb, threshold_px)
    p_ba = precision(m_ba, corr_ba, pa, threshold_px)
    rep = repeatability(pa, pb, corr_ab, corr_ba, threshold_px)
    p_mean = (p_ab.precision + p_ba.precision) / 2
    return PairMetrics(
        precision_ab=p_ab.precision,
        precision_ba=p_ba.precision,
        precision_mean=p_mean,
        repeatability_ab=rep.r_ab,
        repeatability_ba=rep.r_ba,
        repeatability_mean=rep.mean,
        f1=f1(p_mean, rep.mean),
        tp_ab=p_ab.tp,
        fp_ab=p_ab.fp,
        tp_ba=p_ba.tp,
        fp_ba=p_ba.fp,
        n_a=len(pa),
        n_b=len(pb),
        threshold_px=float(threshold_px),
        degenerate=p_ab.degenerate or p_ba.degenerate or rep.degenerate,
    )


@dataclass
class Aggregate:
    model: str
    n_pairs: int
    precision: float
    repeatability: float
    f1: float
    arithmetic_mean: float
    degenerate_pairs: int = 0
    extra: dict = field(default_factory=dict)


def aggregate(model: str, pairs: Sequence[PairMetrics]) -> Aggregate:
    """Average precision and repeatability over pairs; F1 is taken of the averages."""
    if not pairs:
        return Aggregate(model, 0, 0.0, 0.0, 0.0, 0.0, 0)
    p = float(np.mean([m.precision_mean for m in pairs]))
    r = float(np.mean([m.repeatability_mean for m in pairs]))
    return Aggregate(model, len(pairs), p, r, f1(p, r), (p + r) / 2, sum(m.degenerate for m in pairs))
