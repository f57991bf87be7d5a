"""Lane detection and topology metrics: Fréchet matching, APs, OLS aggregate.

DET_l: predictions are greedily matched to ground truth by discrete Fréchet
distance under each threshold, and average precision of the score-ranked
prediction list is averaged over thresholds. TOP_ll: directed edge scores
between matched lanes are ranked per scene and scored against the ground
truth adjacency; scene APs are averaged. Traffic-element scores (DET_t,
TOP_lt) are supplied externally, never computed here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLDS = (1.0, 2.0, 3.0)


class MetricError(ValueError):
    pass


@dataclass
class PredictionSet:
    """Per-scene predictions: N lanes with scores and dense edge scores."""

    keypoints: np.ndarray  # (N, k, 2) meters
    scores: np.ndarray  # (N,)
    edge_scores: np.ndarray  # (N, N) combined directed connectivity scores

    @property
    def n(self) -> int:
        return self.keypoints.shape[0]


def discrete_frechet(p: np.ndarray, q: np.ndarray) -> float:
    """Discrete Fréchet distance between two polylines (Euclidean ground metric)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.size == 0 or q.size == 0:
        raise MetricError("discrete_frechet: empty polyline")
    n, m = len(p), len(q)
    diff = p[:, None, :] - q[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    ca = np.empty((n, m))
    ca[0, 0] = d[0, 0]
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], d[0, j])
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], d[i, 0])
        for j in range(1, m):
            ca[i, j] = max(min(ca[i - 1, j], ca[i - 1, j - 1], ca[i, j - 1]), d[i, j])
    return float(ca[n - 1, m - 1])


def average_precision(flags: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP of a ranked TP/FP flag list."""
    if n_gt <= 0:
        raise MetricError("average_precision: n_gt must be positive")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    precision = tp / ranks
    recall = tp / n_gt
    # precision envelope from the right, then sum recall increments
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for i in range(flags.size):
        if flags[i]:
            ap += (recall[i] - prev_r) * env[i]
            prev_r = recall[i]
    return float(ap)


def _ranked_order(scores: np.ndarray, scene_ids: np.ndarray) -> np.ndarray:
    """Descending score; ties broken by ascending (scene, prediction) index."""
    idx = np.arange(scores.size)
    return np.array(sorted(idx, key=lambda i: (-scores[i], scene_ids[i], i)),
                    dtype=np.int64)


@dataclass
class DetectionResult:
    det_l: float
    per_threshold: dict[float, float]
    # per threshold: list over scenes of {pred_index: gt_index}
    matchings: dict[float, list[dict[int, int]]]


def _greedy_match_scene(frechet: np.ndarray, order: np.ndarray,
                        threshold: float) -> dict[int, int]:
    """Match each prediction (in rank order) to the nearest free GT under threshold."""
    matched: dict[int, int] = {}
    used_gt: set[int] = set()
    for pi in order:
        row = frechet[pi]
        best_gt, best_d = -1, np.inf
        for gi in range(row.size):
            if gi in used_gt:
                continue
            if row[gi] < threshold and row[gi] < best_d:
                best_gt, best_d = gi, row[gi]
        if best_gt >= 0:
            matched[int(pi)] = best_gt
            used_gt.add(best_gt)
    return matched


def det_l_full(preds: list[PredictionSet], gts,
               thresholds=DEFAULT_THRESHOLDS) -> DetectionResult:
    thresholds = tuple(sorted(thresholds))
    n_gt_total = sum(len(gt.lanes) for gt in gts)
    n_pred_total = sum(p.n for p in preds)
    if n_gt_total == 0:
        value = 1.0 if n_pred_total == 0 else 0.0
        return DetectionResult(det_l=value,
                               per_threshold={t: value for t in thresholds},
                               matchings={t: [{} for _ in gts] for t in thresholds})

    # pairwise Fréchet matrices and per-scene rank orders, shared by thresholds
    frechets = []
    scene_orders = []
    for pred, gt in zip(preds, gts):
        mat = np.empty((pred.n, len(gt.lanes)))
        for i in range(pred.n):
            for j, lane in enumerate(gt.lanes):
                mat[i, j] = discrete_frechet(pred.keypoints[i], lane.points)
        frechets.append(mat)
        order = sorted(range(pred.n), key=lambda i: (-pred.scores[i], i))
        scene_orders.append(np.array(order, dtype=int))

    all_scores = np.concatenate([p.scores for p in preds]) if preds else np.array([])
    scene_ids = np.concatenate([np.full(p.n, si) for si, p in enumerate(preds)]) \
        if preds else np.array([])
    pooled = _ranked_order(all_scores, scene_ids)
    offsets = np.cumsum([0] + [p.n for p in preds])

    per_threshold = {}
    matchings = {}
    for thr in thresholds:
        scene_matches = [_greedy_match_scene(frechets[si], scene_orders[si], thr)
                         for si in range(len(preds))]
        flags = np.zeros(all_scores.size, dtype=bool)
        for si, matched in enumerate(scene_matches):
            for pi in matched:
                flags[offsets[si] + pi] = True
        per_threshold[thr] = average_precision(flags[pooled], n_gt_total)
        matchings[thr] = scene_matches
    det = float(np.mean([per_threshold[t] for t in thresholds]))
    return DetectionResult(det_l=det, per_threshold=per_threshold, matchings=matchings)


@dataclass
class TopologyResult:
    top_ll: float
    per_scene: list[float]


def top_ll_full(preds: list[PredictionSet], gts,
                matchings: list[dict[int, int]], theta: float = 1.0) -> TopologyResult:
    """Edge AP per scene over matched lane pairs, averaged across scenes.

    Pairs with zero score are treated as unpredicted. A scene without ground
    truth edges scores 1.0 when nothing is predicted at or above theta.
    """
    per_scene = []
    for pred, gt, matched in zip(preds, gts, matchings):
        adj = np.asarray(gt.adjacency)
        n_edges = int(adj.sum())
        candidates = []  # (score, pred_i, pred_j, is_tp)
        for i in matched:
            for j in matched:
                if i == j:
                    continue
                s = float(pred.edge_scores[i, j])
                if s <= 0.0:
                    continue
                is_tp = adj[matched[i], matched[j]] == 1.0
                candidates.append((s, i, j, is_tp))
        if n_edges == 0:
            above = any(c[0] >= theta for c in candidates)
            per_scene.append(0.0 if above else 1.0)
            continue
        if not candidates:
            per_scene.append(0.0)
            continue
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        flags = np.array([c[3] for c in candidates], dtype=bool)
        per_scene.append(average_precision(flags, n_edges))
    value = float(np.mean(per_scene)) if per_scene else 0.0
    return TopologyResult(top_ll=value, per_scene=per_scene)


def ols(det_l: float, det_t: float, top_ll: float, top_lt: float) -> float:
    """Aggregate score: mean of the DET terms and square roots of the TOP terms."""
    for name, v in (("det_l", det_l), ("det_t", det_t),
                    ("top_ll", top_ll), ("top_lt", top_lt)):
        if not 0.0 <= v <= 1.0:
            raise MetricError(f"ols: {name}={v} outside [0, 1]")
    return 0.25 * (det_l + det_t + np.sqrt(top_ll) + np.sqrt(top_lt))


@dataclass
class MetricReport:
    det_l: float
    top_ll: float
    det_t: float  # supplied, not computed
    top_lt: float  # supplied, not computed
    ols: float
    per_threshold: dict[float, float] = field(default_factory=dict)
    per_scene_top_ll: list[float] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    dataset_hash: str = ""

    def to_json(self) -> str:
        payload = {
            "det_l": self.det_l,
            "top_ll": self.top_ll,
            "det_t_supplied": self.det_t,
            "top_lt_supplied": self.top_lt,
            "ols": self.ols,
            "per_threshold_det_l": {f"{k:g}": v for k, v in self.per_threshold.items()},
            "per_scene_top_ll": self.per_scene_top_ll,
            "config": self.config_echo,
            "dataset_hash": self.dataset_hash,
        }
        return json.dumps(payload, sort_keys=True, indent=1)


def build_report(preds, gts, det_t: float, top_lt: float, theta: float = 1.0,
                 thresholds=DEFAULT_THRESHOLDS, config_echo=None,
                 dataset_hash: str = "") -> MetricReport:
    det = det_l_full(preds, gts, thresholds)
    mid = tuple(sorted(thresholds))[len(thresholds) // 2]
    top = top_ll_full(preds, gts, det.matchings[mid], theta=theta)
    return MetricReport(det_l=det.det_l, top_ll=top.top_ll, det_t=det_t,
                        top_lt=top_lt,
                        ols=ols(det.det_l, det_t, top.top_ll, top_lt),
                        per_threshold=det.per_threshold,
                        per_scene_top_ll=top.per_scene,
                        config_echo=config_echo or {},
                        dataset_hash=dataset_hash)
