"""Procedural lane-network scenes: geometry, BEV rasterization, dataset files.

A scene is a set of constant-curvature lane centerlines with known directed
connectivity (lane i ends exactly where lane j starts), rasterized into
per-lane binary masks and a synthetic BEV feature grid that stands in for
camera-derived features.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import SeededRng

DATASET_VERSION = 1


class GenerationError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass
class LaneInstance:
    """Ordered centerline keypoints (meters, ego frame) with a class label."""

    points: np.ndarray  # (k, 2)
    class_id: int = 0


@dataclass
class BevGrid:
    """H x W grid of feature vectors covering a metric window."""

    features: np.ndarray  # (H, W, D)
    bounds: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max

    @property
    def h(self) -> int:
        return self.features.shape[0]

    @property
    def w(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]


@dataclass
class SyntheticScene:
    lanes: list[LaneInstance]
    adjacency: np.ndarray  # (N, N) binary, row i -> column j means i leads to j
    bev: BevGrid
    gt_masks: np.ndarray  # (N, H, W) uint8
    bounds: tuple[float, float, float, float]
    seed: int
    clipped_cells: int = 0

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)


@dataclass
class GenerationConfig:
    bev_h: int = 32
    bev_w: int = 32
    feat_channels: int = 16
    extent: float = 16.0  # half-size of the square window, meters
    k: int = 11
    roots_min: int = 1
    roots_max: int = 2
    max_lanes: int = 7
    fork_prob: float = 0.7
    merge_prob: float = 0.35
    distractor_prob: float = 0.6
    continue_prob: float = 0.5
    curvature_max: float = 0.05
    seg_len_min: float = 7.0
    seg_len_max: float = 12.0
    margin: float = 2.0
    min_separation: float = 1.5  # endpoints closer than this must be real edges
    mask_width: int = 1
    dist_clip: float = 8.0
    noise_sigma: float = 0.05

    def bounds(self) -> tuple[float, float, float, float]:
        return (-self.extent, -self.extent, self.extent, self.extent)


# -- coordinate conversions ---------------------------------------------------
# Cell (r, c) has its center at x = x_min + (c + 0.5) * cw. Normalized
# sampling coordinates are align-corners: 0 at the center of cell 0 and 1 at
# the center of the last cell, matching autodiff.bilinear_sample.

def meters_to_grid(points: np.ndarray, bounds, h: int, w: int) -> np.ndarray:
    x_min, y_min, x_max, y_max = bounds
    cw = (x_max - x_min) / w
    ch = (y_max - y_min) / h
    out = np.empty_like(np.asarray(points, dtype=np.float64))
    pts = np.asarray(points, dtype=np.float64)
    out[..., 0] = (pts[..., 0] - x_min) / cw - 0.5
    out[..., 1] = (pts[..., 1] - y_min) / ch - 0.5
    return out


def grid_to_meters(grid_pts: np.ndarray, bounds, h: int, w: int) -> np.ndarray:
    x_min, y_min, x_max, y_max = bounds
    cw = (x_max - x_min) / w
    ch = (y_max - y_min) / h
    pts = np.asarray(grid_pts, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = (pts[..., 0] + 0.5) * cw + x_min
    out[..., 1] = (pts[..., 1] + 0.5) * ch + y_min
    return out


def meters_to_norm(points: np.ndarray, bounds, h: int, w: int) -> np.ndarray:
    g = meters_to_grid(points, bounds, h, w)
    g[..., 0] /= (w - 1)
    g[..., 1] /= (h - 1)
    return g


def norm_to_meters(norm_pts: np.ndarray, bounds, h: int, w: int) -> np.ndarray:
    g = np.asarray(norm_pts, dtype=np.float64).copy()
    g[..., 0] *= (w - 1)
    g[..., 1] *= (h - 1)
    return grid_to_meters(g, bounds, h, w)


# -- lane geometry -------------------------------------------------------------

def arc_points(p0, theta0, kappa, length, k) -> np.ndarray:
    """k points uniformly spaced by arc length along a constant-curvature arc."""
    t = np.linspace(0.0, length, k)
    p0 = np.asarray(p0, dtype=np.float64)
    if abs(kappa) < 1e-12:
        pts = p0[None, :] + t[:, None] * np.array([np.cos(theta0), np.sin(theta0)])
    else:
        r = 1.0 / kappa
        cx = p0[0] - r * np.sin(theta0)
        cy = p0[1] + r * np.cos(theta0)
        ang = theta0 + kappa * t
        pts = np.stack([cx + r * np.sin(ang), cy - r * np.cos(ang)], axis=-1)
    pts[0] = p0  # exact, independent of float round trip
    return pts


def arc_end_heading(theta0, kappa, length) -> float:
    return theta0 + kappa * length


def reverse_arc_points(q, theta_end, kappa, length, k) -> np.ndarray:
    """Arc that ends exactly at q with the given end heading and curvature."""
    back = arc_points(q, theta_end + np.pi, -kappa, length, k)
    return back[::-1].copy()


@dataclass
class _Lane:
    points: np.ndarray
    end_heading: float


def _in_bounds(pts: np.ndarray, cfg: GenerationConfig) -> bool:
    lim = cfg.extent - cfg.margin
    return bool(np.all(np.abs(pts) <= lim))


def generate_scene(seed: int, cfg: GenerationConfig) -> SyntheticScene:
    """Build a lane network with known topology and rasterize it.

    The construction is purely rng-driven, so equal (seed, cfg) gives a
    byte-identical scene. When fork_prob > 0 the first expansion is forced
    to be a fork so every such scene contains a lane with out-degree >= 2.
    """
    if cfg.roots_min < 1 or cfg.max_lanes < 1:
        raise GenerationError("scene must contain at least one lane")
    if cfg.roots_max < cfg.roots_min:
        raise GenerationError("roots_max < roots_min")
    if cfg.k < 2:
        raise GenerationError("lanes need at least 2 keypoints")
    if cfg.fork_prob > 0 and cfg.max_lanes < cfg.roots_min + 2:
        raise GenerationError("fork_prob > 0 needs room for two child lanes")

    rng = SeededRng(seed).child("scene")
    for attempt in range(24):
        built = _try_build(rng.child(attempt), cfg)
        if built is not None:
            lanes, edges = built
            break
    else:
        raise GenerationError(f"could not build a valid scene for seed {seed}")

    n = len(lanes)
    adjacency = np.zeros((n, n), dtype=np.float64)
    for i, j in edges:
        adjacency[i, j] = 1.0
    instances = [LaneInstance(points=l.points, class_id=0) for l in lanes]
    masks, bev, clipped = rasterize(instances, cfg, seed)
    return SyntheticScene(lanes=instances, adjacency=adjacency, bev=bev,
                          gt_masks=masks, bounds=cfg.bounds(), seed=int(seed),
                          clipped_cells=clipped)


def _sample_arc(rng, p0, theta, cfg, k):
    kappa = float(rng.uniform(-cfg.curvature_max, cfg.curvature_max))
    length = float(rng.uniform(cfg.seg_len_min, cfg.seg_len_max))
    pts = arc_points(p0, theta, kappa, length, k)
    return pts, arc_end_heading(theta, kappa, length)


def _try_build(rng: SeededRng, cfg: GenerationConfig):
    lanes: list[_Lane] = []
    edges: list[tuple[int, int]] = []
    lim = cfg.extent - cfg.margin

    def add_lane(pts, end_heading) -> int:
        lanes.append(_Lane(points=pts, end_heading=end_heading))
        return len(lanes) - 1

    # roots
    n_roots = int(rng.integers(cfg.roots_min, cfg.roots_max + 1))
    for _ in range(n_roots):
        for _ in range(40):
            p0 = rng.uniform(-lim * 0.7, lim * 0.7, (2,))
            theta = float(rng.uniform(0, 2 * np.pi))
            pts, eh = _sample_arc(rng, p0, theta, cfg, cfg.k)
            if _in_bounds(pts, cfg):
                add_lane(pts, eh)
                break
        else:
            return None

    # grow from open ends; the first event is a fork whenever forks are enabled
    open_ends = list(range(len(lanes)))
    first_event = True
    while open_ends and len(lanes) < cfg.max_lanes:
        parent = open_ends.pop(0)
        p_end = lanes[parent].points[-1]
        p_heading = lanes[parent].end_heading
        do_fork = cfg.fork_prob > 0 and (first_event or rng.random() < cfg.fork_prob)
        first_event = False
        if do_fork and len(lanes) + 2 <= cfg.max_lanes:
            delta = float(rng.uniform(0.3, 0.55))
            ok = []
            for sign in (1.0, -1.0):
                for _ in range(20):
                    pts, eh = _sample_arc(rng, p_end.copy(), p_heading + sign * delta,
                                          cfg, cfg.k)
                    if _in_bounds(pts, cfg):
                        ok.append((pts, eh))
                        break
            if len(ok) == 2:
                for pts, eh in ok:
                    child = add_lane(pts, eh)
                    edges.append((parent, child))
                    open_ends.append(child)
        elif rng.random() < cfg.continue_prob and len(lanes) < cfg.max_lanes:
            for _ in range(20):
                pts, eh = _sample_arc(rng, p_end.copy(), p_heading, cfg, cfg.k)
                if _in_bounds(pts, cfg):
                    child = add_lane(pts, eh)
                    edges.append((parent, child))
                    open_ends.append(child)
                    break

    # merge: add a second incoming lane at the start of an already-linked lane
    if cfg.merge_prob > 0 and edges and rng.random() < cfg.merge_prob \
            and len(lanes) < cfg.max_lanes:
        parent, target = edges[int(rng.integers(0, len(edges)))]
        q = lanes[target].points[0]
        base = lanes[parent].end_heading
        for _ in range(20):
            delta = float(rng.uniform(0.35, 0.7)) * (1 if rng.random() < 0.5 else -1)
            kappa = float(rng.uniform(-cfg.curvature_max, cfg.curvature_max))
            length = float(rng.uniform(cfg.seg_len_min, cfg.seg_len_max))
            pts = reverse_arc_points(q.copy(), base + delta, kappa, length, cfg.k)
            if _in_bounds(pts, cfg):
                lane = add_lane(pts, base + delta)
                edges.append((lane, target))
                break

    # distractor: a parallel near-miss twin of a connected lane (no edge)
    if cfg.distractor_prob > 0 and edges and rng.random() < cfg.distractor_prob \
            and len(lanes) < cfg.max_lanes:
        _, target = edges[int(rng.integers(0, len(edges)))]
        tgt = lanes[target]
        start_heading = np.arctan2(tgt.points[1, 1] - tgt.points[0, 1],
                                   tgt.points[1, 0] - tgt.points[0, 0])
        normal = np.array([-np.sin(start_heading), np.cos(start_heading)])
        for _ in range(20):
            offset = float(rng.uniform(2.0, 4.0)) * (1 if rng.random() < 0.5 else -1)
            p0 = tgt.points[0] + normal * offset
            pts, eh = _sample_arc(rng, p0, start_heading, cfg, cfg.k)
            if _in_bounds(pts, cfg):
                add_lane(pts, eh)
                break

    if cfg.fork_prob > 0:
        out_deg = np.zeros(len(lanes))
        for a, _ in edges:
            out_deg[a] += 1
        if not np.any(out_deg >= 2):
            return None
    if not _endpoints_valid(lanes, edges, cfg):
        return None
    return lanes, edges


def _endpoints_valid(lanes, edges, cfg) -> bool:
    """Edges must coincide exactly; non-edges must stay clearly separated."""
    edge_set = set(edges)
    n = len(lanes)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = float(np.linalg.norm(lanes[i].points[-1] - lanes[j].points[0]))
            if (i, j) in edge_set:
                if d > 1e-9:
                    return False
            elif d < cfg.min_separation:
                return False
    return True


# -- rasterization --------------------------------------------------------------

def rasterize(lanes: list[LaneInstance], cfg: GenerationConfig,
              seed: int) -> tuple[np.ndarray, BevGrid, int]:
    """Per-lane binary masks plus the synthetic BEV feature grid.

    Features per cell: [union mask, clipped+normalized distance transform,
    sine-cosine cell encoding, zero padding] with additive Gaussian noise at
    cfg.noise_sigma. Deterministic: noise comes from the scene seed.
    """
    h, w = cfg.bev_h, cfg.bev_w
    bounds = cfg.bounds()
    masks = np.zeros((len(lanes), h, w), dtype=np.uint8)
    clipped = 0
    half_w = max(cfg.mask_width, 1) / 2.0
    for li, lane in enumerate(lanes):
        dense = _densify(lane.points, step=0.2)
        g = meters_to_grid(dense, bounds, h, w)
        if cfg.mask_width <= 1:
            cells = np.round(g).astype(np.int64)
            inside = (cells[:, 0] >= 0) & (cells[:, 0] < w) & \
                     (cells[:, 1] >= 0) & (cells[:, 1] < h)
            clipped += int((~inside).sum())
            cells = cells[inside]
            masks[li, cells[:, 1], cells[:, 0]] = 1
        else:
            for gx, gy in g:
                c0 = int(np.floor(gx - half_w))
                c1 = int(np.ceil(gx + half_w))
                r0 = int(np.floor(gy - half_w))
                r1 = int(np.ceil(gy + half_w))
                for r in range(r0, r1 + 1):
                    for c in range(c0, c1 + 1):
                        if not (0 <= r < h and 0 <= c < w):
                            clipped += 1
                            continue
                        if (r - gy) ** 2 + (c - gx) ** 2 <= half_w ** 2:
                            masks[li, r, c] = 1

    union = masks.any(axis=0)
    if union.any():
        dist = ndimage.distance_transform_edt(~union)
    else:
        dist = np.full((h, w), cfg.dist_clip, dtype=np.float64)
    dist = np.clip(dist, 0.0, cfg.dist_clip) / cfg.dist_clip

    from .nn import sincos_grid  # local import to avoid cycle at module load
    d = cfg.feat_channels
    pe_d = max(((d - 2) // 4) * 4, 0)
    feats = np.zeros((h, w, d), dtype=np.float64)
    feats[:, :, 0] = union.astype(np.float64)
    feats[:, :, 1] = dist
    if pe_d > 0:
        feats[:, :, 2:2 + pe_d] = sincos_grid(h, w, pe_d).reshape(h, w, pe_d)
    if cfg.noise_sigma > 0:
        noise_rng = SeededRng(seed).child("raster")
        feats = feats + noise_rng.normal((h, w, d), std=cfg.noise_sigma)
    return masks, BevGrid(features=feats, bounds=bounds), clipped


def _densify(points: np.ndarray, step: float) -> np.ndarray:
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        seg = np.linalg.norm(b - a)
        n = max(int(np.ceil(seg / step)), 1)
        for t in range(1, n + 1):
            out.append(a + (b - a) * (t / n))
    return np.asarray(out)


# -- dataset files ----------------------------------------------------------------

def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii")


def _unb64(s: str, dtype, shape, what: str, path) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"))
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DatasetError(f"{path}: {what} payload has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def scene_to_record(scene: SyntheticScene) -> dict:
    return {
        "version": DATASET_VERSION,
        "seed": scene.seed,
        "bounds": list(scene.bounds),
        "lanes": [{"points": lane.points.tolist(), "class_id": lane.class_id}
                  for lane in scene.lanes],
        "adjacency": scene.adjacency.tolist(),
        "masks_shape": list(scene.gt_masks.shape),
        "masks_b64": _b64(scene.gt_masks.astype("<u1")),
        "features_shape": list(scene.bev.features.shape),
        "features_b64": _b64(scene.bev.features.astype("<f8")),
        "clipped_cells": scene.clipped_cells,
    }


def record_to_scene(rec: dict, path="<record>") -> SyntheticScene:
    if rec.get("version") != DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported record version {rec.get('version')}")
    bounds = tuple(float(v) for v in rec["bounds"])
    lanes = [LaneInstance(points=np.asarray(l["points"], dtype=np.float64),
                          class_id=int(l["class_id"])) for l in rec["lanes"]]
    adjacency = np.asarray(rec["adjacency"], dtype=np.float64)
    masks = _unb64(rec["masks_b64"], "<u1", rec["masks_shape"], "masks", path)
    feats = _unb64(rec["features_b64"], "<f8", rec["features_shape"], "features", path)
    return SyntheticScene(lanes=lanes, adjacency=adjacency,
                          bev=BevGrid(features=feats, bounds=bounds),
                          gt_masks=masks, bounds=bounds, seed=int(rec["seed"]),
                          clipped_cells=int(rec.get("clipped_cells", 0)))


def write_dataset(scenes: list[SyntheticScene], path, params: dict,
                  splits: dict[str, list[int]] | None = None):
    """One manifest plus one JSON record per scene; bit-exact round trip."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = {"train": list(range(len(scenes)))}
    manifest = {
        "version": DATASET_VERSION,
        "params": params,
        "scene_count": len(scenes),
        "seeds": [s.seed for s in scenes],
        "splits": {k: list(map(int, v)) for k, v in splits.items()},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    for i, scene in enumerate(scenes):
        rec = scene_to_record(scene)
        (path / f"scene_{i:05d}.json").write_text(json.dumps(rec, sort_keys=True))


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise DatasetError(f"{mf}: manifest not found")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mf}: corrupt manifest at offset {e.pos}: {e.msg}")
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"{mf}: unsupported dataset version {manifest.get('version')}")
    return manifest


def read_dataset(path, split: str | None = None) -> list[SyntheticScene]:
    path = Path(path)
    manifest = read_manifest(path)
    if split is None:
        indices = list(range(manifest["scene_count"]))
    else:
        if split not in manifest["splits"]:
            raise DatasetError(f"{path}: split {split!r} not in manifest")
        indices = manifest["splits"][split]
    scenes = []
    for i in indices:
        rec_path = path / f"scene_{i:05d}.json"
        if not rec_path.exists():
            raise DatasetError(f"{rec_path}: record file missing")
        try:
            rec = json.loads(rec_path.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"{rec_path}: corrupt record at offset {e.pos}: {e.msg}")
        scenes.append(record_to_scene(rec, path=str(rec_path)))
    return scenes


def dataset_hash(path) -> str:
    """Stable content hash over the manifest and every record file."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(path.glob("*.json")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()
