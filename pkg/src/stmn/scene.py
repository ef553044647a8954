"""Point-cloud scenes, superpoint over-segmentation and pooling.

A scene is N_p points with positions, RGB+normal auxiliaries and per-point
instance/category labels.  Superpoints are produced by greedy region growing
over the k-NN graph; pooling averages per-point features within each cell and
its backward splits gradient mass equally among members.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import (Tensor, as_tensor, concat, gather_rows, relu,
                       segment_sum, uniform_init, _make)

SCENE_FORMAT = 1
SUPERPOINT_FORMAT = 1


@dataclass
class PointCloudScene:
    positions: np.ndarray          # (N_p, 3) meters
    aux: np.ndarray                # (N_p, 6) RGB in [0,1] + unit normals
    instance_id: np.ndarray        # (N_p,) int, contiguous from 0
    category_id: np.ndarray        # (N_p,) int
    scene_id: str
    objects: list = field(default_factory=list)

    @property
    def n_points(self):
        return self.positions.shape[0]

    def validate(self):
        n = self.n_points
        if n < 1:
            raise ValueError("scene must contain at least one point")
        norms = np.linalg.norm(self.aux[:, 3:6], axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("normal rows must have unit Euclidean norm")
        ids = np.unique(self.instance_id)
        if not np.array_equal(ids, np.arange(ids.size)):
            raise ValueError("instance ids must be contiguous from 0")

    def to_json(self):
        return {
            "format": SCENE_FORMAT,
            "scene_id": self.scene_id,
            "n_points": int(self.n_points),
            "positions": [round(float(v), 6) for v in self.positions.reshape(-1)],
            "aux": [round(float(v), 6) for v in self.aux.reshape(-1)],
            "instance_id": [int(v) for v in self.instance_id],
            "category_id": [int(v) for v in self.category_id],
            "objects": self.objects,
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("format") != SCENE_FORMAT:
            raise ValueError(f"unsupported scene format {doc.get('format')!r}")
        n = int(doc["n_points"])
        scene = cls(
            positions=np.asarray(doc["positions"], dtype=np.float64).reshape(n, 3),
            aux=np.asarray(doc["aux"], dtype=np.float64).reshape(n, 6),
            instance_id=np.asarray(doc["instance_id"], dtype=np.int64),
            category_id=np.asarray(doc["category_id"], dtype=np.int64),
            scene_id=doc["scene_id"],
            objects=doc.get("objects", []),
        )
        # rounded JSON floats denormalize the stored normals slightly
        norms = np.linalg.norm(scene.aux[:, 3:6], axis=1, keepdims=True)
        scene.aux[:, 3:6] /= np.where(norms > 0, norms, 1.0)
        return scene

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class SuperpointPartition:
    assignment: np.ndarray         # (N_p,) superpoint index per point
    cells: list                    # list of point-index arrays

    @property
    def count(self):
        return len(self.cells)

    @classmethod
    def from_assignment(cls, assignment):
        assignment = np.asarray(assignment, dtype=np.int64)
        n_cells = int(assignment.max()) + 1 if assignment.size else 0
        cells = [np.flatnonzero(assignment == i) for i in range(n_cells)]
        return cls(assignment=assignment, cells=cells)

    def validate(self):
        n = self.assignment.shape[0]
        seen = np.zeros(n, dtype=bool)
        for i, cell in enumerate(self.cells):
            if cell.size == 0:
                raise ValueError(f"superpoint {i} is empty")
            if seen[cell].any():
                raise ValueError("superpoint cells overlap")
            seen[cell] = True
            if not np.all(self.assignment[cell] == i):
                raise ValueError("assignment and cells disagree")
        if not seen.all():
            raise ValueError("superpoint cells do not cover every point")

    def sizes(self):
        return np.array([c.size for c in self.cells], dtype=np.float64)

    def save(self, path, scene_id):
        doc = {
            "format": SUPERPOINT_FORMAT,
            "scene_id": scene_id,
            "assignment": [int(v) for v in self.assignment],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != SUPERPOINT_FORMAT:
            raise ValueError(f"unsupported superpoint format {doc.get('format')!r}")
        return cls.from_assignment(doc["assignment"])


def knn_indices(positions, k):
    """Indices of the k nearest points (self included), deterministic order."""
    n = positions.shape[0]
    k = min(k, n)
    tree = cKDTree(positions)
    _, idx = tree.query(positions, k=k)
    if k == 1:
        idx = idx[:, None]
    return idx


def build_superpoints(scene, knn=8, spatial_w=1.0, color_w=1.0, normal_w=0.5,
                      threshold=0.12, max_cell=400):
    """Greedy region growing on the k-NN graph.

    Two neighbors join the same region when their weighted dissimilarity
    (spatial distance, RGB distance, normal misalignment) stays under
    ``threshold``; regions are split once they reach ``max_cell`` points.
    With a large ``max_cell`` the cells are exactly the connected components
    of the thresholded graph.
    """
    if knn < 1:
        raise ValueError("knn must be >= 1")
    pos = scene.positions
    rgb = scene.aux[:, :3]
    nrm = scene.aux[:, 3:6]
    n = pos.shape[0]

    idx = knn_indices(pos, knn + 1)  # first column is the point itself
    k_eff = idx.shape[1] - 1
    src = np.repeat(np.arange(n), k_eff)
    dst = idx[:, 1:].reshape(-1)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    d_spatial = np.linalg.norm(pos[src] - pos[dst], axis=1)
    d_color = np.linalg.norm(rgb[src] - rgb[dst], axis=1)
    d_normal = 1.0 - np.abs(np.sum(nrm[src] * nrm[dst], axis=1))
    weight = spatial_w * d_spatial + color_w * d_color + normal_w * d_normal
    ok = weight <= threshold
    neighbors = [[] for _ in range(n)]
    for i, j in zip(src[ok], dst[ok]):
        neighbors[i].append(int(j))
        neighbors[j].append(int(i))

    assignment = np.full(n, -1, dtype=np.int64)
    next_cell = 0
    for seed in range(n):
        if assignment[seed] >= 0:
            continue
        queue = deque([seed])
        assignment[seed] = next_cell
        size = 1
        while queue:
            cur = queue.popleft()
            for j in sorted(neighbors[cur]):
                if assignment[j] >= 0:
                    continue
                if size >= max_cell:
                    queue.clear()
                    break
                assignment[j] = next_cell
                size += 1
                queue.append(j)
        next_cell += 1
    return SuperpointPartition.from_assignment(assignment)


def superpoint_pool(features, partition):
    """Average the feature rows of each superpoint (Tensor -> Tensor).

    Backward distributes the incoming gradient equally (1/|cell|) over the
    member points, conserving per-column gradient mass.
    """
    features = as_tensor(features)
    if features.data.shape[0] != partition.assignment.shape[0]:
        raise ValueError(
            f"feature rows {features.data.shape[0]} != partition points "
            f"{partition.assignment.shape[0]}")
    assignment = partition.assignment
    sizes = partition.sizes()
    n_s = partition.count
    pooled = np.zeros((n_s, features.data.shape[1]))
    np.add.at(pooled, assignment, features.data)
    pooled /= sizes[:, None]

    def vjp(g):
        return (g[assignment] / sizes[assignment][:, None],)

    return _make(pooled, (features,), vjp)


def pool_gt_mask(point_mask, partition):
    """Binarize the pooled mask: positive iff the cell fraction exceeds 0.5.

    The threshold is strict, so a 50/50 cell counts as background.
    """
    point_mask = np.asarray(point_mask, dtype=np.float64)
    if point_mask.shape[0] != partition.assignment.shape[0]:
        raise ValueError("mask length does not match partition")
    sums = np.bincount(partition.assignment, weights=point_mask,
                       minlength=partition.count)
    frac = sums / partition.sizes()
    return (frac > 0.5).astype(np.float64)


def expand_mask(sp_mask, partition):
    """Broadcast a per-superpoint vector back to points."""
    sp_mask = np.asarray(sp_mask, dtype=np.float64)
    if sp_mask.shape[0] != partition.count:
        raise ValueError("superpoint mask length does not match partition")
    return sp_mask[partition.assignment]


class PointEncoder:
    """Two-layer MLP over (position, aux) with one k-NN mean-aggregation hop.

    Stands in for a full sparse-convolutional backbone at desk scale: the
    first layer lifts raw point attributes, the aggregation hop mixes local
    context, the second layer fuses both.  The last output channel is pinned
    to 1 (homogeneous coordinate): downstream bilinear response maps read it
    as a learnable per-kernel bias, without which their sigmoids cannot
    calibrate around the mask threshold.
    """

    def __init__(self, c_p, knn=8, rng=None):
        if c_p < 2:
            raise ValueError("encoder width must be at least 2")
        rng = rng or np.random.default_rng(0)
        self.c_p = c_p
        self.knn = knn
        in_dim = 9  # 3 position + 6 aux
        self.w1 = Tensor(uniform_init(rng, (in_dim, c_p)), requires_grad=True)
        self.b1 = Tensor(np.zeros((1, c_p)), requires_grad=True)
        self.w2 = Tensor(uniform_init(rng, (2 * c_p, c_p - 1)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros((1, c_p - 1)), requires_grad=True)
        # color-informed first layer: the three RGB inputs pass through
        # strongly at start, so appearance is linearly available to the
        # matching decoder from the first epoch instead of after a long
        # feature-discovery phase
        for c in range(3):
            self.w1.data[3 + c, :] = 0.0
            self.w1.data[3 + c, c] = 4.0

    def parameters(self):
        return {"encoder.w1": self.w1, "encoder.b1": self.b1,
                "encoder.w2": self.w2, "encoder.b2": self.b2}

    def encode(self, scene, neighbor_idx=None):
        """Per-point features, shape (N_p, C_p)."""
        if neighbor_idx is None:
            neighbor_idx = knn_indices(scene.positions, self.knn)
        x = Tensor(np.concatenate([scene.positions, scene.aux], axis=1))
        h = relu(x @ self.w1 + self.b1)
        n, k = neighbor_idx.shape
        flat = neighbor_idx.reshape(-1)
        gathered = gather_rows(h, flat)
        seg = np.repeat(np.arange(n), k)
        agg = segment_sum(gathered, seg, n) * (1.0 / k)
        out = relu(concat([h, agg], axis=1) @ self.w2 + self.b2)
        return concat([out, Tensor(np.ones((n, 1)))], axis=1)

