"""Synthetic scene and referring-expression generation.

Scenes are axis-aligned rooms (floor + four walls) containing colored boxes
and cylinders sampled on their surfaces; expressions come from a small
template grammar whose dependency parses are hand-built, so every record
ships with an exact parse and an exact target mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .language import Expression
from .scene import PointCloudScene


class GenerationError(RuntimeError):
    """Raised when placement or description retries are exhausted."""


CATEGORIES = ["chair", "table", "sofa", "lamp", "box", "cabinet"]

# Visually grounded shape signatures: every category has a distinctive
# geometry (kind, footprint range, height range) so that category words are
# inferable from the point cloud, not just from color.
CATEGORY_SHAPES = {
    "chair": {"kind": "box", "foot": (0.45, 0.60), "depth": (0.45, 0.60),
              "height": (0.80, 0.95)},
    "table": {"kind": "box", "foot": (1.10, 1.40), "depth": (0.70, 0.90),
              "height": (0.68, 0.78)},
    "sofa": {"kind": "box", "foot": (1.50, 1.90), "depth": (0.80, 1.00),
             "height": (0.50, 0.62)},
    "lamp": {"kind": "cylinder", "foot": (0.24, 0.36), "depth": (0.24, 0.36),
             "height": (1.50, 1.80)},
    "box": {"kind": "box", "foot": (0.35, 0.55), "depth": (0.35, 0.55),
            "height": (0.25, 0.40)},
    "cabinet": {"kind": "box", "foot": (0.80, 1.10), "depth": (0.40, 0.55),
                "height": (1.70, 2.00)},
}

COLORS = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.15, 0.72, 0.22),
    "blue": (0.16, 0.25, 0.85),
    "yellow": (0.92, 0.85, 0.15),
    "purple": (0.58, 0.18, 0.70),
    "orange": (0.95, 0.55, 0.10),
}

ROOM_CATEGORY = "room"


@dataclass
class SceneConfig:
    n_points: int = 2048
    room_size: tuple = (6.0, 6.0, 3.0)
    n_objects: tuple = (2, 4)
    categories: list = field(default_factory=lambda: list(CATEGORIES))
    colors: dict = field(default_factory=lambda: dict(COLORS))
    room_point_share: float = 0.45
    color_noise: float = 0.03
    max_retries: int = 50

    def category_ids(self):
        """Stable category-name -> id map; id 0 is the room shell."""
        return {ROOM_CATEGORY: 0, **{c: i + 1 for i, c in enumerate(self.categories)}}


@dataclass
class _Shape:
    kind: str          # "box" | "cylinder"
    center: np.ndarray  # footprint center (x, y)
    size: np.ndarray    # box: (sx, sy, sz); cylinder: (r, r, h)

    def aabb(self):
        half = self.size[:2] / 2.0
        return (self.center - half, self.center + half)

    def area(self):
        sx, sy, sz = self.size
        if self.kind == "box":
            return 2 * sz * (sx + sy) + sx * sy  # four sides + top
        r, h = sx / 2.0, sz
        return 2 * np.pi * r * h + np.pi * r * r  # side + top


def _sample_box(rng, shape, n):
    """Points on a box's top and four side faces with outward normals."""
    sx, sy, sz = shape.size
    cx, cy = shape.center
    faces = [
        ("top", sx * sy), ("x-", sy * sz), ("x+", sy * sz),
        ("y-", sx * sz), ("y+", sx * sz),
    ]
    counts = _allocate(n, [a for _, a in faces])
    pts, nrm = [], []
    for (name, _), cnt in zip(faces, counts):
        if cnt == 0:
            continue
        u = rng.uniform(-0.5, 0.5, size=(cnt, 2))
        if name == "top":
            p = np.column_stack([cx + u[:, 0] * sx, cy + u[:, 1] * sy,
                                 np.full(cnt, sz)])
            v = np.tile([0.0, 0.0, 1.0], (cnt, 1))
        elif name in ("x-", "x+"):
            sign = -1.0 if name == "x-" else 1.0
            p = np.column_stack([np.full(cnt, cx + sign * sx / 2),
                                 cy + u[:, 0] * sy, (u[:, 1] + 0.5) * sz])
            v = np.tile([sign, 0.0, 0.0], (cnt, 1))
        else:
            sign = -1.0 if name == "y-" else 1.0
            p = np.column_stack([cx + u[:, 0] * sx,
                                 np.full(cnt, cy + sign * sy / 2),
                                 (u[:, 1] + 0.5) * sz])
            v = np.tile([0.0, sign, 0.0], (cnt, 1))
        pts.append(p)
        nrm.append(v)
    return np.vstack(pts), np.vstack(nrm)


def _sample_cylinder(rng, shape, n):
    r = shape.size[0] / 2.0
    h = shape.size[2]
    cx, cy = shape.center
    side_area = 2 * np.pi * r * h
    top_area = np.pi * r * r
    n_side, n_top = _allocate(n, [side_area, top_area])
    pts, nrm = [], []
    if n_side:
        theta = rng.uniform(0, 2 * np.pi, n_side)
        z = rng.uniform(0, h, n_side)
        pts.append(np.column_stack([cx + r * np.cos(theta),
                                    cy + r * np.sin(theta), z]))
        nrm.append(np.column_stack([np.cos(theta), np.sin(theta),
                                    np.zeros(n_side)]))
    if n_top:
        rad = r * np.sqrt(rng.uniform(0, 1, n_top))
        theta = rng.uniform(0, 2 * np.pi, n_top)
        pts.append(np.column_stack([cx + rad * np.cos(theta),
                                    cy + rad * np.sin(theta),
                                    np.full(n_top, h)]))
        nrm.append(np.tile([0.0, 0.0, 1.0], (n_top, 1)))
    return np.vstack(pts), np.vstack(nrm)


def _sample_room(rng, config, n):
    """Floor plus four walls; normals point into the room."""
    w, d, h = config.room_size
    panels = [
        ("floor", w * d), ("wx-", d * h), ("wx+", d * h),
        ("wy-", w * h), ("wy+", w * h),
    ]
    counts = _allocate(n, [a for _, a in panels])
    pts, nrm, col = [], [], []
    shades = {"floor": 0.62, "wx-": 0.86, "wx+": 0.86, "wy-": 0.86, "wy+": 0.86}
    for (name, _), cnt in zip(panels, counts):
        if cnt == 0:
            continue
        u = rng.uniform(0, 1, size=(cnt, 2))
        if name == "floor":
            p = np.column_stack([u[:, 0] * w, u[:, 1] * d, np.zeros(cnt)])
            v = np.tile([0.0, 0.0, 1.0], (cnt, 1))
        elif name == "wx-":
            p = np.column_stack([np.zeros(cnt), u[:, 0] * d, u[:, 1] * h])
            v = np.tile([1.0, 0.0, 0.0], (cnt, 1))
        elif name == "wx+":
            p = np.column_stack([np.full(cnt, w), u[:, 0] * d, u[:, 1] * h])
            v = np.tile([-1.0, 0.0, 0.0], (cnt, 1))
        elif name == "wy-":
            p = np.column_stack([u[:, 0] * w, np.zeros(cnt), u[:, 1] * h])
            v = np.tile([0.0, 1.0, 0.0], (cnt, 1))
        else:
            p = np.column_stack([u[:, 0] * w, np.full(cnt, d), u[:, 1] * h])
            v = np.tile([0.0, -1.0, 0.0], (cnt, 1))
        pts.append(p)
        nrm.append(v)
        col.append(np.full((cnt, 3), shades[name]))
    return np.vstack(pts), np.vstack(nrm), np.vstack(col)


def _allocate(total, weights):
    """Largest-remainder split of ``total`` items proportional to weights."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    rem = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def generate_scene(config, seed):
    """Build one deterministic scene; returns (scene, object records)."""
    rng = np.random.default_rng(seed)
    w, d, _ = config.room_size
    cat_ids = config.category_ids()

    for _ in range(config.max_retries):
        n_obj = int(rng.integers(config.n_objects[0], config.n_objects[1] + 1))
        shapes, cats, cols = [], [], []
        # colors are drawn without replacement inside a scene, so color plus
        # category always pins down a single object
        palette = list(rng.permutation(sorted(config.colors)))
        ok = True
        for _ in range(n_obj):
            placed = False
            for _ in range(config.max_retries):
                category = str(rng.choice(config.categories))
                sig = CATEGORY_SHAPES[category]
                kind = sig["kind"]
                size = np.array([
                    rng.uniform(*sig["foot"]),
                    rng.uniform(*sig["depth"]),
                    rng.uniform(*sig["height"]),
                ])
                if kind == "cylinder":
                    size[1] = size[0]
                margin = 0.4
                center = np.array([
                    rng.uniform(size[0] / 2 + margin, w - size[0] / 2 - margin),
                    rng.uniform(size[1] / 2 + margin, d - size[1] / 2 - margin),
                ])
                cand = _Shape(kind, center, size)
                lo, hi = cand.aabb()
                clash = False
                for other in shapes:
                    olo, ohi = other.aabb()
                    if np.all(lo - 0.25 < ohi) and np.all(olo - 0.25 < hi):
                        clash = True
                        break
                if not clash:
                    shapes.append(cand)
                    cats.append(category)
                    cols.append(palette[(len(shapes) - 1) % len(palette)])
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok and shapes:
            break
    else:
        raise GenerationError(
            f"could not place objects after {config.max_retries} retries (seed {seed})")

    n_room = max(1, int(round(config.n_points * config.room_point_share)))
    n_obj_pts = config.n_points - n_room
    areas = [s.area() for s in shapes]
    per_obj = _allocate(n_obj_pts, areas)
    per_obj = np.maximum(per_obj, 1)
    while per_obj.sum() > n_obj_pts:  # keep the exact total after the floor
        per_obj[np.argmax(per_obj)] -= 1
    n_room = config.n_points - int(per_obj.sum())

    room_p, room_n, room_c = _sample_room(rng, config, n_room)
    positions = [room_p]
    normals = [room_n]
    colors = [room_c]
    inst = [np.zeros(n_room, dtype=np.int64)]
    cat = [np.full(n_room, cat_ids[ROOM_CATEGORY], dtype=np.int64)]
    records = []
    for i, (shape, c_name, col_name) in enumerate(zip(shapes, cats, cols)):
        cnt = int(per_obj[i])
        sampler = _sample_box if shape.kind == "box" else _sample_cylinder
        p, v = sampler(rng, shape, cnt)
        base = np.asarray(config.colors[col_name])
        c = np.clip(base + rng.uniform(-config.color_noise, config.color_noise,
                                       size=(cnt, 3)), 0.0, 1.0)
        positions.append(p)
        normals.append(v)
        colors.append(c)
        inst.append(np.full(cnt, i + 1, dtype=np.int64))
        cat.append(np.full(cnt, cat_ids[c_name], dtype=np.int64))
        records.append({
            "instance": i + 1,
            "category": c_name,
            "color": col_name,
            "center": [round(float(shape.center[0]), 4),
                       round(float(shape.center[1]), 4)],
            "relations": [],
        })

    # nearest-neighbor relations between objects
    centers = np.array([s.center for s in shapes])
    for i, rec in enumerate(records):
        if len(records) < 2:
            break
        dists = np.linalg.norm(centers - centers[i], axis=1)
        dists[i] = np.inf
        j = int(np.argmin(dists))
        rec["relations"].append({
            "type": "near",
            "target": records[j]["instance"],
            "target_category": records[j]["category"],
        })

    scene = PointCloudScene(
        positions=np.vstack(positions),
        aux=np.hstack([np.vstack(colors), np.vstack(normals)]),
        instance_id=np.concatenate(inst),
        category_id=np.concatenate(cat),
        scene_id=f"scene{seed:06d}",
        objects=records,
    )
    scene.validate()
    return scene, records


# -- expression templates -----------------------------------------------------
# Each template pairs a surface form with a hand-built dependency parse.
# Heads are 1-based within a sentence, 0 marks the sentence root.

def _t_flat(color, cat, cat2):
    return [[("the", 3, "det"), (color, 3, "amod"), (cat, 0, "root")]]


def _t_near(color, cat, cat2):
    return [[("the", 3, "det"), (color, 3, "amod"), (cat, 0, "root"),
             ("near", 6, "case"), ("the", 6, "det"), (cat2, 3, "nmod")]]


def _t_two_sentence_color(color, cat, cat2):
    return [
        [("there", 2, "expl"), ("is", 0, "root"), ("a", 4, "det"),
         (cat, 2, "nsubj")],
        [("it", 3, "nsubj"), ("is", 3, "cop"), (color, 0, "root")],
    ]


def _t_two_sentence_near(color, cat, cat2):
    return [
        [("there", 2, "expl"), ("is", 0, "root"), ("a", 5, "det"),
         (color, 5, "amod"), (cat, 2, "nsubj")],
        [("it", 5, "nsubj"), ("is", 5, "cop"), ("near", 5, "case"),
         ("the", 5, "det"), (cat2, 0, "root")],
    ]


TEMPLATES = {
    "flat": {"build": _t_flat, "needs_relation": False},
    "near": {"build": _t_near, "needs_relation": True},
    "two_sentence_color": {"build": _t_two_sentence_color, "needs_relation": False},
    "two_sentence_near": {"build": _t_two_sentence_near, "needs_relation": True},
}


def _sentences_to_conllu(sentences):
    lines = []
    for sent in sentences:
        for i, (form, head, deprel) in enumerate(sent, start=1):
            lines.append(f"{i}\t{form}\t_\t_\t_\t_\t{head}\t{deprel}\t_\t_")
        lines.append("")
    return "\n".join(lines) + "\n"


def _matches(obj, objects, color, cat, cat2):
    """Predicate semantics used to verify an expression is unambiguous."""
    if obj["category"] != cat or obj["color"] != color:
        return False
    if cat2 is not None:
        rel = obj["relations"][0] if obj["relations"] else None
        if rel is None or rel["target_category"] != cat2:
            return False
    return True


def describable_objects(objects):
    """Objects with at least one unambiguous template, with the valid options.

    Returns a list of (object record, [(template name, cat2 or None), ...]).
    """
    out = []
    for obj in objects:
        color, cat = obj["color"], obj["category"]
        options = []
        plain = [o for o in objects if _matches(o, objects, color, cat, None)]
        if len(plain) == 1:
            options += [("flat", None), ("two_sentence_color", None)]
        if obj["relations"]:
            cat2 = obj["relations"][0]["target_category"]
            rel = [o for o in objects if _matches(o, objects, color, cat, cat2)]
            if len(rel) == 1 and cat2 != cat:
                options += [("near", cat2), ("two_sentence_near", cat2)]
        if options:
            out.append((obj, options))
    return out


def generate_expression(objects, seed, template_set=None, expr_id=None):
    """Make one unambiguous referring expression over the object records.

    Returns (Expression, conllu string, target instance id, tag,
    mentioned category names).
    """
    rng = np.random.default_rng(seed)
    allowed = set(template_set or TEMPLATES)
    candidates = []
    for obj, options in describable_objects(objects):
        options = [o for o in options if o[0] in allowed]
        if options:
            candidates.append((obj, options))
    if not candidates:
        raise GenerationError("no uniquely-describable object in scene")

    obj, options = candidates[int(rng.integers(len(candidates)))]
    name, cat2 = options[int(rng.integers(len(options)))]
    sentences = TEMPLATES[name]["build"](obj["color"], obj["category"], cat2)

    tokens = [form for sent in sentences for (form, _, _) in sent]
    spans = []
    start = 0
    for sent in sentences:
        spans.append((start, start + len(sent)))
        start += len(sent)
    expr = Expression(tokens=tokens, sentence_spans=spans,
                      raw_text=" ".join(tokens))
    conllu = _sentences_to_conllu(sentences)
    n_same_cat = sum(1 for o in objects if o["category"] == obj["category"])
    tag = "unique" if n_same_cat == 1 else "multiple"
    mentioned = [obj["category"]] + ([cat2] if cat2 else [])
    return expr, conllu, obj["instance"], tag, mentioned
