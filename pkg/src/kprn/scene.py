"""Image-side records and spatial feature assembly.

Boxes are ``(x_tl, y_tl, x_br, y_br)`` in pixels. Features built here:

* absolute location: ``[x_tl/W, y_tl/H, x_br/W, y_br/H, wh/WH]``
* offset block between a reference box ``i`` and another box ``j``:
  ``[dx_tl/w_i, dy_tl/h_i, dx_br/w_i, dy_br/h_i, w_j h_j / (w_i h_i)]``
  with every delta taken as ``j - i``
* subject feature: ``[c3; c4; absolute(5); 5 same-category offset blocks(25)]``
* object feature: ``[c4 of the object; offset block subject -> object]``
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from kprn.errors import ContractViolation, ParseError

N_NEIGHBORS = 5
SPATIAL_DIM = 5 + 5 * N_NEIGHBORS


class BBox(NamedTuple):
    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    @property
    def width(self):
        return self.x_br - self.x_tl

    @property
    def height(self):
        return self.y_br - self.y_tl

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))

    def is_valid(self):
        return self.x_tl < self.x_br and self.y_tl < self.y_br

    def clamp(self, width, height):
        return BBox(
            min(max(self.x_tl, 0.0), width),
            min(max(self.y_tl, 0.0), height),
            min(max(self.x_br, 0.0), width),
            min(max(self.y_br, 0.0), height),
        )

    def tolist(self):
        return [float(v) for v in self]


def as_box(value):
    box = value if isinstance(value, BBox) else BBox(*(float(v) for v in value))
    if not box.is_valid():
        raise ContractViolation(f"degenerate box {tuple(box)}")
    return box


@dataclass
class ProposalRecord:
    id: int
    box: BBox
    category: str
    feat_c3: np.ndarray
    feat_c4: np.ndarray

    @property
    def cnn_feature(self):
        return np.concatenate([self.feat_c3, self.feat_c4])


@dataclass
class QueryRecord:
    tokens: list
    parsed: dict = field(default_factory=dict)
    attr_labels: list = field(default_factory=list)
    gt_box: BBox | None = None


@dataclass
class SceneRecord:
    image_id: str
    width: float
    height: float
    proposals: list
    queries: list = field(default_factory=list)

    def __post_init__(self):
        if not self.proposals:
            raise ContractViolation(f"scene {self.image_id}: no proposals")
        if self.width <= 0 or self.height <= 0:
            raise ContractViolation(f"scene {self.image_id}: non-positive image size")

    @property
    def boxes(self):
        return [p.box for p in self.proposals]


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------


def absolute_location(box, width, height):
    box = as_box(box)
    if box.x_tl < 0 or box.y_tl < 0 or box.x_br > width or box.y_br > height:
        raise ContractViolation(f"box {tuple(box)} outside a {width}x{height} image")
    return np.array(
        [
            box.x_tl / width,
            box.y_tl / height,
            box.x_br / width,
            box.y_br / height,
            box.area / (width * height),
        ]
    )


def offset_block(ref, other):
    """Offsets and area ratio of ``other`` relative to ``ref``."""
    ref, other = as_box(ref), as_box(other)
    w, h = ref.width, ref.height
    return np.array(
        [
            (other.x_tl - ref.x_tl) / w,
            (other.y_tl - ref.y_tl) / h,
            (other.x_br - ref.x_br) / w,
            (other.y_br - ref.y_br) / h,
            other.area / ref.area,
        ]
    )


object_offsets = offset_block


def _center_dist(a, b):
    (ax, ay), (bx, by) = a.center, b.center
    return float(np.hypot(ax - bx, ay - by))


def relative_same_category(target, scene):
    """25 entries: offset blocks to the 5 nearest proposals sharing the
    target's category, nearest first (ties by id), zero-padded."""
    if not any(p.id == target.id for p in scene.proposals):
        raise ContractViolation(f"proposal {target.id} is not in scene {scene.image_id}")
    same = [p for p in scene.proposals if p.category == target.category and p.id != target.id]
    same.sort(key=lambda p: (_center_dist(target.box, p.box), p.id))
    out = np.zeros(5 * N_NEIGHBORS)
    for k, p in enumerate(same[:N_NEIGHBORS]):
        out[5 * k : 5 * k + 5] = offset_block(target.box, p.box)
    return out


def spatial_feature(p, scene):
    return np.concatenate(
        [absolute_location(p.box, scene.width, scene.height), relative_same_category(p, scene)]
    )


def subject_feature(p, scene):
    return np.concatenate([p.feat_c3, p.feat_c4, spatial_feature(p, scene)])


def object_feature(subject, obj):
    return np.concatenate([obj.feat_c4, offset_block(subject.box, obj.box)])


def manhattan_center_distance(a, b):
    (ax, ay), (bx, by) = as_box(a).center, as_box(b).center
    return abs(ax - bx) + abs(ay - by)


def iou(a, b):
    a, b = as_box(a), as_box(b)
    iw = min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl)
    ih = min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# --------------------------------------------------------------------------
# Dataset file (JSON Lines, one scene per line)
# --------------------------------------------------------------------------


def scene_to_dict(scene):
    return {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
        "proposals": [
            {
                "id": p.id,
                "box": p.box.tolist(),
                "category": p.category,
                "feat_c3": [float(v) for v in p.feat_c3],
                "feat_c4": [float(v) for v in p.feat_c4],
            }
            for p in scene.proposals
        ],
        "queries": [
            {
                "tokens": list(q.tokens),
                "parsed": dict(q.parsed),
                "attr_labels": list(q.attr_labels),
                "gt_box": q.gt_box.tolist() if q.gt_box is not None else None,
            }
            for q in scene.queries
        ],
    }


def scene_from_dict(doc):
    proposals = []
    for p in doc["proposals"]:
        if not p.get("category"):
            raise ContractViolation(f"proposal {p.get('id')}: empty category")
        proposals.append(
            ProposalRecord(
                id=int(p["id"]),
                box=as_box(p["box"]),
                category=str(p["category"]).lower(),
                feat_c3=np.asarray(p["feat_c3"], dtype=np.float64),
                feat_c4=np.asarray(p["feat_c4"], dtype=np.float64),
            )
        )
    proposals.sort(key=lambda p: p.id)
    queries = [
        QueryRecord(
            tokens=list(q["tokens"]),
            parsed=dict(q.get("parsed") or {}),
            attr_labels=list(q.get("attr_labels") or []),
            gt_box=as_box(q["gt_box"]) if q.get("gt_box") is not None else None,
        )
        for q in doc.get("queries", [])
    ]
    return SceneRecord(
        image_id=str(doc["image_id"]),
        width=float(doc["width"]),
        height=float(doc["height"]),
        proposals=proposals,
        queries=queries,
    )


def dumps_scene(scene):
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def read_dataset(path):
    """Load a JSON Lines dataset file. Feature widths must agree across scenes."""
    scenes = []
    dims = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                scene = scene_from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
            for p in scene.proposals:
                d = (p.feat_c3.size, p.feat_c4.size)
                if dims is None:
                    dims = d
                elif d != dims:
                    raise ParseError(f"{path}: feature dims {d} differ from {dims}", line=lineno)
            scenes.append(scene)
    return scenes


def write_dataset(path, scenes):
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(dumps_scene(s) + "\n")
