"""Mesh extraction and the evaluation suite.

A field here is any callable mapping (n, 3) query points in mm to (n, 2)
per-hand occupancy probabilities — trained models and the analytic scene
oracle both satisfy the contract, so every metric runs identically against
either. Surfaces are the 0.5 level set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from . import skeleton as sk

OccupancyField = Callable[[np.ndarray], np.ndarray]

_SIDE_COLUMN = {"left": 0, "right": 1}

_DEGENERATE_AREA = 1e-12


def _side_mask(values: np.ndarray, side: str) -> np.ndarray:
    """Boolean occupancy for one hand, or the union for side='both'."""
    if side == "both":
        return (values[:, 0] > 0.5) | (values[:, 1] > 0.5)
    return values[:, _SIDE_COLUMN[side]] > 0.5


def _side_values(values: np.ndarray, side: str) -> np.ndarray:
    if side == "both":
        return np.maximum(values[:, 0], values[:, 1])
    return values[:, _SIDE_COLUMN[side]]


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) mm
    faces: np.ndarray  # (F, 3) int indices

    def __post_init__(self):
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(
        vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64)
    )


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    b = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def marching_cubes(
    field: OccupancyField,
    side: str,
    bbox: np.ndarray,
    resolution: int = 64,
    iso: float = 0.5,
) -> TriangleMesh:
    """Extract the iso-surface of one hand's field on a uniform grid.

    A field constant on the grid (level never crossed) yields an empty mesh;
    degenerate zero-area faces are dropped.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2 per axis")
    bbox = np.asarray(bbox, dtype=np.float64)
    axes = [np.linspace(bbox[0][a], bbox[1][a], resolution) for a in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([c.reshape(-1) for c in grid], axis=1)
    vol = _side_values(np.asarray(field(pts)), side).reshape((resolution,) * 3)
    if vol.min() >= iso or vol.max() <= iso:
        return empty_mesh()
    spacing = tuple((bbox[1] - bbox[0]) / (resolution - 1))
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=spacing)
    verts = verts + bbox[0]
    keep = _face_areas(verts, faces) > _DEGENERATE_AREA
    return TriangleMesh(vertices=np.asarray(verts, dtype=np.float64),
                        faces=np.asarray(faces[keep], dtype=np.int64))


def sample_mesh_surface(mesh: TriangleMesh, n: int = 10_000, seed: int = 0) -> np.ndarray:
    """n points uniform per unit area over the mesh surface."""
    if mesh.is_empty or len(mesh.faces) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = _face_areas(mesh.vertices, mesh.faces)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no positive-area faces")
    rng = np.random.default_rng(seed)
    fi = rng.choice(len(mesh.faces), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    tri = mesh.vertices[mesh.faces[fi]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


# --- metrics ----------------------------------------------------------------


def volumetric_iou(
    field_a: OccupancyField,
    field_b: OccupancyField,
    side: str,
    bbox: np.ndarray,
    n_samples: int = 100_000,
    seed: int = 0,
) -> float:
    """Monte-Carlo IoU of the >0.5 regions; 1.0 when both are empty."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    bbox = np.asarray(bbox, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(bbox[0], bbox[1], size=(n_samples, 3))
    occ_a = _side_mask(np.asarray(field_a(pts)), side)
    occ_b = _side_mask(np.asarray(field_b(pts)), side)
    union = np.logical_or(occ_a, occ_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(occ_a, occ_b).sum() / union)


def chamfer_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor Euclidean distance (L1-of-distances form)."""
    points_a = np.asarray(points_a, dtype=np.float64)
    points_b = np.asarray(points_b, dtype=np.float64)
    if len(points_a) == 0 or len(points_b) == 0:
        raise ValueError("chamfer distance needs nonempty point sets")
    d_ab = cKDTree(points_b).query(points_a)[0]
    d_ba = cKDTree(points_a).query(points_b)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def _stacked(J) -> np.ndarray:
    a = J.stacked() if hasattr(J, "stacked") else np.asarray(J, dtype=np.float64)
    if a.shape != (2 * sk.JOINTS_PER_HAND, 3):
        raise ValueError(f"expected 42x3 keypoints, got {a.shape}")
    return a


def mpjpe(J_pred, J_gt, alignment: str = "per-hand-root") -> float:
    """Mean per-joint position error in mm.

    per-hand-root translates each predicted hand so its wrist matches ground
    truth first; "none" scores the raw positions.
    """
    pred = _stacked(J_pred).copy()
    gt = _stacked(J_gt)
    if alignment == "per-hand-root":
        h = sk.JOINTS_PER_HAND
        pred[:h] += gt[0] - pred[0]
        pred[h:] += gt[h] - pred[h]
    elif alignment != "none":
        raise ValueError(f"unknown alignment {alignment!r}")
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def mid_joint_align(geometry, J_pred_hand: np.ndarray, J_gt_hand: np.ndarray,
                    joint_index: int = sk.MID_JOINT_INDEX):
    """Translate a hand's geometry so its reference joint matches ground truth."""
    offset = np.asarray(J_gt_hand)[joint_index] - np.asarray(J_pred_hand)[joint_index]
    if isinstance(geometry, TriangleMesh):
        return TriangleMesh(vertices=geometry.vertices + offset, faces=geometry.faces)
    return np.asarray(geometry, dtype=np.float64) + offset


def penetration_volume(
    field: OccupancyField,
    bbox: np.ndarray,
    n_samples: int = 100_000,
    seed: int = 0,
) -> float:
    """Monte-Carlo volume (mm^3) where both hands exceed 0.5 occupancy."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    bbox = np.asarray(bbox, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(bbox[0], bbox[1], size=(n_samples, 3))
    values = np.asarray(field(pts))
    both = (values[:, 0] > 0.5) & (values[:, 1] > 0.5)
    volume = float(np.prod(bbox[1] - bbox[0]))
    return volume * float(both.sum()) / n_samples


@dataclass
class MetricReport:
    iou_left: float | None = None
    iou_right: float | None = None
    iou_combined: float | None = None
    chamfer_left_mm: float | None = None
    chamfer_right_mm: float | None = None
    mpjpe_mm: float | None = None
    penetration_mm3: float | None = None
    n_iou_samples: int = 0
    n_surface_samples: int = 0
    seeds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "iou": {
                "left": self.iou_left,
                "right": self.iou_right,
                "combined": self.iou_combined,
            },
            "chamfer_mm": {"left": self.chamfer_left_mm, "right": self.chamfer_right_mm},
            "mpjpe_mm": self.mpjpe_mm,
            "penetration_mm3": self.penetration_mm3,
            "counts": {
                "iou_samples": self.n_iou_samples,
                "surface_samples": self.n_surface_samples,
            },
            "seeds": self.seeds,
        }
        if self.extra:
            d["extra"] = self.extra
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


# --- mesh / point-cloud I/O -------------------------------------------------

_FMT = "%.12g"


def export_obj(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    lines = [f"v {_FMT % x} {_FMT % y} {_FMT % z}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    try:
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as e:
        raise OSError(f"cannot write OBJ to {path}: {e}") from e


def load_obj(path) -> TriangleMesh:
    path = Path(path)
    verts, faces = [], []
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read OBJ from {path}: {e}") from e
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(
        vertices=np.array(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.array(faces, dtype=np.int64).reshape(-1, 3),
    )


def export_ply(points: np.ndarray, path) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    path = Path(path)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    body = [f"{_FMT % x} {_FMT % y} {_FMT % z}" for x, y, z in points]
    try:
        path.write_text("\n".join(header + body) + "\n")
    except OSError as e:
        raise OSError(f"cannot write PLY to {path}: {e}") from e


def load_ply(path) -> np.ndarray:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise OSError(f"cannot read PLY from {path}: {e}") from e
    count = 0
    start = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        if line.strip() == "end_header":
            start = i + 1
            break
    rows = [[float(v) for v in lines[start + j].split()[:3]] for j in range(count)]
    return np.array(rows, dtype=np.float64).reshape(-1, 3)
