"""Two-hand kinematic model.

Defines the 21-joint hand skeleton (wrist + 5 fingers x 4 joints), the bone
graph, the canonical rest-pose template, forward kinematics for procedural
pose generation, and the per-bone rigid canonicalization transforms that map
posed queries into the rest-pose frame.

All keypoint arrays are float64, shape (21, 3), in millimeters. A two-hand
observation stacks the left block first into a (42, 3) array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

JOINTS_PER_HAND = 21
BONES_PER_HAND = 20
JOINTS_TWO_HANDS = 42

# Middle-finger MCP, used as the default reference joint for metric alignment.
MID_JOINT_INDEX = 9

_ZERO_BONE_TOL = 1e-9  # mm; below this a bone is degenerate
_ANTIPARALLEL_TOL = 1e-8


class DegeneratePoseError(ValueError):
    """Raised when a pose contains a (numerically) zero-length bone."""


@dataclass(frozen=True)
class BoneGraph:
    """Tree of hand bones rooted at the wrist.

    parent: (21,) parent joint index per joint, -1 for the wrist.
    bones: (20, 2) ordered (parent_joint, child_joint) pairs.
    """

    parent: np.ndarray
    bones: np.ndarray

    def parent_bone(self) -> np.ndarray:
        """(20,) index of the bone ending at each bone's proximal joint, -1 at the wrist."""
        child_to_bone = {int(c): i for i, (_, c) in enumerate(self.bones)}
        return np.array(
            [child_to_bone.get(int(p), -1) for p, _ in self.bones], dtype=np.int64
        )


@dataclass(frozen=True)
class RigidTransform:
    """Affine map x -> R x + t with orthonormal R (det +1)."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class CanonicalizationSet:
    """Per-bone rigid transforms into the rest pose plus the posed wrist position."""

    transforms: tuple[RigidTransform, ...]
    root_translation: np.ndarray


@dataclass(frozen=True)
class TwoHandKeypoints:
    """Left and right hand keypoints; stacked order puts the left block first."""

    left: np.ndarray
    right: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.left, self.right], axis=0)

    @staticmethod
    def from_stacked(arr: np.ndarray) -> "TwoHandKeypoints":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (JOINTS_TWO_HANDS, 3):
            raise ValueError(f"expected (42, 3) keypoints, got {arr.shape}")
        return TwoHandKeypoints(arr[:JOINTS_PER_HAND].copy(), arr[JOINTS_PER_HAND:].copy())


@lru_cache(maxsize=1)
def _template() -> dict:
    path = resources.files("handfield") / "data" / "rest_pose.json"
    with path.open("r") as fh:
        data = json.load(fh)
    if data.get("version") != 1:
        raise ValueError(f"unsupported rest-pose template version {data.get('version')!r}")
    return data


@lru_cache(maxsize=1)
def bone_graph() -> BoneGraph:
    tpl = _template()
    parent = np.array(tpl["parents"], dtype=np.int64)
    bones = np.array(
        [(p, c) for c, p in enumerate(parent) if p >= 0], dtype=np.int64
    )
    assert bones.shape == (BONES_PER_HAND, 2)
    parent.setflags(write=False)
    bones.setflags(write=False)
    return BoneGraph(parent=parent, bones=bones)


def rest_pose() -> np.ndarray:
    """The canonical flat right-hand template, wrist at the origin. Returns a copy."""
    return np.array(_template()["keypoints_mm"], dtype=np.float64)


def default_bone_radii() -> np.ndarray:
    """Per-bone capsule radii shipped with the rest template. Returns a copy."""
    return np.array(_template()["default_bone_radii_mm"], dtype=np.float64)


def validate_keypoints(J: np.ndarray) -> np.ndarray:
    J = np.asarray(J, dtype=np.float64)
    if J.shape != (JOINTS_PER_HAND, 3):
        raise ValueError(f"expected (21, 3) keypoints, got {J.shape}")
    if not np.all(np.isfinite(J)):
        raise ValueError("keypoints contain non-finite values")
    return J


def bone_lengths(J: np.ndarray) -> np.ndarray:
    """Euclidean length of each of the 20 bones, in bone order."""
    J = validate_keypoints(J)
    bones = bone_graph().bones
    seg = J[bones[:, 1]] - J[bones[:, 0]]
    lengths = np.linalg.norm(seg, axis=1)
    if np.any(lengths < _ZERO_BONE_TOL):
        bad = int(np.argmin(lengths))
        raise DegeneratePoseError(f"bone {bad} has zero length")
    return lengths


def mirror_hand(J: np.ndarray) -> np.ndarray:
    """Reflect keypoints across the x = 0 plane (left <-> right convention bridge)."""
    J = validate_keypoints(J)
    out = J.copy()
    out[:, 0] = -out[:, 0]
    return out


def mirror_points(x: np.ndarray) -> np.ndarray:
    """Reflect arbitrary query points across x = 0."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    out[..., 0] = -out[..., 0]
    return out


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def forward_kinematics(
    rest: np.ndarray,
    joint_angles: np.ndarray,
    global_rotation: np.ndarray | None = None,
    global_translation: np.ndarray | None = None,
) -> np.ndarray:
    """Pose the rest template by hierarchical per-bone rotation, then a rigid motion.

    joint_angles is (20, 3): per bone (flexion about x, abduction about z,
    twist about y), applied intrinsically in the parent bone's frame as
    Rx(flexion) @ Rz(abduction) @ Ry(twist). Bone lengths are preserved by
    construction.
    """
    rest = validate_keypoints(rest)
    joint_angles = np.asarray(joint_angles, dtype=np.float64)
    if joint_angles.shape != (BONES_PER_HAND, 3):
        raise ValueError(f"expected (20, 3) joint angles, got {joint_angles.shape}")
    graph = bone_graph()
    parent_bone = graph.parent_bone()

    if global_rotation is None:
        global_rotation = np.eye(3)
    global_rotation = np.asarray(global_rotation, dtype=np.float64)
    if np.max(np.abs(global_rotation.T @ global_rotation - np.eye(3))) > 1e-8:
        raise ValueError("global_rotation is not orthonormal")
    if global_translation is None:
        global_translation = np.zeros(3)
    global_translation = np.asarray(global_translation, dtype=np.float64)

    posed = np.zeros_like(rest)
    cumulative = [None] * BONES_PER_HAND
    # Bones are ordered proximal-first within each finger, so parents precede children.
    for b, (pj, cj) in enumerate(graph.bones):
        fl, ab, tw = joint_angles[b]
        local = _rot_x(fl) @ _rot_z(ab) @ _rot_y(tw)
        pb = parent_bone[b]
        cum = local if pb < 0 else cumulative[pb] @ local
        cumulative[b] = cum
        posed[cj] = posed[pj] + cum @ (rest[cj] - rest[pj])
    return posed @ global_rotation.T + global_translation


def sample_joint_angles(rng: np.random.Generator) -> np.ndarray:
    """Random plausible joint angles: flexion in [0, 1.6], abduction in [-0.3, 0.3], no twist."""
    angles = np.zeros((BONES_PER_HAND, 3))
    angles[:, 0] = rng.uniform(0.0, 1.6, size=BONES_PER_HAND)
    angles[:, 1] = rng.uniform(-0.3, 0.3, size=BONES_PER_HAND)
    return angles


def _minimal_rotation(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smallest-angle rotation taking unit vector u onto unit vector v."""
    c = float(np.dot(u, v))
    if c < -1.0 + _ANTIPARALLEL_TOL:
        # Antiparallel: 180 degrees about a deterministic perpendicular axis,
        # built from the first coordinate axis not parallel to u.
        for j in range(3):
            axis = np.cross(np.eye(3)[j], u)
            norm = np.linalg.norm(axis)
            if norm > 1e-6:
                axis = axis / norm
                return 2.0 * np.outer(axis, axis) - np.eye(3)
        raise AssertionError("unreachable: u cannot be parallel to all three axes")
    w = np.cross(u, v)
    k = np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )
    return np.eye(3) + k + k @ k / (1.0 + c)


def canonicalize(J: np.ndarray) -> CanonicalizationSet:
    """Per-bone rigid transforms aligning each posed bone onto its rest-pose bone.

    For bone b with posed endpoints (p_prox, p_dist) and rest endpoints
    (r_prox, r_dist), the transform is x -> R_b (x - p_prox) + r_prox where
    R_b is the minimal rotation aligning the posed bone direction to the rest
    direction. The posed proximal joint maps exactly onto the rest proximal
    joint; the distal joint lands on the rest bone ray at the posed length.
    """
    J = validate_keypoints(J)
    lengths = bone_lengths(J)  # raises on degenerate bones
    rest = rest_pose()
    rest_lengths = bone_lengths(rest)
    bones = bone_graph().bones

    transforms = []
    for b, (pj, cj) in enumerate(bones):
        u = (J[cj] - J[pj]) / lengths[b]
        v = (rest[cj] - rest[pj]) / rest_lengths[b]
        rot = _minimal_rotation(u, v)
        transforms.append(RigidTransform(rot, rest[pj] - rot @ J[pj]))
    return CanonicalizationSet(
        transforms=tuple(transforms), root_translation=J[0].copy()
    )
