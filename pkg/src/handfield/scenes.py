"""Synthetic interacting two-hand scenes with an exact analytic occupancy oracle.

Ground-truth hand geometry is a union of capsules, one per bone, which makes
point membership, surface sampling, and ray intersection all closed-form.
Scenes are generated by rejection sampling: both hands must project fully
inside the image and their capsule unions must be strictly disjoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import skeleton as sk

GENERATOR_VERSION = 1


class SceneGenerationError(RuntimeError):
    """Raised when rejection sampling exhausts its retry budget."""


class DatasetError(ValueError):
    """Raised on malformed dataset files; message names the offending path."""


@dataclass(frozen=True)
class CapsuleHand:
    """A hand as a union of per-bone capsules."""

    keypoints: np.ndarray  # (21, 3) mm
    radii: np.ndarray  # (20,) mm

    def __post_init__(self):
        sk.validate_keypoints(self.keypoints)
        radii = np.asarray(self.radii, dtype=np.float64)
        if radii.shape != (sk.BONES_PER_HAND,):
            raise ValueError(f"expected (20,) radii, got {radii.shape}")
        if np.any(radii <= 0):
            raise ValueError("capsule radii must be positive")
        lengths = sk.bone_lengths(self.keypoints)
        limit = 0.9 * _min_adjacent_length(lengths)
        if np.any(radii > limit + 1e-12):
            bad = int(np.argmax(radii - limit))
            raise ValueError(
                f"radius {radii[bad]:.3f} of bone {bad} exceeds 0.9x shortest "
                f"adjacent bone length {limit[bad] / 0.9:.3f}"
            )

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        bones = sk.bone_graph().bones
        return self.keypoints[bones[:, 0]], self.keypoints[bones[:, 1]]


def _min_adjacent_length(lengths: np.ndarray) -> np.ndarray:
    """Per bone, the shortest length among itself and bones sharing a joint."""
    bones = sk.bone_graph().bones
    out = np.empty_like(lengths)
    for b, (pj, cj) in enumerate(bones):
        mask = (
            (bones[:, 0] == pj) | (bones[:, 1] == pj)
            | (bones[:, 0] == cj) | (bones[:, 1] == cj)
        )
        out[b] = lengths[mask].min()
    return out


@dataclass(frozen=True)
class CameraSpec:
    """Orthographic camera: pixel (u, v) maps to origin + u*s*right + v*s*up."""

    width: int
    height: int
    mm_per_px: float
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        if self.mm_per_px <= 0:
            raise ValueError("mm_per_px must be positive")
        axes = np.stack([self.right, self.up, self.forward])
        if np.max(np.abs(axes @ axes.T - np.eye(3))) > 1e-9:
            raise ValueError("camera axes must be orthonormal")

    @staticmethod
    def centered(width: int = 128, height: int = 128, mm_per_px: float = 4.5) -> "CameraSpec":
        """Default camera, looking down -z, image centered on the x = 0 plane.

        Centering makes a world reflection across x = 0 correspond exactly to
        a horizontal flip of the pixel grid: u + u_mirrored = width - 1.
        """
        s = float(mm_per_px)
        return CameraSpec(
            width=width,
            height=height,
            mm_per_px=s,
            right=np.array([1.0, 0.0, 0.0]),
            up=np.array([0.0, 1.0, 0.0]),
            forward=np.array([0.0, 0.0, -1.0]),
            origin=np.array([-s * (width - 1) / 2.0, -s * (height - 1) / 2.0, 300.0]),
        )

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "mm_per_px": self.mm_per_px,
            "right": list(self.right),
            "up": list(self.up),
            "forward": list(self.forward),
            "origin": list(self.origin),
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraSpec":
        return CameraSpec(
            width=int(d["width"]),
            height=int(d["height"]),
            mm_per_px=float(d["mm_per_px"]),
            right=np.asarray(d["right"], dtype=np.float64),
            up=np.asarray(d["up"], dtype=np.float64),
            forward=np.asarray(d["forward"], dtype=np.float64),
            origin=np.asarray(d["origin"], dtype=np.float64),
        )


def project(camera: CameraSpec, x: np.ndarray) -> np.ndarray:
    """World point(s) (..., 3) to continuous pixel coordinates (..., 2)."""
    x = np.asarray(x, dtype=np.float64)
    rel = x - camera.origin
    u = rel @ camera.right / camera.mm_per_px
    v = rel @ camera.up / camera.mm_per_px
    return np.stack([u, v], axis=-1)


def lift(camera: CameraSpec, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Inverse of project at a given depth along the forward axis."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    s = camera.mm_per_px
    return (
        camera.origin
        + uv[..., :1] * s * camera.right
        + uv[..., 1:2] * s * camera.up
        + depth[..., None] * camera.forward
    )


@dataclass(frozen=True)
class SceneSample:
    """One synthetic observation: rendered image plus exact scene geometry."""

    image: np.ndarray  # (h, w, 3) floats in [0, 1]
    keypoints: sk.TwoHandKeypoints
    left_radii: np.ndarray
    right_radii: np.ndarray
    camera: CameraSpec
    seed: int

    def hand(self, side: str) -> CapsuleHand:
        if side == "left":
            return CapsuleHand(self.keypoints.left, self.left_radii)
        if side == "right":
            return CapsuleHand(self.keypoints.right, self.right_radii)
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")


@dataclass(frozen=True)
class QueryBatch:
    points: np.ndarray  # (n, 3) mm
    labels: np.ndarray  # (n, 2) binary occupancy (left, right)


@dataclass(frozen=True)
class GenerationConfig:
    image_width: int = 128
    image_height: int = 128
    mm_per_px: float = 4.5
    wrist_distance_min: float = 60.0
    wrist_distance_max: float = 160.0
    center_sigma: tuple = (15.0, 15.0, 10.0)
    radius_jitter: float = 0.1
    clearance_mm: float = 2.0
    max_tries: int = 1000

    def camera(self) -> CameraSpec:
        return CameraSpec.centered(self.image_width, self.image_height, self.mm_per_px)


# --- capsule geometry -------------------------------------------------------


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact distances from points (Q, 3) to segments a->b (B, 3). Returns (Q, B)."""
    points = np.asarray(points, dtype=np.float64)
    d = b - a  # (B, 3)
    len2 = np.einsum("bi,bi->b", d, d)
    t = np.einsum("qbi,bi->qb", points[:, None, :] - a[None], d) / np.maximum(len2, 1e-30)
    t = np.clip(t, 0.0, 1.0)
    nearest = a[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - nearest, axis=-1)


def segment_segment_distance(p1, q1, p2, q2) -> np.ndarray:
    """Pairwise distances between segments p1->q1 (N, 3) and p2->q2 (M, 3). Returns (N, M)."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1[:, None, :] - p2[None, :, :]
    a = np.einsum("ni,ni->n", d1, d1)[:, None]
    e = np.einsum("mi,mi->m", d2, d2)[None, :]
    b = np.einsum("ni,mi->nm", d1, d2)
    c = np.einsum("nmi,ni->nm", r, d1)
    f = np.einsum("nmi,mi->nm", r, d2)
    denom = a * e - b * b
    s = np.where(denom > 1e-30, np.clip((b * f - c * e) / np.where(denom > 1e-30, denom, 1.0), 0, 1), 0.0)
    t = np.clip((b * s + f) / np.maximum(e, 1e-30), 0.0, 1.0)
    s = np.clip((b * t - c) / np.maximum(a, 1e-30), 0.0, 1.0)
    c1 = p1[:, None, :] + s[..., None] * d1[:, None, :]
    c2 = p2[None, :, :] + t[..., None] * d2[None, :, :]
    return np.linalg.norm(c1 - c2, axis=-1)


def hand_occupancy(hand: CapsuleHand, points: np.ndarray) -> np.ndarray:
    """Binary membership of points (Q, 3) in the hand's capsule union."""
    a, b = hand.segments()
    dist = point_segment_distance(points, a, b)
    return (dist <= hand.radii[None, :]).any(axis=1).astype(np.float64)


def oracle_occupancy_batch(scene: SceneSample, points: np.ndarray) -> np.ndarray:
    """Exact (Q, 2) occupancy labels (left, right) for query points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.stack(
        [
            hand_occupancy(scene.hand("left"), points),
            hand_occupancy(scene.hand("right"), points),
        ],
        axis=1,
    )


def oracle_occupancy(scene: SceneSample, x: np.ndarray) -> tuple[float, float]:
    """Exact occupancy of a single query point for each hand."""
    o = oracle_occupancy_batch(scene, np.asarray(x, dtype=np.float64)[None, :])[0]
    return float(o[0]), float(o[1])


def oracle_field(scene: SceneSample):
    """The analytic scene geometry as an occupancy-field callable (n, 3) -> (n, 2)."""

    def field(points: np.ndarray) -> np.ndarray:
        return oracle_occupancy_batch(scene, points)

    return field


def scene_bbox(scene: SceneSample, pad_mm: float = 20.0) -> np.ndarray:
    """Axis-aligned (2, 3) [min; max] box around all 42 joints, padded per side."""
    J = scene.keypoints.stacked()
    return np.stack([J.min(axis=0) - pad_mm, J.max(axis=0) + pad_mm])


def hand_bbox(scene: SceneSample, side: str, pad_mm: float = 20.0) -> np.ndarray:
    J = scene.keypoints.left if side == "left" else scene.keypoints.right
    return np.stack([J.min(axis=0) - pad_mm, J.max(axis=0) + pad_mm])


# --- rendering --------------------------------------------------------------


def _ray_capsule_depth(origins, direction, a, b, radius) -> np.ndarray:
    """Smallest ray parameter t where origins + t*direction hits a capsule; inf on miss.

    origins: (Q, 3); direction: unit (3,); capsule segment a->b with radius.
    """
    ba = b - a
    oa = origins - a
    baba = float(ba @ ba)
    bard = float(ba @ direction)
    baoa = oa @ ba
    rdoa = oa @ direction
    oaoa = np.einsum("qi,qi->q", oa, oa)
    k2 = baba - bard * bard
    k1 = baba * rdoa - baoa * bard
    k0 = baba * oaoa - baoa * baoa - radius * radius * baba

    t = np.full(origins.shape[0], np.inf)
    if k2 > 1e-12:
        h = k1 * k1 - k2 * k0
        valid = h >= 0
        tb = np.where(valid, (-k1 - np.sqrt(np.maximum(h, 0.0))) / k2, np.inf)
        y = baoa + tb * bard
        body = valid & (y > 0.0) & (y < baba)
        t = np.where(body, tb, np.inf)

    # Spherical caps at both endpoints.
    for center in (a, b):
        oc = origins - center
        bq = oc @ direction
        cq = np.einsum("qi,qi->q", oc, oc) - radius * radius
        h2 = bq * bq - cq
        valid = h2 >= 0
        tc = np.where(valid, -bq - np.sqrt(np.maximum(h2, 0.0)), np.inf)
        t = np.minimum(t, tc)
    return t


def _depth_buffer(camera: CameraSpec, hand: CapsuleHand) -> np.ndarray:
    """(h, w) nearest-hit ray parameter per pixel; inf where the hand is missed."""
    u = np.arange(camera.width, dtype=np.float64)
    v = np.arange(camera.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)  # row = v, col = u
    origins = (
        camera.origin
        + (uu * camera.mm_per_px)[..., None] * camera.right
        + (vv * camera.mm_per_px)[..., None] * camera.up
    ).reshape(-1, 3)
    a, b = hand.segments()
    depth = np.full(origins.shape[0], np.inf)
    for i in range(sk.BONES_PER_HAND):
        depth = np.minimum(
            depth, _ray_capsule_depth(origins, camera.forward, a[i], b[i], hand.radii[i])
        )
    return depth.reshape(camera.height, camera.width)


def render(
    camera: CameraSpec, left: CapsuleHand | None, right: CapsuleHand | None
) -> np.ndarray:
    """Orthographic depth-shaded image of both capsule hands.

    Channel 0 carries the left hand, channel 2 the right hand, channel 1 the
    shared nearest-surface shading; background is 0. Intensity is
    1 - 0.9 * normalized depth, so any hit pixel is strictly positive.
    """
    h, w = camera.height, camera.width
    inf = np.full((h, w), np.inf)
    depth_l = _depth_buffer(camera, left) if left is not None else inf
    depth_r = _depth_buffer(camera, right) if right is not None else inf

    both = np.minimum(depth_l, depth_r)
    hit = np.isfinite(both)
    image = np.zeros((h, w, 3), dtype=np.float64)
    if not hit.any():
        return image

    d_min = both[hit].min()
    d_max = both[hit].max()
    span = max(d_max - d_min, 1e-9)

    def shade(depth):
        m = np.isfinite(depth)
        out = np.zeros((h, w), dtype=np.float64)
        out[m] = 1.0 - 0.9 * (depth[m] - d_min) / span
        return out

    image[..., 0] = shade(depth_l)
    image[..., 1] = shade(both)
    image[..., 2] = shade(depth_r)
    return image


def mirror_image(image: np.ndarray) -> np.ndarray:
    """Horizontal flip plus left/right channel swap; involutive."""
    out = image[:, ::-1, :].copy()
    out[..., [0, 2]] = out[..., [2, 0]]
    return out


# --- scene generation -------------------------------------------------------


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _in_frustum(camera: CameraSpec, hand: CapsuleHand) -> bool:
    margin = (hand.radii.max() + 2.0) / camera.mm_per_px
    uv = project(camera, hand.keypoints)
    return bool(
        (uv[:, 0] >= margin).all()
        and (uv[:, 0] <= camera.width - 1 - margin).all()
        and (uv[:, 1] >= margin).all()
        and (uv[:, 1] <= camera.height - 1 - margin).all()
    )


def hands_disjoint(left: CapsuleHand, right: CapsuleHand, clearance: float = 0.0) -> bool:
    """True iff the two capsule unions are separated by at least `clearance` mm."""
    la, lb = left.segments()
    ra, rb = right.segments()
    dist = segment_segment_distance(la, lb, ra, rb)
    gap = dist - left.radii[:, None] - right.radii[None, :]
    return bool(gap.min() >= clearance)


def sample_scene(seed: int, config: GenerationConfig | None = None) -> SceneSample:
    """Deterministically generate one interacting, non-penetrating two-hand scene."""
    config = config or GenerationConfig()
    camera = config.camera()
    rest = sk.rest_pose()
    base_radii = sk.default_bone_radii()
    rng = np.random.default_rng(seed)

    for _ in range(config.max_tries):
        angles_r = sk.sample_joint_angles(rng)
        rot_r = _random_rotation(rng)
        angles_l = sk.sample_joint_angles(rng)
        rot_l = _random_rotation(rng)
        distance = rng.uniform(config.wrist_distance_min, config.wrist_distance_max)
        center = rng.normal(0.0, np.asarray(config.center_sigma))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        jit_l, jit_r = rng.uniform(1 - config.radius_jitter, 1 + config.radius_jitter, size=2)

        right_kp = sk.forward_kinematics(rest, angles_r, rot_r, center + direction * distance / 2)
        left_kp = sk.mirror_hand(sk.forward_kinematics(rest, angles_l, rot_l, None))
        left_kp = left_kp + (center - direction * distance / 2)

        left = CapsuleHand(left_kp, base_radii * jit_l)
        right = CapsuleHand(right_kp, base_radii * jit_r)

        if not (_in_frustum(camera, left) and _in_frustum(camera, right)):
            continue
        if not hands_disjoint(left, right, config.clearance_mm):
            continue

        image = render(camera, left, right)
        return SceneSample(
            image=image,
            keypoints=sk.TwoHandKeypoints(left_kp, right_kp),
            left_radii=left.radii,
            right_radii=right.radii,
            camera=camera,
            seed=seed,
        )
    raise SceneGenerationError(
        f"no valid scene for seed {seed} within {config.max_tries} tries"
    )


# --- training query sampling ------------------------------------------------


def _capsule_areas(hand: CapsuleHand) -> tuple[np.ndarray, np.ndarray]:
    """(lateral cylinder areas, full sphere cap areas) per bone."""
    lengths = sk.bone_lengths(hand.keypoints)
    r = hand.radii
    return 2 * np.pi * r * lengths, 4 * np.pi * r * r


def sample_on_capsules(
    hands: list[CapsuleHand], n: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform-per-unit-area samples on the union of all capsule surfaces."""
    seg_a, seg_b, radii, cyl_area, cap_area = [], [], [], [], []
    for hand in hands:
        a, b = hand.segments()
        cyl, cap = _capsule_areas(hand)
        seg_a.append(a)
        seg_b.append(b)
        radii.append(hand.radii)
        cyl_area.append(cyl)
        cap_area.append(cap)
    seg_a = np.concatenate(seg_a)
    seg_b = np.concatenate(seg_b)
    radii = np.concatenate(radii)
    cyl_area = np.concatenate(cyl_area)
    cap_area = np.concatenate(cap_area)

    total = cyl_area + cap_area
    probs = total / total.sum()
    picks = rng.choice(len(probs), size=n, p=probs)
    on_cap = rng.uniform(size=n) < (cap_area[picks] / total[picks])

    axis = seg_b[picks] - seg_a[picks]
    axis_dir = axis / np.linalg.norm(axis, axis=1, keepdims=True)

    points = np.empty((n, 3))
    # Cylinder body: random height, random angle around a deterministic frame.
    t = rng.uniform(size=n)
    phi = rng.uniform(0.0, 2 * np.pi, size=n)
    ref = np.where(np.abs(axis_dir[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(ref, axis_dir)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(axis_dir, e1)
    radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    cyl_pts = seg_a[picks] + t[:, None] * axis + radii[picks, None] * radial
    # Caps: uniform sphere direction, attached at the endpoint it faces.
    normal = rng.normal(size=(n, 3))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    outward = np.einsum("ni,ni->n", normal, axis_dir) > 0
    base = np.where(outward[:, None], seg_b[picks], seg_a[picks])
    cap_pts = base + radii[picks, None] * normal

    points[~on_cap] = cyl_pts[~on_cap]
    points[on_cap] = cap_pts[on_cap]
    return points


def sample_training_queries(
    scene: SceneSample,
    n_uniform: int,
    n_surface: int,
    sigma: float,
    seed: int,
    pad_mm: float = 20.0,
) -> QueryBatch:
    """Uniform bounding-box queries plus noisy surface queries, labeled by the oracle."""
    if n_uniform <= 0 or n_surface <= 0:
        raise ValueError("query counts must be positive")
    rng = np.random.default_rng(seed)
    box = scene_bbox(scene, pad_mm)
    uniform = rng.uniform(box[0], box[1], size=(n_uniform, 3))
    surface = sample_on_capsules([scene.hand("left"), scene.hand("right")], n_surface, rng)
    if sigma > 0:
        surface = surface + rng.normal(0.0, sigma, size=surface.shape)
    points = np.concatenate([uniform, surface])
    return QueryBatch(points=points, labels=oracle_occupancy_batch(scene, points))


# --- dataset serialization --------------------------------------------------


def _require(path: Path) -> Path:
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path}")
    return path


def _read_json(path: Path) -> dict:
    try:
        with _require(path).open("r") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc


def save_sample(scene: SceneSample, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img8 = np.round(np.clip(scene.image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(directory / "image.png")
    with (directory / "keypoints.json").open("w") as fh:
        json.dump(
            {"version": 1, "keypoints_mm": scene.keypoints.stacked().tolist()},
            fh,
            sort_keys=True,
        )
    with (directory / "geometry.json").open("w") as fh:
        json.dump(
            {
                "version": 1,
                "left_radii_mm": scene.left_radii.tolist(),
                "right_radii_mm": scene.right_radii.tolist(),
                "camera": scene.camera.to_dict(),
            },
            fh,
            sort_keys=True,
        )
    with (directory / "meta.json").open("w") as fh:
        json.dump(
            {"seed": scene.seed, "generator_version": GENERATOR_VERSION},
            fh,
            sort_keys=True,
        )


def load_sample(directory: Path) -> SceneSample:
    directory = Path(directory)
    meta = _read_json(directory / "meta.json")
    kp = _read_json(directory / "keypoints.json")
    geo = _read_json(directory / "geometry.json")
    try:
        image = np.asarray(Image.open(_require(directory / "image.png")), dtype=np.float64) / 255.0
        keypoints = sk.TwoHandKeypoints.from_stacked(np.asarray(kp["keypoints_mm"]))
        return SceneSample(
            image=image,
            keypoints=keypoints,
            left_radii=np.asarray(geo["left_radii_mm"], dtype=np.float64),
            right_radii=np.asarray(geo["right_radii_mm"], dtype=np.float64),
            camera=CameraSpec.from_dict(geo["camera"]),
            seed=int(meta["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"malformed sample in {directory}: {exc}") from exc


def save_dataset(
    samples: list[SceneSample], directory: Path, generation_config: dict | None = None
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, scene in enumerate(samples):
        name = f"sample_{i:04d}"
        save_sample(scene, directory / name)
        names.append(name)
    with (directory / "manifest.json").open("w") as fh:
        json.dump(
            {"version": 1, "samples": names, "generation_config": generation_config},
            fh,
            sort_keys=True,
        )


def load_dataset(directory: Path) -> list[SceneSample]:
    directory = Path(directory)
    manifest = _read_json(directory / "manifest.json")
    try:
        names = manifest["samples"]
    except KeyError as exc:
        raise DatasetError(f"manifest.json in {directory} lacks a 'samples' list") from exc
    return [load_sample(directory / name) for name in names]
