"""Two-hand occupancy refinement conditioned on both hands and the image.

The initial field is sampled on a grid; near-surface points of each hand are
collected into 512-point clouds and lifted to feature clouds by attaching
image features at their projections. A shared point-cloud encoder (side-label
aware) turns each cloud into farthest-point anchors with attention-pooled
features plus a global latent; a context latent fuses both hands with the
image bottleneck. The decoder re-estimates occupancy per query from its
embedded coordinates and initial probability, cross attention over nearby
same-side anchors, and the context latent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import initial as initial_mod
from . import primitives as pr
from . import scenes
from . import skeleton as sk
from .primitives import COORD_SCALE


class IsoExtractionError(RuntimeError):
    """The field has no usable iso-surface band (collapsed field)."""


# Widening the value band beyond this would label near-certain space as
# "surface"; a field needing that has collapsed rather than merely drifted.
_EPSILON_CAP = 0.25
_EPSILON_DOUBLINGS = 4


@dataclass(frozen=True)
class RefinerConfig:
    n_points: int = 512
    m_anchors: int = 32
    knn: int = 16
    k_dec: int = 8
    epsilon: float = 0.05
    grid_resolution: int = 64
    pad_mm: float = 20.0
    embed_dim: int = 64
    feature_channels: int = 32
    image_latent: int = 64
    z_dim: int = 64
    z_c_dim: int = 64
    hidden: int = 64
    enc_channels: tuple = (16, 32, 64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(d["enc_channels"])
        return d


@dataclass(frozen=True)
class HandPointCloud:
    points: np.ndarray  # (n, 3) mm
    side: str
    epsilon_used: float
    padded: bool


@dataclass(frozen=True)
class FeatureCloud:
    points: np.ndarray  # (n, 3) mm
    features: np.ndarray  # (n, f) image features at the projections

    @property
    def rows(self) -> np.ndarray:
        return np.concatenate([self.points, self.features], axis=1)


@dataclass(frozen=True)
class AnchorSet:
    coords: np.ndarray  # (m, 3) mm, a subset of the source cloud
    features: np.ndarray  # (m, a)
    side: str


SIDE_LABEL = {"left": (1.0, 0.0), "right": (0.0, 1.0)}


# --- farthest point sampling -------------------------------------------------


def farthest_point_sampling(P: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    """Greedy FPS indices with deterministic tie-breaks.

    Starts at the point farthest from the centroid; every later pick maximizes
    the minimum distance to the chosen set; all ties resolve to the lowest
    index. If k > N the index sequence repeats cyclically and the returned
    flag is True so callers can jitter the duplicates.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {P.shape}")
    n = P.shape[0]
    if n < 1 or k < 1:
        raise ValueError("need at least one point and k >= 1")
    start = int(np.argmax(np.linalg.norm(P - P.mean(axis=0), axis=1)))
    chosen = [start]
    min_dist = np.linalg.norm(P - P[start], axis=1)
    min_dist[start] = -1.0  # never re-pick
    while len(chosen) < min(k, n):
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(P - P[nxt], axis=1))
        min_dist[nxt] = -1.0
    if k <= n:
        return np.array(chosen), False
    reps = -(-k // n)
    return np.tile(np.array(chosen), reps)[:k], True


def knn_indices(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points per query; ties go to the lower index."""
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    return np.argsort(d2, axis=1, kind="stable")[:, : min(k, points.shape[0])]


# --- iso-surface point extraction -------------------------------------------


def grid_points(bbox: np.ndarray, resolution: int) -> np.ndarray:
    axes = [np.linspace(bbox[0][a], bbox[1][a], resolution) for a in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([c.reshape(-1) for c in g], axis=1)


def _band_mask(values: np.ndarray, resolution: int, epsilon: float) -> np.ndarray:
    """Value band around 0.5, extended with points adjacent to a threshold crossing.

    The crossing extension is what makes extraction work on hard {0, 1}
    fields, whose sampled values never land near 0.5 yet clearly cross it
    between neighboring grid points.
    """
    v = values.reshape(resolution, resolution, resolution)
    band = np.abs(v - 0.5) <= min(epsilon, _EPSILON_CAP)
    occ = v > 0.5
    for axis in range(3):
        flip = np.diff(occ, axis=axis) != 0
        pad_lo = [(0, 0)] * 3
        pad_hi = [(0, 0)] * 3
        pad_lo[axis] = (0, 1)
        pad_hi[axis] = (1, 0)
        band |= np.pad(flip, pad_lo)
        band |= np.pad(flip, pad_hi)
    return band.reshape(-1)


def _extract_from_values(
    points: np.ndarray,
    values: np.ndarray,
    side: str,
    resolution: int,
    cell: np.ndarray,
    epsilon: float,
    n: int,
    seed: int,
) -> HandPointCloud:
    eps = epsilon
    for _ in range(_EPSILON_DOUBLINGS + 1):
        mask = _band_mask(values, resolution, eps)
        if mask.sum() >= n:
            break
        eps *= 2.0
    count = int(mask.sum())
    if count == 0:
        raise IsoExtractionError(
            f"no iso-surface band for the {side} hand (field collapsed away from 0.5)"
        )
    band = points[mask]
    idx, padded = farthest_point_sampling(band, n)
    pts = band[idx]
    if padded:
        rng = np.random.default_rng(seed)
        jitter = rng.normal(0.0, cell / 2.0, size=(n - count, 3))
        pts[count:] += jitter
    return HandPointCloud(points=pts, side=side, epsilon_used=eps, padded=padded)


def extract_iso_points(
    field,
    side: str,
    bbox: np.ndarray,
    resolution: int = 64,
    epsilon: float = 0.05,
    n: int = 512,
    seed: int = 0,
) -> HandPointCloud:
    """Near-surface points of one hand's field, farthest-point sampled to n."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2 per axis")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    bbox = np.asarray(bbox, dtype=np.float64)
    pts = grid_points(bbox, resolution)
    col = {"left": 0, "right": 1}[side]
    values = np.asarray(field(pts))[:, col]
    cell = (bbox[1] - bbox[0]) / (resolution - 1)
    return _extract_from_values(pts, values, side, resolution, cell, epsilon, n, seed)


# --- model ------------------------------------------------------------------


class RefinerModel(nn.Module):
    def __init__(self, config: RefinerConfig | None = None):
        super().__init__()
        config = config or RefinerConfig()
        self.config = config
        e = config.embed_dim
        self.encdec = pr.ImageEncoderDecoder(
            tuple(config.enc_channels), config.feature_channels, config.image_latent
        )
        self.point_embed = pr.DenseStack(
            3 + config.feature_channels + 2, [e, e], final="relu"
        )
        self.anchor_attn = pr.VectorCrossAttention(e, pos_dim=3)
        self.pool_head = nn.Linear(e, config.z_dim)
        self.context_enc = pr.DenseStack(
            2 * config.z_dim + config.image_latent, [config.hidden, config.z_c_dim]
        )
        self.query_embed = pr.DenseStack(3 + 1, [e, e], final="relu")
        self.dec_attn = pr.VectorCrossAttention(e, pos_dim=3)
        self.head = pr.DenseStack(e + config.z_c_dim, [config.hidden, 1])

    @property
    def dtype(self) -> torch.dtype:
        return self.pool_head.weight.dtype

    # -- torch-level pieces (shared by training and the public wrappers) -----

    def image_features(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.encdec(image)

    def cloud_features(
        self, points: np.ndarray, G: torch.Tensor, camera: scenes.CameraSpec
    ) -> torch.Tensor:
        """(n, f) image features sampled at the points' projections."""
        uv = scenes.project(camera, points)
        return pr.bilinear_sample(G, torch.from_numpy(uv).to(G.dtype))

    def encode_side(
        self, points: np.ndarray, feats: torch.Tensor, side: str
    ) -> tuple[torch.Tensor, np.ndarray, torch.Tensor]:
        """-> (z_s, anchor coords (m, 3), anchor features (m, e))."""
        n = points.shape[0]
        label = torch.tensor(SIDE_LABEL[side], dtype=feats.dtype).expand(n, 2)
        coords = torch.from_numpy(points * COORD_SCALE).to(feats.dtype)
        emb = self.point_embed(torch.cat([coords, feats, label], dim=1))
        anchor_idx, _ = farthest_point_sampling(points, self.config.m_anchors)
        nbr_idx = knn_indices(points, points[anchor_idx], self.config.knn)
        rel = (points[nbr_idx] - points[anchor_idx][:, None, :]) * COORD_SCALE
        anchor_feats = self.anchor_attn(
            emb[anchor_idx], emb[nbr_idx], torch.from_numpy(rel).to(feats.dtype)
        )
        z_s = self.pool_head(anchor_feats.max(dim=0).values)
        return z_s, points[anchor_idx], anchor_feats

    def context(self, z_l: torch.Tensor, z_r: torch.Tensor, z_img: torch.Tensor) -> torch.Tensor:
        return self.context_enc(torch.cat([z_l, z_r, z_img]))

    def decode_side(
        self,
        x: np.ndarray,
        o_init: torch.Tensor,
        anchor_coords: np.ndarray,
        anchor_feats: torch.Tensor,
        z_c: torch.Tensor,
    ) -> torch.Tensor:
        """Refined logits for queries x (n, 3) with initial probabilities o_init (n,)."""
        n = x.shape[0]
        idx = knn_indices(anchor_coords, x, self.config.k_dec)
        rel = (anchor_coords[idx] - x[:, None, :]) * COORD_SCALE
        coords = torch.from_numpy(x * COORD_SCALE).to(anchor_feats.dtype)
        q = self.query_embed(torch.cat([coords, o_init.unsqueeze(1)], dim=1))
        att = self.dec_attn(q, anchor_feats[idx], torch.from_numpy(rel).to(anchor_feats.dtype))
        fused = torch.cat([att, z_c.unsqueeze(0).expand(n, -1)], dim=1)
        return self.head(fused).squeeze(-1)


def build_model(config: RefinerConfig | None = None, seed: int = 0) -> RefinerModel:
    """Initialize the refiner.

    The decode head's output bias starts at -2 — the empty-space prior
    (sigmoid ~0.12) — so training begins from "almost everything is outside
    both hands" instead of spending its first phase pushing 0.5 down.
    """
    model = pr.init_params(RefinerModel(config), seed)
    with torch.no_grad():
        model.head.layers[-1].bias.fill_(-2.0)
    return model


# --- public operations ------------------------------------------------------


def build_feature_cloud(
    model: RefinerModel, points: np.ndarray, image: np.ndarray, camera: scenes.CameraSpec
) -> FeatureCloud:
    with pr.inference(model):
        G, _ = model.image_features(pr.image_tensor(image, model))
        feats = model.cloud_features(np.asarray(points, dtype=np.float64), G, camera)
    return FeatureCloud(
        points=np.asarray(points, dtype=np.float64),
        features=feats.to(torch.float64).numpy(),
    )


def encode_pointcloud(
    model: RefinerModel, cloud: FeatureCloud, side: str
) -> tuple[np.ndarray, AnchorSet]:
    if side not in SIDE_LABEL:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    with pr.inference(model):
        feats = torch.from_numpy(cloud.features).to(model.dtype)
        z_s, coords, anchor_feats = model.encode_side(cloud.points, feats, side)
    return (
        z_s.to(torch.float64).numpy(),
        AnchorSet(coords=coords, features=anchor_feats.to(torch.float64).numpy(), side=side),
    )


def context_encode(
    model: RefinerModel, z_l: np.ndarray, z_r: np.ndarray, z_img: np.ndarray
) -> np.ndarray:
    to = lambda a: torch.from_numpy(np.asarray(a)).to(model.dtype)
    with pr.inference(model):
        return model.context(to(z_l), to(z_r), to(z_img)).to(torch.float64).numpy()


def eval_refined(
    model: RefinerModel,
    x: np.ndarray,
    o_init: np.ndarray,
    anchors_left: AnchorSet,
    anchors_right: AnchorSet,
    z_c: np.ndarray,
    chunk: int = 4096,
) -> np.ndarray:
    """(n, 2) refined probabilities; column order (left, right)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    o_init = np.asarray(o_init, dtype=np.float64).reshape(x.shape[0], 2)
    for a in (anchors_left, anchors_right):
        if a is None or a.coords.shape[0] == 0:
            raise ValueError("refined evaluation needs anchors for both hands")
    out = np.empty((x.shape[0], 2))
    with pr.inference(model):
        z_c_t = torch.from_numpy(np.asarray(z_c)).to(model.dtype)
        for col, anchors in ((0, anchors_left), (1, anchors_right)):
            feats = torch.from_numpy(anchors.features).to(model.dtype)
            stacked = np.concatenate([x, o_init[:, col : col + 1]], axis=1)
            for lo, valid, block in initial_mod.padded_chunks(stacked, chunk):
                logits = model.decode_side(
                    np.ascontiguousarray(block[:, :3]),
                    torch.from_numpy(block[:, 3]).to(model.dtype),
                    anchors.coords,
                    feats,
                    z_c_t,
                )
                probs = torch.sigmoid(logits).to(torch.float64).numpy()
                out[lo : lo + valid, col] = probs[:valid]
    return out


@dataclass
class RefinementDiagnostics:
    clouds: dict  # side -> HandPointCloud
    anchors: dict  # side -> AnchorSet
    z_left: np.ndarray
    z_right: np.ndarray
    z_image: np.ndarray
    z_context: np.ndarray
    band_sizes: dict

    def save(self, directory) -> None:
        from pathlib import Path

        from . import meshmetrics

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"version": 1, "latents": {}, "clouds": {}, "band_sizes": self.band_sizes}
        for side in ("left", "right"):
            name = f"cloud_{side}.ply"
            meshmetrics.export_ply(self.clouds[side].points, directory / name)
            manifest["clouds"][side] = {
                "file": name,
                "epsilon_used": self.clouds[side].epsilon_used,
                "padded": self.clouds[side].padded,
            }
            aname = f"anchors_{side}.ply"
            meshmetrics.export_ply(self.anchors[side].coords, directory / aname)
        for key, arr in (
            ("z_left", self.z_left),
            ("z_right", self.z_right),
            ("z_image", self.z_image),
            ("z_context", self.z_context),
        ):
            data = np.asarray(arr, dtype="<f4")
            (directory / f"{key}.bin").write_bytes(data.tobytes())
            manifest["latents"][key] = {"file": f"{key}.bin", "shape": list(data.shape)}
        import json

        (directory / "diagnostics.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def refine_scene(
    initial_model,
    refiner_model: RefinerModel,
    image: np.ndarray,
    J: sk.TwoHandKeypoints,
    camera: scenes.CameraSpec,
):
    """Compose the full refinement pipeline for one scene.

    Returns (field, diagnostics): the field maps (n, 3) queries to refined
    (n, 2) probabilities and is deterministic across calls.
    """
    cfg = refiner_model.config
    init_field = initial_mod.initial_field(initial_model, image, J)
    bbox = np.stack(
        [J.stacked().min(axis=0) - cfg.pad_mm, J.stacked().max(axis=0) + cfg.pad_mm]
    )
    pts = grid_points(bbox, cfg.grid_resolution)
    values = init_field(pts)
    cell = (bbox[1] - bbox[0]) / (cfg.grid_resolution - 1)

    clouds = {}
    band_sizes = {}
    for col, side in ((0, "left"), (1, "right")):
        clouds[side] = _extract_from_values(
            pts,
            values[:, col],
            side,
            cfg.grid_resolution,
            cell,
            cfg.epsilon,
            cfg.n_points,
            seed=col,
        )
        band_sizes[side] = int(
            _band_mask(values[:, col], cfg.grid_resolution, clouds[side].epsilon_used).sum()
        )

    with pr.inference(refiner_model):
        G, z_img = refiner_model.image_features(pr.image_tensor(image, refiner_model))
        encoded = {}
        for side in ("left", "right"):
            feats = refiner_model.cloud_features(clouds[side].points, G, camera)
            encoded[side] = refiner_model.encode_side(clouds[side].points, feats, side)
        z_c = refiner_model.context(encoded["left"][0], encoded["right"][0], z_img)

    anchors = {
        side: AnchorSet(
            coords=encoded[side][1],
            features=encoded[side][2].to(torch.float64).numpy(),
            side=side,
        )
        for side in ("left", "right")
    }
    diagnostics = RefinementDiagnostics(
        clouds=clouds,
        anchors=anchors,
        z_left=encoded["left"][0].to(torch.float64).numpy(),
        z_right=encoded["right"][0].to(torch.float64).numpy(),
        z_image=z_img.to(torch.float64).numpy(),
        z_context=z_c.to(torch.float64).numpy(),
        band_sizes=band_sizes,
    )
    z_c_np = diagnostics.z_context

    def field(points: np.ndarray) -> np.ndarray:
        o_init = init_field(points)
        return eval_refined(
            refiner_model,
            points,
            o_init,
            anchors["left"],
            anchors["right"],
            z_c_np,
        )

    return field, diagnostics
