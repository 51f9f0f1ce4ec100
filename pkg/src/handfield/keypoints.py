"""Keypoint refinement: fix noisy two-hand joints with a skeleton GCN + image attention.

Each of the 42 joints becomes a node whose features concatenate a learned
index embedding with an encoding of its (scaled) coordinates. Messages flow
along the bones of each hand, then every node attends jointly over all nodes
and the image patch tokens. A zero-initialized regressor predicts per-joint
displacements, so an untrained model is exactly the identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import primitives as pr
from . import skeleton as sk
from .primitives import COORD_SCALE

NUM_NODES = 2 * sk.JOINTS_PER_HAND


@dataclass(frozen=True)
class SkeletonGraph:
    """42-node two-hand graph: left joints 0-20, right joints 21-41."""

    edges: np.ndarray  # (E, 2) undirected

    @property
    def num_nodes(self) -> int:
        return NUM_NODES


def skeleton_graph(cross_wrist: bool = False) -> SkeletonGraph:
    """Bone edges within each hand; optionally a single wrist-wrist link.

    The default keeps the hands as two disjoint components — cross-hand
    information travels only through the attention stage.
    """
    bones = sk.bone_graph().bones
    edges = [tuple(b) for b in bones]
    edges += [(i + sk.JOINTS_PER_HAND, j + sk.JOINTS_PER_HAND) for i, j in bones]
    if cross_wrist:
        edges.append((0, sk.JOINTS_PER_HAND))
    return SkeletonGraph(edges=np.array(edges, dtype=np.int64))


@dataclass(frozen=True)
class KeypointRefinerConfig:
    d: int = 64
    hidden: int = 64
    gcn_layers: int = 4
    heads: int = 2
    dropout: float = 0.01
    image_height: int = 128
    image_width: int = 128
    patch: int = 8
    cross_wrist: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class KeypointRefinerModel(nn.Module):
    def __init__(self, config: KeypointRefinerConfig | None = None):
        super().__init__()
        config = config or KeypointRefinerConfig()
        if config.d % 2:
            raise ValueError("model width must be even (split between index and coords)")
        self.config = config
        half = config.d // 2
        self.index_embed = nn.Parameter(torch.zeros(NUM_NODES, half))
        self.coord_enc = pr.DenseStack(3, [half, half], final="relu")
        self.gcn = pr.ResidualGcn(config.d, config.d, layers=config.gcn_layers)
        self.patch_enc = pr.PatchEncoder(
            config.image_height, config.image_width, config.d, patch=config.patch
        )
        self.attn = pr.SelfAttention(config.d, heads=config.heads, residual=True)
        self.regressor = pr.DenseStack(
            config.d, [config.hidden, 3], dropout=config.dropout
        )
        graph = skeleton_graph(config.cross_wrist)
        self.register_buffer(
            "nb_mean", pr.mean_adjacency(NUM_NODES, graph.edges), persistent=False
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.coord_enc.layers[0].weight.dtype

    def node_tokens(self, joints: torch.Tensor) -> torch.Tensor:
        """(42, d) features: [index embedding | encoded scaled coordinates]."""
        feats = torch.cat([self.index_embed, self.coord_enc(joints * COORD_SCALE)], dim=1)
        return self.gcn(feats, self.nb_mean.to(feats.dtype))

    def deltas(self, joints: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        """Per-joint displacement (42, 3) in mm."""
        tokens = torch.cat([self.node_tokens(joints), self.patch_enc(image)], dim=0)
        mixed = self.attn(tokens)[:NUM_NODES]
        return self.regressor(mixed) / COORD_SCALE


def build_model(config: KeypointRefinerConfig | None = None, seed: int = 0) -> KeypointRefinerModel:
    """Initialize; the regressor's output layer is zeroed for residual identity."""
    model = pr.init_params(KeypointRefinerModel(config), seed)
    out = model.regressor.layers[-1]
    with torch.no_grad():
        out.weight.zero_()
        out.bias.zero_()
    return model


def refine(
    model: KeypointRefinerModel, J: sk.TwoHandKeypoints, image: np.ndarray
) -> sk.TwoHandKeypoints:
    """J + predicted displacements. Accepts degenerate poses; rejects non-finite."""
    stacked = J.stacked()
    if not np.all(np.isfinite(stacked)):
        raise ValueError("keypoints contain non-finite values")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    with pr.inference(model):
        joints = torch.from_numpy(stacked).to(model.dtype)
        delta = model.deltas(joints, pr.image_tensor(image, model))
    refined = stacked + delta.to(torch.float64).numpy()
    return sk.TwoHandKeypoints.from_stacked(refined)


def corrupt_keypoints(J: sk.TwoHandKeypoints, sigma: float, seed: int) -> sk.TwoHandKeypoints:
    """Add isotropic per-coordinate Gaussian noise of scale sigma (mm)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    noisy = J.stacked() + sigma * rng.standard_normal((NUM_NODES, 3))
    return sk.TwoHandKeypoints.from_stacked(noisy)
