"""Initial per-hand articulated occupancy network.

A query point is canonicalized per bone, concatenated with a bone-length
feature and a pose feature, and pushed through that bone's private MLP; the
hand occupancy is the maximum over bones. Image evidence enters through a
per-query shape feature: the query token attends over patch tokens of the
conditioning image, and the resulting vector is concatenated into every part
network after its first layer.

One set of weights serves both hands. Left-hand evaluation mirrors the
keypoints and queries across x = 0 and applies the matching image involution
(horizontal flip + left/right channel swap), so the network always sees
right-hand geometry.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import primitives as pr
from . import scenes
from . import skeleton as sk
from .primitives import COORD_SCALE

# Canonical coordinates feed the part networks in centimeters. The occupancy
# boundary spans only a few millimeters, and with the global coordinate scale
# the networks would have to grow their weights ~40x before the sigmoid can
# separate inside from outside — the dominant cost of fitting. A coarser unit
# puts the needed sharpness within reach of freshly initialized layers.
CANON_SCALE = 10.0 * COORD_SCALE


@dataclass(frozen=True)
class InitialConfig:
    d: int = 64
    c_phi: int = 32
    c_omega: int = 32
    part_width: int = 64
    part_layers: int = 4
    cond_hidden: int = 64
    dropout: float = 0.01
    image_height: int = 128
    image_width: int = 128
    patch: int = 8
    heads: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


class BonewiseMLP(nn.Module):
    """B parallel MLPs with separate parameters and shared layer widths.

    The per-query feature ``inject`` is concatenated to every part's hidden
    state after the first layer. Output: one logit per part per query.
    """

    def __init__(self, parts: int, in_dim: int, inject_dim: int, width: int, layers: int):
        super().__init__()
        if layers < 2:
            raise ValueError("part networks need at least 2 layers")
        self.parts = parts
        dims = [(in_dim, width), (width + inject_dim, width)]
        dims += [(width, width)] * (layers - 3)
        dims += [(width, 1)]
        self.weights = nn.ParameterList(
            nn.Parameter(torch.empty(parts, o, i)) for i, o in dims
        )
        self.biases = nn.ParameterList(nn.Parameter(torch.empty(parts, o)) for _, o in dims)

    def forward(
        self, x: torch.Tensor, inject: torch.Tensor, bones: list[int] | None = None
    ) -> torch.Tensor:
        """x (B, n, in_dim); inject (n, inject_dim) -> logits (B, n).

        A ``bones`` subset is sliced from the full forward pass rather than
        evaluated with narrowed parameter tensors: identical kernel shapes
        keep per-part values bitwise equal, which makes subset occupancy
        exactly monotone under the max combination.
        """
        h = x
        last = len(self.weights) - 1
        for li in range(len(self.weights)):
            w = self.weights[li]
            b = self.biases[li]
            h = torch.matmul(h, w.transpose(-1, -2)) + b.unsqueeze(1)
            if li < last:
                h = torch.relu(h)
            if li == 0:
                inj = inject.unsqueeze(0).expand(h.shape[0], -1, -1)
                h = torch.cat([h, inj], dim=-1)
        out = h.squeeze(-1)
        return out if bones is None else out[list(bones)]


@dataclass
class HandInputs:
    """Per-hand constants (right-hand convention) feeding the conditioning encoders."""

    rot: torch.Tensor  # (B, 3, 3) canonicalization rotations
    trans: torch.Tensor  # (B, 3) canonicalization translations, mm
    lengths: torch.Tensor  # (B,) bone lengths, coordinate-scaled
    pose_vec: torch.Tensor  # (12B + 3,) flattened {T_b} + root, coordinate-scaled


@dataclass
class PoseConditioning:
    """Everything derived from one hand's keypoints: transforms and features."""

    transforms: sk.CanonicalizationSet
    f_phi: np.ndarray  # (B, c_phi)
    f_omega: np.ndarray  # (B, c_omega)
    lengths: np.ndarray  # (B,) mm
    root: np.ndarray  # (3,) mm


class InitialOccupancyModel(nn.Module):
    def __init__(self, config: InitialConfig | None = None):
        super().__init__()
        config = config or InitialConfig()
        self.config = config
        B = sk.BONES_PER_HAND
        self.pos_enc = pr.DenseStack(3, [config.d, config.d], dropout=config.dropout, final="relu")
        self.patch_enc = pr.PatchEncoder(
            config.image_height, config.image_width, config.d, config.patch
        )
        self.attn = pr.SelfAttention(config.d, heads=config.heads, residual=True)
        self.length_enc = pr.DenseStack(B, [config.cond_hidden, B * config.c_phi])
        self.pose_enc = pr.DenseStack(12 * B + 3, [config.cond_hidden, B * config.c_omega])
        self.parts = BonewiseMLP(
            B,
            3 + config.c_phi + config.c_omega,
            config.d,
            config.part_width,
            config.part_layers,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.pos_enc.layers[0].weight.dtype

    # -- conditioning --------------------------------------------------------

    def hand_inputs(self, J: np.ndarray) -> HandInputs:
        """Constant tensors for a right-convention hand; cache these per scene."""
        canon = sk.canonicalize(J)
        rot = np.stack([t.rotation for t in canon.transforms])
        trans = np.stack([t.translation for t in canon.transforms])
        lengths = sk.bone_lengths(J)
        pose_vec = np.concatenate(
            [
                np.concatenate(
                    [rot.reshape(-1, 9), trans * COORD_SCALE], axis=1
                ).reshape(-1),
                canon.root_translation * COORD_SCALE,
            ]
        )
        to = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(self.dtype)
        return HandInputs(
            rot=to(rot),
            trans=to(trans),
            lengths=to(lengths * COORD_SCALE),
            pose_vec=to(pose_vec),
        )

    def conditioning_features(self, hand: HandInputs) -> tuple[torch.Tensor, torch.Tensor]:
        B = sk.BONES_PER_HAND
        f_phi = self.length_enc(hand.lengths).reshape(B, self.config.c_phi)
        f_omega = self.pose_enc(hand.pose_vec).reshape(B, self.config.c_omega)
        return f_phi, f_omega

    # -- forward pieces ------------------------------------------------------

    def patch_tokens(self, image: torch.Tensor) -> torch.Tensor:
        return self.patch_enc(image)

    def shape_feature_t(self, x_mm: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return self.attn.query_readout(self.pos_enc(x_mm * COORD_SCALE), tokens)

    def side_logits(
        self,
        x_mm: torch.Tensor,
        tokens: torch.Tensor,
        hand: HandInputs,
        bones: list[int] | None = None,
    ) -> torch.Tensor:
        """Max part logit per query; inputs already in right-hand convention."""
        f_phi, f_omega = self.conditioning_features(hand)
        f_x = self.shape_feature_t(x_mm, tokens)
        canon = torch.einsum("bij,nj->bni", hand.rot, x_mm) + hand.trans.unsqueeze(1)
        n = x_mm.shape[0]
        head = torch.cat(
            [
                canon * CANON_SCALE,
                f_phi.unsqueeze(1).expand(-1, n, -1),
                f_omega.unsqueeze(1).expand(-1, n, -1),
            ],
            dim=-1,
        )
        logits = self.parts(head, f_x, bones)
        return logits.max(dim=0).values


def build_model(config: InitialConfig | None = None, seed: int = 0) -> InitialOccupancyModel:
    """Initialize the occupancy network.

    The part heads get two deliberate nudges on top of the shared scheme:
    output weights are widened 4x so the logits can separate inside from
    outside without first spending thousands of steps growing their scale,
    and the output bias starts at -2 because almost all of any query box is
    empty space.
    """
    model = pr.init_params(InitialOccupancyModel(config), seed)
    with torch.no_grad():
        model.parts.weights[-1].mul_(4.0)
        model.parts.biases[-1].fill_(-2.0)
    return model


def side_view(image: np.ndarray, J_hand: np.ndarray, side: str) -> tuple[np.ndarray, np.ndarray]:
    """Image and keypoints of one hand, brought to the right-hand convention."""
    if side == "right":
        return image, J_hand
    if side == "left":
        return scenes.mirror_image(image), sk.mirror_hand(J_hand)
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def _to_queries(model: InitialOccupancyModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected (n, 3) queries, got {x.shape}")
    return x


def padded_chunks(x: np.ndarray, chunk: int):
    """Yield (offset, valid_rows, fixed-size block) with the tail zero-padded.

    Keeping every block exactly ``chunk`` rows pins the BLAS kernel shapes, so
    each query's output is bit-identical no matter how the batch is composed.
    """
    for lo in range(0, x.shape[0], chunk):
        part = x[lo : lo + chunk]
        valid = part.shape[0]
        if valid < chunk:
            part = np.concatenate([part, np.zeros((chunk - valid, x.shape[1]))])
        yield lo, valid, part


def shape_feature(model: InitialOccupancyModel, x: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Per-query attention feature over the image's patch tokens; (n, d)."""
    x = _to_queries(model, x)
    with pr.inference(model):
        tokens = model.patch_tokens(pr.image_tensor(image, model))
        out = model.shape_feature_t(torch.from_numpy(x).to(model.dtype), tokens)
    return out.numpy().astype(np.float64)


def pose_conditioning(model: InitialOccupancyModel, J: np.ndarray) -> PoseConditioning:
    """Canonicalization transforms plus both conditioning feature banks."""
    canon = sk.canonicalize(J)
    with pr.inference(model):
        hand = model.hand_inputs(J)
        f_phi, f_omega = model.conditioning_features(hand)
    return PoseConditioning(
        transforms=canon,
        f_phi=f_phi.numpy().astype(np.float64),
        f_omega=f_omega.numpy().astype(np.float64),
        lengths=sk.bone_lengths(J),
        root=canon.root_translation,
    )


def eval_initial(
    model: InitialOccupancyModel,
    x: np.ndarray,
    image: np.ndarray,
    J_hand: np.ndarray,
    side: str,
    chunk: int = 4096,
    bones: list[int] | None = None,
) -> np.ndarray:
    """Occupancy probabilities of one hand at query points x (n, 3) mm."""
    x = _to_queries(model, x)
    image_c, J_c = side_view(image, J_hand, side)
    if side == "left":
        x = sk.mirror_points(x)
    out = np.empty(x.shape[0])
    with pr.inference(model):
        tokens = model.patch_tokens(pr.image_tensor(image_c, model))
        hand = model.hand_inputs(J_c)
        for lo, valid, block in padded_chunks(x, chunk):
            xt = torch.from_numpy(block).to(model.dtype)
            logits = model.side_logits(xt, tokens, hand, bones)
            # sigmoid over the full fixed-size block: elementwise kernels pick
            # their code path by length, so slicing first would cost bitwise
            # reproducibility across batch compositions
            probs = torch.sigmoid(logits).to(torch.float64).numpy()
            out[lo : lo + valid] = probs[:valid]
    return out


def eval_two_hands(
    model: InitialOccupancyModel,
    x: np.ndarray,
    image: np.ndarray,
    J: sk.TwoHandKeypoints,
    chunk: int = 4096,
) -> np.ndarray:
    """(n, 2) occupancy probabilities, column 0 left and column 1 right."""
    return np.stack(
        [
            eval_initial(model, x, image, J.left, "left", chunk),
            eval_initial(model, x, image, J.right, "right", chunk),
        ],
        axis=1,
    )


def initial_field(
    model: InitialOccupancyModel,
    image: np.ndarray,
    J: sk.TwoHandKeypoints,
    chunk: int = 4096,
):
    """Occupancy-field closure for a fixed scene; precomputes per-image state."""
    with pr.inference(model):
        views = {}
        for side, col_J in (("left", J.left), ("right", J.right)):
            image_c, J_c = side_view(image, col_J, side)
            views[side] = (
                model.patch_tokens(pr.image_tensor(image_c, model)),
                model.hand_inputs(J_c),
            )

    def field(points: np.ndarray) -> np.ndarray:
        pts = _to_queries(model, points)
        out = np.empty((pts.shape[0], 2))
        with pr.inference(model):
            for col, side in enumerate(("left", "right")):
                tokens, hand = views[side]
                q = sk.mirror_points(pts) if side == "left" else pts
                for lo, valid, block in padded_chunks(q, chunk):
                    xt = torch.from_numpy(block).to(model.dtype)
                    logits = model.side_logits(xt, tokens, hand)
                    probs = torch.sigmoid(logits).to(torch.float64).numpy()
                    out[lo : lo + valid, col] = probs[:valid]
        return out

    return field
