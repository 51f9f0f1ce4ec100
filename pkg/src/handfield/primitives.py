"""Trainable building blocks shared by all networks, plus parameter plumbing.

Everything here is a small torch module with a fixed contract: unbatched
tensors (token sequences, images as (h, w, c)), ReLU activations, and
deterministic seeded initialization — weights Glorot-uniform in
±sqrt(6 / (fan_in + fan_out)), biases zero. Training runs in float32;
gradient-check tests switch modules to float64 via ``.double()``.

Checkpoints are directories of raw little-endian float32 arrays, one file per
named parameter, described by a JSON manifest.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

# Millimeters carry magnitudes in the hundreds; network inputs derived from
# coordinates, lengths, or translations are multiplied by this scale so that
# activations start out order-one under the default initialization.
COORD_SCALE = 0.01

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint directory is missing or inconsistent."""


# --- blocks -----------------------------------------------------------------


class DenseStack(nn.Module):
    """Fully connected stack: each hidden layer is affine -> ReLU -> dropout.

    ``final`` selects the output activation: "none", "relu" (with dropout,
    making the stack a pure feature encoder), or "sigmoid".
    """

    def __init__(self, in_dim: int, widths: list[int], dropout: float = 0.0, final: str = "none"):
        super().__init__()
        if not widths or any(w < 1 for w in widths):
            raise ValueError("widths must be positive")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if final not in ("none", "relu", "sigmoid"):
            raise ValueError(f"unknown final activation {final!r}")
        self.final = final
        self.layers = nn.ModuleList()
        prev = in_dim
        for w in widths:
            self.layers.append(nn.Linear(prev, w))
            prev = w
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final == "relu":
                x = self.drop(torch.relu(x))
            elif self.final == "sigmoid":
                x = torch.sigmoid(x)
        return x


class SelfAttention(nn.Module):
    """Multi-head self-attention over an unbatched (T, d) token sequence."""

    def __init__(self, dim: int, heads: int = 2, residual: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.residual = residual
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        return x.view(x.shape[0], self.heads, self.head_dim).transpose(0, 1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        q = self._heads(self.q_proj(tokens))
        k = self._heads(self.k_proj(tokens))
        v = self._heads(self.v_proj(tokens))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (att @ v).transpose(0, 1).reshape(tokens.shape[0], self.dim)
        out = self.out_proj(out)
        return tokens + out if self.residual else out

    def query_readout(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Per query i, the first output row of ``forward([q_i] ++ context)``.

        Equivalent to n separate full self-attention passes over (1 + P)
        tokens, but the context keys/values are projected once and shared.
        """
        n = queries.shape[0]
        q = self._heads(self.q_proj(queries))  # (H, n, dh)
        k_self = self._heads(self.k_proj(queries))
        v_self = self._heads(self.v_proj(queries))
        k_ctx = self._heads(self.k_proj(context))  # (H, P, dh)
        v_ctx = self._heads(self.v_proj(context))

        logit_self = (q * k_self).sum(-1, keepdim=True)  # query attends to itself
        logit_ctx = q @ k_ctx.transpose(-1, -2)
        att = torch.softmax(
            torch.cat([logit_self, logit_ctx], dim=-1) / math.sqrt(self.head_dim), dim=-1
        )
        out = att[..., :1] * v_self + att[..., 1:] @ v_ctx
        out = out.transpose(0, 1).reshape(n, self.dim)
        out = self.out_proj(out)
        return queries + out if self.residual else out


class VectorCrossAttention(nn.Module):
    """Subtraction-based vector attention of one query over its K context tokens.

    Channel-wise weights come from a learned function of (q - k_i + delta_i),
    where delta_i encodes the relative position; the output is the weight-
    modulated sum of value tokens.
    """

    def __init__(self, dim: int, pos_dim: int = 3):
        super().__init__()
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.pos_mlp = DenseStack(pos_dim, [dim, dim])
        self.weight_mlp = DenseStack(dim, [dim, dim])

    def forward(
        self, query: torch.Tensor, context: torch.Tensor, rel_pos: torch.Tensor
    ) -> torch.Tensor:
        """query (n, d); context (n, K, d); rel_pos (n, K, pos_dim) -> (n, d)."""
        if context.shape[-2] == 0:
            raise ValueError("vector cross attention needs at least one context token")
        q = self.q_proj(query).unsqueeze(-2)
        k = self.k_proj(context)
        v = self.v_proj(context)
        delta = self.pos_mlp(rel_pos)
        weights = torch.softmax(self.weight_mlp(q - k + delta), dim=-2)
        return (weights * v).sum(dim=-2)


class GraphConv(nn.Module):
    """One graph convolution: h' = act(W_self h + W_nb mean_{u in N(v)} h_u + b)."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu"):
        super().__init__()
        if activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        self.self_lin = nn.Linear(in_dim, out_dim)
        self.nb_lin = nn.Linear(in_dim, out_dim, bias=False)
        self.activation = activation

    def forward(self, feats: torch.Tensor, nb_mean: torch.Tensor) -> torch.Tensor:
        """feats (N, c); nb_mean (N, N) row-normalized adjacency (zero rows ok)."""
        y = self.self_lin(feats) + self.nb_lin(nb_mean @ feats)
        return torch.relu(y) if self.activation == "relu" else y


class ResidualGcn(nn.Module):
    """Stack of graph convolutions with residual adds wherever widths match."""

    def __init__(self, in_dim: int, width: int, layers: int = 4):
        super().__init__()
        dims = [in_dim] + [width] * layers
        self.layers = nn.ModuleList(
            GraphConv(dims[i], dims[i + 1]) for i in range(layers)
        )

    def forward(self, feats: torch.Tensor, nb_mean: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            y = layer(feats, nb_mean)
            feats = feats + y if y.shape == feats.shape else y
        return feats


def mean_adjacency(num_nodes: int, edges: np.ndarray) -> torch.Tensor:
    """Row-normalized adjacency for undirected edges; isolated nodes get zero rows."""
    A = np.zeros((num_nodes, num_nodes), dtype=np.float64)
    for i, j in np.asarray(edges).reshape(-1, 2):
        A[i, j] = 1.0
        A[j, i] = 1.0
    deg = A.sum(axis=1, keepdims=True)
    np.divide(A, deg, out=A, where=deg > 0)
    return torch.from_numpy(A)


class PatchEncoder(nn.Module):
    """Linear patch embedding: 8x8 pixel blocks -> d-dim tokens + positional embedding."""

    def __init__(self, height: int, width: int, dim: int, patch: int = 8, channels: int = 3):
        super().__init__()
        if height % patch or width % patch:
            raise ValueError(f"image {height}x{width} not divisible by patch {patch}")
        self.patch = patch
        self.grid = (height // patch, width // patch)
        self.num_patches = self.grid[0] * self.grid[1]
        self.proj = nn.Linear(patch * patch * channels, dim)
        self.pos = nn.Parameter(torch.zeros(self.num_patches, dim))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """image (h, w, c) -> tokens (p, d), patches in row-major grid order."""
        gh, gw = self.grid
        p = self.patch
        x = image.reshape(gh, p, gw, p, -1).permute(0, 2, 1, 3, 4)
        x = x.reshape(self.num_patches, -1)
        return self.proj(x) + self.pos


class ImageEncoderDecoder(nn.Module):
    """Strided conv encoder to a pooled bottleneck, deconv decoder to a feature map.

    forward(image (h, w, 3)) -> (G (h, w, f), z (latent,)).
    """

    def __init__(
        self,
        channels: tuple = (16, 32, 64),
        feature_dim: int = 32,
        latent_dim: int = 64,
        in_channels: int = 3,
    ):
        super().__init__()
        c1, c2, c3 = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, c1, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c2, c3, 4, stride=2, padding=1),
            nn.ReLU(),
        )
        self.latent_head = nn.Linear(c3, latent_dim)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(c1, c1, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, feature_dim, 1),
        )

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if image.shape[0] % 8 or image.shape[1] % 8:
            raise ValueError(f"image dims {tuple(image.shape[:2])} not divisible by 8")
        x = image.permute(2, 0, 1).unsqueeze(0)
        h = self.encoder(x)
        z = self.latent_head(h.mean(dim=(2, 3))).squeeze(0)
        G = self.decoder(h).squeeze(0).permute(1, 2, 0)
        return G, z


def bilinear_sample(G: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear interpolation of a (h, w, f) map at continuous (u, v) pixel coords.

    Row index is v, column index is u; coordinates outside the grid clamp to
    the border. Integer coordinates return the grid value exactly.
    """
    h, w = G.shape[0], G.shape[1]
    u = uv[..., 0].clamp(0.0, w - 1.0)
    v = uv[..., 1].clamp(0.0, h - 1.0)
    u0 = u.floor().clamp(max=w - 2) if w > 1 else torch.zeros_like(u)
    v0 = v.floor().clamp(max=h - 2) if h > 1 else torch.zeros_like(v)
    fu = (u - u0).unsqueeze(-1)
    fv = (v - v0).unsqueeze(-1)
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)
    return (
        (1 - fu) * (1 - fv) * G[v0, u0]
        + fu * (1 - fv) * G[v0, u1]
        + (1 - fu) * fv * G[v1, u0]
        + fu * fv * G[v1, u1]
    )


# --- parameter store --------------------------------------------------------


def parameter_names(module: nn.Module) -> list[str]:
    """Sorted parameter names; the canonical iteration order everywhere."""
    return sorted(name for name, _ in module.named_parameters())


def _fans(shape: torch.Size) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 3:  # stacked weight matrices, e.g. one per bone
        return shape[2], shape[1]
    if len(shape) == 4:  # conv kernels
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    raise ValueError(f"no fan rule for parameter shape {tuple(shape)}")


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically initialize: Glorot-uniform weights, zero 1-d params (biases)."""
    gen = torch.Generator().manual_seed(seed)
    params = dict(module.named_parameters())
    with torch.no_grad():
        for name in sorted(params):
            p = params[name]
            if p.ndim <= 1:
                p.zero_()
            else:
                fan_in, fan_out = _fans(p.shape)
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.uniform_(-bound, bound, generator=gen)
    return module


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(module: nn.Module, directory: Path, component: str, config: dict) -> None:
    """Write one .bin per parameter (little-endian float32) plus manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = dict(module.named_parameters())
    arrays = {}
    for name in sorted(params):
        data = params[name].detach().cpu().to(torch.float32).numpy().astype("<f4")
        (directory / f"{name}.bin").write_bytes(data.tobytes())
        arrays[name] = {"shape": list(data.shape), "dtype": "float32"}
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "component": component,
        "config": config,
        "config_digest": config_digest(config),
        "arrays": arrays,
    }
    with (directory / "manifest.json").open("w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(module: nn.Module, directory: Path, component: str | None = None) -> dict:
    """Load parameters saved by save_checkpoint; returns the stored config.

    The module must have exactly the manifest's parameter names and shapes.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')} in {directory}"
        )
    if component is not None and manifest.get("component") != component:
        raise CheckpointError(
            f"checkpoint in {directory} holds component "
            f"{manifest.get('component')!r}, expected {component!r}"
        )
    params = dict(module.named_parameters())
    arrays = manifest["arrays"]
    if set(arrays) != set(params):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(
            f"checkpoint/model parameter mismatch in {directory}: "
            f"missing {missing}, unexpected {extra}"
        )
    with torch.no_grad():
        for name in sorted(arrays):
            shape = tuple(arrays[name]["shape"])
            if tuple(params[name].shape) != shape:
                raise CheckpointError(
                    f"shape mismatch for {name} in {directory}: "
                    f"checkpoint {shape}, model {tuple(params[name].shape)}"
                )
            raw = (directory / f"{name}.bin").read_bytes()
            data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            params[name].copy_(torch.from_numpy(data).to(params[name].dtype))
    return manifest.get("config", {})


def image_tensor(image: np.ndarray, like: nn.Module) -> torch.Tensor:
    """Numpy (h, w, c) image to a torch tensor in the module's parameter dtype."""
    dtype = next(like.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(image)).to(dtype)


@contextlib.contextmanager
def inference(module: nn.Module):
    """eval() plus no_grad() for the duration of a call, restoring train mode.

    Evaluation helpers run inside this so that probing a model mid-training
    (checkpoint callbacks, metric hooks) cannot silently switch off dropout
    for the remaining optimizer steps.
    """
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        module.train(was_training)
