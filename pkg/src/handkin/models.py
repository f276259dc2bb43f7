"""Learnable components: noise predictor, IK head, and temporal encoder."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .geometry import Camera, project
from .kinematics import JointPositions, fk_core
from .skeleton import PoseParams, SkeletonGraph, pack_params


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding: [sin(t w_i) | cos(t w_i)], w log-spaced 1..1e-4."""
    if dim % 2 != 0 or dim < 2:
        raise ValidationError("time embedding dimension must be even and >= 2")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1e-4), half)) if half > 1 else np.ones(1)
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class Mlp:
    """Dense stack with smooth (SiLU) activations between layers.

    The final layer is zero-initialized so a fresh network is the zero map;
    hidden layers use variance-preserving random init.
    """

    def __init__(self, params: ad.ParamStore, prefix: str, widths, rng):
        self.weights = []
        last = len(widths) - 2
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if i == last:
                w = np.zeros((a, b))
            else:
                w = rng.normal(size=(a, b)) * np.sqrt(2.0 / a)
            self.weights.append(
                (params.add(f"{prefix}.w{i}", w), params.add(f"{prefix}.b{i}", np.zeros(b)))
            )

    def forward(self, x):
        h = x
        for i, (w, b) in enumerate(self.weights):
            h = ad.matmul(h, w) + b
            if i < len(self.weights) - 1:
                h = ad.silu(h)
        return h


class DenoiserNet:
    """Conditional noise predictor over flattened normalized poses.

    Input is [x_t | time_embedding(t) | f]; output has the pose dimension.
    """

    def __init__(
        self,
        data_dim: int = 63,
        feature_dim: int = 42,
        time_dim: int = 32,
        hidden: int = 256,
        depth: int = 4,
        rng: np.random.Generator | None = None,
    ):
        if depth < 2:
            raise ValidationError("denoiser needs at least two layers")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.data_dim = data_dim
        self.feature_dim = feature_dim
        self.time_dim = time_dim
        self.params = ad.ParamStore()
        widths = [data_dim + time_dim + feature_dim] + [hidden] * (depth - 1) + [data_dim]
        self.mlp = Mlp(self.params, "denoiser", widths, rng)

    def config(self) -> dict:
        w0 = self.mlp.weights[0][0].data.shape[0]
        return {
            "data_dim": self.data_dim,
            "feature_dim": self.feature_dim,
            "time_dim": self.time_dim,
            "hidden": self.mlp.weights[0][0].data.shape[1],
            "depth": len(self.mlp.weights),
            "input_width": w0,
        }

    def forward(self, x_t, t, f):
        x_arr = x_t.data if isinstance(x_t, ad.Tensor) else np.asarray(x_t)
        f_arr = f.data if isinstance(f, ad.Tensor) else np.asarray(f)
        if x_arr.shape[-1] != self.data_dim:
            raise ValidationError(
                f"denoiser expects pose dim {self.data_dim}, got {x_arr.shape[-1]}"
            )
        if f_arr.shape[-1] != self.feature_dim:
            raise ValidationError(
                f"denoiser expects feature dim {self.feature_dim}, got {f_arr.shape[-1]}"
            )
        emb = time_embedding(t, self.time_dim)
        emb = np.broadcast_to(emb, x_arr.shape[:-1] + (self.time_dim,))
        h = ad.concat([x_t, emb, f], axis=-1)
        return self.mlp.forward(h)


class IkHead:
    """Maps a pose vector to raw kinematic parameters.

    The root block is emitted as a delta on the identity so the fresh network
    projects to the identity rotation; downstream sine normalization and SVD
    projection make every output constraint-satisfying by construction.
    """

    def __init__(
        self,
        graph: SkeletonGraph,
        data_dim: int = 63,
        hidden: int = 128,
        depth: int = 3,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.data_dim = data_dim
        self.num_angles = graph.num_angles
        self.num_props = graph.num_props
        self.out_dim = 9 + self.num_angles + self.num_props
        self.params = ad.ParamStore()
        widths = [data_dim] + [hidden] * (depth - 1) + [self.out_dim]
        self.mlp = Mlp(self.params, "ikhead", widths, rng)

    def config(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "num_angles": self.num_angles,
            "num_props": self.num_props,
            "hidden": self.mlp.weights[0][0].data.shape[1],
            "depth": len(self.mlp.weights),
        }

    def forward(self, x):
        """Split network output into (root_raw, angles_raw, props_raw)."""
        arr = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        if arr.shape[-1] != self.data_dim:
            raise ValidationError(
                f"ik head expects pose dim {self.data_dim}, got {arr.shape[-1]}"
            )
        out = self.mlp.forward(x)
        a = self.num_angles
        root = ad.reshape(out[..., :9], arr.shape[:-1] + (3, 3)) + np.eye(3)
        angles = out[..., 9 : 9 + a]
        props = out[..., 9 + a :]
        return root, angles, props


def ik_forward(head: IkHead, x0_hat, graph: SkeletonGraph):
    """Differentiable batched IK projection.

    x0_hat: (B, 63). Returns (root_raw, angles_raw, props_raw, positions) with
    positions (B, 21, 3) in normalized space (wrist at origin, unit anchor).
    """
    root, angles, props = head.forward(x0_hat)
    arr = x0_hat.data if isinstance(x0_hat, ad.Tensor) else np.asarray(x0_hat)
    b = arr.shape[:-1]
    positions = fk_core(graph, root, np.zeros(b + (3,)), angles, props, np.ones(b))
    return root, angles, props, positions


def ik_project(head: IkHead, x0_hat, graph: SkeletonGraph):
    """Project an arbitrary pose vector onto the constraint manifold.

    Returns (PoseParams, JointPositions); the positions are FK output of the
    returned parameters, so they satisfy every skeleton constraint regardless
    of the input.
    """
    x = np.asarray(x0_hat, dtype=np.float64)
    if x.shape != (head.data_dim,):
        raise ValidationError(f"ik_project expects a ({head.data_dim},) vector")
    root, angles, props, pos = ik_forward(head, x[None, :], graph)
    params = pack_params(
        root.data[0], np.zeros(3), angles.data[0], props.data[0], 1.0, graph=graph
    )
    return params, JointPositions(pos.data[0])


class TemporalEncoder:
    """Post-norm transformer encoder mapping pose sequences to raw angles.

    Hidden frames are excluded as attention keys (their pre-softmax scores are
    -inf), so visible frames never read from them; every frame still produces
    an output through its own stream.
    """

    def __init__(
        self,
        window: int = 5,
        data_dim: int = 63,
        out_dim: int = 41,
        dim: int = 64,
        heads: int = 2,
        layers: int = 2,
        ffn_hidden: int = 128,
        dropout: float = 0.1,
        positional: bool = True,
        rng: np.random.Generator | None = None,
    ):
        if dim % heads != 0:
            raise ValidationError("encoder width must divide evenly across heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.window = window
        self.data_dim = data_dim
        self.out_dim = out_dim
        self.dim = dim
        self.heads = heads
        self.layers = layers
        self.dropout = dropout
        self.pos_table = (
            time_embedding(np.arange(window), dim) if positional else np.zeros((window, dim))
        )
        p = self.params = ad.ParamStore()

        def dense(name, a, b):
            w = rng.normal(size=(a, b)) * np.sqrt(2.0 / a)
            return p.add(f"{name}.w", w), p.add(f"{name}.b", np.zeros(b))

        self.w_in = dense("temporal.in", data_dim, dim)
        self.blocks = []
        for i in range(layers):
            self.blocks.append(
                {
                    "qkv": dense(f"temporal.{i}.qkv", dim, 3 * dim),
                    "proj": dense(f"temporal.{i}.proj", dim, dim),
                    "ffn1": dense(f"temporal.{i}.ffn1", dim, ffn_hidden),
                    "ffn2": dense(f"temporal.{i}.ffn2", ffn_hidden, dim),
                }
            )
        self.w_out = dense("temporal.out", dim, out_dim)

    def config(self) -> dict:
        return {
            "window": self.window,
            "data_dim": self.data_dim,
            "out_dim": self.out_dim,
            "dim": self.dim,
            "heads": self.heads,
            "layers": self.layers,
            "ffn_hidden": self.blocks[0]["ffn1"][0].data.shape[1],
            "dropout": self.dropout,
        }

    def _dropout(self, x, rng, training):
        if not training or self.dropout <= 0.0:
            return x
        if rng is None:
            raise ValidationError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape if isinstance(x, ad.Tensor) else np.shape(x)) >= self.dropout)
        return x * (keep / (1.0 - self.dropout))

    def forward(self, seq, mask=None, rng=None, training: bool = False):
        x = seq.data if isinstance(seq, ad.Tensor) else np.asarray(seq, dtype=np.float64)
        length = x.shape[-2]
        if length < 1 or length > self.window:
            raise ValidationError(
                f"sequence length {length} outside [1, {self.window}]"
            )
        if x.shape[-1] != self.data_dim:
            raise ValidationError(f"encoder expects pose dim {self.data_dim}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (length,):
                raise ValidationError("mask must have one flag per frame")
            if mask.all():
                raise ValidationError("mask hides every frame")
        hd = self.dim // self.heads
        scale = 1.0 / np.sqrt(hd)
        key_block = None
        if mask is not None and mask.any():
            key_block = mask[None, None, :]  # broadcast over heads and queries

        h = ad.matmul(seq, self.w_in[0]) + self.w_in[1] + self.pos_table[:length]
        for blk in self.blocks:
            qkv = ad.matmul(h, blk["qkv"][0]) + blk["qkv"][1]
            parts = []
            for j in range(3):
                part = qkv[..., j * self.dim : (j + 1) * self.dim]
                part = ad.reshape(part, x.shape[:-1] + (self.heads, hd))
                parts.append(ad.swapaxes(part, -3, -2))  # (..., heads, L, hd)
            q, k, v = parts
            scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale
            attn = ad.softmax(scores, mask=key_block)
            ctx = ad.swapaxes(ad.matmul(attn, v), -3, -2)
            ctx = ad.reshape(ctx, x.shape[:-1] + (self.dim,))
            ctx = ad.matmul(ctx, blk["proj"][0]) + blk["proj"][1]
            h = ad.layer_norm(h + self._dropout(ctx, rng, training))
            f = ad.silu(ad.matmul(h, blk["ffn1"][0]) + blk["ffn1"][1])
            f = ad.matmul(f, blk["ffn2"][0]) + blk["ffn2"][1]
            h = ad.layer_norm(h + self._dropout(f, rng, training))
        out = ad.matmul(h, self.w_out[0]) + self.w_out[1]
        return out


def temporal_forward(enc: TemporalEncoder, seq, mask=None, rng=None, training=False):
    """Encode a pose sequence (L, 63) into per-frame raw angles (L, 41)."""
    return enc.forward(seq, mask=mask, rng=rng, training=training)


def make_training_mask(length: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean hide-mask: hidden count uniform in {0..floor(length/2)}."""
    if length < 1:
        raise ValidationError("sequence length must be at least 1")
    k = int(rng.integers(0, length // 2 + 1))
    mask = np.zeros(length, dtype=bool)
    if k:
        mask[rng.choice(length, size=k, replace=False)] = True
    return mask


def bone_length_average(per_frame_props: np.ndarray, graph: SkeletonGraph) -> np.ndarray:
    """Average per-frame proportion predictions into one shared vector.

    The mean is re-clamped to the proportion limits so adversarial inputs
    cannot smuggle out-of-range bone lengths through averaging.
    """
    p = np.asarray(per_frame_props, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] != graph.num_props:
        raise ValidationError(
            f"expected (frames, {graph.num_props}) proportions, got {p.shape}"
        )
    lo, hi = graph.prop_limit_arrays()
    return np.clip(p.mean(axis=0), lo, hi)


def synth_features(
    positions,
    cam: Camera,
    noise_sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Stand-in conditioning features: noisy normalized 2D joint projections.

    Projects the joints with the camera intrinsics, adds pixel noise, and
    normalizes pixel coordinates to [-1, 1] around the principal point.
    Accepts (..., N, 3) camera-frame positions; returns (..., 2N).
    """
    pos = positions.positions if isinstance(positions, JointPositions) else np.asarray(positions)
    uv = project(pos, cam.K)
    if noise_sigma > 0:
        uv = uv + noise_sigma * rng.standard_normal(uv.shape)
    cx, cy = cam.K[0, 2], cam.K[1, 2]
    norm = np.stack([(uv[..., 0] - cx) / cx, (uv[..., 1] - cy) / cy], axis=-1)
    return norm.reshape(norm.shape[:-2] + (norm.shape[-2] * 2,))
