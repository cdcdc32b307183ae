"""Encoder/head CNN with block-granular freezing, implemented on numpy.

The encoder is a stack of B blocks (3x3 conv -> ReLU -> 2x2 max pool)
followed by global average pooling into a feature vector; each task head is
an affine map from features to a single logit plus a sigmoid. Parameters are
held in plain float64 arrays and every update allocates new arrays, so frozen
parameters are bit-identical by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ModelSpec",
    "ModelState",
    "init_state",
    "forward",
    "features",
    "forward_cached",
    "backward_from_logits",
    "set_trainable",
    "attach_multitask_heads",
    "attach_head",
    "drop_head",
    "assert_head_capacity",
    "gradcam",
    "params_hash",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: block channel widths and input side.

    ``block_channels`` gives the output channels of each encoder block; the
    feature dimension equals the last entry (default 256 at desk scale).
    """

    image_side: int = 64
    block_channels: tuple = (16, 32, 64, 256)

    def __post_init__(self):
        if len(self.block_channels) < 1:
            raise ValueError("need at least one encoder block")
        if any(c < 1 for c in self.block_channels):
            raise ValueError("block channels must be >= 1")
        if self.image_side % (2 ** self.n_blocks) != 0:
            raise ValueError(
                f"image_side {self.image_side} not divisible by 2^{self.n_blocks}"
            )

    @property
    def n_blocks(self) -> int:
        return len(self.block_channels)

    @property
    def feature_dim(self) -> int:
        return int(self.block_channels[-1])

    def encoder_param_count(self) -> int:
        total = 0
        c_in = 1
        for c_out in self.block_channels:
            total += c_out * c_in * 9 + c_out
            c_in = c_out
        return total

    def to_dict(self) -> dict:
        return {"image_side": self.image_side, "block_channels": list(self.block_channels)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(image_side=int(d["image_side"]), block_channels=tuple(d["block_channels"]))


@dataclass
class ModelState:
    """Parameters, trainability mask, and training provenance."""

    spec: ModelSpec
    blocks: list  # [{"W": (F, C, 3, 3), "b": (F,)}]
    heads: dict  # task -> {"w": (feature_dim,), "b": ()}
    trainable_blocks: list = field(default_factory=list)
    trainable_heads: bool = True
    provenance: list = field(default_factory=list)

    def copy(self) -> "ModelState":
        return ModelState(
            spec=self.spec,
            blocks=[{"W": blk["W"], "b": blk["b"]} for blk in self.blocks],
            heads={t: {"w": h["w"], "b": h["b"]} for t, h in self.heads.items()},
            trainable_blocks=list(self.trainable_blocks),
            trainable_heads=self.trainable_heads,
            provenance=[dict(p) for p in self.provenance],
        )

    def head_param_count(self) -> int:
        return sum(h["w"].size + 1 for h in self.heads.values())


def init_state(spec: ModelSpec, tasks, seed: int) -> ModelState:
    """He-initialized encoder, zero-initialized heads (initial output 0.5)."""
    rng = np.random.default_rng(seed)
    blocks = []
    c_in = 1
    for c_out in spec.block_channels:
        std = np.sqrt(2.0 / (c_in * 9))
        blocks.append(
            {
                "W": rng.normal(0.0, std, size=(c_out, c_in, 3, 3)),
                "b": np.zeros(c_out),
            }
        )
        c_in = c_out
    heads = {t: _zero_head(spec.feature_dim) for t in tasks}
    return ModelState(
        spec=spec,
        blocks=blocks,
        heads=heads,
        trainable_blocks=[True] * spec.n_blocks,
        trainable_heads=True,
    )


def _zero_head(feature_dim: int) -> dict:
    return {"w": np.zeros(feature_dim), "b": np.zeros(())}


def assert_head_capacity(state: ModelState) -> None:
    """Check that heads stay tiny relative to the encoder (< 5% of parameters).

    Called on production-sized models before training; deliberately not
    enforced at construction so that miniature numerics fixtures remain legal.
    """
    enc = state.spec.encoder_param_count()
    if state.heads and state.head_param_count() >= 0.05 * enc:
        raise ValueError(
            f"head parameters ({state.head_param_count()}) not small relative "
            f"to encoder ({enc}); reduce heads or grow the encoder"
        )


# ---------------------------------------------------------------------------
# forward / backward primitives


def _conv3x3(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, F)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def _conv3x3_backward(x: np.ndarray, W: np.ndarray, dout: np.ndarray):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    dW = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, 3, 3)
    db = dout.sum(axis=(0, 2, 3))
    dp = np.pad(dout, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win_d = sliding_window_view(dp, (3, 3), axis=(2, 3))  # (N, F, H, W, 3, 3)
    W_flip = W[:, :, ::-1, ::-1]
    dx = np.tensordot(win_d, W_flip, axes=([1, 4, 5], [0, 2, 3]))  # (N, H, W, C)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dW, db


def _avgpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(dout: np.ndarray, in_shape) -> np.ndarray:
    n, c, h, w = in_shape
    return np.broadcast_to(
        dout[:, :, :, None, :, None] / 4.0, (n, c, h // 2, 2, w // 2, 2)
    ).reshape(n, c, h, w)


def _encoder_forward(state: ModelState, images: np.ndarray, keep_cache: bool):
    """Run the encoder; returns (features, cache). ``images`` is (N, H, W)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != state.spec.image_side or x.shape[2] != state.spec.image_side:
        raise ValueError(
            f"expected (N, {state.spec.image_side}, {state.spec.image_side}) images, got {x.shape}"
        )
    # center [0, 1] inputs so first-layer activations are not all-positive
    h = x[:, None, :, :] - 0.5
    cache = {"inputs": [], "relu": [], "pre_pool_shape": []} if keep_cache else None
    for blk in state.blocks:
        if keep_cache:
            cache["inputs"].append(h)
        z = _conv3x3(h, blk["W"], blk["b"])
        a = np.maximum(z, 0.0)
        if keep_cache:
            cache["relu"].append(a)
            cache["pre_pool_shape"].append(a.shape)
        h = _avgpool2(a)
    feats = h.mean(axis=(2, 3))
    if keep_cache:
        cache["pooled_shape"] = h.shape
    return feats, cache


def features(state: ModelState, images: np.ndarray) -> np.ndarray:
    """Head-independent feature vectors, (N, feature_dim)."""
    feats, _ = _encoder_forward(state, images, keep_cache=False)
    return feats


def head_logits(state: ModelState, feats: np.ndarray, tasks=None) -> dict:
    tasks = list(state.heads) if tasks is None else list(tasks)
    out = {}
    for t in tasks:
        if t not in state.heads:
            raise KeyError(f"no head for task {t!r}")
        h = state.heads[t]
        out[t] = feats @ h["w"] + h["b"]
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(state: ModelState, images: np.ndarray, tasks=None) -> dict:
    """Per-task probabilities in (0, 1) for a batch of images."""
    feats = features(state, images)
    return {t: sigmoid(l) for t, l in head_logits(state, feats, tasks).items()}


def forward_cached(state: ModelState, images: np.ndarray, tasks=None):
    """Forward pass retaining activations for a subsequent backward pass."""
    feats, cache = _encoder_forward(state, images, keep_cache=True)
    logits = head_logits(state, feats, tasks)
    cache["features"] = feats
    return logits, cache


def backward_from_logits(state: ModelState, cache: dict, dlogits: dict):
    """Gradients for every parameter given d(loss)/d(logit) per task.

    Returns (block_grads, head_grads) mirroring the parameter structure.
    Gradients are computed for all parameters; the optimizer applies the
    trainability mask.
    """
    feats = cache["features"]
    n, c, hp, wp = cache["pooled_shape"]
    dfeats = np.zeros_like(feats)
    head_grads = {}
    for t, dl in dlogits.items():
        h = state.heads[t]
        head_grads[t] = {"dw": feats.T @ dl, "db": np.asarray(dl.sum())}
        dfeats += np.outer(dl, h["w"])
    dh = np.broadcast_to(
        dfeats[:, :, None, None] / (hp * wp), (n, c, hp, wp)
    ).copy()
    block_grads = [None] * len(state.blocks)
    for i in range(len(state.blocks) - 1, -1, -1):
        da = _avgpool2_backward(dh, cache["pre_pool_shape"][i])
        dz = da * (cache["relu"][i] > 0)
        dx, dW, db = _conv3x3_backward(cache["inputs"][i], state.blocks[i]["W"], dz)
        block_grads[i] = {"dW": dW, "db": db}
        dh = dx
    return block_grads, head_grads


# ---------------------------------------------------------------------------
# trainability and heads


def set_trainable(state: ModelState, tuned_blocks: int, tune_heads: bool) -> ModelState:
    """Mark the last ``tuned_blocks`` encoder blocks (and optionally heads) trainable."""
    b = state.spec.n_blocks
    if not 0 <= tuned_blocks <= b:
        raise ValueError(f"tuned_blocks must be in [0, {b}], got {tuned_blocks}")
    out = state.copy()
    out.trainable_blocks = [i >= b - tuned_blocks for i in range(b)]
    out.trainable_heads = bool(tune_heads)
    return out


def attach_head(state: ModelState, task: str) -> ModelState:
    if task in state.heads:
        raise ValueError(f"head for task {task!r} already attached")
    out = state.copy()
    out.heads[task] = _zero_head(state.spec.feature_dim)
    return out


def attach_multitask_heads(state: ModelState, tasks) -> ModelState:
    tasks = list(tasks)
    if not tasks:
        raise ValueError("tasks must be nonempty")
    if len(set(tasks)) != len(tasks):
        raise ValueError(f"duplicate task in {tasks}")
    out = state.copy()
    for t in tasks:
        if t in out.heads:
            raise ValueError(f"head for task {t!r} already attached")
        out.heads[t] = _zero_head(state.spec.feature_dim)
    return out


def drop_head(state: ModelState, task: str) -> ModelState:
    if task not in state.heads:
        raise KeyError(f"no head for task {task!r}")
    out = state.copy()
    del out.heads[task]
    return out


# ---------------------------------------------------------------------------
# GradCAM


def gradcam(state: ModelState, image: np.ndarray, task: str) -> np.ndarray:
    """Class activation map for one image, upscaled to input size, in [0, 1].

    Taps the final block's pre-pool ReLU maps; channel weights are the
    spatially pooled gradients of the task logit with respect to those maps.
    A constant weighted sum normalizes to all-zeros.
    """
    if task not in state.heads:
        raise KeyError(f"no head for task {task!r}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a single 2-D image, got shape {image.shape}")
    _, cache = _encoder_forward(state, image[None], keep_cache=True)
    maps = cache["relu"][-1][0]  # (C, h, w), final pre-pool activations
    n, c, hp, wp = cache["pooled_shape"]
    # d(logit)/d(pooled maps) = w / (hp*wp), routed back through the last pool
    h = state.heads[task]
    dpool = np.broadcast_to(h["w"][None, :, None, None] / (hp * wp), (1, c, hp, wp)).copy()
    dmaps = _avgpool2_backward(dpool, cache["pre_pool_shape"][-1])[0]
    weights = dmaps.mean(axis=(1, 2))  # (C,)
    cam = np.maximum(np.tensordot(weights, maps, axes=(0, 0)), 0.0)
    side = state.spec.image_side
    from .preprocess import _resize_bilinear

    cam = _resize_bilinear(cam, (side, side))
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo < 1e-12:
        return np.zeros((side, side))
    return (cam - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# hashing and checkpoints


def params_hash(state: ModelState, blocks=None, include_heads: bool = True) -> str:
    """SHA-256 over parameter bytes; ``blocks`` selects a subset of block indices."""
    h = hashlib.sha256()
    sel = range(len(state.blocks)) if blocks is None else blocks
    for i in sel:
        h.update(np.ascontiguousarray(state.blocks[i]["W"]).tobytes())
        h.update(np.ascontiguousarray(state.blocks[i]["b"]).tobytes())
    if include_heads:
        for t in sorted(state.heads):
            h.update(t.encode())
            h.update(np.ascontiguousarray(state.heads[t]["w"]).tobytes())
            h.update(np.ascontiguousarray(state.heads[t]["b"]).tobytes())
    return h.hexdigest()


def save_checkpoint(state: ModelState, path) -> str:
    """Write a versioned checkpoint; returns its content hash."""
    content = params_hash(state)
    meta = {
        "version": CHECKPOINT_VERSION,
        "spec": state.spec.to_dict(),
        "tasks": sorted(state.heads),
        "trainable_blocks": state.trainable_blocks,
        "trainable_heads": state.trainable_heads,
        "provenance": state.provenance,
        "content_hash": content,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, blk in enumerate(state.blocks):
        arrays[f"block{i}_W"] = blk["W"]
        arrays[f"block{i}_b"] = blk["b"]
    for j, t in enumerate(sorted(state.heads)):
        arrays[f"head{j}_w"] = state.heads[t]["w"]
        arrays[f"head{j}_b"] = state.heads[t]["b"]
    np.savez_compressed(path, **arrays)
    return content


def load_checkpoint(path) -> ModelState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} != {CHECKPOINT_VERSION}")
        spec = ModelSpec.from_dict(meta["spec"])
        blocks = [
            {"W": data[f"block{i}_W"], "b": data[f"block{i}_b"]}
            for i in range(spec.n_blocks)
        ]
        heads = {
            t: {"w": data[f"head{j}_w"], "b": data[f"head{j}_b"]}
            for j, t in enumerate(meta["tasks"])
        }
    state = ModelState(
        spec=spec,
        blocks=blocks,
        heads=heads,
        trainable_blocks=list(meta["trainable_blocks"]),
        trainable_heads=meta["trainable_heads"],
        provenance=meta["provenance"],
    )
    if params_hash(state) != meta["content_hash"]:
        raise ValueError("checkpoint content hash mismatch")
    return state
