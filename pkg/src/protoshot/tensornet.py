"""Dense-array compute with hand-written reverse-mode gradients.

Implements exactly what the 3-block encoder needs: same-padded 3x3
convolution, batch normalisation, ReLU, 2x2 max pooling, flatten, SGD
with momentum, plateau LR scheduling, and a binary checkpoint format.
Arrays are plain numpy ndarrays in (N, C, H, W) layout; ops run in the
input's dtype so training can stay in float32 while gradient checks use
float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeMismatch(ValueError):
    """Array shapes inconsistent with the op contract."""


class DegenerateBatch(ValueError):
    """BatchNorm in train mode needs >= 2 values per channel."""


class CheckpointFormatError(ValueError):
    """Checkpoint file corrupt or incompatible."""


# --- functional ops ---


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*9) patch matrix under 3x3 same-padding."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, zero same-padding."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-d input and kernel")
    c_out, c_in, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeMismatch(f"kernel must be 3x3, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel wants {c_in}")
    if bias.shape != (c_out,):
        raise ShapeMismatch("bias shape must be (C_out,)")
    n, _, h, w = x.shape
    out = _im2col(x) @ kernel.reshape(c_out, c_in * 9).T
    out += bias
    return np.ascontiguousarray(out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input, kernel, bias."""
    if grad_out.shape != (x.shape[0], kernel.shape[0], x.shape[2], x.shape[3]):
        raise ShapeMismatch("grad_out shape inconsistent with forward")
    n, c_in, h, w = x.shape
    c_out = kernel.shape[0]

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    g_mat = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
    grad_kernel = (g_mat.T @ _im2col(x)).reshape(c_out, c_in, 3, 3)

    # grad w.r.t. input: convolve grad_out with the spatially flipped,
    # channel-transposed kernel
    k_flip = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * 9)
    grad_x = _im2col(grad_out) @ k_flip.T
    grad_x = np.ascontiguousarray(grad_x.reshape(n, h, w, c_in).transpose(0, 3, 1, 2))
    return grad_x, grad_kernel, grad_bias


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """Per-channel normalisation. Returns (y, cache for backward).

    Train mode uses biased batch statistics and updates the running
    buffers in place; eval mode reads the running buffers.
    """
    n, c, h, w = x.shape
    if train:
        if n * h * w < 2:
            raise DegenerateBatch("need >= 2 values per channel to estimate variance")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma, train)


def batchnorm_backward(grad_out: np.ndarray, cache):
    """Gradients of batchnorm_forward w.r.t. x, gamma, beta."""
    xhat, inv_std, gamma, train = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g = grad_out * gamma[None, :, None, None]
    if not train:
        return g * inv_std[None, :, None, None], grad_gamma, grad_beta
    n, c, h, w = grad_out.shape
    m = n * h * w
    sum_g = g.sum(axis=(0, 2, 3))
    sum_gx = (g * xhat).sum(axis=(0, 2, 3))
    grad_x = (
        inv_std[None, :, None, None]
        / m
        * (m * g - sum_g[None, :, None, None] - xhat * sum_gx[None, :, None, None])
    )
    return grad_x, grad_gamma, grad_beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def maxpool2_forward(x: np.ndarray):
    """Non-overlapping 2x2 max; odd trailing row/column dropped.

    Returns (pooled, argmax indices into each 2x2 cell) for backward.
    """
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeMismatch("maxpool2 needs H, W >= 2")
    ho, wo = h // 2, w // 2
    cells = (
        x[:, :, : ho * 2, : wo * 2]
        .reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    idx = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(grad_out: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    n, c, h, w = in_shape
    ho, wo = h // 2, w // 2
    cells = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(cells, idx[..., None], grad_out[..., None], axis=-1)
    grad = np.zeros(in_shape, dtype=grad_out.dtype)
    grad[:, :, : ho * 2, : wo * 2] = (
        cells.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
    )
    return grad


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


# --- encoder ---


class ConvBlock:
    """conv 3x3 -> batchnorm -> relu -> maxpool 2x2."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        limit = math.sqrt(6.0 / (c_in * 9))
        self.kernel = rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3)).astype(dtype)
        self.bias = np.zeros(c_out, dtype=dtype)
        self.gamma = np.ones(c_out, dtype=dtype)
        self.beta = np.zeros(c_out, dtype=dtype)
        self.running_mean = np.zeros(c_out, dtype=dtype)
        self.running_var = np.ones(c_out, dtype=dtype)
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        a = conv2d_forward(x, self.kernel, self.bias)
        b, bn_cache = batchnorm_forward(
            a, self.gamma, self.beta, self.running_mean, self.running_var, train
        )
        r = relu(b)
        out, pool_idx = maxpool2_forward(r)
        self._cache = (x, bn_cache, b, pool_idx, r.shape)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x, bn_cache, b, pool_idx, r_shape = self._cache
        g = maxpool2_backward(grad_out, pool_idx, r_shape)
        g = relu_backward(g, b)
        g, g_gamma, g_beta = batchnorm_backward(g, bn_cache)
        g, g_kernel, g_bias = conv2d_backward(x, self.kernel, g)
        self.grads = {"kernel": g_kernel, "bias": g_bias, "gamma": g_gamma, "beta": g_beta}
        return g

    def param_items(self):
        return [
            ("kernel", self.kernel),
            ("bias", self.bias),
            ("gamma", self.gamma),
            ("beta", self.beta),
        ]

    def buffer_items(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Encoder:
    """Three conv blocks then flatten; input (N, 1, n_mels, W)."""

    def __init__(self, seed: int = 0, n_channels: int = 128, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.blocks = [
            ConvBlock(1, n_channels, rng, dtype),
            ConvBlock(n_channels, n_channels, rng, dtype),
            ConvBlock(n_channels, n_channels, rng, dtype),
        ]
        self.seed = seed
        self.dtype = dtype

    def encode(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatch("encoder expects (N, 1, H, W)")
        if x.shape[2] < 8 or x.shape[3] < 8:
            raise ShapeMismatch("encoder needs H, W >= 8 to survive three poolings")
        h = np.ascontiguousarray(x)
        for blk in self.blocks:
            h = blk.forward(h, train)
        return flatten(h)

    def backward(self, grad_embed: np.ndarray, out_shape) -> None:
        """Backpropagate d(loss)/d(embedding); grads land on each block."""
        g = grad_embed.reshape(out_shape)
        for blk in reversed(self.blocks):
            g = blk.backward(g)

    def last_feature_shape(self):
        """Shape of the pre-flatten activation from the latest forward."""
        blk = self.blocks[-1]
        x, _, b, pool_idx, _ = blk._cache
        n, c = pool_idx.shape[0], pool_idx.shape[1]
        return (n, c, pool_idx.shape[2], pool_idx.shape[3])

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks, start=1):
            for name, arr in blk.param_items():
                out[f"block{i}.{name}"] = arr
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks, start=1):
            for name, arr in blk.buffer_items():
                out[f"block{i}.{name}"] = arr
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks, start=1):
            for name, g in blk.grads.items():
                out[f"block{i}.{name}"] = g
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        mine = {**self.parameters(), **self.buffers()}
        for name, arr in values.items():
            if name not in mine:
                raise ShapeMismatch(f"unknown parameter {name}")
            if mine[name].shape != arr.shape:
                raise ShapeMismatch(f"{name}: shape {arr.shape} != {mine[name].shape}")
            mine[name][...] = arr

    def astype(self, dtype) -> "Encoder":
        self.dtype = dtype
        for blk in self.blocks:
            for attr in ("kernel", "bias", "gamma", "beta", "running_mean", "running_var"):
                setattr(blk, attr, getattr(blk, attr).astype(dtype))
        return self


def embedding_dim(n_mels: int, w: int, n_channels: int = 128) -> int:
    h, width = n_mels, w
    for _ in range(3):
        h, width = h // 2, width // 2
    return n_channels * h * width


# --- optimisation ---


class SGDMomentum:
    """v <- momentum*v + g; p <- p - lr*v."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.85):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
            v = self.velocity.setdefault(name, np.zeros_like(p))
            v *= self.momentum
            v += g.astype(p.dtype)
            p -= self.lr * v


@dataclass
class PlateauScheduler:
    """Halve the LR after patience+1 consecutive non-improving epochs.

    Improvement is relative: val < best*(1 - threshold).
    """

    patience: int = 5
    threshold: float = 0.01
    factor: float = 0.5
    best_loss: float = math.inf
    epochs_since_improvement: int = 0

    def step(self, val_loss: float, lr: float) -> float:
        if not math.isfinite(val_loss):
            raise ValueError("val_loss must be finite")
        if val_loss < self.best_loss * (1.0 - self.threshold):
            self.best_loss = val_loss
            self.epochs_since_improvement = 0
            return lr
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement > self.patience:
            self.epochs_since_improvement = 0
            return lr * self.factor
        return lr


# --- checkpoint format ---

_CKPT_MAGIC = b"PSCK"


def save_checkpoint(
    path: str,
    model: Encoder,
    optimizer: SGDMomentum,
    scheduler: PlateauScheduler,
    epoch: int,
    seed: int,
    config_hash: str,
) -> None:
    """JSON header (u32-length prefixed) + LE float32 blobs in header order."""
    entries = list(model.parameters().items()) + list(model.buffers().items())
    header = {
        "version": 1,
        "epoch": epoch,
        "seed": seed,
        "config_hash": config_hash,
        "optimizer": {"learning_rate": optimizer.lr, "momentum": optimizer.momentum},
        "scheduler": {
            "patience": scheduler.patience,
            "threshold": scheduler.threshold,
            "factor": scheduler.factor,
            "best_loss": scheduler.best_loss,
            "epochs_since_improvement": scheduler.epochs_since_improvement,
        },
        "params": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[Encoder, SGDMomentum, PlateauScheduler, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8 : 8 + hlen])
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: bad header") from exc
    if header.get("version") != 1:
        raise CheckpointFormatError(f"{path}: unknown version")

    shapes = {ent["name"]: ent["shape"] for ent in header["params"]}
    if "block1.kernel" not in shapes:
        raise CheckpointFormatError(f"{path}: header lists no block1.kernel")
    model = Encoder(seed=int(header["seed"]), n_channels=int(shapes["block1.kernel"][0]))
    values = {}
    off = 8 + hlen
    for ent in header["params"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(raw):
            raise CheckpointFormatError(f"{path}: truncated blob for {ent['name']}")
        values[ent["name"]] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape)
        off = end
    if off != len(raw):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    model.set_parameters(values)

    optimizer = SGDMomentum(
        lr=header["optimizer"]["learning_rate"], momentum=header["optimizer"]["momentum"]
    )
    s = header["scheduler"]
    scheduler = PlateauScheduler(
        patience=s["patience"],
        threshold=s["threshold"],
        factor=s["factor"],
        best_loss=s["best_loss"],
        epochs_since_improvement=s["epochs_since_improvement"],
    )
    return model, optimizer, scheduler, header
