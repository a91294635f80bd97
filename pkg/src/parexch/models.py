"""Small models with hand-written gradients, and a seeded blob dataset.

Parameters live in one flat buffer.  Layers are laid out in forward order,
each as its weight matrix (``in x out``, row-major) followed by its bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeMismatch

MODEL_KINDS = ("linear", "logistic", "mlp")


class Batch(NamedTuple):
    x: np.ndarray  # (n, input_dim)
    y: np.ndarray  # (n,) int class labels


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> Batch:
        return Batch(self.x[idx], self.y[idx])

    def as_batch(self) -> Batch:
        return Batch(self.x, self.y)


class Block(NamedTuple):
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Model:
    kind: str
    input_dim: int
    output_dim: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp needs hidden >= 1")

    @property
    def layout(self) -> list[Block]:
        dims = [self.input_dim, self.hidden, self.output_dim] if self.kind == "mlp" \
            else [self.input_dim, self.output_dim]
        blocks, off = [], 0
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            blocks.append(Block(f"W{i}", off, (din, dout)))
            off += din * dout
            blocks.append(Block(f"b{i}", off, (dout,)))
            off += dout
        return blocks

    @property
    def num_params(self) -> int:
        last = self.layout[-1]
        return last.offset + last.size

    def unpack(self, params: np.ndarray) -> list[np.ndarray]:
        """Views into ``params``, one per layout block."""
        if params.shape != (self.num_params,):
            raise ShapeMismatch(f"expected {self.num_params} params, got shape {params.shape}")
        return [params[b.offset:b.offset + b.size].reshape(b.shape) for b in self.layout]

    def init_params(self, seed: int, dtype=np.float32, scale: float = 0.1) -> np.ndarray:
        rng = np.random.default_rng(seed)
        params = np.zeros(self.num_params, dtype=dtype)
        for b in self.layout:
            if b.name.startswith("W"):
                fan_in = b.shape[0]
                params[b.offset:b.offset + b.size] = rng.normal(0.0, scale / np.sqrt(fan_in), b.size)
        return params

    def _check(self, params: np.ndarray, batch: Batch) -> None:
        x = batch.x
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"inputs of shape {x.shape}, model wants (n, {self.input_dim})")
        if batch.y.shape != (x.shape[0],):
            raise ShapeMismatch(f"{batch.y.shape} labels for {x.shape[0]} examples")
        if x.shape[0] == 0:
            raise ShapeMismatch("empty batch")

    def outputs(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        x = x.astype(params.dtype, copy=False)
        blocks = self.unpack(params)
        if self.kind == "mlp":
            w0, b0, w1, b1 = blocks
            return np.tanh(x @ w0 + b0) @ w1 + b1
        w, b = blocks
        return x @ w + b

    def forward_backward(self, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
        """Mean loss over the batch and its gradient, in the dtype of ``params``."""
        self._check(params, batch)
        x = batch.x.astype(params.dtype, copy=False)
        n = x.shape[0]
        grad = np.zeros_like(params)
        gblocks = self.unpack(grad)
        blocks = self.unpack(params)

        if self.kind == "mlp":
            w0, b0, w1, b1 = blocks
            h = np.tanh(x @ w0 + b0)
            logits = h @ w1 + b1
        else:
            w, b = blocks
            h = x
            logits = x @ w + b

        if self.kind == "linear":
            resid = logits - _one_hot(batch.y, self.output_dim, params.dtype)
            loss = 0.5 * float(np.sum(resid * resid)) / n
            dout = resid / n
        else:
            logp = _log_softmax(logits)
            loss = -float(np.mean(logp[np.arange(n), batch.y]))
            dout = np.exp(logp)
            dout[np.arange(n), batch.y] -= 1.0
            dout /= n

        gw_out, gb_out = gblocks[-2], gblocks[-1]
        gw_out[...] = h.T @ dout
        gb_out[...] = dout.sum(axis=0)
        if self.kind == "mlp":
            dh = (dout @ w1.T) * (1.0 - h * h)
            gblocks[0][...] = x.T @ dh
            gblocks[1][...] = dh.sum(axis=0)
        return loss, grad

    def loss(self, params: np.ndarray, batch: Batch) -> float:
        return self.forward_backward(params, batch)[0]

    def evaluate(self, params: np.ndarray, data: Dataset | Batch) -> dict[str, float]:
        batch = data.as_batch() if isinstance(data, Dataset) else data
        loss, _ = self.forward_backward(params, batch)
        pred = np.argmax(self.outputs(params, batch.x), axis=1)
        return {"loss": loss, "error_rate": float(np.mean(pred != batch.y))}


def forward_backward(model: Model, params: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    return model.forward_backward(params, batch)


def evaluate(model: Model, params: np.ndarray, data: Dataset | Batch) -> dict[str, float]:
    return model.evaluate(params, data)


def _one_hot(y: np.ndarray, classes: int, dtype) -> np.ndarray:
    out = np.zeros((y.size, classes), dtype=dtype)
    out[np.arange(y.size), y] = 1.0
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def make_synthetic(seed: int, n: int, input_dim: int, classes: int,
                   difficulty: float = 0.0) -> Dataset:
    """Gaussian-blob classification data, reproducible bit-for-bit from ``seed``.

    Class centres sit on a sphere of radius 3.  Each example is its centre plus
    a point drawn uniformly from a ball of radius 0.45 times the smallest
    centre distance, which keeps the classes linearly separable, plus Gaussian
    noise with standard deviation ``difficulty``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(classes, input_dim))
    centres *= 3.0 / np.linalg.norm(centres, axis=1, keepdims=True)
    gaps = np.linalg.norm(centres[:, None] - centres[None], axis=2)
    min_gap = gaps[~np.eye(classes, dtype=bool)].min()

    y = rng.integers(0, classes, size=n)
    direction = rng.normal(size=(n, input_dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = 0.45 * min_gap * rng.random(n) ** (1.0 / input_dim)
    x = centres[y] + direction * radius[:, None]
    if difficulty > 0:
        x += rng.normal(scale=difficulty, size=x.shape)
    return Dataset(x.astype(np.float32), y.astype(np.int64), classes)
