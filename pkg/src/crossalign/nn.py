"""Layers built on :mod:`crossalign.autodiff`: embeddings, GRU cell, dense
layers and the Kim-style convolutional sequence classifier."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, NonFiniteError

INIT_SCALE = 0.1


def uniform_init(rng: np.random.Generator, shape, scale: float = INIT_SCALE, name: str | None = None) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Layer:
    """Base class: subclasses list their parameters in ``named_params``."""

    def named_params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Embedding(Layer):
    """Token embedding table whose padding row stays the zero vector."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, pad_id: int | None = 0):
        self.table = uniform_init(rng, (vocab_size, dim), name="table")
        self.pad_id = pad_id
        if pad_id is not None:
            self.table.data[pad_id] = 0.0

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def named_params(self) -> dict[str, Tensor]:
        return {"table": self.table}

    def lookup(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id out of range for vocabulary of size {self.vocab_size}")
        return self.table[ids]

    def pin_padding(self) -> None:
        """Drop any gradient on the padding row so optimisers leave it at zero."""
        if self.pad_id is not None and self.table.grad is not None:
            self.table.grad[self.pad_id] = 0.0


def embed_soft(e: Embedding, dist: Tensor, atol: float = 1e-6) -> Tensor:
    """Expected embedding under a distribution over the vocabulary (b×V → b×d)."""
    if dist.ndim != 2 or dist.shape[1] != e.vocab_size:
        raise DimensionError(f"embed_soft: distribution shape {dist.shape} vs vocabulary {e.vocab_size}")
    sums = dist.data.sum(axis=1)
    if not np.all(np.isfinite(sums)):
        raise NonFiniteError("embed_soft: non-finite distribution")
    if not np.allclose(sums, 1.0, atol=atol, rtol=0.0):
        raise ContractError(f"embed_soft: rows must sum to 1, got {sums.min():.6g}..{sums.max():.6g}")
    return dist @ e.table


class Dense(Layer):
    """Affine map followed by an optional activation (``tanh``, ``relu``, ``sigmoid``)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, activation: str | None = None):
        if activation not in (None, "tanh", "relu", "sigmoid", "leaky_relu"):
            raise ContractError(f"unknown activation {activation!r}")
        self.weight = uniform_init(rng, (d_in, d_out), name="weight")
        self.bias = zeros_param((d_out,), name="bias")
        self.activation = activation

    def named_params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise DimensionError(f"Dense expects b×{self.weight.shape[0]}, got {x.shape}")
        out = x @ self.weight + self.bias
        if self.activation == "tanh":
            out = ad.tanh(out)
        elif self.activation == "relu":
            out = ad.relu(out)
        elif self.activation == "sigmoid":
            out = ad.sigmoid(out)
        elif self.activation == "leaky_relu":
            out = ad.relu(out) + ad.relu(-out) * -0.2
        return out


class GruCell(Layer):
    """Single GRU cell.

    z = σ(x W_z + h U_z + b_z), r = σ(x W_r + h U_r + b_r),
    h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h), h' = (1 − z) ⊙ h + z ⊙ h̃.

    Input weights for the three gates are stored side by side in
    ``w_input`` (d_in × 3d_h, order z, r, h̃) so a whole teacher-forced
    sequence can be projected in one matmul.
    """

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.w_input = uniform_init(rng, (d_in, 3 * d_hidden), name="w_input")
        self.bias = zeros_param((3 * d_hidden,), name="bias")
        self.u_gates = uniform_init(rng, (d_hidden, 2 * d_hidden), name="u_gates")
        self.u_cand = uniform_init(rng, (d_hidden, d_hidden), name="u_cand")

    def named_params(self) -> dict[str, Tensor]:
        return {"w_input": self.w_input, "bias": self.bias, "u_gates": self.u_gates, "u_cand": self.u_cand}

    def project_inputs(self, x: Tensor) -> Tensor:
        """x W + b for b×d_in (or b×T×d_in) inputs."""
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"GRU expects inputs of width {self.d_in}, got {x.shape}")
        if x.ndim == 3:
            b, T, _ = x.shape
            flat = x.reshape(b * T, self.d_in) @ self.w_input + self.bias
            return flat.reshape(b, T, 3 * self.d_hidden)
        return x @ self.w_input + self.bias

    def step_projected(self, h: Tensor, gx: Tensor) -> Tensor:
        d = self.d_hidden
        if h.ndim != 2 or h.shape[1] != d:
            raise DimensionError(f"GRU hidden state must be b×{d}, got {h.shape}")
        gates = ad.sigmoid(gx[:, : 2 * d] + h @ self.u_gates)
        z = gates[:, :d]
        r = gates[:, d:]
        cand = ad.tanh(gx[:, 2 * d:] + (r * h) @ self.u_cand)
        return h + z * (cand - h)


def gru_step(cell: GruCell, h: Tensor, x: Tensor) -> Tensor:
    """One recurrence step: (b×d_h, b×d_in) → b×d_h."""
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise DimensionError(f"gru_step: hidden {h.shape} and input {x.shape} disagree")
    return cell.step_projected(h, cell.project_inputs(x))


class TextCnn(Layer):
    """Convolution over time with several widths, ReLU, max-over-time pooling,
    dropout and a dense layer to a single logit per sequence."""

    def __init__(
        self,
        d_in: int,
        rng: np.random.Generator,
        widths: Iterable[int] = (3, 4, 5),
        n_filters: int = 100,
        dropout: float = 0.5,
    ):
        self.widths = tuple(sorted(int(w) for w in widths))
        if not self.widths or self.widths[0] < 1:
            raise ContractError(f"invalid filter widths {widths}")
        self.d_in = d_in
        self.n_filters = n_filters
        self.dropout = dropout
        self.filters = {w: uniform_init(rng, (w * d_in, n_filters), name=f"filter{w}") for w in self.widths}
        self.filter_bias = {w: zeros_param((n_filters,), name=f"filter_bias{w}") for w in self.widths}
        self.out = Dense(n_filters * len(self.widths), 1, rng)

    def named_params(self) -> dict[str, Tensor]:
        params = {}
        for w in self.widths:
            params[f"filter{w}"] = self.filters[w]
            params[f"filter_bias{w}"] = self.filter_bias[w]
        params["out.weight"] = self.out.weight
        params["out.bias"] = self.out.bias
        return params

    @property
    def max_width(self) -> int:
        return self.widths[-1]

    def features(self, seq: Tensor, lengths=None) -> Tensor:
        """Pooled convolutional features, b × (n_filters · n_widths)."""
        if seq.ndim != 3 or seq.shape[2] != self.d_in:
            raise DimensionError(f"TextCnn expects b×T×{self.d_in}, got {seq.shape}")
        b, T, _ = seq.shape
        if T < self.max_width:
            raise ContractError(f"sequence length {T} shorter than filter width {self.max_width}; pad first")
        pooled = []
        for w in self.widths:
            L = T - w + 1
            windows = ad.unfold_time(seq, w).reshape(b * L, w * self.d_in)
            act = ad.relu(windows @ self.filters[w] + self.filter_bias[w]).reshape(b, L, self.n_filters)
            if lengths is not None:
                # windows reaching past a sentence's end never win the max
                last = np.maximum(np.asarray(lengths) - w + 1, 1)
                invalid = np.arange(L)[None, :] >= last[:, None]
                act = act + np.broadcast_to(invalid[:, :, None] * -1e9, act.shape)
            pooled.append(ad.max_axis(act, axis=1))
        return ad.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]

    def __call__(self, seq: Tensor, train_mode: bool = False, rng: np.random.Generator | None = None,
                 lengths=None) -> Tensor:
        return textcnn_forward(self, seq, train_mode, rng=rng, lengths=lengths)


def textcnn_forward(cnn: TextCnn, seq: Tensor, train_mode: bool, rng: np.random.Generator | None = None,
                    lengths=None) -> Tensor:
    """Logit per sequence (shape b).  Dropout is applied only in ``train_mode``."""
    feats = cnn.features(seq, lengths=lengths)
    if train_mode and cnn.dropout > 0:
        if rng is None:
            raise ContractError("train_mode dropout needs an rng")
        keep = 1.0 - cnn.dropout
        mask = (rng.random(feats.shape) < keep) / keep
        feats = feats * mask
    return cnn.out(feats).reshape(feats.shape[0])
