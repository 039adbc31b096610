"""Encoder E, generator G, style embeddings and the discriminators, plus the
encode / decode / transfer procedures.

Layout of the recurrent states:

* the encoder's hidden size is ``d_z``; its initial state is the style
  vector zero-padded to ``d_z`` and its state after the last word is the
  content vector z;
* the generator's hidden size is ``d_y + d_z``; its initial state is
  ``concat(y, z)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EOS_ID, GO_ID, SentenceBatch
from .errors import ContractError, DimensionError, ParameterError
from .nn import Dense, Embedding, GruCell, Layer, TextCnn, embed_soft, uniform_init

DEFAULT_MAX_DECODE = 20

log = logging.getLogger(__name__)


@dataclass
class HiddenSequence:
    """Generator states h⁰…hᵀ as a b×(T+1)×d_h tensor."""

    states: Tensor
    teacher_forced: bool

    @property
    def length(self) -> int:
        return self.states.shape[1]


class ModelParams(Layer):
    """Every learned parameter of the style-transfer model."""

    def __init__(
        self,
        vocab_size: int,
        d_emb: int = 64,
        d_y: int = 32,
        d_z: int = 96,
        seed: int = 0,
        cnn_widths=(3, 4, 5),
        cnn_filters: int = 100,
        dropout: float = 0.5,
        d_disc: int = 64,
        variant: str = "cross",
    ):
        if d_y > d_z:
            raise ContractError(f"style size {d_y} must not exceed content size {d_z}")
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.d_emb, self.d_y, self.d_z = d_emb, d_y, d_z
        self.d_h = d_y + d_z
        self.variant = variant
        self.embedding = Embedding(vocab_size, d_emb, rng)
        self.encoder = GruCell(d_emb, d_z, rng)
        self.generator = GruCell(d_emb, self.d_h, rng)
        self.projection = Dense(self.d_h, vocab_size, rng)
        self.style = uniform_init(rng, (2, d_y), name="style")
        self.vae_mu = Dense(d_z, d_z, rng)
        self.vae_logvar = Dense(d_z, d_z, rng)
        self.latent_disc = [Dense(d_z, d_disc, rng, activation="leaky_relu"), Dense(d_disc, 1, rng)]
        self.seq_disc = {
            1: TextCnn(self.d_h, rng, cnn_widths, cnn_filters, dropout),
            2: TextCnn(self.d_h, rng, cnn_widths, cnn_filters, dropout),
        }

    # parameter groups --------------------------------------------------

    def autoencoder_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, layer in (("embedding", self.embedding), ("encoder", self.encoder),
                              ("generator", self.generator), ("projection", self.projection)):
            for k, v in layer.named_params().items():
                out[f"{prefix}.{k}"] = v
        out["style"] = self.style
        if self.variant == "vae":
            for prefix, layer in (("vae_mu", self.vae_mu), ("vae_logvar", self.vae_logvar)):
                for k, v in layer.named_params().items():
                    out[f"{prefix}.{k}"] = v
        return out

    def latent_disc_params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.latent_disc):
            for k, v in layer.named_params().items():
                out[f"latent_disc.{i}.{k}"] = v
        return out

    def seq_disc_params(self, which: int) -> dict[str, Tensor]:
        return {f"seq_disc{which}.{k}": v for k, v in self.seq_disc[which].named_params().items()}

    def named_params(self) -> dict[str, Tensor]:
        out = self.autoencoder_params()
        if self.variant != "vae":
            for prefix, layer in (("vae_mu", self.vae_mu), ("vae_logvar", self.vae_logvar)):
                for k, v in layer.named_params().items():
                    out[f"{prefix}.{k}"] = v
        out.update(self.latent_disc_params())
        out.update(self.seq_disc_params(1))
        out.update(self.seq_disc_params(2))
        return out

    def style_vector(self, style: int) -> Tensor:
        if style not in (1, 2):
            raise ContractError(f"style must be 1 or 2, got {style}")
        return self.style[style - 1]

    def latent_disc_logit(self, z: Tensor) -> Tensor:
        h = self.latent_disc[0](z)
        return self.latent_disc[1](h).reshape(z.shape[0])

    def latent_disc_prob(self, z: Tensor) -> Tensor:
        return ad.sigmoid(self.latent_disc_logit(z))

    def after_backward(self) -> None:
        self.embedding.pin_padding()


def _check_batch(params: ModelParams, batch: SentenceBatch) -> None:
    if batch.lengths.min() < 1:
        raise ContractError("cannot encode an empty sentence")
    if batch.ids.max() >= params.vocab_size or batch.ids.min() < 0:
        raise IndexError(f"batch contains ids outside a vocabulary of size {params.vocab_size}")


def encode(params: ModelParams, batch: SentenceBatch, style: int) -> Tensor:
    """Content vector z (b×d_z): encoder state after each sentence's last word."""
    _check_batch(params, batch)
    b = batch.size
    y = params.style_vector(style)
    h = ad.broadcast_rows(y, b)
    if params.d_z > params.d_y:
        h = ad.concat([h, np.zeros((b, params.d_z - params.d_y))], axis=1)
    T = int(batch.lengths.max())
    gx = params.encoder.project_inputs(params.embedding.lookup(batch.ids[:, :T]))
    states = []
    for t in range(T):
        h = params.encoder.step_projected(h, gx[:, t, :])
        states.append(h)
    if T == 1:
        return states[0]
    H = ad.stack(states, axis=1)
    return H[np.arange(b), batch.lengths - 1]


def vae_posterior(params: ModelParams, z_enc: Tensor) -> tuple[Tensor, Tensor]:
    """Mean and log-variance heads applied to the encoder output."""
    return params.vae_mu(z_enc), params.vae_logvar(z_enc)


def content(params: ModelParams, batch: SentenceBatch, style: int) -> Tensor:
    """Deterministic content code used for decoding: z, or the posterior mean for a VAE."""
    z = encode(params, batch, style)
    if params.variant == "vae":
        z = params.vae_mu(z)
    return z


def initial_state(params: ModelParams, style: int, z: Tensor) -> Tensor:
    if z.ndim != 2 or z.shape[1] != params.d_z:
        raise DimensionError(f"content vector must be b×{params.d_z}, got {z.shape}")
    y = ad.broadcast_rows(params.style_vector(style), z.shape[0])
    return ad.concat([y, z], axis=1)


def decode_teacher_forced(params: ModelParams, style: int, z: Tensor, batch: SentenceBatch
                          ) -> tuple[Tensor, HiddenSequence]:
    """Unroll G from (y, z) feeding ``<go>`` and the gold words.

    Returns b×W×V logits (W = batch width, targets are the words then
    ``<eos>``) and the b×(W+1)×d_h hidden states.
    """
    if z.shape[0] != batch.size:
        raise DimensionError(f"content batch {z.shape[0]} != sentence batch {batch.size}")
    if batch.width < 1:
        raise ContractError("cannot decode a zero-length batch")
    b, W = batch.size, batch.width
    h = initial_state(params, style, z)
    gx = params.generator.project_inputs(params.embedding.lookup(batch.decoder_inputs()))
    states = [h]
    for t in range(W):
        h = params.generator.step_projected(h, gx[:, t, :])
        states.append(h)
    H = ad.stack(states, axis=1)
    flat = H[:, 1:, :].reshape(b * W, params.d_h)
    logits = params.projection(flat).reshape(b, W, params.vocab_size)
    return logits, HiddenSequence(H, teacher_forced=True)


def decode_self_fed(params: ModelParams, style: int, z: Tensor, gamma: float, max_len: int
                    ) -> tuple[Tensor, HiddenSequence]:
    """Unroll G from (y, z) feeding back softmax(v_t / gamma) as soft inputs.

    Runs exactly ``max_len`` steps.  Returns b×max_len×V soft outputs and the
    b×(max_len+1)×d_h hidden states; gradients flow through the soft feed.
    """
    if not gamma > 0:
        raise ParameterError(f"temperature must be positive, got {gamma}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    b = z.shape[0]
    h = initial_state(params, style, z)
    x = params.embedding.lookup(np.full(b, GO_ID))
    states, dists = [h], []
    for _ in range(max_len):
        h = params.generator.step_projected(h, params.generator.project_inputs(x))
        dist = ad.softmax_temperature(params.projection(h), gamma)
        x = embed_soft(params.embedding, dist)
        states.append(h)
        dists.append(dist)
    return ad.stack(dists, axis=1), HiddenSequence(ad.stack(states, axis=1), teacher_forced=False)


def greedy_decode(params: ModelParams, style: int, z: Tensor, max_len: int = DEFAULT_MAX_DECODE) -> list[list[int]]:
    """Hard argmax decoding until ``<eos>`` or ``max_len``; ids exclude ``<eos>``."""
    b = z.shape[0]
    out: list[list[int]] = [[] for _ in range(b)]
    with ad.no_grad():
        h = initial_state(params, style, z)
        tok = np.full(b, GO_ID)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            h = params.generator.step_projected(h, params.generator.project_inputs(params.embedding.lookup(tok)))
            tok = params.projection(h).data.argmax(axis=1)
            for i in np.flatnonzero(~done):
                if tok[i] == EOS_ID:
                    done[i] = True
                else:
                    out[i].append(int(tok[i]))
            if done.all():
                break
    return out


def _rewrite(params: ModelParams, batch: SentenceBatch, src_style: int, tgt_style: int,
             max_len: int) -> list[list[int]]:
    with ad.no_grad():
        z = content(params, batch, src_style)
        return greedy_decode(params, tgt_style, z, max_len)


def transfer(params: ModelParams, batch: SentenceBatch, src_style: int, tgt_style: int,
             max_len: int = DEFAULT_MAX_DECODE) -> list[list[int]]:
    """G(y_tgt, E(x, y_src)) with greedy decoding; returns word ids per sentence.

    ``src_style == tgt_style`` is allowed (it is a reconstruction) but logged.
    """
    if src_style == tgt_style:
        log.warning("transfer with source style == target style (%d) is a reconstruction", src_style)
    return _rewrite(params, batch, src_style, tgt_style, max_len)


def reconstruct(params: ModelParams, batch: SentenceBatch, style: int,
                max_len: int = DEFAULT_MAX_DECODE) -> list[list[int]]:
    return _rewrite(params, batch, style, style, max_len)


def transfer_corpus(params: ModelParams, sentences, vocab, src_style: int, tgt_style: int,
                    batch_size: int = 256, max_len: int = DEFAULT_MAX_DECODE) -> list[list[str]]:
    """Transfer token sentences in batches; empty input sentences stay empty."""
    out: list[list[str]] = [[] for _ in sentences]
    idx = [i for i, s in enumerate(sentences) if len(s) > 0]
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        batch = SentenceBatch.from_tokens([sentences[i] for i in chunk], vocab)
        for i, ids in zip(chunk, _rewrite(params, batch, src_style, tgt_style, max_len)):
            out[i] = vocab.decode(ids)
    return out
