"""Finite-difference checks for every differentiable op and composite loss.

Each case builds a random problem from a seed and returns the worst
relative error between the analytic gradient and central differences.
Inputs to kinked ops (relu, clamp, max) are kept away from their kinks so
the numeric derivative is well defined.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SentenceBatch
from .model import ModelParams, decode_self_fed, encode, vae_posterior
from .nn import Dense, Embedding, GruCell, TextCnn, embed_soft, gru_step
from .training import loss_adv_aligned, loss_adv_cross, loss_kl, loss_rec, reconstruction

TOLERANCE = 1e-4


def _away_from(x: np.ndarray, points=(0.0,), gap: float = 0.05) -> np.ndarray:
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.where(x >= p, gap, -gap) * 2, x)
    return x


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    """Values whose pairwise gaps far exceed the probe step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def _unary(fn, rng, shape=(3, 4), low=-2.0, high=2.0, points=None) -> float:
    x = rng.uniform(low, high, shape)
    if points is not None:
        x = _away_from(x, points)
    with ad.no_grad():
        w = rng.standard_normal(fn(Tensor(x)).shape)
    return ad.grad_check(lambda t: ad.sum(fn(t) * w), x)


def _binary(fn, rng, sa, sb) -> float:
    a, b = rng.standard_normal(sa), rng.standard_normal(sb)
    with ad.no_grad():
        w = rng.standard_normal(fn(Tensor(a), Tensor(b)).shape)
    err_a = ad.grad_check(lambda t: ad.sum(fn(t, Tensor(b)) * w), a)
    err_b = ad.grad_check(lambda t: ad.sum(fn(Tensor(a), t) * w), b)
    return max(err_a, err_b)


def _params_check(loss_fn: Callable[[], Tensor], tensors, rng, max_coords: int = 12) -> float:
    return ad.grad_check_tensors(loss_fn, tensors, max_coords=max_coords, rng=rng)


def _tiny_model(seed: int, variant: str = "cross", vocab: int = 9) -> ModelParams:
    p = ModelParams(vocab, d_emb=4, d_y=2, d_z=5, seed=seed, cnn_widths=(2, 3), cnn_filters=3,
                    dropout=0.0, d_disc=4, variant=variant)
    # with small initial weights the discriminators' pre-activations sit
    # within a probe step of the relu kink; offset biases move them clear
    rng = np.random.default_rng([seed, 5])
    for bias in [p.latent_disc[0].bias] + [c.filter_bias[w] for c in p.seq_disc.values() for w in c.widths]:
        bias.data[...] = rng.choice([-1.0, 1.0], size=bias.shape) * rng.uniform(0.3, 1.0, size=bias.shape)
    return p


def _tiny_batches(rng: np.random.Generator, vocab: int = 9, width: int = 4):
    def one():
        lengths = rng.integers(1, 4, size=3)
        return SentenceBatch.from_ids([list(rng.integers(4, vocab, size=n)) for n in lengths], width)
    return one(), one()


# ------------------------------------------------------------------- cases


def check_matmul(rng):
    return _binary(ad.matmul, rng, (3, 4), (4, 2))


def check_add_rows(rng):
    return _binary(ad.add, rng, (3, 4), (4,))


def check_sub(rng):
    return _binary(ad.sub, rng, (3, 4), (3, 4))


def check_mul(rng):
    return max(_binary(ad.mul, rng, (3, 4), (3, 4)), _binary(ad.mul, rng, (3, 4), ()))


def check_neg(rng):
    return _unary(ad.neg, rng)


def check_tanh(rng):
    return _unary(ad.tanh, rng)


def check_sigmoid(rng):
    return _unary(ad.sigmoid, rng, low=-6, high=6)


def check_log_sigmoid(rng):
    return _unary(ad.log_sigmoid, rng, low=-30, high=30)


def check_exp(rng):
    return _unary(ad.exp, rng)


def check_log(rng):
    return _unary(ad.log, rng, low=0.2, high=3.0)


def check_relu(rng):
    return _unary(ad.relu, rng, points=(0.0,))


def check_clamp(rng):
    return _unary(lambda t: ad.clamp(t, -1.0, 1.0), rng, points=(-1.0, 1.0))


def check_sum(rng):
    return max(_unary(lambda t: ad.sum(t), rng), _unary(lambda t: ad.sum(t, axis=0), rng),
               _unary(lambda t: ad.sum(t, axis=1), rng))


def check_mean(rng):
    return _unary(lambda t: ad.mean(t), rng)


def check_reshape(rng):
    return _unary(lambda t: ad.reshape(t, (2, 6)), rng)


def check_getitem(rng):
    idx = rng.integers(0, 3, size=5)
    return max(_unary(lambda t: t[1:, ::2], rng), _unary(lambda t: t[idx], rng),
               _unary(lambda t: t[np.arange(3), np.array([0, 3, 1])], rng))


def check_concat(rng):
    b = rng.standard_normal((3, 2))
    return _unary(lambda t: ad.concat([t, Tensor(b), t], axis=1), rng)


def check_stack(rng):
    b = rng.standard_normal((3, 4))
    return _unary(lambda t: ad.stack([t, Tensor(b), t * 2.0], axis=1), rng)


def check_broadcast_rows(rng):
    return _unary(lambda t: ad.broadcast_rows(t, 3), rng, shape=(4,))


def check_max_axis(rng):
    x = _distinct(rng, (3, 5))
    w = rng.standard_normal(3)
    w2 = rng.standard_normal(5)
    return max(ad.grad_check(lambda t: ad.sum(ad.max_axis(t, 1) * w), x),
               ad.grad_check(lambda t: ad.sum(ad.max_axis(t, 0) * w2), x))


def check_unfold_time(rng):
    return _unary(lambda t: ad.unfold_time(t, 3), rng, shape=(2, 5, 3))


def check_softmax_temperature(rng):
    return max(_unary(lambda t: ad.softmax_temperature(t, 1.0), rng),
               _unary(lambda t: ad.softmax_temperature(t, 0.3), rng, low=-0.5, high=0.5))


def check_cross_entropy(rng):
    targets = rng.integers(0, 5, size=6)
    mask = np.array([False, False, True, False, True, False])
    return max(_unary(lambda t: ad.cross_entropy_logits(t, targets), rng, shape=(6, 5)),
               _unary(lambda t: ad.cross_entropy_logits(t, targets, mask), rng, shape=(6, 5)))


def check_embedding(rng):
    e = Embedding(7, 3, rng)
    ids = rng.integers(0, 7, size=(2, 4))
    w = rng.standard_normal((2, 4, 3))
    return _params_check(lambda: ad.sum(e.lookup(ids) * w), [e.table], rng)


def check_embed_soft(rng):
    e = Embedding(6, 3, rng)
    w = rng.standard_normal((2, 3))
    logits = rng.standard_normal((2, 6))
    return max(ad.grad_check(lambda t: ad.sum(embed_soft(e, ad.softmax_temperature(t, 1.0)) * w), logits),
               _params_check(lambda: ad.sum(embed_soft(e, ad.softmax_temperature(Tensor(logits), 1.0)) * w),
                             [e.table], rng))


def check_dense(rng):
    errs = []
    for act in (None, "tanh", "sigmoid", "relu", "leaky_relu"):
        d = Dense(4, 3, rng, activation=act)
        x = _away_from(rng.standard_normal((5, 4)), gap=0.0)
        w = rng.standard_normal((5, 3))
        errs.append(_params_check(lambda: ad.sum(d(Tensor(x)) * w), d.parameters(), rng))
    return max(errs)


def check_gru_step(rng):
    cell = GruCell(3, 4, rng)
    x, h = rng.standard_normal((2, 3)), rng.standard_normal((2, 4)) * 0.5
    w = rng.standard_normal((2, 4))
    return max(ad.grad_check(lambda t: ad.sum(gru_step(cell, t, Tensor(x)) * w), h),
               ad.grad_check(lambda t: ad.sum(gru_step(cell, Tensor(h), t) * w), x),
               _params_check(lambda: ad.sum(gru_step(cell, Tensor(h), Tensor(x)) * w), cell.parameters(), rng))


def check_textcnn(rng):
    cnn = TextCnn(3, rng, widths=(2, 3), n_filters=4, dropout=0.0)
    seq = rng.standard_normal((2, 5, 3))
    lengths = np.array([5, 3])
    w = rng.standard_normal(2)
    return max(ad.grad_check(lambda t: ad.sum(cnn(t, lengths=lengths) * w), seq),
               _params_check(lambda: ad.sum(cnn(Tensor(seq)) * w), cnn.parameters(), rng))


def check_loss_rec(rng):
    p = _tiny_model(int(rng.integers(1 << 30)))
    b1, b2 = _tiny_batches(rng)
    return _params_check(lambda: loss_rec(p, b1, b2), p.autoencoder_params().values(), rng, max_coords=6)


def check_loss_kl(rng):
    mu, lv = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)) * 0.5
    return max(ad.grad_check(lambda t: loss_kl(t, Tensor(lv)), mu),
               ad.grad_check(lambda t: loss_kl(Tensor(mu), t), lv))


def check_vae_objective(rng):
    p = _tiny_model(int(rng.integers(1 << 30)), variant="vae")
    b1, _ = _tiny_batches(rng)
    eps = rng.standard_normal((b1.size, p.d_z))

    def loss():
        mu, lv = vae_posterior(p, encode(p, b1, 1))
        r, _ = reconstruction(p, b1, 1, mu + ad.exp(lv * 0.5) * eps)
        return r + loss_kl(mu, lv)
    return _params_check(loss, p.autoencoder_params().values(), rng, max_coords=6)


def check_loss_adv_aligned(rng):
    p = _tiny_model(int(rng.integers(1 << 30)), variant="aligned")
    b1, b2 = _tiny_batches(rng)

    def loss():
        d_loss, _ = loss_adv_aligned(p, encode(p, b1, 1), encode(p, b2, 2))
        return d_loss
    tensors = list(p.latent_disc_params().values()) + [p.encoder.w_input, p.style]
    return _params_check(loss, tensors, rng, max_coords=8)


def check_loss_adv_cross(rng):
    """Discriminator loss on teacher-forced vs self-fed states, differentiated
    through the soft feedback loop.  A moderate temperature keeps the
    softmax smooth enough for finite differences."""
    p = _tiny_model(int(rng.integers(1 << 30)))
    b1, b2 = _tiny_batches(rng)

    def loss():
        _, h1 = reconstruction(p, b1, 1, encode(p, b1, 1))
        _, h2_fake = decode_self_fed(p, 1, encode(p, b2, 2), 0.5, b1.width)
        d_loss, _ = loss_adv_cross(p.seq_disc[1], h1, h2_fake, train_mode=False)
        return d_loss
    tensors = list(p.seq_disc_params(1).values()) + [p.generator.u_cand, p.projection.weight,
                                                     p.embedding.table, p.style]
    return _params_check(loss, tensors, rng, max_coords=6)


CASES: dict[str, Callable[[np.random.Generator], float]] = {
    name[len("check_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("check_")
}


def run_all(seeds=range(20), names=None) -> dict[str, float]:
    """Worst relative error per case over ``seeds``."""
    out = {}
    for name in names or CASES:
        worst = 0.0
        for s in seeds:
            worst = max(worst, CASES[name](np.random.default_rng([s, 99])))
        out[name] = worst
    return out
