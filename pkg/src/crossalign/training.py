"""Losses, optimiser and the three training procedures (VAE, aligned
auto-encoder, cross-aligned auto-encoder)."""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SentenceBatch
from .errors import ContractError, DivergenceError, NonFiniteError, ParameterError
from .model import (
    HiddenSequence,
    ModelParams,
    decode_self_fed,
    decode_teacher_forced,
    encode,
    vae_posterior,
)
from .nn import TextCnn

VARIANTS = ("vae", "aligned", "cross")


@dataclass
class TrainingConfig:
    """All tunables of a training run.  Defaults follow the published
    hyper-parameters (lambda 1, gamma 0.001, learning rate 1e-4) with
    desk-scale network sizes."""

    variant: str = "cross"
    lam: float = 1.0
    gamma: float = 0.001
    learning_rate: float = 1e-4
    disc_learning_rate: float | None = None
    batch_size: int = 64
    d_emb: int = 64
    d_y: int = 32
    d_z: int = 96
    max_epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    noise_std: float = 1.0
    clip_norm: float = 30.0
    beta1: float = 0.5
    beta2: float = 0.999
    cnn_widths: tuple[int, ...] = (3, 4, 5)
    cnn_filters: int = 100
    dropout: float = 0.5
    d_disc: int = 64
    adv_loss: str = "minimax"
    adv_gate: float | None = None
    ae_warmup: int = 0
    min_count: int = 1
    max_decode: int = 20
    version: int = 1

    def __post_init__(self):
        self.cnn_widths = tuple(int(w) for w in self.cnn_widths)
        self.validate()

    @property
    def d_h(self) -> int:
        return self.d_y + self.d_z

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if self.d_y > self.d_z:
            raise ParameterError("d_y must not exceed d_z")
        if self.adv_loss not in ("minimax", "nonsaturating"):
            raise ParameterError(f"unknown adversarial loss {self.adv_loss!r}")
        if self.ae_warmup < 0:
            raise ParameterError(f"ae_warmup must be >= 0, got {self.ae_warmup}")
        if self.adv_gate is not None and not self.adv_gate > 0:
            raise ParameterError(f"adv_gate must be positive, got {self.adv_gate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


# ---------------------------------------------------------------- optimiser


class Adam:
    """Adam over a named parameter set."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params.values() if p.grad is not None))

    def clip(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if max_norm and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        for k in self.params:
            self.m[k] = np.array(arrays[f"{prefix}.m.{k}"]).reshape(self.params[k].shape)
            self.v[k] = np.array(arrays[f"{prefix}.v.{k}"]).reshape(self.params[k].shape)


# ------------------------------------------------------------------- losses


def _nll(logits: Tensor, batch: SentenceBatch) -> Tensor:
    b, W, V = logits.shape
    return ad.cross_entropy_logits(logits.reshape(b * W, V), batch.decoder_targets().reshape(-1),
                                   batch.target_pad_mask().reshape(-1))


def reconstruction(params: ModelParams, batch: SentenceBatch, style: int, z: Tensor
                   ) -> tuple[Tensor, HiddenSequence]:
    """Per-token negative log-likelihood of one domain, plus its teacher-forced states."""
    logits, hidden = decode_teacher_forced(params, style, z, batch)
    return _nll(logits, batch), hidden


def loss_rec(params: ModelParams, batch1: SentenceBatch, batch2: SentenceBatch) -> Tensor:
    """Sum over both domains of the mean token negative log-likelihood."""
    if batch1.size == 0 or batch2.size == 0:
        raise ContractError("loss_rec needs two non-empty batches")
    r1, _ = reconstruction(params, batch1, 1, encode(params, batch1, 1))
    r2, _ = reconstruction(params, batch2, 2, encode(params, batch2, 2))
    return r1 + r2


def loss_kl(mu: Tensor, log_var: Tensor) -> Tensor:
    """Batch mean of KL(N(mu, diag exp(log_var)) || N(0, I))."""
    if mu.shape != log_var.shape:
        raise ContractError(f"mu {mu.shape} and log_var {log_var.shape} differ")
    b = mu.shape[0] if mu.ndim > 1 else 1
    per = ad.exp(log_var) + mu * mu - 1.0 - log_var
    return ad.sum(per) * (0.5 / b)


def _pair_loss(l_real: Tensor, l_fake: Tensor, adv_loss: str) -> tuple[Tensor, Tensor]:
    # from logits: log D = log_sigmoid(l) and log(1 - D) = log_sigmoid(-l), so
    # a confident discriminator never zeroes the gradient through a clamp
    d_loss = -ad.mean(ad.log_sigmoid(l_real)) - ad.mean(ad.log_sigmoid(-l_fake))
    if adv_loss == "minimax":
        adv_term = -d_loss
    else:
        # generator pushes fakes toward the "real" label instead of maximising d_loss
        adv_term = -ad.mean(ad.log_sigmoid(l_fake))
    return d_loss, adv_term


def loss_adv_aligned(params: ModelParams, z1: Tensor, z2: Tensor, adv_loss: str = "minimax"
                     ) -> tuple[Tensor, Tensor]:
    """Latent discriminator loss −mean log D(z1) − mean log(1 − D(z2)).

    Returns ``(d_loss, adv_term)``; the encoder/generator objective is
    ``L_rec + lam * adv_term`` where ``adv_term = −d_loss`` for the min-max game.
    """
    if z1.shape[1:] != z2.shape[1:]:
        raise ContractError(f"z1 {z1.shape} and z2 {z2.shape} differ in width")
    return _pair_loss(params.latent_disc_logit(z1), params.latent_disc_logit(z2), adv_loss)


def loss_adv_cross(disc: TextCnn, real_h: HiddenSequence, fake_h: HiddenSequence,
                   rng: np.random.Generator | None = None, train_mode: bool = True,
                   adv_loss: str = "minimax") -> tuple[Tensor, Tensor]:
    """Sequence discriminator loss on teacher-forced (real) vs self-fed (fake)
    hidden-state sequences."""
    if not real_h.teacher_forced or fake_h.teacher_forced:
        raise ContractError("real states must be teacher-forced and fake states self-fed")
    if real_h.states.shape[0] != fake_h.states.shape[0]:
        raise ContractError("real and fake sequences come from different batch sizes")
    l_real = disc(real_h.states, train_mode=train_mode, rng=rng)
    l_fake = disc(fake_h.states, train_mode=train_mode, rng=rng)
    return _pair_loss(l_real, l_fake, adv_loss)


# ------------------------------------------------------------- train state


@dataclass
class TrainState:
    """Parameters, optimisers and random streams of one training run."""

    params: ModelParams
    cfg: TrainingConfig
    opt: dict[str, Adam]
    data_rng: np.random.Generator
    noise_rng: np.random.Generator
    step: int = 0
    log: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: TrainingConfig, vocab_size: int) -> "TrainState":
        params = ModelParams(vocab_size, cfg.d_emb, cfg.d_y, cfg.d_z, seed=cfg.seed,
                             cnn_widths=cfg.cnn_widths, cnn_filters=cfg.cnn_filters,
                             dropout=cfg.dropout, d_disc=cfg.d_disc, variant=cfg.variant)
        return cls(params, cfg, make_optimizers(params, cfg),
                   np.random.default_rng([cfg.seed, 1]), np.random.default_rng([cfg.seed, 2]))


def make_optimizers(params: ModelParams, cfg: TrainingConfig) -> dict[str, Adam]:
    betas = (cfg.beta1, cfg.beta2)
    d_lr = cfg.disc_learning_rate or cfg.learning_rate
    opt = {"ae": Adam(params.autoencoder_params(), cfg.learning_rate, betas)}
    if cfg.variant == "aligned":
        opt["disc"] = Adam(params.latent_disc_params(), d_lr, betas)
    elif cfg.variant == "cross":
        opt["disc1"] = Adam(params.seq_disc_params(1), d_lr, betas)
        opt["disc2"] = Adam(params.seq_disc_params(2), d_lr, betas)
    return opt


def _update(state: TrainState, name: str, loss: Tensor) -> float:
    opt = state.opt[name]
    state.params.zero_grad()
    ad.backward(loss)
    if name == "ae":
        state.params.after_backward()
    norm = opt.clip(state.cfg.clip_norm)
    opt.step()
    state.params.zero_grad()
    return norm


def _adversary_on(cfg: TrainingConfig, *d_losses: Tensor) -> bool:
    """With ``adv_gate`` set, E and G only receive the adversarial terms once
    every discriminator loss is below the gate (until then they train on
    reconstruction alone)."""
    return cfg.adv_gate is None or all(d.item() < cfg.adv_gate for d in d_losses)


def _guard(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value}) at step {step}", step=step)


def _guarded(step_fn):
    # NaNs that trip a contract check mid-forward count as divergence too
    @functools.wraps(step_fn)
    def wrapper(state, batch1, batch2):
        try:
            return step_fn(state, batch1, batch2)
        except NonFiniteError as e:
            raise DivergenceError(f"non-finite values at step {state.step}: {e}", step=state.step) from e
    return wrapper


@_guarded
def train_step_autoencoder(state: TrainState, batch1: SentenceBatch, batch2: SentenceBatch) -> dict:
    """Plain auto-encoder update on L_rec only."""
    p = state.params
    z1, z2 = encode(p, batch1, 1), encode(p, batch2, 2)
    r1, _ = reconstruction(p, batch1, 1, z1)
    r2, _ = reconstruction(p, batch2, 2, z2)
    rec = r1 + r2
    _guard(rec.item(), "L_rec", state.step)
    _update(state, "ae", rec)
    state.step += 1
    return {"step": state.step, "L_rec": rec.item()}


@_guarded
def train_step_vae(state: TrainState, batch1: SentenceBatch, batch2: SentenceBatch) -> dict:
    """L_rec + L_KL with reparameterised posteriors z = mu + sigma * eps."""
    p, cfg = state.params, state.cfg
    total_rec, total_kl = [], []
    for batch, style in ((batch1, 1), (batch2, 2)):
        mu, lv = vae_posterior(p, encode(p, batch, style))
        eps = state.noise_rng.standard_normal(mu.shape) * cfg.noise_std
        z = mu + ad.exp(lv * 0.5) * eps
        r, _ = reconstruction(p, batch, style, z)
        total_rec.append(r)
        total_kl.append(loss_kl(mu, lv))
    rec = total_rec[0] + total_rec[1]
    kl = total_kl[0] + total_kl[1]
    _guard(rec.item(), "L_rec", state.step)
    _update(state, "ae", rec + kl)
    state.step += 1
    return {"step": state.step, "L_rec": rec.item(), "L_KL": kl.item()}


@_guarded
def train_step_aligned(state: TrainState, batch1: SentenceBatch, batch2: SentenceBatch) -> dict:
    """Aligned auto-encoder: min over E, G of L_rec − lam * L_adv, then a
    discriminator step on a fresh forward pass."""
    p, cfg = state.params, state.cfg
    z1, z2 = encode(p, batch1, 1), encode(p, batch2, 2)
    r1, _ = reconstruction(p, batch1, 1, z1)
    r2, _ = reconstruction(p, batch2, 2, z2)
    rec = r1 + r2
    _guard(rec.item(), "L_rec", state.step)
    adv_loss, adv_term = loss_adv_aligned(p, z1, z2, cfg.adv_loss)
    adv_on = _adversary_on(cfg, adv_loss)
    _update(state, "ae", rec + adv_term * cfg.lam if adv_on else rec)

    with ad.no_grad():
        z1, z2 = encode(p, batch1, 1), encode(p, batch2, 2)
    d_loss, _ = loss_adv_aligned(p, z1, z2, cfg.adv_loss)
    _update(state, "disc", d_loss)
    state.step += 1
    return {"step": state.step, "L_rec": rec.item(), "L_adv": adv_loss.item(), "d_loss": d_loss.item(),
            "adv_on": int(adv_on)}


def _cross_forward(p: ModelParams, cfg: TrainingConfig, batch1: SentenceBatch, batch2: SentenceBatch):
    if batch1.width != batch2.width:
        raise ContractError("cross-aligned step needs batches padded to a common width")
    z1, z2 = encode(p, batch1, 1), encode(p, batch2, 2)
    r1, h1 = reconstruction(p, batch1, 1, z1)
    r2, h2 = reconstruction(p, batch2, 2, z2)
    steps = batch1.width
    _, h1_fake = decode_self_fed(p, 2, z1, cfg.gamma, steps)  # x1 rendered in style 2
    _, h2_fake = decode_self_fed(p, 1, z2, cfg.gamma, steps)  # x2 rendered in style 1
    return r1 + r2, h1, h2, h1_fake, h2_fake


@_guarded
def train_step_cross(state: TrainState, batch1: SentenceBatch, batch2: SentenceBatch) -> dict:
    """One pass of the cross-aligned training loop.

    E and G take a step on L_rec − lam (L_adv1 + L_adv2); then D1 and D2 take
    a step each on their own loss, recomputed on a fresh forward pass with
    the updated generator.
    """
    p, cfg = state.params, state.cfg
    rec, h1, h2, h1_fake, h2_fake = _cross_forward(p, cfg, batch1, batch2)
    _guard(rec.item(), "L_rec", state.step)
    adv1, term1 = loss_adv_cross(p.seq_disc[1], h1, h2_fake, state.noise_rng, adv_loss=cfg.adv_loss)
    adv2, term2 = loss_adv_cross(p.seq_disc[2], h2, h1_fake, state.noise_rng, adv_loss=cfg.adv_loss)
    adv_on = _adversary_on(cfg, adv1, adv2)
    _update(state, "ae", rec + (term1 + term2) * cfg.lam if adv_on else rec)

    with ad.no_grad():
        _, h1, h2, h1_fake, h2_fake = _cross_forward(p, cfg, batch1, batch2)
    d1, _ = loss_adv_cross(p.seq_disc[1], h1, h2_fake, state.noise_rng, adv_loss=cfg.adv_loss)
    _update(state, "disc1", d1)
    d2, _ = loss_adv_cross(p.seq_disc[2], h2, h1_fake, state.noise_rng, adv_loss=cfg.adv_loss)
    _update(state, "disc2", d2)
    state.step += 1
    return {"step": state.step, "L_rec": rec.item(), "L_adv1": adv1.item(), "L_adv2": adv2.item(),
            "d1_loss": d1.item(), "d2_loss": d2.item(), "adv_on": int(adv_on)}


STEP_FUNCTIONS: dict[str, Callable[[TrainState, SentenceBatch, SentenceBatch], dict]] = {
    "vae": train_step_vae,
    "aligned": train_step_aligned,
    "cross": train_step_cross,
}


# -------------------------------------------------------------- main loop


def min_batch_width(cfg: TrainingConfig) -> int:
    # hidden sequences (width + 1 states) must cover the widest filter
    return max(cfg.cnn_widths) - 1 if cfg.variant == "cross" else 0


def sample_batches(rng: np.random.Generator, x1: Sequence[Sequence[int]], x2: Sequence[Sequence[int]],
                   k: int, min_width: int = 0) -> tuple[SentenceBatch, SentenceBatch]:
    """Independent uniform draws with replacement, padded to a common width."""
    i1 = rng.integers(len(x1), size=k)
    i2 = rng.integers(len(x2), size=k)
    s1 = [x1[i] for i in i1]
    s2 = [x2[i] for i in i2]
    width = max(max(len(s) for s in s1), max(len(s) for s in s2)) + 1
    width = max(width, min_width)
    return SentenceBatch.from_ids(s1, width), SentenceBatch.from_ids(s2, width)


def steps_per_epoch(n1: int, n2: int, batch_size: int) -> int:
    return max(1, math.ceil(max(n1, n2) / batch_size))


def format_metrics(record: dict) -> str:
    """One ``key=value`` line; floats use repr so logs round-trip exactly."""
    parts = []
    for k, v in record.items():
        parts.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def parse_metrics(line: str) -> dict:
    out: dict = {}
    for part in line.split():
        k, _, v = part.partition("=")
        try:
            out[k] = int(v)
        except ValueError:
            out[k] = float(v)
    return out


def train(
    corpora: tuple[Sequence[Sequence[int]], Sequence[Sequence[int]]],
    cfg: TrainingConfig,
    vocab_size: int,
    state: TrainState | None = None,
    on_step: Callable[[TrainState, dict], None] | None = None,
    on_epoch: Callable[[TrainState, int], None] | None = None,
) -> TrainState:
    """Run ``cfg.variant`` for ``cfg.max_epochs`` epochs (or ``cfg.max_steps``).

    ``corpora`` holds the two id-encoded training sets.  Passing ``state``
    resumes a previous run where it stopped.
    """
    x1, x2 = corpora
    if not x1 or not x2:
        raise ContractError("both corpora must be non-empty")
    state = state or TrainState.create(cfg, vocab_size)
    step_fn = STEP_FUNCTIONS[cfg.variant]
    per_epoch = steps_per_epoch(len(x1), len(x2), cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.max_epochs * per_epoch
    width = min_batch_width(cfg)
    while state.step < total:
        b1, b2 = sample_batches(state.data_rng, x1, x2, cfg.batch_size, width)
        # the first ae_warmup steps train the plain auto-encoder only
        record = (train_step_autoencoder if state.step < cfg.ae_warmup else step_fn)(state, b1, b2)
        state.log.append(record)
        if on_step is not None:
            on_step(state, record)
        if on_epoch is not None and state.step % per_epoch == 0:
            on_epoch(state, state.step // per_epoch)
    return state


def params_partition_unchanged(before: dict[str, np.ndarray], params: dict[str, Tensor]) -> bool:
    return all(np.array_equal(before[k], params[k].data) for k in before)


def snapshot(params: Iterable[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params}
