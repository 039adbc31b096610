import math

import numpy as np
import pytest

from crossalign import autodiff as ad
from crossalign.autodiff import Tensor
from crossalign.data import Corpus, SentenceBatch, apply_cipher, build_vocab, gen_cipher_key, synth_bigram_corpus, token_names
from crossalign.errors import ContractError, DivergenceError, ParameterError
from crossalign.evaluation import latent_probe_accuracy
from crossalign.model import HiddenSequence, encode, vae_posterior
from crossalign.training import (
    TrainingConfig,
    TrainState,
    format_metrics,
    loss_adv_aligned,
    loss_adv_cross,
    loss_kl,
    loss_rec,
    params_partition_unchanged,
    parse_metrics,
    sample_batches,
    snapshot,
    train,
    train_step_autoencoder,
    train_step_cross,
)

LN2 = math.log(2.0)
SMALL = dict(d_emb=8, d_y=4, d_z=12, cnn_filters=6, d_disc=8, batch_size=4)


def toy_ids():
    x1 = [[4, 5, 6, 7], [8, 9, 10]]
    x2 = [[11, 12, 13], [14, 15, 16, 17, 18]]
    return x1, x2


def fresh(variant="cross", seed=0, **kw):
    cfg = TrainingConfig(variant=variant, seed=seed, **{**SMALL, **kw})
    return cfg, TrainState.create(cfg, 20)


def test_config_validation():
    with pytest.raises(ContractError):
        TrainingConfig(variant="gan")
    with pytest.raises(ParameterError):
        TrainingConfig(lam=-1)
    with pytest.raises(ParameterError):
        TrainingConfig(gamma=0)
    with pytest.raises(ParameterError):
        TrainingConfig(learning_rate=0)
    with pytest.raises(ParameterError):
        TrainingConfig(batch_size=0)
    cfg = TrainingConfig()
    assert (cfg.lam, cfg.gamma, cfg.learning_rate) == (1.0, 0.001, 1e-4)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg


def test_loss_rec_uniform_logits_is_two_ln_v():
    _, st = fresh()
    p = st.params
    p.projection.weight.data[...] = 0.0
    x1, x2 = toy_ids()
    b1, b2 = SentenceBatch.from_ids(x1), SentenceBatch.from_ids(x2)
    assert loss_rec(p, b1, b2).item() == pytest.approx(2 * math.log(20), abs=1e-12)


def test_loss_rec_symmetric_in_domains():
    _, st = fresh()
    p = st.params
    x1, x2 = toy_ids()
    b1, b2 = SentenceBatch.from_ids(x1), SentenceBatch.from_ids(x2)
    a = loss_rec(p, b1, b2).item()
    p.style.data[...] = p.style.data[::-1].copy()
    assert loss_rec(p, b2, b1).item() == pytest.approx(a, abs=1e-12)


def test_loss_kl_values_and_monte_carlo():
    assert loss_kl(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4)))).item() == 0.0
    assert loss_kl(Tensor([[1.0]]), Tensor([[0.0]])).item() == pytest.approx(0.5)
    rng = np.random.default_rng(0)
    mu, lv = rng.standard_normal((1, 3)), rng.standard_normal((1, 3)) * 0.5
    sd = np.exp(0.5 * lv)
    z = mu + sd * rng.standard_normal((100_000, 3))
    log_q = -0.5 * (((z - mu) / sd) ** 2 + lv + math.log(2 * math.pi)).sum(axis=1)
    log_p = -0.5 * (z ** 2 + math.log(2 * math.pi)).sum(axis=1)
    mc = np.mean(log_q - log_p)
    assert loss_kl(Tensor(mu), Tensor(lv)).item() == pytest.approx(mc, rel=0.02)


def test_chance_discriminator_gives_two_ln_two():
    _, st = fresh("aligned")
    p = st.params
    for layer in p.latent_disc:
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    z = Tensor(np.random.default_rng(0).standard_normal((5, p.d_z)))
    d_loss, adv = loss_adv_aligned(p, z, z * 2.0)
    assert d_loss.item() == pytest.approx(2 * LN2, abs=1e-12)
    assert adv.item() == pytest.approx(-2 * LN2, abs=1e-12)


def test_aligned_loss_symmetric_under_swap_with_flipped_discriminator():
    _, st = fresh("aligned")
    p = st.params
    rng = np.random.default_rng(1)
    z1, z2 = Tensor(rng.standard_normal((4, p.d_z))), Tensor(rng.standard_normal((4, p.d_z)))
    a, _ = loss_adv_aligned(p, z1, z2)
    # D -> 1 - D is negating the last layer
    p.latent_disc[1].weight.data *= -1
    p.latent_disc[1].bias.data *= -1
    b, _ = loss_adv_aligned(p, z2, z1)
    assert b.item() == pytest.approx(a.item(), abs=1e-12)


def test_cross_loss_checks_sequence_kinds():
    _, st = fresh()
    h = HiddenSequence(Tensor(np.zeros((2, 6, st.params.d_h))), teacher_forced=True)
    with pytest.raises(ContractError):
        loss_adv_cross(st.params.seq_disc[1], h, h)


def test_discriminator_cannot_beat_chance_on_identical_populations():
    _, st = fresh("cross", seed=3)
    d = st.params.seq_disc[1]
    opt = st.opt["disc1"]
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(60):
        seq = rng.standard_normal((8, 7, st.params.d_h))
        real = HiddenSequence(Tensor(seq), True)
        fake = HiddenSequence(Tensor(seq), False)
        loss, _ = loss_adv_cross(d, real, fake, train_mode=False)
        st.params.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    assert min(losses[-20:]) >= 2 * LN2 - 0.05


def test_adversarial_term_reaches_generator():
    _, st = fresh()
    p = st.params
    x1, x2 = toy_ids()
    b1, b2 = sample_batches(np.random.default_rng(0), x1, x2, 2, min_width=4)
    from crossalign.training import _cross_forward
    _, h1, _, _, h2_fake = _cross_forward(p, st.cfg, b1, b2)
    _, adv = loss_adv_cross(p.seq_disc[1], h1, h2_fake, train_mode=False)
    p.zero_grad()
    ad.backward(adv)
    assert np.linalg.norm(p.generator.u_cand.grad) > 0


def test_lambda_zero_cross_step_equals_autoencoder_step():
    x1, x2 = toy_ids()
    _, a = fresh("cross", lam=0.0, seed=7)
    _, b = fresh("cross", lam=0.0, seed=7)
    b1, b2 = sample_batches(np.random.default_rng(5), x1, x2, 4, min_width=4)
    train_step_cross(a, b1, b2)
    train_step_autoencoder(b, b1, b2)
    for (k, pa), pb in zip(a.params.autoencoder_params().items(), b.params.autoencoder_params().values()):
        assert np.array_equal(pa.data, pb.data), k


def test_parameter_partition_per_update():
    x1, x2 = toy_ids()
    _, st = fresh("cross")
    b1, b2 = sample_batches(np.random.default_rng(0), x1, x2, 4, min_width=4)
    ae = snapshot(st.params.autoencoder_params().items())
    d1 = snapshot(st.params.seq_disc_params(1).items())
    opt = st.opt
    # run only the generator half by disabling the discriminator optimisers
    saved = {k: opt[k].lr for k in ("disc1", "disc2")}
    for k in saved:
        opt[k].lr = 0.0
    train_step_cross(st, b1, b2)
    assert params_partition_unchanged(d1, st.params.seq_disc_params(1))
    assert not params_partition_unchanged(ae, st.params.autoencoder_params())
    # and only the discriminator half
    for k in saved:
        opt[k].lr = saved[k]
    opt["ae"].lr = 0.0
    ae = snapshot(st.params.autoencoder_params().items())
    train_step_cross(st, b1, b2)
    assert params_partition_unchanged(ae, st.params.autoencoder_params())
    assert not params_partition_unchanged(d1, st.params.seq_disc_params(1))


def test_cross_metrics_record_and_loss_decrease():
    x1, x2 = toy_ids()
    cfg, st = fresh("cross", learning_rate=3e-3, max_steps=200)
    first = []

    def on_step(state, rec):
        if state.step <= 5:
            first.append(rec["L_rec"])

    st = train((x1, x2), cfg, 20, state=st, on_step=on_step)
    assert {"step", "L_rec", "L_adv1", "L_adv2", "d1_loss", "d2_loss"} <= set(st.log[-1])
    last = np.mean([r["L_rec"] for r in st.log[-5:]])
    assert last <= 0.5 * np.mean(first)


def test_training_is_deterministic():
    x1, x2 = toy_ids()
    cfg = TrainingConfig(variant="cross", max_steps=5, **SMALL)
    a = train((x1, x2), cfg, 20)
    b = train((x1, x2), cfg, 20)
    assert [format_metrics(r) for r in a.log] == [format_metrics(r) for r in b.log]


def test_adv_gate_holds_back_adversary():
    x1, x2 = toy_ids()
    cfg = TrainingConfig(variant="cross", max_steps=3, adv_gate=1e-3, **SMALL)
    st = train((x1, x2), cfg, 20)
    assert all(r["adv_on"] == 0 for r in st.log)
    with pytest.raises(ParameterError):
        TrainingConfig(adv_gate=0.0)


def test_divergence_guard():
    x1, x2 = toy_ids()
    _, st = fresh("cross")
    st.params.projection.bias.data[0] = np.nan
    b1, b2 = sample_batches(np.random.default_rng(0), x1, x2, 4, min_width=4)
    with pytest.raises(DivergenceError) as e:
        train_step_cross(st, b1, b2)
    assert e.value.step == 0


def test_metrics_line_roundtrip():
    rec = {"step": 3, "L_rec": 0.1 + 0.2, "d1_loss": 1e-300}
    assert parse_metrics(format_metrics(rec)) == rec


def test_vae_posterior_near_prior_after_training():
    x1, x2 = toy_ids()
    cfg = TrainingConfig(variant="vae", max_steps=150, learning_rate=3e-3, **SMALL)
    st = train((x1, x2), cfg, 20)
    assert st.log[-1]["L_KL"] > 0
    p = st.params
    b = SentenceBatch.from_ids(x1 * 50)
    with ad.no_grad():
        mu, lv = vae_posterior(p, encode(p, b, 1))
    eps = np.random.default_rng(0).standard_normal(mu.shape)
    z = mu.data + np.exp(0.5 * lv.data) * eps
    assert np.linalg.norm(z, axis=1).mean() == pytest.approx(math.sqrt(p.d_z), rel=0.2)


def test_aligned_codes_become_hard_to_separate():
    corpus, _ = synth_bigram_corpus(15, 1200, max_len=8, seed=4)
    key = gen_cipher_key(token_names(15), 1.0, 0)
    x1 = corpus.sentences[:600]
    x2 = apply_cipher(Corpus(corpus.sentences[600:]), key).sentences
    vocab = build_vocab(x1 + x2, 1)
    ids1, ids2 = [vocab.encode(s) for s in x1], [vocab.encode(s) for s in x2]
    # codes start tiny, so the latent discriminator gets a faster learning rate
    cfg = TrainingConfig(variant="aligned", max_steps=2400, learning_rate=3e-3, disc_learning_rate=1e-2,
                         d_emb=16, d_y=4, d_z=16, d_disc=16, batch_size=32)
    st = TrainState.create(cfg, len(vocab))
    with ad.no_grad():
        z1 = encode(st.params, SentenceBatch.from_ids(ids1[:300]), 1).data
        z2 = encode(st.params, SentenceBatch.from_ids(ids2[:300]), 2).data
    before = latent_probe_accuracy(z1, z2)
    st = train((ids1, ids2), cfg, len(vocab), state=st)
    with ad.no_grad():
        z1 = encode(st.params, SentenceBatch.from_ids(ids1[:300]), 1).data
        z2 = encode(st.params, SentenceBatch.from_ids(ids2[:300]), 2).data
    after = latent_probe_accuracy(z1, z2)
    assert before > 0.9
    assert after < 0.65
