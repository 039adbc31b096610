"""BLEU, the copy and unigram-matching baselines, and classifier-based
transfer accuracy."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import PAD_ID, UNK, Corpus, Vocabulary
from .errors import ContractError
from .nn import Embedding, Layer, TextCnn
from .training import Adam

log = logging.getLogger(__name__)

MAX_ORDER = 4


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    matches: list[int]
    totals: list[int]
    candidate_length: int
    reference_length: int

    def as_dict(self, prefix: str = "bleu") -> dict[str, float]:
        out = {prefix: self.score, f"{prefix}.bp": self.brevity_penalty}
        for n, p in enumerate(self.precisions, 1):
            out[f"{prefix}.p{n}"] = p
        return out


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _sentences(x) -> list[Sequence[str]]:
    return x.sentences if isinstance(x, Corpus) else list(x)


def bleu(candidates, references, max_order: int = MAX_ORDER) -> BleuReport:
    """Corpus BLEU-4 against a single reference per candidate.

    Clipped n-gram counts are pooled over the corpus.  For n >= 2 a zero
    match count is smoothed to (0 + 1) / (total + 1), where an order with no
    n-grams at all counts as total 1; unigram precision is never smoothed,
    so zero unigram overlap scores 0.
    """
    cands, refs = _sentences(candidates), _sentences(references)
    if len(cands) != len(refs):
        raise ContractError(f"{len(cands)} candidates but {len(refs)} references")
    matches = [0] * max_order
    totals = [0] * max_order
    c_len = r_len = 0
    for c, r in zip(cands, refs):
        c_len += len(c)
        r_len += len(r)
        for n in range(1, max_order + 1):
            cn, rn = _ngrams(c, n), _ngrams(r, n)
            matches[n - 1] += sum(min(k, rn[g]) for g, k in cn.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    precisions = []
    for n in range(max_order):
        m, t = matches[n], totals[n]
        if n == 0:
            precisions.append(m / t if t else 0.0)
        elif m == 0:
            precisions.append(1.0 / (max(t, 1) + 1))
        else:
            precisions.append(m / t)
    if c_len == 0:
        bp = 0.0
    elif c_len > r_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - r_len / c_len)
    if min(precisions) <= 0.0 or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuReport(score, precisions, bp, matches, totals, c_len, r_len)


def copy_baseline(ciphertext, plaintext_ref) -> BleuReport:
    """Score the untransferred input against the references."""
    return bleu(ciphertext, plaintext_ref)


def frequency_match(x1, x2) -> dict[str, str]:
    """Map x2's vocabulary onto x1's by unigram frequency rank.

    Tokens present in both corpora map to themselves.  The remaining tokens
    of each side are ranked by (count descending, token) and matched by
    rank; surplus x2 tokens map to ``<unk>``.
    """
    c1 = Counter(t for s in _sentences(x1) for t in s)
    c2 = Counter(t for s in _sentences(x2) for t in s)
    shared = set(c1) & set(c2)
    mapping = {t: t for t in shared}
    rest1 = sorted((t for t in c1 if t not in shared), key=lambda t: (-c1[t], t))
    rest2 = sorted((t for t in c2 if t not in shared), key=lambda t: (-c2[t], t))
    if len(rest1) != len(rest2):
        log.warning("unigram matching: %d unshared source tokens vs %d target tokens", len(rest2), len(rest1))
    for i, t in enumerate(rest2):
        mapping[t] = rest1[i] if i < len(rest1) else UNK
    return mapping


def apply_mapping(corpus, mapping: dict[str, str]) -> list[list[str]]:
    return [[mapping.get(t, UNK) for t in s] for s in _sentences(corpus)]


# ------------------------------------------------------------- classifier


class SentenceClassifier(Layer):
    """Word embeddings followed by a TextCnn; the logit is for style 1."""

    def __init__(self, vocab: Vocabulary, d_emb: int = 32, seed: int = 0, widths=(3, 4, 5),
                 n_filters: int = 50, dropout: float = 0.5):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.embedding = Embedding(len(vocab), d_emb, rng, pad_id=PAD_ID)
        self.cnn = TextCnn(d_emb, rng, widths, n_filters, dropout)

    def named_params(self):
        out = {"embedding.table": self.embedding.table}
        out.update({f"cnn.{k}": v for k, v in self.cnn.named_params().items()})
        return out

    def logits(self, sentences: Sequence[Sequence[str]], train_mode: bool = False,
               rng: np.random.Generator | None = None) -> ad.Tensor:
        lengths = np.array([max(len(s), 1) for s in sentences])
        width = max(int(lengths.max()), self.cnn.max_width)
        ids = np.full((len(sentences), width), PAD_ID, dtype=np.int64)
        for i, s in enumerate(sentences):
            ids[i, : len(s)] = self.vocab.encode(s)
        return self.cnn(self.embedding.lookup(ids), train_mode=train_mode, rng=rng, lengths=lengths)

    def predict(self, sentences: Sequence[Sequence[str]], batch_size: int = 512) -> np.ndarray:
        """Predicted style (1 or 2) per sentence."""
        out = []
        with ad.no_grad():
            for start in range(0, len(sentences), batch_size):
                chunk = list(sentences[start:start + batch_size])
                out.append(np.where(self.logits(chunk).data > 0, 1, 2))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)


def train_classifier(x1, x2, vocab: Vocabulary, steps: int = 300, batch_size: int = 64, lr: float = 1e-3,
                     seed: int = 0, **kwargs) -> SentenceClassifier:
    """Fit a style classifier on labelled sentences from the two corpora."""
    s1, s2 = _sentences(x1), _sentences(x2)
    clf = SentenceClassifier(vocab, seed=seed, **kwargs)
    opt = Adam(clf.named_params(), lr, betas=(0.9, 0.999))
    rng = np.random.default_rng([seed, 7])
    half = max(batch_size // 2, 1)
    for _ in range(steps):
        batch = [s1[i] for i in rng.integers(len(s1), size=half)] + [s2[i] for i in rng.integers(len(s2), size=half)]
        labels = np.r_[np.ones(half), np.zeros(half)]
        p = ad.clamp(ad.sigmoid(clf.logits(batch, train_mode=True, rng=rng)), 1e-7, 1 - 1e-7)
        loss = -ad.mean(ad.log(p) * labels + ad.log(1.0 - p) * (1.0 - labels))
        clf.zero_grad()
        ad.backward(loss)
        clf.embedding.pin_padding()
        opt.step()
    clf.zero_grad()
    return clf


def classifier_accuracy(transferred, clf: SentenceClassifier, target_label: int) -> float:
    """Fraction of sentences the classifier assigns to ``target_label``."""
    sents = _sentences(transferred)
    if not sents:
        return 0.0
    return float(np.mean(clf.predict(sents) == target_label))


def token_accuracy(predicted, reference) -> float:
    """Position-wise token agreement of aligned corpora of equal shapes."""
    hit = tot = 0
    for p, r in zip(_sentences(predicted), _sentences(reference)):
        tot += len(r)
        hit += sum(a == b for a, b in zip(p, r))
    return hit / tot if tot else 0.0


def latent_probe_accuracy(z1: np.ndarray, z2: np.ndarray, seed: int = 0, steps: int = 500,
                          lr: float = 0.5, l2: float = 1e-3) -> float:
    """Held-out accuracy of a logistic-regression probe telling z1 from z2.

    Half of each set (random split) trains the probe on standardised
    features; the other half is scored.  Near 0.5 means the two code
    populations are hard to tell apart.
    """
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    x = np.vstack([z1, z2])
    y = np.r_[np.ones(len(z1)), np.zeros(len(z2))]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    tr, te = order[: len(x) // 2], order[len(x) // 2:]
    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0) + 1e-8
    xs = (x - mu) / sd
    w, b = np.zeros(x.shape[1]), 0.0
    for _ in range(steps):
        p = 0.5 * (1.0 + np.tanh(0.5 * (xs[tr] @ w + b)))
        g = p - y[tr]
        w -= lr * (xs[tr].T @ g / len(tr) + l2 * w)
        b -= lr * g.mean()
    return float(np.mean(((xs[te] @ w + b) > 0) == (y[te] == 1)))
