"""Corpora, vocabularies, padded batches and the synthetic task generators."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError

PAD, GO, EOS, UNK = "<pad>", "<go>", "<eos>", "<unk>"
SPECIALS = (PAD, GO, EOS, UNK)
PAD_ID, GO_ID, EOS_ID, UNK_ID = range(4)
MAX_WORDS = 15


@dataclass
class Corpus:
    """Tokenised sentences (no special tokens) from one style."""

    sentences: list[list[str]]
    style: int = 1

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    def tokens(self) -> Iterable[str]:
        for s in self.sentences:
            yield from s

    def unigram_counts(self) -> Counter:
        return Counter(self.tokens())

    def subset(self, idx: Iterable[int]) -> "Corpus":
        return Corpus([list(self.sentences[i]) for i in idx], self.style)

    def to_text(self) -> str:
        return "".join(" ".join(s) + "\n" for s in self.sentences)


@dataclass
class Vocabulary:
    """Bijection between tokens and ids; ids 0-3 are the special tokens."""

    tokens: list[str]
    min_count: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ContractError(f"vocabulary must start with {SPECIALS}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def content(self) -> list[str]:
        return self.tokens[4:]

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, sentence: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in sentence]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, GO_ID):
                continue
            out.append(self.tokens[i])
        return out

    def replace_rare(self, corpus: Corpus) -> Corpus:
        return Corpus([[t if t in self.index else UNK for t in s] for s in corpus], corpus.style)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls([t for t in lines if t])


def build_vocab(sentences: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times, most frequent first
    (ties broken lexicographically)."""
    if min_count < 1:
        raise ContractError(f"min_count must be >= 1, got {min_count}")
    counts: Counter = Counter()
    n = 0
    for s in sentences:
        counts.update(s)
        n += 1
    if n == 0:
        raise ContractError("cannot build a vocabulary from no sentences")
    for sp in SPECIALS:
        counts.pop(sp, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, min_count=min_count)


def load_and_filter(path: str | Path, max_len: int = MAX_WORDS, style: int = 1) -> Corpus:
    """Read one whitespace-tokenised sentence per line, dropping empty lines
    and sentences longer than ``max_len`` words."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    return filter_sentences((line.split() for line in raw.decode("utf-8").splitlines()), max_len, style)


def filter_sentences(sentences: Iterable[Sequence[str]], max_len: int = MAX_WORDS, style: int = 1) -> Corpus:
    return Corpus([list(s) for s in sentences if 0 < len(s) <= max_len], style)


def write_corpus(corpus: Corpus | Iterable[Sequence[str]], path: str | Path) -> None:
    sents = corpus.sentences if isinstance(corpus, Corpus) else corpus
    Path(path).write_bytes("".join(" ".join(s) + "\n" for s in sents).encode("utf-8"))


# --------------------------------------------------------------- batching


@dataclass
class SentenceBatch:
    """Padded id matrix.  Row i holds the sentence's word ids followed by
    ``<eos>`` and padding; ``lengths`` counts words only (without ``<eos>``)."""

    ids: np.ndarray
    lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def decoder_inputs(self) -> np.ndarray:
        """``<go>`` followed by the words, padding after the sentence end."""
        go = np.full((self.size, 1), GO_ID, dtype=np.int64)
        body = np.where(self.ids[:, :-1] == EOS_ID, PAD_ID, self.ids[:, :-1])
        return np.concatenate([go, body], axis=1)

    def decoder_targets(self) -> np.ndarray:
        return self.ids

    def target_pad_mask(self) -> np.ndarray:
        return np.arange(self.width)[None, :] > self.lengths[:, None]

    @classmethod
    def from_ids(cls, sentences: Sequence[Sequence[int]], min_width: int = 0) -> "SentenceBatch":
        if not sentences:
            raise ContractError("empty batch")
        lengths = np.array([len(s) for s in sentences], dtype=np.int64)
        width = max(int(lengths.max()) + 1, min_width)
        ids = np.full((len(sentences), width), PAD_ID, dtype=np.int64)
        for i, s in enumerate(sentences):
            ids[i, : len(s)] = s
            ids[i, len(s)] = EOS_ID
        return cls(ids, lengths)

    @classmethod
    def from_tokens(cls, sentences: Sequence[Sequence[str]], vocab: Vocabulary, min_width: int = 0) -> "SentenceBatch":
        return cls.from_ids([vocab.encode(s) for s in sentences], min_width=min_width)


# ------------------------------------------------------------ cipher tasks


@dataclass
class CipherKey:
    """Token substitution.  ``mapping`` covers the substituted subset; every
    other token of ``domain`` maps to itself."""

    mapping: dict[str, str]
    domain: frozenset[str]

    def __post_init__(self):
        if len(set(self.mapping.values())) != len(self.mapping):
            raise ContractError("cipher key is not injective")
        missing = set(self.mapping) - self.domain
        if missing:
            raise ContractError(f"mapped tokens outside the domain: {sorted(missing)[:5]}")
        if set(self.mapping) & set(SPECIALS):
            raise ContractError("special tokens cannot be ciphered")
        fixed = self.domain - set(self.mapping)
        clash = fixed & set(self.mapping.values())
        if clash:
            raise ContractError(f"cipher image collides with unciphered tokens: {sorted(clash)[:5]}")

    @property
    def substituted(self) -> list[str]:
        return sorted(self.mapping)

    @property
    def substitution_rate(self) -> float:
        n = len([t for t in self.domain if t not in SPECIALS])
        return len(self.mapping) / n if n else 0.0

    def __call__(self, token: str) -> str:
        if token not in self.domain:
            raise ContractError(f"token {token!r} is outside the cipher key's domain")
        return self.mapping.get(token, token)

    def inverse(self) -> "CipherKey":
        image = frozenset(self.mapping.get(t, t) for t in self.domain)
        return CipherKey({v: k for k, v in self.mapping.items()}, image)

    def save(self, path: str | Path) -> None:
        lines = [f"{k}\t{self.mapping[k]}\n" for k in sorted(self.mapping)]
        Path(path).write_bytes("".join(lines).encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path, domain: Iterable[str] | None = None) -> "CipherKey":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read cipher key {path}: {exc}") from exc
        mapping = {}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{n}: expected two tab-separated columns")
            mapping[parts[0]] = parts[1]
        dom = frozenset(domain) if domain is not None else frozenset(mapping)
        return cls(mapping, dom | frozenset(mapping))


CIPHER_SUFFIX = "~"


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        return np.arange(n)
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def gen_cipher_key(vocab: Vocabulary | Sequence[str], rate: float, seed: int) -> CipherKey:
    """Substitute ``ceil(rate · |content|)`` tokens with fresh surface forms.

    The chosen tokens are permuted by a random derangement and the image is
    suffixed with ``~``, so ciphered tokens never collide with plaintext ones.
    With two or more chosen tokens none is rendered as a decorated copy of
    itself; a single chosen token has no derangement and keeps its own stem.
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"substitution rate must lie in [0, 1], got {rate}")
    tokens = list(vocab.tokens) if isinstance(vocab, Vocabulary) else list(vocab)
    content = [t for t in tokens if t not in SPECIALS]
    rng = np.random.default_rng(seed)
    k = math.ceil(round(rate * len(content), 9))
    chosen = sorted(content[i] for i in rng.choice(len(content), size=k, replace=False)) if k else []
    perm = _derangement(len(chosen), rng)
    mapping = {t: chosen[perm[i]] + CIPHER_SUFFIX for i, t in enumerate(chosen)}
    return CipherKey(mapping, frozenset(tokens))


def apply_cipher(corpus: Corpus, key: CipherKey, style: int | None = None) -> Corpus:
    return Corpus([[key(t) for t in s] for s in corpus], corpus.style if style is None else style)


def shuffle_words(corpus: Corpus, seed: int, style: int | None = None) -> Corpus:
    """Uniformly permute the words of every sentence."""
    rng = np.random.default_rng(seed)
    out = []
    for s in corpus:
        perm = rng.permutation(len(s))
        out.append([s[i] for i in perm])
    return Corpus(out, corpus.style if style is None else style)


# ---------------------------------------------------- synthetic languages


def stationary_distribution(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(matrix.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    v = np.abs(v)
    return v / v.sum()


def random_bigram_matrix(
    n_vocab: int,
    rng: np.random.Generator,
    concentration: float = 0.3,
    min_gap: float = 1e-4,
    max_tries: int = 1000,
) -> np.ndarray:
    """Row-stochastic matrix with Dirichlet rows whose stationary
    frequencies are pairwise separated by at least ``min_gap`` (relative)."""
    for _ in range(max_tries):
        m = rng.dirichlet(np.full(n_vocab, concentration), size=n_vocab)
        # keep the chain irreducible so every token has positive frequency
        m = 0.999 * m + 0.001 / n_vocab
        m /= m.sum(axis=1, keepdims=True)
        pi = np.sort(stationary_distribution(m))
        if np.all(np.diff(pi) > min_gap * pi.max()):
            return m
    raise DataError("could not sample a bigram matrix with distinct stationary frequencies")


def token_names(n_vocab: int) -> list[str]:
    width = len(str(n_vocab - 1))
    return [f"w{i:0{width}d}" for i in range(n_vocab)]


def sample_markov_sentences(
    matrix: np.ndarray,
    n_sentences: int,
    rng: np.random.Generator,
    max_len: int = MAX_WORDS,
    min_len: int = 3,
    names: Sequence[str] | None = None,
) -> list[list[str]]:
    n = matrix.shape[0]
    names = list(names) if names is not None else token_names(n)
    start = stationary_distribution(matrix)
    cdf = np.cumsum(matrix, axis=1)
    cdf[:, -1] = 1.0
    lengths = rng.integers(min_len, max_len + 1, size=n_sentences)
    out = []
    for L in lengths:
        tok = int(rng.choice(n, p=start))
        sent = [tok]
        u = rng.random(L - 1)
        for x in u:
            tok = int(np.searchsorted(cdf[tok], x, side="right"))
            sent.append(min(tok, n - 1))
        out.append([names[t] for t in sent])
    return out


def synth_bigram_corpus(
    n_vocab: int,
    n_sentences: int,
    max_len: int = MAX_WORDS,
    seed: int = 0,
    min_len: int = 3,
    concentration: float = 0.3,
) -> tuple[Corpus, np.ndarray]:
    """Sample a sparse random bigram language and ``n_sentences`` from it.

    Returns the corpus and the generating matrix (row i is the next-token
    distribution after token ``w{i}``).
    """
    if n_vocab < 5:
        raise ContractError(f"n_vocab must be >= 5, got {n_vocab}")
    if not 1 <= min_len <= max_len:
        raise ContractError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    rng = np.random.default_rng(seed)
    m = random_bigram_matrix(n_vocab, rng, concentration)
    sents = sample_markov_sentences(m, n_sentences, rng, max_len=max_len, min_len=min_len)
    return Corpus(sents, 1), m


def empirical_bigram_matrix(corpus: Corpus, names: Sequence[str]) -> np.ndarray:
    idx = {t: i for i, t in enumerate(names)}
    counts = np.zeros((len(names), len(names)))
    for s in corpus:
        for a, b in zip(s, s[1:]):
            counts[idx[a], idx[b]] += 1
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)


def has_distinct_counts(corpus: Corpus) -> bool:
    counts = list(corpus.unigram_counts().values())
    return len(set(counts)) == len(counts)


def synth_sentiment_corpora(
    n_vocab: int,
    n_sentences: int,
    max_len: int = MAX_WORDS,
    seed: int = 0,
    n_markers: int = 5,
    min_len: int = 3,
) -> tuple[Corpus, Corpus]:
    """Two toy "sentiment" corpora sharing one bigram language for content.

    Every sentence carries exactly one marker token from its style's marker
    set (``pos*`` for style 1, ``neg*`` for style 2) at a random position;
    marker ``pos{i}`` and ``neg{i}`` play the same role.
    """
    rng = np.random.default_rng(seed)
    m = random_bigram_matrix(n_vocab, rng)
    out = []
    for style, prefix in ((1, "pos"), (2, "neg")):
        sents = sample_markov_sentences(m, n_sentences, rng, max_len=max_len - 1, min_len=min_len)
        marked = []
        for s in sents:
            k = int(rng.integers(n_markers))
            at = int(rng.integers(len(s) + 1))
            marked.append(s[:at] + [f"{prefix}{k}"] + s[at:])
        out.append(Corpus(marked, style))
    return out[0], out[1]


def split_disjoint(sentences: Sequence[Sequence[str]], sizes: Sequence[int], seed: int) -> list[list[list[str]]]:
    """Partition sentences into disjoint random groups of the given sizes."""
    if sum(sizes) > len(sentences):
        raise ContractError(f"need {sum(sizes)} sentences, have {len(sentences)}")
    order = np.random.default_rng(seed).permutation(len(sentences))
    groups, start = [], 0
    for n in sizes:
        groups.append([list(sentences[i]) for i in order[start:start + n]])
        start += n
    return groups
