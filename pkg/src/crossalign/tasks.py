"""Synthetic transfer tasks: decipherment, word-order recovery and a toy
two-style corpus.

All tasks draw sentences from one random bigram language and split them
into disjoint groups: two non-parallel training sides plus parallel dev and
test pairs (style-1 sentence, its style-2 rendering).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import (
    CipherKey,
    Corpus,
    apply_cipher,
    build_vocab,
    gen_cipher_key,
    shuffle_words,
    split_disjoint,
    synth_bigram_corpus,
    synth_sentiment_corpora,
    token_names,
    write_corpus,
)
from .errors import ContractError

TASKS = ("cipher", "order", "sentiment-synth")

FILES = {
    "x1": "x1.train.txt",
    "x2": "x2.train.txt",
    "dev1": "d1.dev.txt",
    "dev2": "d2.dev.txt",
    "test1": "d1.test.txt",
    "test2": "d2.test.txt",
}


@dataclass
class TaskData:
    x1: list[list[str]]
    x2: list[list[str]]
    dev1: list[list[str]]
    dev2: list[list[str]]
    test1: list[list[str]]
    test2: list[list[str]]
    key: CipherKey | None = None

    def vocab(self, min_count: int = 1):
        return build_vocab(self.x1 + self.x2, min_count)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        paths = {}
        for attr, name in FILES.items():
            paths[attr] = out_dir / name
            write_corpus(getattr(self, attr), paths[attr])
        if self.key is not None:
            paths["key"] = out_dir / "key.tsv"
            self.key.save(paths["key"])
        return paths


def make_task(task: str, rate: float = 1.0, n_vocab: int = 100, n_train: int = 10000, n_dev: int = 1000,
              n_test: int = 2000, max_len: int = 15, seed: int = 0, concentration: float = 0.05) -> TaskData:
    """Build one task.

    ``cipher``: X2 and the style-2 halves of the pairs are substituted with a
    key at ``rate``.  ``order``: they have their words shuffled.
    ``sentiment-synth``: the two sides carry different marker words and the
    held-out pairs are not parallel.  ``concentration`` is the Dirichlet
    parameter of the bigram rows; small values give a peaked language whose
    word order carries most of the information.
    """
    if task not in TASKS:
        raise ContractError(f"task must be one of {TASKS}, got {task!r}")
    if task == "sentiment-synth":
        c1, c2 = synth_sentiment_corpora(n_vocab, n_train + n_dev + n_test, max_len=max_len, seed=seed)
        x1, dev1, test1 = split_disjoint(c1.sentences, [n_train, n_dev, n_test], seed + 1)
        x2, dev2, test2 = split_disjoint(c2.sentences, [n_train, n_dev, n_test], seed + 2)
        return TaskData(x1, x2, dev1, dev2, test1, test2)

    corpus, _ = synth_bigram_corpus(n_vocab, 2 * n_train + n_dev + n_test, max_len=max_len, seed=seed,
                                    concentration=concentration)
    x1, plain2, dev1, test1 = split_disjoint(corpus.sentences, [n_train, n_train, n_dev, n_test], seed + 1)
    if task == "cipher":
        key = gen_cipher_key(token_names(n_vocab), rate, seed + 2)
        x2, dev2, test2 = (apply_cipher(Corpus(s, 2), key).sentences for s in (plain2, dev1, test1))
        return TaskData(x1, x2, dev1, dev2, test1, test2, key)
    x2, dev2, test2 = (shuffle_words(Corpus(s, 2), seed + 3 + k).sentences
                       for k, s in enumerate((plain2, dev1, test1)))
    return TaskData(x1, x2, dev1, dev2, test1, test2)
