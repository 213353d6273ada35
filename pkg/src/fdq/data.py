"""Synthetic tasks, parallel-text loading, vocabularies, batching.

Token conventions used everywhere downstream:
- ids 0..3 are reserved for PAD, BOS, EOS, UNK;
- source sequences hold content ids only;
- target sequences hold content ids followed by exactly one EOS;
- a pair's length N counts content tokens, excluding that EOS.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, LoadError
from .seeding import substream

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

TASKS = ("copy", "reverse", "num2words", "dialogue")


class Vocab:
    """Bidirectional token/id map with the four reserved ids in front."""

    def __init__(self, tokens=()):
        self._tokens = list(RESERVED) + list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ContractError("duplicate tokens in vocabulary")

    @classmethod
    def from_counts(cls, counts, min_count=1):
        if min_count < 1:
            raise ConfigError(f"min_count must be >= 1, got {min_count}")
        kept = [(tok, c) for tok, c in counts.items()
                if c >= min_count and tok not in RESERVED]
        kept.sort(key=lambda item: (-item[1], item[0]))
        return cls(tok for tok, _ in kept)

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token):
        return self._ids.get(token, UNK)

    def token(self, idx):
        return self._tokens[idx]

    def encode(self, tokens):
        return [self._ids.get(t, UNK) for t in tokens]

    def decode(self, ids):
        return [self._tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise LoadError(f"{path}: reserved tokens missing or reordered")
        return cls(lines[4:])


@dataclass
class SequencePair:
    """One aligned (X, Y) pair; Y carries its terminating EOS."""

    src: list
    tgt: list

    @property
    def n(self):
        """Content length of the target, excluding EOS."""
        return len(self.tgt) - 1


@dataclass
class Corpus:
    pairs: list
    src_vocab: Vocab
    tgt_vocab: Vocab
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def validate(self):
        for k, pair in enumerate(self.pairs):
            if not pair.tgt or pair.tgt[-1] != EOS:
                raise ContractError(f"pair {k}: target must end with EOS")
            if any(not 0 <= t < len(self.src_vocab) for t in pair.src):
                raise ContractError(f"pair {k}: source id out of range")
            if any(not 0 <= t < len(self.tgt_vocab) for t in pair.tgt):
                raise ContractError(f"pair {k}: target id out of range")
        return self


@dataclass
class TaskSpec:
    task: str
    vocab: int = 12          # content alphabet size for copy/reverse
    min_len: int = 1
    max_len: int = 8
    pairs: int = 500
    seed: int = 0


# dialogue task construction: each source pairs one of n_templates question
# stems with a filler topic token; 40% of targets are one shared generic
# reply, the rest split evenly across 3 template-specific replies.  Generic
# replies dominate the forward distribution while specific replies pin down
# their source, which is the asymmetry mutual-information decoding exploits.
DIALOGUE_TEMPLATES = 20
DIALOGUE_FILLERS = 10
DIALOGUE_SPECIFICS = 3
GENERIC_PROB = 0.4
GENERIC_REPLY = ("i", "am", "not", "sure")


def dialogue_source(template, filler):
    return (f"q{template}", "about", f"f{filler}")


def dialogue_specific(template, choice):
    return (f"topic{template}", f"detail{choice}", "here")


_ONES = ("zero", "one", "two", "three", "four", "five", "six", "seven",
         "eight", "nine")
_TEENS = ("ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
          "sixteen", "seventeen", "eighteen", "nineteen")
_TENS = ("", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy",
         "eighty", "ninety")


def number_words(n):
    """English word sequence for 0 <= n <= 9999."""
    if not 0 <= n <= 9999:
        raise ConfigError(f"number out of range: {n}")
    words = []
    if n >= 1000:
        words += [_ONES[n // 1000], "thousand"]
        n %= 1000
    if n >= 100:
        words += [_ONES[n // 100], "hundred"]
        n %= 100
    if n >= 20:
        words.append(_TENS[n // 10])
        if n % 10:
            words.append(_ONES[n % 10])
    elif n >= 10:
        words.append(_TEENS[n - 10])
    elif n > 0 or not words:
        words.append(_ONES[n])
    return words


def _validate_spec(spec):
    if spec.task not in TASKS:
        raise ConfigError(f"unknown task {spec.task!r}; expected one of {TASKS}")
    if spec.min_len > spec.max_len or spec.min_len < 1:
        raise ConfigError(f"bad length range [{spec.min_len}, {spec.max_len}]")
    if spec.pairs < 1:
        raise ConfigError(f"pair count must be >= 1, got {spec.pairs}")
    if spec.task in ("copy", "reverse") and spec.vocab < 1:
        raise ConfigError(f"alphabet size must be >= 1, got {spec.vocab}")


def _raw_pairs(spec):
    rng = substream(spec.seed, "data", spec.task)
    out = []
    if spec.task in ("copy", "reverse"):
        alphabet = [f"w{i:02d}" for i in range(spec.vocab)]
        for _ in range(spec.pairs):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            xs = [alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=length)]
            ys = xs[::-1] if spec.task == "reverse" else list(xs)
            out.append((xs, ys))
    elif spec.task == "num2words":
        for _ in range(spec.pairs):
            n = int(rng.integers(0, 10000))
            out.append((list(str(n)), number_words(n)))
    else:
        for _ in range(spec.pairs):
            template = int(rng.integers(0, DIALOGUE_TEMPLATES))
            filler = int(rng.integers(0, DIALOGUE_FILLERS))
            xs = list(dialogue_source(template, filler))
            if rng.random() < GENERIC_PROB:
                ys = list(GENERIC_REPLY)
            else:
                choice = int(rng.integers(0, DIALOGUE_SPECIFICS))
                ys = list(dialogue_specific(template, choice))
            out.append((xs, ys))
    return out


def build_vocab(raw_pairs, min_count=1):
    """Source and target vocabularies from whitespace-token pairs."""
    src_counts = Counter(t for xs, _ in raw_pairs for t in xs)
    tgt_counts = Counter(t for _, ys in raw_pairs for t in ys)
    return (Vocab.from_counts(src_counts, min_count),
            Vocab.from_counts(tgt_counts, min_count))


def encode_corpus(raw_pairs, src_vocab, tgt_vocab, provenance):
    pairs = [SequencePair(src_vocab.encode(xs), tgt_vocab.encode(ys) + [EOS])
             for xs, ys in raw_pairs]
    return Corpus(pairs, src_vocab, tgt_vocab, provenance).validate()


def gen_task(spec):
    """Generate a synthetic corpus; bit-identical for identical specs."""
    _validate_spec(spec)
    raw = _raw_pairs(spec)
    src_vocab, tgt_vocab = build_vocab(raw)
    provenance = {"task": spec.task, "seed": spec.seed, "pairs": spec.pairs,
                  "vocab": spec.vocab, "min_len": spec.min_len,
                  "max_len": spec.max_len}
    return encode_corpus(raw, src_vocab, tgt_vocab, provenance)


def load_parallel_text(src_path, tgt_path, min_count=1):
    """Line-aligned whitespace-tokenized files into a Corpus."""
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise LoadError(
            f"line counts differ: {src_path} has {len(src_lines)}, "
            f"{tgt_path} has {len(tgt_lines)}")
    raw = [(s.split(), t.split()) for s, t in zip(src_lines, tgt_lines)]
    src_vocab, tgt_vocab = build_vocab(raw, min_count)
    provenance = {"source": str(src_path), "target": str(tgt_path),
                  "min_count": min_count}
    return encode_corpus(raw, src_vocab, tgt_vocab, provenance)


def split(corpus, fractions, seed):
    """Disjoint, exhaustive, seeded (train, dev, test) split."""
    fractions = tuple(fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions sum to {sum(fractions)!r}, not 1")
    order = substream(seed, "split").permutation(len(corpus.pairs))
    n_train = int(len(order) * fractions[0])
    n_dev = int(len(order) * fractions[1])
    parts = (order[:n_train], order[n_train:n_train + n_dev],
             order[n_train + n_dev:])
    return tuple(
        Corpus([corpus.pairs[i] for i in idx], corpus.src_vocab,
               corpus.tgt_vocab, dict(corpus.provenance, split=name))
        for idx, name in zip(parts, ("train", "dev", "test")))


@dataclass
class Batch:
    """Padded id arrays plus loss masks for one training step.

    tgt_in is BOS followed by the target without its EOS; tgt_out is the
    target including EOS; tgt_mask is 1 exactly where tgt_out is real.
    """

    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self):
        return self.src.shape[0]


def make_batch(pairs):
    b = len(pairs)
    s_max = max(1, max(len(p.src) for p in pairs))
    t_max = max(len(p.tgt) for p in pairs)
    src = np.full((b, s_max), PAD, dtype=np.int64)
    src_mask = np.zeros((b, s_max), dtype=np.float32)
    tgt_in = np.full((b, t_max), PAD, dtype=np.int64)
    tgt_out = np.full((b, t_max), PAD, dtype=np.int64)
    tgt_mask = np.zeros((b, t_max), dtype=np.float32)
    for k, p in enumerate(pairs):
        src[k, :len(p.src)] = p.src
        src_mask[k, :len(p.src)] = 1.0
        tgt_in[k, 0] = BOS
        tgt_in[k, 1:len(p.tgt)] = p.tgt[:-1]
        tgt_out[k, :len(p.tgt)] = p.tgt
        tgt_mask[k, :len(p.tgt)] = 1.0
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask)


def batch_iter(corpus, batch_size, sort_by_length=False, seed=None):
    """Padded batches covering the corpus exactly once, in a fixed order."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    order = list(range(len(corpus.pairs)))
    if seed is not None:
        order = list(substream(seed, "batches").permutation(len(order)))
    if sort_by_length:
        order.sort(key=lambda i: (-len(corpus.pairs[i].src), i))
    for lo in range(0, len(order), batch_size):
        chunk = [corpus.pairs[i] for i in order[lo:lo + batch_size]]
        yield make_batch(chunk)


def save_corpus(corpus, path):
    """Cache to newline-delimited JSON with vocab sidecar files."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for pair in corpus.pairs:
            fh.write(json.dumps({"src": list(pair.src), "tgt": list(pair.tgt)},
                                separators=(",", ":")) + "\n")
    corpus.src_vocab.save(path.with_suffix(path.suffix + ".src.vocab"))
    corpus.tgt_vocab.save(path.with_suffix(path.suffix + ".tgt.vocab"))


def load_corpus(path):
    path = Path(path)
    src_vocab = Vocab.load(path.with_suffix(path.suffix + ".src.vocab"))
    tgt_vocab = Vocab.load(path.with_suffix(path.suffix + ".tgt.vocab"))
    pairs = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            pairs.append(SequencePair(rec["src"], rec["tgt"]))
    corpus = Corpus(pairs, src_vocab, tgt_vocab, {"cache": str(path)})
    return corpus.validate()
