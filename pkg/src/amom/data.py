"""Vocabulary, parallel corpora, synthetic task generators.

Tokenization is whitespace splitting: the synthetic vocabularies are
closed, and pre-split (e.g. BPE) text can be ingested as-is.  Reserved
ids are fixed and never produced from corpus text.
"""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .rng import make_stream

PAD_ID = 0
UNK_ID = 1
EOS_ID = 2
MASK_ID = 3
LENGTH_ID = 4
N_RESERVED = 5

RESERVED_TOKENS = ("<pad>", "<unk>", "</s>", "<mask>", "<length>")

SYNTHETIC_TASKS = ("copy", "reverse", "sort", "ambiguous-translate")


class DataError(ValueError):
    """Corpus/vocabulary input problems (CLI maps these to exit code 3)."""


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:N_RESERVED]) != RESERVED_TOKENS:
            raise DataError("vocabulary must start with the reserved tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def token_id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]


def build_vocab(text: str, min_freq: int = 1) -> Vocabulary:
    """Whitespace tokens with freq >= min_freq, ordered (freq desc, token asc)."""
    if not text.strip():
        raise DataError("cannot build a vocabulary from empty text")
    counts = Counter(text.split())
    kept = [
        (tok, c)
        for tok, c in counts.items()
        if c >= min_freq and tok not in RESERVED_TOKENS
    ]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary(list(RESERVED_TOKENS) + [tok for tok, _ in kept])


def encode_line(vocab: Vocabulary, text: str) -> np.ndarray:
    """Whitespace tokens to ids, OOV -> UNK, EOS appended.

    Literal reserved-token strings in the text also become UNK: reserved
    ids only ever enter a corpus structurally.
    """
    ids = []
    for tok in text.split():
        i = vocab.token_id(tok)
        ids.append(UNK_ID if i < N_RESERVED else i)
    ids.append(EOS_ID)
    return np.asarray(ids, dtype=np.int64)


def decode_line(vocab: Vocabulary, ids) -> str:
    """Ids to text; PAD dropped, output stops before the first EOS."""
    toks = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i == PAD_ID:
            continue
        toks.append(vocab.token(i))
    return " ".join(toks)


def save_vocab(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tok in vocab.id_to_token[N_RESERVED:]:
            f.write(tok + "\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        toks = [line.rstrip("\n").rstrip("\r") for line in f]
    toks = [t for t in toks if t]
    return Vocabulary(list(RESERVED_TOKENS) + toks)


# ---------------------------------------------------------------------
# corpora


@dataclass
class ParallelCorpus:
    pairs: list[tuple[np.ndarray, np.ndarray]]
    tags: list[str]
    skipped: int = 0

    def __post_init__(self):
        if len(self.pairs) != len(self.tags):
            raise DataError(f"{len(self.pairs)} pairs vs {len(self.tags)} tags")
        for s, t in self.pairs:
            if len(s) == 0 or len(t) == 0:
                raise DataError("corpus contains an empty side")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def max_src_len(self) -> int:
        return max(len(s) for s, _ in self.pairs)

    @property
    def max_tgt_len(self) -> int:
        return max(len(t) for _, t in self.pairs)

    @property
    def max_content_id(self) -> int:
        return max(max(int(s.max()), int(t.max())) for s, t in self.pairs)


def combine(raw: ParallelCorpus, distilled: ParallelCorpus) -> ParallelCorpus:
    return ParallelCorpus(
        raw.pairs + distilled.pairs,
        raw.tags + distilled.tags,
        raw.skipped + distilled.skipped,
    )


def _read_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n").rstrip("\r") for line in f]


def load_corpus(src_path: str, tgt_path: str, vocab: Vocabulary, tag: str = "raw") -> ParallelCorpus:
    """Two aligned text files; blank-on-either-side pairs skipped and counted."""
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"line-count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}"
        )
    pairs, skipped = [], 0
    for s, t in zip(src_lines, tgt_lines):
        if not s.strip() or not t.strip():
            skipped += 1
            continue
        pairs.append((encode_line(vocab, s), encode_line(vocab, t)))
    if not pairs:
        raise DataError(f"no usable pairs in {src_path}/{tgt_path}")
    return ParallelCorpus(pairs, [tag] * len(pairs), skipped)


def save_corpus(corpus: ParallelCorpus, vocab: Vocabulary, src_path: str, tgt_path: str) -> None:
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for s, t in corpus.pairs:
            fs.write(decode_line(vocab, s) + "\n")
            ft.write(decode_line(vocab, t) + "\n")


# ---------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str
    vocab_size: int = 32
    len_min: int = 4
    len_max: int = 16
    n_pairs: int = 1000
    seed: int = 1
    ambiguity_rate: float = 1.0

    def __post_init__(self):
        if self.task not in SYNTHETIC_TASKS:
            raise DataError(f"task must be one of {SYNTHETIC_TASKS}, got {self.task!r}")
        if self.vocab_size < N_RESERVED + 2:
            raise DataError(f"vocab_size must be >= {N_RESERVED + 2}")
        if not (1 <= self.len_min <= self.len_max):
            raise DataError(f"bad length range [{self.len_min}, {self.len_max}]")
        if self.n_pairs < 1:
            raise DataError("pair count must be >= 1")
        if not (0.0 <= self.ambiguity_rate <= 1.0):
            raise DataError("ambiguity_rate must be in [0, 1]")


def synthetic_vocab(spec: SyntheticTaskSpec) -> Vocabulary:
    """Content tokens are the decimal strings of their own ids."""
    return Vocabulary(list(RESERVED_TOKENS) + [str(i) for i in range(N_RESERVED, spec.vocab_size)])


def _content_ids(spec: SyntheticTaskSpec) -> np.ndarray:
    return np.arange(N_RESERVED, spec.vocab_size, dtype=np.int64)


def ambiguous_tables(spec: SyntheticTaskSpec) -> tuple[dict[int, int], dict[int, int]]:
    """The two substitution tables; A(s) != B(s) for every content symbol s.

    Derived from the vocabulary size alone, not the corpus seed, so corpora
    sampled with different seeds (train/valid/test splits) share one latent
    mapping the way dataset splits share one language.
    """
    rng = make_stream(spec.vocab_size, "ambiguous-tables")
    content = _content_ids(spec)
    perm = rng.permutation(content)
    shift = int(rng.integers(1, len(content)))
    table_a = {int(s): int(perm[i]) for i, s in enumerate(content)}
    table_b = {int(s): int(perm[(i + shift) % len(content)]) for i, s in enumerate(content)}
    return table_a, table_b


def generate_synthetic(spec: SyntheticTaskSpec) -> ParallelCorpus:
    rng = make_stream(spec.seed, f"synthetic-{spec.task}")
    content = _content_ids(spec)
    lut_a = np.zeros(spec.vocab_size, dtype=np.int64)
    lut_b = np.zeros(spec.vocab_size, dtype=np.int64)
    if spec.task == "ambiguous-translate":
        table_a, table_b = ambiguous_tables(spec)
        lut_a[content] = [table_a[int(s)] for s in content]
        lut_b[content] = [table_b[int(s)] for s in content]

    pairs = []
    for _ in range(spec.n_pairs):
        L = int(rng.integers(spec.len_min, spec.len_max + 1))
        src = rng.choice(content, size=L, replace=True)
        if spec.task == "copy":
            tgt = src.copy()
        elif spec.task == "reverse":
            tgt = src[::-1].copy()
        elif spec.task == "sort":
            tgt = np.sort(src)
        else:
            ambiguous = rng.random() < spec.ambiguity_rate
            use_b = ambiguous and rng.random() < 0.5
            tgt = (lut_b if use_b else lut_a)[src]
        pairs.append(
            (
                np.concatenate([src, [EOS_ID]]).astype(np.int64),
                np.concatenate([tgt, [EOS_ID]]).astype(np.int64),
            )
        )
    return ParallelCorpus(pairs, ["raw"] * len(pairs))


def check_ambiguous_consistency(spec: SyntheticTaskSpec, src: np.ndarray, hyp: np.ndarray) -> str:
    """Classify a hypothesis against the two tables: all-A, all-B, inconsistent.

    src/hyp are content ids without EOS/PAD; a correct output matches one
    table at every position.
    """
    table_a, table_b = ambiguous_tables(spec)
    src = [int(s) for s in src if int(s) >= N_RESERVED]
    hyp = [int(h) for h in hyp if int(h) != PAD_ID and int(h) != EOS_ID]
    if len(src) != len(hyp) or not src:
        return "inconsistent"
    if all(table_a.get(s) == h for s, h in zip(src, hyp)):
        return "all-A"
    if all(table_b.get(s) == h for s, h in zip(src, hyp)):
        return "all-B"
    return "inconsistent"
