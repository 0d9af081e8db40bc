"""Recognition decoding: map per-timestep class scores to transcriptions.

Covers CTC decoding (greedy argmax and prefix beam search with blank /
non-blank probability merging) plus a generic step-wise attention decode
loop.  Decoders apply softmax internally, so backends may hand over raw
logits, log-probabilities or probabilities (declared in their model spec and
converted before reaching here is also fine: softmax of log-probs is a
no-op-equivalent renormalization).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .errors import DecodeError, DictionaryError

TextPolicy = str  # one of: keep, lowercase, alnum_lower

_POLICIES = ("keep", "lowercase", "alnum_lower")


@dataclass(frozen=True)
class Dictionary:
    """Bijective symbol/index mapping with optional special tokens.

    Characters occupy indices 0..len(characters)-1; special tokens (blank,
    padding, start, end, unknown) live above that range so the two never
    collide.  Total class count is ``size``.
    """

    characters: tuple[str, ...]
    blank: int | None = None
    padding: int | None = None
    start: int | None = None
    end: int | None = None
    unknown: int | None = None
    _index: dict[str, int] = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "characters", tuple(self.characters))
        if len(set(self.characters)) != len(self.characters):
            raise DictionaryError("duplicate symbols in dictionary")
        n = len(self.characters)
        specials = [s for s in (self.blank, self.padding, self.start, self.end, self.unknown) if s is not None]
        if len(set(specials)) != len(specials):
            raise DictionaryError("special indices must be disjoint")
        for s in specials:
            if s < n:
                raise DictionaryError(f"special index {s} collides with character range 0..{n - 1}")
        object.__setattr__(self, "_index", {ch: i for i, ch in enumerate(self.characters)})

    @property
    def size(self) -> int:
        """Number of classes a score row must have."""
        specials = [s for s in (self.blank, self.padding, self.start, self.end, self.unknown) if s is not None]
        return max([len(self.characters) - 1, *specials]) + 1

    @classmethod
    def ctc(cls, characters) -> "Dictionary":
        """Characters plus a trailing blank, the usual CTC layout."""
        chars = tuple(characters)
        return cls(characters=chars, blank=len(chars))

    @classmethod
    def attention(cls, characters, with_unknown: bool = False) -> "Dictionary":
        """Characters plus start/end/padding (and optionally unknown) tokens."""
        chars = tuple(characters)
        n = len(chars)
        return cls(
            characters=chars,
            start=n,
            end=n + 1,
            padding=n + 2,
            unknown=n + 3 if with_unknown else None,
        )

    @classmethod
    def load(cls, path, kind: str = "ctc") -> "Dictionary":
        """Read symbols from a plain-text file, one per line, UTF-8; line
        order fixes the index order.  Special tokens are appended according
        to ``kind`` ('ctc' or 'attention'), never read from the file."""
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        symbols = []
        for i, line in enumerate(lines):
            sym = line.rstrip("\r")
            if sym == "":
                raise DictionaryError(f"{path}:{i + 1}: empty symbol line")
            symbols.append(sym)
        if kind == "ctc":
            return cls.ctc(symbols)
        if kind == "attention":
            return cls.attention(symbols)
        raise DictionaryError(f"unknown dictionary kind {kind!r}")

    def symbol(self, index: int) -> str:
        if 0 <= index < len(self.characters):
            return self.characters[index]
        raise DictionaryError(f"index {index} is not a character index")

    def encode(self, text: str) -> list[int]:
        """Map text to character indices; symbols missing from the dictionary
        fall back to the unknown index when one is configured."""
        out = []
        for ch in text:
            idx = self._index.get(ch)
            if idx is None:
                if self.unknown is None:
                    raise DictionaryError(f"symbol {ch!r} not in dictionary and no unknown index set")
                idx = self.unknown
            out.append(idx)
        return out


@dataclass(frozen=True)
class Transcription:
    """Decoded text with a sequence score and per-character probabilities."""

    text: str
    score: float
    per_char_scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.per_char_scores) != len(self.text):
            raise ValueError("per_char_scores length must equal text length")


def softmax(rows: NDArray) -> NDArray[np.float64]:
    """Row-wise softmax, numerically stable."""
    arr = np.asarray(rows, dtype=np.float64)
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_logits(logits, dictionary: Dictionary) -> NDArray[np.float64]:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 2:
        raise DecodeError(f"logits must be (T, C) with T>=1, C>=2, got shape {arr.shape}")
    if arr.shape[1] != dictionary.size:
        raise DictionaryError(
            f"logits have {arr.shape[1]} classes but dictionary declares {dictionary.size}"
        )
    return arr


def _geometric_mean(values: list[float]) -> float:
    if not values:
        return 1.0  # empty-text convention
    return float(math.exp(sum(math.log(max(v, 1e-300)) for v in values) / len(values)))


def ctc_greedy_decode(logits, dictionary: Dictionary) -> Transcription:
    """Best-path decode: per-step argmax (ties to the lowest class index),
    collapse consecutive repeats, drop blanks.  The score is the geometric
    mean of the softmax probabilities at the steps that emitted a symbol."""
    if dictionary.blank is None:
        raise DictionaryError("CTC decoding needs a blank index")
    arr = _check_logits(logits, dictionary)
    probs = softmax(arr)
    path = np.argmax(arr, axis=1)  # np.argmax takes the first (lowest) max index
    chars: list[str] = []
    char_probs: list[float] = []
    prev = -1
    for t, cls in enumerate(path):
        cls = int(cls)
        if cls != dictionary.blank and cls != prev:
            chars.append(dictionary.symbol(cls))
            char_probs.append(float(probs[t, cls]))
        prev = cls
    return Transcription(
        text="".join(chars),
        score=_geometric_mean(char_probs),
        per_char_scores=tuple(char_probs),
    )


def ctc_beam_decode(logits, dictionary: Dictionary, beam_width: int) -> list[Transcription]:
    """Prefix beam search.

    Tracks, per label prefix, the probability mass of alignments ending in
    blank vs. ending in the prefix's last symbol, so repeats merge correctly.
    Returns up to ``beam_width`` hypotheses ordered by descending total
    sequence probability (the sum over all alignments in the beam that
    collapse to that label sequence); each hypothesis's ``score`` is that
    probability.
    """
    if beam_width < 1:
        raise DecodeError(f"beam_width must be >= 1, got {beam_width}")
    if dictionary.blank is None:
        raise DictionaryError("CTC decoding needs a blank index")
    arr = _check_logits(logits, dictionary)
    probs = softmax(arr)
    blank = dictionary.blank
    n_chars = len(dictionary.characters)

    # prefix (tuple of char indices) -> [p_ending_in_blank, p_ending_in_symbol]
    beam: dict[tuple[int, ...], list[float]] = {(): [1.0, 0.0]}
    for t in range(arr.shape[0]):
        row = probs[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def bump(prefix: tuple[int, ...], which: int, p: float) -> None:
            slot = nxt.setdefault(prefix, [0.0, 0.0])
            slot[which] += p

        for prefix, (p_b, p_nb) in beam.items():
            total = p_b + p_nb
            bump(prefix, 0, total * row[blank])
            if prefix:
                bump(prefix, 1, p_nb * row[prefix[-1]])
            for s in range(n_chars):
                p_s = row[s]
                if prefix and prefix[-1] == s:
                    # Same symbol again only extends across a blank.
                    bump(prefix + (s,), 1, p_b * p_s)
                else:
                    bump(prefix + (s,), 1, total * p_s)
        # Zero-mass prefixes are unreachable label sequences (e.g. a repeat
        # with no room for a separating blank); they are not hypotheses.
        ranked = sorted(
            ((k, v) for k, v in nxt.items() if v[0] + v[1] > 0.0),
            key=lambda kv: (-(kv[1][0] + kv[1][1]), kv[0]),
        )
        beam = dict(ranked[:beam_width])

    hypotheses = []
    for prefix, (p_b, p_nb) in sorted(beam.items(), key=lambda kv: (-(kv[1][0] + kv[1][1]), kv[0])):
        total = p_b + p_nb
        text = "".join(dictionary.symbol(i) for i in prefix)
        # The alignment-sum does not factor per character; spread it evenly.
        per_char = total ** (1.0 / len(prefix)) if prefix else 1.0
        hypotheses.append(
            Transcription(text=text, score=float(total), per_char_scores=(float(per_char),) * len(prefix))
        )
    return hypotheses[:beam_width]


StepFn = Callable[[object, int], tuple[object, NDArray]]


def attention_decode(step: StepFn, dictionary: Dictionary, max_len: int) -> Transcription:
    """Generic auto-regressive greedy loop: feed the start token, take the
    argmax symbol each step, stop at the end token or after ``max_len``
    symbols.  Non-emittable specials (start/padding/blank/unknown) are masked
    out of the argmax so they can never leak into the output text."""
    if dictionary.start is None or dictionary.end is None:
        raise DictionaryError("attention decoding needs start and end indices")
    if max_len < 1:
        raise DecodeError(f"max_len must be >= 1, got {max_len}")
    masked = [
        s
        for s in (dictionary.start, dictionary.padding, dictionary.blank, dictionary.unknown)
        if s is not None
    ]
    state: object = None
    prev = dictionary.start
    chars: list[str] = []
    char_probs: list[float] = []
    for _ in range(max_len):
        try:
            state, scores = step(state, prev)
        except Exception as exc:  # contract: step faults become decode errors
            raise DecodeError(f"attention step function failed: {exc}") from exc
        row = np.asarray(scores, dtype=np.float64).reshape(-1)
        if row.shape[0] != dictionary.size:
            raise DictionaryError(
                f"step produced {row.shape[0]} scores but dictionary declares {dictionary.size}"
            )
        p = softmax(row[None, :])[0]
        row = row.copy()
        row[masked] = -np.inf
        cls = int(np.argmax(row))
        if cls == dictionary.end:
            break
        chars.append(dictionary.symbol(cls))
        char_probs.append(float(p[cls]))
        prev = cls
    return Transcription(
        text="".join(chars),
        score=_geometric_mean(char_probs),
        per_char_scores=tuple(char_probs),
    )


def normalize_text(text: str, policy: TextPolicy) -> str:
    """Evaluation-time normalization: 'keep' is the identity, 'lowercase'
    folds case, 'alnum_lower' additionally strips non-alphanumerics."""
    if policy not in _POLICIES:
        raise ValueError(f"unknown normalization policy {policy!r}; expected one of {_POLICIES}")
    if policy == "keep":
        return text
    lowered = text.lower()
    if policy == "lowercase":
        return lowered
    return "".join(ch for ch in lowered if ch.isalnum())
