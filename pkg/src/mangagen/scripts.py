"""Story-to-script segmentation for inference.

A plain-text story is split into ``k`` contiguous scripts, one per panel to
generate.  An LLM client can supply the segmentation; without one, a
deterministic fallback splits on sentence boundaries into the ``k`` contiguous
groups minimizing the maximum group character count.

"EMPTY" is the case-sensitive padding sentinel for unused panel slots and is
reserved: a real script may never equal it.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from typing import Protocol, Sequence

from .errors import DataError, SplitProtocolError

__all__ = [
    "EMPTY_SCRIPT",
    "ScriptSet",
    "StorySplitClient",
    "split_sentences",
    "split_story",
    "pad_scripts",
]

EMPTY_SCRIPT = "EMPTY"

# Sentence boundary: a run of terminators, optionally followed by closing
# quotes/brackets, then whitespace or end of text.  Fullwidth CJK terminators
# break unconditionally.  This approximates default Unicode sentence breaks
# well enough for plain prose (known gap: abbreviations like "Dr." split).
_ASCII_TERM = re.compile(r"[.!?…]+[\"'\)\]”’」』]*")
_CJK_TERM = re.compile(r"[。！？]+[」』）]*")


def split_sentences(text: str) -> list[str]:
    """Split text into sentences; whitespace around each sentence is stripped."""
    breaks: list[int] = []
    for m in _ASCII_TERM.finditer(text):
        end = m.end()
        if end >= len(text) or text[end].isspace():
            breaks.append(end)
    breaks.extend(m.end() for m in _CJK_TERM.finditer(text))
    breaks = sorted(set(breaks))

    sentences: list[str] = []
    start = 0
    for end in breaks + [len(text)]:
        chunk = text[start:end].strip()
        if chunk:
            sentences.append(chunk)
        start = end
    return sentences


@dataclass(frozen=True)
class ScriptSet:
    """The per-panel scripts; ``k`` counts the real (non-padding) ones."""

    scripts: tuple[str, ...]
    k: int

    def __post_init__(self):
        object.__setattr__(self, "scripts", tuple(self.scripts))
        if not 1 <= self.k <= len(self.scripts):
            raise DataError(f"k={self.k} outside 1..{len(self.scripts)}")
        for i, s in enumerate(self.scripts):
            if i < self.k:
                if not s:
                    raise DataError(f"script[{i}] is empty")
                if s == EMPTY_SCRIPT:
                    raise DataError(
                        f"script[{i}] equals the reserved padding sentinel {EMPTY_SCRIPT!r}"
                    )
            elif s != EMPTY_SCRIPT:
                raise DataError(
                    f"script[{i}] should be the padding sentinel, got {s!r}"
                )

    @property
    def pad_flags(self) -> tuple[bool, ...]:
        """True for padded slots, in position order."""
        return tuple(i >= self.k for i in range(len(self.scripts)))


class StorySplitClient(Protocol):
    """External splitter (typically an LLM behind an API)."""

    def split(self, story: str, k: int) -> Sequence[str]: ...


def _joined_length(prefix: Sequence[int], i: int, j: int) -> int:
    # length of " ".join(sentences[i:j])
    return prefix[j] - prefix[i] + (j - i - 1)


def _balanced_partition(lengths: Sequence[int], k: int) -> list[int]:
    """Split points for k contiguous groups minimizing the max joined length.

    Returns the k-1 interior boundaries; deterministic (first optimum wins).
    """
    n = len(lengths)
    prefix = [0]
    for v in lengths:
        prefix.append(prefix[-1] + v)

    inf = float("inf")
    best = [[inf] * (n + 1) for _ in range(k + 1)]
    parent = [[0] * (n + 1) for _ in range(k + 1)]
    for i in range(1, n + 1):
        best[1][i] = _joined_length(prefix, 0, i)
    for j in range(2, k + 1):
        for i in range(j, n + 1):
            for m in range(j - 1, i):
                cost = max(best[j - 1][m], _joined_length(prefix, m, i))
                if cost < best[j][i]:
                    best[j][i] = cost
                    parent[j][i] = m

    cuts: list[int] = []
    i = n
    for j in range(k, 1, -1):
        i = parent[j][i]
        cuts.append(i)
    return cuts[::-1]


def split_story(story: str, k: int, client: StorySplitClient | None = None) -> ScriptSet:
    """Split a story into k contiguous scripts.

    A client's segmentation is validated (exactly k segments, order-preserving
    cover of the story) and returned as-is.  The fallback balances sentence
    groups by character count; stories with fewer sentences than k yield
    one-sentence scripts plus "EMPTY" padding and a warning.
    """
    if not story.strip():
        raise DataError("story is empty")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")

    if client is not None:
        segments = [str(s) for s in client.split(story, k)]
        if len(segments) != k:
            raise SplitProtocolError(
                f"client returned {len(segments)} segments, expected {k}"
            )
        if any(not s.strip() for s in segments):
            raise SplitProtocolError("client returned an empty segment")
        if "".join("".join(s.split()) for s in segments) != "".join(story.split()):
            raise SplitProtocolError(
                "client segmentation does not cover the story in order"
            )
        return ScriptSet(scripts=tuple(s.strip() for s in segments), k=k)

    sentences = split_sentences(story)
    if len(sentences) < k:
        warnings.warn(
            f"story has {len(sentences)} sentence(s) but {k} panels requested; "
            f"padding the remainder with {EMPTY_SCRIPT!r}",
            stacklevel=2,
        )
        scripts = sentences + [EMPTY_SCRIPT] * (k - len(sentences))
        return ScriptSet(scripts=tuple(scripts), k=len(sentences))

    cuts = _balanced_partition([len(s) for s in sentences], k)
    bounds = [0] + cuts + [len(sentences)]
    scripts = [" ".join(sentences[a:b]) for a, b in zip(bounds, bounds[1:])]
    return ScriptSet(scripts=tuple(scripts), k=k)


def pad_scripts(scripts: Sequence[str] | ScriptSet, k_max: int) -> ScriptSet:
    """Pad to exactly k_max entries with the "EMPTY" sentinel."""
    if isinstance(scripts, ScriptSet):
        real, k = list(scripts.scripts), scripts.k
    else:
        real = list(scripts)
        k = next((i for i, s in enumerate(real) if s == EMPTY_SCRIPT), len(real))
    if len(real) > k_max:
        raise DataError(f"{len(real)} scripts exceed k_max={k_max}")
    padded = real + [EMPTY_SCRIPT] * (k_max - len(real))
    return ScriptSet(scripts=tuple(padded), k=k)
