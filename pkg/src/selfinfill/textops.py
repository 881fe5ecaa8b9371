"""Text machinery: stop-sequence scanning and suffix-prompt construction.

Stop detection runs over detokenized text. The incremental scanner keeps
only a tail window of the text it has seen (longest stop sequence minus
one character), so repeated scanning over a growing generation stays
linear overall.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional

from .errors import ExtractionError, InvalidInputError
from .vocab import TokenStream, Vocabulary

FIXED_TEXT = "fixed_text"
FIRST_ARGUMENT_NAME = "first_argument_name"
TARGET_VARIABLE = "target_variable"
END_MARKER = "end_marker"
_RULE_KINDS = (FIXED_TEXT, FIRST_ARGUMENT_NAME, TARGET_VARIABLE, END_MARKER)


@dataclass(frozen=True)
class StopSpec:
    """Stop sequences, matched against the detokenized text of the current phase."""

    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for seq in self.stop_sequences:
            if not seq:
                raise InvalidInputError("stop sequences must be non-empty strings")

    @property
    def max_len(self) -> int:
        return max((len(s) for s in self.stop_sequences), default=0)


@dataclass(frozen=True)
class StopMatch:
    """Where a stop sequence starts and which sequence matched."""

    index: int
    sequence: str

    @property
    def end(self) -> int:
        return self.index + len(self.sequence)


def scan_stop(text: str, stop: StopSpec) -> Optional[StopMatch]:
    """Earliest stop occurrence in text, ties at the same index going to the longest sequence."""
    best: Optional[StopMatch] = None
    for seq in stop.stop_sequences:
        idx = text.find(seq)
        if idx < 0:
            continue
        if best is None or idx < best.index or (idx == best.index and len(seq) > len(best.sequence)):
            best = StopMatch(index=idx, sequence=seq)
    return best


class StopScanner:
    """Incremental stop detection over a stream of text chunks.

    Feeding a chunk reports the earliest occurrence that completes within
    it (indices are absolute over everything fed so far). Only a bounded
    tail is retained, so total cost is linear in the fed text.
    """

    def __init__(self, stop: StopSpec):
        self.stop = stop
        self._tail = ""
        self._consumed = 0  # absolute offset of the start of _tail

    def feed(self, chunk: str) -> Optional[StopMatch]:
        if not self.stop.stop_sequences or not chunk:
            self._advance(chunk)
            return None
        window = self._tail + chunk
        tail_len = len(self._tail)
        base = self._consumed
        best: Optional[StopMatch] = None
        for seq in self.stop.stop_sequences:
            # earliest occurrence ending inside the new chunk
            idx = window.find(seq)
            while idx >= 0 and idx + len(seq) <= tail_len:
                idx = window.find(seq, idx + 1)
            if idx < 0:
                continue
            abs_idx = base + idx
            if (
                best is None
                or abs_idx < best.index
                or (abs_idx == best.index and len(seq) > len(best.sequence))
            ):
                best = StopMatch(index=abs_idx, sequence=seq)
        self._advance(chunk)
        return best

    def _advance(self, chunk: str) -> None:
        window = self._tail + chunk
        keep = max(self.stop.max_len - 1, 0)
        start = max(len(window) - keep, 0)
        self._consumed += start
        self._tail = window[start:]


def strip_boundary_spaces(text: str) -> str:
    """Right-strip space characters only; newlines and tabs carry structure and stay."""
    return text.rstrip(" ")


@dataclass(frozen=True)
class SuffixPromptRule:
    """Policy for building the suffix prompt from a problem statement."""

    kind: str
    payload: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in _RULE_KINDS:
            raise InvalidInputError(f"unknown rule kind {self.kind!r}, expected one of {_RULE_KINDS}")
        if self.kind in (FIXED_TEXT, TARGET_VARIABLE, END_MARKER) and not self.payload:
            raise InvalidInputError(f"rule {self.kind!r} requires a non-empty payload")


_DEF_RE = re.compile(r"\bdef\s+\w+\s*\(")
_IDENT_RE = re.compile(r"[A-Za-z_]\w*")


def _first_argument_name(problem_text: str) -> str:
    match = _DEF_RE.search(problem_text)
    if match is None:
        raise ExtractionError("no function signature found in problem text")
    start = match.end()  # just past the opening parenthesis
    depth = 1
    end = start
    while end < len(problem_text) and depth > 0:
        ch = problem_text[end]
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        end += 1
    params = problem_text[start : end - 1]
    first = params.split(",")[0].strip().lstrip("*")
    ident = _IDENT_RE.match(first)
    if ident is None:
        raise ExtractionError(f"could not extract a parameter name from {params!r}")
    return ident.group(0)


def suffix_prompt_text(problem_text: str, rule: SuffixPromptRule) -> str:
    """The suffix-prompt text a rule produces for a problem statement."""
    if rule.kind == FIRST_ARGUMENT_NAME:
        return _first_argument_name(problem_text)
    assert rule.payload is not None
    return rule.payload


def build_suffix_prompt(problem_text: str, rule: SuffixPromptRule, vocab: Vocabulary) -> TokenStream:
    """Tokenized suffix prompt for a problem under the given rule."""
    return vocab.tokenize(suffix_prompt_text(problem_text, rule))


# -- stop presets -----------------------------------------------------------


def load_stop_presets() -> dict[str, StopSpec]:
    """Named stop-sequence bundles shipped with the package."""
    raw = resources.files("selfinfill").joinpath("presets/stop_presets.json").read_text("utf-8")
    return {name: StopSpec(tuple(seqs)) for name, seqs in json.loads(raw).items()}


def stop_preset(name: str) -> StopSpec:
    presets = load_stop_presets()
    if name not in presets:
        raise InvalidInputError(f"unknown stop preset {name!r}, expected one of {sorted(presets)}")
    return presets[name]


def resolve_stop(
    explicit: Iterable[str] | None = None, preset: str | None = None
) -> StopSpec:
    """Explicit stop sequences win over a preset; neither means no stops."""
    if explicit:
        return StopSpec(tuple(explicit))
    if preset:
        return stop_preset(preset)
    return StopSpec(())
