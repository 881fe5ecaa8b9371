"""Evaluation utilities: pass@k, degeneracy, loop-change categories, ranking."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

from .errors import InvalidInputError


@dataclass(frozen=True)
class SampleOutcome:
    """One generated sample with its evaluation signals."""

    problem_id: str
    sample_index: int
    text: str
    mean_logprob: float
    correct: bool
    degenerate: bool = False


class LoopChange(Enum):
    UNCHANGED = "unchanged"
    CHANGED_REMAINED_CORRECT = "changed_remained_correct"
    CHANGED_REMAINED_INCORRECT = "changed_remained_incorrect"
    CORRECT_TO_INCORRECT = "correct_to_incorrect"
    INCORRECT_TO_CORRECT = "incorrect_to_correct"


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimator of the probability that a size-k sample contains a correct solution.

    1 - C(n-c, k) / C(n, k), evaluated in product form for stability. Exact
    semantics: the expected fraction of size-k subsets of the n samples that
    contain at least one of the c correct ones.
    """
    if not 0 <= c <= n:
        raise InvalidInputError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise InvalidInputError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    product = 1.0
    for i in range(k):
        product *= (n - c - i) / (n - i)
    return 1.0 - product


@dataclass(frozen=True)
class DegeneracyConfig:
    """Thresholds for the degeneracy classifier.

    A body is degenerate when, ignoring comments and whitespace, nothing
    remains, or when some block of at most max_window consecutive non-blank
    lines repeats at least min_repeats times in a row.
    """

    max_window: int = 4
    min_repeats: int = 3
    comment_prefixes: tuple[str, ...] = ("#",)


@dataclass(frozen=True)
class DegeneracyVerdict:
    degenerate: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.degenerate


def classify_degenerate(text: str, cfg: DegeneracyConfig = DegeneracyConfig()) -> DegeneracyVerdict:
    """Flag empty-equivalent or repetitively looping outputs."""
    lines = [line.rstrip() for line in text.rstrip().split("\n")]

    def is_code(line: str) -> bool:
        stripped = line.strip()
        return bool(stripped) and not any(stripped.startswith(p) for p in cfg.comment_prefixes)

    if not any(is_code(line) for line in lines):
        return DegeneracyVerdict(True, "empty")

    n = len(lines)
    for window in range(1, cfg.max_window + 1):
        for start in range(n - window * cfg.min_repeats + 1):
            block = lines[start : start + window]
            if not any(line.strip() for line in block):
                continue
            repeats = 1
            while lines[start + repeats * window : start + (repeats + 1) * window] == block:
                repeats += 1
            if repeats >= cfg.min_repeats:
                return DegeneracyVerdict(True, f"repetition:{window}x{repeats}")
    return DegeneracyVerdict(False)


def categorize_loop_change(prev: SampleOutcome, curr: SampleOutcome) -> LoopChange:
    """Map a consecutive-iteration pair to its change category."""
    if prev.problem_id != curr.problem_id:
        raise InvalidInputError("loop-change comparison requires the same problem")
    if prev.text == curr.text:
        return LoopChange.UNCHANGED
    if prev.correct and curr.correct:
        return LoopChange.CHANGED_REMAINED_CORRECT
    if prev.correct and not curr.correct:
        return LoopChange.CORRECT_TO_INCORRECT
    if not prev.correct and curr.correct:
        return LoopChange.INCORRECT_TO_CORRECT
    return LoopChange.CHANGED_REMAINED_INCORRECT


def rank_by_mean_logprob(samples: Sequence[SampleOutcome]) -> SampleOutcome:
    """Sample with the highest mean token log probability; ties go to the lowest index."""
    if not samples:
        raise InvalidInputError("cannot rank an empty sample list")
    best = samples[0]
    for sample in samples[1:]:
        if sample.mean_logprob > best.mean_logprob or (
            sample.mean_logprob == best.mean_logprob and sample.sample_index < best.sample_index
        ):
            best = sample
    return best


# A checker maps (problem_id, text) to a correctness verdict.
Checker = Callable[[str, str], bool]


def regex_checker(patterns: dict[str, str]) -> Checker:
    """Desk-scale correctness: problem id -> regex searched in the sample text."""
    compiled = {pid: re.compile(pat) for pid, pat in patterns.items()}

    def check(problem_id: str, text: str) -> bool:
        pattern = compiled.get(problem_id)
        return bool(pattern.search(text)) if pattern is not None else False

    return check
