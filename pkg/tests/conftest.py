"""Shared fixtures and independent checkers used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from selfinfill.backends import TableBackend
from selfinfill.vocab import Vocabulary


@pytest.fixture
def abr_vocab() -> Vocabulary:
    """Tiny char vocabulary: a, b, r plus the four sentinels."""
    return Vocabulary.char_vocab("abr")


def point_mass(size: int, index: int) -> list[float]:
    row = [0.0] * size
    row[index] = 1.0
    return row


def uniform_over(size: int, indices: list[int]) -> list[float]:
    row = [0.0] * size
    for i in indices:
        row[i] = 1.0 / len(indices)
    return row


def table_backend(
    vocab: Vocabulary,
    default: list[float] | None = None,
    by_length: dict[int, list[float]] | None = None,
    entries: dict[tuple[int, ...], list[float]] | None = None,
) -> TableBackend:
    return TableBackend(vocab, entries=entries, by_length=by_length, default=default)


def validate_sentinel_grammar(raw: tuple[int, ...], vocab: Vocabulary) -> None:
    """Independent oracle for <PRE> prefix [<SUF> suffix [<MID> middle [<EOT>]]].

    Written as a straight linear scan over the raw tokens, deliberately not
    sharing code with the decoder's parser.
    """
    assert raw, "raw tokens must be non-empty"
    assert raw[0] == vocab.pre, "raw tokens must start with PRE"
    section = "prefix"
    for tid in raw[1:]:
        if tid == vocab.pre:
            raise AssertionError("duplicate PRE")
        if tid == vocab.suf:
            assert section == "prefix", f"SUF arrived in section {section}"
            section = "suffix"
        elif tid == vocab.mid:
            assert section == "suffix", f"MID arrived in section {section}"
            section = "middle"
        elif tid == vocab.eot:
            assert section == "middle", f"EOT arrived in section {section}"
            section = "done"
        else:
            assert section in ("prefix", "suffix", "middle"), "content token after EOT"
    assert section in ("prefix", "suffix", "middle", "done")


def validate_phase_transitions(steps, started_in_suffix: bool = False) -> None:
    """Phases over the step log may only move forward."""
    order = {"prefix": 0, "suffix": 1, "middle": 2}
    last = order["suffix"] if started_in_suffix else order["prefix"]
    seen_start = False
    for step in steps:
        rank = order[step.phase]
        if not seen_start:
            assert rank >= last, f"run started in a later phase than step {step}"
            seen_start = True
        assert rank >= last, f"phase went backwards: {step.phase}"
        last = rank


def make_rng(seed: int = 0) -> np.random.Generator:
    from selfinfill.sampling import rng_stream

    return rng_stream(seed, 0)
