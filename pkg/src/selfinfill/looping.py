"""The looping mechanism: alternating self-infill and left-to-right passes.

Each cycle regenerates the middle given the latest suffix (via self-infill)
and then regenerates the suffix given the latest middle (via left-to-right
continuation), carrying a freshly split suffix prompt into the next cycle.
The original prompt stays fixed; any prefix continuation the interruption
produced is merged into the front of the middle.

Fallbacks keep the cycle total: a self-infill with no suffix just hands its
prefix continuation to the left-to-right pass, a middle that failed to join
the suffix is truncated to the last suffix-prompt occurrence, and a
degenerate or unsplittable left-to-right output reverts the cycle to the
previous self-infill context.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .backends import Backend
from .decoding import (
    DecodeTrace,
    GenerationQuadruple,
    STOP_BUDGET,
    SelfInfillConfig,
    left_to_right,
    self_infill,
)
from .errors import (
    BackendUnavailableError,
    ContextOverflowError,
    InvalidInputError,
    LoopAbortedError,
    MalformedStateError,
    ProtocolViolationError,
)
from .evalkit import classify_degenerate
from .sampling import SamplerConfig
from .textops import strip_boundary_spaces
from .vocab import TokenStream, Vocabulary

VANILLA = "vanilla"
EXTENDED = "extended"
HALF = "half"
SPLIT_STRATEGIES = (VANILLA, EXTENDED, HALF)

# failure kinds handled by apply_fallbacks
NO_SUFFIX = "no-suffix-from-self-infill"
MIDDLE_JOIN = "middle-fails-to-join-suffix"
DEGENERATE = "degenerate-l2r-output"
SP_NOT_FOUND = "sp-not-found-in-l2r-suffix"
FAILURE_KINDS = (NO_SUFFIX, MIDDLE_JOIN, DEGENERATE, SP_NOT_FOUND)

# operational backend failures abort a loop run with partial history
_BACKEND_ERRORS = (BackendUnavailableError, ContextOverflowError, ProtocolViolationError)


@dataclass(frozen=True)
class LoopConfig:
    """Loop length, suffix-splitting strategy and the per-call configs.

    n_iterations == 0 means the looping mechanism is not activated: one
    self-infill call, no left-to-right pass. The default suffix prompt seeds
    the first iteration and is the needle the splitting strategies search
    for; per-iteration suffix prompts override the one in ``si``.
    """

    n_iterations: int = 2
    split_strategy: str = EXTENDED
    default_suffix_prompt: TokenStream = ()
    si: SelfInfillConfig = SelfInfillConfig()
    sampler: SamplerConfig = SamplerConfig()

    def __post_init__(self) -> None:
        if self.n_iterations < 0:
            raise InvalidInputError(f"n_iterations must be >= 0, got {self.n_iterations}")
        if self.split_strategy not in SPLIT_STRATEGIES:
            raise InvalidInputError(
                f"split_strategy must be one of {SPLIT_STRATEGIES}, got {self.split_strategy!r}"
            )


@dataclass(frozen=True)
class IterationRecord:
    """Everything one cycle did; l2r fields are None for the N=0 single call."""

    iteration: int
    si_input: TokenStream
    quadruple: GenerationQuadruple  # merged: prefix is the prompt, middle carries the continuation
    si_trace: DecodeTrace
    l2r_input: Optional[TokenStream]
    suffix: Optional[TokenStream]
    l2r_trace: Optional[DecodeTrace]
    output: TokenStream  # linear output after this cycle
    fallbacks: tuple[dict, ...]
    split: Optional[dict]


@dataclass(frozen=True)
class LoopState:
    prefix: TokenStream
    middle: TokenStream
    suffix: TokenStream
    suffix_prompt: TokenStream
    iteration: int
    history: tuple[IterationRecord, ...]


# -- suffix splitting --------------------------------------------------------


def split_suffix(
    full_generation: TokenStream,
    suffix: TokenStream,
    default_sp: TokenStream,
    strategy: str,
    vocab: Vocabulary,
    prompt_len: int = 0,
) -> Optional[tuple[TokenStream, TokenStream]]:
    """Cut the next suffix prompt out of an updated suffix.

    vanilla: the new prompt runs from the start of the suffix through the
    end of the first occurrence of the default prompt inside it. extended:
    the same but starting at the token midpoint of the generated portion of
    the full generation, searching at or after that midpoint. half: the
    latter half of the generated portion, whole, with an empty completion.

    Returns None when the required occurrence is absent (vanilla/extended).
    Occurrence search runs on detokenized text; the returned pieces are
    retokenized.
    """
    full_generation = tuple(full_generation)
    suffix = tuple(suffix)
    if strategy not in SPLIT_STRATEGIES:
        raise InvalidInputError(f"unknown strategy {strategy!r}")
    if suffix and full_generation[len(full_generation) - len(suffix):] != suffix:
        raise InvalidInputError("suffix must be a trailing segment of the full generation")
    sp_text = vocab.detokenize(default_sp)
    if strategy == VANILLA:
        sfx_text = vocab.detokenize(suffix)
        idx = sfx_text.find(sp_text)
        if idx < 0:
            return None
        cut = idx + len(sp_text)
        return vocab.tokenize(sfx_text[:cut]), vocab.tokenize(sfx_text[cut:])
    generated = full_generation[prompt_len:]
    mid_tok = prompt_len + len(generated) // 2
    if strategy == HALF:
        return tuple(full_generation[mid_tok:]), ()
    # extended
    full_text = vocab.detokenize(full_generation)
    mid_off = len(vocab.detokenize(full_generation[:mid_tok]))
    idx = full_text.find(sp_text, mid_off)
    if idx < 0:
        return None
    cut = idx + len(sp_text)
    return vocab.tokenize(full_text[mid_off:cut]), vocab.tokenize(full_text[cut:])


def resolve_split(
    full_generation: TokenStream,
    suffix: TokenStream,
    default_sp: TokenStream,
    strategy: str,
    vocab: Vocabulary,
    prompt_len: int = 0,
) -> Optional[tuple[TokenStream, TokenStream, str]]:
    """split_suffix plus the documented degradation: extended falls back to
    vanilla exactly when the only occurrences precede the midpoint. Returns
    (suffix_prompt', suffix_completion', strategy actually used) or None."""
    result = split_suffix(full_generation, suffix, default_sp, strategy, vocab, prompt_len)
    if result is not None:
        return result[0], result[1], strategy
    if strategy == EXTENDED:
        result = split_suffix(full_generation, suffix, default_sp, VANILLA, vocab, prompt_len)
        if result is not None:
            return result[0], result[1], VANILLA
    return None


# -- merge and fallbacks ------------------------------------------------------


def merge_prefix_into_middle(
    quadruple: GenerationQuadruple, original_prompt: TokenStream
) -> TokenStream:
    """Move the generated continuation of the prefix to the front of the middle."""
    prompt = tuple(original_prompt)
    if quadruple.prefix[: len(prompt)] != prompt:
        raise MalformedStateError("quadruple prefix does not begin with the original prompt")
    return quadruple.prefix[len(prompt):] + quadruple.middle


def middle_joins_suffix(
    trace: DecodeTrace, quadruple: GenerationQuadruple, vocab: Vocabulary
) -> bool:
    """Did the infilled middle conclude properly?

    Fails when re-concatenating the pieces disagrees with the linear output,
    or when middle generation exhausted its token budget without reaching
    EOT.
    """
    linear_text = vocab.detokenize(quadruple.linear())
    pieces_text = (
        vocab.detokenize(quadruple.prefix)
        + vocab.detokenize(quadruple.middle)
        + vocab.detokenize(quadruple.suffix())
    )
    if pieces_text != linear_text:
        return False
    for event in trace.events:
        if (
            event.kind == "stop_hit"
            and event.detail.get("reason") == STOP_BUDGET
            and event.detail.get("phase") == "middle"
        ):
            return False
    return True


def _truncate_to_last_sp(middle: TokenStream, sp: TokenStream, vocab: Vocabulary) -> TokenStream:
    """Keep the middle through the end of the last suffix-prompt occurrence."""
    sp_text = vocab.detokenize(sp)
    if not sp_text:
        return middle
    mid_text = vocab.detokenize(middle)
    idx = mid_text.rfind(sp_text)
    if idx < 0:
        return middle
    return vocab.tokenize(mid_text[: idx + len(sp_text)])


def apply_fallbacks(state: LoopState, failure: str, vocab: Vocabulary) -> LoopState:
    """Reset the loop state after a failed update; total over all failure kinds.

    no-suffix keeps the prefix continuation in the context (the merged
    middle already carries it, so the state passes through). A middle that
    failed to join is truncated to the last suffix-prompt occurrence. A
    degenerate or unsplittable left-to-right output reverts the suffix to
    the current iteration's self-infill quadruple; the suffix prompt is left
    as it was. Recording the fallback in history is the caller's job.
    """
    if failure not in FAILURE_KINDS:
        raise InvalidInputError(f"unknown failure kind {failure!r}")
    if failure == NO_SUFFIX:
        return state
    if failure == MIDDLE_JOIN:
        return replace(state, middle=_truncate_to_last_sp(state.middle, state.suffix_prompt, vocab))
    # DEGENERATE / SP_NOT_FOUND: revert to the previous self-infill quadruple
    if state.history:
        return replace(state, suffix=state.history[-1].quadruple.suffix())
    return state


# -- the loop ------------------------------------------------------------------


def run_loop(
    prompt: TokenStream,
    backend: Backend,
    cfg: LoopConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[GenerationQuadruple, LoopState]:
    """Run N cycles of self-infill + left-to-right regeneration.

    Returns the final quadruple and the loop state with per-iteration
    history. With n_iterations == 0 the final output is the plain quadruple
    parse of the single self-infill call; with N >= 1 it is
    (prompt; middle; suffix) with the last regenerated suffix carried in the
    completion slot.
    """
    if not prompt:
        raise InvalidInputError("run_loop requires a non-empty prompt")
    vocab = backend.vocab
    vocab.validate_ids(prompt)
    prompt = tuple(prompt)
    current_sp = tuple(cfg.default_suffix_prompt)
    history: list[IterationRecord] = []
    state = LoopState(
        prefix=prompt, middle=(), suffix=(), suffix_prompt=current_sp, iteration=0, history=()
    )

    if cfg.n_iterations == 0:
        si_cfg = replace(cfg.si, suffix_prompt=current_sp)
        x = (vocab.pre,) + prompt
        try:
            quad, si_trace = self_infill(x, backend, cfg.sampler, si_cfg, rng)
        except _BACKEND_ERRORS as exc:
            raise LoopAbortedError(str(exc), state=state) from exc
        merged = GenerationQuadruple(
            prefix=prompt,
            middle=merge_prefix_into_middle(quad, prompt),
            suffix_prompt=quad.suffix_prompt,
            suffix_completion=quad.suffix_completion,
        )
        record = IterationRecord(
            iteration=0,
            si_input=x,
            quadruple=merged,
            si_trace=si_trace,
            l2r_input=None,
            suffix=None,
            l2r_trace=None,
            output=quad.linear(),
            fallbacks=(),
            split=None,
        )
        state = replace(
            state, middle=merged.middle, suffix=merged.suffix(), history=(record,)
        )
        return quad, state

    x = (vocab.pre,) + prompt
    for n in range(1, cfg.n_iterations + 1):
        si_cfg = replace(cfg.si, suffix_prompt=current_sp)
        try:
            quad, si_trace = self_infill(x, backend, cfg.sampler, si_cfg, rng)
        except _BACKEND_ERRORS as exc:
            raise LoopAbortedError(str(exc), state=state) from exc
        middle = merge_prefix_into_middle(quad, prompt)
        merged = GenerationQuadruple(
            prefix=prompt,
            middle=middle,
            suffix_prompt=quad.suffix_prompt,
            suffix_completion=quad.suffix_completion,
        )
        state = replace(
            state, middle=middle, suffix=merged.suffix(), suffix_prompt=current_sp, iteration=n
        )
        fallbacks: list[dict] = []
        if vocab.suf not in si_trace.raw_tokens:
            state = apply_fallbacks(state, NO_SUFFIX, vocab)
            fallbacks.append({"failure": NO_SUFFIX})
        elif not middle_joins_suffix(si_trace, merged, vocab):
            before = len(state.middle)
            state = apply_fallbacks(state, MIDDLE_JOIN, vocab)
            fallbacks.append({"failure": MIDDLE_JOIN, "middle_tokens_before": before,
                              "middle_tokens_after": len(state.middle)})

        # boundary healing before the pieces are re-tokenized into a context
        middle_text = strip_boundary_spaces(vocab.detokenize(state.middle))
        middle_tokens = vocab.tokenize(middle_text)
        state = replace(state, middle=middle_tokens)
        l2r_x = prompt + middle_tokens
        try:
            suffix, l2r_trace = left_to_right(
                l2r_x,
                backend,
                cfg.sampler,
                cfg.si.stop,
                cfg.si.max_new_tokens,
                rng,
                carry_text=middle_text,
            )
        except _BACKEND_ERRORS as exc:
            raise LoopAbortedError(str(exc), state=state) from exc
        state = replace(state, suffix=suffix)
        record = IterationRecord(
            iteration=n,
            si_input=x,
            quadruple=merged,
            si_trace=si_trace,
            l2r_input=l2r_x,
            suffix=suffix,
            l2r_trace=l2r_trace,
            output=prompt + middle_tokens + suffix,
            fallbacks=tuple(fallbacks),
            split=None,
        )
        history.append(record)
        state = replace(state, history=tuple(history))

        if n == cfg.n_iterations:
            break

        # unpack the fresh suffix into the next cycle's suffix prompt
        suffix_text = vocab.detokenize(suffix)
        verdict = classify_degenerate(suffix_text)
        if verdict.degenerate:
            state = apply_fallbacks(state, DEGENERATE, vocab)
            fallbacks.append({"failure": DEGENERATE, "reason": verdict.reason})
        else:
            split = resolve_split(
                prompt + middle_tokens + suffix,
                suffix,
                tuple(cfg.default_suffix_prompt),
                cfg.split_strategy,
                vocab,
                prompt_len=len(prompt),
            )
            if split is None:
                state = apply_fallbacks(state, SP_NOT_FOUND, vocab)
                fallbacks.append({"failure": SP_NOT_FOUND})
            else:
                sp_tokens, _completion, used = split
                sp_text = strip_boundary_spaces(vocab.detokenize(sp_tokens))
                current_sp = vocab.tokenize(sp_text)
                record = replace(
                    record,
                    split={
                        "strategy": cfg.split_strategy,
                        "used": used,
                        "suffix_prompt": list(current_sp),
                    },
                )
        record = replace(record, fallbacks=tuple(fallbacks))
        history[-1] = record
        state = replace(state, history=tuple(history))
        x = (vocab.pre,) + prompt + (vocab.suf,) + current_sp

    final = GenerationQuadruple(
        prefix=prompt,
        middle=state.middle,
        suffix_prompt=(),
        suffix_completion=state.suffix,
    )
    return final, state
