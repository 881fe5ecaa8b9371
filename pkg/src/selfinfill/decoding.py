"""The two generation state machines.

``left_to_right`` appends sampled tokens until a stop sequence, a sentinel
draw, or the token budget ends the run. ``self_infill`` starts the same way
but may interrupt prefix generation when the model becomes uncertain (max
next-token probability below tau), pivot to generating a suffix that is
forced to begin with the configured suffix prompt, and then return to infill
the bypassed middle between the two.

Phase bookkeeping is stateless with respect to the model: the current phase
is determined by which sentinels the running sequence contains, and forced
sentinel injections move the machine along
PrefixGen -> SuffixGen -> MiddleGen -> Done.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .backends import Backend, NextTokenDistribution
from .errors import InvalidInputError, MalformedTraceError
from .sampling import SamplerConfig, max_probability, select_token
from .textops import StopMatch, StopScanner, StopSpec
from .vocab import TokenStream, Vocabulary


class DecodePhase(Enum):
    PREFIX_GEN = "prefix"
    SUFFIX_GEN = "suffix"
    MIDDLE_GEN = "middle"
    DONE = "done"


# StepRecord.phase for plain left-to-right decoding, which has no phases.
L2R_PHASE = "l2r"

# stop-hit reasons
STOP_SEQUENCE = "stop_sequence"
STOP_BUDGET = "budget"
STOP_EOT = "eot"
STOP_SENTINEL = "sentinel"


@dataclass(frozen=True)
class SelfInfillConfig:
    """Knobs of one self-infilling call.

    tau is the interruption threshold: during prefix generation, a step
    whose maximum next-token probability falls below tau forces the pivot
    to suffix generation. tau = 0 never interrupts; tau >= 1 interrupts at
    the first step unless the model is fully certain (the "immediate
    suffix" configuration).
    """

    tau: float = 0.25
    suffix_prompt: TokenStream = ()
    stop: StopSpec = StopSpec(())
    max_new_tokens: int = 512

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidInputError(f"tau must be in [0, 1], got {self.tau}")
        if self.max_new_tokens < 1:
            raise InvalidInputError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


@dataclass(frozen=True)
class StepRecord:
    """One drawn token: phase, raw max probability, forced flag, raw log-probability.

    logprob is the backend's (pre-override) log probability of the chosen
    token; None for forced tokens, which are not model choices.
    """

    phase: str
    max_probability: float
    forced: bool
    token: int
    logprob: Optional[float]


@dataclass(frozen=True)
class TraceEvent:
    kind: str  # interruption | suffix_prompt_forcing | mid_injection | stop_hit | truncation | fallback
    step: int  # index into steps at which the event fired
    detail: dict


@dataclass(frozen=True)
class DecodeTrace:
    """Auditable record of one decode call: final raw sequence, per-step records, events."""

    raw_tokens: TokenStream
    steps: tuple[StepRecord, ...]
    events: tuple[TraceEvent, ...]
    vocab: Vocabulary

    def text(self) -> str:
        return self.vocab.detokenize(self.raw_tokens)

    def mean_logprob(self) -> float:
        """Mean raw log probability over non-forced steps; 0.0 when there are none."""
        vals = [s.logprob for s in self.steps if s.logprob is not None]
        return float(sum(vals) / len(vals)) if vals else 0.0


@dataclass(frozen=True)
class GenerationQuadruple:
    """The (prefix, middle, suffix-prompt, suffix-completion) decomposition of an output."""

    prefix: TokenStream
    middle: TokenStream
    suffix_prompt: TokenStream
    suffix_completion: TokenStream

    def linear(self) -> TokenStream:
        """The linear reading order: prefix; middle; suffix prompt; suffix completion."""
        return self.prefix + self.middle + self.suffix_prompt + self.suffix_completion

    def suffix(self) -> TokenStream:
        return self.suffix_prompt + self.suffix_completion

    def texts(self, vocab: Vocabulary) -> dict[str, str]:
        return {
            "prefix": vocab.detokenize(self.prefix),
            "middle": vocab.detokenize(self.middle),
            "suffix_prompt": vocab.detokenize(self.suffix_prompt),
            "suffix_completion": vocab.detokenize(self.suffix_completion),
        }


# -- shared helpers ----------------------------------------------------------


def _covering_prefix(vocab: Vocabulary, tokens: list[int], text_cut: int) -> int:
    """Minimal number of leading tokens whose concatenated text spans text_cut chars."""
    acc = 0
    keep = 0
    for tid in tokens:
        if acc >= text_cut:
            break
        acc += len(vocab.token_text(tid))
        keep += 1
    return keep


class _StepLog:
    """Accumulates step records and events for one decode call."""

    def __init__(self, backend: Backend, cfg: SamplerConfig, rng: Optional[np.random.Generator]):
        self.backend = backend
        self.cfg = cfg
        self.rng = rng
        self.steps: list[StepRecord] = []
        self.events: list[TraceEvent] = []
        self._context_truncated = False

    def event(self, kind: str, **detail) -> None:
        self.events.append(TraceEvent(kind=kind, step=len(self.steps), detail=detail))

    def distribution(self, tokens: list[int]) -> NextTokenDistribution:
        limit = self.backend.context_limit
        ctx = tokens
        if len(tokens) > limit:
            ctx = tokens[-limit:]
            if not self._context_truncated:
                self._context_truncated = True
                self.event("truncation", scope="context", limit=limit)
        return self.backend.next_distribution(tuple(ctx))

    def draw(self, dist: NextTokenDistribution, maxp: float, phase: str, forced: Optional[int]) -> int:
        if forced is not None:
            token = forced
            logprob = None
        else:
            token = select_token(dist, self.cfg, self.rng)
            logprob = math.log(float(dist.probs[token]))
        self.steps.append(
            StepRecord(phase=phase, max_probability=maxp, forced=forced is not None, token=token, logprob=logprob)
        )
        return token


# -- left-to-right decoding --------------------------------------------------


def left_to_right(
    x: TokenStream,
    backend: Backend,
    cfg: SamplerConfig,
    stop: StopSpec,
    max_new_tokens: int,
    rng: Optional[np.random.Generator] = None,
    carry_text: str = "",
) -> tuple[TokenStream, DecodeTrace]:
    """Append sampled tokens to x until a stop fires; returns (generated, trace).

    Stop sequences are matched against the detokenized generated text, with
    carry_text (already-generated content from an earlier call, e.g. the
    middle when the looper regenerates a suffix) prepended to the scanned
    stream. The kept output is truncated at the first stop occurrence,
    retaining the minimal token prefix that covers the end of the matched
    sequence. Sampling any sentinel ends the run; the sentinel is not kept.
    """
    if not x:
        raise InvalidInputError("left_to_right requires a non-empty input sequence")
    vocab = backend.vocab
    vocab.validate_ids(x)
    log = _StepLog(backend, cfg, rng)
    tokens = list(x)
    generated: list[int] = []
    scanner = StopScanner(stop)
    pending: Optional[StopMatch] = scanner.feed(carry_text)
    spent = 0
    while True:
        if pending is not None:
            gen_cut = max(pending.end - len(carry_text), 0)
            keep = _covering_prefix(vocab, generated, gen_cut)
            removed = len(generated) - keep
            if removed:
                log.event("truncation", scope="output", removed_tokens=removed)
                del generated[keep:]
            log.event(
                "stop_hit",
                reason=STOP_SEQUENCE,
                phase=L2R_PHASE,
                sequence=pending.sequence,
                index=pending.index,
            )
            break
        if spent >= max_new_tokens:
            log.event("stop_hit", reason=STOP_BUDGET, phase=L2R_PHASE)
            break
        dist = log.distribution(tokens)
        maxp = max_probability(dist)
        token = log.draw(dist, maxp, L2R_PHASE, forced=None)
        if vocab.is_sentinel(token):
            reason = STOP_EOT if token == vocab.eot else STOP_SENTINEL
            log.event("stop_hit", reason=reason, phase=L2R_PHASE, token=token)
            break
        tokens.append(token)
        generated.append(token)
        spent += 1
        pending = scanner.feed(vocab.token_text(token))
    raw = tuple(x) + tuple(generated)
    trace = DecodeTrace(raw_tokens=raw, steps=tuple(log.steps), events=tuple(log.events), vocab=vocab)
    return tuple(generated), trace


# -- self-infilling decoding ---------------------------------------------------


def _validate_self_infill_input(x: TokenStream, sp: TokenStream, vocab: Vocabulary) -> int:
    """Check the input grammar; returns the position of <SUF> in x or -1."""
    if not x:
        raise InvalidInputError("self_infill requires a non-empty input sequence")
    vocab.validate_ids(x)
    vocab.validate_ids(sp)
    if any(vocab.is_sentinel(t) for t in sp):
        raise InvalidInputError("suffix prompt must not contain sentinel tokens")
    if x[0] != vocab.pre:
        raise InvalidInputError("input must begin with the PRE sentinel")
    if vocab.pre in x[1:]:
        raise InvalidInputError("PRE may only appear at the start of the input")
    if vocab.mid in x or vocab.eot in x:
        raise InvalidInputError("input may not already contain MID or EOT")
    suf_positions = [i for i, t in enumerate(x) if t == vocab.suf]
    if len(suf_positions) > 1:
        raise InvalidInputError("input may contain at most one SUF sentinel")
    if not suf_positions:
        return -1
    pos = suf_positions[0]
    provided = x[pos + 1 :]
    for j, tid in enumerate(provided):
        if vocab.is_sentinel(tid):
            raise InvalidInputError("input suffix region may not contain sentinels")
        if j < len(sp) and tid != sp[j]:
            raise InvalidInputError(
                "input suffix region must agree with the configured suffix prompt"
            )
    return pos


def self_infill(
    x: TokenStream,
    backend: Backend,
    cfg: SamplerConfig,
    si: SelfInfillConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[GenerationQuadruple, DecodeTrace]:
    """Run interruption-driven suffix-first decoding; returns (quadruple, trace).

    Per step: if prefix generation is uncertain (max probability < tau) the
    SUF sentinel is forced; while the generated suffix is shorter than the
    suffix prompt its next token is forced; a stop firing during suffix
    generation forces MID and switches to infilling; a stop during prefix or
    middle generation (or a naturally sampled EOT in the middle) terminates.

    Stop sequences and the token budget are checked against the current
    phase's freely generated content: the prompt, an input-provided suffix
    region, and forced suffix-prompt tokens are configuration rather than
    generation, so a stop string inside them never fires, and forcing is
    never cut short by the budget.
    """
    vocab = backend.vocab
    sp = tuple(si.suffix_prompt)
    suf_pos = _validate_self_infill_input(tuple(x), sp, vocab)
    log = _StepLog(backend, cfg, rng)
    tokens = list(x)

    if suf_pos >= 0:
        phase = DecodePhase.SUFFIX_GEN
        suffix_tokens = list(x[suf_pos + 1 :])
    else:
        phase = DecodePhase.PREFIX_GEN
        suffix_tokens = []
    prefix_gen: list[int] = []  # prefix continuation generated this call
    middle_gen: list[int] = []
    scanner: Optional[StopScanner] = StopScanner(si.stop) if phase is DecodePhase.PREFIX_GEN else None
    pending: Optional[StopMatch] = None
    spent = 0

    def enter_suffix() -> None:
        nonlocal phase, scanner, pending
        phase = DecodePhase.SUFFIX_GEN
        scanner = None
        pending = None

    def enter_middle(reason: str) -> None:
        """Force the MID sentinel and move to infilling."""
        nonlocal phase, scanner, pending, spent
        log.event("mid_injection", reason=reason)
        tokens.append(vocab.mid)
        spent += 1
        phase = DecodePhase.MIDDLE_GEN
        scanner = StopScanner(si.stop)
        pending = None

    def truncate_current(cut: int, region: list[int]) -> None:
        """Drop tokens of the current phase's free region past the covering cut."""
        keep = _covering_prefix(vocab, region, cut)
        removed = len(region) - keep
        if removed:
            log.event("truncation", scope="output", removed_tokens=removed)
            del tokens[len(tokens) - removed :]
            del region[keep:]

    while phase is not DecodePhase.DONE:
        forcing_sp = phase is DecodePhase.SUFFIX_GEN and len(suffix_tokens) < len(sp)
        if phase is DecodePhase.SUFFIX_GEN and scanner is None and not forcing_sp:
            # suffix prompt complete: stop scanning covers the completion only
            scanner = StopScanner(si.stop)

        if not forcing_sp:
            if pending is not None:
                match = pending
                pending = None
                if phase is DecodePhase.PREFIX_GEN:
                    truncate_current(match.end, prefix_gen)
                    log.event("stop_hit", reason=STOP_SEQUENCE, phase=phase.value,
                              sequence=match.sequence, index=match.index)
                    phase = DecodePhase.DONE
                elif phase is DecodePhase.SUFFIX_GEN:
                    completion = suffix_tokens[len(sp):]
                    truncate_current(match.end, completion)
                    del suffix_tokens[len(sp) + len(completion):]
                    log.event("stop_hit", reason=STOP_SEQUENCE, phase=phase.value,
                              sequence=match.sequence, index=match.index)
                    enter_middle(STOP_SEQUENCE)
                else:
                    truncate_current(match.end, middle_gen)
                    log.event("stop_hit", reason=STOP_SEQUENCE, phase=phase.value,
                              sequence=match.sequence, index=match.index)
                    phase = DecodePhase.DONE
                continue
            if spent >= si.max_new_tokens:
                log.event("stop_hit", reason=STOP_BUDGET, phase=phase.value)
                if phase is DecodePhase.SUFFIX_GEN:
                    enter_middle(STOP_BUDGET)
                    continue
                phase = DecodePhase.DONE
                continue

        dist = log.distribution(tokens)
        maxp = max_probability(dist)
        forced: Optional[int] = None
        if phase is DecodePhase.PREFIX_GEN and maxp < si.tau:
            forced = vocab.suf
            log.event("interruption", max_probability=maxp, tau=si.tau)
        elif forcing_sp:
            forced = sp[len(suffix_tokens)]
            log.event("suffix_prompt_forcing", position=len(suffix_tokens))
        token = log.draw(dist, maxp, phase.value, forced)

        if forced is not None:
            tokens.append(token)
            spent += 1
            if token == vocab.suf:
                enter_suffix()
            else:
                suffix_tokens.append(token)
            continue

        if token == vocab.eot:
            if phase is DecodePhase.MIDDLE_GEN:
                tokens.append(token)
                spent += 1
                log.event("stop_hit", reason=STOP_EOT, phase=phase.value)
                phase = DecodePhase.DONE
            elif phase is DecodePhase.PREFIX_GEN:
                log.event("stop_hit", reason=STOP_EOT, phase=phase.value)
                phase = DecodePhase.DONE
            else:
                enter_middle(STOP_EOT)
            continue
        if token == vocab.pre or (
            phase is DecodePhase.PREFIX_GEN and token == vocab.mid
        ) or (
            phase is DecodePhase.SUFFIX_GEN and token == vocab.suf
        ) or (
            phase is DecodePhase.MIDDLE_GEN and token in (vocab.suf, vocab.mid)
        ):
            # an out-of-grammar sentinel draw acts as a stop condition
            if phase is DecodePhase.SUFFIX_GEN:
                enter_middle(STOP_SENTINEL)
            else:
                log.event("stop_hit", reason=STOP_SENTINEL, phase=phase.value, token=token)
                phase = DecodePhase.DONE
            continue
        if token == vocab.suf:
            # the model pivoted to the suffix on its own; no interruption event
            tokens.append(token)
            spent += 1
            enter_suffix()
            continue
        if token == vocab.mid:
            tokens.append(token)
            spent += 1
            phase = DecodePhase.MIDDLE_GEN
            scanner = StopScanner(si.stop)
            pending = None
            continue

        tokens.append(token)
        spent += 1
        if phase is DecodePhase.PREFIX_GEN:
            prefix_gen.append(token)
        elif phase is DecodePhase.SUFFIX_GEN:
            suffix_tokens.append(token)
        else:
            middle_gen.append(token)
        assert scanner is not None
        pending = scanner.feed(vocab.token_text(token))

    trace = DecodeTrace(
        raw_tokens=tuple(tokens), steps=tuple(log.steps), events=tuple(log.events), vocab=vocab
    )
    return parse_quadruple(trace, sp), trace


# -- output parsing ------------------------------------------------------------


def parse_quadruple(trace: DecodeTrace, suffix_prompt: TokenStream) -> GenerationQuadruple:
    """Split a raw sentinel sequence into the quadruple reading order.

    The prefix is everything between PRE and SUF, the suffix between SUF and
    MID, the middle after MID up to EOT; the suffix splits into the prompt
    and its completion at the suffix prompt's length.
    """
    raw = trace.raw_tokens
    vocab = trace.vocab
    if not raw or raw[0] != vocab.pre:
        raise MalformedTraceError("raw tokens must begin with the PRE sentinel")
    if vocab.pre in raw[1:]:
        raise MalformedTraceError("PRE appears more than once")

    def at_most_one(tid: int, name: str) -> int:
        positions = [i for i, t in enumerate(raw) if t == tid]
        if len(positions) > 1:
            raise MalformedTraceError(f"{name} appears more than once")
        return positions[0] if positions else -1

    suf = at_most_one(vocab.suf, "SUF")
    mid = at_most_one(vocab.mid, "MID")
    eot = at_most_one(vocab.eot, "EOT")
    if mid >= 0 and suf < 0:
        raise MalformedTraceError("MID cannot appear without SUF")
    if mid >= 0 and mid < suf:
        raise MalformedTraceError("MID cannot precede SUF")
    if eot >= 0:
        if eot != len(raw) - 1:
            raise MalformedTraceError("EOT must be the final token")
        if mid < 0:
            raise MalformedTraceError("EOT requires a preceding MID")
    end = eot if eot >= 0 else len(raw)
    if suf < 0:
        prefix = raw[1:end]
        suffix: TokenStream = ()
        middle: TokenStream = ()
    else:
        prefix = raw[1:suf]
        if mid < 0:
            suffix = raw[suf + 1 : end]
            middle = ()
        else:
            suffix = raw[suf + 1 : mid]
            middle = raw[mid + 1 : end]
    cut = len(suffix_prompt)
    return GenerationQuadruple(
        prefix=prefix,
        middle=middle,
        suffix_prompt=suffix[:cut],
        suffix_completion=suffix[cut:],
    )
