import pytest

from selfinfill.backends import train_ngram
from selfinfill.decoding import DecodeTrace, GenerationQuadruple, SelfInfillConfig, left_to_right
from selfinfill.errors import InvalidInputError, MalformedStateError
from selfinfill.looping import (
    DEGENERATE,
    EXTENDED,
    HALF,
    MIDDLE_JOIN,
    NO_SUFFIX,
    SP_NOT_FOUND,
    VANILLA,
    IterationRecord,
    LoopConfig,
    LoopState,
    apply_fallbacks,
    merge_prefix_into_middle,
    middle_joins_suffix,
    resolve_split,
    run_loop,
    split_suffix,
)
from selfinfill.sampling import SamplerConfig
from selfinfill.textops import StopSpec
from selfinfill.vocab import Vocabulary

from conftest import point_mass, table_backend, validate_sentinel_grammar

GREEDY = SamplerConfig(mode="greedy")


# -- merge --------------------------------------------------------------------


def quad(vocab, prefix="", middle="", sp="", sc=""):
    return GenerationQuadruple(
        prefix=vocab.tokenize(prefix),
        middle=vocab.tokenize(middle),
        suffix_prompt=vocab.tokenize(sp),
        suffix_completion=vocab.tokenize(sc),
    )


def test_merge_moves_continuation(abr_vocab):
    q = quad(abr_vocab, prefix="bar", middle="a")
    merged = merge_prefix_into_middle(q, abr_vocab.tokenize("b"))
    assert abr_vocab.detokenize(merged) == "ara"


def test_merge_empty_continuation(abr_vocab):
    q = quad(abr_vocab, prefix="b", middle="aa")
    assert merge_prefix_into_middle(q, abr_vocab.tokenize("b")) == abr_vocab.tokenize("aa")


def test_merge_empty_middle(abr_vocab):
    q = quad(abr_vocab, prefix="ba", middle="")
    assert merge_prefix_into_middle(q, abr_vocab.tokenize("b")) == abr_vocab.tokenize("a")


def test_merge_rejects_foreign_prefix(abr_vocab):
    q = quad(abr_vocab, prefix="aa")
    with pytest.raises(MalformedStateError):
        merge_prefix_into_middle(q, abr_vocab.tokenize("b"))


# -- splitting ----------------------------------------------------------------


@pytest.fixture
def code_vocab():
    return Vocabulary.char_vocab("xur=1\n retnobad")


def test_vanilla_split_derived(code_vocab):
    suffix = code_vocab.tokenize("x = 1\nreturn x\n")
    full = code_vocab.tokenize("db") + suffix
    result = split_suffix(full, suffix, code_vocab.tokenize("return"), VANILLA, code_vocab)
    assert result is not None
    sp, sc = result
    assert code_vocab.detokenize(sp) == "x = 1\nreturn"
    assert code_vocab.detokenize(sc) == " x\n"


def test_vanilla_split_not_found(code_vocab):
    suffix = code_vocab.tokenize("x = 1\n")
    assert split_suffix(suffix, suffix, code_vocab.tokenize("return"), VANILLA, code_vocab) is None


def test_half_split_trivial(code_vocab):
    generated = code_vocab.tokenize("abxdabxdab")  # 10 generated tokens
    prompt = code_vocab.tokenize("no")
    full = prompt + generated
    sp, sc = split_suffix(full, generated[-3:], (), HALF, code_vocab, prompt_len=len(prompt))
    assert sp == generated[5:]
    assert sc == ()


def test_extended_split_at_or_after_midpoint(code_vocab):
    # generated portion "ret..ret": first occurrence at/after the midpoint is the second "ret"
    prompt = code_vocab.tokenize("n")
    generated = code_vocab.tokenize("retabxretdu")
    full = prompt + generated
    suffix = generated[-4:]
    result = split_suffix(full, suffix, code_vocab.tokenize("ret"), EXTENDED, code_vocab,
                          prompt_len=len(prompt))
    assert result is not None
    sp, sc = result
    # midpoint of 11 generated tokens is index 5 -> text offset of token 6 of full
    assert code_vocab.detokenize(sp) == "xret"
    assert code_vocab.detokenize(sc) == "du"


def test_extended_split_occurrence_before_midpoint_signals_not_found(code_vocab):
    prompt = code_vocab.tokenize("n")
    generated = code_vocab.tokenize("retabdabdab")
    full = prompt + generated
    suffix = generated[-4:]
    assert split_suffix(full, suffix, code_vocab.tokenize("ret"), EXTENDED, code_vocab,
                        prompt_len=len(prompt)) is None


def test_resolve_split_extended_falls_back_to_vanilla(code_vocab):
    prompt = code_vocab.tokenize("n")
    # "ret" only inside the suffix, before the generation midpoint
    generated = code_vocab.tokenize("retabdabdab")
    full = prompt + generated
    suffix = generated  # the whole generated portion is the suffix
    result = resolve_split(full, suffix, code_vocab.tokenize("ret"), EXTENDED, code_vocab,
                           prompt_len=len(prompt))
    assert result is not None
    sp, sc, used = result
    assert used == VANILLA
    assert code_vocab.detokenize(sp) == "ret"
    assert code_vocab.detokenize(sc) == "abdabdab"


def test_resolve_split_none_when_absent_everywhere(code_vocab):
    prompt = code_vocab.tokenize("n")
    generated = code_vocab.tokenize("abdabdab")
    full = prompt + generated
    assert resolve_split(full, generated, code_vocab.tokenize("ret"), EXTENDED, code_vocab,
                         prompt_len=len(prompt)) is None


def test_split_soundness_reconcatenates(code_vocab):
    prompt = code_vocab.tokenize("no")
    generated = code_vocab.tokenize("x=1\nreturn x\nreturn u\n")
    full = prompt + generated
    suffix = code_vocab.tokenize("return x\nreturn u\n")
    for strategy in (VANILLA, EXTENDED, HALF):
        result = split_suffix(full, suffix, code_vocab.tokenize("return"), strategy, code_vocab,
                              prompt_len=len(prompt))
        if result is None:
            continue
        sp, sc = result
        joined = code_vocab.detokenize(sp) + code_vocab.detokenize(sc)
        if strategy == VANILLA:
            assert joined == code_vocab.detokenize(suffix)
        else:
            generated_tokens = full[len(prompt):]
            midpoint = len(generated_tokens) // 2
            source = code_vocab.detokenize(full[len(prompt) + midpoint:])
            assert joined == source


def test_split_requires_trailing_suffix(code_vocab):
    full = code_vocab.tokenize("abdab")
    with pytest.raises(InvalidInputError):
        split_suffix(full, code_vocab.tokenize("xx"), (), HALF, code_vocab)


# -- fallbacks ----------------------------------------------------------------


def make_state(vocab, middle="", suffix="", sp="", history=()):
    return LoopState(
        prefix=vocab.tokenize("b"),
        middle=vocab.tokenize(middle),
        suffix=vocab.tokenize(suffix),
        suffix_prompt=vocab.tokenize(sp),
        iteration=1,
        history=history,
    )


def test_fallback_no_suffix_keeps_state(abr_vocab):
    state = make_state(abr_vocab, middle="ab")
    assert apply_fallbacks(state, NO_SUFFIX, abr_vocab) == state


def test_fallback_middle_join_truncates_to_last_sp(abr_vocab):
    # sp occurrences at positions 3 and 8: keep through the end of the last one
    state = make_state(abr_vocab, middle="abaraabarba", sp="r")
    fixed = apply_fallbacks(state, MIDDLE_JOIN, abr_vocab)
    assert abr_vocab.detokenize(fixed.middle) == "abaraabar"


def test_fallback_middle_join_no_occurrence_keeps_middle(abr_vocab):
    state = make_state(abr_vocab, middle="abab", sp="r")
    assert apply_fallbacks(state, MIDDLE_JOIN, abr_vocab).middle == state.middle


def test_fallback_revert_restores_si_suffix(abr_vocab):
    si_quad = quad(abr_vocab, prefix="b", middle="a", sp="r", sc="ab")
    record = IterationRecord(
        iteration=1,
        si_input=(abr_vocab.pre,),
        quadruple=si_quad,
        si_trace=DecodeTrace((abr_vocab.pre,), (), (), abr_vocab),
        l2r_input=None,
        suffix=None,
        l2r_trace=None,
        output=(),
        fallbacks=(),
        split=None,
    )
    state = make_state(abr_vocab, suffix="bbbb", sp="r", history=(record,))
    for failure in (DEGENERATE, SP_NOT_FOUND):
        reverted = apply_fallbacks(state, failure, abr_vocab)
        assert reverted.suffix == si_quad.suffix()
        assert reverted.suffix_prompt == state.suffix_prompt


def test_fallback_unknown_kind(abr_vocab):
    with pytest.raises(InvalidInputError):
        apply_fallbacks(make_state(abr_vocab), "mystery", abr_vocab)


def test_middle_joins_suffix_budget_means_failure(abr_vocab):
    from selfinfill.decoding import TraceEvent

    q = quad(abr_vocab, prefix="b", middle="a", sp="r")
    good = DecodeTrace((abr_vocab.pre,), (), (), abr_vocab)
    assert middle_joins_suffix(good, q, abr_vocab)
    bad = DecodeTrace(
        (abr_vocab.pre,),
        (),
        (TraceEvent("stop_hit", 0, {"reason": "budget", "phase": "middle"}),),
        abr_vocab,
    )
    assert not middle_joins_suffix(bad, q, abr_vocab)


# -- run_loop ------------------------------------------------------------------


def loop_cfg(vocab, sp_text="r", n=2, tau=0.6, max_new=6, stop=(), strategy=EXTENDED):
    return LoopConfig(
        n_iterations=n,
        split_strategy=strategy,
        default_suffix_prompt=vocab.tokenize(sp_text),
        si=SelfInfillConfig(tau=tau, stop=StopSpec(tuple(stop)), max_new_tokens=max_new),
        sampler=GREEDY,
    )


@pytest.fixture
def alternation_backend():
    # bigram on "rararara": after r comes a (max prob 0.5), after a comes r (4/9)
    return train_ngram("rararara", order=2, alpha=1.0)


def test_loop_n0_single_self_infill(alternation_backend):
    vocab = alternation_backend.vocab
    final, state = run_loop(vocab.tokenize("r"), alternation_backend,
                            loop_cfg(vocab, n=0))
    assert len(state.history) == 1
    assert state.history[0].l2r_trace is None
    assert state.history[0].iteration == 0
    # interruption at step 1, forced suffix prompt, alternation until budget
    assert vocab.detokenize(final.suffix_prompt) == "r"
    assert final.linear() == state.history[0].output


def test_loop_n1_and_n2_bookkeeping(alternation_backend):
    vocab = alternation_backend.vocab
    prompt = vocab.tokenize("r")
    r = prompt[0]
    for n in (1, 2, 3):
        final, state = run_loop(prompt, alternation_backend, loop_cfg(vocab, n=n))
        assert len(state.history) == n
        assert all(rec.l2r_trace is not None for rec in state.history)
        assert state.prefix == prompt
        # first iteration starts plain, later ones carry [PRE; prompt; SUF; sp]
        assert state.history[0].si_input == (vocab.pre,) + prompt
        for rec in state.history[1:]:
            prev = state.history[rec.iteration - 2]
            assert prev.split is not None
            carried = tuple(prev.split["suffix_prompt"])
            assert rec.si_input == (vocab.pre,) + prompt + (vocab.suf,) + carried
        for rec in state.history:
            validate_sentinel_grammar(rec.si_trace.raw_tokens, vocab)


def test_loop_deterministic_alternation_values(alternation_backend):
    # hand-traced: si yields suffix "rarar" under a budget of 6, the
    # left-to-right pass regenerates "ararar", and iteration 2 repeats it
    vocab = alternation_backend.vocab
    prompt = vocab.tokenize("r")
    final, state = run_loop(prompt, alternation_backend, loop_cfg(vocab, n=2))
    first = state.history[0]
    assert vocab.detokenize(first.quadruple.suffix()) == "rarar"
    assert vocab.detokenize(first.suffix) == "ararar"
    assert vocab.detokenize(first.output) == "rararar"
    second = state.history[1]
    assert vocab.detokenize(second.output) == "rararar"  # unchanged by the second cycle
    assert vocab.detokenize(final.linear()) == "rararar"
    assert final.prefix == prompt


def test_loop_tau_zero_no_suffix_equals_plain_l2r(abr_vocab):
    # tau = 0 never interrupts; the no-suffix fallback hands the continuation
    # to the left-to-right pass, whose carry makes the stop re-fire at once
    a = abr_vocab.tokenize("a")[0]
    row = [0.0] * abr_vocab.size
    row[a], row[abr_vocab.eot] = 0.9, 0.1
    backend = table_backend(abr_vocab, default=row)
    prompt = abr_vocab.tokenize("b")
    cfg = loop_cfg(abr_vocab, n=1, tau=0.0, stop=("aaa",), max_new=10)
    final, state = run_loop(prompt, backend, cfg)
    plain, _ = left_to_right(prompt, backend, GREEDY, StopSpec(("aaa",)), 10)
    assert final.linear() == prompt + plain
    assert abr_vocab.detokenize(final.linear()) == "baaa"
    assert state.history[0].fallbacks[0]["failure"] == NO_SUFFIX
    assert state.history[0].suffix == ()


def test_loop_sp_not_found_reverts(abr_vocab):
    # the backend never emits the default suffix prompt "r": splitting fails
    # and the next cycle reuses the previous suffix prompt verbatim
    a, b = abr_vocab.tokenize("ab")
    row = [0.0] * abr_vocab.size
    row[a], row[b] = 0.5, 0.5
    backend = table_backend(abr_vocab, default=row)
    prompt = abr_vocab.tokenize("b")
    final, state = run_loop(prompt, backend, loop_cfg(abr_vocab, n=2, tau=0.6, max_new=4))
    assert any(f["failure"] == SP_NOT_FOUND for f in state.history[0].fallbacks)
    sp = abr_vocab.tokenize("r")
    assert state.history[1].si_input == (abr_vocab.pre,) + prompt + (abr_vocab.suf,) + sp
    validate_sentinel_grammar(state.history[1].si_trace.raw_tokens, abr_vocab)


def test_loop_degenerate_l2r_reverts():
    vocab = Vocabulary.char_vocab("bra")
    b, r, a = vocab.tokenize("bra")
    backend = table_backend(
        vocab,
        by_length={
            2: point_mass(vocab.size, vocab.suf),  # natural pivot right away
            4: point_mass(vocab.size, vocab.eot),  # suffix ends after the forced prompt
            5: point_mass(vocab.size, a),          # middle content
            6: point_mass(vocab.size, vocab.eot),  # middle joins
        },
        default=point_mass(vocab.size, vocab.suf),  # any l2r draw stops at once
    )
    cfg = loop_cfg(vocab, n=2, tau=0.0, max_new=8)
    final, state = run_loop(vocab.tokenize("b"), backend, cfg)
    # l2r yields an empty suffix, classified degenerate -> revert
    assert state.history[0].suffix == ()
    assert any(f["failure"] == DEGENERATE for f in state.history[0].fallbacks)
    assert state.history[1].si_input == (vocab.pre, b, vocab.suf, r)
    assert vocab.detokenize(final.linear()) == "ba"


def test_loop_strips_boundary_spaces():
    vocab = Vocabulary.char_vocab("bra ")
    b, r, a, space = vocab.tokenize("bra ")
    backend = table_backend(
        vocab,
        by_length={
            2: point_mass(vocab.size, vocab.suf),
            4: point_mass(vocab.size, vocab.eot),
            5: point_mass(vocab.size, a),
            6: point_mass(vocab.size, space),
            7: point_mass(vocab.size, space),
            8: point_mass(vocab.size, vocab.eot),
        },
        default=point_mass(vocab.size, vocab.suf),
    )
    cfg = loop_cfg(vocab, n=1, tau=0.0, max_new=10)
    final, state = run_loop(vocab.tokenize("b"), backend, cfg)
    # middle came out as "a  " and is right-stripped before re-tokenization
    assert vocab.detokenize(state.middle) == "a"
    assert state.history[0].l2r_input == vocab.tokenize("ba")


def test_loop_config_validation(abr_vocab):
    with pytest.raises(InvalidInputError):
        LoopConfig(n_iterations=-1)
    with pytest.raises(InvalidInputError):
        LoopConfig(split_strategy="diagonal")


def test_loop_requires_nonempty_prompt(abr_vocab):
    backend = table_backend(abr_vocab, default=point_mass(abr_vocab.size, 0))
    with pytest.raises(InvalidInputError):
        run_loop((), backend, loop_cfg(abr_vocab))


def test_backend_failure_aborts_loop_with_partial_history(alternation_backend):
    from selfinfill.errors import BackendUnavailableError, LoopAbortedError

    vocab = alternation_backend.vocab

    class FlakyBackend:
        """Delegates to the n-gram model but dies after a set number of calls."""

        def __init__(self, inner, budget):
            self.vocab = inner.vocab
            self.context_limit = inner.context_limit
            self._inner = inner
            self._budget = budget

        def next_distribution(self, context):
            if self._budget <= 0:
                raise BackendUnavailableError("simulated outage")
            self._budget -= 1
            return self._inner.next_distribution(context)

    # enough calls for iteration 1 (about 13 queries) but not for iteration 2
    flaky = FlakyBackend(alternation_backend, budget=16)
    with pytest.raises(LoopAbortedError) as excinfo:
        run_loop(vocab.tokenize("r"), flaky, loop_cfg(vocab, n=3))
    state = excinfo.value.state
    assert state is not None
    assert len(state.history) == 1  # the first cycle completed before the outage
    assert state.history[0].l2r_trace is not None


def test_backend_errors_propagate_from_left_to_right(abr_vocab):
    from selfinfill.backends import TableBackend

    backend = TableBackend(abr_vocab, entries={})  # no entry for any context
    with pytest.raises(InvalidInputError):
        left_to_right(abr_vocab.tokenize("a"), backend, GREEDY, StopSpec(()), 4)


def test_input_suffix_longer_than_prompt_is_accepted(abr_vocab):
    # the input may extend past the configured suffix prompt; no forcing happens
    a, r = abr_vocab.tokenize("a")[0], abr_vocab.tokenize("r")[0]
    backend = table_backend(abr_vocab, default=point_mass(abr_vocab.size, abr_vocab.eot))
    from selfinfill.decoding import self_infill

    x = (abr_vocab.pre, a, abr_vocab.suf, r, a, a)
    quad, trace = self_infill(
        x, backend, GREEDY,
        SelfInfillConfig(tau=0.0, suffix_prompt=(r,), stop=StopSpec(()), max_new_tokens=4),
    )
    assert not any(e.kind == "suffix_prompt_forcing" for e in trace.events)
    assert quad.suffix_prompt == (r,)
    assert quad.suffix_completion[:2] == (a, a)
