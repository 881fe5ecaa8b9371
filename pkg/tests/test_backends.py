import json

import numpy as np
import pytest

from selfinfill.backends import (
    BackendDescriptor,
    NextTokenDistribution,
    TableBackend,
    build_backend,
    load_backend,
    train_ngram,
)
from selfinfill.errors import ContextOverflowError, InvalidInputError
from selfinfill.vocab import Vocabulary

from conftest import point_mass


def brute_force_conditional(corpus: str, order: int, context: str, target: str) -> float:
    """Independent oracle: count context->target continuations by sliding window."""
    window = order - 1
    num = 0
    den = 0
    for i in range(window, len(corpus)):
        if corpus[i - window : i] == context:
            den += 1
            if corpus[i] == target:
                num += 1
    return num / den


def test_distribution_validation():
    NextTokenDistribution.validated([0.5, 0.5])
    with pytest.raises(InvalidInputError):
        NextTokenDistribution.validated([0.5, 0.6])
    with pytest.raises(InvalidInputError):
        NextTokenDistribution.validated([-0.1, 1.1])
    with pytest.raises(InvalidInputError):
        NextTokenDistribution.validated([])


def test_table_point_mass_on_every_context():
    vocab = Vocabulary.char_vocab("ab")
    backend = TableBackend(vocab, default=point_mass(vocab.size, 0))
    for context in [(), (0,), (1, 0, 1)]:
        dist = backend.next_distribution(context)
        assert dist.probs[0] == 1.0
        assert dist.probs.sum() == 1.0


def test_table_lookup_order_exact_then_length_then_default():
    vocab = Vocabulary.char_vocab("ab")
    backend = TableBackend(
        vocab,
        entries={(0,): point_mass(vocab.size, 1)},
        by_length={2: point_mass(vocab.size, 0)},
        default=point_mass(vocab.size, vocab.eot),
    )
    assert backend.next_distribution((0,)).probs[1] == 1.0
    assert backend.next_distribution((1, 1)).probs[0] == 1.0
    assert backend.next_distribution((1, 1, 1)).probs[vocab.eot] == 1.0


def test_table_no_entry_raises():
    vocab = Vocabulary.char_vocab("ab")
    backend = TableBackend(vocab, entries={(0,): point_mass(vocab.size, 0)})
    with pytest.raises(InvalidInputError):
        backend.next_distribution((1,))


def test_table_rejects_wrong_row_length():
    vocab = Vocabulary.char_vocab("ab")
    with pytest.raises(InvalidInputError):
        TableBackend(vocab, default=[0.5, 0.5])


def test_ngram_bigram_ababab_derived():
    # corpus "ababab": pairs a->b three times, b->a twice; P(b|a) = 3/3
    backend = train_ngram("ababab", order=2, alpha=0.0)
    vocab = backend.vocab
    a, b = vocab.tokenize("ab")
    dist = backend.next_distribution((a,))
    assert dist.probs[b] == 1.0
    dist = backend.next_distribution((b,))
    assert dist.probs[a] == 1.0


def test_ngram_unigram_trivial_and_derived():
    backend = train_ngram("aa", order=1, alpha=0.0)
    a = backend.vocab.tokenize("a")[0]
    assert backend.next_distribution(()).probs[a] == 1.0

    backend = train_ngram("ab", order=1, alpha=0.0)
    a, b = backend.vocab.tokenize("ab")
    dist = backend.next_distribution((b,))  # unigram: context-independent
    assert dist.probs[a] == 0.5
    assert dist.probs[b] == 0.5


def test_ngram_laplace_derived():
    # corpus "abc", order 2, alpha 1, |V| = 3 chars + 4 sentinels = 7
    backend = train_ngram("abc", order=2, alpha=1.0)
    assert backend.vocab.size == 7
    a, b = backend.vocab.tokenize("ab")
    dist = backend.next_distribution((a,))
    assert dist.probs[b] == (1 + 1) / (1 + 7)


def test_ngram_alpha_zero_matches_brute_force_counts():
    rng = np.random.default_rng(3)
    for _ in range(30):
        corpus = "".join(rng.choice(list("abc"), size=int(rng.integers(20, 400))))
        order = int(rng.integers(1, 4))
        backend = train_ngram(corpus, order=order, alpha=0.0)
        vocab = backend.vocab
        window = order - 1
        # probe every context that occurs in the corpus
        contexts = {corpus[i - window : i] for i in range(window, len(corpus))}
        for context in contexts:
            dist = backend.next_distribution(vocab.tokenize(context))
            for target in "abc":
                if target not in corpus:
                    continue
                expected = brute_force_conditional(corpus, order, context, target)
                assert dist.probs[vocab.tokenize(target)[0]] == pytest.approx(expected, abs=1e-12)


def test_ngram_sentinel_mass_comes_only_from_smoothing():
    smoothed = train_ngram("abab", order=2, alpha=1.0)
    assert smoothed.next_distribution(smoothed.vocab.tokenize("a")).probs[smoothed.vocab.eot] > 0
    exact = train_ngram("abab", order=2, alpha=0.0)
    assert exact.next_distribution(exact.vocab.tokenize("a")).probs[exact.vocab.eot] == 0.0


def test_backends_are_referentially_transparent():
    backend = train_ngram("abcabcab", order=3, alpha=0.5)
    context = backend.vocab.tokenize("ca")
    first = backend.next_distribution(context)
    second = backend.next_distribution(context)
    assert first.probs.tobytes() == second.probs.tobytes()


def test_distribution_sums_to_one_for_all_backends():
    for alpha in (0.0, 0.5, 1.0):
        backend = train_ngram("abcabc", order=2, alpha=alpha)
        for ch in "abc":
            dist = backend.next_distribution(backend.vocab.tokenize(ch))
            assert abs(dist.probs.sum() - 1.0) <= 1e-9
            assert (dist.probs >= 0).all()


def test_context_overflow_and_unknown_ids():
    backend = train_ngram("ab", order=2, alpha=1.0, context_limit=4)
    with pytest.raises(ContextOverflowError):
        backend.next_distribution((0,) * 5)
    with pytest.raises(InvalidInputError):
        backend.next_distribution((99,))


def test_train_ngram_validates_inputs():
    with pytest.raises(InvalidInputError):
        train_ngram("", order=2)
    with pytest.raises(InvalidInputError):
        train_ngram("ab", order=0)


def test_descriptor_validation():
    with pytest.raises(InvalidInputError):
        BackendDescriptor(kind="magic", parameters={})
    with pytest.raises(InvalidInputError):
        BackendDescriptor(kind="ngram", parameters={"order": 0})
    with pytest.raises(InvalidInputError):
        BackendDescriptor(kind="remote", parameters={"timeout_ms": 0})


def test_build_backend_ngram_inline_corpus():
    desc = BackendDescriptor(kind="ngram", parameters={"corpus_text": "abab", "order": 2, "alpha": 0.0})
    backend = build_backend(desc)
    a, b = backend.vocab.tokenize("ab")
    assert backend.next_distribution((a,)).probs[b] == 1.0


def test_load_table_backend_from_file(tmp_path):
    vocab = Vocabulary.char_vocab("ab")
    table = {
        "kind": "table",
        "parameters": {
            "vocab": {"tokens": list(vocab.tokens), "sentinels": dict(vocab.sentinels)},
            "entries": [{"context": [0], "probs": point_mass(vocab.size, 1)}],
            "default": point_mass(vocab.size, 0),
        },
    }
    path = tmp_path / "backend.json"
    path.write_text(json.dumps(table), encoding="utf-8")
    backend = load_backend(path)
    assert backend.next_distribution((0,)).probs[1] == 1.0
    assert backend.next_distribution((1, 1)).probs[0] == 1.0


def test_concurrent_reads_are_safe():
    import concurrent.futures

    backend = train_ngram("abcabcabc", order=2, alpha=1.0)
    context = backend.vocab.tokenize("bc")
    reference = backend.next_distribution(context).probs.tobytes()

    def query(_):
        return backend.next_distribution(context).probs.tobytes()

    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(query, range(200)))
    assert all(r == reference for r in results)


def test_remote_descriptor_url_from_env(monkeypatch):
    vocab = Vocabulary.char_vocab("ab")
    monkeypatch.setenv("SELF_INFILL_BACKEND_URL", "http://127.0.0.1:7777")
    desc = BackendDescriptor(
        kind="remote",
        parameters={"vocab": {"tokens": list(vocab.tokens), "sentinels": dict(vocab.sentinels)}},
    )
    backend = build_backend(desc)
    assert backend.endpoint == "http://127.0.0.1:7777"
    monkeypatch.delenv("SELF_INFILL_BACKEND_URL")
    with pytest.raises(InvalidInputError):
        build_backend(desc)
