"""Self-infilling decoding: suffix-first generation with interruption and looping.

The package decomposes into backends (token -> next-token distribution),
sampling (greedy / temperature / nucleus with counter-based streams), the two
decoding state machines, the looping mechanism, text machinery (stop
scanning, suffix prompts), an evaluation kit, and a CLI.
"""

from .backends import (
    BackendDescriptor,
    NextTokenDistribution,
    NgramBackend,
    RemoteBackend,
    TableBackend,
    build_backend,
    load_backend,
    remote_query,
    train_ngram,
)
from .errors import (
    BackendUnavailableError,
    ContextOverflowError,
    ExtractionError,
    InvalidInputError,
    LoopAbortedError,
    MalformedStateError,
    MalformedTraceError,
    ProtocolViolationError,
    SelfInfillError,
)
from .decoding import (
    DecodePhase,
    DecodeTrace,
    GenerationQuadruple,
    SelfInfillConfig,
    left_to_right,
    parse_quadruple,
    self_infill,
)
from .evalkit import (
    LoopChange,
    SampleOutcome,
    categorize_loop_change,
    classify_degenerate,
    pass_at_k,
    rank_by_mean_logprob,
)
from .looping import (
    LoopConfig,
    LoopState,
    apply_fallbacks,
    merge_prefix_into_middle,
    run_loop,
    split_suffix,
)
from .sampling import SamplerConfig, apply_force, max_probability, rng_stream, select_token
from .textops import (
    StopSpec,
    SuffixPromptRule,
    build_suffix_prompt,
    scan_stop,
    stop_preset,
    strip_boundary_spaces,
)
from .vocab import TokenStream, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "BackendDescriptor",
    "BackendUnavailableError",
    "ContextOverflowError",
    "ExtractionError",
    "InvalidInputError",
    "LoopAbortedError",
    "MalformedStateError",
    "MalformedTraceError",
    "ProtocolViolationError",
    "SelfInfillError",
    "DecodePhase",
    "DecodeTrace",
    "GenerationQuadruple",
    "LoopChange",
    "LoopConfig",
    "LoopState",
    "NextTokenDistribution",
    "NgramBackend",
    "RemoteBackend",
    "SampleOutcome",
    "SamplerConfig",
    "SelfInfillConfig",
    "StopSpec",
    "SuffixPromptRule",
    "TableBackend",
    "TokenStream",
    "Vocabulary",
    "apply_fallbacks",
    "apply_force",
    "build_backend",
    "build_suffix_prompt",
    "categorize_loop_change",
    "classify_degenerate",
    "left_to_right",
    "load_backend",
    "max_probability",
    "merge_prefix_into_middle",
    "parse_quadruple",
    "pass_at_k",
    "rank_by_mean_logprob",
    "remote_query",
    "rng_stream",
    "run_loop",
    "scan_stop",
    "select_token",
    "self_infill",
    "split_suffix",
    "stop_preset",
    "strip_boundary_spaces",
    "train_ngram",
]
