"""Vocabulary with FIM sentinel roles and a character-level tokenizer.

Token ids are dense indices into an ordered list of token texts. Four of the
ids are reserved for the sentinel roles PRE, SUF, MID and EOT that delimit
the prefix / suffix / middle sections of a raw decode sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import InvalidInputError

# A token stream is an immutable sequence of token ids bound to a Vocabulary.
TokenStream = tuple[int, ...]

PRE = "PRE"
SUF = "SUF"
MID = "MID"
EOT = "EOT"
SENTINEL_ROLES = (PRE, SUF, MID, EOT)

_DEFAULT_SENTINEL_TEXT = {PRE: "<PRE>", SUF: "<SUF>", MID: "<MID>", EOT: "<EOT>"}


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Ordered token texts plus the sentinel role -> id mapping.

    Invariants (checked on construction): ids are dense in [0, size), the
    four sentinel ids are pairwise distinct and in range.
    """

    tokens: tuple[str, ...]
    sentinels: Mapping[str, int]
    _char_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if set(self.sentinels) != set(SENTINEL_ROLES):
            raise InvalidInputError(
                f"sentinels must map exactly the roles {SENTINEL_ROLES}, got {sorted(self.sentinels)}"
            )
        ids = [self.sentinels[r] for r in SENTINEL_ROLES]
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"sentinel ids must be pairwise distinct, got {ids}")
        for role, tid in self.sentinels.items():
            if not 0 <= tid < len(self.tokens):
                raise InvalidInputError(f"sentinel {role} id {tid} out of range [0, {len(self.tokens)})")
        sentinel_ids = set(ids)
        # Single-character non-sentinel tokens back the char-level tokenizer.
        # First occurrence wins so ids stay deterministic.
        char_map: dict[str, int] = {}
        for tid, text in enumerate(self.tokens):
            if tid not in sentinel_ids and len(text) == 1 and text not in char_map:
                char_map[text] = tid
        object.__setattr__(self, "_char_to_id", char_map)

    # -- construction -----------------------------------------------------

    @classmethod
    def char_vocab(cls, chars: Iterable[str]) -> "Vocabulary":
        """Build a character-level vocabulary: sorted unique chars, then sentinels."""
        uniq = sorted(set(chars))
        for ch in uniq:
            if len(ch) != 1:
                raise InvalidInputError(f"char_vocab expects single characters, got {ch!r}")
        tokens = tuple(uniq) + tuple(_DEFAULT_SENTINEL_TEXT[r] for r in SENTINEL_ROLES)
        sentinels = {r: len(uniq) + i for i, r in enumerate(SENTINEL_ROLES)}
        return cls(tokens=tokens, sentinels=sentinels)

    # -- basic queries ----------------------------------------------------

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pre(self) -> int:
        return self.sentinels[PRE]

    @property
    def suf(self) -> int:
        return self.sentinels[SUF]

    @property
    def mid(self) -> int:
        return self.sentinels[MID]

    @property
    def eot(self) -> int:
        return self.sentinels[EOT]

    @property
    def sentinel_ids(self) -> frozenset[int]:
        return frozenset(self.sentinels.values())

    def is_sentinel(self, token_id: int) -> bool:
        return token_id in self.sentinel_ids

    def token_text(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise InvalidInputError(f"token id {token_id} out of range [0, {len(self.tokens)})")
        return self.tokens[token_id]

    def validate_ids(self, stream: Sequence[int]) -> None:
        for tid in stream:
            if not 0 <= tid < len(self.tokens):
                raise InvalidInputError(f"token id {tid} out of range [0, {len(self.tokens)})")

    # -- text <-> tokens --------------------------------------------------

    def tokenize(self, text: str) -> TokenStream:
        """Character-level tokenization; every character must be a known token."""
        out = []
        for ch in text:
            tid = self._char_to_id.get(ch)
            if tid is None:
                raise InvalidInputError(f"character {ch!r} is not in the vocabulary")
            out.append(tid)
        return tuple(out)

    def detokenize(self, stream: Sequence[int], skip_sentinels: bool = False) -> str:
        self.validate_ids(stream)
        if skip_sentinels:
            return "".join(self.tokens[t] for t in stream if t not in self.sentinel_ids)
        return "".join(self.tokens[t] for t in stream)
