"""Kernel dispatch: compiled extension when available, pure Python otherwise.

Set ``SELF_INFILL_PURE_PYTHON=1`` to force the pure path. Both paths are
bitwise-identical by construction; ``ACTIVE`` names the one in use.
"""

import os

from . import _pure

if os.environ.get("SELF_INFILL_PURE_PYTHON"):
    _impl = _pure
    ACTIVE = "pure"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        ACTIVE = "compiled"
    except ImportError:
        _impl = _pure
        ACTIVE = "pure"

laplace_row = _impl.laplace_row
max_prob = _impl.max_prob
greedy_pick = _impl.greedy_pick
sample_pick = _impl.sample_pick

__all__ = ["ACTIVE", "laplace_row", "max_prob", "greedy_pick", "sample_pick", "_pure"]
