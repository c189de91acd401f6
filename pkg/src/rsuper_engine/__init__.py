"""Report-supervision constraint engine for 3D tumor segmentation maps."""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from rsuper_engine.lexicon import Lexicon

__version__ = "0.1.0"

_lexicon: Lexicon | None = None


def get_lexicon() -> Lexicon:
    """Return the shared bundled Lexicon (lazy-initialized, read-only after load)."""
    global _lexicon  # noqa: PLW0603
    if _lexicon is None:
        from rsuper_engine.lexicon import load_lexicon

        _lexicon = load_lexicon()
    return _lexicon
