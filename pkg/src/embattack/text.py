import re

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 '"

_DROP = re.compile(r"[^a-z0-9' ]+")
_SPACES = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase, drop everything but letters, digits, apostrophes and whitespace, collapse whitespace.

    >>> normalize_text("  What’s   the TIME? ")
    "what's the time"
    """
    text = text.lower().replace("’", "'").replace("‘", "'")
    text = _SPACES.sub(" ", text)
    return _SPACES.sub(" ", _DROP.sub("", text)).strip()


def slugify(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", normalize_text(text)).strip("-") or "empty"
