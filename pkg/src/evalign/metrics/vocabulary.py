"""Object vocabulary with synonym resolution and caption object extraction."""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from evalign.errors import VocabularyError

_TOKEN_SPLIT = re.compile(r"[^a-z]+")


def _default_data(name: str) -> str:
    return resources.files("evalign.data").joinpath(name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class ObjectVocabulary:
    """Canonical object labels plus a surface-form -> canonical map.

    Surface forms are lowercase, space-joined token phrases; multiword
    phrases are allowed and matched longest-first.
    """

    canonical: frozenset[str]
    surface_to_canonical: Mapping[str, str]
    singular_exceptions: frozenset[str]
    max_phrase_len: int

    def canonicalize(self, label: str) -> str:
        key = " ".join(t for t in _TOKEN_SPLIT.split(label.lower()) if t)
        canon = self.surface_to_canonical.get(key)
        if canon is None:
            raise VocabularyError(f"unknown object category: {label!r}")
        return canon


def singularize(token: str, exceptions: frozenset[str] = frozenset()) -> str:
    """Rule-based plural stripping (s/es/ies) with an exception list."""
    if token in exceptions:
        return token
    if token.endswith("ies") and len(token) > 4:
        return token[:-3] + "y"
    if token.endswith(("ches", "shes", "sses", "xes", "zes")):
        return token[:-2]
    if token.endswith("ses") and len(token) > 4:
        return token[:-2]
    if token.endswith(("ss", "us", "is")):
        return token
    if token.endswith("s") and len(token) > 2:
        return token[:-1]
    return token


def build_vocabulary(
    entries: Iterable[tuple[str, list[str]]],
    singular_exceptions: Iterable[str] = (),
) -> ObjectVocabulary:
    surface: dict[str, str] = {}
    canonical: set[str] = set()
    for label, synonyms in entries:
        canonical.add(label)
        for form in [label, *synonyms]:
            form = form.strip().lower()
            if not form:
                continue
            claimed = surface.get(form)
            if claimed is not None and claimed != label:
                raise VocabularyError(
                    f"surface form {form!r} claimed by both {claimed!r} and {label!r}"
                )
            surface[form] = label
    if not canonical:
        raise VocabularyError("vocabulary is empty")
    max_len = max(len(form.split()) for form in surface)
    return ObjectVocabulary(
        canonical=frozenset(canonical),
        surface_to_canonical=surface,
        singular_exceptions=frozenset(singular_exceptions),
        max_phrase_len=max_len,
    )


def load_vocabulary(
    path: str | Path | None = None,
    exceptions_path: str | Path | None = None,
) -> ObjectVocabulary:
    """Load a synonym table: one canonical label per line, tab-separated synonyms.

    Falls back to the bundled 80-class default when no path is given.
    """
    if path is None:
        text = _default_data("object_synonyms.txt")
    else:
        text = Path(path).read_text(encoding="utf-8")
    if exceptions_path is None:
        exc_text = _default_data("singular_exceptions.txt")
    else:
        exc_text = Path(exceptions_path).read_text(encoding="utf-8")

    entries = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split("\t") if f.strip()]
        entries.append((fields[0], fields[1:]))
    exceptions = [
        ln.strip() for ln in exc_text.splitlines() if ln.strip() and not ln.startswith("#")
    ]
    return build_vocabulary(entries, exceptions)


def extract_objects(caption: str, vocab: ObjectVocabulary) -> set[str]:
    """Canonical object labels mentioned in a caption.

    Lowercases, splits on non-letters, singularizes each token, then scans
    left to right matching the longest known surface phrase at each position.
    """
    tokens = [
        singularize(t, vocab.singular_exceptions)
        for t in _TOKEN_SPLIT.split(caption.lower())
        if t
    ]
    found: set[str] = set()
    i = 0
    while i < len(tokens):
        for n in range(min(vocab.max_phrase_len, len(tokens) - i), 0, -1):
            phrase = " ".join(tokens[i : i + n])
            canon = vocab.surface_to_canonical.get(phrase)
            if canon is not None:
                found.add(canon)
                i += n
                break
        else:
            i += 1
    return found
