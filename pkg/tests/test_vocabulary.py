import pytest

from evalign.errors import VocabularyError
from evalign.metrics.vocabulary import (
    build_vocabulary,
    extract_objects,
    load_vocabulary,
    singularize,
)


@pytest.fixture(scope="module")
def default_vocab():
    return load_vocabulary()


def small_vocab():
    return build_vocabulary(
        [("dog", []), ("cat", []), ("couch", ["sofa"])],
        singular_exceptions=(),
    )


def test_extracts_canonical_objects():
    vocab = small_vocab()
    assert extract_objects("A dog and a cat sit on the couch", vocab) == {"dog", "cat", "couch"}


def test_synonym_and_singularization():
    vocab = small_vocab()
    assert extract_objects("two sofas", vocab) == {"couch"}


def test_empty_caption():
    assert extract_objects("", small_vocab()) == set()


def test_multiword_longest_first(default_vocab):
    found = extract_objects("a hot dog next to a dog", default_vocab)
    assert found == {"hot dog", "dog"}
    # "hot dog" must not also fire the bare "dog" label
    assert extract_objects("a hot dog", default_vocab) == {"hot dog"}


def test_default_vocab_shape(default_vocab):
    assert len(default_vocab.canonical) == 80
    # canonical labels map to themselves
    for label in default_vocab.canonical:
        assert default_vocab.surface_to_canonical[label] == label


@pytest.mark.parametrize(
    "token,expected",
    [
        ("dogs", "dog"),
        ("berries", "berry"),
        ("buses", "bus"),
        ("couches", "couch"),
        ("boxes", "box"),
        ("glasses", "glass"),
        ("bus", "bus"),
        ("tennis", "tennis"),
        ("skis", "skis"),
        ("ties", "tie"),
        ("grass", "grass"),
    ],
)
def test_singularize_rules(token, expected):
    assert singularize(token) == expected


def test_singular_exceptions(default_vocab):
    exc = default_vocab.singular_exceptions
    assert singularize("sports", exc) == "sports"
    assert singularize("scissors", exc) == "scissors"


def test_plural_multiword_forms(default_vocab):
    assert extract_objects("three wine glasses on the table", default_vocab) == {
        "wine glass",
        "dining table",
    }
    assert extract_objects("two sports balls and some skis", default_vocab) == {
        "sports ball",
        "skis",
    }


def test_canonicalize_unknown_label(default_vocab):
    with pytest.raises(VocabularyError):
        default_vocab.canonicalize("spaceship")


def test_conflicting_surface_form_rejected():
    with pytest.raises(VocabularyError):
        build_vocabulary([("dog", ["pup"]), ("cat", ["pup"])])
