import pytest
from hypothesis import given, strategies as st

from recap.errors import InvalidTokenId
from recap.model import BOS, EOS, SEP, VOCAB_SIZE, detokenize, tokenize, tokenize_with_sep


def test_empty():
    assert tokenize("") == []
    assert detokenize([]) == ""


def test_ascii():
    assert tokenize("ab") == [97, 98]
    assert detokenize([97, 98]) == "ab"


def test_specials_stripped():
    assert detokenize([BOS, 104, 105, EOS, SEP]) == "hi"


def test_out_of_range():
    with pytest.raises(InvalidTokenId):
        detokenize([VOCAB_SIZE])


def test_sep_marker():
    assert tokenize_with_sep("A<sep>B<sep>") == [65, SEP, 66, SEP]


@given(st.text(max_size=200))
def test_round_trip(s):
    assert detokenize(tokenize(s)) == s


@given(st.binary(max_size=100))
def test_round_trip_bytes(b):
    toks = list(b)
    out = detokenize(toks)
    assert out.encode("utf-8", errors="replace") or out == ""
    # byte strings that are valid utf-8 round-trip exactly
    try:
        s = b.decode("utf-8")
    except UnicodeDecodeError:
        return
    assert tokenize(s) == toks
    assert detokenize(toks) == s
