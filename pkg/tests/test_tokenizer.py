import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nutriseg.tokenizer import Tokenizer, VocabularyError, build_base_vocab, task_token_surfaces

from conftest import WORDS


def test_task_token_count_for_twenty_indices():
    # 5 dish-level + 5 fields × 20 ingredient indices + 20 segmentation indices
    assert len(task_token_surfaces(20)) == 5 + 5 * 20 + 20 == 125
    tok = Tokenizer(["a"], max_indices=20)
    assert tok.n_task_tokens == 125
    assert tok.vocab_size == 2 + 256 + 1 + 125


def test_task_token_is_atomic(tokenizer):
    ids = tokenizer.encode("<total_cal>")
    assert len(ids) == 1 and tokenizer.is_task_id(ids[0])
    assert tokenizer.task_token(ids[0]).surface == "<total_cal>"


def test_index_beyond_capacity_is_rejected(tokenizer):
    with pytest.raises(VocabularyError):
        tokenizer.encode("<seg_21>")


def test_collision_with_reserved_surface():
    with pytest.raises(VocabularyError):
        Tokenizer(["<seg_1>"])
    with pytest.raises(VocabularyError):
        Tokenizer(["a", "a"])


answer_text = st.lists(
    st.one_of(
        st.sampled_from(["<total_cal>", "<seg_1>", "<mass_3>", "<pro_20>", " fish", " is", ".", "\n", "<stop>"]),
        st.text(min_size=1, max_size=6),
    ),
    max_size=12,
).map("".join)


TOK = Tokenizer(build_base_vocab([WORDS]))


@settings(max_examples=200, deadline=None)
@given(answer_text)
def test_encode_decode_identity(text):
    assert TOK.decode(TOK.encode(text)) == text


def test_base_vocab_excludes_task_tokens():
    vocab = build_base_vocab(["The fish is masked as <seg_1>."])
    assert not any(p.startswith("<") and p.endswith(">") for p in vocab)
    assert " fish" in vocab


def test_json_round_trip(tokenizer):
    back = Tokenizer.from_json(tokenizer.to_json())
    assert back.id_to_piece == tokenizer.id_to_piece
    assert back.encode(WORDS) == tokenizer.encode(WORDS)
