import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memvqa import autograd as ag
from memvqa.autograd import Tensor
from memvqa.encoders import (
    FeatureGrid, LstmCellParams, MalformedHeaderError, NonFiniteFeaturesError,
    QuestionEncoderParams, TruncatedPayloadError, Vocabulary, embed_tokens, encode_question,
    load_feature_grid, lstm_step, save_feature_grid, tokenize,
)
from memvqa.model import ModelDims

import oracles


def cell(rng, n_in, hidden, scale=0.5):
    return (scale * rng.standard_normal((4 * hidden, n_in)),
            scale * rng.standard_normal((4 * hidden, hidden)),
            scale * rng.standard_normal(4 * hidden))


def as_cell(raw):
    return LstmCellParams(*(Tensor(a) for a in raw))


def encoder(rng, vocab=6, emb=3, hidden=2):
    E = rng.standard_normal((vocab, emb))
    f, b = cell(rng, emb, hidden), cell(rng, emb, hidden)
    return E, f, b, QuestionEncoderParams(Tensor(E), as_cell(f), as_cell(b))


def test_embed_tokens_lookup(rng):
    E = rng.standard_normal((5, 4))
    out = embed_tokens([3, 1], Tensor(E)).data
    np.testing.assert_array_equal(out[0], E[3])
    np.testing.assert_array_equal(out[1], E[1])


def test_embed_tokens_out_of_range(rng):
    with pytest.raises(ValueError):
        embed_tokens([5], Tensor(rng.standard_normal((5, 4))))


def test_lstm_step_size3_matches_oracle(rng):
    raw = cell(rng, 3, 3)
    x, h, c = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3)
    h1, c1 = lstm_step(x, h, c, as_cell(raw))
    eh, ec = oracles.lstm(x, h, c, *raw)
    np.testing.assert_allclose(h1.data, eh, rtol=0, atol=1e-12)
    np.testing.assert_allclose(c1.data, ec, rtol=0, atol=1e-12)


def test_lstm_step_100_random_cases():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(100):
        n_in, hidden = rng.integers(1, 7, size=2)
        raw = cell(rng, n_in, hidden, scale=1.0)
        x = rng.standard_normal(n_in)
        h, c = rng.standard_normal(hidden), rng.standard_normal(hidden)
        h1, c1 = lstm_step(x, h, c, as_cell(raw))
        eh, ec = oracles.lstm(x, h, c, *raw)
        worst = max(worst, np.abs(h1.data - eh).max(), np.abs(c1.data - ec).max())
    assert worst <= 1e-12


def test_lstm_step_shape_mismatch(rng):
    p = as_cell(cell(rng, 3, 2))
    with pytest.raises(ValueError):
        lstm_step(np.zeros(4), np.zeros(2), np.zeros(2), p)
    with pytest.raises(ValueError):
        lstm_step(np.zeros(3), np.zeros(3), np.zeros(2), p)


def test_lstm_params_shape_check(rng):
    with pytest.raises(ValueError):
        LstmCellParams(Tensor(np.zeros((8, 3))), Tensor(np.zeros((8, 3))), Tensor(np.zeros(8)))


def test_encode_question_matches_oracle(rng):
    E, f, b, p = encoder(rng)
    tokens = [1, 4, 2, 2, 5]
    out = encode_question(tokens, p).data
    np.testing.assert_allclose(out, oracles.bilstm(tokens, E, f, b), rtol=0, atol=1e-12)
    assert out.shape == (5, 4)


def test_encode_question_reversal_swaps_directions(rng):
    E, f, b, p = encoder(rng)
    tokens = [1, 4, 2, 5]
    swapped = QuestionEncoderParams(Tensor(E), as_cell(b), as_cell(f))
    orig = encode_question(tokens, p).data
    rev = encode_question(tokens[::-1], swapped).data
    H = 2
    np.testing.assert_allclose(rev[:, :H], orig[::-1, H:], rtol=0, atol=1e-14)
    np.testing.assert_allclose(rev[:, H:], orig[::-1, :H], rtol=0, atol=1e-14)


def test_encode_question_zero_params():
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    p = QuestionEncoderParams(z(4, 3), LstmCellParams(z(8, 3), z(8, 2), z(8)),
                              LstmCellParams(z(8, 3), z(8, 2), z(8)))
    assert np.all(encode_question([0, 1, 2], p).data == 0)


def test_encode_question_empty(rng):
    with pytest.raises(ValueError):
        encode_question([], encoder(rng)[3])


@given(st.lists(st.integers(0, 5), min_size=1, max_size=6), st.lists(st.integers(0, 5), max_size=4))
def test_only_real_tokens_shape_leading_rows(tokens, extra):
    # forward halves of the first T rows ignore whatever follows
    p = encoder(np.random.default_rng(5))[3]
    a = encode_question(tokens, p).data
    b = encode_question(tokens + extra, p).data
    assert a.shape[0] == len(tokens)
    np.testing.assert_allclose(a[:, :2], b[: len(tokens), :2], rtol=0, atol=1e-12)


def test_encoder_gradients(rng):
    E, f, b, _ = encoder(rng, vocab=5, emb=3, hidden=2)
    params = {"E": E, "fx": f[0], "fh": f[1], "fb": f[2], "bx": b[0], "bh": b[1], "bb": b[2]}
    w = rng.standard_normal((3, 4))

    def loss(t):
        p = QuestionEncoderParams(t["E"], LstmCellParams(t["fx"], t["fh"], t["fb"]),
                                  LstmCellParams(t["bx"], t["bh"], t["bb"]))
        return ag.sum(encode_question([1, 3, 0], p) * Tensor(w))

    reps = ag.check_params_gradient(loss, params)
    assert max(r.max_rel_error for r in reps.values()) < 1e-4


def test_question_width_equals_feature_width():
    assert ModelDims(vocab_size=3, feature_dim=8, hidden=4, classes=2).q_hidden * 2 == 8
    with pytest.raises(ValueError):
        ModelDims(vocab_size=3, feature_dim=7, hidden=4, classes=2)


# --- feature grids ---------------------------------------------------------


def test_feature_grid_round_trip(tmp_path, rng):
    g = FeatureGrid(rng.standard_normal((196, 512)).astype(np.float32), "img_1")
    save_feature_grid(g, tmp_path / "a.grid")
    back = load_feature_grid(tmp_path / "a.grid")
    assert back.regions.shape == (196, 512) and back.image_id == "img_1"
    assert back.regions.tobytes() == g.regions.tobytes()
    save_feature_grid(back, tmp_path / "b.grid")
    assert (tmp_path / "a.grid").read_bytes() == (tmp_path / "b.grid").read_bytes()


def test_feature_grid_truncated(tmp_path, rng):
    save_feature_grid(FeatureGrid(rng.standard_normal((4, 3)).astype(np.float32)), tmp_path / "g")
    raw = (tmp_path / "g").read_bytes()
    (tmp_path / "g").write_bytes(raw[:-5])
    with pytest.raises(TruncatedPayloadError):
        load_feature_grid(tmp_path / "g")


@pytest.mark.parametrize("header", [b"not json", b'{"n": 2}', b'{"image_id": "x", "n": 0, "d": 2}',
                                    b'{"image_id": "x", "n": 1, "d": 2, "dtype": "f64"}'])
def test_feature_grid_malformed_header(tmp_path, header):
    (tmp_path / "g").write_bytes(header + b"\n" + b"\0" * 8)
    with pytest.raises(MalformedHeaderError):
        load_feature_grid(tmp_path / "g")


def test_feature_grid_no_header_line(tmp_path):
    (tmp_path / "g").write_bytes(b"{}")
    with pytest.raises(MalformedHeaderError):
        load_feature_grid(tmp_path / "g")


def test_feature_grid_non_finite(tmp_path):
    payload = np.array([1.0, np.nan], dtype="<f4").tobytes()
    (tmp_path / "g").write_bytes(b'{"image_id": "x", "n": 1, "d": 2, "dtype": "f32le"}\n' + payload)
    with pytest.raises(NonFiniteFeaturesError):
        load_feature_grid(tmp_path / "g")
    with pytest.raises(NonFiniteFeaturesError):
        FeatureGrid(np.array([[np.inf]]))


def test_feature_grid_errors_are_distinct():
    kinds = {MalformedHeaderError, TruncatedPayloadError, NonFiniteFeaturesError}
    assert len(kinds) == 3
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)


# --- vocabulary -------------------------------------------------------------


def test_tokenize():
    assert tokenize("What color is the Cat's hat?") == ["what", "color", "is", "the", "cat", "s", "hat"]


def test_vocabulary_bijection_and_unknown():
    v = Vocabulary.from_questions(["what color", "which kind?"])
    assert [v.index_to_token[v.token_to_index[t]] for t in v.index_to_token] == v.index_to_token
    assert v.encode("what zebra") == [v.token_to_index["what"], v.unknown_index]
    assert Vocabulary.from_json(v.to_json()).index_to_token == v.index_to_token
    with pytest.raises(ValueError):
        Vocabulary(["a", "a"])
    with pytest.raises(ValueError):
        Vocabulary(["a"], unknown_index=3)
