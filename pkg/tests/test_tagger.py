import numpy as np
import numpy.testing as npt
import pytest

from src.corpus import DEFAULT_TAGSET, SURNAME, AnnotatedSentence, SynthConfig, TagSet, generate_synthetic_corpus
from src.errors import TrainingError
from src.neural import TrainConfig, grad_check
from src.tagger import (ModelConfig, decode_tags, evaluate, extract_name_probs, predict_P, read_records_csv,
                        score_tags, train_tagger, write_records_csv)

from .conftest import sentence, tiny_model

TINY_TAGS = TagSet(("O", "B-" + SURNAME, "I-" + SURNAME))
B_SN = "B-" + SURNAME


@pytest.fixture
def tiny_sentence():
    return sentence(["Mr", "Smith", "saw", "Dr", "Li"], ["O", B_SN, "O", "O", B_SN], TINY_TAGS)


def test_P_rows_are_distributions(corpus_model, small_corpus):
    model = corpus_model()
    for sent in small_corpus.sentences()[:5]:
        P = predict_P(model, sent)
        assert P.shape == (len(sent), len(DEFAULT_TAGSET))
        npt.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)


def test_zero_head_gives_uniform_P(tiny_sentence):
    model = tiny_model([tiny_sentence], TINY_TAGS)
    for W, b, _ in model.head.layers:
        W[...] = 0.0
        b[...] = 0.0
    npt.assert_allclose(predict_P(model, tiny_sentence), 1.0 / 3)


def test_empty_sentence_gives_empty_output(tiny_sentence):
    model = tiny_model([tiny_sentence], TINY_TAGS)
    empty = AnnotatedSentence((), ())
    assert predict_P(model, empty).shape == (0, 3)
    assert decode_tags(model, empty) == []


def test_P_bypasses_the_crf(tiny_sentence, rng):
    model = tiny_model([tiny_sentence], TINY_TAGS, use_crf=True)
    model.crf.transitions[model.crf.trainable_mask()] = rng.standard_normal(model.crf.trainable_mask().sum())
    npt.assert_array_equal(predict_P(model, tiny_sentence), predict_P(model.without_crf(), tiny_sentence))


def test_decode_without_crf_is_argmax(tiny_sentence):
    model = tiny_model([tiny_sentence], TINY_TAGS)
    assert decode_tags(model, tiny_sentence) == list(np.argmax(predict_P(model, tiny_sentence), axis=1))


def test_decode_with_zero_transitions_is_argmax(tiny_sentence):
    model = tiny_model([tiny_sentence], TINY_TAGS, use_crf=True)
    assert decode_tags(model, tiny_sentence) == list(np.argmax(model.emissions(tiny_sentence), axis=1))


@pytest.mark.parametrize("use_crf,loss_kind", [(False, "softmax-ce"), (True, "crf-nll")])
def test_tagger_gradients(tiny_sentence, rng, use_crf, loss_kind):
    model = tiny_model([tiny_sentence], TINY_TAGS, use_crf=use_crf, char_hidden=3, token_hidden=4)
    if use_crf:
        mask = model.crf.trainable_mask()
        model.crf.transitions[mask] = 0.5 * rng.standard_normal(mask.sum())
    worst, per_param = grad_check(model, tiny_sentence, loss_kind, epsilon=1e-4)
    assert worst < 1e-4, per_param
    assert ("crf.T" in per_param) == use_crf


def test_crf_loss_needs_crf(tiny_sentence):
    model = tiny_model([tiny_sentence], TINY_TAGS)
    with pytest.raises(TrainingError):
        model.loss_and_grads(tiny_sentence, "crf-nll", 0.0, None)


def test_scores_hand_counted_case():
    o, sn = DEFAULT_TAGSET.o_index, DEFAULT_TAGSET.index(B_SN)
    gold = [sn, sn, sn, sn, o, o, o, o, o, o]
    pred = [sn, sn, sn, o, sn, sn, o, o, o, o]
    m = score_tags(gold, pred, DEFAULT_TAGSET)
    assert m.precision == pytest.approx(3 / 5)
    assert m.recall == pytest.approx(3 / 4)
    assert m.per_class[SURNAME]["support"] == 4


def test_scores_perfect_and_all_O():
    o, sn, dt = DEFAULT_TAGSET.o_index, DEFAULT_TAGSET.index(B_SN), DEFAULT_TAGSET.index("B-DATE")
    gold = [sn, o, dt, o]
    perfect = score_tags(gold, gold, DEFAULT_TAGSET)
    assert (perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0)
    blank = score_tags(gold, [o] * 4, DEFAULT_TAGSET)
    assert blank.recall == 0.0
    assert all(c["recall"] == 0.0 for c in blank.per_class.values())
    assert SURNAME in blank.undefined


def test_zero_epochs_returns_initial_model(small_corpus):
    cfg = ModelConfig(char_dim=3, char_hidden=3, token_hidden=4)
    model, history = train_tagger(small_corpus, cfg, TrainConfig(max_epochs=0), embedding_dim=4)
    assert history == []
    assert model.crf is None


def test_empty_training_split_is_an_error(small_corpus):
    no_train = small_corpus.subset(small_corpus.split("test"))
    with pytest.raises(TrainingError):
        train_tagger(no_train, ModelConfig(char_dim=3, char_hidden=3, token_hidden=4), TrainConfig(max_epochs=1))


def test_training_leaves_embeddings_untouched(small_corpus):
    cfg = ModelConfig(char_dim=3, char_hidden=3, token_hidden=4, use_crf=True)
    model0, _ = train_tagger(small_corpus, cfg, TrainConfig(max_epochs=0), embedding_dim=4)
    before = model0.embedding.matrix.copy()
    model, history = train_tagger(small_corpus, cfg, TrainConfig(max_epochs=2), embedding=model0.embedding)
    assert len(history) == 2
    assert model.embedding is model0.embedding
    npt.assert_array_equal(model.embedding.matrix, before)


def test_extract_name_probs(corpus_model, small_corpus):
    model = corpus_model()
    records = extract_name_probs(model, small_corpus, variant="ORIG")
    assert len(records) == sum(len(r.surname_positions) for r in small_corpus.reports)
    for r in records[:10]:
        assert r.variant == "ORIG"
        assert DEFAULT_TAGSET.category(r.gold_tag) == SURNAME
        assert r.score == r.P[r.gold_tag]
        assert r.P.sum() == pytest.approx(1.0, abs=1e-10)
    rid = small_corpus.reports[0].id
    with pytest.raises(IndexError):
        extract_name_probs(model, small_corpus, positions={rid: [(999, 0)]})
    with pytest.raises(ValueError):
        extract_name_probs(model, small_corpus, attachment="crf")


def test_crf_attachment_gives_marginals(corpus_model, small_corpus):
    model = corpus_model(use_crf=True)
    records = extract_name_probs(model, small_corpus.subset(small_corpus.reports[:1]), attachment="crf")
    for r in records:
        assert r.P.sum() == pytest.approx(1.0, abs=1e-8)


def test_records_csv_keeps_full_precision(corpus_model, small_corpus, tmp_path):
    model = corpus_model()
    records = extract_name_probs(model, small_corpus.subset(small_corpus.reports[:2]), variant="SN2")
    path = str(tmp_path / "probs.csv")
    write_records_csv(path, records, DEFAULT_TAGSET)
    back = read_records_csv(path, DEFAULT_TAGSET)
    assert [(r.report_id, r.sentence_index, r.token_index, r.name_string, r.gold_tag) for r in back] == \
           [(r.report_id, r.sentence_index, r.token_index, r.name_string, r.gold_tag) for r in records]
    npt.assert_array_equal([r.score for r in back], [r.score for r in records])
    npt.assert_array_equal(np.stack([r.P for r in back]), np.stack([r.P for r in records]))


@pytest.mark.slow
@pytest.mark.parametrize("use_crf", [False, True])
def test_desk_scale_training_fits_the_training_split(dictionary, use_crf):
    corpus = generate_synthetic_corpus(SynthConfig(n_reports=60, seed=11), dictionary)
    cfg = ModelConfig(char_dim=10, char_hidden=10, token_hidden=32, use_crf=use_crf, seed=1)
    model, history = train_tagger(corpus, cfg, TrainConfig(learning_rate=0.05, dropout_rate=0.2, max_epochs=40),
                                  embedding_dim=32)
    train = evaluate(model, corpus.sentences("train"))
    test = evaluate(model, corpus.sentences("test"))
    assert train.precision >= 0.95
    # overfitting direction, within one token's worth of noise
    assert train.precision >= test.precision - 0.01


@pytest.mark.slow
def test_crf_and_softmax_taggers_reach_similar_validation_f1(dictionary):
    corpus = generate_synthetic_corpus(SynthConfig(n_reports=30, seed=12), dictionary)
    best = {}
    for use_crf in (False, True):
        cfg = ModelConfig(char_dim=8, char_hidden=8, token_hidden=24, use_crf=use_crf, seed=2)
        _, history = train_tagger(corpus, cfg, TrainConfig(learning_rate=0.05, dropout_rate=0.2, max_epochs=25),
                                  embedding_dim=24)
        assert len(history) == 25
        best[use_crf] = max(h["valid_f1"] for h in history)
    assert best[True] >= best[False] - 0.05
