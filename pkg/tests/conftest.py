import numpy as np
import pytest

from src.corpus import (DEFAULT_TAGSET, AnnotatedSentence, SynthConfig, TagSet, corpus_vocabulary,
                        generate_synthetic_corpus, make_token, synth_name_dictionary)
from src.embeddings import synth_embedding
from src.tagger import ModelConfig, TaggerModel, build_char_vocab


@pytest.fixture(scope="session")
def dictionary():
    return synth_name_dictionary(200, 60, 60, seed=3)


@pytest.fixture(scope="session")
def small_corpus(dictionary):
    cfg = SynthConfig(n_reports=12, names_per_report=2, min_repetition_quota=3, seed=5)
    return generate_synthetic_corpus(cfg, dictionary)


def sentence(words, labels, tagset: TagSet = DEFAULT_TAGSET) -> AnnotatedSentence:
    tokens, pos = [], 0
    for w in words:
        tokens.append(make_token(w, pos))
        pos += len(w) + 1
    return AnnotatedSentence(tuple(tokens), tuple(tagset.index(lab) for lab in labels), " ".join(words))


def tiny_model(sentences, tagset: TagSet = DEFAULT_TAGSET, use_crf=False, seed=0, word_dim=4,
               char_hidden=3, token_hidden=4, vocab=None) -> TaggerModel:
    words = vocab if vocab is not None else sorted({t.text.lower() for s in sentences for t in s.tokens})
    emb = synth_embedding(words, word_dim, seed)
    cfg = ModelConfig(char_dim=3, char_hidden=char_hidden, token_hidden=token_hidden, use_crf=use_crf, seed=seed)
    return TaggerModel.init(cfg, emb, tagset, build_char_vocab(sentences))


@pytest.fixture
def corpus_model(small_corpus):
    def make(use_crf=False, seed=0):
        sents = small_corpus.sentences()
        return tiny_model(sents, small_corpus.tagset, use_crf=use_crf, seed=seed,
                          vocab=corpus_vocabulary(small_corpus))
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
