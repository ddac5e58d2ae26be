import pytest

from src.corpus import (DEFAULT_TAGSET, GIVEN, SURNAME, SynthConfig, build_name_inventory, corpus_vocabulary,
                        detokenize, emit_conll, generate_synthetic_corpus, load_name_dictionary,
                        name_occurrence_count, outside_dictionary, parse_conll, read_conll, repair_bio,
                        replace_tokens, synth_name_dictionary, tokenize, truncate_train, write_conll)
from src.errors import ConfigError, CorpusFormatError, DictionaryExhaustedError

from .conftest import sentence

TS = DEFAULT_TAGSET


def test_tokenize_keeps_offsets_and_internal_punctuation():
    text = "Mr. O'Neil-Smith, seen 2091-03-14."
    toks = tokenize(text)
    assert [t.text for t in toks] == ["Mr", ".", "O'Neil-Smith", ",", "seen", "2091-03-14", "."]
    for t in toks:
        assert text[t.start_offset:t.end_offset] == t.text
    assert detokenize(toks, text) == text


def test_default_tagset():
    assert len(TS) == 13
    assert TS.labels[TS.o_index] == "O"
    assert TS.category(TS.index("I-" + SURNAME)) == SURNAME
    assert TS.is_inside(TS.index("I-DATE"))
    with pytest.raises(KeyError):
        TS.index("B-NOPE")


def test_repair_bio_turns_orphan_inside_into_begin():
    tags = [TS.o_index, TS.index("I-" + SURNAME), TS.index("I-" + SURNAME), TS.index("I-DATE")]
    fixed, n = repair_bio(tags, TS)
    assert n == 2
    assert [TS.labels[t] for t in fixed] == ["O", "B-" + SURNAME, "I-" + SURNAME, "B-DATE"]


CONLL = """#doc a train
Mr\tO
Smith\tB-PATIENT-SURNAME
came\tO

Smith\tB-PATIENT-SURNAME
,\tO
John\tB-PATIENT-GIVEN

#doc b test
Dr\tO
Jones\tI-DOCTOR
"""


def test_parse_conll_reports_positions_and_repairs():
    corpus, repaired = parse_conll(CONLL)
    assert repaired == 1
    assert [r.id for r in corpus.reports] == ["a", "b"]
    assert corpus.splits == {"a": "train", "b": "test"}
    a = corpus.report("a")
    assert a.surname_positions == ((0, 1), (1, 0))
    assert a.given_positions == ((1, 2),)
    assert a.names(SURNAME) == ["smith"]
    assert corpus.report("b").sentences[0].gold_tags[1] == TS.index("B-DOCTOR")


def test_parse_conll_lines_before_a_header_form_doc0():
    corpus, _ = parse_conll("Smith\tB-PATIENT-SURNAME\n")
    assert corpus.reports[0].id == "doc0"
    assert corpus.splits["doc0"] == "train"


@pytest.mark.parametrize("text,line", [
    ("#doc a\nSmith B-PATIENT-SURNAME\n", 2),
    ("#doc a\nSmith\tB-NOPE\n", 2),
    ("#doc a train\nx\tO\n#doc b elsewhere\n", 3),
    ("#doc\n", 1),
])
def test_parse_conll_errors_carry_line_numbers(text, line):
    with pytest.raises(CorpusFormatError) as err:
        parse_conll(text)
    assert err.value.line_no == line
    assert f"line {line}" in str(err.value)


def test_token_lines_starting_with_doc_are_tokens():
    corpus, _ = parse_conll("#doc a\n#docs\tO\n#doc\tO\nSmith\tB-PATIENT-SURNAME\n")
    assert [r.id for r in corpus.reports] == ["a"]
    sent = corpus.report("a").sentences[0]
    assert [t.text for t in sent.tokens] == ["#docs", "#doc", "Smith"]
    assert sent.gold_tags[:2] == (TS.o_index, TS.o_index)


def test_parse_conll_rejects_duplicate_report_ids():
    with pytest.raises(CorpusFormatError):
        parse_conll("#doc a\nx\tO\n#doc a\ny\tO\n")


def test_conll_roundtrip_of_generated_corpus(small_corpus, tmp_path):
    assert parse_conll(emit_conll(small_corpus))[0] == small_corpus
    path = str(tmp_path / "c.conll")
    write_conll(path, small_corpus)
    assert read_conll(path) == (small_corpus, 0)


def test_generator_is_deterministic(dictionary, small_corpus):
    cfg = SynthConfig(n_reports=12, names_per_report=2, min_repetition_quota=3, seed=5)
    assert generate_synthetic_corpus(cfg, dictionary) == small_corpus
    other = generate_synthetic_corpus(SynthConfig(n_reports=12, names_per_report=2, min_repetition_quota=3, seed=6),
                                      dictionary)
    assert other != small_corpus


def test_generator_meets_repetition_quota_in_training(small_corpus):
    heavy = [r for r in small_corpus.split("train") if len(r.surname_positions) >= 6]
    assert len(heavy) >= 3
    assert len(small_corpus.split("train")) == round(0.7 * 12)
    for rep in small_corpus.reports:
        assert rep.surname_positions
        # one patient surname per report
        assert len(rep.names(SURNAME)) == 1
        for si, ti in rep.given_positions:
            assert TS.category(rep.sentences[si].gold_tags[ti]) == GIVEN


def test_generator_needs_enough_surnames():
    tiny = synth_name_dictionary(5, 3, 3, seed=0)
    with pytest.raises(DictionaryExhaustedError):
        generate_synthetic_corpus(SynthConfig(n_reports=10, min_repetition_quota=1), tiny)


@pytest.mark.parametrize("kwargs", [
    {"split_ratios": (0.5, 0.2, 0.2)},
    {"n_reports": 2, "min_repetition_quota": 3},
    {"n_reports": -1, "min_repetition_quota": 0},
])
def test_synth_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SynthConfig(**kwargs)


def test_inventory_and_outside_dictionary(small_corpus, dictionary):
    inv = build_name_inventory(small_corpus)
    assert len(inv.surnames) == 12
    outside = outside_dictionary(dictionary, small_corpus)
    vocab = set(corpus_vocabulary(small_corpus))
    assert not (outside.surnames | outside.given) & vocab
    assert not outside.surnames & inv.surnames
    assert outside.surnames < dictionary.surnames


def test_name_occurrence_count(small_corpus):
    assert name_occurrence_count(small_corpus) == sum(len(r.surname_positions) for r in small_corpus.reports)


def test_truncate_train_only_touches_training_split(small_corpus):
    cut = truncate_train(small_corpus, 2)
    assert len(cut.split("train")) == 2
    assert cut.split("valid") == small_corpus.split("valid")
    assert cut.split("test") == small_corpus.split("test")
    assert cut.split("train") == small_corpus.split("train")[:2]


def test_synth_name_dictionary_sets_are_disjoint():
    d = synth_name_dictionary(100, 40, 40, seed=1)
    assert d.sizes() == {"surnames": 100, "given_male": 40, "given_female": 40}
    assert not d.surnames & d.given
    assert not d.given_male & d.given_female
    assert synth_name_dictionary(100, 40, 40, seed=1) == d


def test_load_name_dictionary(tmp_path):
    (tmp_path / "s.txt").write_text("# surnames\nSmith\n\njones\n", encoding="utf-8")
    (tmp_path / "m.txt").write_text("John\n", encoding="utf-8")
    (tmp_path / "f.txt").write_text("Mary\n", encoding="utf-8")
    d = load_name_dictionary(str(tmp_path / "s.txt"), str(tmp_path / "m.txt"), str(tmp_path / "f.txt"))
    assert d.surnames == {"smith", "jones"}
    assert d.given == {"john", "mary"}


def test_replace_tokens_splices_text_and_shifts_offsets():
    s = sentence(["Mr", "Li", "saw", "Li"], ["O", "B-" + SURNAME, "O", "B-" + SURNAME])
    out = replace_tokens(s, {1: "Johnson", 3: "Johnson"})
    assert out.text == "Mr Johnson saw Johnson"
    assert out.words == ["Mr", "Johnson", "saw", "Johnson"]
    assert out.gold_tags == s.gold_tags
    for t in out.tokens:
        assert out.text[t.start_offset:t.end_offset] == t.text


@pytest.mark.parametrize("text,expected", [
    ("", []),
    ("Smith, John", ["Smith", ",", "John"]),
    ("Dr. O'Brien-Smith saw pt.", ["Dr", ".", "O'Brien-Smith", "saw", "pt", "."]),
])
def test_tokenize_golden(text, expected):
    assert [t.text for t in tokenize(text)] == expected


def test_empty_corpus_edge_cases(dictionary):
    empty = generate_synthetic_corpus(SynthConfig(n_reports=0, min_repetition_quota=0), dictionary)
    assert empty.reports == ()
    assert emit_conll(empty) == ""
    inv = build_name_inventory(empty)
    assert inv.surnames == frozenset() and inv.given == frozenset()


def test_parse_conll_single_token_report():
    corpus, _ = parse_conll("#doc r1\nSmith\tB-PATIENT-SURNAME\n")
    assert len(corpus.reports) == 1
    assert len(corpus.reports[0].sentences) == 1
    assert corpus.reports[0].sentences[0].words == ["Smith"]
    with pytest.raises(CorpusFormatError) as err:
        parse_conll("Smith\tB-PATIENT-SURNAME\textra\n")
    assert err.value.line_no == 1


def test_inventory_counts_repeated_surname():
    corpus, _ = parse_conll("#doc r1 train\nSmith\tB-PATIENT-SURNAME\nsaw\tO\nSmith\tB-PATIENT-SURNAME\n\n"
                            "SMITH\tB-PATIENT-SURNAME\n")
    inv = build_name_inventory(corpus)
    assert inv.surnames == {"smith"}
    assert len(inv.positions["r1"][0]) == 3
