"""Corpus model, tokenizer, CoNLL I/O, name dictionaries and the synthetic
clinical-report generator used in place of the restricted i2b2 notes."""
import io
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, CorpusFormatError, DictionaryExhaustedError

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
SURNAME = "PATIENT-SURNAME"
GIVEN = "PATIENT-GIVEN"
CATEGORIES = (SURNAME, GIVEN, "DOCTOR", "DATE", "LOCATION", "ID")

# words keep internal hyphens/apostrophes; every other non-space char is a token
_TOKEN_RE = re.compile(r"\w+(?:[-'’]\w+)*|[^\w\s]")

Position = Tuple[int, int]


# --- Data model ---

@dataclass(frozen=True)
class Token:
    text: str
    char_ids: Tuple[int, ...]
    start_offset: int = field(default=0, compare=False)
    end_offset: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.text:
            raise ValueError("token text must be non-empty")
        if len(self.char_ids) != len(self.text):
            raise ValueError(f"char_ids length {len(self.char_ids)} != text length {len(self.text)}")


def make_token(text: str, start: int = 0) -> Token:
    # char ids are code points; the tagger maps them onto its own char vocabulary
    return Token(text, tuple(ord(ch) for ch in text), start, start + len(text))


@dataclass(frozen=True)
class TagSet:
    labels: Tuple[str, ...]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("tag labels must be unique")
        if "O" not in self.labels:
            raise ValueError("tag set needs an O tag")
        for lab in self.labels:
            if lab.startswith("I-") and "B-" + lab[2:] not in self.labels:
                raise ValueError(f"{lab} has no matching B- tag")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    @classmethod
    def from_categories(cls, categories: Sequence[str] = CATEGORIES) -> "TagSet":
        labels = ["O"]
        for cat in categories:
            labels += ["B-" + cat, "I-" + cat]
        return cls(tuple(labels))

    @property
    def o_index(self) -> int:
        return self._index["O"]

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"unknown tag {label!r}") from None

    def category(self, idx: int) -> Optional[str]:
        lab = self.labels[idx]
        return None if lab == "O" else lab[2:]

    def is_inside(self, idx: int) -> bool:
        return self.labels[idx].startswith("I-")


DEFAULT_TAGSET = TagSet.from_categories()


@dataclass(frozen=True)
class AnnotatedSentence:
    tokens: Tuple[Token, ...]
    gold_tags: Tuple[int, ...]
    text: str = field(default="", compare=False)

    def __post_init__(self):
        if len(self.tokens) != len(self.gold_tags):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.gold_tags)} tags")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> List[str]:
        return [t.text for t in self.tokens]


@dataclass(frozen=True)
class Report:
    id: str
    sentences: Tuple[AnnotatedSentence, ...]
    surname_positions: Tuple[Position, ...]
    given_positions: Tuple[Position, ...]

    def positions(self, category: str) -> Tuple[Position, ...]:
        if category == SURNAME:
            return self.surname_positions
        if category == GIVEN:
            return self.given_positions
        raise ValueError(f"no indexed positions for {category}")

    def surface(self, pos: Position) -> str:
        return self.sentences[pos[0]].tokens[pos[1]].text

    def names(self, category: str = SURNAME) -> List[str]:
        """Distinct canonical names at the category's positions, in first-seen order."""
        seen: List[str] = []
        for pos in self.positions(category):
            name = canonical(self.surface(pos))
            if name not in seen:
                seen.append(name)
        return seen


@dataclass(frozen=True)
class Corpus:
    reports: Tuple[Report, ...]
    splits: Dict[str, str]
    tagset: TagSet = DEFAULT_TAGSET

    def __post_init__(self):
        ids = [r.id for r in self.reports]
        if len(set(ids)) != len(ids):
            raise ValueError("report ids must be unique")
        if set(self.splits) != set(ids):
            raise ValueError("every report needs exactly one split")
        bad = {s for s in self.splits.values() if s not in SPLITS}
        if bad:
            raise ValueError(f"unknown split(s) {sorted(bad)}")

    def split(self, name: str) -> List[Report]:
        return [r for r in self.reports if self.splits[r.id] == name]

    def sentences(self, split: Optional[str] = None) -> List[AnnotatedSentence]:
        reports = self.reports if split is None else self.split(split)
        return [s for r in reports for s in r.sentences]

    def report(self, report_id: str) -> Report:
        for r in self.reports:
            if r.id == report_id:
                return r
        raise KeyError(report_id)

    def subset(self, reports: Sequence[Report]) -> "Corpus":
        return Corpus(tuple(reports), {r.id: self.splits[r.id] for r in reports}, self.tagset)


@dataclass(frozen=True)
class NameDictionary:
    surnames: FrozenSet[str]
    given_male: FrozenSet[str]
    given_female: FrozenSet[str]

    @property
    def given(self) -> FrozenSet[str]:
        return self.given_male | self.given_female

    def sizes(self) -> Dict[str, int]:
        return {"surnames": len(self.surnames), "given_male": len(self.given_male), "given_female": len(self.given_female)}


@dataclass(frozen=True)
class NameInventory:
    surnames: FrozenSet[str]
    given: FrozenSet[str]
    positions: Dict[str, Tuple[Tuple[Position, ...], Tuple[Position, ...]]]


@dataclass(frozen=True)
class SynthConfig:
    n_reports: int = 60
    names_per_report: int = 3
    min_repetition_quota: int = 3
    split_ratios: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    n_templates: int = 24
    seed: int = 7

    def __post_init__(self):
        if self.n_reports < 0:
            raise ConfigError("n_reports must be >= 0")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or len(self.split_ratios) != 3:
            raise ConfigError(f"split ratios {self.split_ratios} must be three values summing to 1")
        if self.min_repetition_quota > self.n_reports:
            raise ConfigError(f"min_repetition_quota {self.min_repetition_quota} > n_reports {self.n_reports}")


def canonical(name: str) -> str:
    return name.lower()


# --- Tokenizer ---

def tokenize(text: str) -> List[Token]:
    return [make_token(m.group(), m.start()) for m in _TOKEN_RE.finditer(text)]


def detokenize(tokens: Sequence[Token], text: str) -> str:
    """Rebuild text from token offsets; separators are taken from the source."""
    out = []
    pos = 0
    for tok in tokens:
        out.append(text[pos:tok.start_offset])
        out.append(tok.text)
        pos = tok.end_offset
    out.append(text[pos:])
    return "".join(out)


# --- Positions / validation ---

def index_positions(sentences: Sequence[AnnotatedSentence], tagset: TagSet, category: str) -> Tuple[Position, ...]:
    out = []
    for si, sent in enumerate(sentences):
        for ti, tag in enumerate(sent.gold_tags):
            if tagset.category(tag) == category:
                out.append((si, ti))
    return tuple(out)


def make_report(report_id: str, sentences: Sequence[AnnotatedSentence], tagset: TagSet = DEFAULT_TAGSET) -> Report:
    sentences = tuple(sentences)
    return Report(report_id, sentences,
                  index_positions(sentences, tagset, SURNAME),
                  index_positions(sentences, tagset, GIVEN))


def repair_bio(tags: Sequence[int], tagset: TagSet) -> Tuple[List[int], int]:
    """Turn I-X tags that do not continue an X entity into B-X."""
    out = list(tags)
    repaired = 0
    prev_cat = None
    for i, tag in enumerate(out):
        cat = tagset.category(tag)
        if tagset.is_inside(tag) and prev_cat != cat:
            out[i] = tagset.index("B-" + cat)
            repaired += 1
        prev_cat = cat
    return out, repaired


# --- CoNLL ---

def parse_conll(stream: Union[str, Iterable[str]], tagset: TagSet = DEFAULT_TAGSET) -> Tuple[Corpus, int]:
    """Read the two-column format; returns the corpus and the number of repaired tags."""
    lines = stream.splitlines() if isinstance(stream, str) else (ln.rstrip("\n") for ln in stream)

    reports: List[Report] = []
    splits: Dict[str, str] = {}
    repaired = 0
    doc_id: Optional[str] = None
    doc_split = "train"
    sentences: List[AnnotatedSentence] = []
    words: List[str] = []
    tags: List[int] = []

    def close_sentence():
        nonlocal words, tags, repaired
        if words:
            fixed, n = repair_bio(tags, tagset)
            repaired += n
            text = " ".join(words)
            toks, pos = [], 0
            for w in words:
                toks.append(make_token(w, pos))
                pos += len(w) + 1
            sentences.append(AnnotatedSentence(tuple(toks), tuple(fixed), text))
        words, tags = [], []

    def close_report():
        nonlocal sentences
        close_sentence()
        if doc_id is not None:
            if doc_id in splits:
                raise CorpusFormatError(f"duplicate report id {doc_id!r}")
            reports.append(make_report(doc_id, sentences, tagset))
            splits[doc_id] = doc_split
        sentences = []

    for line_no, line in enumerate(lines, start=1):
        parts = line.split()
        if "\t" not in line and parts and parts[0] == "#doc":
            close_report()
            if len(parts) not in (2, 3):
                raise CorpusFormatError(f"malformed report header {line!r}", line_no)
            doc_id = parts[1]
            doc_split = parts[2] if len(parts) == 3 else "train"
            if doc_split not in SPLITS:
                raise CorpusFormatError(f"unknown split {doc_split!r}", line_no)
            continue
        if not line.strip():
            close_sentence()
            continue
        cols = line.split("\t")
        if len(cols) != 2 or not cols[0]:
            raise CorpusFormatError(f"expected 2 tab-separated columns, got {len(cols)}", line_no)
        if doc_id is None:
            doc_id, doc_split = "doc0", "train"
        try:
            tags.append(tagset.index(cols[1]))
        except KeyError:
            raise CorpusFormatError(f"unknown tag {cols[1]!r}", line_no) from None
        words.append(cols[0])
    close_report()

    if repaired:
        logger.warning("repaired %d I- tags that did not continue an entity", repaired)
    return Corpus(tuple(reports), splits, tagset), repaired


def emit_conll(corpus: Corpus) -> str:
    buf = io.StringIO()
    labels = corpus.tagset.labels
    for rep in corpus.reports:
        buf.write(f"#doc {rep.id} {corpus.splits[rep.id]}\n")
        for sent in rep.sentences:
            for tok, tag in zip(sent.tokens, sent.gold_tags):
                buf.write(f"{tok.text}\t{labels[tag]}\n")
            buf.write("\n")
    return buf.getvalue()


def read_conll(path: str, tagset: TagSet = DEFAULT_TAGSET) -> Tuple[Corpus, int]:
    with open(path, "r", encoding="utf-8", newline="\n") as f:
        return parse_conll(f, tagset)


def write_conll(path: str, corpus: Corpus) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(emit_conll(corpus))


# --- Names ---

def build_name_inventory(corpus: Corpus) -> NameInventory:
    surnames, given = set(), set()
    positions = {}
    for rep in corpus.reports:
        surnames.update(canonical(rep.surface(p)) for p in rep.surname_positions)
        given.update(canonical(rep.surface(p)) for p in rep.given_positions)
        positions[rep.id] = (rep.surname_positions, rep.given_positions)
    return NameInventory(frozenset(surnames), frozenset(given), positions)


def corpus_vocabulary(corpus: Corpus) -> List[str]:
    return sorted({canonical(t.text) for s in corpus.sentences() for t in s.tokens})


def outside_dictionary(dictionary: NameDictionary, corpus: Corpus) -> NameDictionary:
    """Dictionary names that never occur as a token anywhere in the corpus."""
    seen = frozenset(corpus_vocabulary(corpus))
    return NameDictionary(dictionary.surnames - seen, dictionary.given_male - seen, dictionary.given_female - seen)


def name_occurrence_count(corpus: Corpus, category: str = SURNAME) -> int:
    return sum(len(r.positions(category)) for r in corpus.reports)


def truncate_train(corpus: Corpus, n: int) -> Corpus:
    """Keep only the first n training reports (overfit dial); other splits untouched."""
    kept, n_train = [], 0
    for rep in corpus.reports:
        if corpus.splits[rep.id] == "train":
            if n_train >= n:
                continue
            n_train += 1
        kept.append(rep)
    return corpus.subset(kept)


def _read_names(path: str) -> FrozenSet[str]:
    names = set()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            name = line.strip()
            if name and not name.startswith("#"):
                names.add(canonical(name))
    return frozenset(names)


def load_name_dictionary(surnames_path: str, male_path: str, female_path: str) -> NameDictionary:
    return NameDictionary(_read_names(surnames_path), _read_names(male_path), _read_names(female_path))


_ONSETS = ["b", "br", "c", "ch", "d", "dr", "f", "g", "gr", "h", "j", "k", "kr", "l", "m",
           "n", "p", "pr", "r", "s", "sh", "st", "t", "tr", "v", "w", "z"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ei", "ou"]
_CODAS = ["", "n", "r", "l", "s", "m", "th", "ck", "nd", "rt"]
_MALE_ENDS = ["o", "an", "er", "us", "im", "on"]
_FEMALE_ENDS = ["a", "ine", "elle", "ia", "ora", "ette"]
_SURNAME_ENDS = ["son", "ley", "man", "berg", "ford", "ski", "ton", "ez", "ard", "well"]


def _pseudo_names(rng: np.random.Generator, n: int, endings: List[str], exclude: set, what: str) -> FrozenSet[str]:
    out = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 1000:
            raise DictionaryExhaustedError(what, n, len(out))
        parts = [_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] + _CODAS[rng.integers(len(_CODAS))]
                 for _ in range(int(rng.integers(1, 3)))]
        name = "".join(parts) + endings[rng.integers(len(endings))]
        if name not in exclude:
            out.add(name)
    return frozenset(out)


def synth_name_dictionary(n_surnames: int, n_male: int, n_female: int, seed: int = 0) -> NameDictionary:
    """Deterministic pseudo-name dictionaries; the three sets are mutually disjoint."""
    rng = np.random.default_rng(seed)
    surnames = _pseudo_names(rng, n_surnames, _SURNAME_ENDS, set(), "surnames")
    male = _pseudo_names(rng, n_male, _MALE_ENDS, set(surnames), "male given names")
    female = _pseudo_names(rng, n_female, _FEMALE_ENDS, set(surnames) | set(male), "female given names")
    return NameDictionary(surnames, male, female)


# --- Synthetic corpus ---

# {SN} patient surname, {GN} patient given name, {DR} doctor, {DATE}, {LOC}, {ID}
_NAME_TEMPLATES = [
    "Mr. {SN} was admitted on {DATE} with chest pain.",
    "{GN} {SN} is a 67 year old patient followed by Dr. {DR}.",
    "{SN}, {GN} presented to {LOC} for evaluation.",
    "Patient {SN} reports shortness of breath since {DATE}.",
    "Plan discussed with {SN} and family at bedside.",
    "Ms. {SN} tolerated the procedure well.",
    "{SN} denies fever, chills or night sweats.",
    "Dr. {DR} saw {GN} {SN} in clinic today.",
    "MRN {ID} belongs to {SN}, {GN}.",
    "{SN} was discharged home in stable condition on {DATE}.",
    "Follow-up for {SN} arranged at {LOC}.",
    "Labs for {GN} {SN} were within normal limits.",
    "{SN} continues on metoprolol 25 mg twice daily.",
    "Per Dr. {DR}, {SN} may resume a regular diet.",
    "Mrs. {SN} complains of intermittent headaches.",
    "{SN} was seen by physical therapy this morning.",
    "Pt. {SN} states the pain is 4/10 today.",
    "Daughter of {SN} called with questions on {DATE}.",
]
_FILLER_TEMPLATES = [
    "Blood pressure 128/76, heart rate 72.",
    "No acute distress noted on examination.",
    "Chest X-ray showed no infiltrate.",
    "Medications were reconciled with pharmacy.",
    "Seen by Dr. {DR} on {DATE}.",
    "Transferred from {LOC} on {DATE}.",
    "Record number {ID} was verified.",
    "Lungs clear to auscultation bilaterally.",
    "Abdomen soft, non-tender, non-distended.",
    "Will continue current management and reassess.",
    "Follow-up appointment at {LOC} with Dr. {DR}.",
    "Echocardiogram scheduled for {DATE}.",
]
_LOCATIONS = ["Mercy General Hospital", "Boston", "Springfield Clinic", "St. Luke's Medical Center",
              "Riverside", "Lakeview Rehabilitation Center", "Oakland", "North Shore Hospital"]
_SLOT = re.compile(r"\{(SN|GN|DR|DATE|LOC|ID)\}")
_SLOT_CATEGORY = {"SN": SURNAME, "GN": GIVEN, "DR": "DOCTOR", "DATE": "DATE", "LOC": "LOCATION", "ID": "ID"}


def _surface(name: str, rng: np.random.Generator) -> str:
    # mostly title case, occasionally all caps as in transcribed headers
    return name.upper() if rng.random() < 0.1 else name.title()


def _render(template: str, values: Dict[str, str], tagset: TagSet) -> AnnotatedSentence:
    parts, spans, pos = [], [], 0
    last = 0
    for m in _SLOT.finditer(template):
        lit = template[last:m.start()]
        parts.append(lit)
        pos += len(lit)
        val = values[m.group(1)]
        spans.append((pos, pos + len(val), _SLOT_CATEGORY[m.group(1)]))
        parts.append(val)
        pos += len(val)
        last = m.end()
    parts.append(template[last:])
    text = "".join(parts)
    tokens = tokenize(text)
    tags = []
    for tok in tokens:
        tag = tagset.o_index
        for lo, hi, cat in spans:
            if lo <= tok.start_offset and tok.end_offset <= hi:
                first = tok.start_offset == lo
                tag = tagset.index(("B-" if first else "I-") + cat)
                break
        tags.append(tag)
    return AnnotatedSentence(tuple(tokens), tuple(tags), text)


def generate_synthetic_corpus(cfg: SynthConfig, dictionary: NameDictionary, tagset: TagSet = DEFAULT_TAGSET) -> Corpus:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_reports
    if n == 0:
        return Corpus((), {}, tagset)

    n_doctors = max(3, n // 10)
    surnames = sorted(dictionary.surnames)
    if len(surnames) < n + n_doctors:
        raise DictionaryExhaustedError("surnames for synthetic corpus", n + n_doctors, len(surnames))
    male, female = sorted(dictionary.given_male), sorted(dictionary.given_female)
    if not male and not female:
        raise DictionaryExhaustedError("given names for synthetic corpus", 1, 0)

    picked = rng.permutation(len(surnames))[:n + n_doctors]
    patient_sn = [surnames[i] for i in picked[:n]]
    doctors = [surnames[i] for i in picked[n:]]

    name_pool = _NAME_TEMPLATES[:max(1, cfg.n_templates)]
    filler_pool = _FILLER_TEMPLATES[:max(1, cfg.n_templates)]

    # split assignment; the repetition quota goes to training reports first
    order = rng.permutation(n)
    n_train = int(round(cfg.split_ratios[0] * n))
    n_valid = int(round(cfg.split_ratios[1] * n))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else ("valid" if rank < n_train + n_valid else "test")
    quota = set(int(i) for i in order[:cfg.min_repetition_quota])

    reports, splits = [], {}
    for i in range(n):
        if male and (not female or rng.random() < 0.5):
            given = male[rng.integers(len(male))]
        else:
            given = female[rng.integers(len(female))]
        doctor = doctors[rng.integers(len(doctors))]
        if i in quota:
            mentions = 6 + int(rng.integers(0, 3))
        else:
            mentions = max(1, int(rng.poisson(cfg.names_per_report)))
        sn_surface = _surface(patient_sn[i], rng)
        gn_surface = given.title()

        templates = [name_pool[rng.integers(len(name_pool))] for _ in range(mentions)]
        templates += [filler_pool[rng.integers(len(filler_pool))] for _ in range(int(rng.integers(2, 5)))]
        templates = [templates[j] for j in rng.permutation(len(templates))]

        sentences = []
        for tpl in templates:
            values = {
                "SN": sn_surface,
                "GN": gn_surface,
                "DR": doctor.title(),
                "DATE": f"{int(rng.integers(2080, 2100))}-{int(rng.integers(1, 13)):02d}-{int(rng.integers(1, 29)):02d}",
                "LOC": _LOCATIONS[rng.integers(len(_LOCATIONS))],
                "ID": str(int(rng.integers(1_000_000, 9_999_999))),
            }
            sentences.append(_render(tpl, values, tagset))
        rid = f"r{i:04d}"
        reports.append(make_report(rid, sentences, tagset))
        splits[rid] = split_of[i]

    corpus = Corpus(tuple(reports), splits, tagset)
    logger.info("synthetic corpus: %d reports, %d distinct patient surnames, %d surname occurrences, %d reports with >=6",
                n, len(set(patient_sn)), name_occurrence_count(corpus),
                sum(1 for r in reports if len(r.surname_positions) >= 6))
    return corpus


def replace_tokens(sentence: AnnotatedSentence, replacements: Dict[int, str]) -> AnnotatedSentence:
    """Swap token surfaces at the given indices, splicing the sentence text and shifting offsets."""
    if not replacements:
        return sentence
    text = sentence.text
    tokens = []
    shift = 0
    out_text = []
    cursor = 0
    for ti, tok in enumerate(sentence.tokens):
        new = replacements.get(ti, tok.text)
        out_text.append(text[cursor:tok.start_offset])
        out_text.append(new)
        cursor = tok.end_offset
        tokens.append(make_token(new, tok.start_offset + shift))
        shift += len(new) - len(tok.text)
    out_text.append(text[cursor:])
    return replace(sentence, tokens=tuple(tokens), text="".join(out_text))
