"""Name-perturbed copies of a corpus: inside (names from the corpus) and outside
(names from a dictionary disjoint from the corpus) variants for surnames, given
names or both, plus brute-force candidate streams for the cut-off attacks."""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import (GIVEN, SURNAME, AnnotatedSentence, Corpus, NameDictionary, NameInventory, Position, Report,
                     canonical, read_conll, replace_tokens, write_conll)
from .errors import CorpusFormatError, DictionaryExhaustedError

logger = logging.getLogger(__name__)


class VariantKind(str, Enum):
    ORIG = "ORIG"
    SN1 = "SN1"
    GN1 = "GN1"
    SNGN1 = "SNGN1"
    SN2 = "SN2"
    GN2 = "GN2"
    SNGN2 = "SNGN2"

    @property
    def replaces_surname(self) -> bool:
        return self in (VariantKind.SN1, VariantKind.SNGN1, VariantKind.SN2, VariantKind.SNGN2)

    @property
    def replaces_given(self) -> bool:
        return self in (VariantKind.GN1, VariantKind.SNGN1, VariantKind.GN2, VariantKind.SNGN2)

    @property
    def inside(self) -> bool:
        return self.value.endswith("1")


PERTURBED_KINDS = [k for k in VariantKind if k is not VariantKind.ORIG]


@dataclass
class ReplacementPlan:
    variant: VariantKind
    seed: int
    # report id -> category -> canonical original -> canonical replacement
    maps: Dict[str, Dict[str, Dict[str, str]]] = field(default_factory=dict)

    def inverse(self) -> "ReplacementPlan":
        inv = {rid: {cat: {v: k for k, v in m.items()} for cat, m in cats.items()} for rid, cats in self.maps.items()}
        return ReplacementPlan(self.variant, self.seed, inv)


def transfer_case(original_surface: str, replacement_canonical: str) -> str:
    """Copy the case pattern of the original onto the replacement.

    ALL-CAPS -> ALL-CAPS, lowercase -> lowercase, anything else -> first letter
    upper, rest lower ("McSmith" + "o'neil" -> "O'neil")."""
    rep = replacement_canonical.lower()
    has_case = original_surface.upper() != original_surface.lower()
    if has_case and len(original_surface) > 1 and original_surface == original_surface.upper():
        return rep.upper()
    if has_case and original_surface == original_surface.lower():
        return rep
    return rep[:1].upper() + rep[1:]


def _draw(rng: np.random.Generator, pool: Sequence[str], exclude: set, what: str) -> str:
    if not pool:
        raise DictionaryExhaustedError(what, 1, 0)
    for _ in range(64):
        cand = pool[int(rng.integers(len(pool)))]
        if cand not in exclude:
            return cand
    rest = [p for p in pool if p not in exclude]
    if not rest:
        raise DictionaryExhaustedError(what, 1, 0)
    return rest[int(rng.integers(len(rest)))]


class _Pools:
    def __init__(self, surnames, given_male, given_female):
        self.surnames = sorted(surnames)
        self.given_male = sorted(given_male)
        self.given_female = sorted(given_female)
        self.given = sorted(set(given_male) | set(given_female))


def _pools_for(kind: VariantKind, inventory: NameInventory, outside: NameDictionary,
               genders: Optional[NameDictionary]) -> _Pools:
    if kind.inside:
        male = inventory.given & genders.given_male if genders else frozenset()
        female = inventory.given & genders.given_female if genders else frozenset()
        pools = _Pools(inventory.surnames, male, female)
        pools.given = sorted(inventory.given)
        return pools
    return _Pools(outside.surnames, outside.given_male, outside.given_female)


def _given_pool(pools: _Pools, name: str, genders: Optional[NameDictionary]) -> List[str]:
    # keep the gender of the original when it is known and the gendered pool is usable
    if genders is not None:
        if name in genders.given_male and pools.given_male:
            return pools.given_male
        if name in genders.given_female and pools.given_female:
            return pools.given_female
    return pools.given


def apply_plan(corpus: Corpus, plan: ReplacementPlan) -> Corpus:
    reports = []
    for rep in corpus.reports:
        maps = plan.maps.get(rep.id, {})
        by_sentence: Dict[int, Dict[int, str]] = {}
        for cat in (SURNAME, GIVEN):
            m = maps.get(cat)
            if not m:
                continue
            for si, ti in rep.positions(cat):
                surface = rep.surface((si, ti))
                new = m.get(canonical(surface))
                if new is not None:
                    by_sentence.setdefault(si, {})[ti] = transfer_case(surface, new)
        sentences = tuple(replace_tokens(s, by_sentence.get(si, {})) for si, s in enumerate(rep.sentences))
        reports.append(Report(rep.id, sentences, rep.surname_positions, rep.given_positions))
    return Corpus(tuple(reports), dict(corpus.splits), corpus.tagset)


def make_variant(corpus: Corpus, kind: VariantKind, inventory: NameInventory, outside_dict: NameDictionary,
                 seed: int, genders: Optional[NameDictionary] = None) -> Tuple[Corpus, ReplacementPlan]:
    """Replace patient surnames and/or given names report by report.

    A report's replacement is used at every occurrence of the original name in
    that report. Inside kinds draw from the corpus inventory (never the report's
    own name); outside kinds draw from outside_dict."""
    kind = VariantKind(kind)
    if kind is VariantKind.ORIG:
        raise ValueError("ORIG is the unperturbed corpus; nothing to build")
    overlap = (outside_dict.surnames & inventory.surnames) | (outside_dict.given & inventory.given)
    if overlap:
        raise ValueError(f"outside dictionary overlaps the corpus inventory ({len(overlap)} names)")
    pools = _pools_for(kind, inventory, outside_dict, genders)
    rng = np.random.default_rng(seed)
    plan = ReplacementPlan(kind, seed)
    for rep in corpus.reports:
        maps: Dict[str, Dict[str, str]] = {}
        if kind.replaces_surname and rep.surname_positions:
            own = set(rep.names(SURNAME))
            maps[SURNAME] = {name: _draw(rng, pools.surnames, own, f"{kind.value} surnames") for name in rep.names(SURNAME)}
        if kind.replaces_given and rep.given_positions:
            own = set(rep.names(GIVEN))
            maps[GIVEN] = {name: _draw(rng, _given_pool(pools, name, genders), own, f"{kind.value} given names")
                           for name in rep.names(GIVEN)}
        if maps:
            plan.maps[rep.id] = maps
    return apply_plan(corpus, plan), plan


def brute_force_substitutions(report: Report, positions: Sequence[Position],
                              names: Sequence[str]) -> Iterator[Tuple[str, List[Tuple[int, AnnotatedSentence]]]]:
    """For each dictionary name (in dictionary order) yield the report's name-bearing
    sentences with every listed occurrence replaced by that name."""
    if not names:
        raise DictionaryExhaustedError("brute-force candidates", 1, 0)
    if not positions:
        raise ValueError(f"report {report.id} has no name positions")
    by_sentence: Dict[int, List[int]] = {}
    for si, ti in positions:
        by_sentence.setdefault(si, []).append(ti)
    for cand in names:
        unit = []
        for si in sorted(by_sentence):
            sent = report.sentences[si]
            unit.append((si, replace_tokens(sent, {ti: transfer_case(sent.tokens[ti].text, cand) for ti in by_sentence[si]})))
        yield cand, unit


def select_repetition_reports(reports: Sequence[Report], min_count: int = 6, k: int = 3, seed: int = 0,
                              category: str = SURNAME) -> List[Report]:
    qualifying = [r for r in reports if len(r.positions(category)) >= min_count]
    if len(qualifying) < k:
        raise DictionaryExhaustedError(f"reports with >= {min_count} {category} occurrences", k, len(qualifying))
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(qualifying), size=k, replace=False))
    return [qualifying[i] for i in picked]


def most_repeated_reports(reports: Sequence[Report], k: int, category: str = SURNAME) -> List[Report]:
    """The k reports with the most occurrences (ties kept in corpus order)."""
    order = sorted(range(len(reports)), key=lambda i: (-len(reports[i].positions(category)), i))
    return [reports[i] for i in order[:k]]


# --- sidecar manifest ---

def write_variant(conll_path: str, manifest_path: str, corpus: Corpus, plan: ReplacementPlan) -> None:
    write_conll(conll_path, corpus)
    lines = [f"variant={plan.variant.value}", f"seed={plan.seed}"]
    for rid in sorted(plan.maps):
        for cat in sorted(plan.maps[rid]):
            for orig, new in sorted(plan.maps[rid][cat].items()):
                lines.append(f"map.{rid}.{cat}.{orig}={new}")
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_variant(conll_path: str, manifest_path: str) -> Tuple[Corpus, ReplacementPlan]:
    corpus, _ = read_conll(conll_path)
    values: Dict[str, str] = {}
    maps: Dict[str, Dict[str, Dict[str, str]]] = {}
    with open(manifest_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CorpusFormatError("manifest line without '='", line_no)
            if key.startswith("map."):
                _, rid, cat, orig = key.split(".", 3)
                maps.setdefault(rid, {}).setdefault(cat, {})[orig] = value
            else:
                values[key] = value
    return corpus, ReplacementPlan(VariantKind(values["variant"]), int(values["seed"]), maps)
