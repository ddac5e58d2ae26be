"""Attacks on a trained tagger: naive cut-off, brute-force name ranking and the
shadow-model membership inference attack."""
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, roc_auc_score

from .corpus import SURNAME, Corpus, NameDictionary, Position, Report, build_name_inventory, canonical
from .errors import DictionaryExhaustedError, TrainingError
from .neural import FfnClassifier, TrainConfig, crf_marginals, sgd_epoch
from .perturb import VariantKind, brute_force_substitutions, make_variant, most_repeated_reports
from .seeding import derive_seed
from .tagger import TaggerModel, extract_name_probs, predict_P

logger = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "max")


# --- naive cut-off ---

@dataclass(frozen=True)
class CutoffResult:
    best_threshold: float
    balanced_accuracy: float
    # "high": scores above the threshold are called members
    orientation: str
    tp: int
    fn: int
    tn: int
    fp: int

    def as_dict(self) -> Dict:
        return dict(self.__dict__)


def naive_cutoff(member_scores, nonmember_scores) -> CutoffResult:
    """Best single-threshold split of the two score samples by balanced accuracy.

    Thresholds are the midpoints between consecutive distinct pooled scores plus
    one point below and one above the range."""
    a = np.sort(np.asarray(member_scores, dtype=np.float64).ravel())
    b = np.sort(np.asarray(nonmember_scores, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("cut-off attack needs member and non-member scores")
    uniq = np.unique(np.concatenate([a, b]))
    thresholds = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + 1.0]])
    below_a = np.searchsorted(a, thresholds, side="right")
    below_b = np.searchsorted(b, thresholds, side="right")
    # members called when score > t: TPR = 1 - S_a(t), TNR = S_b(t)
    ba_high = 0.5 * (1.0 + below_b / b.size - below_a / a.size)
    ba_low = 1.0 - ba_high
    k_high, k_low = int(np.argmax(ba_high)), int(np.argmax(ba_low))
    if ba_high[k_high] >= ba_low[k_low]:
        k = k_high
        tp, fn = a.size - int(below_a[k]), int(below_a[k])
        tn, fp = int(below_b[k]), b.size - int(below_b[k])
        return CutoffResult(float(thresholds[k]), float(ba_high[k]), "high", tp, fn, tn, fp)
    k = k_low
    tp, fn = int(below_a[k]), a.size - int(below_a[k])
    tn, fp = b.size - int(below_b[k]), int(below_b[k])
    return CutoffResult(float(thresholds[k]), float(ba_low[k]), "low", tp, fn, tn, fp)


# --- brute-force ranking ---

@dataclass
class RankResult:
    report_id: str
    true_name: str
    candidate_count: int
    true_name_rank: int
    occurrence_ranks: List[int]
    consensus_size: int
    aggregation: str
    candidates: List[str] = field(repr=False)
    scores: np.ndarray = field(repr=False)

    def as_dict(self) -> Dict:
        return {"report_id": self.report_id, "true_name": self.true_name, "candidate_count": self.candidate_count,
                "true_name_rank": self.true_name_rank, "occurrence_ranks": self.occurrence_ranks,
                "consensus_size": self.consensus_size, "aggregation": self.aggregation}


def true_name_positions(report: Report, category: str = SURNAME) -> Tuple[str, List[Position]]:
    """Most frequent name of the category in the report and all its positions."""
    names = [canonical(report.surface(p)) for p in report.positions(category)]
    if not names:
        raise ValueError(f"report {report.id} has no {category} occurrences")
    counts = Counter(names)
    top = max(counts.values())
    name = next(n for n in names if counts[n] == top)
    return name, sorted(p for p, n in zip(report.positions(category), names) if n == name)


def _attached(model: TaggerModel, sentence, attachment: str) -> np.ndarray:
    if attachment == "crf":
        return crf_marginals(model.crf, model.emissions(sentence))
    return predict_P(model, sentence)


def candidate_probabilities(model: TaggerModel, report: Report, positions: Sequence[Position],
                            candidates: Sequence[str], attachment: str = "softmax") -> np.ndarray:
    """P vectors at every listed occurrence for every candidate: shape (C, O, K)."""
    if attachment == "crf" and model.crf is None:
        raise ValueError("CRF attachment point needs a model with a CRF layer")
    ordered = sorted(positions)
    out = np.zeros((len(candidates), len(ordered), len(model.tagset)))
    for c, (cand, unit) in enumerate(brute_force_substitutions(report, ordered, candidates)):
        by_sentence = {si: _attached(model, sent, attachment) for si, sent in unit}
        for o, (si, ti) in enumerate(ordered):
            out[c, o] = by_sentence[si][ti]
        if (c + 1) % 200 == 0:
            logger.debug("report %s: scored %d/%d candidates", report.id, c + 1, len(candidates))
    return out


def _with_true_name(names: Sequence[str], true_name: str) -> List[str]:
    if not names:
        raise DictionaryExhaustedError("brute-force candidates", 1, 0)
    cands = list(dict.fromkeys(canonical(n) for n in names))
    if true_name not in cands:
        cands.append(true_name)
    return cands


def rank_candidates(report_id: str, true_name: str, candidates: Sequence[str], occurrence_scores: np.ndarray,
                    aggregation: str = "mean", top_q: float = 0.1) -> RankResult:
    """Rank candidates by descending aggregated score.

    The true name gets the worst rank in its tie group, so the rank does not
    depend on candidate order. The consensus size counts candidates inside the
    top q fraction at every single occurrence."""
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    S = np.asarray(occurrence_scores, dtype=np.float64)
    scores = S.mean(axis=1) if aggregation == "mean" else S.max(axis=1)
    t = candidates.index(true_name)
    rank = int(np.sum(scores >= scores[t]))
    occ_ranks = [int(np.sum(S[:, o] >= S[t, o])) for o in range(S.shape[1])]
    top_k = max(1, math.ceil(top_q * len(candidates)))
    # competition rank of every candidate at every occurrence
    comp = 1 + np.sum(S[None, :, :] > S[:, None, :], axis=1)
    consensus = int(np.sum(np.all(comp <= top_k, axis=1)))
    return RankResult(report_id, true_name, len(candidates), rank, occ_ranks, consensus, aggregation,
                      list(candidates), scores)


def brute_force_rank(model: TaggerModel, report: Report, names: Sequence[str], category: str = SURNAME,
                     aggregation: str = "mean", top_q: float = 0.1, attachment: str = "softmax") -> RankResult:
    """Substitute every dictionary name into the report and rank by P at the gold name tag."""
    true_name, positions = true_name_positions(report, category)
    cands = _with_true_name(names, true_name)
    probs = candidate_probabilities(model, report, positions, cands, attachment)
    gold = [report.sentences[si].gold_tags[ti] for si, ti in sorted(positions)]
    occ = probs[:, np.arange(len(gold)), gold]
    res = rank_candidates(report.id, true_name, cands, occ, aggregation, top_q)
    logger.info("brute force %s: true name rank %d of %d (consensus %d)",
                report.id, res.true_name_rank, res.candidate_count, res.consensus_size)
    return res


def rank_table(result: RankResult) -> pd.DataFrame:
    ranks = [int(np.sum(result.scores >= s)) for s in result.scores]
    df = pd.DataFrame({"candidate": result.candidates, "score": result.scores, "rank": ranks})
    return df.sort_values(["rank", "candidate"], kind="mergesort").reset_index(drop=True)


# --- shadow models ---

@dataclass(frozen=True)
class ShadowPlan:
    num_shadow: int
    seeds: Tuple[int, ...]
    disjoint: bool

    @property
    def target(self) -> int:
        return 0

    @property
    def validation(self) -> int:
        return self.num_shadow - 1

    @property
    def training(self) -> List[int]:
        return list(range(1, self.num_shadow - 1))


def _shards(names, k: int, rng: np.random.Generator) -> List[List[str]]:
    pool = sorted(names)
    order = rng.permutation(len(pool))
    return [[pool[i] for i in order[j::k]] for j in range(k)]


def build_shadow_plan(corpus: Corpus, outside: NameDictionary, seed: int, num_shadow: int = 12,
                      genders: Optional[NameDictionary] = None) -> Tuple[ShadowPlan, List[Corpus]]:
    """num_shadow outside-name (SNGN2) copies of the corpus, each with its own seed.

    When every shard would keep at least two names per pool the outside
    dictionary is split into disjoint shards, one per shadow corpus; otherwise
    all shadows draw from the whole dictionary."""
    if num_shadow < 4:
        raise ValueError("need at least 4 shadow corpora (target, two training, validation)")
    rng = np.random.default_rng(derive_seed(seed, "shadow-shards"))
    sur = _shards(outside.surnames, num_shadow, rng)
    male = _shards(outside.given_male, num_shadow, rng)
    female = _shards(outside.given_female, num_shadow, rng)
    disjoint = min(len(s) for s in sur) >= 2 and min(len(m) + len(f) for m, f in zip(male, female)) >= 2
    if not disjoint:
        logger.warning("outside dictionary too small for %d disjoint shards; shadows share names", num_shadow)
    inventory = build_name_inventory(corpus)
    seeds = tuple(derive_seed(seed, f"shadow-{k}") for k in range(num_shadow))
    corpora = []
    for k in range(num_shadow):
        d = NameDictionary(frozenset(sur[k]), frozenset(male[k]), frozenset(female[k])) if disjoint else outside
        shadow, _ = make_variant(corpus, VariantKind.SNGN2, inventory, d, seeds[k], genders)
        corpora.append(shadow)
    logger.info("built %d shadow corpora (disjoint names: %s)", num_shadow, disjoint)
    return ShadowPlan(num_shadow, seeds, disjoint), corpora


@dataclass(frozen=True)
class MembershipExample:
    feature: np.ndarray
    label: int
    source: int
    report_id: str


def _examples(model: TaggerModel, corpus: Corpus, label: int, source: int, category: str,
              attachment: str) -> List[MembershipExample]:
    records = extract_name_probs(model, corpus, category=category, attachment=attachment)
    return [MembershipExample(r.P, label, source, r.report_id) for r in records]


def membership_examples(index: int, model: TaggerModel, corpora: Mapping[int, Corpus], rng: np.random.Generator,
                        split: str = "train", category: str = SURNAME, attachment: str = "softmax",
                        negatives: Optional[Sequence[int]] = None) -> List[MembershipExample]:
    """+1 examples from the model's own training reports, -1 examples from a
    same-sized mix of training reports of the shadow corpora listed in
    negatives (every other corpus when None). index itself never joins the mix."""
    if index not in corpora:
        raise ValueError(f"no shadow corpus for model {index}")
    sources = sorted(corpora) if negatives is None else sorted(set(negatives))
    unknown = [j for j in sources if j not in corpora]
    if unknown:
        raise ValueError(f"negative pool names unknown shadow corpora: {unknown}")
    own = corpora[index]
    members = own.split(split)
    pool = [(j, rep) for j in sources if j != index for rep in corpora[j].split(split)]
    if len(pool) < len(members):
        raise ValueError(f"negative pool has {len(pool)} reports, need {len(members)}")
    picked = sorted(rng.choice(len(pool), size=len(members), replace=False))
    out = _examples(model, own.subset(members), 1, index, category, attachment)
    by_source: Dict[int, List[Report]] = {}
    for i in picked:
        j, rep = pool[i]
        by_source.setdefault(j, []).append(rep)
    for j, reps in sorted(by_source.items()):
        out.extend(_examples(model, corpora[j].subset(reps), -1, j, category, attachment))
    return out


def balance(examples: Sequence[MembershipExample], rng: np.random.Generator) -> List[MembershipExample]:
    """Down-sample the majority label; surviving examples keep their order."""
    pos = [i for i, e in enumerate(examples) if e.label == 1]
    neg = [i for i, e in enumerate(examples) if e.label == -1]
    n = min(len(pos), len(neg))
    keep = set(pos) if len(pos) == n else set(rng.choice(pos, size=n, replace=False).tolist())
    keep |= set(neg) if len(neg) == n else set(rng.choice(neg, size=n, replace=False).tolist())
    return [e for i, e in enumerate(examples) if i in keep]


def build_membership_dataset(models: Mapping[int, TaggerModel], corpora: Mapping[int, Corpus], seed: int,
                             split: str = "train", category: str = SURNAME, attachment: str = "softmax",
                             negatives: Optional[Sequence[int]] = None) -> List[MembershipExample]:
    missing = [k for k in models if k not in corpora]
    if missing:
        raise ValueError(f"models without a shadow corpus: {missing}")
    rng = np.random.default_rng(seed)
    examples: List[MembershipExample] = []
    for k in sorted(models):
        examples.extend(membership_examples(k, models[k], corpora, rng, split, category, attachment, negatives))
    balanced = balance(examples, rng)
    logger.info("membership dataset: %d examples before balancing, %d after", len(examples), len(balanced))
    return balanced


def example_arrays(examples: Sequence[MembershipExample]) -> Tuple[np.ndarray, np.ndarray]:
    X = np.stack([e.feature for e in examples])
    y = np.array([1 if e.label == 1 else 0 for e in examples])
    return X, y


# --- attack network ---

@dataclass
class AttackModel:
    classifier: FfnClassifier
    train_accuracy: float
    valid_accuracy: Optional[float]
    history: List[Dict]

    def membership_proba(self, X: np.ndarray) -> np.ndarray:
        return self.classifier.predict_proba(X)[:, 1]


def train_attack_model(examples: Sequence[MembershipExample], seed: int, hidden: int = 64, epochs: int = 100,
                       learning_rate: float = 0.01,
                       valid_examples: Optional[Sequence[MembershipExample]] = None) -> AttackModel:
    """K -> hidden (ReLU) -> 2 softmax network trained by per-example SGD."""
    if not examples:
        raise TrainingError("no membership examples")
    X, y = example_arrays(examples)
    if len(np.unique(y)) < 2:
        raise TrainingError("membership examples hold a single class")
    rng = np.random.default_rng(seed)
    clf = FfnClassifier.init([X.shape[1], hidden, 2], ["relu", "identity"], rng)
    cfg = TrainConfig(learning_rate=learning_rate, dropout_rate=0.0, max_epochs=epochs, seed=seed)
    items = list(zip(X, y))
    history = []
    for epoch in range(1, epochs + 1):
        loss = sgd_epoch(clf, items, cfg, "softmax-ce", rng)
        history.append({"epoch": epoch, "loss": loss})
    train_acc = float(accuracy_score(y, clf.predict(X)))
    valid_acc = None
    if valid_examples:
        Xv, yv = example_arrays(valid_examples)
        valid_acc = float(accuracy_score(yv, clf.predict(Xv)))
    logger.info("attack model: train accuracy %.4f, validation accuracy %s", train_acc,
                "n/a" if valid_acc is None else f"{valid_acc:.4f}")
    return AttackModel(clf, train_acc, valid_acc, history)


@dataclass
class MiaReport:
    train_accuracy: float
    valid_accuracy: Optional[float]
    target_accuracy: float
    target_report_accuracy: float
    target_auc: Optional[float]
    ranks: List[RankResult]
    seeds: Dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> Dict:
        return {"train_accuracy": self.train_accuracy, "valid_accuracy": self.valid_accuracy,
                "target_accuracy": self.target_accuracy, "target_report_accuracy": self.target_report_accuracy,
                "target_auc": self.target_auc, "ranks": [r.as_dict() for r in self.ranks], "seeds": self.seeds}


def membership_accuracy(attack: AttackModel, examples: Sequence[MembershipExample]) -> Tuple[float, float, Optional[float]]:
    """Example-level accuracy, report-level accuracy (mean membership per report) and ROC-AUC."""
    X, y = example_arrays(examples)
    proba = attack.membership_proba(X)
    acc = float(accuracy_score(y, (proba >= 0.5).astype(int)))
    auc = float(roc_auc_score(y, proba)) if len(np.unique(y)) == 2 else None
    groups: Dict[Tuple[int, str, int], List[float]] = {}
    for e, p in zip(examples, proba):
        groups.setdefault((e.source, e.report_id, e.label), []).append(float(p))
    truth = [1 if key[2] == 1 else 0 for key in groups]
    pred = [1 if np.mean(v) >= 0.5 else 0 for v in groups.values()]
    return acc, float(accuracy_score(truth, pred)), auc


def mia_attack_target(attack: Optional[AttackModel], target_model: TaggerModel, corpora: Mapping[int, Corpus],
                      names: Sequence[str], seed: int, n_reports: int = 3, target: int = 0,
                      category: str = SURNAME, aggregation: str = "mean", top_q: float = 0.1,
                      attachment: str = "softmax", negatives: Optional[Sequence[int]] = None) -> MiaReport:
    """Membership accuracy on the target shadow corpus and brute-force ranks scored
    by the attack network's membership probability."""
    if attack is None:
        raise ValueError("attack model is not trained")
    if not names:
        raise DictionaryExhaustedError("MIA candidates", 1, 0)
    rng = np.random.default_rng(seed)
    target_examples = balance(membership_examples(target, target_model, corpora, rng, category=category,
                                                  attachment=attachment, negatives=negatives), rng)
    acc, report_acc, auc = membership_accuracy(attack, target_examples)
    ranks = []
    for rep in most_repeated_reports(corpora[target].split("train"), n_reports, category):
        true_name, positions = true_name_positions(rep, category)
        cands = _with_true_name(names, true_name)
        probs = candidate_probabilities(target_model, rep, positions, cands, attachment)
        C, O, K = probs.shape
        occ = attack.membership_proba(probs.reshape(C * O, K)).reshape(C, O)
        res = rank_candidates(rep.id, true_name, cands, occ, aggregation, top_q)
        logger.info("MIA %s: true name rank %d of %d", rep.id, res.true_name_rank, res.candidate_count)
        ranks.append(res)
    logger.info("MIA target: accuracy %.4f (report level %.4f), AUC %s", acc, report_acc,
                "n/a" if auc is None else f"{auc:.4f}")
    return MiaReport(attack.train_accuracy, attack.valid_accuracy, acc, report_acc, auc, ranks, {"target": seed})


def write_mia_report(path: str, report: MiaReport, config_echo: Optional[Dict] = None) -> None:
    data = report.as_dict()
    data["config"] = config_echo or {}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
