"""Stage-by-stage audit run: corpus, tagger training, perturbed variants,
probability extraction, KS statistics, cut-off, brute-force and MIA attacks,
and the final report bundle. Every stage writes its artifacts under the output
directory and is checkpointed so reruns resume."""
import json
import logging
import os
import platform
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd
import scipy
import sklearn

from .attacks import (brute_force_rank, build_membership_dataset, build_shadow_plan, mia_attack_target,
                      naive_cutoff, rank_table, train_attack_model, write_mia_report)
from .checkpoints import CheckpointStore
from .config_loader import RunConfig
from .corpus import (GIVEN, SURNAME, Corpus, NameDictionary, build_name_inventory, corpus_vocabulary, generate_synthetic_corpus,
                     load_name_dictionary, name_occurrence_count, outside_dictionary, read_conll,
                     synth_name_dictionary, truncate_train, write_conll)
from .embeddings import EmbeddingTable, read_word_vectors, synth_embedding
from .errors import AuditError, DictionaryExhaustedError, StageError
from .model_io import load_model, save_ffn, save_model
from .perturb import (PERTURBED_KINDS, VariantKind, make_variant, most_repeated_reports, read_variant,
                      select_repetition_reports, write_variant)
from .seeding import derive_seed
from .stats import export_curves, ks_table, ks_two_sample, summary_table, table1, write_curves
from .tagger import TaggerModel, evaluate, extract_name_probs, read_records_csv, train_tagger, write_records_csv

logger = logging.getLogger(__name__)

STAGES = ("gen-corpus", "train", "perturb", "extract", "ks", "cutoff", "brute", "mia", "report")
DEPENDS = {
    "gen-corpus": (),
    "train": ("gen-corpus",),
    "perturb": ("gen-corpus",),
    "extract": ("train", "perturb"),
    "ks": ("extract",),
    "cutoff": ("extract",),
    "brute": ("train",),
    "mia": ("gen-corpus",),
    "report": ("train", "ks", "cutoff", "brute", "mia"),
}
# model label -> file tag
MODEL_TAGS = {"no-CRF": "nocrf", "CRF": "crf"}
VARIANTS = ["ORIG"] + [k.value for k in PERTURBED_KINDS]


def model_label(use_crf: bool) -> str:
    return "CRF" if use_crf else "no-CRF"


def compared_category(variant: str) -> str:
    """Name category whose scores a variant is compared on against ORIG."""
    kind = VariantKind(variant)
    if kind is not VariantKind.ORIG and not kind.replaces_surname:
        return GIVEN
    return SURNAME


def stage_order(target: str) -> List[str]:
    if target not in STAGES:
        raise ValueError(f"unknown stage {target!r}")
    needed = set()

    def visit(s: str):
        if s not in needed:
            needed.add(s)
            for d in DEPENDS[s]:
                visit(d)

    visit(target)
    return [s for s in STAGES if s in needed]


@dataclass
class ReportBundle:
    out_dir: str
    manifest_path: str
    artifacts: Dict[str, List[str]] = field(default_factory=dict)

    def paths(self) -> List[str]:
        return sorted(p for ps in self.artifacts.values() for p in ps)


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out_dir
        self.store = CheckpointStore(self.out)
        self.hash = cfg.hash
        self._cache: Dict[str, object] = {}
        self._runs: Dict[str, Dict] = {}
        self._steps: Dict[str, Callable[[int], List[str]]] = {
            "gen-corpus": self.gen_corpus, "train": self.train, "perturb": self.perturb,
            "extract": self.extract, "ks": self.ks, "cutoff": self.cutoff, "brute": self.brute,
            "mia": self.mia, "report": self.report,
        }

    # --- plumbing ---

    def path(self, *parts: str) -> str:
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def rel(self, path: str) -> str:
        return os.path.relpath(path, self.out)

    def seed(self, stage: str) -> int:
        return derive_seed(self.cfg.seed, stage)

    def run(self, target: str = "report") -> ReportBundle:
        for stage in stage_order(target):
            self.run_stage(stage)
        self.write_manifest()
        return self.bundle()

    def run_stage(self, stage: str) -> List[str]:
        seed = self.seed(stage)
        if self.store.is_done(stage, self.hash):
            logger.info("stage %s: up to date, skipping", stage)
            self._runs[stage] = {"status": "skipped"}
            return self.store.record(stage)["artifacts"]
        logger.info("stage %s: start (seed %d)", stage, seed)
        started = datetime.now(timezone.utc).isoformat()
        try:
            paths = self._steps[stage](seed)
        except (AuditError, ValueError, KeyError, IndexError, OSError) as e:
            self.store.mark_failed(stage, seed, self.hash, str(e))
            self._runs[stage] = {"status": "failed", "started": started, "error": str(e)}
            self.write_manifest()
            raise StageError(stage, e) from e
        artifacts = [self.rel(p) for p in paths]
        self.store.mark_done(stage, seed, self.hash, artifacts)
        self._runs[stage] = {"status": "done", "started": started,
                             "finished": datetime.now(timezone.utc).isoformat()}
        logger.info("stage %s: done (%d artifacts)", stage, len(artifacts))
        return artifacts

    # --- shared inputs ---

    def dictionary(self) -> NameDictionary:
        if "dictionary" not in self._cache:
            self._cache["dictionary"] = load_name_dictionary(
                self.path("corpus", "surnames.txt"), self.path("corpus", "given_male.txt"),
                self.path("corpus", "given_female.txt"))
        return self._cache["dictionary"]

    def full_corpus(self) -> Corpus:
        if "full_corpus" not in self._cache:
            self._cache["full_corpus"], _ = read_conll(self.path("corpus", "corpus.conll"))
        return self._cache["full_corpus"]

    def corpus(self) -> Corpus:
        """The corpus every model trains on: overfit dial applied to the generated/ingested one."""
        if "corpus" not in self._cache:
            corpus = self.full_corpus()
            if self.cfg.overfit_dial is not None:
                corpus = truncate_train(corpus, self.cfg.overfit_dial)
                logger.info("overfit dial: training split cut to %d reports", len(corpus.split("train")))
            self._cache["corpus"] = corpus
        return self._cache["corpus"]

    def outside(self) -> NameDictionary:
        if "outside" not in self._cache:
            self._cache["outside"] = outside_dictionary(self.dictionary(), self.full_corpus())
        return self._cache["outside"]

    def embedding(self) -> EmbeddingTable:
        if "embedding" not in self._cache:
            if self.cfg.embeddings_path:
                table = read_word_vectors(self.cfg.embeddings_path, self.cfg.embedding_dim)
            else:
                d = self.dictionary()
                vocab = set(corpus_vocabulary(self.full_corpus())) | d.surnames | d.given
                table = synth_embedding(sorted(vocab), self.cfg.embedding_dim, self.seed("embedding"))
            self._cache["embedding"] = table
        return self._cache["embedding"]

    def candidates(self, stage: str) -> List[str]:
        """Seeded brute-force dictionary sample of outside surnames, in dictionary order."""
        pool = sorted(self.outside().surnames)
        n = min(self.cfg.attack.brute_force_dict_size, len(pool))
        if n == 0:
            raise DictionaryExhaustedError("brute-force candidates", 1, 0)
        rng = np.random.default_rng(self.seed(stage + "-dictionary"))
        return [pool[i] for i in sorted(rng.choice(len(pool), size=n, replace=False))]

    def model_path(self, label: str) -> str:
        return self.path("models", f"tagger_{MODEL_TAGS[label]}.npz")

    def models(self) -> Dict[str, TaggerModel]:
        if "models" not in self._cache:
            self._cache["models"] = {model_label(c): load_model(self.model_path(model_label(c)))[0]
                                     for c in self.cfg.crf_settings}
        return self._cache["models"]

    def _train(self, corpus: Corpus, use_crf: bool, epochs: int, tag: str) -> Tuple[TaggerModel, List[Dict]]:
        model_cfg = replace(self.cfg.model, use_crf=use_crf, seed=self.seed(f"init-{tag}"))
        train_cfg = replace(self.cfg.train, max_epochs=epochs, seed=self.seed(f"sgd-{tag}"))
        return train_tagger(corpus, model_cfg, train_cfg, embedding=self.embedding(), tag=tag)

    # --- stages ---

    def gen_corpus(self, seed: int) -> List[str]:
        d = self.cfg.dictionaries
        if d.from_files:
            dictionary = load_name_dictionary(d.surnames, d.given_male, d.given_female)
        else:
            dictionary = synth_name_dictionary(d.synth_surnames, d.synth_male, d.synth_female, seed)
        if self.cfg.corpus_path:
            corpus, repaired = read_conll(self.cfg.corpus_path)
            if repaired:
                logger.info("repaired %d BIO tags while reading %s", repaired, self.cfg.corpus_path)
        else:
            corpus = generate_synthetic_corpus(self.cfg.synth, dictionary)
        paths = [self.path("corpus", "corpus.conll")]
        write_conll(paths[0], corpus)
        for name, names in (("surnames", dictionary.surnames), ("given_male", dictionary.given_male),
                            ("given_female", dictionary.given_female)):
            p = self.path("corpus", f"{name}.txt")
            with open(p, "w", encoding="utf-8", newline="\n") as f:
                f.write("".join(n + "\n" for n in sorted(names)))
            paths.append(p)
        logger.info("corpus: %d reports, %d surname occurrences; dictionary %s",
                    len(corpus.reports), name_occurrence_count(corpus), dictionary.sizes())
        self._cache.clear()
        return paths

    def train(self, seed: int) -> List[str]:
        corpus = self.corpus()
        paths, rows = [], []
        for use_crf in self.cfg.crf_settings:
            label = model_label(use_crf)
            epochs = self.cfg.epochs_crf if use_crf else self.cfg.epochs_no_crf
            model, history = self._train(corpus, use_crf, epochs, label)
            p = self.model_path(label)
            save_model(p, model, {"epochs": epochs, "seed": seed, "overfit_dial": self.cfg.overfit_dial})
            h = self.path("models", f"history_{MODEL_TAGS[label]}.csv")
            pd.DataFrame(history, columns=["epoch", "loss", "valid_f1"]).to_csv(h, index=False, float_format="%.17g")
            paths += [p, h]
            for split in ("train", "valid", "test"):
                sents = corpus.sentences(split)
                if not sents:
                    continue
                m = evaluate(model, sents)
                rows.append({"model": label, "split": split, "class": "micro", "precision": m.precision,
                             "recall": m.recall, "f1": m.f1, "support": sum(c["support"] for c in m.per_class.values())})
                for cat, c in sorted(m.per_class.items()):
                    rows.append({"model": label, "split": split, "class": cat, **c})
                logger.info("%s %s: precision %.4f recall %.4f F1 %.4f", label, split, m.precision, m.recall, m.f1)
        p = self.path("metrics.csv")
        pd.DataFrame(rows, columns=["model", "split", "class", "precision", "recall", "f1", "support"]).to_csv(
            p, index=False, float_format="%.17g")
        self._cache.pop("models", None)
        return paths + [p]

    def perturb(self, seed: int) -> List[str]:
        corpus = self.corpus()
        inventory = build_name_inventory(corpus)
        paths = []
        for kind in PERTURBED_KINDS:
            variant, plan = make_variant(corpus, kind, inventory, self.outside(), derive_seed(seed, kind.value),
                                         genders=self.dictionary())
            c, m = self.path("variants", f"{kind.value}.conll"), self.path("variants", f"{kind.value}.manifest")
            write_variant(c, m, variant, plan)
            paths += [c, m]
        return paths

    def variant_corpus(self, variant: str) -> Corpus:
        if variant == "ORIG":
            return self.corpus()
        corpus, _ = read_variant(self.path("variants", f"{variant}.conll"), self.path("variants", f"{variant}.manifest"))
        return corpus

    def probs_path(self, label: str, variant: str) -> str:
        return self.path("probs", f"{MODEL_TAGS[label]}_{variant}.csv")

    def extract(self, seed: int) -> List[str]:
        paths = []
        for variant in VARIANTS:
            corpus = self.variant_corpus(variant)
            # scores are taken on the reports the models were trained on
            train = corpus.subset(corpus.split("train"))
            for label, model in self.models().items():
                attachment = self.cfg.attack.attachment if model.crf is not None else "softmax"
                records = []
                for cat in (SURNAME, GIVEN):
                    records += extract_name_probs(model, train, variant=variant, category=cat, attachment=attachment)
                p = self.probs_path(label, variant)
                write_records_csv(p, records, model.tagset)
                paths.append(p)
        return paths

    def scores(self) -> Dict[str, Dict[str, Dict[str, np.ndarray]]]:
        """model label -> variant -> category -> scores."""
        out: Dict[str, Dict[str, Dict[str, np.ndarray]]] = {}
        for label, model in self.models().items():
            out[label] = {}
            for variant in VARIANTS:
                records = read_records_csv(self.probs_path(label, variant), model.tagset)
                by_cat: Dict[str, List[float]] = {SURNAME: [], GIVEN: []}
                for r in records:
                    by_cat.setdefault(model.tagset.category(r.gold_tag), []).append(r.score)
                out[label][variant] = {cat: np.asarray(v) for cat, v in by_cat.items()}
        return out

    def ks(self, seed: int) -> List[str]:
        scores = self.scores()
        results, compared = {}, {}
        paths = []
        for label, by_variant in scores.items():
            results[label], compared[label] = {}, {}
            for variant in VARIANTS:
                cat = compared_category(variant)
                sample = by_variant[variant][cat]
                compared[label][variant] = sample
                if variant == "ORIG":
                    compared[label]["ORIG-given"] = by_variant["ORIG"][GIVEN]
                if variant != "ORIG":
                    orig = by_variant["ORIG"][cat]
                    if len(orig) and len(sample):
                        results[label][variant] = ks_two_sample(orig, sample)
                    else:
                        logger.warning("%s %s: no %s scores, KS skipped", label, variant, cat)
                if len(sample) == 0:
                    continue
                stem = os.path.join("stats", "curves", f"{MODEL_TAGS[label]}_{variant}")
                paths += write_curves(self.path(stem), export_curves(sample, bins=self.cfg.hist_bins,
                                                                     value_range=(0.0, 1.0))).values()
                tail = sample[sample >= self.cfg.tail_cut]
                if len(tail):
                    curves = export_curves(tail, bins=self.cfg.hist_bins, value_range=(self.cfg.tail_cut, 1.0))
                    paths += write_curves(self.path(stem + "_tail"), curves).values()
        for label, by_variant in results.items():
            for variant, res in by_variant.items():
                logger.info("KS %s ORIG vs %s: D=%.4g p=%.3g", label, variant, res.D, res.p_asymptotic)
        for name, df in (("ks_all.csv", ks_table(results)), ("table1.csv", table1(results)),
                         ("summary.csv", summary_table(compared))):
            p = self.path("stats", name)
            df.to_csv(p, index=False, float_format="%.17g")
            paths.append(p)
        return paths

    def cutoff(self, seed: int) -> List[str]:
        rows = []
        for label, by_variant in self.scores().items():
            orig = by_variant["ORIG"][SURNAME]
            for variant, side in (("SN1", "inside"), ("SN2", "outside"), ("SNGN1", "inside"), ("SNGN2", "outside")):
                other = by_variant[variant][SURNAME]
                if not len(orig) or not len(other):
                    continue
                res = naive_cutoff(orig, other)
                D = ks_two_sample(orig, other).D
                rows.append({"model": label, "comparison": f"ORIG vs {variant}", "side": side, **res.as_dict(),
                             "ks_D": D, "ks_bound": (1 + D) / 2})
                logger.info("cut-off %s ORIG vs %s: balanced accuracy %.4f", label, variant, res.balanced_accuracy)
        p = self.path("attacks", "cutoff.csv")
        pd.DataFrame(rows).to_csv(p, index=False, float_format="%.17g")
        return [p]

    def _repetition_reports(self, seed: int):
        a = self.cfg.attack
        train = self.corpus().split("train")
        try:
            return select_repetition_reports(train, a.repetition_min, a.reports_k, seed)
        except DictionaryExhaustedError as e:
            logger.info("%s; using the %d most repeated training reports instead", e, a.reports_k)
            return most_repeated_reports(train, a.reports_k)

    def brute(self, seed: int) -> List[str]:
        a = self.cfg.attack
        names = self.candidates("brute")
        reports = self._repetition_reports(seed)
        paths, summary = [], []
        for label, model in self.models().items():
            attachment = a.attachment if model.crf is not None else "softmax"
            for rep in reports:
                res = brute_force_rank(model, rep, names, aggregation=a.aggregation, top_q=a.consensus_q,
                                       attachment=attachment)
                p = self.path("attacks", f"brute_{MODEL_TAGS[label]}_{rep.id}.csv")
                rank_table(res).to_csv(p, index=False, float_format="%.17g")
                paths.append(p)
                summary.append({"model": label, **res.as_dict()})
        p = self.path("attacks", "brute_summary.json")
        with open(p, "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        return paths + [p]

    def mia(self, seed: int) -> List[str]:
        a = self.cfg.attack
        use_crf = self.cfg.crf == "on"
        plan, corpora = build_shadow_plan(self.corpus(), self.outside(), seed, a.num_shadow, genders=self.dictionary())
        paths = []
        models = {}
        for k, shadow in enumerate(corpora):
            c = self.path("mia", f"shadow_{k}.conll")
            write_conll(c, shadow)
            model, _ = self._train(shadow, use_crf, a.shadow_epochs, f"shadow-{k}")
            m = self.path("mia", f"shadow_model_{k}.npz")
            save_model(m, model, {"shadow": k, "seed": plan.seeds[k]})
            models[k] = model
            paths += [c, m]
        corpora_by_index = dict(enumerate(corpora))
        # the target corpus stays out of attack training and validation
        train = build_membership_dataset({k: models[k] for k in plan.training}, corpora_by_index,
                                         derive_seed(seed, "membership-train"), negatives=plan.training)
        valid = build_membership_dataset({plan.validation: models[plan.validation]}, corpora_by_index,
                                         derive_seed(seed, "membership-valid"), negatives=plan.training)
        attack = train_attack_model(train, derive_seed(seed, "attack"), a.hidden, a.epochs, a.learning_rate, valid)
        p = self.path("mia", "attack.npz")
        save_ffn(p, attack.classifier.params, {"train_accuracy": attack.train_accuracy,
                                               "valid_accuracy": attack.valid_accuracy})
        paths.append(p)
        attachment = a.attachment if use_crf else "softmax"
        report = mia_attack_target(attack, models[plan.target], corpora_by_index, self.candidates("mia"),
                                   derive_seed(seed, "target"), a.reports_k, plan.target,
                                   aggregation=a.aggregation, top_q=a.consensus_q, attachment=attachment,
                                   negatives=plan.training + [plan.validation])
        report.seeds.update({f"shadow_{k}": s for k, s in enumerate(plan.seeds)})
        p = self.path("mia", "report.json")
        write_mia_report(p, report, {"num_shadow": plan.num_shadow, "disjoint_shards": plan.disjoint,
                                     "crf": use_crf, "config_hash": self.hash})
        paths.append(p)
        for res in report.ranks:
            r = self.path("mia", f"ranks_{res.report_id}.csv")
            rank_table(res).to_csv(r, index=False, float_format="%.17g")
            paths.append(r)
        return paths

    def report(self, seed: int) -> List[str]:
        return [self.write_manifest()]

    # --- bundle ---

    def write_manifest(self) -> str:
        stages = {}
        provenance = {}
        for stage in STAGES:
            rec = self.store.record(stage)
            if rec is None:
                continue
            stages[stage] = {**rec, **self._runs.get(stage, {})}
            for a in rec.get("artifacts", []):
                provenance[a] = {"stage": stage, "seed": rec["seed"], "config_hash": rec["config_hash"]}
        manifest = {
            "config": self.cfg.echo(),
            "config_hash": self.hash,
            "overfit_dial": self.cfg.overfit_dial,
            "stage_seeds": {s: self.seed(s) for s in STAGES},
            "stages": stages,
            "provenance": provenance,
            "versions": {"python": platform.python_version(), "numpy": np.__version__, "pandas": pd.__version__,
                         "scipy": scipy.__version__, "scikit-learn": sklearn.__version__},
            "written": datetime.now(timezone.utc).isoformat(),
        }
        p = self.path("manifest.json")
        with open(p, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        return p

    def bundle(self) -> ReportBundle:
        artifacts = {s: list(self.store.record(s)["artifacts"]) for s in STAGES if self.store.record(s)}
        return ReportBundle(self.out, self.path("manifest.json"), artifacts)


def run_pipeline(cfg: RunConfig, target: str = "report") -> ReportBundle:
    return Pipeline(cfg).run(target)
