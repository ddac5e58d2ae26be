import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import yaml

from .corpus import SynthConfig
from .errors import ConfigError
from .neural import TrainConfig
from .seeding import derive_seed
from .tagger import ModelConfig

CRF_MODES = ("on", "off", "both")


def load_config(path: str = "config.yaml") -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r") as f:
            cfg = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")

    # Basic env overrides (optional)
    cfg.setdefault("runtime", {})
    try:
        cfg["runtime"]["seed"] = int(os.getenv("DEID_AUDIT_SEED", cfg["runtime"].get("seed", 0)))
    except ValueError as e:
        raise ConfigError(f"DEID_AUDIT_SEED must be an integer: {e}") from e
    cfg["runtime"]["out_dir"] = os.getenv("DEID_AUDIT_OUT", cfg["runtime"].get("out_dir", "out"))
    cfg["runtime"]["log_level"] = os.getenv("DEID_AUDIT_LOG_LEVEL", cfg["runtime"].get("log_level", "INFO"))
    return cfg


def config_hash(cfg: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class DictionaryPaths:
    surnames: Optional[str] = None
    given_male: Optional[str] = None
    given_female: Optional[str] = None
    # sizes of the generated dictionary when no files are given
    synth_surnames: int = 1500
    synth_male: int = 300
    synth_female: int = 300

    @property
    def from_files(self) -> bool:
        return self.surnames is not None


@dataclass(frozen=True)
class AttackConfig:
    num_shadow: int = 12
    shadow_epochs: int = 30
    brute_force_dict_size: int = 1000
    repetition_min: int = 6
    reports_k: int = 3
    hidden: int = 64
    epochs: int = 100
    learning_rate: float = 0.01
    aggregation: str = "mean"
    consensus_q: float = 0.1
    attachment: str = "softmax"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    log_level: str
    corpus_path: Optional[str]
    synth: SynthConfig
    dictionaries: DictionaryPaths
    embeddings_path: Optional[str]
    embedding_dim: int
    model: ModelConfig
    train: TrainConfig
    # epochs per model; the no-CRF model stops earlier by default
    epochs_crf: int
    epochs_no_crf: int
    crf: str
    overfit_dial: Optional[int]
    attack: AttackConfig
    tail_cut: float = 0.9
    hist_bins: int = 20
    raw: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def crf_settings(self) -> Tuple[bool, ...]:
        return {"on": (True,), "off": (False,), "both": (False, True)}[self.crf]

    @classmethod
    def from_dict(cls, cfg: Dict[str, Any]) -> "RunConfig":
        rt = cfg.get("runtime", {}) or {}
        corpus = cfg.get("corpus", {}) or {}
        dicts = cfg.get("dictionaries", {}) or {}
        emb = cfg.get("embeddings", {}) or {}
        model = cfg.get("model", {}) or {}
        train = cfg.get("train", {}) or {}
        attack = cfg.get("attack", {}) or {}
        stats = cfg.get("stats", {}) or {}
        try:
            synth = SynthConfig(
                n_reports=int(corpus.get("n_reports", 60)),
                names_per_report=int(corpus.get("names_per_report", 3)),
                min_repetition_quota=int(corpus.get("min_repetition_quota", 3)),
                split_ratios=tuple(float(r) for r in corpus.get("split_ratios", (0.7, 0.15, 0.15))),
                n_templates=int(corpus.get("n_templates", 24)),
                seed=int(corpus.get("seed", derive_seed(int(rt.get("seed", 0)), "corpus"))),
            )
            dictionaries = DictionaryPaths(
                surnames=dicts.get("surnames"), given_male=dicts.get("given_male"),
                given_female=dicts.get("given_female"),
                synth_surnames=int(dicts.get("synth_surnames", 1500)),
                synth_male=int(dicts.get("synth_male", 300)),
                synth_female=int(dicts.get("synth_female", 300)),
            )
            model_cfg = ModelConfig(
                char_dim=int(model.get("char_dim", 25)), char_hidden=int(model.get("char_hidden", 25)),
                char_bidirectional=bool(model.get("char_bidirectional", True)),
                token_hidden=int(model.get("token_hidden", 100)),
            )
            lr = float(train.get("learning_rate", 0.01))
            if lr <= 0:
                raise ConfigError("train.learning_rate must be > 0")
            train_cfg = TrainConfig(
                learning_rate=lr, dropout_rate=float(train.get("dropout_rate", 0.5)),
                max_epochs=int(train.get("epochs_crf", 95)), gradient_clip=float(train.get("gradient_clip", 5.0)),
                optimizer=str(train.get("optimizer", "sgd")),
            )
            attack_cfg = AttackConfig(**{k: type(getattr(AttackConfig, k))(v) for k, v in attack.items()
                                         if hasattr(AttackConfig, k)})
            overfit = rt.get("overfit_dial")
            run = cls(
                seed=int(rt.get("seed", 0)), out_dir=str(rt.get("out_dir", "out")),
                log_level=str(rt.get("log_level", "INFO")).upper(),
                corpus_path=corpus.get("path"), synth=synth, dictionaries=dictionaries,
                embeddings_path=emb.get("path"), embedding_dim=int(emb.get("dim", 100)),
                model=model_cfg, train=train_cfg,
                epochs_crf=int(train.get("epochs_crf", 95)), epochs_no_crf=int(train.get("epochs_no_crf", 88)),
                crf=str(rt.get("crf", "both")), overfit_dial=None if overfit is None else int(overfit),
                attack=attack_cfg, tail_cut=float(stats.get("tail_cut", 0.9)),
                hist_bins=int(stats.get("bins", 20)), raw=cfg,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid configuration value: {e}") from e
        run.validate()
        return run

    def validate(self) -> None:
        for label, path in (("corpus.path", self.corpus_path), ("embeddings.path", self.embeddings_path),
                            ("dictionaries.surnames", self.dictionaries.surnames),
                            ("dictionaries.given_male", self.dictionaries.given_male),
                            ("dictionaries.given_female", self.dictionaries.given_female)):
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"{label} does not exist: {path}")
        d = self.dictionaries
        given_paths = (d.surnames, d.given_male, d.given_female)
        if any(p is not None for p in given_paths) and any(p is None for p in given_paths):
            raise ConfigError("dictionaries need all of surnames, given_male and given_female")
        if self.crf not in CRF_MODES:
            raise ConfigError(f"runtime.crf must be one of {CRF_MODES}")
        if self.attack.num_shadow < 4:
            raise ConfigError("attack.num_shadow must be >= 4")
        if self.attack.aggregation not in ("mean", "max"):
            raise ConfigError("attack.aggregation must be mean or max")
        if self.attack.attachment not in ("softmax", "crf"):
            raise ConfigError("attack.attachment must be softmax or crf")
        if self.attack.attachment == "crf" and self.crf == "off":
            raise ConfigError("the crf attachment point needs a CRF model")
        if not 0 < self.attack.consensus_q <= 1:
            raise ConfigError("attack.consensus_q must be in (0, 1]")
        if self.overfit_dial is not None and self.overfit_dial < 1:
            raise ConfigError("overfit dial must keep at least one training report")
        if self.epochs_crf < 0 or self.epochs_no_crf < 0:
            raise ConfigError("epochs must be >= 0")

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None, crf: Optional[str] = None,
                       overfit_dial: Optional[int] = None) -> "RunConfig":
        """Re-validated copy with CLI flags applied on top of the file values."""
        cfg = json.loads(json.dumps(self.raw, default=str))
        rt = cfg.setdefault("runtime", {})
        if seed is not None:
            rt["seed"] = seed
            cfg.get("corpus", {}).pop("seed", None)
        if out_dir is not None:
            rt["out_dir"] = out_dir
        if crf is not None:
            rt["crf"] = crf
        if overfit_dial is not None:
            rt["overfit_dial"] = overfit_dial
        return RunConfig.from_dict(cfg)

    def echo(self) -> Dict[str, Any]:
        return {
            "seed": self.seed, "corpus_path": self.corpus_path, "synth": asdict(self.synth),
            "dictionaries": asdict(self.dictionaries), "embeddings_path": self.embeddings_path,
            "embedding_dim": self.embedding_dim, "model": asdict(self.model), "train": asdict(self.train),
            "epochs_crf": self.epochs_crf, "epochs_no_crf": self.epochs_no_crf, "crf": self.crf,
            "overfit_dial": self.overfit_dial, "attack": asdict(self.attack), "tail_cut": self.tail_cut,
            "hist_bins": self.hist_bins,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.echo())
