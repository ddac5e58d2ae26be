"""Versioned .npz container for tagger and attack-network parameters."""
import json
import zipfile
from typing import Dict, Optional, Tuple

import numpy as np

from .corpus import TagSet
from .embeddings import EmbeddingTable
from .errors import ModelFormatError
from .neural import CrfParams, FfnParams, LstmParams
from .tagger import ModelConfig, TaggerModel

FORMAT = "deid-audit-model"
VERSION = 1


def _write(path: str, meta: Dict, tensors: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)), **tensors)


def _read(path: str, kind: str) -> Tuple[Dict, Dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            tensors = {k: data[k] for k in data.files if k != "__meta__"}
    except (zipfile.BadZipFile, EOFError, OSError, ValueError, KeyError) as e:
        raise ModelFormatError(f"corrupt model file {path}: {e}") from e
    if meta.get("format") != FORMAT or meta.get("kind") != kind:
        raise ModelFormatError(f"{path} is not a {kind} container")
    if meta.get("version") != VERSION:
        raise ModelFormatError(f"{path} has version {meta.get('version')}, expected {VERSION}")
    missing = [name for name in meta.get("tensors", []) if name not in tensors]
    if missing:
        raise ModelFormatError(f"{path} is missing tensors {missing}")
    return meta, tensors


def save_model(path: str, model: TaggerModel, extra: Optional[Dict] = None) -> None:
    tensors = {k: np.ascontiguousarray(v) for k, v in model.parameters().items()}
    tensors["embedding"] = np.ascontiguousarray(model.embedding.matrix)
    meta = {
        "format": FORMAT,
        "kind": "tagger",
        "version": VERSION,
        "config": model.cfg.__dict__,
        "tagset": list(model.tagset.labels),
        "char_vocab": sorted(model.char_vocab.items()),
        "embedding_dim": model.embedding.dim,
        "embedding_words": model.embedding.words,
        "tensors": sorted(tensors),
        "extra": extra or {},
    }
    _write(path, meta, tensors)


def _lstm(t: Dict[str, np.ndarray], prefix: str) -> LstmParams:
    return LstmParams(t[prefix + "W"].copy(), t[prefix + "U"].copy(), t[prefix + "b"].copy())


def _ffn(t: Dict[str, np.ndarray], prefix: str, activations) -> FfnParams:
    return FfnParams([(t[f"{prefix}{k}.W"].copy(), t[f"{prefix}{k}.b"].copy(), act)
                      for k, act in enumerate(activations)])


def load_model(path: str) -> Tuple[TaggerModel, Dict]:
    meta, t = _read(path, "tagger")
    cfg = ModelConfig(**meta["config"])
    words = meta["embedding_words"]
    embedding = EmbeddingTable(dict(zip(words, t["embedding"])), meta["embedding_dim"])
    model = TaggerModel(
        cfg, embedding, TagSet(tuple(meta["tagset"])), {int(cp): int(i) for cp, i in meta["char_vocab"]},
        t["char_emb"].copy(), _lstm(t, "char_fwd."),
        _lstm(t, "char_bwd.") if cfg.char_bidirectional else None,
        _lstm(t, "tok_fwd."), _lstm(t, "tok_bwd."), _ffn(t, "head.", ["identity"]),
        CrfParams(t["crf.T"].copy()) if cfg.use_crf else None,
    )
    return model, meta.get("extra", {})


def save_ffn(path: str, params: FfnParams, extra: Optional[Dict] = None) -> None:
    tensors = {k: np.ascontiguousarray(v) for k, v in params.tensors("ffn.").items()}
    meta = {"format": FORMAT, "kind": "ffn", "version": VERSION, "activations": params.activations(),
            "tensors": sorted(tensors), "extra": extra or {}}
    _write(path, meta, tensors)


def load_ffn(path: str) -> Tuple[FfnParams, Dict]:
    meta, t = _read(path, "ffn")
    return _ffn(t, "ffn.", meta["activations"]), meta.get("extra", {})
