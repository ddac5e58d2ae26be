"""Three-layer de-identification tagger: frozen token embeddings + char-LSTM,
token BiLSTM with a softmax head, and an optional linear-chain CRF on top."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax
from sklearn.metrics import precision_recall_fscore_support

from .corpus import SURNAME, AnnotatedSentence, Corpus, Position, TagSet, corpus_vocabulary
from .embeddings import EmbeddingTable, synth_embedding
from .errors import ShapeError, TrainingError
from .neural import (CrfParams, FfnParams, LstmParams, TrainConfig, bilstm_backward, bilstm_forward,
                     crf_marginals, crf_nll, crf_viterbi, dropout_mask, ffn_backward, ffn_forward,
                     lstm_backward, lstm_forward, sgd_epoch)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    char_dim: int = 25
    char_hidden: int = 25
    char_bidirectional: bool = True
    token_hidden: int = 100
    use_crf: bool = False
    seed: int = 0

    @property
    def char_out(self) -> int:
        return self.char_hidden * (2 if self.char_bidirectional else 1)


def build_char_vocab(sentences: Sequence[AnnotatedSentence]) -> Dict[int, int]:
    """Code point -> row of the char embedding; row 0 is the unknown char."""
    cps = sorted({cp for s in sentences for t in s.tokens for cp in t.char_ids})
    return {cp: i + 1 for i, cp in enumerate(cps)}


class TaggerModel:
    def __init__(self, cfg: ModelConfig, embedding: EmbeddingTable, tagset: TagSet, char_vocab: Dict[int, int],
                 char_emb: np.ndarray, char_fwd: LstmParams, char_bwd: Optional[LstmParams],
                 token_fwd: LstmParams, token_bwd: LstmParams, head: FfnParams, crf: Optional[CrfParams]):
        K = len(tagset)
        m = embedding.dim + cfg.char_out
        if token_fwd.m != m or head.in_dim != 2 * token_fwd.n or head.out_dim != K:
            raise ShapeError("tagger dimension chain is inconsistent")
        if crf is not None and crf.K != K:
            raise ShapeError("CRF label count does not match the tag set")
        self.cfg = cfg
        self.embedding = embedding
        self.tagset = tagset
        self.char_vocab = dict(char_vocab)
        self.char_emb = char_emb
        self.char_fwd = char_fwd
        self.char_bwd = char_bwd
        self.token_fwd = token_fwd
        self.token_bwd = token_bwd
        self.head = head
        self.crf = crf

    @classmethod
    def init(cls, cfg: ModelConfig, embedding: EmbeddingTable, tagset: TagSet,
             char_vocab: Dict[int, int]) -> "TaggerModel":
        rng = np.random.default_rng(cfg.seed)
        K = len(tagset)
        char_emb = rng.uniform(-0.5, 0.5, size=(len(char_vocab) + 1, cfg.char_dim))
        char_fwd = LstmParams.init(cfg.char_hidden, cfg.char_dim, rng)
        char_bwd = LstmParams.init(cfg.char_hidden, cfg.char_dim, rng) if cfg.char_bidirectional else None
        m = embedding.dim + cfg.char_out
        token_fwd = LstmParams.init(cfg.token_hidden, m, rng)
        token_bwd = LstmParams.init(cfg.token_hidden, m, rng)
        head = FfnParams.init([2 * cfg.token_hidden, K], ["identity"], rng)
        crf = CrfParams.zeros(K) if cfg.use_crf else None
        return cls(cfg, embedding, tagset, char_vocab, char_emb, char_fwd, char_bwd,
                   token_fwd, token_bwd, head, crf)

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {"char_emb": self.char_emb}
        params.update(self.char_fwd.tensors("char_fwd."))
        if self.char_bwd is not None:
            params.update(self.char_bwd.tensors("char_bwd."))
        params.update(self.token_fwd.tensors("tok_fwd."))
        params.update(self.token_bwd.tensors("tok_bwd."))
        params.update(self.head.tensors("head."))
        if self.crf is not None:
            params["crf.T"] = self.crf.transitions
        return params

    def without_crf(self) -> "TaggerModel":
        """Same weights with the CRF layer switched off (shares arrays)."""
        cfg = ModelConfig(**{**self.cfg.__dict__, "use_crf": False})
        return TaggerModel(cfg, self.embedding, self.tagset, self.char_vocab, self.char_emb, self.char_fwd,
                           self.char_bwd, self.token_fwd, self.token_bwd, self.head, None)

    # --- forward / backward ---

    def _char_rows(self, char_ids: Sequence[int]) -> np.ndarray:
        return np.array([self.char_vocab.get(cp, 0) for cp in char_ids], dtype=int)

    def _char_features(self, sentence: AnnotatedSentence):
        feats = np.zeros((len(sentence), self.cfg.char_out))
        caches = []
        n = self.cfg.char_hidden
        for t, tok in enumerate(sentence.tokens):
            rows = self._char_rows(tok.char_ids)
            xc = self.char_emb[rows]
            hf, cf = lstm_forward(self.char_fwd, xc)
            feats[t, :n] = hf[-1]
            cb = None
            if self.char_bwd is not None:
                hb, cb = lstm_forward(self.char_bwd, xc[::-1])
                feats[t, n:] = hb[-1]
            caches.append((rows, cf, cb))
        return feats, caches

    def _inputs(self, sentence: AnnotatedSentence):
        words = np.array([self.embedding.vector(t.text) for t in sentence.tokens]).reshape(len(sentence), self.embedding.dim)
        chars, char_caches = self._char_features(sentence)
        return np.concatenate([words, chars], axis=1), char_caches

    def emissions(self, sentence: AnnotatedSentence) -> np.ndarray:
        """Pre-softmax head scores (L x K), dropout off."""
        if len(sentence) == 0:
            return np.zeros((0, len(self.tagset)))
        X, _ = self._inputs(sentence)
        H, _ = bilstm_forward(self.token_fwd, self.token_bwd, X)
        logits, _ = ffn_forward(self.head, H)
        return logits

    def loss_and_grads(self, sentence: AnnotatedSentence, loss_kind: str, dropout_rate: float,
                       rng: Optional[np.random.Generator]) -> Tuple[float, Dict[str, np.ndarray]]:
        if len(sentence) == 0:
            return 0.0, {}
        gold = np.asarray(sentence.gold_tags, dtype=int)
        X, char_caches = self._inputs(sentence)
        mask = dropout_mask(rng, X.shape, dropout_rate) if dropout_rate > 0 and rng is not None else None
        Xd = X * mask if mask is not None else X
        H, tok_caches = bilstm_forward(self.token_fwd, self.token_bwd, Xd)
        logits, head_cache = ffn_forward(self.head, H)

        grads: Dict[str, np.ndarray] = {}
        if loss_kind == "crf-nll":
            if self.crf is None:
                raise TrainingError("crf-nll loss needs a model with a CRF layer")
            loss, dlogits, dT = crf_nll(self.crf, logits, gold)
            grads["crf.T"] = dT
        else:
            L = len(gold)
            logp = logits - logsumexp(logits, axis=1, keepdims=True)
            loss = float(-np.sum(logp[np.arange(L), gold]))
            dlogits = np.exp(logp)
            dlogits[np.arange(L), gold] -= 1.0

        head_grads, dH = ffn_backward(self.head, head_cache, dlogits, "head.")
        grads.update(head_grads)
        gf, gb, dX = bilstm_backward(self.token_fwd, self.token_bwd, tok_caches, dH)
        grads.update({"tok_fwd." + k: v for k, v in gf.items()})
        grads.update({"tok_bwd." + k: v for k, v in gb.items()})
        if mask is not None:
            dX = dX * mask
        self._char_backward(dX[:, self.embedding.dim:], char_caches, grads)
        return float(loss), grads

    def _char_backward(self, dchars: np.ndarray, caches, grads: Dict[str, np.ndarray]) -> None:
        n = self.cfg.char_hidden
        d_emb = np.zeros_like(self.char_emb)
        acc = {"char_fwd." + k: np.zeros_like(v) for k, v in self.char_fwd.tensors().items()}
        if self.char_bwd is not None:
            acc.update({"char_bwd." + k: np.zeros_like(v) for k, v in self.char_bwd.tensors().items()})
        for t, (rows, cf, cb) in enumerate(caches):
            k = len(rows)
            dH = np.zeros((k, n))
            dH[-1] = dchars[t, :n]
            g, dx = lstm_backward(self.char_fwd, cf, dH)
            for name, v in g.items():
                acc["char_fwd." + name] += v
            np.add.at(d_emb, rows, dx)
            if cb is not None:
                dH = np.zeros((k, n))
                dH[-1] = dchars[t, n:]
                g, dx = lstm_backward(self.char_bwd, cb, dH)
                for name, v in g.items():
                    acc["char_bwd." + name] += v
                np.add.at(d_emb, rows[::-1], dx)
        grads.update(acc)
        grads["char_emb"] = d_emb


# --- inference ---

def predict_P(model: TaggerModel, sentence: AnnotatedSentence) -> np.ndarray:
    """Per-token label distributions at the softmax attachment point (CRF bypassed)."""
    logits = model.emissions(sentence)
    return softmax(logits, axis=1) if len(logits) else logits


def decode_tags(model: TaggerModel, sentence: AnnotatedSentence) -> List[int]:
    if len(sentence) == 0:
        return []
    logits = model.emissions(sentence)
    if model.crf is not None:
        return crf_viterbi(model.crf, logits)
    return [int(k) for k in np.argmax(logits, axis=1)]


# --- metrics ---

@dataclass
class Metrics:
    per_class: Dict[str, Dict[str, float]]
    precision: float
    recall: float
    f1: float
    undefined: Tuple[str, ...] = ()

    def as_dict(self) -> Dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "per_class": self.per_class, "undefined": list(self.undefined)}


def _category_ids(tags: Sequence[int], tagset: TagSet, cats: List[str]) -> List[int]:
    out = []
    for tag in tags:
        cat = tagset.category(tag)
        out.append(0 if cat is None else cats.index(cat) + 1)
    return out


def score_tags(gold: Sequence[int], pred: Sequence[int], tagset: TagSet) -> Metrics:
    """Token-level scores per entity category (B-/I- merged), micro-averaged over non-O."""
    cats = sorted({lab[2:] for lab in tagset.labels if lab != "O"})
    y_true = _category_ids(gold, tagset, cats)
    y_pred = _category_ids(pred, tagset, cats)
    labels = list(range(1, len(cats) + 1))
    p, r, f, s = precision_recall_fscore_support(y_true, y_pred, labels=labels, average=None, zero_division=0)
    mp, mr, mf, _ = precision_recall_fscore_support(y_true, y_pred, labels=labels, average="micro", zero_division=0)
    undefined = []
    y_true_a, y_pred_a = np.asarray(y_true), np.asarray(y_pred)
    per_class = {}
    for k, cat in enumerate(cats):
        per_class[cat] = {"precision": float(p[k]), "recall": float(r[k]), "f1": float(f[k]), "support": int(s[k])}
        if not np.any(y_pred_a == k + 1) or not np.any(y_true_a == k + 1):
            undefined.append(cat)
    return Metrics(per_class, float(mp), float(mr), float(mf), tuple(undefined))


def evaluate(model: TaggerModel, sentences: Sequence[AnnotatedSentence]) -> Metrics:
    gold, pred = [], []
    for sent in sentences:
        gold.extend(sent.gold_tags)
        pred.extend(decode_tags(model, sent))
    return score_tags(gold, pred, model.tagset)


# --- training ---

def train_tagger(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 embedding: Optional[EmbeddingTable] = None, embedding_dim: int = 100,
                 tag: str = "tagger") -> Tuple[TaggerModel, List[Dict]]:
    """Per-sentence SGD; keeps the parameters of the epoch with the best validation F1."""
    train = corpus.sentences("train")
    valid = corpus.sentences("valid")
    if not train:
        raise TrainingError("training split is empty")
    if embedding is None:
        embedding = synth_embedding(corpus_vocabulary(corpus), embedding_dim, model_cfg.seed)
    model = TaggerModel.init(model_cfg, embedding, corpus.tagset, build_char_vocab(train))
    loss_kind = "crf-nll" if model_cfg.use_crf else "softmax-ce"
    rng = np.random.default_rng(train_cfg.seed)

    history: List[Dict] = []
    best_f1, best_params = -1.0, None
    for epoch in range(1, train_cfg.max_epochs + 1):
        loss = sgd_epoch(model, train, train_cfg, loss_kind, rng)
        valid_f1 = evaluate(model, valid).f1 if valid else float("nan")
        history.append({"epoch": epoch, "loss": loss, "valid_f1": valid_f1})
        logger.info("%s epoch %d loss %.4f valid F1 %.4f", tag, epoch, loss, valid_f1)
        score = valid_f1 if valid else -loss
        if best_params is None or score > best_f1:
            best_f1 = score
            best_params = {k: v.copy() for k, v in model.parameters().items()}
    if best_params is not None:
        for k, v in model.parameters().items():
            v[...] = best_params[k]
    return model, history


# --- probability records ---

@dataclass
class ProbRecord:
    report_id: str
    sentence_index: int
    token_index: int
    P: np.ndarray
    gold_tag: int
    variant: str
    name_string: str
    score: float = field(default=float("nan"))


def extract_name_probs(model: TaggerModel, corpus: Corpus, positions: Optional[Mapping[str, Sequence[Position]]] = None,
                       variant: str = "ORIG", category: str = SURNAME, attachment: str = "softmax") -> List[ProbRecord]:
    """One record per name-token occurrence. The score is P at the token's gold tag
    (the B- tag for single-token names)."""
    if attachment == "crf" and model.crf is None:
        raise ValueError("CRF attachment point needs a model with a CRF layer")
    records = []
    for rep in corpus.reports:
        pos_list = positions.get(rep.id, ()) if positions is not None else rep.positions(category)
        cache: Dict[int, np.ndarray] = {}
        for si, ti in pos_list:
            if not (0 <= si < len(rep.sentences)) or not (0 <= ti < len(rep.sentences[si])):
                raise IndexError(f"position {(si, ti)} out of range in report {rep.id}")
            if si not in cache:
                sent = rep.sentences[si]
                cache[si] = predict_P(model, sent) if attachment == "softmax" else crf_marginals(model.crf, model.emissions(sent))
            P = cache[si][ti]
            gold = rep.sentences[si].gold_tags[ti]
            records.append(ProbRecord(rep.id, si, ti, P.copy(), gold, str(variant), rep.surface((si, ti)), float(P[gold])))
    return records


def records_to_frame(records: Sequence[ProbRecord], tagset: TagSet) -> pd.DataFrame:
    rows = []
    for r in records:
        row = {"report_id": r.report_id, "sentence": r.sentence_index, "token": r.token_index,
               "variant": r.variant, "name": r.name_string, "gold": tagset.labels[r.gold_tag], "score": r.score}
        row.update({f"P[{lab}]": float(v) for lab, v in zip(tagset.labels, r.P)})
        rows.append(row)
    cols = ["report_id", "sentence", "token", "variant", "name", "gold", "score"] + [f"P[{lab}]" for lab in tagset.labels]
    return pd.DataFrame(rows, columns=cols)


def frame_to_records(df: pd.DataFrame, tagset: TagSet) -> List[ProbRecord]:
    P_all = df[[f"P[{lab}]" for lab in tagset.labels]].to_numpy(dtype=np.float64)
    cols = zip(df["report_id"], df["sentence"], df["token"], df["variant"], df["name"], df["gold"], df["score"])
    return [ProbRecord(str(rid), int(si), int(ti), P_all[k], tagset.index(gold), str(var), str(name), float(score))
            for k, (rid, si, ti, var, name, gold, score) in enumerate(cols)]


def write_records_csv(path: str, records: Sequence[ProbRecord], tagset: TagSet) -> None:
    records_to_frame(records, tagset).to_csv(path, index=False, float_format="%.17g")


def read_records_csv(path: str, tagset: TagSet) -> List[ProbRecord]:
    df = pd.read_csv(path, keep_default_na=False, dtype={"report_id": str, "name": str, "variant": str, "gold": str})
    return frame_to_records(df, tagset)
