"""NumPy building blocks for the tagger and the attack network: LSTM cells and
(bi)directional runs with backprop, feed-forward softmax layers, a linear-chain
CRF, per-item SGD with clipping and dropout, and finite-difference checks."""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .errors import ConfigError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

LOSS_KINDS = ("softmax-ce", "crf-nll")
ACTIVATIONS = ("relu", "identity")
IMPOSSIBLE = -1e4


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out else 0.0
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# --- LSTM ---

def lstm_param_count(n: int, m: int) -> int:
    return 4 * (n * m + n * n + n)


class LstmParams:
    """Gates stacked in (i, f, o, c) order: W is 4n x m, U is 4n x n, b is 4n.
    W_i, U_f, b_c, ... are views into the stacked arrays."""

    def __init__(self, W: np.ndarray, U: np.ndarray, b: np.ndarray):
        n4 = b.shape[0]
        if n4 % 4 or W.shape[0] != n4 or U.shape != (n4, n4 // 4):
            raise ShapeError(f"inconsistent LSTM shapes W{W.shape} U{U.shape} b{b.shape}")
        self.W, self.U, self.b = W, U, b

    @classmethod
    def zeros(cls, n: int, m: int) -> "LstmParams":
        return cls(np.zeros((4 * n, m)), np.zeros((4 * n, n)), np.zeros(4 * n))

    @classmethod
    def init(cls, n: int, m: int, rng: np.random.Generator) -> "LstmParams":
        W = np.concatenate([glorot(rng, n, m) for _ in range(4)]) if m else np.zeros((4 * n, 0))
        U = np.concatenate([glorot(rng, n, n) for _ in range(4)])
        b = np.zeros(4 * n)
        b[n:2 * n] = 1.0  # forget gate
        return cls(W, U, b)

    @property
    def n(self) -> int:
        return self.b.shape[0] // 4

    @property
    def m(self) -> int:
        return self.W.shape[1]

    def _gate(self, arr: np.ndarray, k: int) -> np.ndarray:
        return arr[k * self.n:(k + 1) * self.n]

    W_i = property(lambda self: self._gate(self.W, 0))
    W_f = property(lambda self: self._gate(self.W, 1))
    W_o = property(lambda self: self._gate(self.W, 2))
    W_c = property(lambda self: self._gate(self.W, 3))
    U_i = property(lambda self: self._gate(self.U, 0))
    U_f = property(lambda self: self._gate(self.U, 1))
    U_o = property(lambda self: self._gate(self.U, 2))
    U_c = property(lambda self: self._gate(self.U, 3))
    b_i = property(lambda self: self._gate(self.b, 0))
    b_f = property(lambda self: self._gate(self.b, 1))
    b_o = property(lambda self: self._gate(self.b, 2))
    b_c = property(lambda self: self._gate(self.b, 3))

    def size(self) -> int:
        return self.W.size + self.U.size + self.b.size

    def tensors(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {prefix + "W": self.W, prefix + "U": self.U, prefix + "b": self.b}


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "LstmState":
        return cls(np.zeros(n), np.zeros(n))


def lstm_step(p: LstmParams, x: np.ndarray, s: LstmState) -> LstmState:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.m,) or s.h.shape != (p.n,) or s.c.shape != (p.n,):
        raise ShapeError(f"lstm_step expects x({p.m},) h,c({p.n},); got {x.shape} {s.h.shape} {s.c.shape}")
    n = p.n
    a = p.W @ x + p.U @ s.h + p.b
    i, f, o = expit(a[:n]), expit(a[n:2 * n]), expit(a[2 * n:3 * n])
    c_tilde = np.tanh(a[3 * n:])
    c = f * s.c + i * c_tilde
    return LstmState(o * np.tanh(c), c)


class LstmCache:
    __slots__ = ("xs", "I", "F", "O", "G", "C", "TC", "H")


def lstm_forward(p: LstmParams, xs: np.ndarray) -> Tuple[np.ndarray, LstmCache]:
    """Run from a zero state over the rows of xs (L x m); returns hidden states L x n."""
    xs = np.asarray(xs, dtype=np.float64)
    xs = xs.reshape(xs.shape[0], p.m)
    L, n = xs.shape[0], p.n
    cache = LstmCache()
    cache.xs = xs
    for name in ("I", "F", "O", "G", "C", "TC", "H"):
        setattr(cache, name, np.zeros((L, n)))
    wx = xs @ p.W.T + p.b
    h = np.zeros(n)
    c = np.zeros(n)
    for t in range(L):
        a = wx[t] + p.U @ h
        i, f, o = expit(a[:n]), expit(a[n:2 * n]), expit(a[2 * n:3 * n])
        g = np.tanh(a[3 * n:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.I[t], cache.F[t], cache.O[t], cache.G[t] = i, f, o, g
        cache.C[t], cache.TC[t], cache.H[t] = c, tc, h
    return cache.H, cache


def lstm_backward(p: LstmParams, cache: LstmCache, dH: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Gradients of W, U, b and of the inputs given dLoss/dh for every step."""
    L, n = dH.shape[0], p.n
    dA = np.zeros((L, 4 * n))
    dh_next = np.zeros(n)
    dc_next = np.zeros(n)
    I, F, O, G, C, TC = cache.I, cache.F, cache.O, cache.G, cache.C, cache.TC
    for t in range(L - 1, -1, -1):
        dh = dH[t] + dh_next
        do = dh * TC[t]
        dc = dc_next + dh * O[t] * (1.0 - TC[t] ** 2)
        c_prev = C[t - 1] if t > 0 else np.zeros(n)
        dA[t, :n] = dc * G[t] * I[t] * (1.0 - I[t])
        dA[t, n:2 * n] = dc * c_prev * F[t] * (1.0 - F[t])
        dA[t, 2 * n:3 * n] = do * O[t] * (1.0 - O[t])
        dA[t, 3 * n:] = dc * I[t] * (1.0 - G[t] ** 2)
        dh_next = p.U.T @ dA[t]
        dc_next = dc * F[t]
    grads = {
        "W": dA.T @ cache.xs,
        "U": dA[1:].T @ cache.H[:-1] if L > 1 else np.zeros_like(p.U),
        "b": dA.sum(axis=0),
    }
    return grads, dA @ p.W


def run_bilstm(fwd: LstmParams, bwd: LstmParams, xs) -> np.ndarray:
    out, _ = bilstm_forward(fwd, bwd, xs)
    return out


def bilstm_forward(fwd: LstmParams, bwd: LstmParams, xs) -> Tuple[np.ndarray, Tuple[LstmCache, LstmCache]]:
    if (fwd.n, fwd.m) != (bwd.n, bwd.m):
        raise ShapeError("forward and backward LSTMs must share (n, m)")
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[0] == 0:
        return np.zeros((0, 2 * fwd.n)), (None, None)
    xs = xs.reshape(xs.shape[0], fwd.m)
    hf, cf = lstm_forward(fwd, xs)
    hb, cb = lstm_forward(bwd, xs[::-1])
    return np.concatenate([hf, hb[::-1]], axis=1), (cf, cb)


def bilstm_backward(fwd: LstmParams, bwd: LstmParams, caches, dOut: np.ndarray):
    n = fwd.n
    gf, dxf = lstm_backward(fwd, caches[0], dOut[:, :n])
    gb, dxb = lstm_backward(bwd, caches[1], dOut[::-1, n:])
    return gf, gb, dxf + dxb[::-1]


# --- Feed-forward ---

class FfnParams:
    """Dense layers (W: out x in, b: out, activation); the last layer feeds a softmax."""

    def __init__(self, layers: Sequence[Tuple[np.ndarray, np.ndarray, str]]):
        prev = None
        for W, b, act in layers:
            if act not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {act!r}")
            if b.shape != (W.shape[0],) or (prev is not None and W.shape[1] != prev):
                raise ShapeError("FFN layer dimensions do not chain")
            prev = W.shape[0]
        self.layers = [(W, b, act) for W, b, act in layers]

    @classmethod
    def init(cls, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> "FfnParams":
        return cls([(glorot(rng, dims[k + 1], dims[k]), np.zeros(dims[k + 1]), activations[k])
                    for k in range(len(dims) - 1)])

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def tensors(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        for k, (W, b, _) in enumerate(self.layers):
            out[f"{prefix}{k}.W"] = W
            out[f"{prefix}{k}.b"] = b
        return out

    def activations(self) -> List[str]:
        return [act for _, _, act in self.layers]


def ffn_forward(p: FfnParams, X: np.ndarray) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
    """Logits for a row batch; the cache holds (input, pre-activation) per layer."""
    A = np.asarray(X, dtype=np.float64)
    if A.shape[-1] != p.in_dim:
        raise ShapeError(f"FFN expects input dim {p.in_dim}, got {A.shape[-1]}")
    cache = []
    for W, b, act in p.layers:
        Z = A @ W.T + b
        cache.append((A, Z))
        A = np.maximum(Z, 0.0) if act == "relu" else Z
    return A, cache


def ffn_backward(p: FfnParams, cache, dOut: np.ndarray, prefix: str = "") -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    grads = {}
    dA = dOut
    for k in range(len(p.layers) - 1, -1, -1):
        W, _, act = p.layers[k]
        A_in, Z = cache[k]
        dZ = dA * (Z > 0) if act == "relu" else dA
        grads[f"{prefix}{k}.W"] = dZ.T @ A_in if dZ.ndim == 2 else np.outer(dZ, A_in)
        grads[f"{prefix}{k}.b"] = dZ.sum(axis=0) if dZ.ndim == 2 else dZ
        dA = dZ @ W
    return grads, dA


def ffn_softmax(p: FfnParams, x: np.ndarray) -> np.ndarray:
    logits, _ = ffn_forward(p, x)
    return softmax(logits, axis=-1)


# --- Linear-chain CRF ---

class CrfParams:
    """(K+2) x (K+2) transition scores; row/col K is START, K+1 is STOP.
    transitions[i, j] scores moving from label i to label j."""

    def __init__(self, transitions: np.ndarray):
        k2 = transitions.shape[0]
        if transitions.shape != (k2, k2) or k2 < 3:
            raise ShapeError(f"bad transition matrix shape {transitions.shape}")
        self.transitions = transitions

    @classmethod
    def zeros(cls, K: int) -> "CrfParams":
        T = np.zeros((K + 2, K + 2))
        T[:, K] = IMPOSSIBLE       # nothing moves into START
        T[K + 1, :] = IMPOSSIBLE   # nothing leaves STOP
        T[K, K + 1] = IMPOSSIBLE   # no empty path
        return cls(T)

    @property
    def K(self) -> int:
        return self.transitions.shape[0] - 2

    def trainable_mask(self) -> np.ndarray:
        K = self.K
        mask = np.zeros_like(self.transitions, dtype=bool)
        mask[:K, :K] = True
        mask[K, :K] = True
        mask[:K, K + 1] = True
        return mask

    def parts(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        K = self.K
        T = self.transitions
        return T[:K, :K], T[K, :K], T[:K, K + 1]


def _check_emissions(crf: CrfParams, E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] == 0:
        raise ShapeError("CRF needs a non-empty L x K emission matrix")
    if E.shape[1] != crf.K:
        raise ShapeError(f"emissions have {E.shape[1]} labels, CRF has {crf.K}")
    return E


def crf_forward(crf: CrfParams, E: np.ndarray) -> Tuple[np.ndarray, float]:
    E = _check_emissions(crf, E)
    trans, start, stop = crf.parts()
    alpha = np.zeros_like(E)
    alpha[0] = start + E[0]
    for t in range(1, E.shape[0]):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + trans, axis=0) + E[t]
    return alpha, float(logsumexp(alpha[-1] + stop))


def crf_backward(crf: CrfParams, E: np.ndarray) -> np.ndarray:
    E = _check_emissions(crf, E)
    trans, _, stop = crf.parts()
    beta = np.zeros_like(E)
    beta[-1] = stop
    for t in range(E.shape[0] - 2, -1, -1):
        beta[t] = logsumexp(trans + (E[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def crf_log_partition(crf: CrfParams, E: np.ndarray) -> float:
    return crf_forward(crf, E)[1]


def crf_path_score(crf: CrfParams, E: np.ndarray, path: Sequence[int]) -> float:
    E = _check_emissions(crf, E)
    trans, start, stop = crf.parts()
    score = start[path[0]] + stop[path[-1]] + sum(E[t, y] for t, y in enumerate(path))
    score += sum(trans[path[t - 1], path[t]] for t in range(1, len(path)))
    return float(score)


def crf_marginals(crf: CrfParams, E: np.ndarray) -> np.ndarray:
    alpha, logz = crf_forward(crf, E)
    beta = crf_backward(crf, E)
    return np.exp(alpha + beta - logz)


def crf_viterbi(crf: CrfParams, E: np.ndarray) -> List[int]:
    E = _check_emissions(crf, E)
    trans, start, stop = crf.parts()
    L = E.shape[0]
    delta = start + E[0]
    back = np.zeros((L, crf.K), dtype=int)
    for t in range(1, L):
        scores = delta[:, None] + trans
        back[t] = np.argmax(scores, axis=0)  # first max -> lowest label index
        delta = scores[back[t], np.arange(crf.K)] + E[t]
    path = [int(np.argmax(delta + stop))]
    for t in range(L - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1]


def crf_nll(crf: CrfParams, E: np.ndarray, gold: Sequence[int]) -> Tuple[float, np.ndarray, np.ndarray]:
    """Negative log-likelihood of the gold path with gradients w.r.t. emissions and transitions."""
    E = _check_emissions(crf, E)
    K, L = crf.K, E.shape[0]
    trans, _, _ = crf.parts()
    alpha, logz = crf_forward(crf, E)
    beta = crf_backward(crf, E)
    marg = np.exp(alpha + beta - logz)
    onehot = np.zeros_like(E)
    onehot[np.arange(L), gold] = 1.0

    dT = np.zeros_like(crf.transitions)
    for t in range(1, L):
        xi = np.exp(alpha[t - 1][:, None] + trans + (E[t] + beta[t])[None, :] - logz)
        dT[:K, :K] += xi
        dT[gold[t - 1], gold[t]] -= 1.0
    dT[K, :K] = marg[0] - onehot[0]
    dT[:K, K + 1] = marg[-1] - onehot[-1]
    loss = logz - crf_path_score(crf, E, gold)
    return loss, marg - onehot, dT


# --- Training ---

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    dropout_rate: float = 0.5
    max_epochs: int = 95
    gradient_clip: float = 5.0
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.optimizer != "sgd":
            raise ConfigError(f"only SGD is supported, got {self.optimizer!r}")


class Trainable(Protocol):
    def parameters(self) -> Dict[str, np.ndarray]: ...

    def loss_and_grads(self, item: Any, loss_kind: str, dropout_rate: float,
                       rng: Optional[np.random.Generator]) -> Tuple[float, Dict[str, np.ndarray]]: ...


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most max_norm; returns the original norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    # inverted dropout: kept units are scaled so inference needs no rescaling
    return (rng.random(shape) >= rate) / (1.0 - rate)


def sgd_epoch(model: Trainable, items: Sequence[Any], cfg: TrainConfig, loss_kind: str,
              rng: np.random.Generator) -> float:
    """One pass of per-item SGD in a shuffled order; parameters are updated in place.
    Returns the mean loss over items."""
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}")
    if not items:
        return 0.0
    params = model.parameters()
    total = 0.0
    for idx in rng.permutation(len(items)):
        loss, grads = model.loss_and_grads(items[idx], loss_kind, cfg.dropout_rate, rng)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss on item {idx}", int(idx))
        clip_gradients(grads, cfg.gradient_clip)
        for name, g in grads.items():
            params[name] -= cfg.learning_rate * g
        total += loss
    return total / len(items)


def grad_check(model: Trainable, item: Any, loss_kind: str, epsilon: float = 1e-4) -> Tuple[float, Dict[str, float]]:
    """Max relative error between analytic and numerical gradients over every parameter.

    Numerical gradients use the 4-point central stencil
    (-f(x+2e) + 8f(x+e) - 8f(x-e) + f(x-2e)) / 12e. Returns the overall max and
    the max per parameter tensor."""
    _, grads = model.loss_and_grads(item, loss_kind, 0.0, None)
    params = model.parameters()

    def loss_at() -> float:
        return model.loss_and_grads(item, loss_kind, 0.0, None)[0]

    per_param = {}
    for name, arr in params.items():
        g_a = grads.get(name, np.zeros_like(arr))
        worst = 0.0
        flat = arr.reshape(-1)
        ga_flat = g_a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            vals = []
            for step in (2, 1, -1, -2):
                flat[k] = orig + step * epsilon
                vals.append(loss_at())
            flat[k] = orig
            g_n = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * epsilon)
            denom = max(abs(ga_flat[k]), abs(g_n), 1e-8)
            worst = max(worst, abs(ga_flat[k] - g_n) / denom)
        per_param[name] = worst
    overall = max(per_param.values()) if per_param else 0.0
    return overall, per_param


class FfnClassifier:
    """Softmax classifier over fixed feature vectors, trainable with sgd_epoch.
    Items are (feature vector, class index) pairs."""

    def __init__(self, params: FfnParams):
        self.params = params
        self._tensors = params.tensors("ffn.")

    @classmethod
    def init(cls, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> "FfnClassifier":
        return cls(FfnParams.init(dims, activations, rng))

    def parameters(self) -> Dict[str, np.ndarray]:
        return self._tensors

    def loss_and_grads(self, item, loss_kind, dropout_rate, rng):
        x, y = item
        logits, cache = ffn_forward(self.params, np.asarray(x, dtype=np.float64)[None, :])
        logp = logits[0] - logsumexp(logits[0])
        d = np.exp(logp)
        d[y] -= 1.0
        grads, _ = ffn_backward(self.params, cache, d[None, :], "ffn.")
        return float(-logp[y]), grads

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return ffn_softmax(self.params, np.atleast_2d(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)
