"""Trainable sequence-model substrate in plain numpy.

Everything here is float64 with hand-written backward passes: LSTM cells
and stacks (uni/bidirectional), linear + softmax output, cross-entropy,
Adam with bias correction, early stopping, and a central-finite-difference
gradient checker used to validate the backprop code.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

INIT_SCALE = 0.08
GRAD_CLIP_NORM = 5.0
CE_EPS = 1e-12


class NetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Deterministic RNG plumbing: one root seed, children derived per component
# ---------------------------------------------------------------------------

def _key_int(key) -> int:
    if isinstance(key, int):
        return key
    digest = hashlib.blake2b(str(key).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def child_rng(root_seed: int, *keys) -> np.random.Generator:
    """Derive an independent generator from a root seed and a key path."""
    seq = np.random.SeedSequence([root_seed] + [_key_int(k) for k in keys])
    return np.random.Generator(np.random.PCG64(seq))


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named parameter arrays plus Adam moments and a step counter."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, array: np.ndarray) -> np.ndarray:
        arr = np.asarray(array, dtype=np.float64)
        if name in self.params:
            # re-attaching a layer to a loaded checkpoint keeps stored values
            if self.params[name].shape != arr.shape:
                raise NetError(f"shape mismatch re-adding {name!r}")
            return self.params[name]
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(p) for k, p in self.params.items()}

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise NetError(f"non-finite values in parameter {name!r}")

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: p.copy() for k, p in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            if self.params[k].shape != p.shape:
                raise NetError(f"shape mismatch loading {k!r}")
            self.params[k][...] = p


def init_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_step(x, h_prev, c_prev, Wx, Wh, b):
    """One LSTM recurrence step; gate order is input, forget, cell, output."""
    H = Wh.shape[0]
    if x.shape[-1] != Wx.shape[0] or h_prev.shape[-1] != H:
        raise NetError(
            f"lstm_step dimension mismatch: x {x.shape}, h {h_prev.shape}, "
            f"Wx {Wx.shape}, Wh {Wh.shape}"
        )
    a = x @ Wx + h_prev @ Wh + b
    i = _sigmoid(a[..., :H])
    f = _sigmoid(a[..., H:2 * H])
    g = np.tanh(a[..., 2 * H:3 * H])
    o = _sigmoid(a[..., 3 * H:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


class LstmLayer:
    """Single-direction LSTM over a (T, B, D) batch with optional length masks."""

    def __init__(self, store: ParameterStore, name: str, in_dim: int,
                 hidden: int, rng: np.random.Generator):
        self.name = name
        self.in_dim = in_dim
        self.hidden = hidden
        store.add(f"{name}.Wx", init_uniform(rng, (in_dim, 4 * hidden)))
        store.add(f"{name}.Wh", init_uniform(rng, (hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget-gate bias
        store.add(f"{name}.b", b)
        self.store = store

    def _weights(self):
        s = self.store
        return s[f"{self.name}.Wx"], s[f"{self.name}.Wh"], s[f"{self.name}.b"]

    def forward(self, X: np.ndarray, mask: np.ndarray | None = None):
        """Run the full sequence.

        mask, if given, is (T, B) with 1 at valid steps; masked steps carry
        state through unchanged so h[-1] is the last valid state.
        Returns (H_out (T,B,H), cache).
        """
        Wx, Wh, b = self._weights()
        T, B, D = X.shape
        H = self.hidden
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        cache = {"X": X, "mask": mask, "i": [], "f": [], "g": [], "o": [],
                 "tanh_c": [], "h_prev": [], "c_prev": []}
        Hs = np.empty((T, B, H))
        for t in range(T):
            a = X[t] @ Wx + h @ Wh + b
            i = _sigmoid(a[:, :H])
            f = _sigmoid(a[:, H:2 * H])
            g = np.tanh(a[:, 2 * H:3 * H])
            o = _sigmoid(a[:, 3 * H:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            cache["h_prev"].append(h)
            cache["c_prev"].append(c)
            for k, v in zip(("i", "f", "g", "o", "tanh_c"),
                            (i, f, g, o, tc)):
                cache[k].append(v)
            if mask is not None:
                m = mask[t][:, None]
                h = m * h_new + (1.0 - m) * h
                c = m * c_new + (1.0 - m) * c
            else:
                h, c = h_new, c_new
            Hs[t] = h
        return Hs, cache

    def backward(self, dH: np.ndarray, cache,
                 grads: dict[str, np.ndarray]) -> np.ndarray:
        """Backprop through the sequence; dH is (T,B,H). Returns dX."""
        Wx, Wh, b = self._weights()
        X, mask = cache["X"], cache["mask"]
        T, B, D = X.shape
        H = self.hidden
        dWx = grads[f"{self.name}.Wx"]
        dWh = grads[f"{self.name}.Wh"]
        db = grads[f"{self.name}.b"]
        dX = np.zeros_like(X)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            i, f, g, o, tc = (cache[k][t]
                              for k in ("i", "f", "g", "o", "tanh_c"))
            h_prev, c_prev = cache["h_prev"][t], cache["c_prev"][t]
            dh_t = dH[t] + dh_next
            dc_t = dc_next
            if mask is not None:
                m = mask[t][:, None]
                dh_new = dh_t * m
                dh_carry = dh_t * (1.0 - m)
                dc_new = dc_t * m
                dc_carry = dc_t * (1.0 - m)
            else:
                dh_new, dh_carry = dh_t, 0.0
                dc_new, dc_carry = dc_t, 0.0
            do = dh_new * tc
            dc = dc_new + dh_new * o * (1.0 - tc * tc)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            da = np.concatenate(
                [di * i * (1.0 - i),
                 df * f * (1.0 - f),
                 dg * (1.0 - g * g),
                 do * o * (1.0 - o)], axis=1)
            dWx += X[t].T @ da
            dWh += h_prev.T @ da
            db += da.sum(axis=0)
            dX[t] = da @ Wx.T
            dh_next = da @ Wh.T + dh_carry
            dc_next = dc * f + dc_carry
        return dX


def reverse_padded(X: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Reverse each sequence within its own length, leaving padding in place."""
    Y = X.copy()
    for b, L in enumerate(lengths):
        Y[:L, b] = X[L - 1::-1, b]
    return Y


class BiLstmEncoder:
    """One forward and one reversed LSTM; exposes concatenated final states."""

    def __init__(self, store: ParameterStore, name: str, in_dim: int,
                 hidden: int, rng: np.random.Generator):
        self.fwd = LstmLayer(store, f"{name}.fwd", in_dim, hidden, rng)
        self.bwd = LstmLayer(store, f"{name}.bwd", in_dim, hidden, rng)
        self.hidden = hidden
        self.out_dim = 2 * hidden

    def forward(self, X: np.ndarray, lengths: np.ndarray):
        T, B, _ = X.shape
        mask = (np.arange(T)[:, None] < lengths[None, :]).astype(float)
        Hf, cf = self.fwd.forward(X, mask)
        Xr = reverse_padded(X, lengths)
        Hb, cb = self.bwd.forward(Xr, mask)
        enc = np.concatenate([Hf[-1], Hb[-1]], axis=1)
        return enc, (cf, cb, lengths, T)

    def backward(self, d_enc: np.ndarray, cache,
                 grads: dict[str, np.ndarray]) -> np.ndarray:
        cf, cb, lengths, T = cache
        B = d_enc.shape[0]
        H = self.hidden
        dHf = np.zeros((T, B, H))
        dHf[-1] = d_enc[:, :H]
        dHb = np.zeros((T, B, H))
        dHb[-1] = d_enc[:, H:]
        dX = self.fwd.backward(dHf, cf, grads)
        dXr = self.bwd.backward(dHb, cb, grads)
        dX += reverse_padded(dXr, lengths)
        return dX


class Linear:
    def __init__(self, store: ParameterStore, name: str, in_dim: int,
                 out_dim: int, rng: np.random.Generator):
        self.name = name
        store.add(f"{name}.W", init_uniform(rng, (in_dim, out_dim)))
        store.add(f"{name}.b", np.zeros(out_dim))
        self.store = store

    def forward(self, X: np.ndarray):
        W, b = self.store[f"{self.name}.W"], self.store[f"{self.name}.b"]
        return X @ W + b, X

    def backward(self, dY: np.ndarray, X: np.ndarray,
                 grads: dict[str, np.ndarray]) -> np.ndarray:
        W = self.store[f"{self.name}.W"]
        flatX = X.reshape(-1, X.shape[-1])
        flatdY = dY.reshape(-1, dY.shape[-1])
        grads[f"{self.name}.W"] += flatX.T @ flatdY
        grads[f"{self.name}.b"] += flatdY.sum(axis=0)
        return dY @ W.T


# ---------------------------------------------------------------------------
# Dropout (inverted: scaled at train time, identity at inference)
# ---------------------------------------------------------------------------

def dropout_forward(X: np.ndarray, rate: float, rng: np.random.Generator,
                    train: bool):
    if not train or rate == 0.0:
        return X, None
    keep = 1.0 - rate
    mask = (rng.random(X.shape) < keep) / keep
    return X * mask, mask


def dropout_backward(dY: np.ndarray, mask) -> np.ndarray:
    return dY if mask is None else dY * mask


# ---------------------------------------------------------------------------
# Softmax / cross-entropy
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_masked(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax with masked entries forced to exactly zero probability."""
    mask = np.asarray(mask)
    if not np.any(mask):
        raise NetError("softmax_masked: mask excludes every entry")
    neg = np.where(mask > 0, 0.0, -np.inf)
    with np.errstate(invalid="ignore"):
        z = logits + neg
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask > 0, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, target_id: int) -> float:
    """Negative log likelihood of one target under a distribution."""
    p = probs[target_id]
    if p <= 0.0:
        log.warning("cross_entropy: zero probability for target %d, "
                    "clamping", target_id)
        p = CE_EPS
    return float(-np.log(p))


def softmax_xent_batch(logits: np.ndarray, targets: np.ndarray,
                       weights: np.ndarray):
    """Weighted cross-entropy over (N, V) logits.

    Returns (total loss, dlogits, total weight).  Weight 0 positions
    (padding) contribute nothing.
    """
    probs = softmax(logits)
    N = logits.shape[0]
    p_t = np.clip(probs[np.arange(N), targets], CE_EPS, None)
    loss = float(-(weights * np.log(p_t)).sum())
    dlogits = probs * weights[:, None]
    dlogits[np.arange(N), targets] -= weights
    return loss, dlogits, float(weights.sum())


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def clip_global_norm(grads: dict[str, np.ndarray],
                     max_norm: float = GRAD_CLIP_NORM) -> float:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_update(store: ParameterStore, grads: dict[str, np.ndarray],
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8,
                frozen: frozenset[str] = frozenset()) -> None:
    """Adam with bias correction.  Raises before mutating on bad gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NetError(f"non-finite gradient for {name!r}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        if name in frozen:
            continue
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class EarlyStopper:
    """Stop after `patience` epochs without improvement; lower is better."""

    patience: int
    best_metric: float = np.inf
    epochs_since_best: int = 0
    best_params: dict = field(default_factory=dict, repr=False)

    def update(self, metric: float, store: ParameterStore) -> bool:
        if metric < self.best_metric:
            self.best_metric = metric
            self.epochs_since_best = 0
            self.best_params = store.copy_params()
            return True
        self.epochs_since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_best > self.patience

    def restore_best(self, store: ParameterStore) -> None:
        if self.best_params:
            store.load_params(self.best_params)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, store: ParameterStore,
               analytic: dict[str, np.ndarray], h: float = 1e-4,
               max_entries_per_param: int = 64,
               rng: np.random.Generator | None = None,
               param_names=None) -> dict:
    """Central finite differences against analytic gradients.

    loss_fn() re-evaluates the loss at the store's current parameters.
    Returns a report with per-parameter and overall max relative error.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    report = {"per_param": {}, "max_rel_error": 0.0}
    for name, p in store.params.items():
        if param_names is not None and name not in param_names:
            continue
        flat = p.reshape(-1)
        g_flat = analytic[name].reshape(-1)
        n = flat.size
        idx = (np.arange(n) if n <= max_entries_per_param
               else rng.choice(n, size=max_entries_per_param, replace=False))
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_fn()
            flat[j] = orig - h
            lm = loss_fn()
            flat[j] = orig
            num = (lp - lm) / (2.0 * h)
            # absolute floor keeps FD roundoff on near-zero gradients from
            # registering as relative error
            denom = max(1e-6, abs(num) + abs(g_flat[j]))
            worst = max(worst, abs(num - g_flat[j]) / denom)
        report["per_param"][name] = worst
        report["max_rel_error"] = max(report["max_rel_error"], worst)
    return report


# ---------------------------------------------------------------------------
# Checkpoint container (deterministic bytes: json header + raw arrays)
# ---------------------------------------------------------------------------

_MAGIC = b"ACPK1\n"


def stable_history(history: list[dict]) -> list[dict]:
    """Training history without wall-clock fields; artifacts written from it
    stay byte-identical across reruns with the same seed."""
    return [{k: v for k, v in entry.items() if k != "seconds"}
            for entry in history]


def save_checkpoint(path, store: ParameterStore, meta: dict) -> None:
    names = sorted(store.params)
    entries = []
    blobs = []
    for kind, source in (("p", store.params), ("m", store.m),
                         ("v", store.v)):
        for name in names:
            arr = np.ascontiguousarray(source[name], dtype="<f8")
            entries.append({"kind": kind, "name": name,
                            "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    header = json.dumps(
        {"meta": meta, "step": store.step, "entries": entries},
        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise NetError(f"{path}: not a checkpoint file")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen))
        store = ParameterStore()
        store.step = header["step"]
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8")
            arr = arr.reshape(shape).copy()
            if entry["kind"] == "p":
                store.add(entry["name"], arr)
            elif entry["kind"] == "m":
                store.m[entry["name"]] = arr
            else:
                store.v[entry["name"]] = arr
    return store, header["meta"]
