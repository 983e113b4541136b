"""
Small float64 neural-network kernel with hand-written backward passes.

Every forward function returns `(output, cache)`; the matching backward takes
the upstream gradient and that cache. Randomness always comes from an explicit
seed or np.random.Generator.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.errors import BadTargetError, ShapeMismatchError

logger = logging.getLogger(__name__)

DTYPE = np.float64
CHECKPOINT_FORMAT = "dnas-params"
CHECKPOINT_VERSION = 1


def _check_same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(f"{what}: {np.shape(a)} vs {np.shape(b)}")


def sigmoid(x):
    # split by sign to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ParamStore:
    """Named parameters with gradient and Adam moment buffers."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, value):
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def accumulate(self, grads):
        for name, g in grads.items():
            _check_same_shape(self.params[name], g, f"gradient for {name}")
            self.grads[name] += g

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        other = ParamStore()
        for name, value in self.params.items():
            other.add(name, value.copy())
            other.m[name] = self.m[name].copy()
            other.v[name] = self.v[name].copy()
        other.step = self.step
        return other

    def save(self, prefix):
        """
        Write `<prefix>.json` (index) and `<prefix>.bin` (tensors back to back,
        little-endian float64, in index order).
        """
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        tensors = []
        offset = 0
        with open(prefix.with_suffix(".bin"), "wb") as f:
            for name in self.names():
                arr = np.ascontiguousarray(self.params[name], dtype="<f8")
                f.write(arr.tobytes(order="C"))
                tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
                offset += arr.size * 8
        index = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "byte_order": "little",
            "dtype": "float64",
            "step": self.step,
            "tensors": tensors,
        }
        with open(prefix.with_suffix(".json"), "w", encoding="utf-8") as f:
            json.dump(index, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, prefix):
        prefix = Path(prefix)
        with open(prefix.with_suffix(".json"), encoding="utf-8") as f:
            index = json.load(f)
        if index.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{prefix}: not a {CHECKPOINT_FORMAT} checkpoint")
        blob = prefix.with_suffix(".bin").read_bytes()
        store = cls()
        for t in index["tensors"]:
            arr = np.frombuffer(blob, dtype="<f8", count=t["count"], offset=t["offset"])
            store.add(t["name"], arr.reshape(t["shape"]).astype(DTYPE))
        store.step = int(index.get("step", 0))
        return store


def dense_forward(x, W, b, activation="identity"):
    """Affine map followed by `relu` or `identity`."""
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[-1]:
        raise ShapeMismatchError(f"dense: x{x.shape} W{W.shape} b{b.shape}")
    pre = x @ W + b
    if activation == "relu":
        out = np.maximum(pre, 0.0)
    elif activation == "identity":
        out = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return out, (x, W, pre, activation)


def dense_backward(dout, cache):
    x, W, pre, activation = cache
    if activation == "relu":
        dout = dout * (pre > 0)
    dx = dout @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dx, dW, db


def lstm_step(x, h, c, Wx, Wh, b):
    """One LSTM step; gate order in the stacked weights is (input, forget, output, candidate)."""
    H = h.shape[-1]
    if x.shape[-1] != Wx.shape[0] or Wx.shape[1] != 4 * H or Wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeMismatchError(f"lstm: x{x.shape} h{h.shape} Wx{Wx.shape} Wh{Wh.shape} b{b.shape}")
    _check_same_shape(h, c, "lstm state")
    a = x @ Wx + h @ Wh + b
    i = sigmoid(a[:, :H])
    f = sigmoid(a[:, H:2 * H])
    o = sigmoid(a[:, 2 * H:3 * H])
    g = np.tanh(a[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, o, g, tc, Wx, Wh)


def lstm_step_backward(dh, dc, cache):
    """Returns dx, dh_prev, dc_prev, dWx, dWh, db."""
    x, h, c, i, f, o, g, tc, Wx, Wh = cache
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    di = dct * g
    dg = dct * i
    df = dct * c
    dc_prev = dct * f
    da = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
    dx = da @ Wx.T
    dh_prev = da @ Wh.T
    return dx, dh_prev, dc_prev, x.T @ da, h.T @ da, da.sum(axis=0)


def gaussian_kl(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over every element."""
    _check_same_shape(mu, logvar, "gaussian_kl")
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar))


def gaussian_kl_backward(mu, logvar):
    return mu.copy(), 0.5 * (np.exp(logvar) - 1.0)


def reparameterize(mu, logvar, seed):
    """z = mu + exp(logvar/2) * eps. Returns (z, eps); eps is treated as a constant."""
    _check_same_shape(mu, logvar, "reparameterize")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(np.shape(mu))
    return mu + np.exp(0.5 * logvar) * eps, eps


def reparameterize_backward(dz, logvar, eps):
    return dz.copy(), dz * eps * 0.5 * np.exp(0.5 * logvar)


def mse(pred, target):
    """Summed squared error and its gradient w.r.t. pred."""
    _check_same_shape(pred, target, "mse")
    diff = pred - target
    return float(np.sum(diff * diff)), 2.0 * diff


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, targets):
    """
    Mean negative log-softmax of `targets` over sequence positions.
    logits: (L, V) or (B, L, V); targets: (L,) or (B, L) integer ids.
    For a batch the per-sequence means are summed. Returns (loss, dlogits).
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatchError(f"softmax_xent: logits{logits.shape} targets{targets.shape}")
    vocab = logits.shape[-1]
    if np.any(targets < 0) or np.any(targets >= vocab):
        raise BadTargetError(f"target ids must lie in [0, {vocab})")
    positions = targets.shape[-1]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss = float(-picked.sum() / positions)
    dlogits = np.exp(log_probs)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    return loss, dlogits / positions


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update from store.grads; zeroes the gradients afterwards."""
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name, p in store.params.items():
        g = store.grads[name]
        store.m[name] *= beta1
        store.m[name] += (1.0 - beta1) * g
        store.v[name] *= beta2
        store.v[name] += (1.0 - beta2) * (g * g)
        m_hat = store.m[name] / bc1
        v_hat = store.v[name] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()
    return store


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float


def grad_check(loss_fn, store, eps=1e-4, floor=1e-3, names=None):
    """
    Compare analytic gradients with central finite differences, coordinate by coordinate.

    `loss_fn(store)` must return `(loss, grads)` deterministically. The relative
    error is |a - n| / max(|a|, |n|, floor), so gradients much smaller than
    `floor` are compared absolutely.
    """
    _, grads = loss_fn(store)
    grads = {k: np.array(v, dtype=DTYPE) for k, v in grads.items()}
    report = GradCheckReport(0.0, "", (), 0.0, 0.0)
    for name in names or store.names():
        p = store.params[name]
        analytic = grads.get(name, np.zeros_like(p))
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            lp, _ = loss_fn(store)
            p[idx] = orig - eps
            lm, _ = loss_fn(store)
            p[idx] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > report.max_rel_error or not report.worst_param:
                report = GradCheckReport(err, name, idx, a, numeric)
    logger.debug("grad_check worst %s%s rel err %.3g", report.worst_param, report.worst_index, report.max_rel_error)
    return report
