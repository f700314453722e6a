"""Dense tensor math with hand-derived backward passes.

Tensors are plain numpy arrays. Parameters are stored as float32 and every
forward pass computes in float64, so gradient checks and oracle comparisons
stay tight while model files keep a compact 32-bit layout.

Each op is a class with a static ``forward`` returning ``(out, cache)`` and a
static ``backward`` mapping the output gradient to one gradient per input
(``None`` for non-differentiable inputs such as masks and indices).  A
:class:`Tape` records op applications and replays them in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COMPUTE = np.float64
STORAGE = np.float32
NEG_INF = -1e30


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# plain functional API
# ---------------------------------------------------------------------------


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax(x, temperature: float = 1.0, axis: int = -1):
    x = np.asarray(x, dtype=COMPUTE)
    if x.size == 0:
        raise ValueError("softmax of an empty tensor")
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = x / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def masked_softmax(scores, mask):
    """Softmax over the last axis ignoring positions where ``mask`` is False.

    Rows with no valid position come back as all zeros.
    """
    s = np.where(mask, scores, NEG_INF)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s) * mask
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


def sigmoid(x):
    x = np.asarray(x, dtype=COMPUTE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logsumexp(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def mhsa_forward(seq, params: dict, heads: int, mask=None):
    """Multi-head self-attention over a ``[T, d]`` (or ``[B, T, d]``) sequence.

    ``params`` holds ``Wq, bq, Wk, bk, Wv, bv, Wo, bo``.
    """
    seq = np.asarray(seq, dtype=COMPUTE)
    squeeze = seq.ndim == 2
    x = seq[None] if squeeze else seq
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    elif squeeze:
        mask = np.asarray(mask)[None]
    out, _ = MHSA.forward(x, mask, *(params[k] for k in MHSA_KEYS), heads=heads)
    return out[0] if squeeze else out


def target_attention_forward(query, keys, values, params: dict):
    """Single-query attention: softmax(q'k'/sqrt(d)) weighted sum of values, then projected."""
    keys = np.asarray(keys, dtype=COMPUTE)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise EmptySequenceError("target attention needs at least one key")
    mask = np.ones((1, keys.shape[0]), dtype=bool)
    w, _ = AttentionWeights.forward(
        np.asarray(query, dtype=COMPUTE)[None], keys[None], mask, params["Wq"], params["Wk"]
    )
    ctx, _ = WeightedSum.forward(w, np.asarray(values, dtype=COMPUTE)[None])
    out, _ = Linear.forward(ctx, params["Wo"], params["bo"])
    return out[0]


def mlp_forward(x, layers, activation: str = "relu"):
    """Affine layers with ``activation`` between them and none on the output."""
    h = np.asarray(x, dtype=COMPUTE)
    for i, (w, b) in enumerate(layers):
        if h.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise DimensionError(f"layer {i}: input {h.shape} does not fit weight {w.shape}, bias {b.shape}")
        h = h @ w + b
        if i < len(layers) - 1:
            if activation == "relu":
                h = np.maximum(h, 0.0)
            elif activation != "none":
                raise ConfigError(f"unknown activation {activation!r}")
    return h


# ---------------------------------------------------------------------------
# ops with forward/backward
# ---------------------------------------------------------------------------


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Linear:
    @staticmethod
    def forward(x, w, b):
        if x.shape[-1] != w.shape[0]:
            raise DimensionError(f"cannot multiply shapes {x.shape} and {w.shape}")
        return x @ w + b, (x, w)

    @staticmethod
    def backward(g, cache):
        x, w = cache
        k, n = w.shape
        dw = x.reshape(-1, k).T @ g.reshape(-1, n)
        return g @ w.T, dw, g.reshape(-1, n).sum(axis=0)


class Relu:
    @staticmethod
    def forward(x):
        return np.maximum(x, 0.0), x

    @staticmethod
    def backward(g, x):
        return (g * (x > 0),)


class Sigmoid:
    @staticmethod
    def forward(x):
        s = sigmoid(x)
        return s, s

    @staticmethod
    def backward(g, s):
        return (g * s * (1.0 - s),)


class Add:
    @staticmethod
    def forward(a, b):
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(g, cache):
        sa, sb = cache
        return _sum_to(g, sa), _sum_to(g, sb)


class Combine:
    """``sum_i coef_i * x_i`` where coefficients are constants broadcastable to the inputs."""

    @staticmethod
    def forward(*xs, coefs):
        out = sum(c * x for c, x in zip(coefs, xs))
        return out, (coefs, [x.shape for x in xs])

    @staticmethod
    def backward(g, cache):
        coefs, shapes = cache
        return tuple(_sum_to(g * c, s) for c, s in zip(coefs, shapes))


class Gather:
    """Row lookup ``table[idx]`` for an integer index array of any shape."""

    @staticmethod
    def forward(table, idx):
        return table[idx], (table.shape, idx)

    @staticmethod
    def backward(g, cache):
        shape, idx = cache
        dt = np.zeros(shape, dtype=g.dtype)
        flat = idx.reshape(-1)
        if flat.size == 0:
            return dt, None
        # sort + reduceat is much faster than np.add.at and sums in a fixed order
        order = np.argsort(flat, kind="stable")
        ids = flat[order]
        starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
        dt[ids[starts]] = np.add.reduceat(g.reshape(-1, shape[-1])[order], starts, axis=0)
        return dt, None


class Concat:
    @staticmethod
    def forward(*xs):
        return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]

    @staticmethod
    def backward(g, sizes):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=-1))


class Stack:
    """Stack ``[B, d]`` inputs into ``[B, n, d]``."""

    @staticmethod
    def forward(*xs):
        return np.stack(xs, axis=1), len(xs)

    @staticmethod
    def backward(g, n):
        return tuple(g[:, i] for i in range(n))


class MeanPool:
    """Masked average over the time axis of ``[B, T, d]``."""

    @staticmethod
    def forward(x, mask):
        m = mask[..., None].astype(x.dtype)
        n = np.maximum(m.sum(axis=1), 1.0)
        return (x * m).sum(axis=1) / n, (m, n)

    @staticmethod
    def backward(g, cache):
        m, n = cache
        return (g / n)[:, None, :] * m, None


MHSA_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


class MHSA:
    """Fused multi-head self-attention over ``[B, T, d]`` with a key mask ``[B, T]``."""

    @staticmethod
    def forward(x, mask, wq, bq, wk, bk, wv, bv, wo, bo, heads):
        b, t, d = x.shape
        if d % heads:
            raise ConfigError(f"model dim {d} is not divisible by {heads} heads")
        dh = d // heads

        def split(z):
            return z.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

        q, k, v = split(x @ wq + bq), split(x @ wk + bk), split(x @ wv + bv)
        scale = 1.0 / math.sqrt(dh)
        a = masked_softmax(q @ k.transpose(0, 1, 3, 2) * scale, mask[:, None, None, :])
        o = (a @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return o @ wo + bo, (x, q, k, v, a, o, wq, wk, wv, wo, heads, scale)

    @staticmethod
    def backward(g, cache):
        x, q, k, v, a, o, wq, wk, wv, wo, heads, scale = cache
        b, t, d = x.shape
        dh = d // heads
        dwo = o.reshape(-1, d).T @ g.reshape(-1, d)
        dbo = g.reshape(-1, d).sum(axis=0)
        do = (g @ wo.T).reshape(b, t, heads, dh).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        def merge(z):
            return z.transpose(0, 2, 1, 3).reshape(-1, d)

        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        xf = x.reshape(-1, d)
        dx = (dq @ wq.T + dk @ wk.T + dv @ wv.T).reshape(b, t, d)
        return (dx, None, xf.T @ dq, dq.sum(0), xf.T @ dk, dk.sum(0),
                xf.T @ dv, dv.sum(0), dwo, dbo)


class AttentionWeights:
    """Target-attention weights ``softmax((q Wq) . (k Wk) / sqrt(d))`` over keys ``[B, T, d]``."""

    @staticmethod
    def forward(q, k, mask, wq, wk):
        d = wq.shape[1]
        scale = 1.0 / math.sqrt(d)
        qp = q @ wq
        kp = k @ wk
        w = masked_softmax(np.einsum("btd,bd->bt", kp, qp) * scale, mask)
        return w, (q, k, qp, kp, w, wq, wk, scale)

    @staticmethod
    def backward(g, cache):
        q, k, qp, kp, w, wq, wk, scale = cache
        ds = w * (g - (g * w).sum(axis=-1, keepdims=True)) * scale
        dqp = np.einsum("bt,btd->bd", ds, kp)
        dkp = ds[..., None] * qp[:, None, :]
        kin = k.shape[-1]
        dwk = k.reshape(-1, kin).T @ dkp.reshape(-1, wk.shape[1])
        return dqp @ wq.T, dkp @ wk.T, None, q.T @ dqp, dwk


class WeightedSum:
    """``out[b] = sum_t w[b, t] * v[b, t]``."""

    @staticmethod
    def forward(w, v):
        return np.einsum("bt,btd->bd", w, v), (w, v)

    @staticmethod
    def backward(g, cache):
        w, v = cache
        return np.einsum("bd,btd->bt", g, v), w[..., None] * g[:, None, :]


class Softmax:
    @staticmethod
    def forward(x):
        p = softmax(x, axis=-1)
        return p, p

    @staticmethod
    def backward(g, p):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


class SoftmaxCrossEntropy:
    """Mean over rows of ``-log softmax(logits)[label]``."""

    @staticmethod
    def forward(logits, labels):
        p = softmax(logits, axis=-1)
        rows = np.arange(logits.shape[0])
        loss = (logsumexp(logits, axis=-1) - logits[rows, labels]).mean()
        return np.asarray(loss), (p, labels)

    @staticmethod
    def backward(g, cache):
        p, labels = cache
        grad = p.copy()
        grad[np.arange(len(labels)), labels] -= 1.0
        return grad * (g / len(labels)), None


class SampledSoftmax:
    """Mean sampled-softmax loss with one positive per row and a shared negative set.

    ``v [B, d]`` user vectors, ``pos [B, d]`` positive embeddings, ``neg [M, d]``
    negatives shared by every row.  The positive sits in the denominator.
    """

    @staticmethod
    def forward(v, pos, neg):
        logits = np.concatenate([(v * pos).sum(-1, keepdims=True), v @ neg.T], axis=1)
        labels = np.zeros(len(v), dtype=np.int64)
        loss, (p, _) = SoftmaxCrossEntropy.forward(logits, labels)
        return loss, (v, pos, neg, p)

    @staticmethod
    def backward(g, cache):
        v, pos, neg, p = cache
        dl = p.copy()
        dl[:, 0] -= 1.0
        dl *= g / len(v)
        dpos_logit = dl[:, :1]
        dneg_logit = dl[:, 1:]
        dv = dpos_logit * pos + dneg_logit @ neg
        return dv, dpos_logit * v, dneg_logit.T @ v


class ScatterNormalize:
    """Scatter position weights ``[B, P]`` into category space ``[B, N]`` and renormalize rows."""

    @staticmethod
    def forward(w, idx, mask, n):
        b = w.shape[0]
        s = np.zeros((b, n), dtype=w.dtype)
        rows = np.repeat(np.arange(b), w.shape[1])
        np.add.at(s, (rows, idx.reshape(-1)), (w * mask).reshape(-1))
        tot = s.sum(axis=1, keepdims=True)
        tot = np.where(tot > 0, tot, 1.0)
        y = s / tot
        return y, (idx, mask, y, tot)

    @staticmethod
    def backward(g, cache):
        idx, mask, y, tot = cache
        ds = (g - (g * y).sum(axis=1, keepdims=True)) / tot
        dw = np.take_along_axis(ds, idx, axis=1) * mask
        return dw, None, None


class Blend:
    """``p * a + (1 - p) * b`` with gate ``p [B, 1]``."""

    @staticmethod
    def forward(p, a, b):
        return p * a + (1.0 - p) * b, (p, a, b)

    @staticmethod
    def backward(g, cache):
        p, a, b = cache
        return (g * (a - b)).sum(axis=1, keepdims=True), g * p, g * (1.0 - p)


class ProbNLL:
    """Mean ``-log(y[label] + eps)`` for rows of probabilities."""

    @staticmethod
    def forward(y, labels, eps):
        rows = np.arange(len(labels))
        picked = y[rows, labels] + eps
        return np.asarray(-np.log(picked).mean()), (y.shape, labels, picked)

    @staticmethod
    def backward(g, cache):
        shape, labels, picked = cache
        dy = np.zeros(shape)
        dy[np.arange(len(labels)), labels] = -g / (picked * len(labels))
        return dy, None, None


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Var:
    __slots__ = ("value", "name")

    def __init__(self, value, name=None):
        self.value = value
        self.name = name

    @property
    def shape(self):
        return self.value.shape


@dataclass
class LayerGrads:
    params: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)


class Tape:
    """Records op applications so :meth:`backward` can replay them in reverse.

    With ``record=False`` ops run forward only and nothing is kept.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._ops = []
        self._params = {}
        self._inputs = {}

    def param(self, name: str, value) -> Var:
        var = self._params.get(name)
        if var is None:
            var = Var(np.asarray(value, dtype=COMPUTE), name)
            self._params[name] = var
        return var

    def input(self, name: str, value) -> Var:
        var = Var(np.asarray(value, dtype=COMPUTE), name)
        self._inputs[name] = var
        return var

    def apply(self, op, *args, **attrs) -> Var:
        values = [a.value if isinstance(a, Var) else a for a in args]
        out, cache = op.forward(*values, **attrs)
        var = Var(out)
        if self.record:
            self._ops.append((op, args, var, cache))
        return var

    def inputs_of(self, op) -> list:
        """Recorded input values of every application of ``op`` (for diagnostics)."""
        return [args[0].value if isinstance(args[0], Var) else args[0]
                for o, args, _, _ in self._ops if o is op]

    def backward(self, out: Var, grad=None) -> LayerGrads:
        if not self._ops:
            raise TapeError("backward called before a forward pass was recorded")
        grads = {id(out): np.ones_like(out.value) if grad is None else grad}
        for op, args, var, cache in reversed(self._ops):
            g = grads.pop(id(var), None)
            if g is None:
                continue
            for a, ga in zip(args, op.backward(g, cache)):
                if ga is None or not isinstance(a, Var):
                    continue
                key = id(a)
                grads[key] = grads[key] + ga if key in grads else ga
        self._ops.clear()
        result = LayerGrads()
        for name, var in self._params.items():
            result.params[name] = grads.get(id(var), np.zeros_like(var.value))
        for name, var in self._inputs.items():
            result.inputs[name] = grads.get(id(var), np.zeros_like(var.value))
        return result


def backward(tape: Tape, out: Var) -> LayerGrads:
    return tape.backward(out)


# layer helpers operating on a tape -----------------------------------------


def linear(tape: Tape, x, params: dict, prefix: str) -> Var:
    return tape.apply(Linear, x, tape.param(f"{prefix}.W", params[f"{prefix}.W"]),
                      tape.param(f"{prefix}.b", params[f"{prefix}.b"]))


def mlp(tape: Tape, x, params: dict, prefix: str, n_layers: int) -> Var:
    h = x
    for i in range(n_layers):
        h = linear(tape, h, params, f"{prefix}.{i}")
        if i < n_layers - 1:
            h = tape.apply(Relu, h)
    return h


def mhsa(tape: Tape, x, mask, params: dict, prefix: str, heads: int) -> Var:
    ps = [tape.param(f"{prefix}.{k}", params[f"{prefix}.{k}"]) for k in MHSA_KEYS]
    return tape.apply(MHSA, x, mask, *ps, heads=heads)


def attention_weights(tape: Tape, q, k, mask, params: dict, prefix: str) -> Var:
    return tape.apply(AttentionWeights, q, k, mask,
                      tape.param(f"{prefix}.Wq", params[f"{prefix}.Wq"]),
                      tape.param(f"{prefix}.Wk", params[f"{prefix}.Wk"]))


def target_attention(tape: Tape, q, k, v, mask, params: dict, prefix: str) -> Var:
    w = attention_weights(tape, q, k, mask, params, prefix)
    ctx = tape.apply(WeightedSum, w, v)
    return linear(tape, ctx, params, f"{prefix}.out")


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------


def init_uniform(rng: np.random.Generator, shape, fan_in: int):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(STORAGE)


def init_linear(params: dict, rng, prefix: str, n_in: int, n_out: int):
    params[f"{prefix}.W"] = init_uniform(rng, (n_in, n_out), n_in)
    params[f"{prefix}.b"] = np.zeros(n_out, dtype=STORAGE)


def init_mlp(params: dict, rng, prefix: str, sizes):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(params, rng, f"{prefix}.{i}", a, b)


def init_mhsa(params: dict, rng, prefix: str, d: int):
    for k in ("q", "k", "v", "o"):
        params[f"{prefix}.W{k}"] = init_uniform(rng, (d, d), d)
        params[f"{prefix}.b{k}"] = np.zeros(d, dtype=STORAGE)


def init_target_attention(params: dict, rng, prefix: str, d: int):
    params[f"{prefix}.Wq"] = init_uniform(rng, (d, d), d)
    params[f"{prefix}.Wk"] = init_uniform(rng, (d, d), d)
    init_linear(params, rng, f"{prefix}.out", d, d)


class Adam:
    """Plain Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        """Update ``params`` in place; stored tensors keep their dtype."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0:
                continue
            p = params[name]
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (p.astype(COMPUTE) - upd).astype(p.dtype)


def finite_difference_check(loss_fn, params: dict, grads: dict, h: float = 1e-3, names=None):
    """Relative error between analytic ``grads`` and central differences of ``loss_fn``.

    ``loss_fn(params) -> float`` is re-evaluated with each entry nudged by +-h.
    Returns ``{name: ||analytic - numeric|| / max(||analytic||, ||numeric||)}``.
    """
    errors = {}
    for name in names or sorted(params):
        p = params[name]
        num = np.zeros(p.shape)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params)
            flat[i] = orig - h
            down = loss_fn(params)
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / (2 * h)
        ana = np.asarray(grads[name], dtype=COMPUTE)
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        errors[name] = 0.0 if scale < 1e-12 else float(np.linalg.norm(ana - num) / scale)
    return errors
