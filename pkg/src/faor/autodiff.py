"""A small reverse-mode autodiff engine on top of numpy.

Only the operations the super-resolution model needs are provided. Every op
checks its output for NaN/Inf and raises :class:`NonFiniteError` naming
itself, so numeric blow-ups surface where they happen.
"""
from __future__ import annotations

import contextlib
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "NonFiniteError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "gelu",
    "layer_norm",
    "softmax",
    "sum_all",
    "mean_all",
    "l1_loss",
    "sparse_apply",
    "im2col3x3",
    "finite_difference_check",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_TAG",
]


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run operations without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _slice(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        """Populate ``.grad`` on every reachable tensor that requires grad."""
        if self.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("graph already backpropagated; rebuild it before calling backward again")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient flowing into '{node.op}'")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._backward = None
            node._parents = ()
            node._consumed = True


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    if any(p._consumed for p in parents):
        raise RuntimeError(f"'{op}' reuses part of a graph that was already backpropagated")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(_tracks(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- element-wise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * g.dtype.type(c),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(_GELU_K)
    sq = d * d
    th = sq * k
    th += 1
    th *= d
    th *= c
    np.tanh(th, out=th)
    out = th + 1
    out *= d
    out *= 0.5

    def back(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3k x^2)
        res = sq * (3 * k)
        res += 1
        res *= c
        res *= d
        res *= 1 - th * th
        res += 1 + th
        res *= 0.5
        res *= g
        return (res,)

    return _make(out, "gelu", (x,), back)


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _make(x.data.T, "transpose", (x,), lambda g: (g.T,))


def _slice(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], "slice", (x,), back)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), "concat", tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., k)`` and ``b`` of shape ``(k, m)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    need_a, need_b = _tracks(a), _tracks(b)

    def back(g):
        ga = g @ bd.T if need_a else None
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if need_b else None
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), back)


def sparse_apply(op, x: Tensor) -> Tensor:
    """Apply a constant sparse matrix to a ``(N, D)`` tensor."""
    opT = op.T.tocsr()
    out = np.asarray(op @ x.data).astype(x.dtype, copy=False)
    return _make(out, "sparse_apply", (x,),
                 lambda g: (np.asarray(opT @ g).astype(g.dtype, copy=False),))


def im2col3x3(x: Tensor, wrap: bool) -> Tensor:
    """Stack the 3x3 neighborhood of every pixel of ``(H, W, C)`` into ``(H, W, 9C)``.

    Rows use replicate padding. Columns wrap around when ``wrap`` is set (full
    ERP images) and replicate otherwise (cropped patches).
    """
    d = x.data
    h, w, c = d.shape
    p = np.concatenate([d[:1], d, d[-1:]], axis=0)
    if wrap:
        p = np.concatenate([p[:, -1:], p, p[:, :1]], axis=1)
    else:
        p = np.concatenate([p[:, :1], p, p[:, -1:]], axis=1)
    cols = [p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]

    def back(g):
        gp = np.zeros((h + 2, w + 2, c), dtype=g.dtype)
        k = 0
        for dy in range(3):
            for dx in range(3):
                gp[dy:dy + h, dx:dx + w] += g[..., k * c:(k + 1) * c]
                k += 1
        gp[1] += gp[0]
        gp[h] += gp[h + 1]
        core = gp[1:h + 1]
        out = core[:, 1:w + 1].copy()
        if wrap:
            out[:, -1] += core[:, 0]
            out[:, 0] += core[:, w + 1]
        else:
            out[:, 0] += core[:, 0]
            out[:, -1] += core[:, w + 1]
        return (out,)

    return _make(np.concatenate(cols, axis=-1), "im2col3x3", (x,), back)


# -- normalization / reductions ----------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain * x + bias``."""
    d = x.data
    n = d.shape[-1]
    if n < 1 or gain.shape != (n,) or bias.shape != (n,):
        raise ValueError("layer_norm channel mismatch")
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        return (dx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0))

    return _make(xhat * gd + bias.data, "layer_norm", (x, gain, bias), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, "softmax", (x,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), "sum", (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), "mean", (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at zero difference is 0."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ValueError(f"l1_loss shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t.astype(pred.dtype, copy=False)
    n = diff.size
    return _make(np.asarray(np.abs(diff).mean()), "l1_loss", (pred,),
                 lambda g: (np.sign(diff) * (g / n),))


# -- gradient checking -----------------------------------------------------------

def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    n_samples: int = 200,
    step: float = 1e-4,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` rebuilds the graph and returns a scalar loss each call. Up to
    ``n_samples`` scalar entries are drawn across all parameters (every entry
    when fewer exist). Parameters should be float64.

    Returns a report with the maximum relative error
    ``|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)`` and the entries checked.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}

    entries = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    rng = np.random.default_rng(seed)
    if len(entries) > n_samples:
        pick = rng.choice(len(entries), size=n_samples, replace=False)
        entries = [entries[k] for k in sorted(pick)]

    worst, records = 0.0, []
    for pi, j in entries:
        p = params[pi]
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        with no_grad():
            up = float(loss_fn().data)
        flat[j] = orig - step
        with no_grad():
            down = float(loss_fn().data)
        flat[j] = orig
        fd = (up - down) / (2 * step)
        ga = float(analytic[id(p)].reshape(-1)[j])
        rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
        worst = max(worst, rel)
        records.append((getattr(p, "name", f"param{pi}"), j, ga, fd, rel))
    return {"max_rel_error": worst, "n_checked": len(records), "entries": records}


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_TAG = b"faor-ckpt-v1"


def save_checkpoint(path, params: Iterable[Parameter], meta: str = "") -> None:
    """Write named parameters as little-endian float32 with a shape header per entry.

    Layout: tag, ``u32`` metadata length + UTF-8 metadata, ``u32`` entry
    count, then per entry ``u16`` name length, name, ``u8`` ndim,
    ``u32`` dims, raw data.
    """
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique")
    meta_b = meta.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_TAG)
        fh.write(struct.pack("<I", len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            nb = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Read a checkpoint written by :func:`save_checkpoint` -> ``(arrays, metadata)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_TAG):
        raise ValueError(f"{path}: not a {CHECKPOINT_TAG.decode()} file")
    pos = len(CHECKPOINT_TAG)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (meta_len,) = take("<I")
    meta = blob[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 4 * n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    return arrays, meta
