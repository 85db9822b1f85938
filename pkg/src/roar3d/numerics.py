"""Dense float64 tensors with reverse-mode autodiff.

Just enough operations for attention stacks: matmul, norms, softmax, SiLU,
a couple of gather/broadcast helpers, and two fused attention kernels. The
design goals are auditability and determinism, not generality:

* everything is float64, row-major;
* no broadcasting beyond the documented cases (shared 2-D rhs in matmul,
  bias over the last axis, per-row scalars);
* backward passes are hand-written per op and verified against central
  finite differences (see :func:`grad_check` and the test suite).

Tensors are immutable after construction except through their owning graph;
forward/backward of one graph is single-threaded, independent graphs may run
on independent threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "ShapeError",
    "AttentionMeter",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "scale_rows",
    "scale_batch",
    "softmax",
    "layer_norm",
    "rms_norm",
    "silu",
    "reshape",
    "transpose",
    "slice_last",
    "take_index_last",
    "ste_one",
    "modulate",
    "gate_mul",
    "head_mix",
    "self_attention",
    "routed_attention",
    "mean_all",
    "sum_all",
    "mse",
    "grad_check",
]

LN_EPS = 1e-5
RMS_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """A dense float64 array plus optional gradient buffer.

    Graph edges (`_parents`, `_backward`) are populated by the ops below;
    leaves created directly carry none.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accum_grad(self, g: np.ndarray) -> None:
        # Constants outside the graph never need gradient storage.
        if not (self.requires_grad or self._parents):
            return
        if self.grad is None:
            self.grad = np.array(g)  # own a copy: g may be shared by siblings
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from this (scalar) tensor."""
        ComputationTape.trace(self).backward(self)

    def detach(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


class no_grad:
    """Context that skips graph construction (pure inference, same math)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class ComputationTape:
    """Reverse-topological schedule over a forward graph.

    ``trace`` collects every node reachable from the root exactly once, in a
    deterministic DFS order; ``backward`` walks the record in reverse so each
    node's backward fires exactly once, after all its consumers.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return ComputationTape(order)

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ShapeError("backward root must be scalar, got shape %s" % (root.shape,))
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# ---------------------------------------------------------------------------
# attention instrumentation
# ---------------------------------------------------------------------------


class AttentionMeter:
    """Counts keys attended per query token, split by kernel tag.

    Enable via ``with AttentionMeter.capture() as meter:``; kernels report
    (token_count, keys_per_token) per call. ``per_token_keys(tag)`` returns
    one entry per attended token.
    """

    _active: "AttentionMeter | None" = None

    def __init__(self):
        self.records: list[tuple[str, int, int]] = []

    @classmethod
    def capture(cls) -> "AttentionMeter":
        meter = cls()
        cls._active = meter
        return meter

    @classmethod
    def release(cls) -> None:
        cls._active = None

    def __enter__(self) -> "AttentionMeter":
        AttentionMeter._active = self
        return self

    def __exit__(self, *exc) -> None:
        AttentionMeter.release()

    @classmethod
    def record(cls, tag: str, tokens: int, keys: int) -> None:
        if cls._active is not None and tokens:
            cls._active.records.append((tag, tokens, keys))

    def per_token_keys(self, tag_prefix: str) -> np.ndarray:
        out: list[int] = []
        for tag, tokens, keys in self.records:
            if tag.startswith(tag_prefix):
                out.extend([keys] * tokens)
        return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either both operands share leading batch axes, or
    ``b`` is a plain 2-D matrix applied to every leading slice of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs >=2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims {a.shape} x {b.shape}")
    shared_rhs = b.ndim == 2 and a.ndim > 2
    if not shared_rhs and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a.accum_grad(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad or b._parents:
            if shared_rhs:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accum_grad(gb)

    return _node(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        a.accum_grad(g)
        b.accum_grad(g)

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        a.accum_grad(g)
        b.accum_grad(-g)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        a.accum_grad(g * b.data)
        b.accum_grad(g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)

    def backward(g: np.ndarray) -> None:
        x.accum_grad(g * s)

    return _node(x.data * s, (x,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias {b.shape} does not match last axis of {x.shape}")

    def backward(g: np.ndarray) -> None:
        x.accum_grad(g)
        b.accum_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _node(x.data + b.data, (x, b), backward)


def scale_rows(x: Tensor, m: Tensor) -> Tensor:
    """x[..., d] * m[..., 1], one scalar per row."""
    x, m = _as_tensor(x), _as_tensor(m)
    if m.shape != x.shape[:-1] + (1,):
        raise ShapeError(f"row scale {m.shape} does not match {x.shape}")

    def backward(g: np.ndarray) -> None:
        x.accum_grad(g * m.data)
        m.accum_grad((g * x.data).sum(axis=-1, keepdims=True))

    return _node(x.data * m.data, (x, m), backward)


def scale_batch(x: Tensor, s: np.ndarray) -> Tensor:
    """x[b, ...] * s[b] with a constant per-sample scale vector."""
    x = _as_tensor(x)
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (x.shape[0],):
        raise ShapeError(f"batch scale {s.shape} does not match {x.shape}")
    view = s.reshape((-1,) + (1,) * (x.ndim - 1))

    def backward(g: np.ndarray) -> None:
        x.accum_grad(g * view)

    return _node(x.data * view, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along one axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accum_grad(y * (g - dot))

    return _node(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row zero mean / unit variance over the last axis, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs last axis >= 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm affine shape mismatch")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad or x._parents:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accum_grad(term * inv)
        gain.accum_grad((g * xhat).reshape(-1, d).sum(axis=0))
        bias.accum_grad(g.reshape(-1, d).sum(axis=0))

    return _node(y, (x, gain, bias), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError("rms_norm gain shape mismatch")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    u = x.data * inv
    y = u * gain.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad or x._parents:
            gg = g * gain.data
            dot = (gg * x.data).sum(axis=-1, keepdims=True)
            x.accum_grad(gg * inv - x.data * (dot * inv**3 / d))
        gain.accum_grad((g * u).reshape(-1, d).sum(axis=0))

    return _node(y, (x, gain), backward)


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * s

    def backward(g: np.ndarray) -> None:
        x.accum_grad(g * (s * (1.0 + x.data * (1.0 - s))))

    return _node(y, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def backward(g: np.ndarray) -> None:
        x.accum_grad(g.reshape(old))

    return _node(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        x.accum_grad(g.transpose(inv))

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        x.accum_grad(gx)

    return _node(np.ascontiguousarray(x.data[..., start:stop]), (x,), backward)


def take_index_last(y: Tensor, idx: np.ndarray) -> Tensor:
    """Gather one entry per row from the last axis: out[..., 0] = y[..., idx]."""
    y = _as_tensor(y)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != y.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} does not match {y.shape}")
    picked = np.take_along_axis(y.data, idx[..., None], axis=-1)

    def backward(g: np.ndarray) -> None:
        gy = np.zeros_like(y.data)
        np.put_along_axis(gy, idx[..., None], g, axis=-1)
        y.accum_grad(gy)

    return _node(picked, (y,), backward)


def ste_one(soft: Tensor) -> Tensor:
    """Straight-through unit multiplier.

    Forward value is exactly 1 everywhere; the backward pass hands the
    incoming gradient to ``soft`` unchanged. Composing ``scale_rows(x,
    ste_one(p))`` therefore leaves x untouched in the forward pass while
    routing x-weighted gradient into p.
    """
    soft = _as_tensor(soft)

    def backward(g: np.ndarray) -> None:
        soft.accum_grad(g)

    return _node(np.ones_like(soft.data), (soft,), backward)


def modulate(x: Tensor, sc: Tensor, sh: Tensor) -> Tensor:
    """x[..., n, d] * (1 + sc[..., d]) + sh[..., d], broadcast over tokens."""
    x, sc, sh = _as_tensor(x), _as_tensor(sc), _as_tensor(sh)
    if sc.shape != x.shape[:-2] + (x.shape[-1],) or sh.shape != sc.shape:
        raise ShapeError(f"modulate shapes: x {x.shape}, scale {sc.shape}, shift {sh.shape}")
    scb = sc.data[..., None, :]
    y = x.data * (1.0 + scb) + sh.data[..., None, :]

    def backward(g: np.ndarray) -> None:
        x.accum_grad(g * (1.0 + scb))
        sc.accum_grad((g * x.data).sum(axis=-2))
        sh.accum_grad(g.sum(axis=-2))

    return _node(y, (x, sc, sh), backward)


def gate_mul(x: Tensor, gate: Tensor) -> Tensor:
    """x[..., n, d] * gate[..., d], broadcast over tokens."""
    x, gate = _as_tensor(x), _as_tensor(gate)
    if gate.shape != x.shape[:-2] + (x.shape[-1],):
        raise ShapeError(f"gate {gate.shape} does not match {x.shape}")
    gb = gate.data[..., None, :]

    def backward(g: np.ndarray) -> None:
        x.accum_grad(g * gb)
        gate.accum_grad((g * x.data).sum(axis=-2))

    return _node(x.data * gb, (x, gate), backward)


def head_mix(scores: Tensor, w: Tensor) -> Tensor:
    """Aggregate per-head scores: out[b, n, v] = sum_h w[h] * scores[b, h, n, v]."""
    scores, w = _as_tensor(scores), _as_tensor(w)
    if scores.ndim != 4 or w.shape != (scores.shape[1],):
        raise ShapeError(f"head_mix shapes: {scores.shape}, {w.shape}")
    y = np.einsum("bhnv,h->bnv", scores.data, w.data)

    def backward(g: np.ndarray) -> None:
        scores.accum_grad(g[:, None, :, :] * w.data[None, :, None, None])
        w.accum_grad(np.einsum("bhnv,bnv->h", scores.data, g))

    return _node(y, (scores, w), backward)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def backward(g: np.ndarray) -> None:
        x.accum_grad(np.full_like(x.data, float(g) / n))

    return _node(np.asarray(x.data.mean()), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def backward(g: np.ndarray) -> None:
        x.accum_grad(np.full_like(x.data, float(g)))

    return _node(np.asarray(x.data.sum()), (x,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    d = sub(pred, target)
    return mean_all(mul(d, d))


# ---------------------------------------------------------------------------
# fused attention kernels
# ---------------------------------------------------------------------------


def self_attention(q: Tensor, k: Tensor, v: Tensor, tag: str = "self") -> Tensor:
    """Scaled dot-product attention, q/k/v shaped (B, H, N, d).

    Fused so one graph node covers scores, softmax and the value product.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 4 or q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"self_attention shapes: {q.shape}, {k.shape}, {v.shape}")
    B, H, N, dh = q.shape
    sc = 1.0 / np.sqrt(dh)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * sc
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(attn, v.data)
    AttentionMeter.record(tag, B * N, N)

    def backward(g: np.ndarray) -> None:
        gattn = np.matmul(g, np.swapaxes(v.data, -1, -2))
        v.accum_grad(np.matmul(np.swapaxes(attn, -1, -2), g))
        gs = attn * (gattn - (gattn * attn).sum(axis=-1, keepdims=True))
        q.accum_grad(np.matmul(gs, k.data) * sc)
        k.accum_grad(np.matmul(np.swapaxes(gs, -1, -2), q.data) * sc)

    return _node(out, (q, k, v), backward)


def routed_attention(
    q_p: Tensor,
    q_a: Tensor,
    kv_p: tuple[Tensor, Tensor],
    kv_a: tuple[Tensor, Tensor],
    view_index: np.ndarray,
    use_primary: np.ndarray,
    tag: str = "cross",
) -> Tensor:
    """Per-token single-view cross attention with dual parameter streams.

    Each token n of sample b attends to exactly the S patch keys of its
    selected view ``view_index[b, n]``, through the primary stream where
    ``use_primary[b, n]`` and the auxiliary stream otherwise. Queries are
    (B, N, H, d); each stream's keys/values are (B, V, S, H, d). Tokens are
    grouped by (sample, view, stream) so the kernel runs a handful of
    medium-sized matmuls instead of one per token, and the instrumented
    attended-key count per token is S by construction.
    """
    q_p, q_a = _as_tensor(q_p), _as_tensor(q_a)
    k_p, v_p = (_as_tensor(t) for t in kv_p)
    k_a, v_a = (_as_tensor(t) for t in kv_a)
    if q_p.shape != q_a.shape or q_p.ndim != 4:
        raise ShapeError(f"routed_attention query shapes: {q_p.shape}, {q_a.shape}")
    if k_p.shape != v_p.shape or k_a.shape != v_a.shape or k_p.shape != k_a.shape:
        raise ShapeError("routed_attention key/value shapes differ")
    B, N, H, dh = q_p.shape
    Bv, V, S, Hk, dk = k_p.shape
    if (Bv, Hk, dk) != (B, H, dh):
        raise ShapeError(f"routed_attention q {q_p.shape} vs k {k_p.shape}")
    view_index = np.asarray(view_index, dtype=np.int64)
    use_primary = np.asarray(use_primary, dtype=bool)
    if view_index.shape != (B, N) or use_primary.shape != (B, N):
        raise ShapeError("routed_attention index shapes")
    if view_index.min() < 0 or view_index.max() >= V:
        raise ShapeError("view index out of range")
    sc = 1.0 / np.sqrt(dh)

    out = np.zeros((B, N, H, dh))
    groups: list[tuple[int, int, bool, np.ndarray, np.ndarray]] = []
    for b in range(B):
        for v in np.unique(view_index[b]):
            sel = view_index[b] == v
            for primary in (True, False):
                idx = np.nonzero(sel & (use_primary[b] == primary))[0]
                if idx.size == 0:
                    continue
                q_src = q_p if primary else q_a
                k_src = k_p if primary else k_a
                v_src = v_p if primary else v_a
                qg = q_src.data[b, idx].transpose(1, 0, 2)        # (H, G, d)
                kg = k_src.data[b, v].transpose(1, 2, 0)          # (H, d, S)
                scores = np.matmul(qg, kg) * sc                   # (H, G, S)
                scores -= scores.max(axis=-1, keepdims=True)
                e = np.exp(scores)
                attn = e / e.sum(axis=-1, keepdims=True)
                og = np.matmul(attn, v_src.data[b, v].transpose(1, 0, 2))  # (H, G, d)
                out[b, idx] = og.transpose(1, 0, 2)
                groups.append((b, int(v), primary, idx, attn))
                AttentionMeter.record(tag + ("_p" if primary else "_a"), idx.size, S)

    def backward(g: np.ndarray) -> None:
        gq_p = np.zeros_like(q_p.data)
        gq_a = np.zeros_like(q_a.data)
        gk_p = np.zeros_like(k_p.data)
        gk_a = np.zeros_like(k_a.data)
        gv_p = np.zeros_like(v_p.data)
        gv_a = np.zeros_like(v_a.data)
        for b, v, primary, idx, attn in groups:
            q_src = q_p if primary else q_a
            k_src = k_p if primary else k_a
            v_src = v_p if primary else v_a
            go = g[b, idx].transpose(1, 0, 2)                      # (H, G, d)
            vg = v_src.data[b, v].transpose(1, 0, 2)               # (H, S, d)
            gattn = np.matmul(go, vg.transpose(0, 2, 1))           # (H, G, S)
            gvv = np.matmul(attn.transpose(0, 2, 1), go)           # (H, S, d)
            gs = attn * (gattn - (gattn * attn).sum(axis=-1, keepdims=True))
            kg = k_src.data[b, v].transpose(1, 0, 2)               # (H, S, d)
            gqg = np.matmul(gs, kg) * sc                           # (H, G, d)
            qg = q_src.data[b, idx].transpose(1, 0, 2)
            gkk = np.matmul(gs.transpose(0, 2, 1), qg) * sc        # (H, S, d)
            tgt_q = gq_p if primary else gq_a
            tgt_q[b, idx] += gqg.transpose(1, 0, 2)
            (gk_p if primary else gk_a)[b, v] += gkk.transpose(1, 0, 2)
            (gv_p if primary else gv_a)[b, v] += gvv.transpose(1, 0, 2)
        q_p.accum_grad(gq_p)
        q_a.accum_grad(gq_a)
        k_p.accum_grad(gk_p)
        k_a.accum_grad(gk_a)
        v_p.accum_grad(gv_p)
        v_a.accum_grad(gv_a)

    return _node(out, (q_p, q_a, k_p, v_p, k_a, v_a), backward)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild its graph from the current ``params`` data on every
    call and be deterministic. Returns the max relative error per parameter,
    where the relative error of (analytic a, numeric n) is
    ``|a - n| / (atol/rtol + max(|a|, |n|))`` so that near-zero gradients are
    judged against an absolute floor. ``max_entries`` caps how many entries
    per parameter are probed (seeded subsample); None probes all.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ValueError("h outside [1e-6, 1e-4]")
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss at base point")
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    rng = rng or np.random.default_rng(0)
    report: dict[str, float] = {}
    for name, p in params.items():
        n = p.data.size
        if max_entries is not None and n > max_entries:
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            entries = np.arange(n)
        worst = 0.0
        for i in entries:
            at = np.unravel_index(int(i), p.data.shape)
            orig = p.data[at]
            p.data[at] = orig + h
            up = float(f().data)
            p.data[at] = orig - h
            dn = float(f().data)
            p.data[at] = orig
            if not (np.isfinite(up) and np.isfinite(dn)):
                raise FloatingPointError(f"non-finite f at {name}[{i}] +/- h")
            numeric = (up - dn) / (2.0 * h)
            a = float(analytic[name][at])
            err = abs(a - numeric) / (atol / rtol + max(abs(a), abs(numeric)))
            worst = max(worst, err)
        report[name] = worst
    return report
