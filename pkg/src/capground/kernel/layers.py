"""Composite differentiable layers: LSTM cell and additive attention.

Both composites run as single graph nodes with hand-derived backward
passes; the recurrent training loop spends its time in GEMMs instead of
per-primitive graph bookkeeping.  Their gradients are covered by the
finite-difference suite like every primitive.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..errors import EmptyKeysError, ShapeError
from .tensor import Tensor, _acc_own, _acc_shared, _node, matmul, narrow, parameter


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Weight init: uniform(-a, a) with a = 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LSTMParams:
    """Gate weights over the concatenated [x; h] input, plus biases."""

    w_i: Tensor
    w_f: Tensor
    w_o: Tensor
    w_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int) -> "LSTMParams":
        fan_in = input_dim + hidden_dim
        make_w = lambda: parameter(init_uniform(rng, fan_in, (fan_in, hidden_dim)))
        make_b = lambda: parameter(np.zeros(hidden_dim))
        return cls(
            w_i=make_w(), w_f=make_w(), w_o=make_w(), w_g=make_w(),
            b_i=make_b(), b_f=make_b(), b_o=make_b(), b_g=make_b(),
        )

    @property
    def hidden_dim(self) -> int:
        return self.w_i.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_i.shape[0] - self.hidden_dim

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    def fused(self) -> tuple[Tensor, Tensor]:
        """Gate weights stacked [i|f|o|g] for one matmul per step.
        Build once per unrolled sequence; gradients flow back through
        the concatenation to the four gate tensors."""
        from .tensor import concat

        weights = concat([self.w_i, self.w_f, self.w_o, self.w_g], axis=-1)
        biases = concat([self.b_i, self.b_f, self.b_o, self.b_g], axis=-1)
        return weights, biases

    def fused_row_blocks(self, sizes) -> list[Tensor]:
        """The fused weight split along its input rows, e.g. to apply
        static input sections once per sequence instead of per step."""
        from .tensor import concat, row_block

        blocks = []
        start = 0
        for size in sizes:
            blocks.append(
                concat(
                    [row_block(w, start, size) for w in (self.w_i, self.w_f, self.w_o, self.w_g)],
                    axis=-1,
                )
            )
            start += size
        if start != self.w_i.shape[0]:
            raise ShapeError(f"row blocks {sizes} do not cover {self.w_i.shape[0]} input rows")
        return blocks


def _lstm_node(parts, h, c, weights, biases, hidden: int, z_static=None) -> Tensor:
    """One LSTM step as a single node emitting [h' | c'] (B, 2H).

    `weights` covers the [parts... ; h] rows only; `z_static`, when given,
    is a precomputed (B, 4H) pre-activation for input sections that do not
    change across steps.
    """
    xh = np.concatenate([p.data for p in parts] + [h.data], axis=1)
    z = xh @ weights.data
    z += biases.data
    if z_static is not None:
        z += z_static.data
    with np.errstate(over="ignore"):
        squashed = 1.0 / (1.0 + np.exp(-z[:, : 3 * hidden]))
    gate_i = squashed[:, :hidden]
    gate_f = squashed[:, hidden : 2 * hidden]
    gate_o = squashed[:, 2 * hidden :]
    gate_g = np.tanh(z[:, 3 * hidden :])
    c_next = gate_f * c.data + gate_i * gate_g
    tanh_c = np.tanh(c_next)
    h_next = gate_o * tanh_c
    out = np.concatenate([h_next, c_next], axis=1)
    inputs = (*parts, h, c, weights, biases)
    if z_static is not None:
        inputs = (*inputs, z_static)
    sizes = [p.shape[1] for p in parts]

    def backward_fn(g):
        gh = g[:, :hidden]
        gc = g[:, hidden:]
        d_o = gh * tanh_c
        d_ct = gh * gate_o * (1.0 - tanh_c * tanh_c) + gc
        dz = np.empty_like(z)
        dz[:, :hidden] = d_ct * gate_g * gate_i * (1.0 - gate_i)
        dz[:, hidden : 2 * hidden] = d_ct * c.data * gate_f * (1.0 - gate_f)
        dz[:, 2 * hidden : 3 * hidden] = d_o * gate_o * (1.0 - gate_o)
        dz[:, 3 * hidden :] = d_ct * gate_i * (1.0 - gate_g * gate_g)
        if weights.requires_grad:
            _acc_own(weights, xh.T @ dz)
        if biases.requires_grad:
            _acc_own(biases, dz.sum(axis=0))
        if z_static is not None and z_static.requires_grad:
            _acc_shared(z_static, dz)
        if c.requires_grad:
            _acc_own(c, d_ct * gate_f)
        dxh = dz @ weights.data.T
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                _acc_shared(p, dxh[:, offset : offset + size])
            offset += size
        if h.requires_grad:
            _acc_shared(h, dxh[:, offset:])

    return _node(out, inputs, backward_fn)


def lstm_cell(
    x: Tensor,
    h: Tensor,
    c: Tensor,
    params: LSTMParams,
    fused: tuple[Tensor, Tensor] | None = None,
) -> tuple[Tensor, Tensor]:
    """Standard LSTM cell over batched rows.

    c' = sigma(f) * c + sigma(i) * tanh(g);  h' = sigma(o) * tanh(c').
    Accepts the input either whole or pre-split into concatenation parts.
    """
    parts = x if isinstance(x, (list, tuple)) else [x]
    hidden = params.hidden_dim
    batch = parts[0].shape[0]
    total = sum(p.shape[-1] for p in parts)
    if any(p.data.ndim != 2 for p in parts) or h.shape != (batch, hidden) or c.shape != h.shape:
        raise ShapeError(
            f"lstm_cell shapes: x({total}) h{h.shape} c{c.shape} hidden={hidden}"
        )
    if total != params.input_dim:
        raise ShapeError(f"lstm_cell input dim {total} != {params.input_dim}")
    if fused is None:
        fused = params.fused()
    cell = _lstm_node(parts, h, c, fused[0], fused[1], hidden)
    return narrow(cell, 0, hidden), narrow(cell, hidden, hidden)


def lstm_cell_static(
    dynamic_parts,
    h: Tensor,
    c: Tensor,
    recurrent_weights: Tensor,
    biases: Tensor,
    z_static: Tensor,
    hidden: int,
) -> tuple[Tensor, Tensor]:
    """LSTM step whose static input sections were pre-multiplied into
    z_static; only [dynamic_parts... ; h] rows go through the GEMM."""
    cell = _lstm_node(list(dynamic_parts), h, c, recurrent_weights, biases, hidden, z_static)
    return narrow(cell, 0, hidden), narrow(cell, hidden, hidden)


@dataclass
class AttentionParams:
    """Bahdanau scoring: score_i = v . tanh(w_q q + w_k k_i)."""

    w_q: Tensor
    w_k: Tensor
    v: Tensor

    @classmethod
    def init(
        cls, rng: np.random.Generator, query_dim: int, key_dim: int, attention_dim: int
    ) -> "AttentionParams":
        return cls(
            w_q=parameter(init_uniform(rng, query_dim, (query_dim, attention_dim))),
            w_k=parameter(init_uniform(rng, key_dim, (key_dim, attention_dim))),
            v=parameter(init_uniform(rng, attention_dim, (attention_dim,))),
        )

    @property
    def attention_dim(self) -> int:
        return self.v.shape[0]

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k, f"{prefix}.v": self.v}


def project_keys(keys: Tensor, params: AttentionParams) -> Tensor:
    """Precompute w_k k_i for all keys; reusable across decoding steps."""
    return matmul(keys, params.w_k)


def _attention_node(query, keys, key_proj, w_q, v, mask) -> Tensor:
    """Scores, masked softmax, and context in one node: [context | probs]."""
    batch, n, key_dim = keys.shape
    q_proj = query.data @ w_q.data
    pre = key_proj.data + q_proj[:, None, :]
    u = np.tanh(pre)
    scores = u @ v.data
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore"):
        e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    context = np.einsum("bn,bnd->bd", probs, keys.data)
    out = np.concatenate([context, probs], axis=1)
    inputs = (query, keys, key_proj, w_q, v)

    def backward_fn(g):
        d_context = g[:, :key_dim]
        d_probs = g[:, key_dim:] + np.einsum("bd,bnd->bn", d_context, keys.data)
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        d_u = d_scores[:, :, None] * v.data
        d_pre = d_u * (1.0 - u * u)
        if v.requires_grad:
            _acc_own(v, np.einsum("bn,bna->a", d_scores, u))
        if keys.requires_grad:
            _acc_own(keys, probs[:, :, None] * d_context[:, None, :])
        if key_proj.requires_grad:
            _acc_shared(key_proj, d_pre)
        d_qproj = d_pre.sum(axis=1)
        if w_q.requires_grad:
            _acc_own(w_q, query.data.T @ d_qproj)
        if query.requires_grad:
            _acc_own(query, d_qproj @ w_q.data.T)

    return _node(out, inputs, backward_fn)


def additive_attention(
    query: Tensor,
    keys: Tensor,
    params: AttentionParams,
    mask: np.ndarray | None = None,
    key_proj: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Attend a batch of queries (B,H) over keys (B,n,d).

    Returns (context (B,d), probs (B,n)).  Keys act as both keys and
    values; masked key slots receive zero probability.
    """
    if keys.data.ndim != 3:
        raise ShapeError(f"keys must be (B,n,d), got {keys.shape}")
    batch, n, key_dim = keys.shape
    if n == 0:
        raise EmptyKeysError("attention over zero keys")
    if mask is not None and not np.asarray(mask).any(axis=-1).all():
        raise EmptyKeysError("attention mask leaves a row with zero keys")
    if query.data.ndim != 2 or query.shape[0] != batch:
        raise ShapeError(f"query must be (B,H), got {query.shape}")
    if query.shape[1] != params.w_q.shape[0] or key_dim != params.w_k.shape[0]:
        raise ShapeError("attention parameter dims do not match query/keys")
    if key_proj is None:
        key_proj = project_keys(keys, params)
    merged = _attention_node(query, keys, key_proj, params.w_q, params.v, mask)
    context = narrow(merged, 0, key_dim)
    probs = narrow(merged, key_dim, n)
    return context, probs
