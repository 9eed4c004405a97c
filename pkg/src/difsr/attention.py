"""Early-fusion, non-invasive and decoupled multi-head attention.

All functions work on ``[..., n, d]`` inputs and compute every head at once:
the per-head projections ``W^i`` are the column blocks of one ``[d, d]``
matrix, so head ``i`` of a logit tensor ``[..., h, n, n]`` is the usual
per-head ``n x n`` matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Value

FUSIONS = ("add", "concat", "gate")


@dataclass
class AttentionTrace:
    """Pre- and post-softmax matrices of one (layer, head).

    Arrays keep any leading batch axis, so each is ``[..., n, n]``.
    """

    layer: int
    head: int
    item_logits: np.ndarray
    attribute_logits: dict[str, np.ndarray]
    fused: np.ndarray
    weights: np.ndarray

    def records(self, sample: int | None = None) -> list[dict]:
        """One JSON-ready record per source (item, each attribute, fused, weights)."""

        def pick(a):
            return a if sample is None else a[sample]

        out = [{"layer": self.layer, "head": self.head, "source": "item", "matrix": pick(self.item_logits).tolist()}]
        for name, m in self.attribute_logits.items():
            out.append({"layer": self.layer, "head": self.head, "source": f"attr:{name}", "matrix": pick(m).tolist()})
        out.append({"layer": self.layer, "head": self.head, "source": "fused", "matrix": pick(self.fused).tolist()})
        out.append({"layer": self.layer, "head": self.head, "source": "weights", "matrix": pick(self.weights).tolist()})
        return out


def write_traces(traces: Sequence[AttentionTrace], path, sample: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            for rec in t.records(sample):
                fh.write(json.dumps(rec) + "\n")


def split_heads(x: Value, heads: int) -> Value:
    """``[..., n, h*k]`` -> ``[..., h, n, k]``."""
    *lead, n, width = x.shape
    if width % heads:
        raise nc.DimensionError(f"width {width} is not divisible by {heads} heads")
    return nc.swapaxes(nc.reshape(x, (*lead, n, heads, width // heads)), -2, -3)


def merge_heads(x: Value) -> Value:
    """``[..., h, n, k]`` -> ``[..., n, h*k]``."""
    *lead, h, n, k = x.shape
    return nc.reshape(nc.swapaxes(x, -2, -3), (*lead, n, h * k))


def _qk_logits(x: Value, w_q: Value, w_k: Value, heads: int, head: int | None) -> Value:
    if x.shape[-1] != w_q.shape[0] or x.shape[-1] != w_k.shape[0]:
        raise nc.DimensionError(f"input width {x.shape} does not match projections {w_q.shape}, {w_k.shape}")
    q = split_heads(x @ w_q, heads)
    k = split_heads(x @ w_k, heads)
    logits = q @ nc.swapaxes(k, -1, -2)
    if head is not None:
        logits = logits[(Ellipsis, head, slice(None), slice(None))]
    return logits


def item_logits(r_id: Value, w_q: Value, w_k: Value, heads: int, head: int | None = None) -> Value:
    """Unscaled, unmasked ``(R W_Q^i)(R W_K^i)^T`` for every head (or one)."""
    return _qk_logits(r_id, w_q, w_k, heads, head)


def attribute_logits(e_f: Value, w_q: Value, w_k: Value, heads: int, head: int | None = None) -> Value:
    """Same as :func:`item_logits` for one attribute stream of width ``d_f``."""
    return _qk_logits(e_f, w_q, w_k, heads, head)


def fuse_logits(item: Value, attrs: Sequence[Value], fusion: str = "add", params: Mapping[str, Value] | None = None) -> Value:
    """Combine per-source logit tensors ``[..., h, n, n]`` into one.

    ``gate``: softmax over per-(head, source) scalars ``params["gate"]`` of shape
    ``[h, K]``, then a weighted sum. ``concat``: sources stacked on a new axis and
    mixed by a learned linear map ``params["concat_w"]`` ``[h, K]`` plus bias
    ``params["concat_b"]`` ``[h]``.
    """
    sources = [item, *attrs]
    if item is None or any(s is None for s in sources):
        raise ValueError("fuse_logits needs at least the item logits")
    if fusion == "add":
        return sources[0] if len(sources) == 1 else nc.add(*sources)
    if params is None:
        raise ValueError(f"fusion {fusion!r} needs parameters")
    if fusion == "gate":
        g = nc.masked_softmax(params["gate"])  # [h, K]
        coeffs, bias = g, None
    elif fusion == "concat":
        coeffs, bias = params["concat_w"], params["concat_b"]
    else:
        raise ValueError(f"unknown fusion {fusion!r}; expected one of {FUSIONS}")
    h = coeffs.shape[0]
    if coeffs.shape[1] != len(sources):
        raise nc.DimensionError(f"fusion parameters cover {coeffs.shape[1]} sources, got {len(sources)}")
    terms = [nc.reshape(coeffs[:, k], (h, 1, 1)) * src for k, src in enumerate(sources)]
    if bias is not None:
        terms.append(nc.reshape(bias, (h, 1, 1)))
    return nc.add(*terms)


def _attend(logits: Value, values: Value, mask, scale: float, w_o: Value, heads: int) -> tuple[Value, Value]:
    probs = nc.masked_softmax(logits * scale, None if mask is None else np.expand_dims(mask, -3))
    v = split_heads(values, heads)
    return merge_heads(probs @ v) @ w_o, probs


def _trace(layer, item, attrs: Mapping[str, Value], fused, probs, heads) -> list[AttentionTrace]:
    out = []
    for i in range(heads):
        sel = (Ellipsis, i, slice(None), slice(None))
        out.append(
            AttentionTrace(
                layer=layer,
                head=i,
                item_logits=item.data[sel].copy(),
                attribute_logits={k: v.data[sel].copy() for k, v in attrs.items()},
                fused=fused.data[sel].copy(),
                weights=probs.data[sel].copy(),
            )
        )
    return out


def dif_attention(
    r_id: Value,
    attr_embs: Mapping[str, Value],
    params: Mapping[str, Value],
    mask,
    heads: int,
    fusion: str = "add",
    capture: bool = False,
    layer: int = 0,
):
    """Decoupled attention: fused per-stream logits, values from the item stream only.

    ``params`` holds ``Wq, Wk, Wv, Wo`` (``[d, d]``) and ``Wq.<name>, Wk.<name>``
    (``[d_f, d_f]``) per attribute stream, plus fusion parameters. Logits are
    scaled by ``1/sqrt(d)``. Returns ``(output [..., n, d], traces or None)``.
    """
    d = r_id.shape[-1]
    item = item_logits(r_id, params["Wq"], params["Wk"], heads)
    attrs = {name: attribute_logits(e, params[f"Wq.{name}"], params[f"Wk.{name}"], heads) for name, e in attr_embs.items()}
    fused = fuse_logits(item, list(attrs.values()), fusion, params)
    out, probs = _attend(fused, r_id @ params["Wv"], mask, 1.0 / math.sqrt(d), params["Wo"], heads)
    return out, (_trace(layer, item, attrs, fused, probs, heads) if capture else None)


def sas_attention(r: Value, params: Mapping[str, Value], mask, heads: int, capture: bool = False, layer: int = 0):
    """Multi-head causal self-attention with Q, K and V all from ``r``."""
    return nova_attention(r, r, params, mask, heads, capture, layer)


def nova_attention(
    r_fused: Value,
    r_id: Value,
    params: Mapping[str, Value],
    mask,
    heads: int,
    capture: bool = False,
    layer: int = 0,
):
    """Logits from the fused representation, values from the item representation."""
    if r_fused.shape != r_id.shape:
        raise nc.DimensionError(f"fused {r_fused.shape} and item {r_id.shape} representations differ in shape")
    d = r_id.shape[-1]
    logits = item_logits(r_fused, params["Wq"], params["Wk"], heads)
    out, probs = _attend(logits, r_id @ params["Wv"], mask, 1.0 / math.sqrt(d), params["Wo"], heads)
    return out, (_trace(layer, logits, {}, logits, probs, heads) if capture else None)


def causal_mask(lengths, n: int) -> np.ndarray:
    """``[B, n, n]`` boolean mask for left-padded sequences.

    Real query rows see real keys at or before them. Padding rows see only
    themselves so their softmax stays defined; real rows never see them.
    """
    lengths = np.asarray(lengths)
    pos = np.arange(n)
    real = pos[None, :] >= (n - lengths)[:, None]  # [B, n]
    mask = (pos[None, :, None] >= pos[None, None, :]) & real[:, None, :]
    pad_rows = ~real
    diag = np.eye(n, dtype=bool)[None]
    return mask | (pad_rows[:, :, None] & diag)


def witness_parameters(n: int, d: int, heads: int, attr_dims: Sequence[int]):
    """Inputs and projections whose decoupled fused logits have rank ``d_h + sum d_hj``.

    Item stream: ``R = [I_d; 0]`` and ``W_Q = W_K`` with an identity on rows
    ``[0, d_h)``, giving an identity block on positions ``[0, d_h)``. Attribute
    ``j`` puts an identity block on the next ``d_hj`` positions. Attribute
    projections here are ``d_fj x d_hj`` (one head), so the block is placed via
    the embedding rows instead of the projection rows. Returns
    ``(r_id, attr_embs, params)`` for a single head (``heads`` only sets ``d_h``).
    """
    d_h = d // heads
    d_hj = [f // heads for f in attr_dims]
    if n < d_h + sum(d_hj):
        raise ValueError(f"n={n} is smaller than d_h + sum(d_hj) = {d_h + sum(d_hj)}")
    r = np.zeros((n, d))
    r[: min(n, d), : min(n, d)] = np.eye(min(n, d))
    w = np.zeros((d, d_h))
    w[:d_h, :d_h] = np.eye(d_h)
    params = {"Wq": Value(w), "Wk": Value(w), "Wv": Value(np.zeros((d, d_h))), "Wo": Value(np.zeros((d_h, d_h)))}
    embs = {}
    offset = d_h
    for j, (f, k) in enumerate(zip(attr_dims, d_hj)):
        e = np.zeros((n, f))
        e[offset : offset + k, :k] = np.eye(k)
        wf = np.zeros((f, k))
        wf[:k, :k] = np.eye(k)
        name = f"f{j + 1}"
        embs[name] = Value(e)
        params[f"Wq.{name}"] = Value(wf)
        params[f"Wk.{name}"] = Value(wf)
        offset += k
    return Value(r), embs, params
