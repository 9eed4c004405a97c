"""Attention-rank profiles, gradient-rigidity checks and attention export."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .attention import attribute_logits, fuse_logits, item_logits, witness_parameters, write_traces
from .dataset import Batch, InteractionDataset, collate, multi_hot
from .model import ModelConfig, ModelParams, forward, init_params
from .train import batch_loss

logger = logging.getLogger(__name__)

EARLY_FUSION = ("sasrec_f", "nova")
REORDER_TOL = 1e-15


class RigidityViolation(AssertionError):
    pass


def random_batch(
    config: ModelConfig,
    n_items: int,
    attribute_sizes: Mapping[str, int],
    rng: np.random.Generator,
    batch_size: int = 1,
) -> Batch:
    """Full-length sequences of distinct random items with one random value per attribute."""
    n = config.max_len
    distinct = n_items >= n
    items = np.stack([rng.choice(np.arange(1, n_items + 1), n, replace=not distinct) for _ in range(batch_size)])
    targets = rng.integers(1, n_items + 1, batch_size)
    attrs, tattrs = {}, {}
    for name, size in attribute_sizes.items():
        attrs[name] = rng.integers(1, size + 1, (batch_size, n, 1))
        tattrs[name] = multi_hot(rng.integers(1, size + 1, (batch_size, 1)), size)
    return Batch(items, attrs, np.full(batch_size, n), targets, tattrs)


def _default_sizes(config: ModelConfig, n_items: int | None, attribute_sizes):
    n_items = n_items or max(4 * config.max_len, 100)
    sizes = dict(attribute_sizes or {a.name: 20 for a in config.side_attributes})
    return n_items, sizes


def logit_ranks(params: ModelParams, config: ModelConfig, batch: Batch, rel_tol: float) -> list[dict]:
    """Numeric rank of each pre-softmax (fused) logit matrix, per sample, layer and head."""
    with nc.no_grad():
        _, traces = forward(batch, config, params, capture_traces=True)
    rows = []
    for t in traces:
        for s in range(t.fused.shape[0]):
            rows.append({"variant": config.variant, "layer": t.layer, "head": t.head, "sample": s,
                         "rank": nc.numeric_rank(t.fused[s], rel_tol).rank, "tol": rel_tol})
    return rows


def rank_profile(
    config: ModelConfig,
    trials: int,
    rel_tol: float = 1e-8,
    variants: Sequence[str] = ("sasrec_f", "nova", "dif"),
    n_items: int | None = None,
    attribute_sizes: Mapping[str, int] | None = None,
) -> list[dict]:
    """Per-trial ranks of logit matrices at random initialisation.

    Trial ``t`` uses parameter seed ``config.seed + t`` and a fresh random
    batch; every variant sees the same batch in a given trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n_items, sizes = _default_sizes(config, n_items, attribute_sizes)
    rows = []
    for trial in range(trials):
        batch = random_batch(config, n_items, sizes, np.random.default_rng([config.seed, trial]))
        for variant in variants:
            cfg = config.replace(variant=variant, seed=config.seed + trial)
            params = init_params(cfg, n_items, sizes)
            for row in logit_ranks(params, cfg, batch, rel_tol):
                row.pop("sample")
                row["trial"] = trial
                rows.append(row)
    return rows


def summarize_ranks(rows: Iterable[dict]) -> list[dict]:
    """Mean and max rank per (variant, layer, head)."""
    groups: dict[tuple, list[int]] = {}
    for r in rows:
        groups.setdefault((r["variant"], r["layer"], r["head"]), []).append(r["rank"])
    return [
        {"variant": v, "layer": l, "head": h, "mean_rank": float(np.mean(ranks)), "max_rank": int(max(ranks))}
        for (v, l, h), ranks in sorted(groups.items())
    ]


def write_rank_csv(rows: Iterable[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "layer", "head", "trial", "rank", "tol"])
        for r in rows:
            w.writerow([r["variant"], r["layer"], r["head"], r.get("trial", r.get("sample", 0)), r["rank"], r["tol"]])


@dataclass(frozen=True)
class WitnessResult:
    rank: int
    expected: int
    fused: np.ndarray
    block_identity: bool


def witness_rank(n: int, d: int, heads: int, attr_dims: Sequence[int], rel_tol: float = 1e-8) -> WitnessResult:
    """Fused decoupled logits for the explicit high-rank construction."""
    r, embs, params = witness_parameters(n, d, heads, attr_dims)
    item = item_logits(r, params["Wq"], params["Wk"], 1, head=0)
    attrs = [attribute_logits(e, params[f"Wq.{k}"], params[f"Wk.{k}"], 1, head=0) for k, e in embs.items()]
    fused = fuse_logits(item, attrs, "add").data
    expected = d // heads + sum(f // heads for f in attr_dims)
    target = np.zeros((n, n))
    target[:expected, :expected] = np.eye(expected)
    return WitnessResult(nc.numeric_rank(fused, rel_tol).rank, expected, fused, bool(np.array_equal(fused, target)))


# ---------------------------------------------------------------- gradients

def _first_difference(a: np.ndarray, b: np.ndarray) -> str:
    idx = np.argwhere(a != b)
    if not len(idx):
        return ""
    i = tuple(int(x) for x in idx[0])
    return f"first difference at {i}: {a[i]!r} vs {b[i]!r}"


def gradient_rigidity_check(
    variant: str,
    config: ModelConfig,
    seed: int = 0,
    n_items: int | None = None,
    attribute_sizes: Mapping[str, int] | None = None,
    strict: bool = True,
) -> dict:
    """One forward/backward on a random batch; compare gradients at the fusion point.

    Early fusion: the item, position and every projected attribute addend must
    get identical gradients. Non-invasive: the attribute addends must agree with
    each other. Decoupled: differences are only reported. With ``strict`` a
    violated expectation raises :class:`RigidityViolation`.
    """
    n_items, sizes = _default_sizes(config, n_items, attribute_sizes)
    cfg = config.replace(variant=variant, seed=seed, dropout=0.0, fusion="add")
    params = init_params(cfg, n_items, sizes)
    batch = random_batch(cfg, n_items, sizes, np.random.default_rng([seed, 7]), batch_size=4)
    probes: dict = {}
    loss, _, _ = batch_loss(batch, cfg, params, probes=probes)
    loss.backward()
    grads = {k: v.grad for k, v in probes.items() if k != "side_sum" and v.grad is not None}
    attrs = sorted(k for k in grads if k.startswith("attr:"))

    if variant == "sasrec_f":
        expected_equal = [("item", "position")] + [("item", a) for a in attrs]
        other = []
    elif variant == "nova":
        expected_equal = [(a, b) for i, a in enumerate(attrs) for b in attrs[i + 1 :]]
        other = [("item", a) for a in attrs]
    else:
        keys = ["item"] + attrs
        expected_equal = []
        other = [(a, b) for i, a in enumerate(keys) for b in keys[i + 1 :] if grads[a].shape == grads[b].shape]

    verdict = {"variant": variant, "seed": seed, "pairs": [], "equal_pairs": [], "equal": True, "warning": None}
    for a, b in expected_equal + other:
        ga, gb = grads[a], grads[b]
        diff = float(np.max(np.abs(ga - gb))) if ga.shape == gb.shape else float("inf")
        bitwise = ga.shape == gb.shape and np.array_equal(ga, gb)
        verdict["pairs"].append({"a": a, "b": b, "max_abs_diff": diff, "bitwise_equal": bool(bitwise), "expected_equal": (a, b) in expected_equal})
        if bitwise:
            verdict["equal_pairs"].append([a, b])
        if (a, b) in expected_equal and not bitwise:
            if diff <= REORDER_TOL:
                verdict["warning"] = f"{a} vs {b} equal only to {diff:.1e}; accumulation order differs"
                logger.warning(verdict["warning"])
            else:
                verdict["equal"] = False
                msg = f"gradients of {a} and {b} differ (max {diff:.3e}); {_first_difference(ga, gb)}"
                if strict:
                    raise RigidityViolation(msg)
                verdict.setdefault("violations", []).append(msg)
    if variant == "dif":
        verdict["equal"] = all(p["bitwise_equal"] for p in verdict["pairs"])
    return verdict


# ---------------------------------------------------------------- attention export

def export_attention(params: ModelParams, config: ModelConfig, dataset: InteractionDataset, user: str, out_path):
    """Write traces for ``user``'s test context (all but the last item) as JSON Lines."""
    try:
        u = dataset.user_ids.index(user)
    except ValueError:
        raise LookupError(f"unknown user {user!r}") from None
    seq = dataset.sequences[u]
    if len(seq) < 3:
        raise LookupError(f"user {user!r} has no test sample (sequence shorter than 3)")
    batch = collate(dataset, [seq[:-1]], [int(seq[-1])], config.max_len)
    with nc.no_grad():
        _, traces = forward(batch, config, params, capture_traces=True)
    write_traces(traces, out_path, sample=0)
    return traces
