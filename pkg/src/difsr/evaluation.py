"""Full-ranking Recall@K / NDCG@K under leave-one-out."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .dataset import PAD, SplitView, make_batches
from .model import forward, predict_items

EVAL_BATCH = 512


@dataclass
class EvalReport:
    metrics: dict[str, float]
    users: int
    variant: str = ""
    split: str = ""
    wall_clock: float = field(default=0.0, compare=False)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def to_dict(self, timing: bool = False) -> dict:
        out = dict(self.metrics)
        out["users"] = self.users
        out["variant"] = self.variant
        if self.split:
            out["split"] = self.split
        if timing:
            out["wall_clock_s"] = self.wall_clock
        return out


def rank_of_target(scores, target: int, seen: Iterable[int] = ()) -> int:
    """1-based rank of ``target`` among all real items not in ``seen``.

    Ties go to the smaller item index. ``scores[0]`` (padding) never counts.
    """
    if target == PAD:
        raise ValueError("target is the padding index")
    s = np.asarray(scores, dtype=float)
    seen = set(int(x) for x in seen)
    if target in seen:
        raise ValueError(f"target {target} is in the excluded set")
    valid = np.ones(s.shape[0], dtype=bool)
    valid[PAD] = False
    if seen:
        valid[list(seen)] = False
    st = s[target]
    idx = np.arange(s.shape[0])
    better = (s > st) | ((s == st) & (idx < target))
    return int(np.count_nonzero(better & valid)) + 1


def recall_at_k(rank: int, k: int) -> int:
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def batch_ranks(scores: np.ndarray, targets: np.ndarray, excluded: Sequence[Iterable[int]] | None = None) -> np.ndarray:
    """Vectorised :func:`rank_of_target` over rows of ``scores``."""
    s = np.array(scores, dtype=float)
    rows = np.arange(s.shape[0])
    if excluded is not None:
        for r, ex in enumerate(excluded):
            ex = [int(x) for x in ex if int(x) != targets[r]]
            if ex:
                s[r, ex] = np.nan
    s[:, PAD] = np.nan
    st = s[rows, targets][:, None]
    idx = np.arange(s.shape[1])[None, :]
    better = (s > st) | ((s == st) & (idx < targets[:, None]))
    return better.sum(axis=1) + 1


def summarize(ranks: np.ndarray, ks: Sequence[int]) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {}
    for k in ks:
        out[f"recall@{k}"] = float(np.mean(ranks <= k))
    for k in ks:
        out[f"ndcg@{k}"] = float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)))
    return out


def view_ranks(params, config, view: SplitView, exclude_seen: bool | None = None) -> np.ndarray:
    """Target ranks for every sample of ``view``, in view order."""
    exclude_seen = config.exclude_seen if exclude_seen is None else exclude_seen
    out = []
    with nc.no_grad():
        for start, batch in zip(range(0, len(view), EVAL_BATCH), make_batches(view, config.max_len, EVAL_BATCH, shuffle=False)):
            r, _ = forward(batch, config, params)
            scores = predict_items(r, params).data
            seen = [view.context(i) for i in range(start, start + len(batch))] if exclude_seen else None
            out.append(batch_ranks(scores, batch.targets, seen))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def evaluate(params, config, view: SplitView, exclude_seen: bool | None = None) -> EvalReport:
    if len(view) == 0:
        raise ValueError("cannot evaluate an empty view")
    t0 = time.perf_counter()
    ranks = view_ranks(params, config, view, exclude_seen)
    return EvalReport(
        metrics=summarize(ranks, config.eval_ks),
        users=len(view),
        variant=config.variant,
        split=view.name,
        wall_clock=time.perf_counter() - t0,
    )
