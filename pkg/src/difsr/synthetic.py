"""Synthetic interaction data with known structure, plus file writers."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import InteractionDataset, SplitView
from .evaluation import batch_ranks, summarize


@dataclass
class PlantedSignal:
    """Next item's category is ``transition[category of current item]``."""

    dataset: InteractionDataset
    item_category: np.ndarray  # [n_items + 1], 0 for padding
    transition: np.ndarray  # [n_categories + 1], 0 -> 0


def planted_category_dataset(
    n_items: int = 1000,
    n_categories: int = 20,
    n_users: int = 2000,
    length: int = 20,
    seed: int = 0,
) -> PlantedSignal:
    rng = np.random.default_rng(seed)
    item_category = np.zeros(n_items + 1, dtype=np.int64)
    item_category[1:] = rng.permutation(np.arange(n_items) % n_categories) + 1
    members = [np.flatnonzero(item_category == c) for c in range(n_categories + 1)]
    transition = np.zeros(n_categories + 1, dtype=np.int64)
    transition[1:] = rng.permutation(n_categories) + 1
    seqs = []
    for _ in range(n_users):
        cat = int(rng.integers(1, n_categories + 1))
        seq = []
        for _ in range(length):
            seq.append(int(rng.choice(members[cat])))
            cat = int(transition[cat])
        seqs.append(seq)
    ds = InteractionDataset.from_sequences(
        seqs, n_items, {"category": [[int(c)] if c else [] for c in item_category]}, {"category": n_categories}
    )
    return PlantedSignal(ds, item_category, transition)


def category_oracle(signal: PlantedSignal, view: SplitView, ks=(10, 20), exclude_seen: bool = True) -> dict:
    """Metrics of the predictor that knows the transition table.

    It scores every item of the true next category 1 and all others 0
    (ties by index). ``bayes_recall@K`` is the expected recall of a uniform
    draw inside the category: ``mean(min(1, K / candidates))``.
    """
    n = signal.dataset.n_items
    scores = np.zeros((len(view), n + 1))
    seen = []
    for i in range(len(view)):
        ctx = view.context(i)
        nxt = signal.transition[signal.item_category[ctx[-1]]]
        scores[i, signal.item_category == nxt] = 1.0
        seen.append(ctx if exclude_seen else ())
    targets = np.array([view.target(i) for i in range(len(view))])
    out = summarize(batch_ranks(scores, targets, seen), ks)
    for k in ks:
        cands = []
        for i in range(len(view)):
            tgt = targets[i]
            cat_items = set(np.flatnonzero(signal.item_category == signal.item_category[tgt]).tolist())
            cands.append(len(cat_items - (set(int(x) for x in seen[i]) - {int(tgt)})))
        out[f"bayes_recall@{k}"] = float(np.mean(np.minimum(1.0, k / np.asarray(cands))))
    return out


def uniform_random_dataset(n_items: int = 200, n_users: int = 300, length: int = 10, seed: int = 0) -> InteractionDataset:
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(1, n_items + 1, length) for _ in range(n_users)]
    cats = [[]] + [[int(c)] for c in rng.integers(1, 11, n_items)]
    return InteractionDataset.from_sequences(seqs, n_items, {"category": cats}, {"category": 10})


def memorization_dataset(n_sequences: int = 64, length: int = 8, n_items: int = 200, seed: int = 0) -> InteractionDataset:
    """Random sequences with distinct first items, so every prefix has one continuation."""
    rng = np.random.default_rng(seed)
    firsts = rng.choice(np.arange(1, n_items + 1), n_sequences, replace=False)
    seqs = [np.concatenate([[f], rng.integers(1, n_items + 1, length - 1)]) for f in firsts]
    cats = [[]] + [[int(c)] for c in rng.integers(1, 9, n_items)]
    return InteractionDataset.from_sequences(seqs, n_items, {"category": cats}, {"category": 8})


def write_files(ds: InteractionDataset, interactions_path, attributes_path) -> None:
    """Write ``ds`` as an interactions TSV and an attributes JSONL (timestamps = positions)."""
    with open(interactions_path, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\ttimestamp\n")
        for u, seq in zip(ds.user_ids, ds.sequences):
            for t, item in enumerate(seq):
                fh.write(f"u{u}\ti{ds.item_ids[item]}\t{t}\n")
    with open(attributes_path, "w", encoding="utf-8") as fh:
        for i in range(1, ds.n_items + 1):
            attrs = {
                name: [ds.attribute_vocabs[name][v] for v in table[i] if v]
                for name, table in ds.item_attributes.items()
            }
            fh.write(json.dumps({"item_id": f"i{ds.item_ids[i]}", "attributes": attrs}) + "\n")
