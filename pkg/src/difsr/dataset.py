"""Interaction logs, attribute catalogs, 5-core filtering and leave-one-out batches."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
FORMAT_VERSION = 1


class DatasetParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class EmptyDatasetError(ValueError):
    pass


@dataclass
class InteractionDataset:
    """Chronological item sequences plus per-item attribute catalogs.

    Item and attribute-value index 0 is reserved (padding / no value).
    ``item_attributes[name]`` is an ``[n_items + 1, a_j]`` int array holding
    the value indices of every item, zero-padded on the right.
    """

    user_ids: list[str]
    item_ids: list[str]  # item_ids[0] is the padding placeholder
    sequences: list[np.ndarray]
    attribute_vocabs: dict[str, list[str]] = field(default_factory=dict)  # vocab[0] is "no value"
    item_attributes: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids) - 1

    @property
    def attribute_names(self) -> list[str]:
        return list(self.attribute_vocabs)

    def attribute_size(self, name: str) -> int:
        """Number of real values (excluding the reserved index 0)."""
        return len(self.attribute_vocabs[name]) - 1

    def item_index(self, item_id: str) -> int:
        return self._item_lookup()[item_id]

    def _item_lookup(self) -> dict[str, int]:
        lookup = getattr(self, "_lookup_cache", None)
        if lookup is None:
            lookup = {s: i for i, s in enumerate(self.item_ids) if i != PAD}
            object.__setattr__(self, "_lookup_cache", lookup)
        return lookup

    @classmethod
    def from_sequences(
        cls,
        sequences: Sequence[Sequence[int]],
        n_items: int | None = None,
        item_attributes: dict[str, Sequence[Sequence[int]]] | None = None,
        attribute_sizes: dict[str, int] | None = None,
    ) -> "InteractionDataset":
        """Build directly from dense item indices (1-based). Handy for synthetic data.

        ``item_attributes[name][i]`` lists the value indices (1-based) of item ``i``
        for ``i`` in ``0..n_items`` (entry 0 is ignored).
        """
        seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
        if n_items is None:
            n_items = int(max(int(s.max()) for s in seqs if s.size))
        attrs: dict[str, np.ndarray] = {}
        vocabs: dict[str, list[str]] = {}
        for name, rows in (item_attributes or {}).items():
            width = max(1, max((len(r) for r in rows), default=1))
            table = np.zeros((n_items + 1, width), dtype=np.int64)
            for i, r in enumerate(rows):
                if i == PAD:
                    continue
                table[i, : len(r)] = r
            size = (attribute_sizes or {}).get(name, int(table.max()))
            attrs[name] = table
            vocabs[name] = ["<none>"] + [f"{name}:{v}" for v in range(1, size + 1)]
        return cls(
            user_ids=[str(u) for u in range(len(seqs))],
            item_ids=["<pad>"] + [str(i) for i in range(1, n_items + 1)],
            sequences=seqs,
            attribute_vocabs=vocabs,
            item_attributes=attrs,
        )

    def manifest(self) -> dict:
        """Summary statistics in the shape of a dataset-statistics table."""
        actions = int(sum(len(s) for s in self.sequences))
        users, items = self.n_users, self.n_items
        return {
            "format_version": FORMAT_VERSION,
            "users": users,
            "items": items,
            "actions": actions,
            "avg_actions_per_user": actions / users if users else 0.0,
            "avg_actions_per_item": actions / items if items else 0.0,
            "sparsity": 1.0 - actions / (users * items) if users and items else 1.0,
            "attributes": {name: self.attribute_size(name) for name in self.attribute_vocabs},
        }

    # -- binary cache -------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lengths = np.array([len(s) for s in self.sequences], dtype=np.int64)
        flat = np.concatenate(self.sequences) if self.sequences else np.zeros(0, dtype=np.int64)
        arrays = {"lengths": lengths, "items": flat.astype(np.int64)}
        for j, name in enumerate(self.attribute_vocabs):
            arrays[f"attr_{j}"] = self.item_attributes[name]
        with open(d / "dataset.npz", "wb") as fh:
            np.savez(fh, **arrays)
        vocab = {
            "format_version": FORMAT_VERSION,
            "users": self.user_ids,
            "items": self.item_ids,
            "attributes": self.attribute_vocabs,
        }
        (d / "vocab.json").write_text(json.dumps(vocab, ensure_ascii=False))
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "InteractionDataset":
        d = Path(directory)
        vocab = json.loads((d / "vocab.json").read_text())
        if vocab.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format_version {vocab.get('format_version')!r}")
        with np.load(d / "dataset.npz") as z:
            lengths = z["lengths"]
            flat = z["items"]
            attrs = {name: z[f"attr_{j}"] for j, name in enumerate(vocab["attributes"])}
        bounds = np.cumsum(lengths)[:-1]
        seqs = np.split(flat, bounds) if len(lengths) else []
        return cls(vocab["users"], vocab["items"], list(seqs), dict(vocab["attributes"]), attrs)


# ---------------------------------------------------------------- ingestion

def read_interactions(path) -> list[tuple[str, str, int]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            return rows
        if [h.strip() for h in header] != ["user_id", "item_id", "timestamp"]:
            raise DatasetParseError(path, 1, f"expected header user_id/item_id/timestamp, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != 3:
                raise DatasetParseError(path, lineno, f"expected 3 fields, got {len(rec)}")
            user, item, ts = (x.strip() for x in rec)
            if not user or not item:
                raise DatasetParseError(path, lineno, "empty user_id or item_id")
            try:
                stamp = int(ts)
            except ValueError:
                raise DatasetParseError(path, lineno, f"timestamp {ts!r} is not a decimal integer") from None
            rows.append((user, item, stamp))
    return rows


def read_attributes(path) -> dict[str, dict[str, list[str]]]:
    catalog: dict[str, dict[str, list[str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                item = str(obj["item_id"])
                attrs = obj.get("attributes", {})
                if not isinstance(attrs, dict):
                    raise TypeError("attributes must be an object")
                catalog[item] = {str(k): [str(v) for v in (vals if isinstance(vals, list) else [vals])] for k, vals in attrs.items()}
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetParseError(path, lineno, f"bad attribute record: {exc}") from None
    return catalog


def k_core_filter(rows: Sequence[tuple[str, str, int]], k: int = 5) -> list[tuple[str, str, int]]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    rows = list(rows)
    while True:
        users = Counter(r[0] for r in rows)
        items = Counter(r[1] for r in rows)
        kept = [r for r in rows if users[r[0]] >= k and items[r[1]] >= k]
        if len(kept) == len(rows):
            return kept
        rows = kept


def ingest(interactions_path, attributes_path=None, min_count: int = 5, max_values: int = 8) -> InteractionDataset:
    rows = read_interactions(interactions_path)
    catalog = read_attributes(attributes_path) if attributes_path is not None else {}
    if min_count > 1:
        rows = k_core_filter(rows, min_count)
    if not rows:
        raise EmptyDatasetError(f"no interactions left in {interactions_path} after filtering")

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: list[list[tuple[int, int, int]]] = []
    for order, (user, item, ts) in enumerate(rows):
        if user not in user_index:
            user_index[user] = len(user_index)
            per_user.append([])
        if item not in item_index:
            item_index[item] = len(item_index) + 1
        per_user[user_index[user]].append((ts, order, item_index[item]))
    # ties in timestamp keep file order
    sequences = [np.array([it for _, _, it in sorted(events)], dtype=np.int64) for events in per_user]
    item_ids = ["<pad>"] + list(item_index)

    names = sorted({name for rec in catalog.values() for name in rec})
    vocabs: dict[str, list[str]] = {}
    tables: dict[str, np.ndarray] = {}
    for name in names:
        values: dict[str, int] = {}
        per_item: list[list[int]] = [[]]
        for item in item_ids[1:]:
            idx = []
            for v in catalog.get(item, {}).get(name, [])[:max_values]:
                if v not in values:
                    values[v] = len(values) + 1
                if values[v] not in idx:
                    idx.append(values[v])
            per_item.append(idx)
        width = max(1, max(len(x) for x in per_item))
        table = np.zeros((len(item_ids), width), dtype=np.int64)
        for i, idx in enumerate(per_item):
            table[i, : len(idx)] = idx
        vocabs[name] = ["<none>"] + list(values)
        tables[name] = table

    logger.info("ingested %d users, %d items, %d actions", len(user_index), len(item_index), len(rows))
    return InteractionDataset(list(user_index), item_ids, sequences, vocabs, tables)


# ---------------------------------------------------------------- splits and batches

@dataclass
class SplitView:
    """Samples ``(user, k)``: context ``sequences[user][:k]``, target ``sequences[user][k]``."""

    dataset: InteractionDataset
    users: np.ndarray
    ends: np.ndarray
    name: str = "train"

    def __len__(self) -> int:
        return len(self.users)

    def context(self, i: int) -> np.ndarray:
        return self.dataset.sequences[self.users[i]][: self.ends[i]]

    def target(self, i: int) -> int:
        return int(self.dataset.sequences[self.users[i]][self.ends[i]])


@dataclass(frozen=True)
class Split:
    train: SplitView
    valid: SplitView
    test: SplitView
    short_users: int  # sequences shorter than 3, used only for training


def split_leave_one_out(ds: InteractionDataset) -> Split:
    """Last item is the test target, second-to-last the validation target.

    Training samples are every prefix whose target precedes both held-out
    items, so a length-n sequence contributes n - 3 of them. Sequences shorter
    than 3 are used wholly for training.
    """
    tr_u, tr_k, ev_u, short = [], [], [], 0
    for u, seq in enumerate(ds.sequences):
        n = len(seq)
        if n < 3:
            short += 1
            last = n
        else:
            ev_u.append(u)
            last = n - 2
        for k in range(1, last):
            tr_u.append(u)
            tr_k.append(k)
    ev_u = np.asarray(ev_u, dtype=np.int64)
    lengths = np.array([len(ds.sequences[u]) for u in ev_u], dtype=np.int64)
    if short:
        logger.info("%d sequences shorter than 3 used only for training", short)
    return Split(
        train=SplitView(ds, np.asarray(tr_u, dtype=np.int64), np.asarray(tr_k, dtype=np.int64), "train"),
        valid=SplitView(ds, ev_u, lengths - 2, "valid"),
        test=SplitView(ds, ev_u, lengths - 1, "test"),
        short_users=short,
    )


def prefix_view(ds: InteractionDataset, min_context: int = 1) -> SplitView:
    """Every prefix of every sequence as a sample (no held-out items)."""
    users, ends = [], []
    for u, seq in enumerate(ds.sequences):
        for k in range(min_context, len(seq)):
            users.append(u)
            ends.append(k)
    return SplitView(ds, np.asarray(users, dtype=np.int64), np.asarray(ends, dtype=np.int64), "prefix")


@dataclass
class Batch:
    items: np.ndarray  # [B, n], left-padded with 0
    attributes: dict[str, np.ndarray]  # name -> [B, n, a_j]
    lengths: np.ndarray  # [B]
    targets: np.ndarray  # [B]
    target_attributes: dict[str, np.ndarray]  # name -> [B, |f_j|] multi-hot
    users: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.lengths)


def multi_hot(values: np.ndarray, size: int) -> np.ndarray:
    """``values`` is ``[B, a]`` of 1-based indices (0 = none) -> ``[B, size]``."""
    out = np.zeros((values.shape[0], size + 1))
    rows = np.repeat(np.arange(values.shape[0]), values.shape[1])
    out[rows, values.reshape(-1)] = 1.0
    return out[:, 1:]


def collate(
    ds: InteractionDataset,
    contexts: Sequence[np.ndarray],
    targets: Sequence[int],
    max_len: int,
    users: np.ndarray | None = None,
) -> Batch:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    b = len(contexts)
    items = np.zeros((b, max_len), dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    for r, ctx in enumerate(contexts):
        tail = np.asarray(ctx)[-max_len:]
        lengths[r] = len(tail)
        if len(tail):
            items[r, max_len - len(tail):] = tail
    tgt = np.asarray(targets, dtype=np.int64)
    attrs = {name: table[items] for name, table in ds.item_attributes.items()}
    tattrs = {name: multi_hot(table[tgt], ds.attribute_size(name)) for name, table in ds.item_attributes.items()}
    return Batch(items, attrs, lengths, tgt, tattrs, users)


def make_batches(
    view: SplitView,
    max_len: int,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield padded batches; the order depends only on ``(seed, epoch)``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    order = np.arange(len(view))
    if shuffle:
        np.random.default_rng([seed, epoch]).shuffle(order)
    for start in range(0, len(order), batch_size):
        sel = order[start : start + batch_size]
        contexts = [view.context(i) for i in sel]
        targets = [view.target(i) for i in sel]
        yield collate(view.dataset, contexts, targets, max_len, users=view.users[sel])
