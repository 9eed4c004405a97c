"""Embedding tables, the stacked attention blocks, prediction heads and checkpoints."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numcore as nc
from .attention import FUSIONS, causal_mask, dif_attention, nova_attention, sas_attention
from .dataset import Batch
from .numcore import Value

VARIANTS = ("sasrec", "sasrec_f", "nova", "dif")
POSITION = "position"
INIT_STD = 0.02
LN_EPS = 1e-12
PAD_LOGIT = -1e30
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    dim: int


@dataclass
class ModelConfig:
    """Model and training hyperparameters; JSON keys match the field names except ``lambda``."""

    variant: str = "dif"
    d: int = 64
    heads: int = 2
    layers: int = 2
    max_len: int = 50
    attributes: list[AttributeSpec] = field(default_factory=list)
    fusion: str = "add"
    dropout: float = 0.1
    aap: bool = True
    lam: float = 10.0
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0
    eval_ks: list[int] = field(default_factory=lambda: [10, 20])
    exclude_seen: bool = True
    weight_decay: float = 0.0
    grad_clip: float | None = None

    def __post_init__(self):
        self.attributes = [a if isinstance(a, AttributeSpec) else AttributeSpec(**a) for a in self.attributes]
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        for key in ("d", "heads", "max_len", "batch_size"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.layers < 0 or self.epochs < 0:
            raise ConfigError("layers and epochs must be >= 0")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate attribute names in {names}")
        for a in self.attributes:
            if a.dim < 1 or a.dim % self.heads:
                raise ConfigError(f"attribute {a.name!r}: dim {a.dim} must be a positive multiple of heads={self.heads}")
            if a.dim > self.d:
                raise ConfigError(f"attribute {a.name!r}: dim {a.dim} exceeds d={self.d}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ConfigError("eval_ks must be a non-empty list of positive integers")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")

    @property
    def side_attributes(self) -> list[AttributeSpec]:
        """Configured item attributes, excluding the positional stream."""
        return [a for a in self.attributes if a.name != POSITION]

    @property
    def position_dim(self) -> int:
        for a in self.attributes:
            if a.name == POSITION:
                return a.dim
        return self.d

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            val = getattr(self, f.name)
            out[key] = [asdict(a) for a in val] if f.name == "attributes" else val
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ModelConfig":
        known = {("lambda" if f.name == "lam" else f.name): f.name for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        kwargs = {known[k]: v for k, v in raw.items()}
        for a in kwargs.get("attributes", []):
            if isinstance(a, Mapping) and set(a) != {"name", "dim"}:
                raise ConfigError(f"attribute entries need exactly 'name' and 'dim', got {sorted(a)}")
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "ModelConfig":
        raw = self.to_dict()
        raw.update({("lambda" if k == "lam" else k): v for k, v in changes.items()})
        return ModelConfig.from_dict(raw)


# ---------------------------------------------------------------- parameters

@dataclass
class ModelParams:
    tensors: dict[str, Value]
    n_items: int
    attribute_sizes: dict[str, int]

    def __getitem__(self, name: str) -> Value:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for v in self.tensors.values():
            v.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams({k: nc.parameter(v.data) for k, v in self.tensors.items()}, self.n_items, dict(self.attribute_sizes))

    def scope(self, prefix: str) -> dict[str, Value]:
        """Tensors under ``prefix`` with the prefix stripped."""
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _trunc_normal(name: str, shape, seed: int, std: float = INIT_STD) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, n_items: int, attribute_sizes: Mapping[str, int]) -> ModelParams:
    """Truncated-normal (std 0.02) tables and projections, seeded per tensor name.

    Seeding by name means two variants built from the same seed share every
    tensor they have in common.
    """
    d, n, s = config.d, config.max_len, config.seed
    missing = [a.name for a in config.side_attributes if a.name not in attribute_sizes]
    if missing:
        raise ConfigError(f"config attributes {missing} are not in the dataset")
    t: dict[str, np.ndarray] = {}

    def table(name, rows, width):
        w = _trunc_normal(name, (rows + 1, width), s)
        w[0] = 0.0
        t[name] = w

    table("item_emb", n_items, d)
    dif = config.variant == "dif"
    if dif:
        t[f"attr_emb.{POSITION}"] = _trunc_normal(f"attr_emb.{POSITION}", (n, config.position_dim), s)
    else:
        t["pos_emb"] = _trunc_normal("pos_emb", (n, d), s)
    for a in config.side_attributes:
        table(f"attr_emb.{a.name}", attribute_sizes[a.name], a.dim)
        if config.variant in ("sasrec_f", "nova"):
            t[f"proj.{a.name}"] = _trunc_normal(f"proj.{a.name}", (a.dim, d), s)

    streams = [(POSITION, config.position_dim)] + [(a.name, a.dim) for a in config.side_attributes] if dif else []
    for layer in range(config.layers):
        p = f"layers.{layer}."
        for w in ("Wq", "Wk", "Wv", "Wo"):
            t[p + "attn." + w] = _trunc_normal(p + "attn." + w, (d, d), s)
        for name, dim in streams:
            for w in ("Wq", "Wk"):
                key = f"{p}attn.{w}.{name}"
                t[key] = _trunc_normal(key, (dim, dim), s)
        if dif and config.fusion == "gate":
            t[p + "attn.gate"] = np.zeros((config.heads, 1 + len(streams)))
        if dif and config.fusion == "concat":
            t[p + "attn.concat_w"] = np.ones((config.heads, 1 + len(streams)))
            t[p + "attn.concat_b"] = np.zeros(config.heads)
        t[p + "ffn.W1"] = _trunc_normal(p + "ffn.W1", (d, 4 * d), s)
        t[p + "ffn.b1"] = np.zeros(4 * d)
        t[p + "ffn.W2"] = _trunc_normal(p + "ffn.W2", (4 * d, d), s)
        t[p + "ffn.b2"] = np.zeros(d)
        t[p + "ln.gain"] = np.ones(d)
        t[p + "ln.bias"] = np.zeros(d)
    if config.aap:
        for a in config.side_attributes:
            t[f"aap.W.{a.name}"] = _trunc_normal(f"aap.W.{a.name}", (attribute_sizes[a.name], d), s)
            t[f"aap.b.{a.name}"] = np.zeros(attribute_sizes[a.name])
    sizes = {a.name: int(attribute_sizes[a.name]) for a in config.side_attributes}
    return ModelParams({k: nc.parameter(v) for k, v in t.items()}, n_items, sizes)


# ---------------------------------------------------------------- forward

def embed(batch: Batch, config: ModelConfig, params: ModelParams) -> tuple[Value, dict[str, Value]]:
    """Item embeddings and mean-pooled attribute embeddings per position.

    A position with no attribute value gets the zero vector.
    """
    e_id = nc.gather_rows(params["item_emb"], batch.items)
    attrs = {}
    for a in config.side_attributes:
        idx = batch.attributes[a.name]  # [B, n, a_j]
        real = (idx > 0).astype(float)
        count = real.sum(axis=-1, keepdims=True)
        weights = real / np.maximum(count, 1.0)
        gathered = nc.gather_rows(params[f"attr_emb.{a.name}"], idx)  # [B, n, a_j, d_f]
        attrs[a.name] = nc.sum(gathered * weights[..., None], axis=-2)
    return e_id, attrs


def _block(x: Value, attn_out: Value, lp: Mapping[str, Value], dropout: float, rng) -> Value:
    a = x + nc.dropout(attn_out, dropout, rng)
    f = nc.gelu(a @ lp["ffn.W1"] + lp["ffn.b1"]) @ lp["ffn.W2"] + lp["ffn.b2"]
    return nc.layer_norm(a + nc.dropout(f, dropout, rng), lp["ln.gain"], lp["ln.bias"], LN_EPS)


def forward(
    batch: Batch,
    config: ModelConfig,
    params: ModelParams,
    capture_traces: bool = False,
    rng: np.random.Generator | None = None,
    probes: dict | None = None,
):
    """Final item representation ``[B, n, d]`` and, optionally, attention traces.

    ``rng`` enables dropout (training); ``None`` runs deterministically.
    ``probes`` (a dict) receives the embedding-level nodes at the fusion point:
    ``"item"``, ``"position"``, ``"attr:<name>"`` (the addends actually summed or
    attended over) and ``"side_sum"`` for the non-invasive variant.
    """
    n = config.max_len
    if batch.items.shape[1] != n:
        raise nc.DimensionError(f"batch length {batch.items.shape[1]} != max_len {n}")
    b = batch.items.shape[0]
    probes = {} if probes is None else probes
    e_id, attrs = embed(batch, config, params)
    probes["item"] = e_id
    positions = np.broadcast_to(np.arange(n), (b, n))
    mask = causal_mask(batch.lengths, n)
    variant = config.variant
    side = None
    streams: dict[str, Value] = {}

    if variant == "dif":
        r = e_id
        streams[POSITION] = nc.gather_rows(params[f"attr_emb.{POSITION}"], positions)
        streams.update(attrs)
        for name, v in streams.items():
            probes[f"attr:{name}"] = v
    else:
        pos = nc.gather_rows(params["pos_emb"], positions)
        probes["position"] = pos
        projected = {name: e @ params[f"proj.{name}"] for name, e in attrs.items()} if variant != "sasrec" else {}
        for name, v in projected.items():
            probes[f"attr:{name}"] = v
        if variant == "sasrec_f":
            r = nc.add(e_id, pos, *projected.values())
        else:
            r = nc.add(e_id, pos)
            if variant == "nova" and projected:
                side = nc.add(*projected.values())
                probes["side_sum"] = side

    traces = [] if capture_traces else None
    for layer in range(config.layers):
        ap = params.scope(f"layers.{layer}.attn.")
        lp = params.scope(f"layers.{layer}.")
        if variant == "dif":
            out, tr = dif_attention(r, streams, ap, mask, config.heads, config.fusion, capture_traces, layer)
        elif variant == "nova":
            fused = r + side if side is not None else r
            out, tr = nova_attention(fused, r, ap, mask, config.heads, capture_traces, layer)
        else:
            out, tr = sas_attention(r, ap, mask, config.heads, capture_traces, layer)
        if capture_traces:
            traces.extend(tr)
        r = _block(r, out, lp, config.dropout, rng)
    return r, traces


def last_position(r: Value) -> Value:
    """Representation at the last (always real, given left padding) position."""
    return r[(Ellipsis, -1, slice(None))]


def predict_items(r: Value, params: ModelParams) -> Value:
    """Logits over ``[pad, item 1, ..., item |I|]``; the padding column is pinned to -1e30."""
    logits = last_position(r) @ nc.swapaxes(params["item_emb"], 0, 1)
    col = np.zeros(logits.shape[-1], dtype=bool)
    col[0] = True
    return nc.masked_fill(logits, col, PAD_LOGIT)


def predict_attributes(r: Value, config: ModelConfig, params: ModelParams) -> dict[str, Value]:
    """Sigmoid probabilities per attribute value (index ``v - 1`` for value ``v``)."""
    if not config.aap:
        raise ConfigError("attribute predictors are disabled (aap=false)")
    last = last_position(r)
    return {
        a.name: nc.sigmoid(last @ nc.swapaxes(params[f"aap.W.{a.name}"], 0, 1) + params[f"aap.b.{a.name}"])
        for a in config.side_attributes
    }


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: Mapping | None = None) -> None:
    """Write ``<path>`` (JSON manifest) and ``<path minus .json>.bin`` (little-endian f64 blob).

    ``offset`` and ``length`` in the manifest count float64 elements.
    """
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    tensors, chunks, offset = {}, [], 0
    for name, v in sorted(params.items()):
        arr = np.ascontiguousarray(v.data, dtype="<f8")
        tensors[name] = {"shape": list(arr.shape), "dtype": "f64", "offset": offset, "length": int(arr.size)}
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "blob": blob_path.name,
        "config": config.to_dict(),
        "n_items": params.n_items,
        "attribute_sizes": params.attribute_sizes,
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = dict(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {manifest.get('format_version')!r}")
    blob = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f8")
    tensors = {}
    for name, meta in manifest["tensors"].items():
        if meta["dtype"] != "f64":
            raise ValueError(f"tensor {name}: unsupported dtype {meta['dtype']}")
        chunk = blob[meta["offset"] : meta["offset"] + meta["length"]]
        tensors[name] = nc.parameter(chunk.reshape(meta["shape"]))
    config = ModelConfig.from_dict(manifest["config"])
    return ModelParams(tensors, int(manifest["n_items"]), dict(manifest["attribute_sizes"])), config
