"""Losses, Adam, and the training loop with auxiliary attribute supervision."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .dataset import PAD, InteractionDataset, SplitView, make_batches, split_leave_one_out
from .evaluation import EvalReport, evaluate
from .model import ModelConfig, ModelParams, forward, init_params, predict_attributes, predict_items
from .numcore import Value

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


class NonFiniteError(FloatingPointError):
    pass


def item_loss(logits: Value, targets) -> Value:
    targets = np.asarray(targets)
    if np.any(targets == PAD):
        raise ValueError("padding index used as a prediction target")
    return nc.cross_entropy(logits, targets)


def attribute_loss(probs: Value, multi_hot, eps: float = BCE_EPS) -> Value:
    """Batch mean of the per-sample binary cross-entropy summed over classes."""
    y = np.asarray(multi_hot, dtype=float)
    p = nc.clip(probs, eps, 1.0 - eps)
    per = nc.add(nc.mul(nc.log(p), y), nc.mul(nc.log(1.0 - p), 1.0 - y))
    return nc.neg(nc.mean(nc.sum(per, axis=-1)))


def total_loss(l_id: Value, l_attrs: Sequence[Value], lam: float) -> Value:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if not l_attrs or lam == 0:
        return l_id
    return l_id + nc.add(*l_attrs) * lam


def batch_loss(batch, config: ModelConfig, params: ModelParams, rng=None, probes=None):
    """Forward one batch; returns ``(total, item_loss, {attr: loss})``."""
    r, _ = forward(batch, config, params, rng=rng, probes=probes)
    l_id = item_loss(predict_items(r, params), batch.targets)
    l_f = {}
    if config.aap and config.side_attributes:
        for name, probs in predict_attributes(r, config, params).items():
            l_f[name] = attribute_loss(probs, batch.target_attributes[name])
    return total_loss(l_id, list(l_f.values()), config.lam), l_id, l_f


class Adam:
    """Adam with bias correction. Moments live here, keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0, grad_clip: float | None = None):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Value] | ModelParams, lr: float) -> None:
        items = list(params.items())
        grads = {}
        for name, p in items:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
            if self.weight_decay:
                decay = self.weight_decay * p.data
                if name == "item_emb" or (name.startswith("attr_emb.") and name != "attr_emb.position"):
                    decay[0] = 0.0  # padding rows are never decayed
                g = g + decay
            grads[name] = g
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in items:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    optimizer: Adam = field(default_factory=Adam)
    rng: np.random.Generator | None = None
    best_epoch: int | None = None
    best_params: ModelParams | None = None
    best_report: EvalReport | None = None
    last_params: ModelParams | None = None
    history: list[dict] = field(default_factory=list)


def train_step(batch, config: ModelConfig, params: ModelParams, state: TrainState) -> dict:
    params.zero_grad()
    loss, l_id, l_f = batch_loss(batch, config, params, rng=state.rng if config.dropout > 0 else None)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {state.step}")
    loss.backward()
    state.optimizer.step(params, config.lr)
    state.step += 1
    entry = {
        "step": state.step,
        "epoch": state.epoch,
        "L_id": float(l_id.data),
        "L_f": [float(v.data) for v in l_f.values()],
        "L_total": value,
        "lr": config.lr,
    }
    state.history.append(entry)
    return entry


def _better(new: EvalReport, old: EvalReport | None, k: int) -> bool:
    if old is None:
        return True
    a = (new[f"recall@{k}"], new[f"ndcg@{k}"])
    b = (old[f"recall@{k}"], old[f"ndcg@{k}"])
    return a > b


def fit(
    dataset: InteractionDataset,
    config: ModelConfig,
    train_view: SplitView | None = None,
    valid_view: SplitView | None = None,
    log_file=None,
    on_epoch: Callable[[int, EvalReport], None] | None = None,
    max_steps: int | None = None,
) -> tuple[ModelParams, TrainState, list[EvalReport]]:
    """Train, validating each epoch; return the best-by-validation parameters.

    Selection is by Recall@10, then NDCG@10, then the earlier epoch (the
    first configured K stands in when 10 is not configured). ``state.last_params``
    holds the final parameters. ``log_file`` is an open text handle receiving
    one JSON line per step.
    """
    if train_view is None or valid_view is None:
        split = split_leave_one_out(dataset)
        train_view = train_view or split.train
        valid_view = valid_view or split.valid
    sizes = {name: dataset.attribute_size(name) for name in dataset.attribute_names}
    params = init_params(config, dataset.n_items, sizes)
    state = TrainState(
        optimizer=Adam(weight_decay=config.weight_decay, grad_clip=config.grad_clip),
        rng=np.random.default_rng([config.seed, 1]),
        best_params=params.copy(),
    )
    sel_k = 10 if 10 in config.eval_ks else config.eval_ks[0]
    reports: list[EvalReport] = []
    for epoch in range(config.epochs):
        state.epoch = epoch
        for batch in make_batches(train_view, config.max_len, config.batch_size, config.seed, epoch):
            entry = train_step(batch, config, params, state)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
            if max_steps is not None and state.step >= max_steps:
                break
        report = evaluate(params, config, valid_view) if len(valid_view) else None
        if report is not None:
            reports.append(report)
            logger.info("epoch %d: %s", epoch, report.to_dict())
            if _better(report, state.best_report, sel_k):
                state.best_report, state.best_epoch = report, epoch
                state.best_params = params.copy()
            if on_epoch is not None:
                on_epoch(epoch, report)
        if max_steps is not None and state.step >= max_steps:
            break
    state.last_params = params
    if state.best_report is None:
        state.best_params = params.copy()
    return state.best_params, state, reports
