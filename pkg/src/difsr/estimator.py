"""scikit-learn style wrapper around :func:`difsr.train.fit`."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from .dataset import InteractionDataset, collate, split_leave_one_out
from .evaluation import evaluate
from .model import PAD_LOGIT, ModelConfig, forward, predict_items


class SequentialRecommender(BaseEstimator):
    """Next-item recommender over an :class:`InteractionDataset`.

    ``fit`` trains on the leave-one-out training split and selects the best
    epoch on the validation split. ``predict`` takes either a dataset (one
    query per user: the whole sequence) or a list of item-index sequences and
    returns top-``k`` item indices per row. ``score`` is test Recall@10.
    """

    def __init__(
        self,
        variant: str = "dif",
        d: int = 64,
        heads: int = 2,
        layers: int = 2,
        max_len: int = 50,
        attributes: Sequence[dict] = (),
        fusion: str = "add",
        dropout: float = 0.1,
        aap: bool = True,
        lambda_: float = 10.0,
        lr: float = 1e-3,
        batch_size: int = 256,
        epochs: int = 50,
        seed: int = 0,
        exclude_seen: bool = True,
        weight_decay: float = 0.0,
        grad_clip: float | None = None,
    ):
        self.variant = variant
        self.d = d
        self.heads = heads
        self.layers = layers
        self.max_len = max_len
        self.attributes = attributes
        self.fusion = fusion
        self.dropout = dropout
        self.aap = aap
        self.lambda_ = lambda_
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.exclude_seen = exclude_seen
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip

    def _config(self) -> ModelConfig:
        params = self.get_params()
        params["lam"] = params.pop("lambda_")
        params["attributes"] = [dict(a) for a in params["attributes"]]
        return ModelConfig(**params)

    def fit(self, X: InteractionDataset, y=None) -> "SequentialRecommender":
        from .train import fit

        if not isinstance(X, InteractionDataset):
            raise TypeError(f"fit expects an InteractionDataset, got {type(X).__name__}")
        config = self._config()
        split = split_leave_one_out(X)
        params, state, reports = fit(X, config, split.train, split.valid)
        self.config_ = config
        self.params_ = params
        self.dataset_ = X
        self.best_epoch_ = state.best_epoch
        self.history_ = state.history
        self.validation_reports_ = reports
        return self

    def _contexts(self, X) -> list[np.ndarray]:
        if isinstance(X, InteractionDataset):
            return [np.asarray(s) for s in X.sequences]
        out = []
        for seq in X:
            seq = np.asarray(seq, dtype=np.int64)
            if seq.ndim != 1 or not len(seq):
                raise ValueError("each query must be a non-empty 1-D item sequence")
            if seq.min() < 1 or seq.max() > self.dataset_.n_items:
                raise IndexError(f"item index out of range 1..{self.dataset_.n_items}")
            out.append(seq)
        return out

    def decision_function(self, X) -> np.ndarray:
        """Item scores ``[N, n_items + 1]``; column 0 (padding) is ``PAD_LOGIT``."""
        check_is_fitted(self, "params_")
        contexts = self._contexts(X)
        scores = []
        with nc.no_grad():
            for start in range(0, len(contexts), 512):
                chunk = contexts[start : start + 512]
                batch = collate(self.dataset_, chunk, np.ones(len(chunk), dtype=np.int64), self.config_.max_len)
                r, _ = forward(batch, self.config_, self.params_)
                scores.append(predict_items(r, self.params_).data)
        return np.concatenate(scores) if scores else np.zeros((0, self.dataset_.n_items + 1))

    def predict(self, X, k: int = 10) -> np.ndarray:
        """Top-``k`` item indices per query, best first (ties by lower index)."""
        scores = self.decision_function(X)
        if self.exclude_seen:
            for row, ctx in zip(scores, self._contexts(X)):
                row[ctx] = PAD_LOGIT
        order = np.argsort(-scores, axis=1, kind="stable")
        return order[:, :k]

    def score(self, X: InteractionDataset, y=None) -> float:
        check_is_fitted(self, "params_")
        return evaluate(self.params_, self.config_, split_leave_one_out(X).test)["recall@10"]
