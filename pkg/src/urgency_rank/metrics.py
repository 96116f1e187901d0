"""Hard-sort ranking metrics: nDCG@k and Recall@k.

Ties in scores are broken by candidate index (stable descending sort).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .losses import DegenerateSlateError

KS = (1, 3, 5)


def ranking(scores) -> np.ndarray:
    """Candidate indices in descending-score order, ties by lower index first."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _check(labels: np.ndarray) -> None:
    if not np.any(labels > 0):
        raise DegenerateSlateError("slate has no positive label")


def ndcg_at_k(scores, labels, k: int) -> float:
    labels = np.asarray(labels, dtype=np.float64)
    _check(labels)
    gains = np.power(2.0, labels) - 1.0
    disc = 1.0 / np.log2(np.arange(2, min(k, len(labels)) + 2))
    dcg = (gains[ranking(scores)][:k] * disc).sum()
    idcg = (np.sort(gains)[::-1][:k] * disc).sum()
    return float(dcg / idcg)


def recall_at_k(scores, labels, k: int) -> float:
    labels = np.asarray(labels, dtype=np.float64)
    _check(labels)
    pos = labels > 0
    return float(pos[ranking(scores)][:k].sum() / pos.sum())


@dataclass
class MetricReport:
    ndcg: dict[int, float]
    recall: dict[int, float]
    n_slates: int
    per_slate: list[dict] | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        d = {"n_slates": self.n_slates}
        d.update({f"ndcg@{k}": v for k, v in self.ndcg.items()})
        d.update({f"recall@{k}": v for k, v in self.recall.items()})
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def summary(self) -> str:
        cols = [f"nDCG@{k}={self.ndcg[k]:.4f}" for k in self.ndcg]
        cols += [f"Recall@{k}={self.recall[k]:.4f}" for k in self.recall]
        return f"{self.n_slates} slates  " + "  ".join(cols)


def evaluate_scores(scores: Sequence, labels: Sequence, ks=KS, keep_per_slate: bool = False) -> MetricReport:
    """Macro-average metrics over slates.

    Sums are exactly rounded, so the means do not depend on slate order and a
    duplicated dataset gives identical values.
    """
    if len(scores) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    nd = np.zeros((len(scores), len(ks)))
    rc = np.zeros((len(scores), len(ks)))
    for i, (s, y) in enumerate(zip(scores, labels)):
        for j, k in enumerate(ks):
            nd[i, j] = ndcg_at_k(s, y, k)
            rc[i, j] = recall_at_k(s, y, k)
    per = None
    if keep_per_slate:
        per = [{**{f"ndcg@{k}": nd[i, j] for j, k in enumerate(ks)},
                **{f"recall@{k}": rc[i, j] for j, k in enumerate(ks)}} for i in range(len(scores))]
    n = len(scores)
    return MetricReport(
        ndcg={k: math.fsum(nd[:, j]) / n for j, k in enumerate(ks)},
        recall={k: math.fsum(rc[:, j]) / n for j, k in enumerate(ks)},
        n_slates=n,
        per_slate=per,
    )


def evaluate(model, dataset, ks=KS, keep_per_slate: bool = False) -> MetricReport:
    """Evaluate a ``(params, model_config)`` pair on a list of slates or pre-encoded arrays."""
    from .features import SlateArrays, slate_arrays
    from .model import score_arrays

    params, cfg = model
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    items = [d if isinstance(d, SlateArrays) else slate_arrays(d, cfg.encoding) for d in dataset]
    scores = score_arrays(items, params, cfg)
    return evaluate_scores(scores, [a.labels for a in items], ks, keep_per_slate)
