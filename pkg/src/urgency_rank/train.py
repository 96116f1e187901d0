"""Mini-batch Adam training with validation early stopping, plus the ablation harness.

A batch is split into ``shards`` contiguous slices. Each shard computes the
gradient of ``sum(per-slate loss) / batch_size`` on its slice against a
read-only parameter snapshot; shard gradients are summed in shard order and a
single optimizer step follows. With one shard this is plain mini-batch
training, and the batch gradient does not depend on the shard count beyond
floating-point summation order.

Inside a shard, slates are grouped by history length into micro-batches so
that padding stays small; micro-batching does not change the gradient.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .features import SlateArrays, collate, slate_arrays
from .losses import neural_ndcg_per_slate, pointwise_per_slate
from .metrics import KS, MetricReport, evaluate_scores
from .model import DinParams, ModelConfig, forward, init_params, score_arrays

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 512
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 20
    patience: int = 5
    loss: str = "listwise"  # or "pointwise"
    tau: float = 1.0
    sinkhorn_iters: int = 30
    clip_norm: float | None = 10.0
    seed: int = 0
    shards: int = 1
    micro_batch: int = 128

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.shards < 1 or self.micro_batch < 1:
            raise ValueError("batch_size, shards and micro_batch must be >= 1")
        if self.loss not in ("listwise", "pointwise"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: DinParams) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: DinParams, grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[DinParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if set(grads) != set(params):
        raise KeyError(f"gradient keys differ from parameters: {sorted(set(grads) ^ set(params))}")
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        new_p[k] = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return DinParams.from_arrays(new_p), AdamState(new_m, new_v, t)


def slate_losses(batch, params: DinParams, model_cfg: ModelConfig, cfg: TrainConfig) -> ad.Tensor:
    """Per-slate scalar losses for a padded batch, shape (B,)."""
    scores, logits, _ = forward(batch, params, model_cfg)
    if cfg.loss == "pointwise":
        return pointwise_per_slate(logits, batch.labels, batch.cand_mask)
    return neural_ndcg_per_slate(scores, batch.labels, batch.cand_mask, cfg.tau, cfg.sinkhorn_iters)


def micro_batches(items: Sequence[SlateArrays], size: int) -> list[list[SlateArrays]]:
    order = sorted(range(len(items)), key=lambda i: (items[i].n_hist, items[i].n_cand, i))
    return [[items[i] for i in order[s:s + size]] for s in range(0, len(order), size)]


def shard_gradients(items: Sequence[SlateArrays], params: DinParams, model_cfg: ModelConfig,
                    cfg: TrainConfig, scale: float) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of ``scale * sum(per-slate loss)`` over ``items``, and the unscaled loss sum."""
    grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    total = 0.0
    for chunk in micro_batches(items, cfg.micro_batch):
        batch = collate(chunk)
        with ad.Tape() as tape:
            per = slate_losses(batch, params, model_cfg, cfg)
            loss = ad.sum_(per) * scale
        total += float(per.data.sum())
        g = tape.backward(loss)
        tape.release()
        for k, p in params.items():
            if p in g:
                grads[k] += g[p]
    return grads, total


def batch_gradients(items: Sequence[SlateArrays], params: DinParams, model_cfg: ModelConfig,
                    cfg: TrainConfig, pool: ThreadPoolExecutor | None = None):
    """Mean-loss gradient for one batch, reduced over shards in fixed order."""
    scale = 1.0 / len(items)
    bounds = np.linspace(0, len(items), cfg.shards + 1).round().astype(int)
    shards = [items[a:b] for a, b in zip(bounds, bounds[1:]) if b > a]
    if pool is not None and len(shards) > 1:
        results = list(pool.map(lambda s: shard_gradients(s, params, model_cfg, cfg, scale), shards))
    else:
        results = [shard_gradients(s, params, model_cfg, cfg, scale) for s in shards]
    grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    total = 0.0
    for g, t in results:
        for k in grads:
            grads[k] += g[k]
        total += t
    return grads, total


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def _param_norms(params: DinParams) -> str:
    return ", ".join(f"{k}={np.linalg.norm(p.data):.3g}" for k, p in params.items())


@dataclass
class TrainResult:
    params: DinParams  # best-validation parameters
    log: list[dict]
    best_epoch: int
    best_val_ndcg1: float
    steps: int
    final_params: DinParams | None = field(default=None, repr=False)


def encode_all(slates, model_cfg: ModelConfig) -> list[SlateArrays]:
    return [s if isinstance(s, SlateArrays) else slate_arrays(s, model_cfg.encoding) for s in slates]


def evaluate_arrays(items: Sequence[SlateArrays], params: DinParams, model_cfg: ModelConfig, ks=KS) -> MetricReport:
    return evaluate_scores(score_arrays(items, params, model_cfg), [a.labels for a in items], ks)


def train(train_set, val_set, model_cfg: ModelConfig, cfg: TrainConfig, log_path=None,
          init: DinParams | None = None, max_steps: int | None = None) -> TrainResult:
    """Train with Adam, evaluating validation nDCG@1 after every epoch.

    The best-validation parameters are returned; training stops after
    ``cfg.patience`` epochs without improvement, after ``cfg.max_epochs`` or
    after ``max_steps`` optimizer steps.
    """
    train_items = encode_all(train_set, model_cfg)
    val_items = encode_all(val_set, model_cfg)
    if not train_items or not val_items:
        raise ValueError("training and validation sets must be non-empty")
    params = init if init is not None else init_params(model_cfg, cfg.seed)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    best, best_epoch, best_score, stale, step = params, 0, -np.inf, 0, 0
    records: list[dict] = []
    pool = ThreadPoolExecutor(cfg.shards) if cfg.shards > 1 else None
    out = open(log_path, "w") if log_path else None
    t_start = time.perf_counter()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            perm = rng.permutation(len(train_items))
            loss_sum, seen = 0.0, 0
            for b, start in enumerate(range(0, len(perm), cfg.batch_size)):
                items = [train_items[i] for i in perm[start:start + cfg.batch_size]]
                grads, total = batch_gradients(items, params, model_cfg, cfg, pool)
                if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDivergedError(
                        f"non-finite loss/gradient at epoch {epoch}, batch {b}; parameter norms: {_param_norms(params)}")
                if cfg.clip_norm is not None:
                    grads = clip_by_global_norm(grads, cfg.clip_norm)
                params, state = adam_step(params, grads, state, cfg)
                loss_sum += total
                seen += len(items)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            val = evaluate_arrays(val_items, params, model_cfg, ks=(1,))
            # wall time goes to the logger only so the log file stays reproducible
            rec = {"epoch": epoch, "train_loss": loss_sum / seen, "val_ndcg@1": val.ndcg[1]}
            records.append(rec)
            log.info("epoch %d  train_loss %.5f  val nDCG@1 %.4f  (%.1fs)", epoch, rec["train_loss"],
                     rec["val_ndcg@1"], time.perf_counter() - t_start)
            if out:
                out.write(json.dumps(rec) + "\n")
                out.flush()
            if val.ndcg[1] > best_score:
                best, best_epoch, best_score, stale = params, epoch, val.ndcg[1], 0
            else:
                stale += 1
            if stale >= cfg.patience or (max_steps is not None and step >= max_steps):
                break
    finally:
        if pool:
            pool.shutdown()
        if out:
            out.close()
    return TrainResult(best, records, best_epoch, float(best_score), step, final_params=params)


VARIANTS = ("full", "pointwise", "no_pos_enc", "no_urgency")
METRIC_COLUMNS = ("ndcg@1", "ndcg@3", "ndcg@5", "recall@1", "recall@3", "recall@5")


def variant_configs(name: str, model_cfg: ModelConfig, cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    enc = model_cfg.encoding
    if name == "full":
        return model_cfg, cfg
    if name == "pointwise":
        return model_cfg, replace(cfg, loss="pointwise")
    if name == "no_pos_enc":
        return replace(model_cfg, encoding=replace(enc, use_positional_encoding=False)), cfg
    if name == "no_urgency":
        return replace(model_cfg, encoding=replace(enc, use_urgency_features=False)), cfg
    raise ValueError(f"unknown variant {name!r}")


@dataclass
class AblationTable:
    rows: dict[str, dict[str, float]]  # variant -> metric -> mean over seeds
    per_seed: dict[str, list[dict[str, float]]]
    seeds: tuple[int, ...]

    def std(self, variant: str, metric: str) -> float:
        vals = [r[metric] for r in self.per_seed[variant]]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def format(self) -> str:
        head = f"{'variant':<12}" + "".join(f"{c:>11}" for c in METRIC_COLUMNS)
        lines = [head]
        for v, row in self.rows.items():
            lines.append(f"{v:<12}" + "".join(f"{row[c]:>11.4f}" for c in METRIC_COLUMNS))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"variants": list(self.rows), "metrics": list(METRIC_COLUMNS), "seeds": list(self.seeds),
                "mean": self.rows, "per_seed": self.per_seed}


def run_ablation(train_set, val_set, test_set, model_cfg: ModelConfig, cfg: TrainConfig,
                 seeds: Sequence[int] = (0,), variants: Sequence[str] = VARIANTS,
                 max_steps: int | None = None) -> AblationTable:
    """Train every variant under identical seeds and budgets; report test metrics."""
    per_seed: dict[str, list[dict[str, float]]] = {v: [] for v in variants}
    cache: dict = {}
    for v in variants:
        mcfg, tcfg = variant_configs(v, model_cfg, cfg)
        key = mcfg.encoding
        if key not in cache:
            cache[key] = tuple(encode_all(d, mcfg) for d in (train_set, val_set, test_set))
        tr, va, te = cache[key]
        for seed in seeds:
            res = train(tr, va, mcfg, replace(tcfg, seed=seed), max_steps=max_steps)
            rep = evaluate_arrays(te, res.params, mcfg)
            row = {k: rep.as_dict()[k] for k in METRIC_COLUMNS}
            per_seed[v].append(row)
            log.info("variant %s seed %d: %s (best epoch %d)", v, seed, rep.summary(), res.best_epoch)
    rows = {v: {c: float(np.mean([r[c] for r in per_seed[v]])) for c in METRIC_COLUMNS} for v in variants}
    return AblationTable(rows, per_seed, tuple(seeds))
