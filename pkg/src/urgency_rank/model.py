"""Urgency-aware DIN: per-candidate target attention over history, then an MLP scorer."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .features import KINDS, Batch, EncodingConfig, Slate, candidate_tensor, collate, history_tensor, slate_arrays


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    attention_hidden: int = 32
    mlp_hidden: tuple[int, ...] = (200, 80)
    n_outputs: int = 2
    prelu_init: float = 0.25

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        enc = self.encoding
        d_h, d_z = enc.d_history, enc.d_candidate
        shapes = {
            "emb.sport": (len(enc.sports) + 1, enc.sport_dim),
            "emb.format": (len(enc.formats) + 1, enc.format_dim),
            "emb.kind": (len(KINDS), enc.kind_dim),
        }
        if enc.use_positional_encoding:
            shapes["emb.dt_bucket"] = (enc.n_buckets, enc.bucket_dim)
        a = self.attention_hidden
        # no output bias on the attention unit: softmax is shift-invariant
        shapes.update({"att.w1": (d_h + d_z, a), "att.b1": (a,), "att.a1": (a,), "att.w2": (a, 1)})
        widths = [d_h + d_z, *self.mlp_hidden, self.n_outputs]
        for i, (n_in, n_out) in enumerate(zip(widths, widths[1:]), start=1):
            shapes[f"mlp.w{i}"] = (n_in, n_out)
            shapes[f"mlp.b{i}"] = (n_out,)
            if i < len(widths) - 1:
                shapes[f"mlp.a{i}"] = (n_out,)
        return shapes


class DinParams(dict):
    """Ordered mapping of parameter name to :class:`Tensor` (all requires_grad)."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "DinParams":
        return cls((k, ad.Tensor(np.array(v, dtype=np.float64), requires_grad=True)) for k, v in arrays.items())

    def copy(self) -> "DinParams":
        return DinParams.from_arrays(self.arrays())

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.values()))


def init_params(cfg: ModelConfig, seed: int = 0) -> DinParams:
    """Glorot-uniform weights and embeddings, zero biases, PReLU slopes at ``prelu_init``."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in cfg.param_shapes().items():
        kind = name.split(".")[1][0]
        if name.startswith("emb.") or kind == "w":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-limit, limit, size=shape)
        elif kind == "a":
            out[name] = np.full(shape, cfg.prelu_init)
        else:
            out[name] = np.zeros(shape)
    return DinParams.from_arrays(out)


@dataclass
class SlateScores:
    scores: np.ndarray  # (m,)
    attention: np.ndarray  # (m, H)
    logits: np.ndarray  # (m, 2)


def _check_shapes(params: DinParams, cfg: ModelConfig) -> None:
    expected = cfg.param_shapes()
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        bad = sorted(set(expected.items()) ^ set(got.items()))
        raise ConfigError(f"parameters do not match config: {bad[:4]}")


def attention_logits(H: ad.Tensor, Z: ad.Tensor, params: DinParams) -> ad.Tensor:
    """Activation-unit output for every (candidate, history) pair: (B, M, H).

    ``concat(v(a_j), z_i) @ w1`` is evaluated as ``v(a_j) @ w1[:d_h] + z_i @ w1[d_h:]``
    so the (B, M, H, d_h + d_z) concatenation is never materialised.
    """
    d_h = H.shape[-1]
    w1 = params["att.w1"]
    w2 = ad.reshape(params["att.w2"], (w1.shape[1],))
    return ad.pairwise_prelu_score(H @ w1[:d_h], Z @ w1[d_h:], params["att.b1"], params["att.a1"], w2)


def masked_attention(logits: ad.Tensor, hist_mask: np.ndarray) -> ad.Tensor:
    """Masked softmax over history; all-zero rows for slates with empty history."""
    has_hist = hist_mask.any(axis=-1)  # (B,)
    safe = hist_mask | ~has_hist[:, None]
    alpha = ad.masked_softmax(logits, safe[:, None, :])
    if has_hist.all():
        return alpha
    return alpha * has_hist[:, None, None].astype(np.float64)


def attention_weights(H: ad.Tensor, mask, z: ad.Tensor, params: DinParams) -> ad.Tensor:
    """Attention of one candidate ``z`` (d_z,) over history ``H`` (H_max, d_h): shape (H_max,)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ad.InvalidMaskError("no history to attend over; use the cold-start path")
    Hn, d_h = H.shape
    logits = attention_logits(ad.reshape(H, (1, Hn, d_h)), ad.reshape(z, (1, 1, z.shape[-1])), params)
    return ad.reshape(masked_attention(logits, mask[None]), (Hn,))


def interest_vector(H: ad.Tensor, mask, alpha: ad.Tensor) -> ad.Tensor:
    """sum_j alpha_j v(a_j) over unmasked positions for one candidate: shape (d_h,)."""
    keep = np.asarray(mask, dtype=np.float64)[:, None]
    return ad.reshape(ad.reshape(alpha, (1, H.shape[0])) @ (H * keep), (H.shape[1],))


def mlp_logits(x: ad.Tensor, params: DinParams, cfg: ModelConfig) -> ad.Tensor:
    n_layers = len(cfg.mlp_hidden) + 1
    for i in range(1, n_layers):
        x = ad.prelu(x @ params[f"mlp.w{i}"] + params[f"mlp.b{i}"], params[f"mlp.a{i}"])
    # BLAS kernels for very narrow outputs depend on row position, which would
    # break exact equivariance over candidates; a broadcast product-sum does not
    w = params[f"mlp.w{n_layers}"]
    x = ad.reshape(x, (*x.shape, 1)) * w
    return ad.sum_(x, axis=-2) + params[f"mlp.b{n_layers}"]


def forward(batch: Batch, params: DinParams, cfg: ModelConfig):
    """Score a padded batch. Returns ``(scores (B, M), logits (B, M, 2), alpha (B, M, H))``.

    Scores at padded candidate slots are finite but meaningless.
    """
    enc = cfg.encoding
    H = history_tensor(batch, params, enc)
    Z = candidate_tensor(batch, params, enc)
    alpha = masked_attention(attention_logits(H, Z, params), batch.hist_mask)
    v = alpha @ H  # (B, M, d_h): one interest vector per candidate
    logits = mlp_logits(ad.concat([v, Z], axis=-1), params, cfg)
    scores = logits[..., 0] - logits[..., 1]
    return scores, logits, alpha


def score_slate(slate: Slate, params: DinParams, cfg: ModelConfig) -> SlateScores:
    _check_shapes(params, cfg)
    batch = collate([slate_arrays(slate, cfg.encoding)], h_pad=cfg.encoding.h_max)
    scores, logits, alpha = forward(batch, params, cfg)
    return SlateScores(scores.data[0], alpha.data[0], logits.data[0])


def score_arrays(items, params: DinParams, cfg: ModelConfig, batch_size: int = 256) -> list[np.ndarray]:
    """Scores for pre-encoded slates, in input order, without recording a tape."""
    order = sorted(range(len(items)), key=lambda i: items[i].n_hist)
    out: list[np.ndarray | None] = [None] * len(items)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = collate([items[i] for i in idx])
        scores = forward(batch, params, cfg)[0].data
        for row, i in enumerate(idx):
            out[i] = scores[row, :items[i].n_cand].copy()
    return out


# checkpoint format: magic line, u64 header length, JSON header, raw little-endian f64 payload
_MAGIC = b"URGDIN1\n"


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    enc = d.get("encoding", {})
    enc = {k: tuple(v) if isinstance(v, list) else v for k, v in enc.items()}
    rest = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k != "encoding"}
    return ModelConfig(encoding=EncodingConfig(**enc), **rest)


def save_checkpoint(path, params: DinParams, cfg: ModelConfig, extra: dict | None = None) -> None:
    header = {
        "model_config": model_config_to_dict(cfg),
        "params": [[k, list(v.shape)] for k, v in params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[DinParams, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    (n,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + n])
    pos += n
    arrays = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    cfg = model_config_from_dict(header["model_config"])
    params = DinParams.from_arrays(arrays)
    _check_shapes(params, cfg)
    return params, cfg, header["extra"]
