"""Diagnostics: attention-entropy head importance, FFN row density, FLOPs accounting.

FLOPs count dense multiply-accumulates only, at 2 FLOPs each; softmax, layer
norm, activations and residual adds are excluded. Speed-up is a FLOPs ratio.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidRank, ValidationError
from .gatetrain import PruneDecision, effective_retained
from .linalg import matmul
from .toymodel import Model, ModelConfig

log = logging.getLogger(__name__)

FLOPS_NOTE = "dense multiply-accumulates only (2 FLOPs each); softmax, normalisation and activations excluded"


@dataclass
class HeadImportanceMap:
    scores: np.ndarray  # (L, H); NaN for heads no longer present
    neg_entropy: np.ndarray
    scope: str

    def ranking(self) -> np.ndarray:
        """Flat head indices from most to least important."""
        flat = np.where(np.isnan(self.scores), -np.inf, self.scores).ravel()
        return np.argsort(-flat, kind="stable")


def attention_entropy(probs: np.ndarray) -> np.ndarray:
    """Mean Shannon entropy (nats) of each head's attention rows; probs is (B, H, T, T)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1).mean(axis=(0, 2))


def _minmax(x: np.ndarray) -> np.ndarray:
    finite = np.isfinite(x)
    lo, hi = x[finite].min(), x[finite].max()
    if hi == lo:
        log.warning("all heads in scope have identical entropy; scores set to 0.5")
        return np.where(finite, 0.5, np.nan)
    return (x - lo) / (hi - lo)


def head_importance(trace, scope: str = "global", heads=None, num_heads: int | None = None) -> HeadImportanceMap:
    """Min-max normalised negative attention entropy per head.

    ``heads`` optionally gives, per layer, the original indices of the heads in
    the trace (for pruned models); missing heads score NaN.
    """
    if scope not in ("global", "per_layer"):
        raise ValidationError(f"unknown normalisation scope {scope!r}")
    per_layer = [attention_entropy(lt.probs) for lt in trace.layers]
    if heads is None:
        heads = [list(range(len(e))) for e in per_layer]
    width = num_heads or max(max(h) + 1 for h in heads)
    neg = np.full((len(per_layer), width), np.nan)
    for l, (ent, idx) in enumerate(zip(per_layer, heads)):
        neg[l, list(idx)] = -ent
    if scope == "global":
        scores = _minmax(neg)
    else:
        scores = np.stack([_minmax(row) for row in neg])
    return HeadImportanceMap(scores=scores, neg_entropy=neg, scope=scope)


def row_density(w, threshold_fraction: float = 0.05) -> float:
    """Fraction of rows whose L1 norm is below ``threshold_fraction * n_cols``."""
    if not threshold_fraction > 0:
        raise ValidationError("threshold_fraction must be positive")
    w = np.asarray(w, dtype=np.float64)
    l1 = np.abs(w).sum(axis=1)
    return float(np.mean(l1 < threshold_fraction * w.shape[1]))


@dataclass
class DensityReport:
    w1: list
    w2: list
    composite: list

    def rows(self):
        for l, (a, b, c) in enumerate(zip(self.w1, self.w2, self.composite)):
            yield {"layer": l, "w1": a, "w2": b, "w1_x_w2": c}


def density_report(model: Model, threshold_fraction: float = 0.05) -> DensityReport:
    w1, w2, comp = [], [], []
    for lp in model.layers:
        w1.append(row_density(lp.w1, threshold_fraction))
        w2.append(row_density(lp.w2, threshold_fraction))
        comp.append(row_density(matmul(lp.w1, lp.w2), threshold_fraction))
    return DensityReport(w1, w2, comp)


@dataclass
class FlopsReport:
    attention_flops: int
    ffn_flops: int
    total_flops: int
    speedup_vs_baseline: float
    per_layer_attention: list
    per_layer_ffn: list

    def to_dict(self) -> dict:
        return {
            "attention_flops": self.attention_flops,
            "ffn_flops": self.ffn_flops,
            "total_flops": self.total_flops,
            "speedup_vs_baseline": self.speedup_vs_baseline,
            "per_layer_attention": self.per_layer_attention,
            "per_layer_ffn": self.per_layer_ffn,
            "note": FLOPS_NOTE,
        }


def attention_layer_flops(config: ModelConfig, n_heads: int) -> int:
    t, d, dk = config.seq_len, config.model_dim, config.head_dim
    per_head = 3 * t * d * dk + 2 * t * t * dk + t * dk * d
    return 2 * n_heads * per_head


def ffn_layer_flops(config: ModelConfig, width: int) -> int:
    t, d = config.seq_len, config.model_dim
    return 2 * (t * d * width + t * width * d)


def count_flops(config: ModelConfig, decision=None, ranks=None) -> FlopsReport:
    """FLOPs of one forward pass over ``seq_len`` tokens.

    ``decision`` is a PruneDecision or a per-layer sequence of retained head
    counts; ``ranks`` a per-layer sequence of compressed FFN widths (None keeps
    the full hidden width for that layer).
    """
    if decision is None:
        heads = [config.heads] * config.layers
    elif isinstance(decision, PruneDecision):
        heads = [len(h) for h in effective_retained(decision)]
    else:
        heads = [int(h) for h in decision]
    widths = []
    for l in range(config.layers):
        k = None if ranks is None else ranks[l]
        if k is None:
            widths.append(config.ffn_hidden)
            continue
        if not 1 <= k <= min(config.model_dim, config.ffn_hidden):
            raise InvalidRank(f"layer {l}: rank {k} outside [1, {min(config.model_dim, config.ffn_hidden)}]")
        widths.append(int(k))
    if len(heads) != config.layers:
        raise ValidationError("head counts must cover every layer")
    attn = [attention_layer_flops(config, h) for h in heads]
    ffn = [ffn_layer_flops(config, w) for w in widths]
    total = sum(attn) + sum(ffn)
    baseline = config.layers * (attention_layer_flops(config, config.heads) + ffn_layer_flops(config, config.ffn_hidden))
    return FlopsReport(
        attention_flops=sum(attn),
        ffn_flops=sum(ffn),
        total_flops=total,
        speedup_vs_baseline=baseline / total,
        per_layer_attention=attn,
        per_layer_ffn=ffn,
    )


def model_flops(model: Model) -> FlopsReport:
    """FLOPs of a (possibly pruned or compressed) model, read off its tensor shapes."""
    cfg = model.config
    heads = [len(lp.heads) for lp in model.layers]
    attn = [attention_layer_flops(cfg, h) for h in heads]
    ffn = [ffn_layer_flops(cfg, lp.w1.shape[1]) for lp in model.layers]
    total = sum(attn) + sum(ffn)
    baseline = cfg.layers * (attention_layer_flops(cfg, cfg.heads) + ffn_layer_flops(cfg, cfg.ffn_hidden))
    return FlopsReport(sum(attn), sum(ffn), total, baseline / total, attn, ffn)
