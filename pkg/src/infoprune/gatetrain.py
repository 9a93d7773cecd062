"""Gate training for attention-head pruning, then thresholding and physical removal.

The objective per step is::

    task + alpha * |zeta|_1 + beta * sum_l [eRank(Z_S,l) - eRank(Z_l)] + gamma * sum_l KS_l

where ``KS_l`` is the smoothed KS distance between the singular-value spectra of
the ungated and gated head concatenations of layer ``l``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import spectral
from .errors import (
    DegenerateSingularValue,
    EmptyLayer,
    InvalidConfig,
    InvalidThreshold,
    NonFiniteLoss,
    ZeroSpectrum,
)
from .linalg import spectrum_vjp, svd
from .toymodel import PARAM_NAMES, Dataset, GateSet, Model, backward, forward, mse, zeta_grads

log = logging.getLogger(__name__)

LR_DECAYS = ("none", "cosine", "step_halving")
JITTER = 1e-9


@dataclass
class TrainConfig:
    alpha: float = 0.01
    beta: float = 0.01
    gamma: float = 0.1
    learning_rate: float = 1e-2
    epochs: int = 7
    steps_per_epoch: int = 100
    batch_size: int = 8
    lr_decay: str = "cosine"
    prune_threshold: float = 0.5
    # KS temperature as a fraction of the largest singular value of Z at step 0
    ks_temperature: float = 0.05
    ks_anneal: float = 0.5
    ks_temperature_floor: float = 1e-4
    train_weights_too: bool = True
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    aggregate: str = "sum"
    ib_scope: str = "step"
    erank_log: bool = False
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name in ("alpha", "beta", "gamma", "weight_decay"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be >= 0")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        for name in ("epochs",):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("steps_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.lr_decay not in LR_DECAYS:
            problems.append(f"lr_decay must be one of {LR_DECAYS}")
        if not 0 < self.prune_threshold < 1:
            problems.append("prune_threshold must lie strictly inside (0, 1)")
        if not self.ks_temperature > 0:
            problems.append("ks_temperature must be > 0")
        if not 0 < self.ks_anneal <= 1:
            problems.append("ks_anneal must lie in (0, 1]")
        if not self.ks_temperature_floor > 0:
            problems.append("ks_temperature_floor must be > 0")
        if self.aggregate not in ("sum", "mean"):
            problems.append("aggregate must be 'sum' or 'mean'")
        if self.ib_scope not in ("step", "batch"):
            problems.append("ib_scope must be 'step' or 'batch'")
        if problems:
            raise InvalidConfig(problems)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LossBreakdown:
    task: float
    l1: float
    erank_term: float
    ks_term: float
    total: float

    def record(self, step: int, lr: float) -> dict:
        return {
            "step": step,
            "task": self.task,
            "l1": self.l1,
            "eRankTerm": self.erank_term,
            "ksTerm": self.ks_term,
            "total": self.total,
            "lr": lr,
        }


@dataclass(frozen=True)
class PruneDecision:
    retained: frozenset
    pruned_ratio: float
    per_layer_counts: tuple
    gate_values: np.ndarray = field(compare=False, repr=False)

    def summary(self) -> dict:
        return {
            "retained": sorted([list(x) for x in self.retained]),
            "per_layer_counts": list(self.per_layer_counts),
            "pruned_ratio": self.pruned_ratio,
        }


def _ib_matrix(a: np.ndarray, scope: str) -> np.ndarray:
    # a is (B, T, width)
    if scope == "step":
        return a[-1]
    return a.reshape(-1, a.shape[-1])


def _scatter_ib_grad(g: np.ndarray, like: np.ndarray, scope: str) -> np.ndarray:
    out = np.zeros_like(like)
    if scope == "step":
        out[-1] = g
    else:
        out[...] = g.reshape(like.shape)
    return out


def _jitter(a: np.ndarray) -> np.ndarray:
    noise = np.random.default_rng(0).standard_normal(a.shape)
    top = float(np.abs(a).max())
    return a + JITTER * max(top, 1.0) * noise


def _layer_terms(z, zs, tau, cfg: TrainConfig, want_grad: bool):
    """eRank difference and smoothed KS for one layer, with gradients on z and zs."""
    for attempt in range(2):
        sz, szs = svd(z), svd(zs)
        if szs.s[0] == 0 or sz.s[0] == 0:
            raise ZeroSpectrum("an activation matrix is identically zero (dead layer)")
        e_s, de_s = spectral.erank_grad(szs.spectrum, log=cfg.erank_log)
        e_z, de_z = spectral.erank_grad(sz.spectrum, log=cfg.erank_log)
        ks_val, _, dk_z, dk_zs = spectral.smoothed_ks_grad(sz.spectrum, szs.spectrum, tau)
        er_val = e_s - e_z
        g_z = cfg.gamma * dk_z - cfg.beta * de_z
        g_zs = cfg.gamma * dk_zs + cfg.beta * de_s
        if not want_grad:
            return er_val, ks_val, None, None
        try:
            dz = spectrum_vjp(sz, g_z)
            dzs = spectrum_vjp(szs, g_zs)
            return er_val, ks_val, dz, dzs
        except DegenerateSingularValue:
            if attempt:
                raise
            log.debug("degenerate spectrum; jittering activations once")
            z, zs = _jitter(z), _jitter(zs)


def initial_temperatures(trace, cfg: TrainConfig) -> np.ndarray:
    """Per-layer KS temperature: ``ks_temperature`` times the top singular value of Z."""
    return np.array(
        [cfg.ks_temperature * svd(_ib_matrix(lt.z, cfg.ib_scope)).s[0] for lt in trace.layers]
    )


def compute_loss(trace, task_loss: float, gates: GateSet, cfg: TrainConfig, temperatures=None, return_grads=False):
    """Assemble the four-term objective from a forward trace.

    With ``return_grads`` also returns ``(d_z, d_zs)``: per-layer gradients of the
    weighted IB terms on the ungated and gated concatenations, ready for
    :func:`toymodel.backward`.
    """
    if temperatures is None:
        temperatures = initial_temperatures(trace, cfg)
    n_layers = len(trace.layers)
    weight = 1.0 if cfg.aggregate == "sum" else 1.0 / n_layers
    er_total = ks_total = 0.0
    d_z, d_zs = [], []
    for lt, tau in zip(trace.layers, temperatures):
        z = _ib_matrix(lt.z, cfg.ib_scope)
        zs = _ib_matrix(lt.zs, cfg.ib_scope)
        er, ks, gz, gzs = _layer_terms(z, zs, float(tau), cfg, return_grads)
        er_total += weight * er
        ks_total += weight * ks
        if return_grads:
            d_z.append(_scatter_ib_grad(weight * gz, lt.z, cfg.ib_scope))
            d_zs.append(_scatter_ib_grad(weight * gzs, lt.zs, cfg.ib_scope))
    l1 = float(np.abs(gates.zeta).sum())
    total = task_loss + cfg.alpha * l1 + cfg.beta * er_total + cfg.gamma * ks_total
    breakdown = LossBreakdown(task_loss, l1, er_total, ks_total, total)
    if return_grads:
        return breakdown, d_z, d_zs
    return breakdown


def total_loss_and_zeta_grad(model: Model, gates: GateSet, x, y, cfg: TrainConfig, temperatures):
    """Full objective and its exact gradient w.r.t. every zeta (weights held fixed)."""
    out, trace = forward(model, x, gates)
    task, d_out = mse(out, y)
    loss, d_z, d_zs = compute_loss(trace, task, gates, cfg, temperatures, return_grads=True)
    _, gate_grads, _ = backward(model, trace, d_out, d_z, d_zs)
    grad = zeta_grads(gates, gate_grads) + cfg.alpha * np.sign(gates.zeta)
    return loss, grad


class AdamW:
    """Adam with decoupled weight decay over a dict of named arrays, updated in place."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    total = cfg.epochs * cfg.steps_per_epoch
    if cfg.lr_decay == "cosine" and total > 0:
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))
    if cfg.lr_decay == "step_halving":
        return cfg.learning_rate * 0.5 ** (step // cfg.steps_per_epoch)
    return cfg.learning_rate


@dataclass
class TrainResult:
    gates: GateSet
    history: list
    model: Model


def train_gates(model: Model, dataset: Dataset, cfg: TrainConfig, gates: GateSet | None = None) -> TrainResult:
    """Optimise the head gates (and optionally every weight) with AdamW.

    Deterministic in ``cfg.seed``. Inputs are not modified; the trained model
    and gates are returned as copies.
    """
    if len(dataset) == 0:
        raise InvalidConfig("dataset is empty")
    model = model.copy()
    gates = GateSet.init(model.config) if gates is None else gates.copy()
    rng = np.random.default_rng(cfg.seed)
    params = {"zeta": gates.zeta}
    if cfg.train_weights_too:
        for l, lp in enumerate(model.layers):
            for name in PARAM_NAMES:
                params[f"{l}.{name}"] = getattr(lp, name)
    opt = AdamW(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    history = []
    base_tau = floor_tau = None
    batch = min(cfg.batch_size, len(dataset))
    for epoch in range(cfg.epochs):
        for i in range(cfg.steps_per_epoch):
            step = epoch * cfg.steps_per_epoch + i
            idx = np.sort(rng.choice(len(dataset), size=batch, replace=False))
            x, y = dataset.inputs[idx], dataset.targets[idx]
            out, trace = forward(model, x, gates)
            task, d_out = mse(out, y)
            if base_tau is None:
                base_tau = initial_temperatures(trace, cfg)
                floor_tau = base_tau / cfg.ks_temperature * cfg.ks_temperature_floor
            tau = np.maximum(base_tau * cfg.ks_anneal**epoch, floor_tau)
            needs_ib = cfg.beta > 0 or cfg.gamma > 0
            if needs_ib:
                loss, d_z, d_zs = compute_loss(trace, task, gates, cfg, tau, return_grads=True)
            else:
                l1 = float(np.abs(gates.zeta).sum())
                loss = LossBreakdown(task, l1, 0.0, 0.0, task + cfg.alpha * l1)
                d_z = d_zs = None
            if not np.isfinite(loss.total):
                raise NonFiniteLoss(step, loss.total)
            param_grads, gate_grads, _ = backward(model, trace, d_out, d_z, d_zs)
            grads = {"zeta": zeta_grads(gates, gate_grads) + cfg.alpha * np.sign(gates.zeta)}
            if cfg.train_weights_too:
                for l, pg in enumerate(param_grads):
                    for name in PARAM_NAMES:
                        grads[f"{l}.{name}"] = pg[name]
            lr = learning_rate(cfg, step)
            opt.step(grads, lr)
            history.append(loss.record(step, lr))
    return TrainResult(gates=gates, history=history, model=model)


def prune_heads(gates: GateSet, z: float) -> PruneDecision:
    """Retain exactly the heads whose gate sigmoid(zeta) is at least ``z``."""
    if not 0 < z < 1:
        raise InvalidThreshold(f"threshold must lie strictly inside (0, 1), got {z}")
    values = gates.values()
    keep = values >= z
    retained = frozenset((int(l), int(h)) for l, h in zip(*np.nonzero(keep)))
    return PruneDecision(
        retained=retained,
        pruned_ratio=1.0 - len(retained) / values.size,
        per_layer_counts=tuple(int(c) for c in keep.sum(axis=1)),
        gate_values=values,
    )


def effective_retained(decision: PruneDecision, empty_layer: str = "keep_top") -> list[list[int]]:
    """Per-layer retained head indices after the empty-layer guard."""
    values = decision.gate_values
    out = []
    for l in range(values.shape[0]):
        kept = sorted(h for (ll, h) in decision.retained if ll == l)
        if not kept:
            if empty_layer == "raise":
                raise EmptyLayer(f"layer {l} would retain no heads")
            kept = [int(np.argmax(values[l]))]
        out.append(kept)
    return out


def masked_gates(decision: PruneDecision, empty_layer: str = "keep_top") -> list[np.ndarray]:
    """Gate vectors equivalent to the pruned model: retained keep sigmoid(zeta), pruned are 0."""
    kept = effective_retained(decision, empty_layer)
    out = []
    for l, heads in enumerate(kept):
        g = np.zeros(decision.gate_values.shape[1])
        g[heads] = decision.gate_values[l, heads]
        out.append(g)
    return out


def apply_pruning(model: Model, decision: PruneDecision, empty_layer: str = "keep_top") -> Model:
    """Physically drop pruned heads and fold retained gates into the output projection.

    The result runs ungated and reproduces the gate-masked model.
    """
    dk = model.config.head_dim
    kept = effective_retained(decision, empty_layer)
    out = model.copy()
    for l, lp in enumerate(out.layers):
        if len(lp.heads) != decision.gate_values.shape[1]:
            raise InvalidConfig(f"layer {l} is already pruned")
        cols = np.concatenate([np.arange(h * dk, (h + 1) * dk) for h in kept[l]])
        scale = np.repeat(decision.gate_values[l, kept[l]], dk)
        lp.wq = lp.wq[:, cols].copy()
        lp.wk = lp.wk[:, cols].copy()
        lp.wv = lp.wv[:, cols].copy()
        lp.wo = lp.wo[cols] * scale[:, None]
        lp.heads = tuple(lp.heads[h] for h in kept[l])
    return out


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
