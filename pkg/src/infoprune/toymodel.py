"""A small pre-LN transformer encoder with per-head multiplicative gates.

Each block computes::

    h   = LN1(x)
    Z   = concat_h softmax(h Wq_h (h Wk_h)^T / sqrt(dk)) h Wv_h
    Z_S = concat_h gate_h * Z_h
    x1  = x + sum_h Z_S,h Wo_h
    y   = x1 + phi(LN2(x1) W1) W2

Forward and backward passes are hand-written numpy over a (batch, seq, dim)
layout. Layers may hold fewer heads than the config (after pruning) and may
carry a linear FFN of reduced width (after low-rank compression).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import activations
from .checkpoint import Checkpoint
from .errors import DimensionMismatch, InvalidConfig, InvalidHeadIndex, ShapeMismatch
from .lowrank import ROW_MAJOR

ZETA_INIT = 4.0
PARAM_NAMES = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "w2")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 16
    ffn_hidden: int = 32
    seq_len: int = 8
    seed: int = 0
    activation: str = "relu"
    ln_eps: float = 1e-5

    def __post_init__(self):
        problems = []
        for name in ("layers", "heads", "model_dim", "ffn_hidden", "seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                problems.append(f"{name} must be a positive integer, got {value!r}")
        if not problems and self.model_dim % self.heads:
            problems.append(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.activation not in ("relu", "silu", "identity"):
            problems.append(f"unknown activation {self.activation!r}")
        if problems:
            raise InvalidConfig(problems)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "model_dim": self.model_dim,
            "ffn_hidden": self.ffn_hidden,
            "seq_len": self.seq_len,
            "seed": int(self.seed),
            "activation": self.activation,
            "ln_eps": self.ln_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    activation: str = "relu"
    # original indices of the heads this layer still holds
    heads: tuple = ()

    def copy(self) -> "LayerParams":
        return replace(self, **{n: getattr(self, n).copy() for n in PARAM_NAMES})

    def arrays(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]


@dataclass
class Model:
    config: ModelConfig
    layers: list

    def n_heads(self, layer: int) -> int:
        return len(self.layers[layer].heads)

    def copy(self) -> "Model":
        return Model(self.config, [lp.copy() for lp in self.layers])

    def param_count(self) -> int:
        return int(sum(a.size for lp in self.layers for _, a in lp.arrays()))

    def ffn_widths(self) -> list[int]:
        return [lp.w1.shape[1] for lp in self.layers]


@dataclass
class GateSet:
    """Learnable head-importance logits; the gate of a head is sigmoid(zeta)."""

    zeta: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig, value: float = ZETA_INIT) -> "GateSet":
        return cls(np.full((config.layers, config.heads), float(value)))

    def values(self) -> np.ndarray:
        return sigmoid(self.zeta)

    def copy(self) -> "GateSet":
        return GateSet(self.zeta.copy())


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def init_model(config: ModelConfig) -> Model:
    """Seeded init: uniform weights with std 1/sqrt(fan_in), unit LN gains, zero LN biases."""
    rng = np.random.default_rng(config.seed)
    d, m = config.model_dim, config.ffn_hidden

    def uniform(fan_in, shape):
        bound = np.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerParams(
                ln1_g=np.ones(d),
                ln1_b=np.zeros(d),
                wq=uniform(d, (d, d)),
                wk=uniform(d, (d, d)),
                wv=uniform(d, (d, d)),
                wo=uniform(d, (d, d)),
                ln2_g=np.ones(d),
                ln2_b=np.zeros(d),
                w1=uniform(d, (d, m)),
                w2=uniform(m, (m, d)),
                activation=config.activation,
                heads=tuple(range(config.heads)),
            )
        )
    return Model(config, layers)


@dataclass
class LayerTrace:
    x: np.ndarray
    xhat1: np.ndarray
    rstd1: np.ndarray
    h: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray  # (B, H, T, T)
    heads: np.ndarray  # (B, H, T, dk), ungated
    gates: np.ndarray  # (H,)
    x1: np.ndarray
    xhat2: np.ndarray
    rstd2: np.ndarray
    h2: np.ndarray
    pre: np.ndarray
    act: np.ndarray

    @property
    def z(self) -> np.ndarray:
        """Ungated concatenated head outputs, (B, T, H*dk)."""
        b, nh, t, dk = self.heads.shape
        return self.heads.transpose(0, 2, 1, 3).reshape(b, t, nh * dk)

    @property
    def zs(self) -> np.ndarray:
        """Gated concatenation Z_S."""
        gated = self.heads * self.gates[None, :, None, None]
        b, nh, t, dk = gated.shape
        return gated.transpose(0, 2, 1, 3).reshape(b, t, nh * dk)


@dataclass
class ForwardTrace:
    layers: list = field(default_factory=list)
    batched: bool = True


def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd


def _layer_norm_backward(dy, xhat, rstd, g):
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(a, nh, dk):
    b, t, _ = a.shape
    return a.reshape(b, t, nh, dk).transpose(0, 2, 1, 3)


def _merge_heads(a):
    b, nh, t, dk = a.shape
    return a.transpose(0, 2, 1, 3).reshape(b, t, nh * dk)


def _gate_vectors(model: Model, gates):
    if gates is None:
        return [np.ones(model.n_heads(l)) for l in range(len(model.layers))]
    if isinstance(gates, GateSet):
        gates = gates.values()
    out = []
    for l, g in enumerate(gates):
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        if g.shape[0] != model.n_heads(l):
            raise DimensionMismatch(f"layer {l} has {model.n_heads(l)} heads but {g.shape[0]} gates")
        out.append(g)
    if len(out) != len(model.layers):
        raise DimensionMismatch(f"expected gates for {len(model.layers)} layers, got {len(out)}")
    return out


def forward(model: Model, x, gates=None):
    """Run the model; returns ``(output, trace)``.

    ``x`` is (seq, dim) or (batch, seq, dim). ``gates`` is a GateSet, a sequence
    of per-layer gate vectors, or None for all-ones gates.
    """
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.model_dim):
        raise DimensionMismatch(f"input shape {x.shape} does not match (seq_len, model_dim)")
    gate_vecs = _gate_vectors(model, gates)
    dk = cfg.head_dim
    scale = 1.0 / np.sqrt(dk)
    trace = ForwardTrace(batched=batched)
    for lp, g in zip(model.layers, gate_vecs):
        nh = len(lp.heads)
        h, xhat1, rstd1 = _layer_norm(x, lp.ln1_g, lp.ln1_b, cfg.ln_eps)
        q = _split_heads(h @ lp.wq, nh, dk)
        k = _split_heads(h @ lp.wk, nh, dk)
        v = _split_heads(h @ lp.wv, nh, dk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        heads = probs @ v
        attn = np.zeros_like(x)
        for j in range(nh):
            attn += (g[j] * heads[:, j]) @ lp.wo[j * dk : (j + 1) * dk]
        x1 = x + attn
        h2, xhat2, rstd2 = _layer_norm(x1, lp.ln2_g, lp.ln2_b, cfg.ln_eps)
        pre = h2 @ lp.w1
        act = activations.apply(lp.activation, pre)
        out = x1 + act @ lp.w2
        trace.layers.append(
            LayerTrace(x, xhat1, rstd1, h, q, k, v, probs, heads, g, x1, xhat2, rstd2, h2, pre, act)
        )
        x = out
    return (x if batched else x[0]), trace


def backward(model: Model, trace: ForwardTrace, d_output, d_z=None, d_zs=None):
    """Reverse-mode gradients of a scalar loss given dL/d(output).

    ``d_z`` and ``d_zs`` optionally add per-layer upstream gradients on the
    ungated and gated head concatenations, shaped like ``LayerTrace.z``.
    Returns ``(param_grads, gate_grads, d_input)`` where ``param_grads`` is a
    list of per-layer dicts and ``gate_grads`` a list of per-layer vectors.
    """
    cfg = model.config
    dk = cfg.head_dim
    scale = 1.0 / np.sqrt(dk)
    g_out = np.asarray(d_output, dtype=np.float64)
    if not trace.batched:
        g_out = g_out[None]
    n_layers = len(model.layers)
    param_grads = [None] * n_layers
    gate_grads = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        lp, tr = model.layers[l], trace.layers[l]
        nh = len(lp.heads)
        grads = {}
        # FFN
        grads["w2"] = np.einsum("bti,btj->ij", tr.act, g_out)
        d_act = g_out @ lp.w2.T
        d_pre = d_act * activations.derivative(lp.activation, tr.pre)
        grads["w1"] = np.einsum("bti,btj->ij", tr.h2, d_pre)
        d_h2 = d_pre @ lp.w1.T
        d_x1, grads["ln2_g"], grads["ln2_b"] = _layer_norm_backward(d_h2, tr.xhat2, tr.rstd2, lp.ln2_g)
        d_x1 = d_x1 + g_out
        # output projection and gates
        d_wo = np.zeros_like(lp.wo)
        d_gated = np.empty_like(tr.heads)
        for j in range(nh):
            rows = slice(j * dk, (j + 1) * dk)
            d_wo[rows] = np.einsum("bti,btj->ij", tr.gates[j] * tr.heads[:, j], d_x1)
            d_gated[:, j] = d_x1 @ lp.wo[rows].T
        grads["wo"] = d_wo
        if d_zs is not None and d_zs[l] is not None:
            d_gated = d_gated + _split_heads(_as_batched(d_zs[l], trace), nh, dk)
        gate_grads[l] = np.einsum("bhtk,bhtk->h", d_gated, tr.heads)
        d_heads = d_gated * tr.gates[None, :, None, None]
        if d_z is not None and d_z[l] is not None:
            d_heads = d_heads + _split_heads(_as_batched(d_z[l], trace), nh, dk)
        # attention
        d_probs = d_heads @ tr.v.transpose(0, 1, 3, 2)
        d_v = tr.probs.transpose(0, 1, 3, 2) @ d_heads
        d_scores = tr.probs * (d_probs - (d_probs * tr.probs).sum(axis=-1, keepdims=True))
        d_scores *= scale
        d_q = d_scores @ tr.k
        d_k = d_scores.transpose(0, 1, 3, 2) @ tr.q
        d_q, d_k, d_v = _merge_heads(d_q), _merge_heads(d_k), _merge_heads(d_v)
        grads["wq"] = np.einsum("bti,btj->ij", tr.h, d_q)
        grads["wk"] = np.einsum("bti,btj->ij", tr.h, d_k)
        grads["wv"] = np.einsum("bti,btj->ij", tr.h, d_v)
        d_h = d_q @ lp.wq.T + d_k @ lp.wk.T + d_v @ lp.wv.T
        d_x, grads["ln1_g"], grads["ln1_b"] = _layer_norm_backward(d_h, tr.xhat1, tr.rstd1, lp.ln1_g)
        g_out = d_x + d_x1
        param_grads[l] = grads
    d_input = g_out if trace.batched else g_out[0]
    return param_grads, gate_grads, d_input


def _as_batched(a, trace):
    a = np.asarray(a, dtype=np.float64)
    return a if a.ndim == 3 else a[None]


def zeta_grads(gates: GateSet, gate_grads) -> np.ndarray:
    """Chain gate-value gradients through gate = sigmoid(zeta)."""
    s = gates.values()
    return np.stack([np.asarray(g) for g in gate_grads]) * s * (1.0 - s)


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, T, d)
    targets: np.ndarray  # (N, T, d)
    teacher: Model | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]


def zero_heads(model: Model, heads) -> Model:
    """Copy of ``model`` with the output-projection blocks of ``heads`` set to zero."""
    out = model.copy()
    dk = model.config.head_dim
    for l, h in heads:
        lp = out.layers[l]
        j = lp.heads.index(h)
        lp.wo[j * dk : (j + 1) * dk] = 0.0
    return out


def make_synthetic_task(config: ModelConfig, teacher_seed: int, redundant_heads=(), num_samples: int = 64) -> Dataset:
    """Teacher-student regression data.

    The teacher is ``init_model`` at ``teacher_seed`` with the output projection
    of every head in ``redundant_heads`` zeroed; targets are its outputs on
    standard-normal inputs drawn from the same seed.
    """
    redundant = sorted({(int(l), int(h)) for l, h in redundant_heads})
    for l, h in redundant:
        if not (0 <= l < config.layers and 0 <= h < config.heads):
            raise InvalidHeadIndex(f"head ({l}, {h}) outside {config.layers}x{config.heads}")
    teacher = zero_heads(init_model(replace(config, seed=teacher_seed)), redundant)
    rng = np.random.default_rng([int(teacher_seed), 1])
    inputs = rng.standard_normal((num_samples, config.seq_len, config.model_dim))
    targets, _ = forward(teacher, inputs)
    return Dataset(inputs=inputs, targets=targets, teacher=teacher)


def mse(output, target) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``output``."""
    diff = output - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


_TENSOR_NAMES = {
    "ln1_g": "ln1.g",
    "ln1_b": "ln1.b",
    "wq": "attn.wq",
    "wk": "attn.wk",
    "wv": "attn.wv",
    "wo": "attn.wo",
    "ln2_g": "ln2.g",
    "ln2_b": "ln2.b",
    "w1": "ffn.w1",
    "w2": "ffn.w2",
}
GATES_TENSOR = "gates.zeta"


def model_to_checkpoint(model: Model, gates: GateSet | None = None, metadata: dict | None = None) -> Checkpoint:
    """Pack a model (and optional gates) into a :class:`checkpoint.Checkpoint`."""
    meta = {
        "format_version": 1,
        "weight_layout": ROW_MAJOR,
        "model_config": model.config.to_dict(),
        "layers": [
            {"heads": list(lp.heads), "ffn_activation": lp.activation, "ffn_width": int(lp.w1.shape[1])}
            for lp in model.layers
        ],
    }
    meta.update(metadata or {})
    ckpt = Checkpoint(metadata=meta)
    for l, lp in enumerate(model.layers):
        for name in PARAM_NAMES:
            ckpt[f"layers.{l}.{_TENSOR_NAMES[name]}"] = getattr(lp, name)
    if gates is not None:
        ckpt[GATES_TENSOR] = gates.zeta
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint):
    """Inverse of :func:`model_to_checkpoint`; returns ``(model, gates_or_None)``."""
    meta = ckpt.metadata
    try:
        config = ModelConfig.from_dict(meta["model_config"])
        layer_meta = meta["layers"]
    except (KeyError, TypeError) as exc:
        raise ShapeMismatch(f"checkpoint metadata lacks model description: {exc}") from None
    if len(layer_meta) != config.layers:
        raise ShapeMismatch("layer table length disagrees with model_config.layers")
    d, dk = config.model_dim, config.head_dim
    layers = []
    for l, lm in enumerate(layer_meta):
        arrays = {}
        for name in PARAM_NAMES:
            key = f"layers.{l}.{_TENSOR_NAMES[name]}"
            if key not in ckpt:
                raise ShapeMismatch(f"missing tensor {key}")
            arrays[name] = ckpt.get(key)
        heads = tuple(int(h) for h in lm["heads"])
        width = arrays["w1"].shape[1] if arrays["w1"].ndim == 2 else -1
        expected = {
            "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
            "wq": (d, len(heads) * dk), "wk": (d, len(heads) * dk), "wv": (d, len(heads) * dk),
            "wo": (len(heads) * dk, d), "w1": (d, width), "w2": (width, d),
        }
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeMismatch(f"layers.{l}.{_TENSOR_NAMES[name]} has shape {arrays[name].shape}, expected {shape}")
        layers.append(LayerParams(**arrays, activation=lm["ffn_activation"], heads=heads))
    gates = None
    if GATES_TENSOR in ckpt:
        zeta = ckpt.get(GATES_TENSOR)
        if zeta.shape != (config.layers, config.heads):
            raise ShapeMismatch(f"{GATES_TENSOR} has shape {zeta.shape}")
        gates = GateSet(zeta)
    return Model(config, layers), gates
