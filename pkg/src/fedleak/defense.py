"""Training-time mitigations: DP gradient noise, KL update regularization, LoRA.

All three plug into the local training loop in :mod:`fedleak.fed` — DP as a
per-step gradient transform, KL as a loss augmentation, LoRA as a swap of the
trainable parameter set (low-rank adapters over frozen base weights).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as lm
from .model import ModelConfig, ModelParams


class DefenseError(ValueError):
    pass


@dataclass(frozen=True)
class DPConfig:
    noise_multiplier: float
    max_grad_norm: float = 1.0
    delta: float = 1e-5  # reported only; no epsilon accounting

    def __post_init__(self):
        if self.noise_multiplier < 0:
            raise DefenseError(f"defense.dp.noise_multiplier: must be >= 0, got {self.noise_multiplier}")
        if self.max_grad_norm <= 0:
            raise DefenseError(f"defense.dp.max_grad_norm: must be > 0, got {self.max_grad_norm}")


@dataclass(frozen=True)
class KLConfig:
    mu: float
    reference: str = "initial"  # or "round_start"

    def __post_init__(self):
        if self.mu < 0:
            raise DefenseError(f"defense.kl.mu: must be >= 0, got {self.mu}")
        if self.reference not in ("initial", "round_start"):
            raise DefenseError(f"defense.kl.reference: expected 'initial' or 'round_start', got {self.reference!r}")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int
    alpha: float
    dropout: float = 0.1
    init_scale: float = 0.01

    def __post_init__(self):
        if self.rank < 1:
            raise DefenseError(f"defense.lora.rank: must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise DefenseError(f"defense.lora.dropout: must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class DefenseConfig:
    dp: DPConfig | None = None
    kl: KLConfig | None = None
    lora: LoRAConfig | None = None

    def __post_init__(self):
        if self.kl is not None and self.lora is not None:
            raise DefenseError("defense: kl and lora cannot be combined")


def clip_gradient(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale the gradient down to L2 norm ``max_norm`` if it exceeds it."""
    if max_norm <= 0:
        raise DefenseError(f"clip_gradient requires max_norm > 0, got {max_norm}")
    return lm.clip_by_global_norm(grad, max_norm)


def add_dp_noise(
    grad: np.ndarray, noise_multiplier: float, max_norm: float, rng: np.random.Generator
) -> np.ndarray:
    """Add i.i.d. Gaussian noise with per-coordinate std multiplier * max_norm."""
    if noise_multiplier == 0.0:
        return grad
    return grad + rng.normal(0.0, noise_multiplier * max_norm, size=grad.shape)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for two distributions over the same support."""
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def kl_regularized_loss(
    params: ModelParams,
    reference: ModelParams,
    mu: float,
    contexts: np.ndarray,
    targets: np.ndarray,
):
    """Cross-entropy plus mu * mean KL(current || reference) per batch position.

    Returns (total_loss, grad, ce_loss); the reference model is a constant, so
    the gradient flows through the current model's logits only. For logits l,
    d KL / d l_j = p_j * ((log p_j - log q_j) - KL).
    """
    contexts = np.asarray(contexts, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    activations, logits = lm._forward_cached(params, contexts)
    ce_loss, dlogits = lm.cross_entropy_dlogits(logits, targets)
    if mu == 0.0:
        grad = lm._backward_from_dlogits(params, contexts, activations, dlogits)
        return float(ce_loss), grad, float(ce_loss)

    _, ref_logits = lm._forward_cached(reference, contexts)
    logp = lm._log_softmax(logits)
    ref_logp = lm._log_softmax(ref_logits)
    p = np.exp(logp)
    gap = logp - ref_logp
    kl_rows = np.sum(p * gap, axis=1)
    batch = contexts.shape[0]
    dlogits = dlogits + (mu / batch) * p * (gap - kl_rows[:, None])
    total = float(ce_loss + mu * kl_rows.mean())
    if not np.isfinite(total):
        raise lm.DivergenceError(f"non-finite training loss: {total}")
    grad = lm._backward_from_dlogits(params, contexts, activations, dlogits)
    return total, grad, float(ce_loss)


def lora_effective_weight(
    w: np.ndarray, a: np.ndarray, b: np.ndarray, rank: int, alpha: float
) -> np.ndarray:
    """W' = W + (alpha / rank) * B @ A with A (r x in), B (out x r), W (out x in).

    ``rank`` only sets the alpha/rank scale, so scaling alpha and rank
    together leaves the result unchanged for fixed adapters.
    """
    out_dim, in_dim = w.shape
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != in_dim or b.shape[0] != out_dim or a.shape[0] != b.shape[1]:
        raise DefenseError(f"adapter shapes A{a.shape} / B{b.shape} do not fit W{w.shape}")
    if rank < 1:
        raise DefenseError(f"rank must be >= 1, got {rank}")
    return w + (alpha / rank) * (b @ a)


class LoraAdapters:
    """Low-rank adapters over every dense weight matrix (output projection
    included; embedding table and biases stay frozen).

    Internally the adapter pair for a (fan_in, fan_out) weight is stored as
    ``down`` (fan_in x rank) and ``up`` (rank x fan_out), so the effective
    weight in the model's orientation is W + (alpha/rank) * down @ up.
    """

    def __init__(self, model_config: ModelConfig, config: LoRAConfig, flat: np.ndarray):
        self.model_config = model_config
        self.config = config
        shapes = self._shapes(model_config, config.rank)
        expected = sum(int(np.prod(s)) for _, s in shapes)
        if flat.shape != (expected,):
            raise DefenseError(f"adapter vector has length {flat.shape}, expected ({expected},)")
        self.flat = flat
        self.pairs = []
        offset = 0
        for i in range(0, len(shapes), 2):
            (_, down_shape), (_, up_shape) = shapes[i], shapes[i + 1]
            down_size, up_size = int(np.prod(down_shape)), int(np.prod(up_shape))
            down = self.flat[offset : offset + down_size].reshape(down_shape)
            offset += down_size
            up = self.flat[offset : offset + up_size].reshape(up_shape)
            offset += up_size
            self.pairs.append((down, up))

    @staticmethod
    def _shapes(model_config: ModelConfig, rank: int):
        shapes = []
        for name, shape in model_config.layer_shapes():
            if name == "embedding" or name.endswith("_b"):
                continue
            fan_in, fan_out = shape
            if rank > min(fan_in, fan_out):
                raise DefenseError(
                    f"defense.lora.rank: {rank} exceeds min dimension of layer {name} {shape}"
                )
            shapes.append((f"{name}_down", (fan_in, rank)))
            shapes.append((f"{name}_up", (rank, fan_out)))
        return shapes

    @classmethod
    def param_count(cls, model_config: ModelConfig, rank: int) -> int:
        return sum(int(np.prod(s)) for _, s in cls._shapes(model_config, rank))

    def copy(self) -> "LoraAdapters":
        return LoraAdapters(self.model_config, self.config, self.flat.copy())

    @property
    def scaling(self) -> float:
        return self.config.alpha / self.config.rank


def init_adapters(model_config: ModelConfig, config: LoRAConfig, seed) -> LoraAdapters:
    """Down matrices small uniform, up matrices zero: training starts exactly
    at the base model."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(LoraAdapters.param_count(model_config, config.rank), dtype=np.float64)
    adapters = LoraAdapters(model_config, config, flat)
    for down, _up in adapters.pairs:
        down[:] = rng.uniform(-config.init_scale, config.init_scale, size=down.shape)
    return adapters


def merge_adapters(base: ModelParams, adapters: LoraAdapters) -> ModelParams:
    """Materialize the effective model: base with adapter deltas folded in."""
    merged = base.copy()
    scale = adapters.scaling
    for (w, _b), (down, up) in zip(merged.dense_layers(), adapters.pairs):
        w += scale * (down @ up)
    return merged


def lora_loss_and_grad(
    base: ModelParams,
    adapters: LoraAdapters,
    contexts: np.ndarray,
    targets: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
):
    """Cross-entropy loss with gradients flowing only into the adapters.

    Dropout (training mode, when a dropout rng is supplied and the configured
    rate is positive) applies an inverted mask to each adapter branch input;
    the frozen base path sees the raw activations.
    """
    contexts = np.asarray(contexts, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    cfg = base.config
    scale = adapters.scaling
    rate = adapters.config.dropout if dropout_rng is not None else 0.0

    batch = contexts.shape[0]
    x = base.embedding[contexts].reshape(batch, cfg.context_len * cfg.embed_dim)
    layers = base.dense_layers()
    activations = [x]
    branch_inputs = []
    branch_masks = []
    for idx, ((w, b), (down, up)) in enumerate(zip(layers, adapters.pairs)):
        if rate > 0.0:
            mask = (dropout_rng.random(x.shape) >= rate) / (1.0 - rate)
        else:
            mask = None
        dropped = x if mask is None else x * mask
        branch_inputs.append(dropped)
        branch_masks.append(mask)
        pre = x @ w + b + scale * ((dropped @ down) @ up)
        if idx < len(layers) - 1:
            x = np.tanh(pre)
            activations.append(x)
        else:
            logits = pre
    loss, dlogits = lm.cross_entropy_dlogits(logits, targets)
    if not np.isfinite(loss):
        raise lm.DivergenceError(f"non-finite training loss: {loss}")

    grad_flat = np.zeros_like(adapters.flat)
    grads = LoraAdapters(cfg, adapters.config, grad_flat)
    dpre = dlogits
    for idx in range(len(layers) - 1, -1, -1):
        w, _b = layers[idx]
        down, up = adapters.pairs[idx]
        g_down, g_up = grads.pairs[idx]
        dropped = branch_inputs[idx]
        hidden = dropped @ down
        g_up += scale * hidden.T @ dpre
        d_hidden = scale * (dpre @ up.T)
        g_down += dropped.T @ d_hidden
        if idx == 0:
            break
        d_branch_x = d_hidden @ down.T
        if branch_masks[idx] is not None:
            d_branch_x = d_branch_x * branch_masks[idx]
        dx = dpre @ w.T + d_branch_x
        act = activations[idx]
        dpre = dx * (1.0 - act * act)
    return float(loss), grad_flat
