"""Fixed-context MLP language model with exact gradients and decoding primitives.

The model embeds a window of ``context_len`` token ids, concatenates the
embeddings, pushes them through tanh dense layers, and projects to
vocabulary logits. Everything runs in float64 so finite-difference gradient
checks and cross-round probability differences stay numerically quiet.
Parameters live in one flat vector; named views into it are constructed on
demand, which keeps checkpointing and federated averaging trivial.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .corpus import EOS_ID, PAD_ID

CHECKPOINT_FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ModelConfig:
    context_len: int
    embed_dim: int
    hidden_dims: tuple[int, ...]
    vocab_size: int
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.context_len < 1:
            raise ModelError(f"model.context_len: must be >= 1, got {self.context_len}")
        if self.embed_dim < 1:
            raise ModelError(f"model.embed_dim: must be >= 1, got {self.embed_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ModelError(f"model.hidden_dims: all must be >= 1, got {self.hidden_dims}")
        if self.vocab_size < 4:
            raise ModelError(f"model.vocab_size: must be >= 4, got {self.vocab_size}")

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Flat-vector layout: embedding, then (W, b) per dense layer, then
        the output projection. Dense W uses (fan_in, fan_out) orientation."""
        shapes = [("embedding", (self.vocab_size, self.embed_dim))]
        fan_in = self.context_len * self.embed_dim
        for i, h in enumerate(self.hidden_dims):
            shapes.append((f"dense{i}_w", (fan_in, h)))
            shapes.append((f"dense{i}_b", (h,)))
            fan_in = h
        shapes.append(("out_w", (fan_in, self.vocab_size)))
        shapes.append(("out_b", (self.vocab_size,)))
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layer_shapes())

    def to_dict(self) -> dict:
        return {
            "context_len": self.context_len,
            "embed_dim": self.embed_dim,
            "hidden_dims": list(self.hidden_dims),
            "vocab_size": self.vocab_size,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            context_len=int(d["context_len"]),
            embed_dim=int(d["embed_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            vocab_size=int(d["vocab_size"]),
            init_seed=int(d.get("init_seed", 0)),
        )


class ModelParams:
    """Flat float64 parameter vector plus named views defined by the config."""

    def __init__(self, config: ModelConfig, flat: np.ndarray):
        expected = config.param_count()
        if flat.shape != (expected,):
            raise ModelError(f"flat parameter vector has length {flat.shape}, expected ({expected},)")
        self.config = config
        self.flat = flat
        self._views = {}
        offset = 0
        for name, shape in config.layer_shapes():
            size = int(np.prod(shape))
            self._views[name] = self.flat[offset : offset + size].reshape(shape)
            offset += size

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    @property
    def embedding(self) -> np.ndarray:
        return self._views["embedding"]

    def dense_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = [
            (self._views[f"dense{i}_w"], self._views[f"dense{i}_b"])
            for i in range(len(self.config.hidden_dims))
        ]
        layers.append((self._views["out_w"], self._views["out_b"]))
        return layers

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())


def init_model(config: ModelConfig) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(config.init_seed)
    flat = np.zeros(config.param_count(), dtype=np.float64)
    params = ModelParams(config, flat)
    scale = 1.0 / math.sqrt(config.embed_dim)
    params.embedding[:] = rng.uniform(-scale, scale, size=params.embedding.shape)
    for w, _b in params.dense_layers():
        scale = 1.0 / math.sqrt(w.shape[0])
        w[:] = rng.uniform(-scale, scale, size=w.shape)
    return params


def zero_model(config: ModelConfig) -> ModelParams:
    """All-zero parameters; handy for tests where logits must vanish."""
    return ModelParams(config, np.zeros(config.param_count(), dtype=np.float64))


def _forward_cached(params: ModelParams, contexts: np.ndarray):
    """Batch forward pass keeping layer activations for backprop.

    Returns (activations, logits) where activations[0] is the concatenated
    embedding input and activations[i] the output of tanh layer i.
    """
    cfg = params.config
    if contexts.ndim != 2 or contexts.shape[1] != cfg.context_len:
        raise ModelError(
            f"context batch has shape {contexts.shape}, expected (B, {cfg.context_len})"
        )
    if contexts.min() < 0 or contexts.max() >= cfg.vocab_size:
        raise ModelError("token id out of range for vocabulary")
    batch = contexts.shape[0]
    x = params.embedding[contexts].reshape(batch, cfg.context_len * cfg.embed_dim)
    activations = [x]
    layers = params.dense_layers()
    for w, b in layers[:-1]:
        x = np.tanh(x @ w + b)
        activations.append(x)
    out_w, out_b = layers[-1]
    logits = x @ out_w + out_b
    return activations, logits


def forward_logits(params: ModelParams, context) -> np.ndarray:
    """Next-token logits for a single context of exactly ``context_len`` ids."""
    contexts = np.asarray(context, dtype=np.int64).reshape(1, -1)
    _, logits = _forward_cached(params, contexts)
    return logits[0]


def forward_logits_batch(params: ModelParams, contexts: np.ndarray) -> np.ndarray:
    _, logits = _forward_cached(params, contexts)
    return logits


def _backward_from_dlogits(
    params: ModelParams, contexts: np.ndarray, activations, dlogits: np.ndarray
) -> np.ndarray:
    """Exact gradient of a scalar objective given d(objective)/d(logits)."""
    cfg = params.config
    grad_flat = np.zeros_like(params.flat)
    grads = ModelParams(cfg, grad_flat)
    layers = params.dense_layers()
    grad_layers = grads.dense_layers()

    out_w, _ = layers[-1]
    g_out_w, g_out_b = grad_layers[-1]
    g_out_w += activations[-1].T @ dlogits
    g_out_b += dlogits.sum(axis=0)
    dx = dlogits @ out_w.T
    for i in range(len(cfg.hidden_dims) - 1, -1, -1):
        w, _ = layers[i]
        g_w, g_b = grad_layers[i]
        act = activations[i + 1]
        dpre = dx * (1.0 - act * act)
        g_w += activations[i].T @ dpre
        g_b += dpre.sum(axis=0)
        dx = dpre @ w.T
    dembed = dx.reshape(contexts.shape[0], cfg.context_len, cfg.embed_dim)
    np.add.at(grads.embedding, contexts, dembed)
    return grad_flat


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_dlogits(logits: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy and its logit gradient for a batch."""
    batch = logits.shape[0]
    logp = _log_softmax(logits)
    loss = -logp[np.arange(batch), targets].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(batch), targets] -= 1.0
    dlogits /= batch
    return loss, dlogits


def loss_and_grad(params: ModelParams, contexts: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over (context, target) pairs and its exact gradient."""
    contexts = np.asarray(contexts, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if contexts.shape[0] == 0:
        raise ModelError("loss_and_grad requires a non-empty batch")
    activations, logits = _forward_cached(params, contexts)
    loss, dlogits = cross_entropy_dlogits(logits, targets)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite training loss: {loss}")
    grad = _backward_from_dlogits(params, contexts, activations, dlogits)
    return float(loss), grad


@dataclass
class OptimizerState:
    """AdamW moments plus schedule bookkeeping.

    ``step_count`` drives bias correction and restarts with each fresh state;
    ``schedule_offset`` positions this state inside the global cosine horizon
    of ``total_steps`` optimizer steps.
    """

    m: np.ndarray
    v: np.ndarray
    lr: float
    total_steps: int
    step_count: int = 0
    schedule_offset: int = 0
    beta1: float = 0.99
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    schedule: str = "cosine"  # or "constant"


def make_optimizer(
    n_params: int,
    lr: float,
    total_steps: int,
    schedule_offset: int = 0,
    **overrides,
) -> OptimizerState:
    return OptimizerState(
        m=np.zeros(n_params, dtype=np.float64),
        v=np.zeros(n_params, dtype=np.float64),
        lr=lr,
        total_steps=total_steps,
        schedule_offset=schedule_offset,
        **overrides,
    )


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def current_lr(state: OptimizerState) -> float:
    if state.schedule == "constant":
        return state.lr
    if state.schedule != "cosine":
        raise ModelError(f"unknown lr schedule {state.schedule!r}")
    position = min(state.schedule_offset + state.step_count, state.total_steps)
    return state.lr * 0.5 * (1.0 + math.cos(math.pi * position / max(state.total_steps, 1)))


def adamw_step(params: ModelParams | np.ndarray, grad: np.ndarray, state: OptimizerState) -> None:
    """One AdamW update in place: global-norm clip, bias-corrected moments,
    decoupled weight decay, scheduled learning rate."""
    flat = params.flat if isinstance(params, ModelParams) else params
    if grad.shape != flat.shape:
        raise ModelError(f"gradient shape {grad.shape} does not match parameters {flat.shape}")
    if state.clip_norm is not None:
        grad = clip_by_global_norm(grad, state.clip_norm)
    lr_t = current_lr(state)
    state.step_count += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.v / (1.0 - state.beta2 ** state.step_count)
    flat -= lr_t * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * flat)


def softmax(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction for stability."""
    if tau <= 0:
        raise ModelError(f"softmax temperature must be > 0, got {tau}")
    scaled = np.asarray(logits, dtype=np.float64) / tau
    scaled = scaled - scaled.max()
    exp = np.exp(scaled)
    return exp / exp.sum()


def top_p_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest descending-probability prefix with cumulative mass
    >= p (ties broken by ascending token id), zero the rest, renormalize."""
    if not 0.0 < p <= 1.0:
        raise ModelError(f"top_p must be in (0, 1], got {p}")
    probs = np.asarray(probs, dtype=np.float64)
    if p >= 1.0:
        return probs.copy()
    # lexsort's last key is primary: descending probability, then token id.
    order = np.lexsort((np.arange(len(probs)), -probs))
    cumulative = np.cumsum(probs[order])
    cutoff = int(np.searchsorted(cumulative, p - 1e-12, side="left"))
    keep = order[: min(cutoff + 1, len(probs))]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    total = out.sum()
    if total <= 0.0:
        raise ModelError("top_p_filter has no surviving probability mass")
    return out / total


def sample_token(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw over token-id order."""
    cumulative = np.cumsum(probs)
    u = rng.random() * cumulative[-1]
    return int(min(np.searchsorted(cumulative, u, side="right"), len(probs) - 1))


def masked_next_dist(params: ModelParams, window: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Next-token distribution with [PAD] masked out and renormalized."""
    probs = softmax(forward_logits(params, window), tau)
    probs[PAD_ID] = 0.0
    total = probs.sum()
    if total <= 0.0:
        raise ModelError("distribution is empty after [PAD] masking")
    return probs / total


def generate(
    params: ModelParams,
    prompt_ids,
    top_p: float,
    tau: float,
    max_len: int,
    rng: np.random.Generator,
) -> list[int]:
    """Autoregressive sampling: softmax(logits/tau) -> pad mask -> top-p ->
    inverse-CDF draw, stopping at [EOS] or after ``max_len`` tokens. Returns
    only the generated ids, excluding the prompt and the terminating [EOS]."""
    if max_len < 1:
        raise ModelError(f"max_len must be >= 1, got {max_len}")
    k = params.config.context_len
    window = [PAD_ID] * k + [int(t) for t in prompt_ids]
    out: list[int] = []
    for _ in range(max_len):
        context = np.asarray(window[-k:], dtype=np.int64)
        probs = masked_next_dist(params, context, tau)
        token = sample_token(top_p_filter(probs, top_p), rng)
        if token == EOS_ID:
            break
        out.append(token)
        window.append(token)
    return out


def save_checkpoint(path, params: ModelParams, round_idx: int, mean_train_loss=None) -> None:
    """Checkpoint file = one JSON header line + raw little-endian float64 data."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "round": round_idx,
        "config": params.config.to_dict(),
        "n_params": int(params.flat.size),
        "mean_train_loss": mean_train_loss,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.flat.astype("<f8", copy=False).tobytes())


def load_checkpoint(path):
    """Returns (params, round_idx, mean_train_loss); byte-exact round-trip."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        data = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    n = int(header["n_params"])
    flat = np.frombuffer(data, dtype="<f8", count=n).astype(np.float64)
    return ModelParams(config, flat), int(header["round"]), header.get("mean_train_loss")
