"""Federated training loop: per-round local AdamW on client shards, weighted
FedAvg aggregation, checkpoint retention, defense hooks, and scheduled
attacks against each new global model."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attack as atk
from . import defense as dfn
from . import model as lm
from .corpus import Corpus, RoundPlan, Vocab, build_examples
from .model import DivergenceError, ModelConfig, ModelParams

log = logging.getLogger("fedleak.fed")

_RNG_BATCH = 11
_RNG_DP = 12
_RNG_DROPOUT = 13
_RNG_ADAPTER_INIT = 14


class FedError(ValueError):
    pass


@dataclass(frozen=True)
class FedConfig:
    n_clients: int
    n_rounds: int
    local_iters: int
    batch_size: int
    lr: float
    defense: dfn.DefenseConfig | None = None

    def __post_init__(self):
        if self.n_clients < 1:
            raise FedError(f"fed.n_clients: must be >= 1, got {self.n_clients}")
        if self.n_rounds < 1:
            raise FedError(f"fed.n_rounds: must be >= 1, got {self.n_rounds}")
        if self.local_iters < 1:
            raise FedError(f"fed.local_iters: must be >= 1, got {self.local_iters}")
        if self.batch_size < 1:
            raise FedError(f"fed.batch_size: must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise FedError(f"fed.lr: must be >= 0, got {self.lr}")

    @property
    def total_steps(self) -> int:
        return self.n_rounds * self.local_iters


@dataclass
class Checkpoint:
    round: int
    params: ModelParams
    mean_train_loss: float | None


@dataclass
class CheckpointSeries:
    entries: list[Checkpoint] = field(default_factory=list)

    def append(self, entry: Checkpoint) -> None:
        expected = self.entries[-1].round + 1 if self.entries else 0
        if entry.round != expected:
            raise FedError(f"checkpoint round {entry.round} out of order, expected {expected}")
        self.entries.append(entry)

    def at_round(self, round_idx: int) -> Checkpoint:
        entry = self.entries[round_idx]
        if entry.round != round_idx:
            raise FedError(f"checkpoint series is not indexed by round near {round_idx}")
        return entry

    def consecutive_pair(self, round_idx: int):
        """(current, previous) checkpoints for the enhanced scheme."""
        if round_idx < 1:
            raise FedError("no previous checkpoint before round 1")
        current = self.at_round(round_idx)
        previous = self.at_round(round_idx - 1)
        return current, previous

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class AttackSpec:
    task: str
    config: atk.AttackConfig
    rounds: tuple[int, ...] | None = None  # None = every round, including 0

    def __post_init__(self):
        if self.task not in atk.TASKS:
            raise FedError(f"attack.task: expected one of {atk.TASKS}, got {self.task!r}")

    @property
    def name(self) -> str:
        return f"{self.task}_{self.config.scheme}"

    def active_at(self, round_idx: int) -> bool:
        if self.config.scheme == "enhanced" and round_idx == 0:
            return False  # needs a previous checkpoint
        return self.rounds is None or round_idx in self.rounds


@dataclass
class LocalResult:
    vector: np.ndarray  # trained parameter or adapter vector
    mean_loss: float  # mean optimized objective over steps
    mean_ce_loss: float  # cross-entropy component only


@dataclass
class RunResult:
    series: CheckpointSeries
    round_logs: list[dict]
    attack_records: dict  # spec name -> list of record dicts
    lora_base: ModelParams | None = None
    lora_adapters: "dfn.LoraAdapters | None" = None


def aggregate(vectors, weights) -> np.ndarray:
    """Coordinate-wise weighted mean, accumulated in fixed client order."""
    vectors = list(vectors)
    weights = [float(w) for w in weights]
    if not vectors or len(vectors) != len(weights):
        raise FedError("aggregate needs matching non-empty vectors and weights")
    if any(w <= 0 for w in weights):
        raise FedError(f"aggregate weights must be positive, got {weights}")
    length = vectors[0].shape
    for v in vectors[1:]:
        if v.shape != length:
            raise FedError(f"parameter length mismatch: {v.shape} vs {length}")
    acc = np.zeros_like(vectors[0])
    for v, w in zip(vectors, weights):
        acc += w * v
    return acc / sum(weights)


def _batch_indices(n_examples: int, batch_size: int, n_steps: int, rng) -> list[np.ndarray]:
    """Without-replacement batches, reshuffling each time the pool empties."""
    batches = []
    pool: list[int] = []
    for _ in range(n_steps):
        batch = []
        while len(batch) < batch_size:
            if not pool:
                pool = list(rng.permutation(n_examples))
            batch.append(pool.pop(0))
        batches.append(np.asarray(batch, dtype=np.int64))
    return batches


def local_train(
    global_params: ModelParams,
    shard_docs,
    vocab: Vocab,
    fed_cfg: FedConfig,
    round_idx: int,
    client_idx: int,
    master_seed: int,
    kl_reference: ModelParams | None = None,
    lora_base: ModelParams | None = None,
    lora_adapters: "dfn.LoraAdapters | None" = None,
) -> LocalResult:
    """Train a copy of the global state for local_iters AdamW steps on the
    shard's next-token examples.

    round_idx is 1-based (the round whose checkpoint this produces); the
    cosine learning-rate schedule is positioned at the global iteration
    count while fresh optimizer moments restart the bias correction.
    """
    if not shard_docs:
        raise FedError(f"round {round_idx} client {client_idx}: empty shard")
    defense = fed_cfg.defense or dfn.DefenseConfig()
    model_cfg = (lora_base or global_params).config
    contexts, targets = build_examples(vocab, shard_docs, model_cfg.context_len)

    batch_rng = np.random.default_rng(
        np.random.SeedSequence([master_seed, _RNG_BATCH, round_idx, client_idx])
    )
    batches = _batch_indices(len(targets), fed_cfg.batch_size, fed_cfg.local_iters, batch_rng)

    dp = defense.dp
    dp_rng = (
        np.random.default_rng(np.random.SeedSequence([master_seed, _RNG_DP, round_idx, client_idx]))
        if dp is not None and dp.noise_multiplier > 0
        else None
    )

    lora = defense.lora
    if lora is not None:
        if lora_base is None or lora_adapters is None:
            raise FedError("LoRA defense is active but no base/adapter state was supplied")
        trained = lora_adapters.copy()
        vector = trained.flat
        dropout_rng = (
            np.random.default_rng(
                np.random.SeedSequence([master_seed, _RNG_DROPOUT, round_idx, client_idx])
            )
            if lora.dropout > 0
            else None
        )
    else:
        params = global_params.copy()
        vector = params.flat

    optimizer = lm.make_optimizer(
        vector.size,
        lr=fed_cfg.lr,
        total_steps=fed_cfg.total_steps,
        schedule_offset=(round_idx - 1) * fed_cfg.local_iters,
        # under DP the defense clip replaces the optimizer clip; re-clipping
        # would strip the calibrated noise back off the update
        clip_norm=None if dp is not None else 1.0,
    )

    loss_sum = 0.0
    ce_sum = 0.0
    try:
        for batch in batches:
            bc, bt = contexts[batch], targets[batch]
            if lora is not None:
                loss, grad = dfn.lora_loss_and_grad(lora_base, trained, bc, bt, dropout_rng)
                ce = loss
            elif defense.kl is not None:
                if kl_reference is None:
                    raise FedError("KL defense is active but no reference model was supplied")
                loss, grad, ce = dfn.kl_regularized_loss(params, kl_reference, defense.kl.mu, bc, bt)
            else:
                loss, grad = lm.loss_and_grad(params, bc, bt)
                ce = loss
            if dp is not None:
                grad = dfn.clip_gradient(grad, dp.max_grad_norm)
                if dp_rng is not None:
                    grad = dfn.add_dp_noise(grad, dp.noise_multiplier, dp.max_grad_norm, dp_rng)
            lm.adamw_step(vector, grad, optimizer)
            loss_sum += loss
            ce_sum += ce
    except DivergenceError as exc:
        raise DivergenceError(f"round {round_idx} client {client_idx}: {exc}") from exc

    n = len(batches)
    return LocalResult(vector, loss_sum / n, ce_sum / n)


def _run_attacks_for_round(
    spec: AttackSpec,
    series: CheckpointSeries,
    corpus: Corpus,
    vocab: Vocab,
    plan: RoundPlan,
    round_idx: int,
    master_seed: int,
    jobs: int,
    doc_tokens,
    perturber,
):
    current = series.at_round(round_idx)
    previous = None
    if spec.config.scheme == "enhanced":
        current, prev_entry = series.consecutive_pair(round_idx)
        previous = prev_entry.params
    if spec.task == atk.TASK_ZERO_INPUT:
        samples = atk.zero_input_attack(
            current.params, previous, corpus, vocab, spec.config,
            master_seed, round_idx, jobs=jobs, doc_tokens=doc_tokens,
        )
    else:
        if round_idx >= 1:
            doc_ids = plan.round_doc_ids(round_idx - 1)
        else:
            doc_ids = [doc.id for doc in corpus]  # pre-training baseline pool
        docs = atk.select_attack_docs(
            corpus, doc_ids, spec.config.n_samples, master_seed, round_idx,
            spec.task, spec.config.scheme,
        )
        samples = atk.partial_input_attack(
            current.params, previous, docs, vocab, spec.config,
            master_seed, round_idx, task=spec.task, jobs=jobs, perturber=perturber,
        )
    return [atk.sample_to_record(s, vocab) for s in samples]


def run_training(
    corpus: Corpus,
    vocab: Vocab,
    plan: RoundPlan,
    model_cfg: ModelConfig,
    fed_cfg: FedConfig,
    attacks: list[AttackSpec] | None = None,
    master_seed: int = 0,
    out_dir: str | None = None,
    jobs: int = 1,
) -> RunResult:
    """Run the full federated protocol with scheduled attacks.

    The checkpoint series starts with the untrained round-0 model so leakage
    curves include the pre-training baseline. Training errors abort the run;
    attack errors are logged and training continues.
    """
    if plan.n_clients != fed_cfg.n_clients or plan.n_rounds != fed_cfg.n_rounds:
        raise FedError(
            f"round plan ({plan.n_rounds} rounds x {plan.n_clients} clients) does not match "
            f"fed config ({fed_cfg.n_rounds} x {fed_cfg.n_clients})"
        )
    attacks = attacks or []
    defense = fed_cfg.defense or dfn.DefenseConfig()
    jobs = max(1, jobs)

    global_params = lm.init_model(model_cfg)
    lora_base = None
    adapters = None
    if defense.lora is not None:
        lora_base = global_params
        adapters = dfn.init_adapters(
            model_cfg, defense.lora,
            seed=np.random.SeedSequence([master_seed, _RNG_ADAPTER_INIT]),
        )
        lora_base_snapshot = lora_base.flat.copy()
        global_params = dfn.merge_adapters(lora_base, adapters)
    kl_reference = global_params.copy() if defense.kl is not None else None

    series = CheckpointSeries()
    series.append(Checkpoint(0, global_params.copy(), None))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        lm.save_checkpoint(os.path.join(out_dir, "ckpt_round_0"), global_params, 0, None)

    doc_tokens = atk.corpus_token_lists(corpus)
    perturbers = {}
    for spec in attacks:
        if spec.task == atk.TASK_DISTURBED_INPUT:
            if spec.config.perturb is None:
                raise FedError(f"attack {spec.name}: disturbed_input requires a perturb config")
            perturbers[spec.name] = atk.Perturber.from_config(spec.config.perturb)

    attack_records: dict[str, list[dict]] = {spec.name: [] for spec in attacks}
    round_logs: list[dict] = []
    consumed: set[int] = set()

    def attack_round(round_idx: int) -> None:
        for spec in attacks:
            if not spec.active_at(round_idx):
                continue
            try:
                attack_records[spec.name].extend(
                    _run_attacks_for_round(
                        spec, series, corpus, vocab, plan, round_idx,
                        master_seed, jobs, doc_tokens, perturbers.get(spec.name),
                    )
                )
            except Exception:
                log.exception("attack %s failed at round %d; training continues", spec.name, round_idx)

    attack_round(0)

    for round_idx in range(1, fed_cfg.n_rounds + 1):
        shards = [
            [corpus.by_id(i) for i in plan.shard(round_idx - 1, c)]
            for c in range(fed_cfg.n_clients)
        ]
        for shard in shards:
            for doc in shard:
                if doc.id in consumed:
                    raise FedError(f"document {doc.id} scheduled twice; single-epoch use violated")
                consumed.add(doc.id)

        def train_client(client_idx: int) -> LocalResult:
            return local_train(
                global_params,
                shards[client_idx],
                vocab,
                fed_cfg,
                round_idx,
                client_idx,
                master_seed,
                kl_reference=(
                    global_params if (defense.kl and defense.kl.reference == "round_start") else kl_reference
                ),
                lora_base=lora_base,
                lora_adapters=adapters,
            )

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(train_client, range(fed_cfg.n_clients)))
        else:
            results = [train_client(c) for c in range(fed_cfg.n_clients)]

        weights = [len(shard) for shard in shards]
        merged_vector = aggregate([r.vector for r in results], weights)
        if defense.lora is not None:
            adapters = dfn.LoraAdapters(model_cfg, defense.lora, merged_vector)
            global_params = dfn.merge_adapters(lora_base, adapters)
        else:
            global_params = ModelParams(model_cfg, merged_vector)

        total_weight = sum(weights)
        global_loss = sum(r.mean_loss * w for r, w in zip(results, weights)) / total_weight
        global_ce = sum(r.mean_ce_loss * w for r, w in zip(results, weights)) / total_weight
        series.append(Checkpoint(round_idx, global_params.copy(), global_loss))

        checkpoint_path = None
        if out_dir is not None:
            checkpoint_path = os.path.join(out_dir, f"ckpt_round_{round_idx}")
            lm.save_checkpoint(checkpoint_path, global_params, round_idx, global_loss)

        round_logs.append(
            {
                "round": round_idx,
                "client_losses": [r.mean_loss for r in results],
                "global_loss": global_loss,
                "global_ce_loss": global_ce,
                "checkpoint_path": checkpoint_path,
            }
        )
        log.info("round %d/%d: loss %.4f", round_idx, fed_cfg.n_rounds, global_loss)

        attack_round(round_idx)

    planned = {doc_id for cell in plan.shards.values() for doc_id in cell}
    if consumed != planned:
        raise FedError("run consumed a different document set than the plan scheduled")

    if defense.lora is not None and not np.array_equal(lora_base.flat, lora_base_snapshot):
        raise FedError("LoRA base parameters changed during the run")

    return RunResult(
        series=series,
        round_logs=round_logs,
        attack_records=attack_records,
        lora_base=lora_base,
        lora_adapters=adapters,
    )
