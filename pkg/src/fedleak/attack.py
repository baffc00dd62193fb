"""Extraction attacks against global-model checkpoints.

Two tasks — free generation from [BOS] matched against the corpus, and
completion of a document prefix scored against the held-back suffix (plus a
disturbed variant that perturbs the prefix) — and two decoding schemes:
plain nucleus sampling from the current model, and an enhanced decoder that
reweights the current nucleus by how much each token's probability rose
since the previous round's model.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as lm
from .corpus import BOS_ID, Corpus, Vocab, prefix_split, tokenize
from .metrics import rouge_l, rouge_n
from .model import ModelParams
from .perturb import Perturber, PerturbConfig, perturb_input

log = logging.getLogger("fedleak.attack")

TASK_ZERO_INPUT = "zero_input"
TASK_PARTIAL_INPUT = "partial_input"
TASK_DISTURBED_INPUT = "disturbed_input"
TASKS = (TASK_ZERO_INPUT, TASK_PARTIAL_INPUT, TASK_DISTURBED_INPUT)
SCHEMES = ("basic", "enhanced")

_TASK_CODES = {name: i for i, name in enumerate(TASKS)}
_SCHEME_CODES = {name: i for i, name in enumerate(SCHEMES)}

# rng stream tags; every sample gets its own stream so thread scheduling
# cannot change results.
_RNG_SAMPLE = 41
_RNG_SELECT = 42
_RNG_PERTURB = 43


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    scheme: str = "basic"
    top_p: float = 0.9
    temperature: float = 0.5  # fusion temperature of the enhanced scheme
    n_samples: int = 30
    prefix_fraction: float = 0.8
    max_len: int = 72
    difference_space: str = "probability"  # or "logit"
    perturb: PerturbConfig | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise AttackError(f"attack.scheme: expected one of {SCHEMES}, got {self.scheme!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise AttackError(f"attack.top_p: must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0.0:
            raise AttackError(f"attack.temperature: must be > 0, got {self.temperature}")
        if self.n_samples < 1:
            raise AttackError(f"attack.n_samples: must be >= 1, got {self.n_samples}")
        if not 0.0 < self.prefix_fraction < 1.0:
            raise AttackError(
                f"attack.prefix_fraction: must be in (0, 1), got {self.prefix_fraction}"
            )
        if self.max_len < 1:
            raise AttackError(f"attack.max_len: must be >= 1, got {self.max_len}")
        if self.difference_space not in ("probability", "logit"):
            raise AttackError(
                f"attack.difference_space: expected 'probability' or 'logit', got {self.difference_space!r}"
            )


@dataclass(frozen=True)
class AttackSample:
    round: int
    task: str
    scheme: str
    sample_idx: int
    prompt_ids: tuple[int, ...]
    generated_ids: tuple[int, ...]
    truth_ids: tuple[int, ...]
    best_match_id: int | None
    doc_id: int | None
    rouge1: float
    rouge2: float
    rougeL: float


def sample_rng(master_seed: int, round_idx: int, task: str, scheme: str, sample_idx: int):
    return np.random.default_rng(
        np.random.SeedSequence(
            [master_seed, _RNG_SAMPLE, round_idx, _TASK_CODES[task], _SCHEME_CODES[scheme], sample_idx]
        )
    )


def fuse_distribution(nucleus: np.ndarray, delta: np.ndarray, tau: float) -> np.ndarray:
    """Reweight a nucleus distribution by exp(delta/tau) and renormalize.

    Softmax weights are used unnormalized (shifted so the max is 1); their
    normalizer cancels in the final renormalization, and constant weights
    reduce exactly to the nucleus itself.
    """
    if tau <= 0.0:
        raise AttackError(f"fusion temperature must be > 0, got {tau}")
    if nucleus.shape != delta.shape:
        raise AttackError(f"vocabulary mismatch: {nucleus.shape} vs {delta.shape}")
    scaled = delta / tau
    weights = np.exp(scaled - scaled.max())
    if np.all(weights == weights[0]):
        return nucleus.copy()
    fused = weights * nucleus
    total = fused.sum()
    if total <= 0.0:
        raise AttackError("fused distribution has no probability mass")
    return fused / total


def enhanced_next_dist(
    pi_current: np.ndarray, pi_previous: np.ndarray, top_p: float, tau: float
) -> np.ndarray:
    """Next-token distribution of the enhanced scheme: the current model's
    top-p nucleus reweighted by softmax of the cross-round probability rise."""
    pi_current = np.asarray(pi_current, dtype=np.float64)
    pi_previous = np.asarray(pi_previous, dtype=np.float64)
    if pi_current.shape != pi_previous.shape:
        raise AttackError(
            f"vocabulary mismatch: {pi_current.shape} vs {pi_previous.shape}"
        )
    nucleus = lm.top_p_filter(pi_current, top_p)
    return fuse_distribution(nucleus, pi_current - pi_previous, tau)


def basic_generate(params: ModelParams, prompt_ids, cfg: AttackConfig, rng) -> list[int]:
    """Plain nucleus sampling from the current checkpoint (unit temperature)."""
    return lm.generate(params, prompt_ids, cfg.top_p, 1.0, cfg.max_len, rng)


def enhanced_generate(
    params_current: ModelParams,
    params_previous: ModelParams,
    prompt_ids,
    cfg: AttackConfig,
    rng,
) -> list[int]:
    """Autoregressive sampling from the fused cross-round distribution."""
    if params_current.config.vocab_size != params_previous.config.vocab_size:
        raise AttackError("checkpoints disagree on vocabulary size")
    k = params_current.config.context_len
    window = [lm.PAD_ID] * k + [int(t) for t in prompt_ids]
    out: list[int] = []
    for _ in range(cfg.max_len):
        context = np.asarray(window[-k:], dtype=np.int64)
        if cfg.difference_space == "probability":
            pi_cur = lm.masked_next_dist(params_current, context)
            pi_prev = lm.masked_next_dist(params_previous, context)
            dist = enhanced_next_dist(pi_cur, pi_prev, cfg.top_p, cfg.temperature)
        else:
            logits_cur = lm.forward_logits(params_current, context)
            logits_prev = lm.forward_logits(params_previous, context)
            probs = lm.softmax(logits_cur, 1.0)
            probs[lm.PAD_ID] = 0.0
            probs /= probs.sum()
            nucleus = lm.top_p_filter(probs, cfg.top_p)
            dist = fuse_distribution(nucleus, logits_cur - logits_prev, cfg.temperature)
        token = lm.sample_token(dist, rng)
        if token == lm.EOS_ID:
            break
        out.append(token)
        window.append(token)
    return out


def _generate(params_t, params_prev, prompt_ids, cfg: AttackConfig, rng) -> list[int]:
    if cfg.scheme == "basic":
        return basic_generate(params_t, prompt_ids, cfg, rng)
    if params_prev is None:
        raise AttackError("enhanced scheme needs the previous round's checkpoint")
    return enhanced_generate(params_t, params_prev, prompt_ids, cfg, rng)


def corpus_token_lists(corpus: Corpus) -> list[list[str]]:
    return [tokenize(doc.text) for doc in corpus]


def _map_samples(worker, indices, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(worker, indices))
    return [worker(i) for i in indices]


def zero_input_attack(
    params_t: ModelParams,
    params_prev: ModelParams | None,
    corpus: Corpus,
    vocab: Vocab,
    cfg: AttackConfig,
    master_seed: int,
    round_idx: int,
    jobs: int = 1,
    doc_tokens: list[list[str]] | None = None,
) -> list[AttackSample]:
    """Generate n_samples texts from a bare [BOS] prompt and match each one
    against every training document, keeping the best ROUGE-L match."""
    refs = corpus_token_lists(corpus) if doc_tokens is None else doc_tokens

    def worker(sample_idx: int) -> AttackSample:
        rng = sample_rng(master_seed, round_idx, TASK_ZERO_INPUT, cfg.scheme, sample_idx)
        generated = _generate(params_t, params_prev, [BOS_ID], cfg, rng)
        gen_tokens = vocab.decode_tokens(generated)
        best_id, best = 0, -1.0
        for doc_id, ref in enumerate(refs):
            score = rouge_l(gen_tokens, ref).f1
            if score > best:
                best_id, best = doc_id, score
        best_ref = refs[best_id]
        return AttackSample(
            round=round_idx,
            task=TASK_ZERO_INPUT,
            scheme=cfg.scheme,
            sample_idx=sample_idx,
            prompt_ids=(BOS_ID,),
            generated_ids=tuple(generated),
            truth_ids=(),
            best_match_id=best_id,
            doc_id=None,
            rouge1=rouge_n(gen_tokens, best_ref, 1).f1,
            rouge2=rouge_n(gen_tokens, best_ref, 2).f1,
            rougeL=best,
        )

    return _map_samples(worker, range(cfg.n_samples), jobs)


def partial_input_attack(
    params_t: ModelParams,
    params_prev: ModelParams | None,
    docs,
    vocab: Vocab,
    cfg: AttackConfig,
    master_seed: int,
    round_idx: int,
    task: str = TASK_PARTIAL_INPUT,
    jobs: int = 1,
    perturber: Perturber | None = None,
) -> list[AttackSample]:
    """Prompt with the leading prefix_fraction of each document's tokens and
    score the completion against the held-back suffix. Documents too short
    to split are skipped with a warning."""
    if task == TASK_DISTURBED_INPUT and perturber is None:
        if cfg.perturb is None:
            raise AttackError("disturbed_input task requires a perturb config")
        perturber = Perturber.from_config(cfg.perturb)

    usable = []
    for doc in docs:
        tokens = tokenize(doc.text)
        cut = math.ceil(cfg.prefix_fraction * len(tokens))
        if cut == 0 or cut >= len(tokens):
            log.warning(
                "round %d: document %d too short (%d tokens) for prefix fraction %.2f; skipped",
                round_idx, doc.id, len(tokens), cfg.prefix_fraction,
            )
            continue
        usable.append((doc, tokens))

    def worker(sample_idx: int) -> AttackSample:
        doc, tokens = usable[sample_idx]
        prefix, truth = prefix_split(tokens, cfg.prefix_fraction)
        if task == TASK_DISTURBED_INPUT:
            prefix = perturb_input(
                prefix, perturber, cfg.perturb,
                seed=[cfg.perturb.seed, _RNG_PERTURB, round_idx, doc.id],
            )
        prompt_ids = [BOS_ID] + vocab.encode_tokens(prefix)
        rng = sample_rng(master_seed, round_idx, task, cfg.scheme, sample_idx)
        generated = _generate(params_t, params_prev, prompt_ids, cfg, rng)
        gen_tokens = vocab.decode_tokens(generated)
        return AttackSample(
            round=round_idx,
            task=task,
            scheme=cfg.scheme,
            sample_idx=sample_idx,
            prompt_ids=tuple(prompt_ids),
            generated_ids=tuple(generated),
            truth_ids=tuple(vocab.encode_tokens(truth)),
            best_match_id=None,
            doc_id=doc.id,
            rouge1=rouge_n(gen_tokens, truth, 1).f1,
            rouge2=rouge_n(gen_tokens, truth, 2).f1,
            rougeL=rouge_l(gen_tokens, truth).f1,
        )

    return _map_samples(worker, range(len(usable)), jobs)


def select_attack_docs(
    corpus: Corpus, doc_ids, n_samples: int, master_seed: int, round_idx: int,
    task: str, scheme: str,
):
    """Deterministically sample up to n_samples documents for a completion attack."""
    rng = np.random.default_rng(
        np.random.SeedSequence(
            [master_seed, _RNG_SELECT, round_idx, _TASK_CODES[task], _SCHEME_CODES[scheme]]
        )
    )
    ids = list(doc_ids)
    take = min(n_samples, len(ids))
    chosen = rng.choice(len(ids), size=take, replace=False)
    return [corpus.by_id(ids[int(i)]) for i in sorted(chosen)]


def sample_to_record(sample: AttackSample, vocab: Vocab) -> dict:
    """Flatten an attack sample into the JSON-lines record shape."""
    return {
        "round": sample.round,
        "task": sample.task,
        "scheme": sample.scheme,
        "sample_idx": sample.sample_idx,
        "prompt_text": vocab.decode(sample.prompt_ids),
        "generated_text": vocab.decode(sample.generated_ids),
        "truth_text": vocab.decode(sample.truth_ids),
        "best_match_id": sample.best_match_id,
        "doc_id": sample.doc_id,
        "rouge1": sample.rouge1,
        "rouge2": sample.rouge2,
        "rougeL": sample.rougeL,
    }
