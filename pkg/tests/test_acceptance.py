"""End-to-end acceptance suite.

Each criterion prints one PASS/FAIL line (run with ``pytest -s`` to watch).
The heavy federated runs are session-scoped fixtures shared across criteria:
one undefended trend run (plus a second copy at a different worker count for
the determinism check) and one run per defense.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import finite_difference_check

from fedleak import attack as A
from fedleak import corpus as C
from fedleak import fed as F
from fedleak import model as M
from fedleak.cli import run_experiment
from fedleak.config import parse_config
from fedleak.defense import (
    LoRAConfig,
    add_dp_noise,
    init_adapters,
    kl_regularized_loss,
    lora_loss_and_grad,
)
from fedleak.metrics import paired_t_test, rouge_l, top_fraction_mean
from fedleak.model import ModelConfig, init_model, loss_and_grad, top_p_filter
from fedleak.perturb import PerturbConfig, Perturber, is_pii_like, perturb_input, write_toy_perturbation_files
from fedleak.report import build_reports, read_attack_jsonl, read_report_csv, write_report_csv

from test_metrics import lcs_brute_force

# The shared memorization-trend configuration (criterion 3), reused by the
# scheme comparison, the defense comparisons, determinism, and PII recovery.
MASTER_SEED = 1234
TREND_CONFIG = {
    "seed": MASTER_SEED,
    "corpus": {
        "synthetic": {"n_docs": 200, "pii_density": 0.35, "seed": 7},
        "vocab_size": 1000,
        "partition_seed": 99,
    },
    "model": {"context_len": 8, "embed_dim": 32, "hidden_dims": [128], "init_seed": 11},
    "fed": {"n_clients": 4, "n_rounds": 12, "local_iters": 200, "batch_size": 8, "lr": 0.0025},
    "attacks": [
        {"task": "zero_input", "scheme": "basic", "n_samples": 30, "top_p": 0.85,
         "temperature": 0.1, "max_len": 80},
        {"task": "zero_input", "scheme": "enhanced", "n_samples": 30, "top_p": 0.85,
         "temperature": 0.1, "max_len": 80},
    ],
}


def note(criterion: str, passed: bool, detail: str) -> None:
    print(f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}")


def _with_defense(defense: dict) -> dict:
    cfg = json.loads(json.dumps(TREND_CONFIG))
    cfg["defense"] = defense
    return cfg


def _run(config_dict: dict, out_dir: Path, jobs: int = 1):
    cfg = parse_config(config_dict)
    return run_experiment(cfg, str(out_dir), cfg.seed, jobs)


def _top10_series(records):
    by_round = {}
    for record in records:
        by_round.setdefault(record["round"], []).append(record["rougeL"])
    return {r: top_fraction_mean(scores, 0.10) for r, scores in sorted(by_round.items())}


@pytest.fixture(scope="session")
def trend_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("trend")
    return _run(TREND_CONFIG, out), out


@pytest.fixture(scope="session")
def trend_run_alt_jobs(tmp_path_factory):
    out = tmp_path_factory.mktemp("trend_jobs2")
    return _run(TREND_CONFIG, out, jobs=2), out


@pytest.fixture(scope="session")
def dp_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("dp")
    cfg = _with_defense({"dp": {"noise_multiplier": 0.8, "max_grad_norm": 1.0, "delta": 1.0e-5}})
    cfg["attacks"] = [a for a in cfg["attacks"] if a["scheme"] == "basic"]
    return _run(cfg, out), out


@pytest.fixture(scope="session")
def kl_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("kl")
    cfg = _with_defense({"kl": {"mu": 0.01, "reference": "initial"}})
    cfg["attacks"] = [a for a in cfg["attacks"] if a["scheme"] == "basic"]
    return _run(cfg, out), out


@pytest.fixture(scope="session")
def lora_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("lora")
    cfg = _with_defense({"lora": {"rank": 4, "alpha": 8, "dropout": 0.1}})
    cfg["attacks"] = [a for a in cfg["attacks"] if a["scheme"] == "basic"]
    return _run(cfg, out), out


def test_criterion_01_rouge_l_matches_brute_force_oracle():
    start = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        hyp = list(rng.integers(0, 5, size=rng.integers(0, 13)))
        ref = list(rng.integers(0, 5, size=rng.integers(0, 13)))
        fast = rouge_l(hyp, ref)
        lcs = lcs_brute_force(hyp, ref)
        if not hyp or not ref:
            expected = 0.0
        else:
            p, r = lcs / len(hyp), lcs / len(ref)
            expected = 2 * p * r / (p + r) if p + r else 0.0
        worst = max(worst, abs(fast.f1 - expected))
        assert abs(fast.f1 - expected) <= 1e-12
    elapsed = time.time() - start
    note("1", elapsed < 10, f"1000 pairs, max |diff| = {worst:.2e}, {elapsed:.1f}s (< 10s)")
    assert elapsed < 10


def test_criterion_02_gradients_match_finite_differences():
    start = time.time()
    rng = np.random.default_rng(7)
    for trial in range(5):
        cfg = ModelConfig(
            context_len=int(rng.integers(2, 4)),
            embed_dim=int(rng.integers(3, 6)),
            hidden_dims=(int(rng.integers(4, 8)),),
            vocab_size=int(rng.integers(6, 12)),
            init_seed=trial,
        )
        params = init_model(cfg)
        reference = init_model(
            ModelConfig(cfg.context_len, cfg.embed_dim, cfg.hidden_dims, cfg.vocab_size, 100 + trial)
        )
        contexts = rng.integers(0, cfg.vocab_size, size=(4, cfg.context_len))
        targets = rng.integers(0, cfg.vocab_size, size=4)
        coords = rng.choice(params.flat.size, size=20, replace=False)
        finite_difference_check(
            lambda: loss_and_grad(params, contexts, targets), params.flat, coords
        )
        finite_difference_check(
            lambda: kl_regularized_loss(params, reference, 0.01, contexts, targets)[:2],
            params.flat,
            coords,
        )
        adapters = init_adapters(cfg, LoRAConfig(rank=2, alpha=4.0, dropout=0.0), seed=trial)
        adapters.flat[:] = rng.normal(scale=0.05, size=adapters.flat.shape)
        lora_coords = rng.choice(adapters.flat.size, size=20, replace=False)
        finite_difference_check(
            lambda: lora_loss_and_grad(params, adapters, contexts, targets),
            adapters.flat,
            lora_coords,
        )
    elapsed = time.time() - start
    note("2", elapsed < 30, f"plain/KL/LoRA gradients on 5 configs x 20 coords, {elapsed:.1f}s (< 30s)")
    assert elapsed < 30


def test_criterion_03_memorization_trend(trend_run):
    result, _ = trend_run
    series = _top10_series(result.attack_records["zero_input_basic"])
    rounds = sorted(series)
    assert rounds == list(range(13))
    values = [series[r] for r in rounds]
    gain = values[-1] - values[0]
    moving = [sum(values[i : i + 3]) / 3 for i in range(len(values) - 2)]
    monotone = all(moving[i + 1] >= moving[i] - 1e-12 for i in range(len(moving) - 1))
    detail = (
        f"round-0 {values[0]:.3f} -> round-12 {values[-1]:.3f} (gain {gain:.3f} >= 0.3); "
        f"3-round MA {'non-decreasing' if monotone else 'DECREASES'}: "
        + " ".join(f"{m:.3f}" for m in moving)
    )
    note("3", gain >= 0.3 and monotone, detail)
    assert gain >= 0.3
    assert monotone


def test_criterion_04_perfect_memorization_oracle(tmp_path):
    start = time.time()
    config = {
        "seed": 5,
        "corpus": {"synthetic": {"n_docs": 1, "pii_density": 1.0, "seed": 3}, "vocab_size": 300},
        "model": {"context_len": 8, "embed_dim": 24, "hidden_dims": [64], "init_seed": 2},
        "fed": {"n_clients": 1, "n_rounds": 1, "local_iters": 500, "batch_size": 8, "lr": 0.01},
        "attacks": [
            {"task": "partial_input", "scheme": "basic", "n_samples": 1, "top_p": 0.9,
             "prefix_fraction": 0.8, "max_len": 90},
            {"task": "zero_input", "scheme": "basic", "n_samples": 5, "top_p": 0.9, "max_len": 90},
        ],
    }
    result = _run(config, tmp_path / "overfit")
    partial = [r for r in result.attack_records["partial_input_basic"] if r["round"] == 1]
    zero = [r for r in result.attack_records["zero_input_basic"] if r["round"] == 1]
    best_zero = max(r["rougeL"] for r in zero)
    elapsed = time.time() - start
    ok = partial[0]["rougeL"] == 1.0 and best_zero >= 0.9 and elapsed < 120
    note(
        "4",
        ok,
        f"partial-input ROUGE-L {partial[0]['rougeL']:.3f} (= 1.0), zero-input best "
        f"{best_zero:.3f} (>= 0.9), {elapsed:.0f}s (< 2 min)",
    )
    assert partial[0]["rougeL"] == 1.0
    assert best_zero >= 0.9
    assert elapsed < 120


def test_criterion_05_enhanced_at_least_basic(trend_run):
    result, _ = trend_run
    basic = _top10_series(result.attack_records["zero_input_basic"])
    enhanced = _top10_series(result.attack_records["zero_input_enhanced"])
    rounds = [r for r in range(2, 13)]
    basic_mean = np.mean([basic[r] for r in rounds])
    enhanced_mean = np.mean([enhanced[r] for r in rounds])

    rng = np.random.default_rng(77)
    for _ in range(100):
        raw = rng.random(rng.integers(4, 50)) + 1e-4
        probs = raw / raw.sum()
        p = float(rng.uniform(0.2, 1.0))
        fused = A.enhanced_next_dist(probs, probs.copy(), p, tau=0.5)
        assert np.array_equal(fused, top_p_filter(probs, p))

    ok = enhanced_mean >= basic_mean
    note(
        "5",
        ok,
        f"mean top-10% rounds 2..12: enhanced {enhanced_mean:.4f} >= basic {basic_mean:.4f}; "
        "zero-difference reduction exact on 100 fixtures",
    )
    assert enhanced_mean >= basic_mean


def test_criterion_06_dp_mitigation_direction(trend_run, dp_run):
    plain_result, _ = trend_run
    dp_result, _ = dp_run
    plain_leak = _top10_series(plain_result.attack_records["zero_input_basic"])[12]
    dp_leak = _top10_series(dp_result.attack_records["zero_input_basic"])[12]
    plain_loss = plain_result.round_logs[-1]["global_loss"]
    dp_loss = dp_result.round_logs[-1]["global_loss"]

    rng = np.random.default_rng(99)
    noise = add_dp_noise(np.zeros(100_000), 0.8, 1.0, rng)
    std_ok = abs(noise.std() - 0.8) / 0.8 < 0.02

    ok = dp_leak < plain_leak and dp_loss > plain_loss and std_ok
    note(
        "6",
        ok,
        f"final top-10% {dp_leak:.3f} < {plain_leak:.3f}; final loss {dp_loss:.3f} > "
        f"{plain_loss:.3f}; noise std {noise.std():.4f} within 2% of 0.8",
    )
    assert dp_leak < plain_leak
    assert dp_loss > plain_loss
    assert std_ok


def test_criterion_07_kl_mitigation_direction(trend_run, kl_run):
    plain_result, _ = trend_run
    kl_result, _ = kl_run
    plain_leak = _top10_series(plain_result.attack_records["zero_input_basic"])[12]
    kl_leak = _top10_series(kl_result.attack_records["zero_input_basic"])[12]
    plain_ce = plain_result.round_logs[-1]["global_ce_loss"]
    kl_ce = kl_result.round_logs[-1]["global_ce_loss"]
    ok = kl_leak <= plain_leak and kl_ce >= plain_ce
    note(
        "7",
        ok,
        f"final top-10% {kl_leak:.3f} <= {plain_leak:.3f}; final cross-entropy "
        f"{kl_ce:.3f} >= {plain_ce:.3f}",
    )
    assert kl_leak <= plain_leak
    assert kl_ce >= plain_ce


def test_criterion_08_lora_freeze_and_direction(trend_run, lora_run):
    plain_result, _ = trend_run
    lora_result, _ = lora_run
    model_cfg = ModelConfig(
        context_len=8, embed_dim=32, hidden_dims=(128,),
        vocab_size=lora_result.lora_base.config.vocab_size, init_seed=11,
    )
    frozen = np.array_equal(lora_result.lora_base.flat, init_model(model_cfg).flat)

    plain_series = _top10_series(plain_result.attack_records["zero_input_basic"])
    lora_series = _top10_series(lora_result.attack_records["zero_input_basic"])
    per_round_ok = all(lora_series[r] <= plain_series[r] + 1e-12 for r in range(13))
    worst = max(lora_series[r] - plain_series[r] for r in range(13))
    ok = frozen and per_round_ok
    note(
        "8",
        ok,
        f"base parameters bit-identical: {frozen}; leakage <= full fine-tune at every "
        f"round (max excess {worst:+.4f})",
    )
    assert frozen
    assert per_round_ok


def test_criterion_09_paired_t_test_fixture():
    result = paired_t_test([1, 2, 3], [2, 3, 5])
    from test_metrics import betainc_series

    oracle_p = betainc_series(1.0, 0.5, 2 / (2 + 16.0))
    ok = (
        abs(result.t_statistic - 4.0) <= 1e-9
        and result.df == 2
        and abs(result.p_value - 0.0572) <= 5e-4
        and abs(result.p_value - oracle_p) <= 1e-9
    )
    same = paired_t_test([0.1, 0.2, 0.4], [0.1, 0.2, 0.4])
    note(
        "9",
        ok and same.t_statistic == 0.0 and same.p_value == 1.0,
        f"t = {result.t_statistic:.10f}, df = {result.df}, p = {result.p_value:.6f} "
        f"(oracle {oracle_p:.6f}); self-comparison (t, p) = (0, 1)",
    )
    assert abs(result.t_statistic - 4.0) <= 1e-9
    assert result.df == 2
    assert abs(result.p_value - 0.0572) <= 5e-4
    assert abs(result.p_value - oracle_p) <= 1e-9
    assert (same.t_statistic, same.p_value) == (0.0, 1.0)


def test_criterion_10_perturbation_contract(tmp_path):
    emb, pos, stop = write_toy_perturbation_files(tmp_path, seed=6)
    cfg = PerturbConfig(0.4, emb, pos, stop, neighbor_count=4, seed=11)
    perturber = Perturber.from_config(cfg)

    corpus = C.generate_synthetic_corpus(C.CorpusSpec(n_docs=1000, pii_density=0.7, seed=17))
    eligible_total = 0
    substituted = 0
    protected_substitutions = 0
    for doc in corpus:
        tokens = C.tokenize(doc.text)
        out = perturb_input(tokens, perturber, cfg, seed=[cfg.seed, doc.id])
        for before, after in zip(tokens, out):
            protected = is_pii_like(before) or before in perturber.stoplist
            if protected and after != before:
                protected_substitutions += 1
            if not protected and before in perturber.index:
                eligible_total += 1
                if after != before:
                    substituted += 1
    rate = substituted / eligible_total
    ok = abs(rate - 0.4) <= 0.05 and protected_substitutions == 0
    note(
        "10",
        ok,
        f"substitution rate {rate:.4f} in 0.4 +/- 0.05 over {eligible_total} eligible tokens; "
        f"protected-token substitutions = {protected_substitutions}",
    )
    assert abs(rate - 0.4) <= 0.05
    assert protected_substitutions == 0


def test_criterion_11_end_to_end_determinism(trend_run, trend_run_alt_jobs, tmp_path):
    _, out_a = trend_run
    _, out_b = trend_run_alt_jobs
    mismatched = []
    for round_idx in range(13):
        name = f"ckpt_round_{round_idx}"
        if (out_a / name).read_bytes() != (out_b / name).read_bytes():
            mismatched.append(name)
    for name in ("zero_input_basic.jsonl", "zero_input_enhanced.jsonl"):
        if (out_a / "attacks" / name).read_bytes() != (out_b / "attacks" / name).read_bytes():
            mismatched.append(name)
    for tag, out in (("a", out_a), ("b", out_b)):
        records = []
        for name in ("zero_input_basic.jsonl", "zero_input_enhanced.jsonl"):
            records.extend(read_attack_jsonl(out / "attacks" / name))
        corpus = C.ingest_corpus(out / "corpus.jsonl", "jsonl")
        write_report_csv(build_reports(records, corpus), tmp_path / f"report_{tag}.csv")
    if (tmp_path / "report_a.csv").read_bytes() != (tmp_path / "report_b.csv").read_bytes():
        mismatched.append("leakage report csv")
    note(
        "11",
        not mismatched,
        "jobs=1 and jobs=2 runs byte-identical (13 checkpoints, attack JSONL, report CSV)"
        if not mismatched
        else f"mismatches: {mismatched}",
    )
    assert not mismatched


def test_criterion_12_pii_recovery_grows(trend_run):
    result, out = trend_run
    corpus = C.ingest_corpus(out / "corpus.jsonl", "jsonl")
    records = result.attack_records["zero_input_basic"]
    reports = {
        (r.round): r for r in build_reports([x for x in records], corpus) if r.scheme == "basic"
    }
    first = reports[0]
    last = reports[12]
    prop_first = first.pii_recovered / first.pii_total if first.pii_total else 0.0
    prop_last = last.pii_recovered / last.pii_total if last.pii_total else 0.0
    ok = prop_last > prop_first
    note(
        "12",
        ok,
        f"PII recovery round 12: {last.pii_recovered}/{last.pii_total} = {prop_last:.3f} > "
        f"round 0: {first.pii_recovered}/{first.pii_total} = {prop_first:.3f}",
    )
    assert prop_last > prop_first
