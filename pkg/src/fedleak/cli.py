"""Command-line driver: gen-corpus, run, report, ttest.

Every command is a deterministic function of its config and input files; no
command reads the clock or ambient randomness.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter

from . import corpus as corpus_mod
from . import fed as fed_mod
from . import plots, report
from .attack import AttackError
from .config import SCHEMA_TEXT, ConfigError, ExperimentConfig, load_config
from .corpus import CorpusError
from .defense import DefenseError
from .metrics import MetricError
from .model import ModelConfig, ModelError
from .perturb import PerturbError, write_toy_perturbation_files
from .report import ReportError

log = logging.getLogger("fedleak")

CONFIG_ERRORS = (
    ConfigError, CorpusError, ModelError, DefenseError, AttackError,
    fed_mod.FedError, PerturbError, MetricError, ReportError,
)


def _load_corpus(cfg: ExperimentConfig):
    if cfg.corpus.synthetic is not None:
        return corpus_mod.generate_synthetic_corpus(cfg.corpus.synthetic)
    return corpus_mod.ingest_corpus(cfg.corpus.path, cfg.corpus.format)


def _write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_gen_corpus(cfg: ExperimentConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    corpus = _load_corpus(cfg)
    vocab = corpus_mod.build_vocab(corpus, cfg.corpus.vocab_size)
    corpus_mod.save_corpus_jsonl(corpus, os.path.join(out_dir, "corpus.jsonl"))
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    write_toy_perturbation_files(out_dir, seed=cfg.seed)
    kinds = Counter(span.kind for doc in corpus for span in doc.pii_spans)
    print(f"documents: {len(corpus)}")
    print(f"vocab size: {len(vocab)}")
    print(f"pii instances: {sum(kinds.values())}")
    for kind in corpus_mod.PII_KINDS:
        print(f"  {kind}: {kinds.get(kind, 0)}")
    return 0


def run_experiment(cfg: ExperimentConfig, out_dir: str, seed: int, jobs: int) -> fed_mod.RunResult:
    """Full pipeline: corpus -> vocab -> partition -> federated run with attacks."""
    os.makedirs(out_dir, exist_ok=True)
    corpus = _load_corpus(cfg)
    vocab = corpus_mod.build_vocab(corpus, cfg.corpus.vocab_size)
    partition_seed = cfg.corpus.partition_seed if cfg.corpus.partition_seed is not None else seed
    plan = corpus_mod.partition(corpus, cfg.fed.n_clients, cfg.fed.n_rounds, partition_seed)
    model_cfg = ModelConfig(
        context_len=cfg.model.context_len,
        embed_dim=cfg.model.embed_dim,
        hidden_dims=cfg.model.hidden_dims,
        vocab_size=len(vocab),
        init_seed=cfg.model.init_seed,
    )
    result = fed_mod.run_training(
        corpus, vocab, plan, model_cfg, cfg.fed,
        attacks=list(cfg.attacks), master_seed=seed, out_dir=out_dir, jobs=jobs,
    )

    corpus_mod.save_corpus_jsonl(corpus, os.path.join(out_dir, "corpus.jsonl"))
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    _write_jsonl(result.round_logs, os.path.join(out_dir, "run.log.jsonl"))
    attacks_dir = os.path.join(out_dir, "attacks")
    os.makedirs(attacks_dir, exist_ok=True)
    for name, records in result.attack_records.items():
        _write_jsonl(records, os.path.join(attacks_dir, f"{name}.jsonl"))
    return result


def cmd_run(cfg: ExperimentConfig, out_dir: str, seed: int, jobs: int) -> int:
    result = run_experiment(cfg, out_dir, seed, jobs)
    final = result.round_logs[-1]["global_loss"] if result.round_logs else float("nan")
    print(f"rounds completed: {len(result.series) - 1}")
    print(f"final train loss: {final:.4f}")
    for name, records in result.attack_records.items():
        print(f"attack {name}: {len(records)} samples")
    print(f"outputs in: {out_dir}")
    return 0


def cmd_report(jsonl_paths, out_dir: str, corpus_path: str | None) -> int:
    records = []
    for path in jsonl_paths:
        records.extend(report.read_attack_jsonl(path))
    if not records:
        raise ReportError("no attack records found in the given files")
    corpus = corpus_mod.ingest_corpus(corpus_path, "jsonl") if corpus_path else None

    reports_dir = os.path.join(out_dir, "reports")
    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(reports_dir, exist_ok=True)
    os.makedirs(plots_dir, exist_ok=True)

    rows = report.build_reports(records, corpus)
    csv_path = os.path.join(reports_dir, "leakage.csv")
    report.write_report_csv(rows, csv_path)
    print(f"wrote {csv_path} ({len(rows)} rows)")

    for (task, scheme), rounds in report.group_records(records).items():
        first_round = min(rounds)
        last_round = max(rounds)
        for round_idx in {first_round, last_round}:
            scores = [float(s["rougeL"]) for s in rounds[round_idx]]
            qpath = os.path.join(reports_dir, f"quantile_{task}_{scheme}_round_{round_idx}.csv")
            report.write_quantile_csv(scores, qpath)
        plots.plot_quantile(
            [float(s["rougeL"]) for s in rounds[first_round]],
            [float(s["rougeL"]) for s in rounds[last_round]],
            first_round, last_round,
            os.path.join(plots_dir, f"quantile_{task}_{scheme}.svg"),
        )
    for metric in ("top10", "top30"):
        plots.plot_leakage_over_rounds(rows, metric, os.path.join(plots_dir, f"leakage_{metric}.svg"))
    print(f"wrote plots to {plots_dir}")
    return 0


def cmd_ttest(path_a, path_b, column, task, scheme, out_path) -> int:
    result = report.ttest_between_reports(path_a, path_b, column, task, scheme)
    payload = result.to_dict()
    payload.update({"column": column, "report_a": str(path_a), "report_b": str(path_b)})
    text = json.dumps(payload, sort_keys=True, indent=2)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedleak",
        description="Simulate federated fine-tuning of a small language model "
        "and measure training-data leakage through extraction attacks.",
    )
    parser.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    parser.add_argument("--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command")

    p_gen = sub.add_parser("gen-corpus", help="generate the synthetic corpus and vocab files")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", default=None, help="output directory (default: config out_dir)")

    p_run = sub.add_parser("run", help="run federated training with scheduled attacks")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config master seed")
    p_run.add_argument("--jobs", type=int, default=None, help="worker cap (default: config jobs)")

    p_rep = sub.add_parser("report", help="aggregate attack JSONL files into CSV tables and SVG plots")
    p_rep.add_argument("jsonl", nargs="+", help="attack sample files")
    p_rep.add_argument("--out", default="out", help="output directory")
    p_rep.add_argument("--corpus", default=None, help="corpus.jsonl for PII recovery columns")

    p_tt = sub.add_parser("ttest", help="paired t-test between two report CSVs, matched by round")
    p_tt.add_argument("csv_a")
    p_tt.add_argument("csv_b")
    p_tt.add_argument("--column", default="top100")
    p_tt.add_argument("--task", default=None)
    p_tt.add_argument("--scheme", default=None)
    p_tt.add_argument("--out", default=None, help="write the result JSON here as well")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.print_schema:
        print(SCHEMA_TEXT, end="")
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        if args.command == "gen-corpus":
            cfg = load_config(args.config)
            return cmd_gen_corpus(cfg, args.out or cfg.out_dir)
        if args.command == "run":
            cfg = load_config(args.config)
            return cmd_run(
                cfg,
                args.out or cfg.out_dir,
                cfg.seed if args.seed is None else args.seed,
                cfg.jobs if args.jobs is None else args.jobs,
            )
        if args.command == "report":
            return cmd_report(args.jsonl, args.out, args.corpus)
        if args.command == "ttest":
            return cmd_ttest(args.csv_a, args.csv_b, args.column, args.task, args.scheme, args.out)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
