"""Experiment configuration: one YAML file describing corpus, model, federated
training, defenses, and the attack schedule. Validation errors always name
the offending field path."""

from __future__ import annotations

import os
from dataclasses import dataclass

import yaml

from .attack import SCHEMES, TASKS, AttackConfig
from .corpus import CorpusSpec
from .defense import DefenseConfig, DPConfig, KLConfig, LoRAConfig
from .fed import AttackSpec, FedConfig
from .perturb import PerturbConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


SCHEMA_TEXT = """\
# fedleak experiment config (version 1). All seeds are explicit; nothing is
# drawn from the clock. Paths are resolved relative to this file.

version: 1            # optional, must be 1 when present
seed: 1234            # master seed (required, >= 0)
out_dir: out          # output directory (default "out"; --out overrides)
jobs: 1               # worker cap (default 1; --jobs overrides)

corpus:
  # Exactly one source: synthetic generation or an external file.
  synthetic:
    n_docs: 200       # >= 1
    pii_density: 0.5  # in [0, 1]
    seed: 7
  # path: corpus.jsonl
  # format: jsonl     # jsonl | plain_lines
  vocab_size: 1000    # >= 4 (specials included)
  partition_seed: 99  # optional; defaults to the master seed

model:
  context_len: 8      # >= 1
  embed_dim: 32       # >= 1
  hidden_dims: [128]  # each >= 1
  init_seed: 11       # parameter init seed

fed:
  n_clients: 4
  n_rounds: 12
  local_iters: 200
  batch_size: 8
  lr: 0.004

defense:              # optional; any subset (kl and lora are exclusive)
  dp:
    noise_multiplier: 0.8   # >= 0; gaussian std = multiplier * max_grad_norm
    max_grad_norm: 1.0      # > 0
    delta: 1.0e-5           # reported only
  kl:
    mu: 0.01                # >= 0
    reference: initial      # initial | round_start
  lora:
    rank: 4                 # >= 1
    alpha: 8
    dropout: 0.1            # in [0, 1)

attacks:              # list; may be empty
  - task: zero_input         # zero_input | partial_input | disturbed_input
    scheme: basic            # basic | enhanced
    n_samples: 30            # generations (zero_input) / documents (others)
    top_p: 0.9               # nucleus mass, in (0, 1]
    temperature: 0.5         # enhanced-scheme fusion temperature, > 0
    max_len: 72              # generation cap, >= 1
    prefix_fraction: 0.8     # completion split, in (0, 1)
    difference_space: probability   # probability | logit
    rounds: all              # all | list of round indices (0 = pre-training)
    # perturb:               # required for disturbed_input
    #   p_sub: 0.4           # in [0, 1]
    #   embeddings: perturb_embeddings.txt
    #   pos: perturb_pos.tsv
    #   stoplist: perturb_stoplist.txt
    #   neighbors: 5         # >= 1
    #   seed: 3
"""


@dataclass(frozen=True)
class CorpusSection:
    synthetic: CorpusSpec | None
    path: str | None
    format: str | None
    vocab_size: int
    partition_seed: int | None


@dataclass(frozen=True)
class ModelSection:
    context_len: int
    embed_dim: int
    hidden_dims: tuple[int, ...]
    init_seed: int


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: str
    jobs: int
    corpus: CorpusSection
    model: ModelSection
    fed: FedConfig
    attacks: tuple[AttackSpec, ...]


def _require(mapping, key, path):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping")
    if key not in mapping:
        raise ConfigError(f"{path}.{key}: required field is missing")
    return mapping[key]


def _as_int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return value


def _as_float(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _as_str(value, path, choices=None):
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    if choices is not None and value not in choices:
        raise ConfigError(f"{path}: expected one of {choices}, got {value!r}")
    return value


def _reject_unknown(mapping, allowed, path):
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")


def _wrap(path, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_corpus(section, base_dir) -> CorpusSection:
    if not isinstance(section, dict):
        raise ConfigError("corpus: expected a mapping")
    _reject_unknown(section, ("synthetic", "path", "format", "vocab_size", "partition_seed"), "corpus")
    synthetic = None
    path = None
    fmt = None
    if "synthetic" in section and "path" in section:
        raise ConfigError("corpus: give either 'synthetic' or 'path', not both")
    if "synthetic" in section:
        sub = section["synthetic"]
        if not isinstance(sub, dict):
            raise ConfigError("corpus.synthetic: expected a mapping")
        _reject_unknown(sub, ("n_docs", "pii_density", "seed"), "corpus.synthetic")
        synthetic = _wrap(
            "corpus.synthetic",
            CorpusSpec,
            n_docs=_as_int(_require(sub, "n_docs", "corpus.synthetic"), "corpus.synthetic.n_docs"),
            pii_density=_as_float(
                _require(sub, "pii_density", "corpus.synthetic"), "corpus.synthetic.pii_density"
            ),
            seed=_as_int(_require(sub, "seed", "corpus.synthetic"), "corpus.synthetic.seed", minimum=0),
        )
    elif "path" in section:
        path = os.path.join(base_dir, _as_str(section["path"], "corpus.path"))
        if not os.path.exists(path):
            raise ConfigError(f"corpus.path: file not found: {path}")
        fmt = _as_str(section.get("format", "jsonl"), "corpus.format", ("jsonl", "plain_lines"))
    else:
        raise ConfigError("corpus: either 'synthetic' or 'path' is required")
    vocab_size = _as_int(_require(section, "vocab_size", "corpus"), "corpus.vocab_size", minimum=4)
    partition_seed = None
    if "partition_seed" in section:
        partition_seed = _as_int(section["partition_seed"], "corpus.partition_seed", minimum=0)
    return CorpusSection(synthetic, path, fmt, vocab_size, partition_seed)


def _parse_model(section) -> ModelSection:
    if not isinstance(section, dict):
        raise ConfigError("model: expected a mapping")
    _reject_unknown(section, ("context_len", "embed_dim", "hidden_dims", "init_seed"), "model")
    hidden = _require(section, "hidden_dims", "model")
    if not isinstance(hidden, list) or not hidden:
        raise ConfigError("model.hidden_dims: expected a non-empty list of integers")
    dims = tuple(_as_int(h, f"model.hidden_dims[{i}]", minimum=1) for i, h in enumerate(hidden))
    return ModelSection(
        context_len=_as_int(_require(section, "context_len", "model"), "model.context_len", minimum=1),
        embed_dim=_as_int(_require(section, "embed_dim", "model"), "model.embed_dim", minimum=1),
        hidden_dims=dims,
        init_seed=_as_int(section.get("init_seed", 0), "model.init_seed", minimum=0),
    )


def _parse_fed(section, defense) -> FedConfig:
    if not isinstance(section, dict):
        raise ConfigError("fed: expected a mapping")
    _reject_unknown(section, ("n_clients", "n_rounds", "local_iters", "batch_size", "lr"), "fed")
    return _wrap(
        "fed",
        FedConfig,
        n_clients=_as_int(_require(section, "n_clients", "fed"), "fed.n_clients"),
        n_rounds=_as_int(_require(section, "n_rounds", "fed"), "fed.n_rounds"),
        local_iters=_as_int(_require(section, "local_iters", "fed"), "fed.local_iters"),
        batch_size=_as_int(_require(section, "batch_size", "fed"), "fed.batch_size"),
        lr=_as_float(_require(section, "lr", "fed"), "fed.lr"),
        defense=defense,
    )


def _parse_defense(section) -> DefenseConfig | None:
    if section is None:
        return None
    if not isinstance(section, dict):
        raise ConfigError("defense: expected a mapping")
    _reject_unknown(section, ("dp", "kl", "lora"), "defense")
    dp = kl = lora = None
    if "dp" in section:
        sub = section["dp"]
        _reject_unknown(sub, ("noise_multiplier", "max_grad_norm", "delta"), "defense.dp")
        dp = _wrap(
            "defense.dp",
            DPConfig,
            noise_multiplier=_as_float(
                _require(sub, "noise_multiplier", "defense.dp"), "defense.dp.noise_multiplier"
            ),
            max_grad_norm=_as_float(sub.get("max_grad_norm", 1.0), "defense.dp.max_grad_norm"),
            delta=_as_float(sub.get("delta", 1e-5), "defense.dp.delta"),
        )
    if "kl" in section:
        sub = section["kl"]
        _reject_unknown(sub, ("mu", "reference"), "defense.kl")
        kl = _wrap(
            "defense.kl",
            KLConfig,
            mu=_as_float(_require(sub, "mu", "defense.kl"), "defense.kl.mu"),
            reference=_as_str(sub.get("reference", "initial"), "defense.kl.reference", ("initial", "round_start")),
        )
    if "lora" in section:
        sub = section["lora"]
        _reject_unknown(sub, ("rank", "alpha", "dropout"), "defense.lora")
        lora = _wrap(
            "defense.lora",
            LoRAConfig,
            rank=_as_int(_require(sub, "rank", "defense.lora"), "defense.lora.rank"),
            alpha=_as_float(_require(sub, "alpha", "defense.lora"), "defense.lora.alpha"),
            dropout=_as_float(sub.get("dropout", 0.1), "defense.lora.dropout"),
        )
    return _wrap("defense", DefenseConfig, dp=dp, kl=kl, lora=lora)


def _parse_perturb(section, path, base_dir) -> PerturbConfig:
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected a mapping")
    _reject_unknown(section, ("p_sub", "embeddings", "pos", "stoplist", "neighbors", "seed"), path)

    def resolve(key):
        file_path = os.path.join(base_dir, _as_str(_require(section, key, path), f"{path}.{key}"))
        if not os.path.exists(file_path):
            raise ConfigError(f"{path}.{key}: file not found: {file_path}")
        return file_path

    return _wrap(
        path,
        PerturbConfig,
        p_sub=_as_float(_require(section, "p_sub", path), f"{path}.p_sub"),
        embeddings_path=resolve("embeddings"),
        pos_path=resolve("pos"),
        stoplist_path=resolve("stoplist"),
        neighbor_count=_as_int(section.get("neighbors", 5), f"{path}.neighbors"),
        seed=_as_int(section.get("seed", 0), f"{path}.seed", minimum=0),
    )


def _parse_attacks(entries, base_dir) -> tuple[AttackSpec, ...]:
    if entries is None:
        return ()
    if not isinstance(entries, list):
        raise ConfigError("attacks: expected a list")
    specs = []
    for i, entry in enumerate(entries):
        path = f"attacks[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: expected a mapping")
        allowed = (
            "task", "scheme", "n_samples", "top_p", "temperature", "max_len",
            "prefix_fraction", "difference_space", "rounds", "perturb",
        )
        _reject_unknown(entry, allowed, path)
        task = _as_str(_require(entry, "task", path), f"{path}.task", TASKS)
        perturb = None
        if "perturb" in entry:
            perturb = _parse_perturb(entry["perturb"], f"{path}.perturb", base_dir)
        elif task == "disturbed_input":
            raise ConfigError(f"{path}.perturb: required for the disturbed_input task")
        kwargs = {}
        if "scheme" in entry:
            kwargs["scheme"] = _as_str(entry["scheme"], f"{path}.scheme", SCHEMES)
        if "n_samples" in entry:
            kwargs["n_samples"] = _as_int(entry["n_samples"], f"{path}.n_samples")
        if "top_p" in entry:
            kwargs["top_p"] = _as_float(entry["top_p"], f"{path}.top_p")
        if "temperature" in entry:
            kwargs["temperature"] = _as_float(entry["temperature"], f"{path}.temperature")
        if "max_len" in entry:
            kwargs["max_len"] = _as_int(entry["max_len"], f"{path}.max_len")
        if "prefix_fraction" in entry:
            kwargs["prefix_fraction"] = _as_float(entry["prefix_fraction"], f"{path}.prefix_fraction")
        if "difference_space" in entry:
            kwargs["difference_space"] = _as_str(entry["difference_space"], f"{path}.difference_space")
        cfg = _wrap(path, AttackConfig, perturb=perturb, **kwargs)
        rounds = entry.get("rounds", "all")
        if rounds == "all":
            rounds_tuple = None
        elif isinstance(rounds, list):
            rounds_tuple = tuple(_as_int(r, f"{path}.rounds[{j}]", minimum=0) for j, r in enumerate(rounds))
        else:
            raise ConfigError(f"{path}.rounds: expected 'all' or a list of round indices")
        specs.append(_wrap(path, AttackSpec, task=task, config=cfg, rounds=rounds_tuple))
    return tuple(specs)


def parse_config(data: dict, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root: expected a mapping")
    allowed = ("version", "seed", "out_dir", "jobs", "corpus", "model", "fed", "defense", "attacks")
    _reject_unknown(data, allowed, "config")
    if "version" in data and _as_int(data["version"], "version") != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {data['version']}")
    seed = _as_int(_require(data, "seed", "config"), "seed", minimum=0)
    out_dir = _as_str(data.get("out_dir", "out"), "out_dir")
    jobs = _as_int(data.get("jobs", 1), "jobs", minimum=1)
    defense = _parse_defense(data.get("defense"))
    return ExperimentConfig(
        seed=seed,
        out_dir=out_dir,
        jobs=jobs,
        corpus=_parse_corpus(_require(data, "corpus", "config"), base_dir),
        model=_parse_model(_require(data, "model", "config")),
        fed=_parse_fed(_require(data, "fed", "config"), defense),
        attacks=_parse_attacks(data.get("attacks"), base_dir),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML in {path}: {exc}") from exc
    return parse_config(data, base_dir=os.path.dirname(os.path.abspath(path)))
