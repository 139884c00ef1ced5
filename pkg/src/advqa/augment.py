"""Adversarial training: generate adversarial questions on a split, retrain
the target on the union, and measure robustness deltas."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch

from .attacks import ATTACKS
from .data import Dataset, Example, SQLQuery
from .delex import CoverageFailure, covers_entities, delexicalize, \
    locate_spans, relexicalize_lenient
from .evaluation import AttackRecord, compute_flip_rates, make_record
from .generator import GeneratorModel, generate
from .objectives import make_pairs
from .target import TargetModel, TargetTrainConfig, train_target


@dataclass
class AugmentationSet:
    entries: list[tuple[tuple[str, ...], SQLQuery, str]] = field(default_factory=list)
    provenance: str = ""
    coverage_failures: int = 0

    def __len__(self):
        return len(self.entries)


def generator_attack_records(generator: GeneratorModel, target: TargetModel,
                             dataset: Dataset, delex_on: bool = True,
                             mode: str = "greedy", seed: int = 0,
                             max_len: int = 24, method: str = "sage"):
    """One generated adversarial question per (delexicalizable) example,
    scored against the target."""
    pairs, _ = make_pairs(dataset, delex_on)
    rng = torch.Generator().manual_seed(seed) if mode == "sample" else None
    records = []
    for pair in pairs:
        hyp = generate(pair.sql_tokens, generator, mode=mode, size=1,
                       max_len=max_len, rng=rng)[0]
        adversarial = relexicalize_lenient(hyp.tokens, pair.entity_map)
        if not adversarial:
            adversarial = ("?",)  # degenerate empty generation
        delexed = delexicalize(pair.example, pair.table)
        source = delexed if not isinstance(delexed, CoverageFailure) else None
        if source is None:
            continue
        records.append(make_record(source, adversarial, method, pair.table, target))
    return records


def generate_adversarial_set(generator: GeneratorModel, target: TargetModel,
                             split: Dataset, size_fraction: float,
                             seed: int = 0, mode: str = "greedy",
                             max_len: int = 24,
                             provenance: str = "target") -> AugmentationSet:
    """Adversarial questions for the first ``size_fraction`` of the split;
    generations that drop a required entity are discarded and counted."""
    if not 0.0 <= size_fraction <= 1.0:
        raise ValueError("size_fraction must lie in [0, 1]")
    n = math.ceil(size_fraction * len(split.examples))
    subset = split.examples[:n]
    pairs, delex_failures = make_pairs(split.subset(subset), delex_on=True)
    rng = torch.Generator().manual_seed(seed) if mode == "sample" else None
    out = AugmentationSet(provenance=provenance,
                          coverage_failures=len(delex_failures))
    for pair in pairs:
        hyp = generate(pair.sql_tokens, generator, mode=mode, size=1,
                       max_len=max_len, rng=rng)[0]
        adversarial = relexicalize_lenient(hyp.tokens, pair.entity_map)
        if not adversarial or not covers_entities(adversarial, pair.entity_map):
            out.coverage_failures += 1
            continue
        spans = locate_spans(adversarial, [c.value for c in pair.example.sql.conds])
        if any(s is None for s in spans):
            out.coverage_failures += 1
            continue
        out.entries.append((adversarial, pair.example.sql, pair.example.table_id))
    return out


def augmented_dataset(base: Dataset, aug: AugmentationSet) -> Dataset:
    """Base examples plus adversarial questions with their unchanged gold
    SQL; augmented entries keep the source example's labels."""
    extra = [Example(question, sql, table_id)
             for question, sql, table_id in aug.entries]
    return Dataset(list(base.examples) + extra, dict(base.tables))


def retrain_with_augmentation(base: Dataset, aug: AugmentationSet,
                              config: TargetTrainConfig | None = None) -> TargetModel:
    return train_target(augmented_dataset(base, aug), config)


def robustness_suite(model: TargetModel, attacks, split: Dataset,
                     generator: GeneratorModel | None = None, k: int = 10,
                     seed: int = 0):
    """Per-method (Qfr, Afr) for the given target model; identical seeds and
    splits make before/after comparisons paired."""
    results = {}
    for method in attacks:
        records = run_attack_suite(model, method, split, generator=generator,
                                   k=k, seed=seed)
        results[method] = compute_flip_rates(records)
    return results


def run_attack_suite(model: TargetModel, method: str, split: Dataset,
                     generator: GeneratorModel | None = None, k: int = 10,
                     seed: int = 0) -> list[AttackRecord]:
    if method == "sage":
        if generator is None:
            raise ValueError("the sage method needs a trained generator")
        return generator_attack_records(generator, model, split, seed=seed)
    if method not in ATTACKS:
        raise ValueError(f"unknown attack method {method!r}")
    records = []
    for ex in split.examples:
        table = split.table_of(ex)
        delexed = delexicalize(ex, table)
        if isinstance(delexed, CoverageFailure):
            continue
        if method == "knn":
            records.append(ATTACKS[method](delexed, model, table, k=k))
        elif method == "charswap":
            try:
                records.append(ATTACKS[method](delexed, model, table, seed=seed))
            except ValueError:
                continue  # no eligible position
        else:
            records.append(ATTACKS[method](delexed, model, table))
    return records


def write_augmentation_set(aug: AugmentationSet, data_path, sidecar_path):
    """WikiSQL-format JSON-lines plus a provenance sidecar."""
    with open(data_path, "w") as f:
        for question, sql, table_id in aug.entries:
            f.write(json.dumps({
                "question": " ".join(question),
                "table_id": table_id,
                "sql": {"sel": sql.sel, "agg": sql.agg,
                        "conds": [[c.col, c.op, c.value] for c in sql.conds]},
            }, sort_keys=True) + "\n")
    with open(sidecar_path, "w") as f:
        json.dump({"provenance": aug.provenance,
                   "entries": len(aug.entries),
                   "coverage_failures": aug.coverage_failures},
                  f, sort_keys=True, indent=2)
