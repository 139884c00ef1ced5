"""Command-line entry point: seeded, config-driven pipeline runs.

Subcommands: synth-corpus, train-target, train-generator, attack, evaluate,
augment, report.  A plain key=value --config file supplies defaults; explicit
flags win.  All outputs are byte-stable for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import augment as aug_mod
from . import data as data_mod
from .delex import CoverageFailure, delexicalize
from .evaluation import TrigramModel, build_report, read_records, write_records
from .generator import load_generator, save_generator
from .objectives import CorpusEmbeddingScorer, TrainConfig, train_generator
from .target import TargetTrainConfig, evaluate_accuracy, load_target, \
    save_target, train_target


def load_config(path) -> dict[str, str]:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _resolve(args, key, default=None, cast=str):
    """Flag value if given, else config-file value, else default."""
    cli = getattr(args, key.replace("-", "_"), None)
    if cli is not None:
        return cli
    config = getattr(args, "_config_values", {})
    if key in config:
        raw = config[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def _out_dir(args) -> Path:
    out = Path(_resolve(args, "out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(args):
    data = _resolve(args, "data")
    tables = _resolve(args, "tables")
    if not data or not tables:
        raise ValueError("--data and --tables are required")
    return data_mod.load_wikisql(data, tables)


def cmd_synth_corpus(args) -> int:
    out = _out_dir(args)
    seed = _resolve(args, "seed", 0, int)
    dataset = data_mod.synthesize_mini_corpus(
        seed=seed,
        n_tables=_resolve(args, "n-tables", 10, int),
        n_examples=_resolve(args, "n-examples", 2000, int),
    )
    data_mod.write_wikisql(dataset, out / "data.jsonl", out / "tables.jsonl")
    print(f"wrote {len(dataset)} examples over {len(dataset.tables)} tables to {out}")
    return 0


def cmd_train_target(args) -> int:
    out = _out_dir(args)
    dataset = _load_dataset(args)
    config = TargetTrainConfig(
        emb_dim=_resolve(args, "emb-dim", 32, int),
        hidden_dim=_resolve(args, "hidden-dim", 48, int),
        lr=_resolve(args, "lr", 2e-3, float),
        epochs=_resolve(args, "epochs", 12, int),
        batch_size=_resolve(args, "batch-size", 16, int),
        seed=_resolve(args, "seed", 0, int),
    )
    model = train_target(dataset, config)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_target(model, out / "checkpoints" / "target.ckpt")
    q_acc, a_acc = evaluate_accuracy(model, dataset)
    metrics = {"q_acc": q_acc, "a_acc": a_acc, "examples": len(dataset)}
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2))
    print(f"target trained: Q-Acc {q_acc:.3f} A-Acc {a_acc:.3f}")
    return 0


def cmd_train_generator(args) -> int:
    out = _out_dir(args)
    dataset = _load_dataset(args)
    config = TrainConfig(
        variant=_resolve(args, "variant", "sage"),
        delex=_resolve(args, "delex", True, bool),
        lambda_wseq=_resolve(args, "lambda-wseq", 1.0, float),
        lambda_sim=_resolve(args, "lambda-sim", 0.8, float),
        lambda_adv=_resolve(args, "lambda-adv", 0.1, float),
        lr=_resolve(args, "lr", 1e-3, float),
        batch_size=_resolve(args, "batch-size", 16, int),
        epochs=_resolve(args, "epochs", 10, int),
        hyp_size=_resolve(args, "hyp-size", 6, int),
        tau=_resolve(args, "tau", 1.0, float),
        seed=_resolve(args, "seed", 0, int),
        emb_dim=_resolve(args, "emb-dim", 64, int),
        hidden_dim=_resolve(args, "hidden-dim", 128, int),
        latent_dim=_resolve(args, "latent-dim", 32, int),
        max_len=_resolve(args, "max-len", 24, int),
        warm_start_epochs=_resolve(args, "warm-start-epochs", 0, int),
    )
    target = None
    target_path = _resolve(args, "target")
    if target_path:
        target = load_target(target_path)
    result = train_generator(dataset, target, config)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_generator(result.model, out / "checkpoints" / f"generator-{config.variant}.ckpt")
    with open(out / "training.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "recon", "mmd", "sim",
                                               "adv", "dev_nll"])
        writer.writeheader()
        writer.writerows(result.log)
    print(f"generator ({config.variant}) trained for {config.epochs} epochs; "
          f"{result.coverage_failures} coverage failures excluded")
    return 0


def _attack_one(method, model, dataset, generator, k, seed):
    def attack(ex):
        table = dataset.table_of(ex)
        delexed = delexicalize(ex, table)
        if isinstance(delexed, CoverageFailure):
            return None
        from .attacks import run_attack
        kwargs = {"k": k} if method == "knn" else (
            {"seed": seed} if method == "charswap" else {})
        try:
            return run_attack(method, delexed, model, table, **kwargs)
        except ValueError:
            return None
    return attack


def cmd_attack(args) -> int:
    out = _out_dir(args)
    dataset = _load_dataset(args)
    model = load_target(_resolve(args, "target"))
    method = _resolve(args, "method", "knn")
    seed = _resolve(args, "seed", 0, int)
    k = _resolve(args, "k", 10, int)
    jobs = _resolve(args, "jobs", 1, int)
    if method == "sage":
        generator = load_generator(_resolve(args, "generator"))
        records = aug_mod.generator_attack_records(generator, model, dataset,
                                                   seed=seed)
    else:
        attack = _attack_one(method, model, dataset, None, k, seed)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(attack, dataset.examples))
        else:
            results = [attack(ex) for ex in dataset.examples]
        records = [r for r in results if r is not None]
    if not records:
        raise ValueError("no attackable examples in the dataset")
    write_records(records, out / "records.jsonl")
    report = build_report(records)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text() + "\n")
    qfr, afr = report.overall.qfr, report.overall.afr
    print(f"{method}: {len(records)} records, Ecr {report.overall.ecr:.2f}, "
          f"Qfr {qfr:.2f}, Afr {afr:.2f}")
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    records = read_records(_resolve(args, "records", str(out / "records.jsonl")))
    scorer = lm = None
    similarity_name = None
    data = _resolve(args, "data")
    tables = _resolve(args, "tables")
    if data and tables:
        dataset = data_mod.load_wikisql(data, tables)
        questions = [ex.question for ex in dataset.examples]
        scorer = CorpusEmbeddingScorer(questions)
        similarity_name = scorer.name
        lm = TrigramModel(questions)
    report = build_report(records, scorer=scorer, lm=lm,
                          similarity_name=similarity_name)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return 0


def cmd_augment(args) -> int:
    out = _out_dir(args)
    dataset = _load_dataset(args)
    target = load_target(_resolve(args, "target"))
    generator = load_generator(_resolve(args, "generator"))
    seed = _resolve(args, "seed", 0, int)
    fraction = _resolve(args, "fraction", 1.0, float)
    aug = aug_mod.generate_adversarial_set(generator, target, dataset, fraction,
                                           seed=seed)
    aug_mod.write_augmentation_set(aug, out / "augmented.jsonl",
                                   out / "provenance.json")
    config = TargetTrainConfig(
        epochs=_resolve(args, "epochs", 12, int),
        seed=seed,
    )
    retrained = aug_mod.retrain_with_augmentation(dataset, aug, config)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_target(retrained, out / "checkpoints" / "target-augmented.ckpt")
    before = evaluate_accuracy(target, dataset)
    after = evaluate_accuracy(retrained, dataset)
    metrics = {"before": {"q_acc": before[0], "a_acc": before[1]},
               "after": {"q_acc": after[0], "a_acc": after[1]},
               "augmented_examples": len(aug),
               "coverage_failures": aug.coverage_failures}
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2))
    print(f"augmented with {len(aug)} examples; "
          f"Q-Acc {before[0]:.3f} -> {after[0]:.3f}")
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    records = read_records(_resolve(args, "records", str(out / "records.jsonl")))
    report = build_report(records)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return 0


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "train-target": cmd_train_target,
    "train-generator": cmd_train_generator,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "augment": cmd_augment,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advqa",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value defaults file")
        p.add_argument("--seed", type=int)
        p.add_argument("--data")
        p.add_argument("--tables")
        p.add_argument("--out")

    p = sub.add_parser("synth-corpus", help="write a templated mini-corpus")
    common(p)
    p.add_argument("--n-tables", type=int)
    p.add_argument("--n-examples", type=int)

    p = sub.add_parser("train-target", help="train the slot-classification target")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--emb-dim", type=int)
    p.add_argument("--hidden-dim", type=int)

    p = sub.add_parser("train-generator", help="train a question generator variant")
    common(p)
    p.add_argument("--target", help="target checkpoint (required for sage)")
    p.add_argument("--variant", choices=["seq2seq", "wseq", "wseq_s", "sage"])
    p.add_argument("--delex", type=lambda v: v.lower() in ("1", "true", "yes", "on"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-wseq", type=float)
    p.add_argument("--lambda-sim", type=float)
    p.add_argument("--lambda-adv", type=float)
    p.add_argument("--hyp-size", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--emb-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--warm-start-epochs", type=int)

    p = sub.add_parser("attack", help="run an attack over a dataset")
    common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--method", choices=["unconstrained", "knn", "charswap", "sage"])
    p.add_argument("--k", type=int)
    p.add_argument("--generator")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("evaluate", help="full metric report from saved records")
    common(p)
    p.add_argument("--records")

    p = sub.add_parser("augment", help="adversarial training with generated examples")
    common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("report", help="rates and BLEU from saved records")
    common(p)
    p.add_argument("--records")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._config_values = load_config(args.config) if args.config else {}
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
