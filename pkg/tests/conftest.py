"""Shared fixtures: the medal-table worked example, small synthetic corpora,
and a tiny target model trained once per session."""

import pytest
import torch

from advqa.data import (Condition, Dataset, Example, SQLQuery, Table,
                        synthesize_mini_corpus, tokenize)
from advqa.target import TargetTrainConfig, build_target_vocab, TargetModel, \
    train_target


@pytest.fixture(scope="session")
def medal_table():
    return Table(
        table_id="medals",
        headers=("Rank", "Nation", "Gold", "Silver", "Bronze", "Total"),
        column_types=("real", "text", "real", "real", "real", "real"),
        rows=(
            (1, "Russia", 2, 2, 2, 6),
            (2, "France", 1, 0, 0, 1),
            (2, "Hungary", 1, 0, 0, 1),
            (4, "Ukraine", 0, 1, 1, 2),
            (5, "Bulgaria", 0, 1, 0, 1),
            (6, "Poland", 0, 0, 1, 1),
        ),
    )


@pytest.fixture(scope="session")
def medal_example(medal_table):
    return Example(
        question=tokenize("What is the bronze value associated with ranks over 5 ?"),
        sql=SQLQuery(sel=4, agg=0, conds=(Condition(0, 1, "5"),)),
        table_id=medal_table.table_id,
    )


@pytest.fixture(scope="session")
def medal_dataset(medal_table, medal_example):
    return Dataset([medal_example], {medal_table.table_id: medal_table})


@pytest.fixture(scope="session")
def tiny_corpus():
    return synthesize_mini_corpus(seed=11, n_tables=3, n_examples=40)


@pytest.fixture(scope="session")
def tiny_target(tiny_corpus):
    """A lightly trained target over the tiny corpus; shared where tests only
    need a consistent non-degenerate model, not accuracy."""
    config = TargetTrainConfig(emb_dim=12, hidden_dim=16, epochs=3, seed=0)
    return train_target(tiny_corpus, config)


@pytest.fixture
def micro_target(tiny_corpus):
    """An untrained micro model with a real corpus vocabulary, for gradient
    and attack oracles."""
    torch.manual_seed(0)
    return TargetModel(build_target_vocab(tiny_corpus), emb_dim=8, hidden_dim=6)
