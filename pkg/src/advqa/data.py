"""WikiSQL-format tables, SQL structures, deterministic execution, and a
templated mini-corpus synthesizer for desk-scale experiments."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

AGG_NONE, AGG_MAX, AGG_MIN, AGG_COUNT, AGG_SUM, AGG_AVG = range(6)
AGG_WORDS = ["", "max", "min", "count", "sum", "avg"]

OP_EQ, OP_GT, OP_LT = range(3)
OP_TOKENS = ["=", ">", "<"]


class LoadError(ValueError):
    """Raised when a WikiSQL-format file cannot be loaded."""


class ExecutionError(ValueError):
    """Raised when a SQL structure cannot be executed on its table."""


@dataclass(frozen=True)
class Table:
    table_id: str
    headers: tuple[str, ...]
    column_types: tuple[str, ...]  # each "text" or "real"
    rows: tuple[tuple, ...]

    def __post_init__(self):
        if len(self.column_types) != len(self.headers):
            raise ValueError("column_types length must equal header count")
        for r in self.rows:
            if len(r) != len(self.headers):
                raise ValueError("every row must have exactly one cell per header")


@dataclass(frozen=True)
class Condition:
    col: int
    op: int
    value: str

    def __post_init__(self):
        if self.op not in (OP_EQ, OP_GT, OP_LT):
            raise ValueError(f"unknown operator {self.op}")


@dataclass(frozen=True)
class SQLQuery:
    sel: int
    agg: int
    conds: tuple[Condition, ...] = ()

    def __post_init__(self):
        if not 0 <= self.agg <= 5:
            raise ValueError(f"agg index {self.agg} outside [0, 5]")

    def validate(self, table: Table):
        n = len(table.headers)
        if not 0 <= self.sel < n:
            raise ValueError(f"sel column {self.sel} outside table width {n}")
        for c in self.conds:
            if not 0 <= c.col < n:
                raise ValueError(f"condition column {c.col} outside table width {n}")


@dataclass(frozen=True)
class Example:
    question: tuple[str, ...]  # whitespace tokens
    sql: SQLQuery
    table_id: str

    @property
    def question_text(self):
        return " ".join(self.question)


@dataclass(frozen=True)
class Answer:
    values: tuple  # matching cells for agg NONE, else a single-scalar tuple

    @property
    def scalar(self):
        return self.values[0]


@dataclass
class Dataset:
    examples: list[Example] = field(default_factory=list)
    tables: dict[str, Table] = field(default_factory=dict)

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def table_of(self, example: Example) -> Table:
        return self.tables[example.table_id]

    def subset(self, examples) -> "Dataset":
        return Dataset(list(examples), self.tables)

    def split(self, fractions: tuple[float, float, float], seed: int):
        """Deterministic shuffled train/dev/test split."""
        idx = list(range(len(self.examples)))
        random.Random(seed).shuffle(idx)
        n = len(idx)
        n_train = int(fractions[0] * n)
        n_dev = int(fractions[1] * n)
        parts = (idx[:n_train], idx[n_train:n_train + n_dev], idx[n_train + n_dev:])
        return tuple(self.subset([self.examples[i] for i in p]) for p in parts)


def _parse_number(value):
    try:
        return float(str(value).strip().replace(",", ""))
    except ValueError:
        return None


def values_equal(a, b) -> bool:
    """Cell comparison: numeric when both sides parse, else case-insensitive
    trimmed string equality."""
    na, nb = _parse_number(a), _parse_number(b)
    if na is not None and nb is not None:
        return math.isclose(na, nb, rel_tol=1e-9, abs_tol=1e-9)
    return str(a).strip().lower() == str(b).strip().lower()


def _cond_holds(cell, cond: Condition) -> bool:
    if cond.op == OP_EQ:
        return values_equal(cell, cond.value)
    nc, nv = _parse_number(cell), _parse_number(cond.value)
    if nc is None or nv is None:
        # non-numeric inequality evaluates false rather than erroring
        return False
    return nc > nv if cond.op == OP_GT else nc < nv


def execute_sql(sql: SQLQuery, table: Table) -> Answer:
    """Filter rows by the conjunction of conds, project sel, apply agg."""
    sql.validate(table)
    rows = [r for r in table.rows if all(_cond_holds(r[c.col], c) for c in sql.conds)]
    projected = [r[sql.sel] for r in rows]
    if sql.agg == AGG_NONE:
        return Answer(tuple(projected))
    if sql.agg == AGG_COUNT:
        return Answer((len(projected),))
    numbers = [_parse_number(v) for v in projected]
    if any(n is None for n in numbers):
        raise ExecutionError(
            f"aggregation {AGG_WORDS[sql.agg]} over non-numeric values in column "
            f"{table.headers[sql.sel]!r}")
    if sql.agg == AGG_SUM:
        return Answer((sum(numbers),))
    if not numbers:
        raise ExecutionError(f"aggregation {AGG_WORDS[sql.agg]} over an empty set")
    if sql.agg == AGG_MAX:
        return Answer((max(numbers),))
    if sql.agg == AGG_MIN:
        return Answer((min(numbers),))
    return Answer((sum(numbers) / len(numbers),))  # AVG


def answers_equal(a: Answer, b: Answer) -> bool:
    if len(a.values) != len(b.values):
        return False
    return all(values_equal(x, y) for x, y in zip(a.values, b.values))


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


# ---------------------------------------------------------------------------
# JSON-lines I/O (WikiSQL layout)

def load_tables(tables_path) -> dict[str, Table]:
    tables = {}
    with open(tables_path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                table = Table(
                    table_id=obj["id"],
                    headers=tuple(obj["header"]),
                    column_types=tuple(obj["types"]),
                    rows=tuple(tuple(r) for r in obj["rows"]),
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise LoadError(f"{tables_path}:{lineno}: malformed table record: {exc}")
            tables[table.table_id] = table
    return tables


def load_wikisql(data_path, tables_path) -> Dataset:
    """Load examples and tables from WikiSQL JSON-lines files, preserving
    file order.  A missing or malformed record names its line number."""
    tables = load_tables(tables_path)
    examples = []
    with open(data_path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sql = obj["sql"]
                example = Example(
                    question=tokenize(obj["question"]),
                    sql=SQLQuery(
                        sel=sql["sel"],
                        agg=sql["agg"],
                        conds=tuple(Condition(c[0], c[1], str(c[2])) for c in sql["conds"]),
                    ),
                    table_id=obj["table_id"],
                )
            except (json.JSONDecodeError, KeyError, IndexError, ValueError) as exc:
                raise LoadError(f"{data_path}:{lineno}: malformed record: {exc}")
            if example.table_id not in tables:
                raise LoadError(
                    f"{data_path}:{lineno}: unknown table_id {example.table_id!r}")
            examples.append(example)
    return Dataset(examples, tables)


def example_to_json(example: Example) -> dict:
    return {
        "question": example.question_text,
        "table_id": example.table_id,
        "sql": {
            "sel": example.sql.sel,
            "agg": example.sql.agg,
            "conds": [[c.col, c.op, c.value] for c in example.sql.conds],
        },
    }


def table_to_json(table: Table) -> dict:
    return {
        "id": table.table_id,
        "header": list(table.headers),
        "types": list(table.column_types),
        "rows": [list(r) for r in table.rows],
    }


def write_wikisql(dataset: Dataset, data_path, tables_path):
    with open(data_path, "w") as f:
        for ex in dataset.examples:
            f.write(json.dumps(example_to_json(ex), sort_keys=True) + "\n")
    with open(tables_path, "w") as f:
        for tid in sorted(dataset.tables):
            f.write(json.dumps(table_to_json(dataset.tables[tid]), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Mini-corpus synthesis

_HEADER_WORDS = [
    "rank", "gold", "silver", "bronze", "total", "year", "wins", "losses",
    "points", "score", "games", "medals", "goals", "assists", "attendance",
    "laps", "podiums", "starts", "titles", "draws",
]
_NAME_WORDS = [
    "russia", "france", "hungary", "ukraine", "bulgaria", "poland", "spain",
    "italy", "norway", "sweden", "canada", "brazil", "japan", "kenya",
    "mexico", "chile", "egypt", "india", "ghana", "peru",
]
_AGG_PHRASES = {
    AGG_NONE: "what is the {sel}",
    AGG_MAX: "what is the maximum {sel}",
    AGG_MIN: "what is the minimum {sel}",
    AGG_COUNT: "how many {sel} entries are there",
    AGG_SUM: "what is the total {sel}",
    AGG_AVG: "what is the average {sel}",
}
_OP_PHRASES = {OP_EQ: "equal to", OP_GT: "greater than", OP_LT: "less than"}


def _synth_table(rng: random.Random, index: int) -> Table:
    n_cols = rng.randint(3, 5)
    n_rows = rng.randint(4, 8)
    headers = ["name"] + rng.sample(_HEADER_WORDS, n_cols - 1)
    types = ["text"] + ["real"] * (n_cols - 1)
    names = rng.sample(_NAME_WORDS, n_rows)
    rows = []
    for i in range(n_rows):
        row = [names[i]] + [rng.randint(0, 50) for _ in range(n_cols - 1)]
        rows.append(tuple(row))
    return Table(f"synth-{index}", tuple(headers), tuple(types), tuple(rows))


def _matching_rows(table: Table, conds) -> list:
    return [r for r in table.rows if all(_cond_holds(r[c.col], c) for c in conds)]


def _pick_condition(rng: random.Random, table: Table, col: int) -> Condition:
    cells = [r[col] for r in table.rows]
    if table.column_types[col] == "text":
        return Condition(col, OP_EQ, str(rng.choice(cells)))
    op = rng.choice([OP_EQ, OP_GT, OP_LT])
    if op == OP_EQ:
        return Condition(col, OP_EQ, str(rng.choice(cells)))
    lo, hi = min(cells), max(cells)
    if lo == hi:
        return Condition(col, OP_EQ, str(lo))
    # threshold strictly inside the value range so the filter is non-empty
    pivot = rng.randint(lo, hi - 1) if op == OP_GT else rng.randint(lo + 1, hi)
    return Condition(col, op, str(pivot))


def _synth_example(rng: random.Random, table: Table) -> Example:
    while True:
        agg = rng.randrange(6)
        if agg in (AGG_MAX, AGG_MIN, AGG_SUM, AGG_AVG):
            sel = rng.randrange(1, len(table.headers))  # real columns only
        else:
            sel = rng.randrange(len(table.headers))
        n_conds = rng.choice([0, 1, 1, 2])
        cond_cols = rng.sample(range(len(table.headers)), n_conds)
        conds = tuple(_pick_condition(rng, table, col) for col in cond_cols)
        if agg in (AGG_MAX, AGG_MIN, AGG_AVG) and not _matching_rows(table, conds):
            continue
        phrase = _AGG_PHRASES[agg].format(sel=table.headers[sel])
        clauses = [
            f"when the {table.headers[c.col]} is {_OP_PHRASES[c.op]} {c.value}"
            for c in conds
        ]
        question = phrase + ("" if not clauses else " " + " and ".join(clauses)) + " ?"
        return Example(tokenize(question), SQLQuery(sel, agg, conds), table.table_id)


def synthesize_mini_corpus(seed: int, n_tables: int, n_examples: int) -> Dataset:
    """Deterministic templated corpus: identical seed, identical dataset."""
    if n_tables < 1 or n_examples < 1:
        raise ValueError("n_tables and n_examples must be >= 1")
    rng = random.Random(seed)
    tables = [_synth_table(rng, i) for i in range(n_tables)]
    examples = [
        _synth_example(rng, tables[i % n_tables]) for i in range(n_examples)
    ]
    return Dataset(examples, {t.table_id: t for t in tables})
