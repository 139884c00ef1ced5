"""Entity delexicalization: swap WHERE-condition values for et_i placeholders
in both the SQL structure and the question, and invert the mapping."""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import AGG_NONE, AGG_WORDS, OP_TOKENS, Example, SQLQuery, Table, tokenize

PLACEHOLDER_PREFIX = "et_"
MAX_PLACEHOLDERS = 4


def placeholder(i: int) -> str:
    return f"{PLACEHOLDER_PREFIX}{i}"


def is_placeholder(token: str) -> bool:
    if not token.startswith(PLACEHOLDER_PREFIX):
        return False
    suffix = token[len(PLACEHOLDER_PREFIX):]
    return suffix.isdigit()


@dataclass(frozen=True)
class EntityMap:
    """Condition-ordered (placeholder, surface tokens) pairs."""
    entries: tuple[tuple[str, tuple[str, ...]], ...]

    def surface(self, token: str) -> tuple[str, ...]:
        for ph, surface in self.entries:
            if ph == token:
                return surface
        raise KeyError(f"unknown placeholder {token!r}")

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class CoverageFailure:
    """A condition value with no occurrence in the question; a result value,
    not an error."""
    example: Example
    missing: tuple[str, ...]


@dataclass
class DelexExample:
    sql_tokens: tuple[str, ...]
    question_tokens: tuple[str, ...]
    entity_map: EntityMap
    table_id: str
    example: Example
    value_spans: tuple[tuple[int, int], ...] = field(default=())  # in the original question


def find_span(tokens, surface, lo: int = 0):
    """First occurrence of the surface token run at or after ``lo``,
    case-insensitive; None when absent."""
    surface = [s.lower() for s in surface]
    n, m = len(tokens), len(surface)
    for start in range(lo, n - m + 1):
        if [t.lower() for t in tokens[start:start + m]] == surface:
            return (start, start + m - 1)
    return None


def locate_spans(question, values):
    """First non-overlapping occurrence of each value's token run, in value
    order; None for values absent from the question."""
    question = list(question)
    taken = [False] * len(question)
    spans = []
    for value in values:
        surface = tokenize(value)
        span = None
        lo = 0
        while True:
            cand = find_span(question, surface, lo)
            if cand is None:
                break
            if not any(taken[cand[0]:cand[1] + 1]):
                span = cand
                break
            lo = cand[0] + 1
        spans.append(span)
        if span is not None:
            for i in range(span[0], span[1] + 1):
                taken[i] = True
    return spans


def delexicalize(example: Example, table: Table):
    """Replace the i-th condition value with et_i in SQL and question.

    Values are matched case-insensitively against whitespace tokens, first
    non-overlapping occurrence wins.  Returns a CoverageFailure listing
    values that never occur in the question.
    """
    example.sql.validate(table)
    question = list(example.question)
    spans = locate_spans(question, [c.value for c in example.sql.conds])
    missing = [c.value for c, s in zip(example.sql.conds, spans) if s is None]
    if missing:
        return CoverageFailure(example, tuple(missing))

    entries = []
    delexed = list(question)
    for i, (cond, span) in enumerate(zip(example.sql.conds, spans)):
        entries.append((placeholder(i), tuple(tokenize(cond.value))))
        delexed[span[0]] = placeholder(i)
        for j in range(span[0] + 1, span[1] + 1):
            delexed[j] = None
    question_tokens = tuple(t for t in delexed if t is not None)
    entity_map = EntityMap(tuple(entries))
    return DelexExample(
        sql_tokens=linearize_sql(example.sql, table, entity_map),
        question_tokens=question_tokens,
        entity_map=entity_map,
        table_id=example.table_id,
        example=example,
        value_spans=tuple(spans),
    )


def relexicalize(tokens, entity_map: EntityMap) -> tuple[str, ...]:
    """Expand each placeholder back to its surface tokens."""
    out = []
    for tok in tokens:
        if is_placeholder(tok):
            out.extend(entity_map.surface(tok))  # KeyError on unknown et_i
        else:
            out.append(tok)
    return tuple(out)


def linearize_sql(sql: SQLQuery, table: Table, entity_map: EntityMap) -> tuple[str, ...]:
    """Deterministic lowercase grammar:
    "select" [agg-word] sel-header { "where" cond-header op placeholder }*"""
    tokens = ["select"]
    if sql.agg != AGG_NONE:
        tokens.append(AGG_WORDS[sql.agg])
    tokens.extend(tokenize(table.headers[sql.sel]))
    for i, cond in enumerate(sql.conds):
        tokens.append("where")
        tokens.extend(tokenize(table.headers[cond.col]))
        tokens.append(OP_TOKENS[cond.op])
        tokens.append(placeholder(i))
    return tuple(tokens)


def linearize_sql_raw(sql: SQLQuery, table: Table) -> tuple[str, ...]:
    """Linearization with condition values inlined (no placeholders), for the
    no-delexicalization ablation."""
    tokens = ["select"]
    if sql.agg != AGG_NONE:
        tokens.append(AGG_WORDS[sql.agg])
    tokens.extend(tokenize(table.headers[sql.sel]))
    for cond in sql.conds:
        tokens.append("where")
        tokens.extend(tokenize(table.headers[cond.col]))
        tokens.append(OP_TOKENS[cond.op])
        tokens.extend(tokenize(cond.value))
    return tuple(tokens)


def relexicalize_lenient(tokens, entity_map: EntityMap) -> tuple[str, ...]:
    """Like relexicalize, but keeps unknown placeholders verbatim instead of
    raising; used on generator output."""
    known = dict(entity_map.entries)
    out = []
    for tok in tokens:
        if is_placeholder(tok) and tok in known:
            out.extend(known[tok])
        else:
            out.append(tok)
    return tuple(out)


def entity_map_from_conds(sql: SQLQuery) -> EntityMap:
    """Placeholder/surface pairs straight from the condition list, usable for
    coverage checks even when the question was never delexicalized."""
    return EntityMap(tuple(
        (placeholder(i), tuple(tokenize(c.value))) for i, c in enumerate(sql.conds)
    ))


def covers_entities(question_tokens, entity_map: EntityMap) -> bool:
    """True iff every entity appears, either as its placeholder or as its
    relexicalized surface form."""
    for ph, surface in entity_map.entries:
        if ph in question_tokens:
            continue
        if find_span(tuple(question_tokens), surface) is None:
            return False
    return True
