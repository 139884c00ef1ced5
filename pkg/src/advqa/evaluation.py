"""Attack-outcome records and corpus metrics: entity coverage rate, query and
answer flip rates, corpus BLEU, similarity, and pluggable perplexity."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, asdict
from typing import Protocol

from .data import (Answer, ExecutionError, SQLQuery, Table, answers_equal,
                   execute_sql)
from .delex import DelexExample, covers_entities


@dataclass
class AttackRecord:
    original: tuple[str, ...]
    adversarial: tuple[str, ...]
    method: str
    entity_ok: bool
    gold_sql: SQLQuery
    pred_sql_original: SQLQuery | None
    pred_sql: SQLQuery
    gold_answer: Answer | None
    pred_answer: Answer | None
    query_flipped: bool
    answer_flipped: bool
    table_id: str
    position: int | None = None  # substituted position for local attacks

    def to_json(self) -> dict:
        def sql_json(q):
            if q is None:
                return None
            return {"sel": q.sel, "agg": q.agg,
                    "conds": [[c.col, c.op, c.value] for c in q.conds]}
        return {
            "original": " ".join(self.original),
            "adversarial": " ".join(self.adversarial),
            "method": self.method,
            "entity_ok": self.entity_ok,
            "gold_sql": sql_json(self.gold_sql),
            "pred_sql_original": sql_json(self.pred_sql_original),
            "pred_sql": sql_json(self.pred_sql),
            "gold_answer": None if self.gold_answer is None else list(self.gold_answer.values),
            "pred_answer": None if self.pred_answer is None else list(self.pred_answer.values),
            "query_flipped": self.query_flipped,
            "answer_flipped": self.answer_flipped,
            "table_id": self.table_id,
            "position": self.position,
        }


def make_record(example: DelexExample, adversarial, method: str, table: Table,
                model, position=None) -> AttackRecord:
    """Score an adversarial question against the target model and the gold
    SQL.  Flips are only counted on entity-covering questions."""
    from .target import decode_query, predict_slots, queries_match

    entity_ok = covers_entities(adversarial, example.entity_map)
    gold_sql = example.example.sql
    pred_before = decode_query(predict_slots(example.example.question, table, model))
    pred_sql = decode_query(predict_slots(tuple(adversarial), table, model))
    try:
        gold_answer = execute_sql(gold_sql, table)
    except ExecutionError:
        gold_answer = None
    try:
        pred_answer = execute_sql(pred_sql, table)
    except ExecutionError:
        pred_answer = None
    query_mismatch = not queries_match(pred_sql, gold_sql)
    if queries_match(pred_sql, gold_sql):
        answer_mismatch = False
    elif gold_answer is None or pred_answer is None:
        answer_mismatch = True
    else:
        answer_mismatch = not answers_equal(gold_answer, pred_answer)
    return AttackRecord(
        original=tuple(example.example.question),
        adversarial=tuple(adversarial),
        method=method,
        entity_ok=entity_ok,
        gold_sql=gold_sql,
        pred_sql_original=pred_before,
        pred_sql=pred_sql,
        gold_answer=gold_answer,
        pred_answer=pred_answer,
        query_flipped=entity_ok and query_mismatch,
        answer_flipped=entity_ok and answer_mismatch,
        table_id=example.table_id,
        position=position,
    )


# ---------------------------------------------------------------------------
# Rates

def compute_ecr(records) -> float:
    """Entity coverage rate, 100 * v / m."""
    records = list(records)
    if not records:
        raise ValueError("cannot compute Ecr over an empty record list")
    v = sum(r.entity_ok for r in records)
    return 100.0 * v / len(records)


def compute_flip_rates(records):
    """(Qfr, Afr): flips among entity-covering records, divided by the total
    record count."""
    records = list(records)
    if not records:
        raise ValueError("cannot compute flip rates over an empty record list")
    m = len(records)
    l = sum(r.entity_ok and r.query_flipped for r in records)
    a = sum(r.entity_ok and r.answer_flipped for r in records)
    return 100.0 * l / m, 100.0 * a / m


# ---------------------------------------------------------------------------
# BLEU

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(references, hypotheses, max_order: int = 4) -> float:
    """Corpus BLEU-4 with uniform weights, brevity penalty, and add-one
    smoothing on orders above 1.  Returns a score in [0, 100]."""
    references, hypotheses = list(references), list(hypotheses)
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses must pair up")
    if not references:
        raise ValueError("cannot compute BLEU over empty corpora")
    matches = [0] * max_order
    totals = [0] * max_order
    ref_len = hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref, hyp = list(ref), list(hyp)
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_order + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    log_precision = 0.0
    for n in range(1, max_order + 1):
        m, t = matches[n - 1], totals[n - 1]
        if n > 1:  # add-one smoothing on higher orders
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_precision += math.log(m / t) / max_order
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(1, hyp_len))
    return 100.0 * brevity * math.exp(log_precision)


# ---------------------------------------------------------------------------
# Perplexity

class LanguageModelAdapter(Protocol):
    def token_log_probs(self, tokens) -> list[float]:
        """Natural-log probability of each scored word in the sequence."""
        ...


class TrigramModel:
    """Interpolated trigram language model over whitespace tokens."""

    def __init__(self, corpus, weights=(0.2, 0.3, 0.5)):
        self.w1, self.w2, self.w3 = weights
        self.unigrams = Counter()
        self.bigrams = Counter()
        self.trigrams = Counter()
        self.contexts2 = Counter()
        self.contexts3 = Counter()
        for sent in corpus:
            toks = ["<s>", "<s>"] + [t.lower() for t in sent] + ["</s>"]
            for i in range(2, len(toks)):
                self.unigrams[toks[i]] += 1
                self.bigrams[(toks[i - 1], toks[i])] += 1
                self.trigrams[(toks[i - 2], toks[i - 1], toks[i])] += 1
                self.contexts2[toks[i - 1]] += 1
                self.contexts3[(toks[i - 2], toks[i - 1])] += 1
        self.total = sum(self.unigrams.values())
        self.vocab_size = len(self.unigrams) + 1  # reserve mass for unseen

    def _prob(self, w2, w1, w):
        p1 = (self.unigrams[w] + 1) / (self.total + self.vocab_size)
        p2 = self.bigrams[(w1, w)] / self.contexts2[w1] if self.contexts2[w1] else 0.0
        c3 = self.contexts3[(w2, w1)]
        p3 = self.trigrams[(w2, w1, w)] / c3 if c3 else 0.0
        return self.w1 * p1 + self.w2 * p2 + self.w3 * p3

    def token_log_probs(self, tokens) -> list[float]:
        toks = ["<s>", "<s>"] + [t.lower() for t in tokens] + ["</s>"]
        return [math.log(self._prob(toks[i - 2], toks[i - 1], toks[i]))
                for i in range(2, len(toks))]


def perplexity(hypotheses, lm: LanguageModelAdapter) -> float:
    """Corpus word-level perplexity: exp of the mean negative log-probability
    over every word the adapter scores."""
    hypotheses = list(hypotheses)
    if not hypotheses:
        raise ValueError("cannot compute perplexity over an empty corpus")
    log_probs = []
    for hyp in hypotheses:
        log_probs.extend(lm.token_log_probs(hyp))
    if not log_probs:
        raise ValueError("language model adapter scored zero words")
    return math.exp(-sum(log_probs) / len(log_probs))


# ---------------------------------------------------------------------------
# Report assembly

@dataclass
class MethodMetrics:
    method: str
    count: int
    ecr: float
    qfr: float
    afr: float
    bleu: float
    mean_similarity: float | None = None
    perplexity: float | None = None


@dataclass
class MetricsReport:
    overall: MethodMetrics
    per_method: list[MethodMetrics]
    similarity_name: str | None = None

    def to_json(self) -> str:
        payload = {
            "overall": asdict(self.overall),
            "per_method": [asdict(m) for m in self.per_method],
            "similarity_name": self.similarity_name,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_text(self) -> str:
        sim_col = self.similarity_name or "Sim"
        header = f"{'Method':<16}{'N':>6}{'Ecr':>8}{'Qfr':>8}{'Afr':>8}{'BLEU':>8}{sim_col:>12}{'PPL':>10}"
        lines = [header, "-" * len(header)]
        for m in self.per_method + [self.overall]:
            sim = f"{m.mean_similarity:.2f}" if m.mean_similarity is not None else "-"
            ppl = f"{m.perplexity:.1f}" if m.perplexity is not None else "-"
            lines.append(
                f"{m.method:<16}{m.count:>6}{m.ecr:>8.2f}{m.qfr:>8.2f}{m.afr:>8.2f}"
                f"{m.bleu:>8.2f}{sim:>12}{ppl:>10}")
        return "\n".join(lines)


def _metrics_for(method, records, scorer=None, lm=None) -> MethodMetrics:
    ecr = compute_ecr(records)
    qfr, afr = compute_flip_rates(records)
    bleu = corpus_bleu([r.original for r in records], [r.adversarial for r in records])
    mean_sim = None
    if scorer is not None:
        from .objectives import simile_score
        sims = [simile_score(r.original, r.adversarial, scorer) for r in records]
        mean_sim = sum(sims) / len(sims)
    ppl = perplexity([r.adversarial for r in records], lm) if lm is not None else None
    return MethodMetrics(method, len(records), ecr, qfr, afr, bleu, mean_sim, ppl)


def build_report(records, scorer=None, lm=None, similarity_name=None) -> MetricsReport:
    """Aggregate rates, BLEU, similarity, and perplexity overall and per
    attack method."""
    records = list(records)
    if not records:
        raise ValueError("cannot build a report from zero records")
    methods = sorted({r.method for r in records})
    per_method = [
        _metrics_for(m, [r for r in records if r.method == m], scorer, lm)
        for m in methods
    ]
    overall = _metrics_for("all", records, scorer, lm)
    return MetricsReport(overall, per_method, similarity_name)


def write_records(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def _sql_from_json(obj) -> SQLQuery | None:
    if obj is None:
        return None
    from .data import Condition
    conds = tuple(Condition(c[0], c[1], str(c[2])) for c in obj["conds"])
    return SQLQuery(sel=obj["sel"], agg=obj["agg"], conds=conds)


def record_from_json(obj: dict) -> AttackRecord:
    def answer(values):
        return None if values is None else Answer(tuple(str(v) for v in values))
    return AttackRecord(
        original=tuple(obj["original"].split()),
        adversarial=tuple(obj["adversarial"].split()),
        method=obj["method"],
        entity_ok=obj["entity_ok"],
        gold_sql=_sql_from_json(obj["gold_sql"]),
        pred_sql_original=_sql_from_json(obj["pred_sql_original"]),
        pred_sql=_sql_from_json(obj["pred_sql"]),
        gold_answer=answer(obj["gold_answer"]),
        pred_answer=answer(obj["pred_answer"]),
        query_flipped=obj["query_flipped"],
        answer_flipped=obj["answer_flipped"],
        table_id=obj["table_id"],
        position=obj.get("position"),
    )


def read_records(path) -> list[AttackRecord]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(record_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from exc
    return records
