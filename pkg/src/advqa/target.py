"""A small differentiable slot-classification TableQA model.

Question and headers are encoded by a shared bidirectional GRU; each header
is encoded independently so column scoring is exactly permutation
equivariant.  One classification head per SQL slot exposes probabilities,
the adversarial loss, and gradients w.r.t. input token embeddings.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, Example, SQLQuery, Condition, Table, answers_equal, \
    execute_sql, ExecutionError, _parse_number
from .delex import locate_spans
from .vocab import UNK, Vocab

MAX_CONDS = 4
N_AGGS = 6
N_OPS = 3
EPS_CLAMP = 1e-6


@dataclass(frozen=True)
class GoldLabels:
    sc: int
    sa: int
    wn: int
    wc: tuple[int, ...]
    wo: tuple[int, ...]
    wv: tuple  # per-condition (start, end) span in the question, or None

    def __post_init__(self):
        if not (len(self.wc) == len(self.wo) == len(self.wv) == self.wn):
            raise ValueError("wc/wo/wv must each have wn entries")


def gold_labels(example: Example, table: Table) -> GoldLabels:
    """Slot labels for an example; spans come from the entity matcher and can
    be None when a value has no occurrence in the question."""
    sql = example.sql
    spans = locate_spans(example.question, [c.value for c in sql.conds])
    return GoldLabels(
        sc=sql.sel,
        sa=sql.agg,
        wn=len(sql.conds),
        wc=tuple(c.col for c in sql.conds),
        wo=tuple(c.op for c in sql.conds),
        wv=tuple(spans),
    )


@dataclass
class SlotDistributions:
    sc: torch.Tensor          # (n_columns,)
    sa: torch.Tensor          # (N_AGGS,)
    wn: torch.Tensor          # (MAX_CONDS + 1,)
    wc: torch.Tensor          # (MAX_CONDS, n_columns)
    wo: torch.Tensor          # (MAX_CONDS, N_OPS)
    wv_start: torch.Tensor    # (MAX_CONDS, |question|)
    wv_end: torch.Tensor      # (MAX_CONDS, |question|)
    question_tokens: tuple[str, ...] = ()


class TargetModel(nn.Module):
    def __init__(self, vocab: Vocab, emb_dim: int = 32, hidden_dim: int = 48):
        super().__init__()
        self.vocab = vocab
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        d2 = 2 * hidden_dim
        self.emb = nn.Embedding(len(vocab), emb_dim)
        self.gru = nn.GRU(emb_dim, hidden_dim, bidirectional=True)
        self.sc_proj = nn.Linear(2 * d2, hidden_dim)
        self.sc_out = nn.Linear(hidden_dim, 1)
        self.wc_proj = nn.Linear(2 * d2, hidden_dim)
        self.wc_query = nn.Parameter(torch.zeros(MAX_CONDS, hidden_dim))
        self.sa_head = nn.Linear(d2, N_AGGS)
        self.wn_head = nn.Linear(d2, MAX_CONDS + 1)
        self.wo_head = nn.Linear(d2, MAX_CONDS * N_OPS)
        self.span_proj = nn.Linear(d2, hidden_dim)
        self.start_query = nn.Parameter(torch.zeros(MAX_CONDS, hidden_dim))
        self.end_query = nn.Parameter(torch.zeros(MAX_CONDS, hidden_dim))
        self.double()
        with torch.no_grad():
            nn.init.normal_(self.start_query, std=0.1)
            nn.init.normal_(self.end_query, std=0.1)
            nn.init.normal_(self.wc_query, std=0.1)

    def embed(self, tokens) -> torch.Tensor:
        ids = torch.tensor(self.vocab.ids(tokens), dtype=torch.long)
        return self.emb(ids)

    def _encode(self, embeds: torch.Tensor):
        """(L, d) -> per-token states (L, 2h) and a (2h,) summary."""
        states, final = self.gru(embeds.unsqueeze(1))
        states = states.squeeze(1)
        summary = torch.cat([final[0, 0], final[1, 0]])
        return states, summary

    def _header_vectors(self, table: Table) -> torch.Tensor:
        vecs = []
        for header in table.headers:
            embeds = self.embed(header.lower().split())
            _, summary = self._encode(embeds)
            vecs.append(summary)
        return torch.stack(vecs)

    def forward_embeds(self, question_embeds: torch.Tensor, table: Table,
                       question_tokens=()) -> SlotDistributions:
        states, q_vec = self._encode(question_embeds)
        headers = self._header_vectors(table)
        # per-header attention over question states keeps column scoring
        # permutation equivariant while exposing token-level alignment
        attn = torch.softmax(headers @ states.T / states.shape[1] ** 0.5, dim=1)
        pair = torch.cat([headers, attn @ states], dim=1)
        sc = torch.softmax(self.sc_out(torch.tanh(self.sc_proj(pair))).squeeze(1), dim=0)
        # one column distribution per condition slot so slot i's column stays
        # paired with slot i's operator and value span
        wc = torch.softmax(self.wc_query @ torch.tanh(self.wc_proj(pair)).T, dim=1)
        sa = torch.softmax(self.sa_head(q_vec), dim=0)
        wn = torch.softmax(self.wn_head(q_vec), dim=0)
        wo = torch.softmax(self.wo_head(q_vec).view(MAX_CONDS, N_OPS), dim=1)
        span_keys = torch.tanh(self.span_proj(states))  # (L, h)
        wv_start = torch.softmax(self.start_query @ span_keys.T, dim=1)
        wv_end = torch.softmax(self.end_query @ span_keys.T, dim=1)
        return SlotDistributions(sc, sa, wn, wc, wo, wv_start, wv_end,
                                 tuple(question_tokens))


def predict_slots(question, table: Table, model: TargetModel) -> SlotDistributions:
    if not question:
        raise ValueError("question must be non-empty")
    with torch.no_grad():
        return model.forward_embeds(model.embed(question), table, question)


def decode_query(dists: SlotDistributions) -> SQLQuery:
    """Argmax per slot; condition i takes slot i's column, operator, and
    value span.  Ties break to the lowest index (torch.argmax returns the
    first maximum)."""
    sel = int(torch.argmax(dists.sc))
    agg = int(torch.argmax(dists.sa))
    wn = int(torch.argmax(dists.wn))
    conds = []
    for i in range(wn):
        col = int(torch.argmax(dists.wc[i]))
        op = int(torch.argmax(dists.wo[i]))
        start = int(torch.argmax(dists.wv_start[i]))
        # end constrained to start or later so the span is well formed
        end = start + int(torch.argmax(dists.wv_end[i][start:]))
        value = " ".join(dists.question_tokens[start:end + 1])
        conds.append(Condition(col, op, value))
    return SQLQuery(sel, agg, tuple(conds))


def _gold_probabilities(dists: SlotDistributions, gold: GoldLabels):
    probs = [dists.sc[gold.sc], dists.sa[gold.sa], dists.wn[gold.wn]]
    for i in range(gold.wn):
        probs.append(dists.wc[i, gold.wc[i]])
        probs.append(dists.wo[i, gold.wo[i]])
        if gold.wv[i] is not None:
            start, end = gold.wv[i]
            probs.append(dists.wv_start[i, start])
            probs.append(dists.wv_end[i, end])
    return torch.stack(probs)


def adversarial_loss(question_embeds: torch.Tensor, gold: GoldLabels,
                     table: Table, model: TargetModel):
    """-sum_l log(1 - p(l)) over the gold slot labels.

    Returns (loss, saturated); saturated flags any probability clamped away
    from 1.
    """
    dists = model.forward_embeds(question_embeds, table)
    probs = _gold_probabilities(dists, gold)
    saturated = bool((probs > 1.0 - EPS_CLAMP).any())
    loss = -torch.log1p(-torch.clamp(probs, max=1.0 - EPS_CLAMP)).sum()
    return loss, saturated


def input_gradient(question, gold: GoldLabels, table: Table,
                   model: TargetModel) -> torch.Tensor:
    """Gradient of the adversarial loss w.r.t. each question token embedding."""
    embeds = model.embed(question).detach().requires_grad_(True)
    loss, _ = adversarial_loss(embeds, gold, table, model)
    loss.backward()
    return embeds.grad.detach()


# ---------------------------------------------------------------------------
# Training and evaluation

@dataclass
class TargetTrainConfig:
    emb_dim: int = 32
    hidden_dim: int = 48
    lr: float = 2e-3
    epochs: int = 12
    batch_size: int = 16
    seed: int = 0
    dev_fraction: float = 0.1


def build_target_vocab(dataset: Dataset) -> Vocab:
    tokens = set()
    for ex in dataset.examples:
        tokens.update(ex.question)
    for table in dataset.tables.values():
        for header in table.headers:
            tokens.update(header.lower().split())
    return Vocab(tokens, specials=(UNK,))


def _slot_nll(dists: SlotDistributions, gold: GoldLabels) -> torch.Tensor:
    tiny = 1e-12
    terms = [
        -torch.log(dists.sc[gold.sc] + tiny),
        -torch.log(dists.sa[gold.sa] + tiny),
        -torch.log(dists.wn[gold.wn] + tiny),
    ]
    for i in range(gold.wn):
        terms.append(-torch.log(dists.wc[i, gold.wc[i]] + tiny))
        terms.append(-torch.log(dists.wo[i, gold.wo[i]] + tiny))
        if gold.wv[i] is not None:
            start, end = gold.wv[i]
            terms.append(-torch.log(dists.wv_start[i, start] + tiny))
            terms.append(-torch.log(dists.wv_end[i, end] + tiny))
    return torch.stack(terms).sum()


def train_target(dataset: Dataset, config: TargetTrainConfig | None = None) -> TargetModel:
    """Adam training of all slot heads; returns the best-on-dev checkpoint."""
    if not dataset.examples:
        raise ValueError("dataset must be non-empty")
    config = config or TargetTrainConfig()
    torch.manual_seed(config.seed)
    vocab = build_target_vocab(dataset)
    model = TargetModel(vocab, config.emb_dim, config.hidden_dim)

    indices = list(range(len(dataset.examples)))
    random.Random(config.seed).shuffle(indices)
    n_dev = max(1, int(config.dev_fraction * len(indices))) if len(indices) > 1 else 0
    dev_idx, train_idx = indices[:n_dev], indices[n_dev:] or indices
    train = [dataset.examples[i] for i in train_idx]
    dev = dataset.subset([dataset.examples[i] for i in dev_idx])
    golds = {id(ex): gold_labels(ex, dataset.table_of(ex)) for ex in train}

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    order_rng = random.Random(config.seed + 1)
    best_state, best_acc = None, -1.0
    for epoch in range(config.epochs):
        order_rng.shuffle(train)
        for lo in range(0, len(train), config.batch_size):
            batch = train[lo:lo + config.batch_size]
            optimizer.zero_grad()
            loss = torch.zeros((), dtype=torch.float64)
            for ex in batch:
                dists = model.forward_embeds(model.embed(ex.question),
                                             dataset.table_of(ex), ex.question)
                loss = loss + _slot_nll(dists, golds[id(ex)])
            if not torch.isfinite(loss):
                raise RuntimeError(f"target training diverged (loss={loss}) "
                                   f"at epoch {epoch}")
            loss.backward()
            optimizer.step()
        if len(dev):
            q_acc, _ = evaluate_accuracy(model, dev)
        else:
            q_acc = -float(loss.detach())
        if q_acc > best_acc:
            best_acc = q_acc
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    return model


def _norm_value(value: str):
    n = _parse_number(value)
    return ("num", n) if n is not None else ("str", str(value).strip().lower())


def queries_match(a: SQLQuery, b: SQLQuery) -> bool:
    """Exact match with conds compared as sets of (col, op, value)."""
    conds_a = {(c.col, c.op, _norm_value(c.value)) for c in a.conds}
    conds_b = {(c.col, c.op, _norm_value(c.value)) for c in b.conds}
    return a.sel == b.sel and a.agg == b.agg and conds_a == conds_b


def evaluate_accuracy(model: TargetModel, dataset: Dataset):
    """(query accuracy, answer accuracy); an exact query match always counts
    as an answer match, so a_acc >= q_acc."""
    if not dataset.examples:
        raise ValueError("dataset must be non-empty")
    q_hits = a_hits = 0
    for ex in dataset.examples:
        table = dataset.table_of(ex)
        pred = decode_query(predict_slots(ex.question, table, model))
        if queries_match(pred, ex.sql):
            q_hits += 1
            a_hits += 1
            continue
        try:
            gold_ans = execute_sql(ex.sql, table)
            pred_ans = execute_sql(pred, table)
        except ExecutionError:
            continue
        if answers_equal(gold_ans, pred_ans):
            a_hits += 1
    n = len(dataset.examples)
    return q_hits / n, a_hits / n


# ---------------------------------------------------------------------------
# Checkpoints

def save_target(model: TargetModel, path):
    save_checkpoint(path, "target",
                    {"emb_dim": model.emb_dim, "hidden_dim": model.hidden_dim},
                    {"vocab": model.vocab.tokens}, model.state_dict())


def load_target(path) -> TargetModel:
    header, state = load_checkpoint(path)
    if header["kind"] != "target":
        raise ValueError(f"{path}: checkpoint kind {header['kind']!r} is not a target model")
    vocab = Vocab.from_ordered(header["vocabs"]["vocab"])
    model = TargetModel(vocab, header["config"]["emb_dim"], header["config"]["hidden_dim"])
    model.load_state_dict(state)
    return model
