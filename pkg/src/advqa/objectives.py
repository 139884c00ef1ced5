"""Loss assembly and generator training: reconstruction + MMD, similarity
scoring with minimum-risk training, the combined adversarial objective, and
the four-variant training driver (seq2seq, wseq, wseq_s, sage)."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset, Example, Table
from .delex import (CoverageFailure, EntityMap, covers_entities, delexicalize,
                    entity_map_from_conds, is_placeholder, linearize_sql_raw,
                    locate_spans, relexicalize_lenient)
from .generator import (GeneratorModel, Hypothesis, build_generator_vocabs,
                        encode, generate, mmd_penalty, sample_latent,
                        sequence_nll)
from .target import GoldLabels, TargetModel, adversarial_loss

VARIANTS = ("seq2seq", "wseq", "wseq_s", "sage")


@dataclass
class TrainConfig:
    variant: str = "sage"
    delex: bool = True
    lambda_wseq: float = 1.0
    lambda_sim: float = 0.8
    lambda_adv: float = 0.1
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    hyp_size: int = 6
    tau: float = 1.0
    seed: int = 0
    emb_dim: int = 64
    hidden_dim: int = 128
    latent_dim: int = 32
    kernel_const: float | None = None  # defaults to 2 * latent_dim
    max_len: int = 24
    warm_start_epochs: int = 0
    dev_fraction: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.lambda_wseq, self.lambda_sim, self.lambda_adv) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def mmd_c(self) -> float:
        return self.kernel_const if self.kernel_const is not None else 2.0 * self.latent_dim


@dataclass
class TrainPair:
    """A generator training instance: linearized SQL in, question tokens out."""
    sql_tokens: tuple[str, ...]
    question_tokens: tuple[str, ...]
    entity_map: EntityMap
    example: Example
    table: Table


def make_pairs(dataset: Dataset, delex_on: bool):
    """(pairs, coverage_failures).  With delexicalization on, coverage
    failures are excluded from generator training."""
    pairs, failures = [], []
    for ex in dataset.examples:
        table = dataset.table_of(ex)
        if delex_on:
            d = delexicalize(ex, table)
            if isinstance(d, CoverageFailure):
                failures.append(d)
                continue
            pairs.append(TrainPair(d.sql_tokens, d.question_tokens,
                                   d.entity_map, ex, table))
        else:
            pairs.append(TrainPair(linearize_sql_raw(ex.sql, table), ex.question,
                                   entity_map_from_conds(ex.sql), ex, table))
    return pairs, failures


# ---------------------------------------------------------------------------
# Reconstruction and Wasserstein losses

def reconstruction_loss(batch, model: GeneratorModel,
                        rng: torch.Generator | None = None) -> torch.Tensor:
    """Teacher-forced negative log-likelihood summed over the batch; latent
    drawn from the posterior when a generator is supplied, posterior mean
    otherwise."""
    total = torch.zeros((), dtype=torch.float64)
    for pair in batch:
        enc_states, post = encode(pair.sql_tokens, model)
        z = sample_latent(post, rng) if rng is not None else post.mu
        total = total + sequence_nll(model, pair.sql_tokens, pair.question_tokens,
                                     z, enc_states)
    return total


def wseq_loss_components(batch, model: GeneratorModel,
                         rng: torch.Generator, c: float):
    """(reconstruction, mmd) with posterior draws consumed from ``rng`` in
    batch order, then one prior draw per example."""
    if len(batch) < 2:
        raise ValueError("the MMD estimator needs a batch of at least 2")
    recon = torch.zeros((), dtype=torch.float64)
    z_post = []
    for pair in batch:
        enc_states, post = encode(pair.sql_tokens, model)
        z = sample_latent(post, rng)
        z_post.append(z)
        recon = recon + sequence_nll(model, pair.sql_tokens, pair.question_tokens,
                                     z, enc_states)
    z_prior = torch.randn(len(batch), model.latent_dim, generator=rng,
                          dtype=torch.float64)
    mmd = mmd_penalty(torch.stack(z_post), z_prior, c)
    return recon, mmd


def wseq_loss(batch, model: GeneratorModel, lambda_wseq: float,
              rng: torch.Generator, c: float | None = None) -> torch.Tensor:
    """Reconstruction plus lambda * MMD between posterior and prior draws."""
    c = c if c is not None else 2.0 * model.latent_dim
    recon, mmd = wseq_loss_components(batch, model, rng, c)
    return recon + lambda_wseq * mmd


# ---------------------------------------------------------------------------
# Similarity scoring

class SimilarityScorer:
    """Interface: vector(token) -> 1-d numpy array (zero vector for unknowns)."""

    name = "scorer"

    def vector(self, token: str) -> np.ndarray:
        raise NotImplementedError


class CorpusEmbeddingScorer(SimilarityScorer):
    """Word vectors from truncated SVD of the PPMI co-occurrence matrix of
    the training questions."""

    name = "corpus-svd"

    def __init__(self, sentences, dim: int = 16, window: int = 2):
        tokens = sorted({t for s in sentences for t in s})
        self._ids = {t: i for i, t in enumerate(tokens)}
        n = len(tokens)
        counts = np.zeros((n, n))
        for sent in sentences:
            ids = [self._ids[t] for t in sent]
            for i, a in enumerate(ids):
                for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                    if j != i:
                        counts[a, ids[j]] += 1.0
        total = counts.sum() or 1.0
        row = counts.sum(axis=1, keepdims=True)
        col = counts.sum(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            pmi = np.log(counts * total / (row @ col))
        ppmi = np.where(np.isfinite(pmi), np.maximum(pmi, 0.0), 0.0)
        u, s, _ = np.linalg.svd(ppmi, full_matrices=False)
        k = min(dim, len(s))
        self._vectors = u[:, :k] * np.sqrt(s[:k])
        self._dim = k

    def vector(self, token: str) -> np.ndarray:
        idx = self._ids.get(token)
        if idx is None:
            return np.zeros(self._dim)
        return self._vectors[idx]


def simile_score(reference, hypothesis, scorer: SimilarityScorer,
                 alpha: float = 0.25) -> float:
    """Cosine similarity of mean word embeddings mapped to [0, 1], scaled by
    the length penalty exp(1 - max/min) ** alpha."""
    reference, hypothesis = list(reference), list(hypothesis)
    if not reference or not hypothesis:
        raise ValueError("similarity needs non-empty token sequences")
    r = np.mean([scorer.vector(t) for t in reference], axis=0)
    h = np.mean([scorer.vector(t) for t in hypothesis], axis=0)
    denom = np.linalg.norm(r) * np.linalg.norm(h)
    cos = float(r @ h / denom) if denom > 0 else 0.0
    sim01 = 0.5 * (1.0 + max(-1.0, min(1.0, cos)))
    lp = math.exp(1.0 - max(len(reference), len(hypothesis))
                  / min(len(reference), len(hypothesis)))
    return sim01 * lp ** alpha


# ---------------------------------------------------------------------------
# Minimum risk and the combined adversarial objective

def min_risk_loss(reference, hypotheses, scorer: SimilarityScorer,
                  entity_map: EntityMap | None = None) -> torch.Tensor:
    """Expected (1 - similarity) under hypothesis probabilities renormalized
    in log space; lies in [0, 1]."""
    if not hypotheses:
        raise ValueError("minimum risk needs at least one hypothesis")
    log_probs = torch.stack([h.log_prob for h in hypotheses])
    weights = torch.softmax(log_probs, dim=0)
    costs = []
    for h in hypotheses:
        tokens = relexicalize_lenient(h.tokens, entity_map) if entity_map else h.tokens
        if not tokens:
            costs.append(1.0)  # empty generation is maximally dissimilar
        else:
            costs.append(1.0 - simile_score(reference, tokens, scorer))
    return (torch.tensor(costs, dtype=torch.float64) * weights).sum()


def _target_embedding_map(generator: GeneratorModel, target: TargetModel) -> torch.Tensor:
    """Row v = the target-model embedding of generator target token v (the
    unknown embedding when absent)."""
    ids = torch.tensor([target.vocab.id(t) for t in generator.tgt_vocab.tokens],
                       dtype=torch.long)
    return target.emb(ids)


def hypothesis_adversarial_loss(hyp: Hypothesis, pair: TrainPair,
                                generator: GeneratorModel, target: TargetModel,
                                emb_map: torch.Tensor):
    """Adversarial loss of a generated hypothesis against the target model.

    The hypothesis is relexicalized; placeholder positions expand to their
    surface tokens with constant target embeddings, other positions receive
    straight-through mixtures of target embeddings so gradients reach the
    generator.  Hypotheses that fail entity coverage contribute zero.
    """
    if not hyp.tokens or not covers_entities(hyp.tokens, pair.entity_map):
        return torch.zeros((), dtype=torch.float64)
    known = dict(pair.entity_map.entries)
    with torch.no_grad():
        # placeholder rows: compose from this example's surface tokens
        emb_map = emb_map.clone()
        for ph, surface in pair.entity_map.entries:
            if ph in generator.tgt_vocab:
                emb_map[generator.tgt_vocab.id(ph)] = target.embed(list(surface)).mean(dim=0)
    tokens = []
    embeds = []
    for step, tok in enumerate(hyp.tokens):
        if is_placeholder(tok) and tok in known:
            for s in known[tok]:
                tokens.append(s)
                embeds.append(target.embed([s]).squeeze(0).detach())
        else:
            tokens.append(tok)
            if hyp.soft_history and step < len(hyp.soft_history):
                embeds.append(hyp.soft_history[step] @ emb_map)
            else:
                embeds.append(target.embed([tok]).squeeze(0).detach())
    spans = locate_spans(tokens, [c.value for c in pair.example.sql.conds])
    if any(s is None for s in spans):
        return torch.zeros((), dtype=torch.float64)
    sql = pair.example.sql
    gold = GoldLabels(sc=sql.sel, sa=sql.agg, wn=len(sql.conds),
                      wc=tuple(c.col for c in sql.conds),
                      wo=tuple(c.op for c in sql.conds), wv=tuple(spans))
    loss, _ = adversarial_loss(torch.stack(embeds), gold, pair.table, target)
    return loss


def _rescored(model: GeneratorModel, pair: TrainPair, hyps):
    """Re-score beam hypotheses teacher-forced so log probabilities carry
    gradients (beam search itself returns detached scores)."""
    enc_states, post = encode(pair.sql_tokens, model)
    out = []
    for h in hyps:
        if not h.tokens:
            out.append(h)
            continue
        lp = -sequence_nll(model, pair.sql_tokens, h.tokens, post.mu, enc_states)
        out.append(Hypothesis(h.tokens, lp, h.soft_history))
    return out


def sage_total_loss(batch, generator: GeneratorModel, target: TargetModel,
                    config: TrainConfig, rng: torch.Generator,
                    scorer: SimilarityScorer):
    """Combined loss: Wasserstein seq2seq term plus, per example, the
    weighted minimum-risk similarity term and the adversarial term summed
    over Gumbel-sampled hypotheses.  Returns (total, parts dict)."""
    recon, mmd = wseq_loss_components(batch, generator, rng, config.mmd_c)
    sim_total = torch.zeros((), dtype=torch.float64)
    adv_total = torch.zeros((), dtype=torch.float64)
    emb_map = _target_embedding_map(generator, target)
    for pair in batch:
        hyps = generate(pair.sql_tokens, generator, mode="sample",
                        size=config.hyp_size, max_len=config.max_len,
                        rng=rng, tau=config.tau, keep_graph=True)
        reference = relexicalize_lenient(pair.question_tokens, pair.entity_map)
        sim_total = sim_total + min_risk_loss(reference, hyps, scorer,
                                              pair.entity_map)
        for h in hyps:
            adv_total = adv_total + hypothesis_adversarial_loss(h, pair, generator,
                                                                target, emb_map)
    total = (recon + config.lambda_wseq * mmd
             + config.lambda_sim * sim_total + config.lambda_adv * adv_total)
    parts = {"recon": recon, "mmd": mmd, "sim": sim_total, "adv": adv_total}
    return total, parts


# ---------------------------------------------------------------------------
# Training driver

@dataclass
class TrainResult:
    model: GeneratorModel
    log: list[dict] = field(default_factory=list)
    scorer: SimilarityScorer | None = None
    coverage_failures: int = 0


def _check_finite(value: torch.Tensor, term: str, epoch: int):
    if not torch.isfinite(value):
        raise RuntimeError(f"generator training diverged: non-finite {term} "
                           f"loss at epoch {epoch}")


def train_generator(dataset: Dataset, target: TargetModel | None,
                    config: TrainConfig) -> TrainResult:
    """Seeded epoch-looped Adam training of the configured variant; returns
    the dev-selected checkpoint and a per-epoch loss log."""
    if config.variant == "sage" and target is None:
        raise ValueError("the sage variant needs a target model")
    torch.manual_seed(config.seed)
    pairs, failures = make_pairs(dataset, config.delex)
    if not pairs:
        raise ValueError("no usable training pairs")

    order = random.Random(config.seed)
    order.shuffle(pairs)
    n_dev = max(1, int(config.dev_fraction * len(pairs))) if len(pairs) > 1 else 0
    dev, train = pairs[:n_dev], pairs[n_dev:] or pairs

    vocabs = build_generator_vocabs([(p.sql_tokens, p.question_tokens) for p in train])
    model = GeneratorModel(*vocabs, config.emb_dim, config.hidden_dim,
                           config.latent_dim)
    scorer = None
    if config.variant in ("wseq_s", "sage"):
        scorer = CorpusEmbeddingScorer(
            [relexicalize_lenient(p.question_tokens, p.entity_map) for p in train])

    target_grads = []
    if target is not None:
        for p in target.parameters():
            target_grads.append(p.requires_grad)
            p.requires_grad_(False)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = torch.Generator().manual_seed(config.seed)
    log: list[dict] = []
    best_state, best_dev = None, float("inf")
    try:
        for epoch in range(config.epochs):
            order.shuffle(train)
            batches = [train[i:i + config.batch_size]
                       for i in range(0, len(train), config.batch_size)]
            if len(batches) > 1 and len(batches[-1]) == 1:
                batches[-2].extend(batches.pop())  # MMD needs batches of >= 2
            sums = {"recon": 0.0, "mmd": 0.0, "sim": 0.0, "adv": 0.0}
            for batch in batches:
                optimizer.zero_grad()
                warm = epoch < config.warm_start_epochs
                if config.variant == "seq2seq":
                    recon = reconstruction_loss(batch, model, rng=None)
                    loss, parts = recon, {"recon": recon}
                elif config.variant == "wseq":
                    recon, mmd = wseq_loss_components(batch, model, rng,
                                                      config.mmd_c)
                    loss = recon + config.lambda_wseq * mmd
                    parts = {"recon": recon, "mmd": mmd}
                elif config.variant == "wseq_s":
                    recon, mmd = wseq_loss_components(batch, model, rng,
                                                      config.mmd_c)
                    sim = torch.zeros((), dtype=torch.float64)
                    for pair in batch:
                        hyps = generate(pair.sql_tokens, model, mode="beam",
                                        size=config.hyp_size,
                                        max_len=config.max_len, keep_graph=True)
                        hyps = _rescored(model, pair, hyps)
                        reference = relexicalize_lenient(pair.question_tokens,
                                                         pair.entity_map)
                        sim = sim + min_risk_loss(reference, hyps, scorer,
                                                  pair.entity_map)
                    loss = recon + config.lambda_wseq * mmd + config.lambda_sim * sim
                    parts = {"recon": recon, "mmd": mmd, "sim": sim}
                else:  # sage
                    cfg = config
                    if warm:
                        cfg = TrainConfig(**{**config.__dict__, "lambda_adv": 0.0})
                    loss, parts = sage_total_loss(batch, model, target, cfg,
                                                  rng, scorer)
                for term, value in parts.items():
                    _check_finite(value, term, epoch)
                    sums[term] += float(value.detach() if torch.is_tensor(value) else value)
                loss.backward()
                optimizer.step()
            with torch.no_grad():
                dev_nll = float(reconstruction_loss(dev or train, model, rng=None))
            n_train = len(train)
            log.append({"epoch": epoch,
                        "recon": sums["recon"] / n_train,
                        "mmd": sums["mmd"] / max(1, len(batches)),
                        "sim": sums["sim"] / n_train,
                        "adv": sums["adv"] / n_train,
                        "dev_nll": dev_nll / max(1, len(dev or train))})
            if dev_nll < best_dev:
                best_dev = dev_nll
                best_state = {k: v.detach().clone()
                              for k, v in model.state_dict().items()}
    finally:
        if target is not None:
            for p, flag in zip(target.parameters(), target_grads):
                p.requires_grad_(flag)
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, log, scorer, len(failures))
