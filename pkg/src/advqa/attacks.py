"""White-box single-token attacks driven by the first-order approximation of
the adversarial loss: unconstrained, k-nearest-neighbor, and character swap."""

from __future__ import annotations

import random
import string
from dataclasses import dataclass

import torch

from .data import Table
from .delex import DelexExample
from .evaluation import AttackRecord, make_record
from .target import TargetModel, gold_labels, input_gradient
from .vocab import UNK


@dataclass(frozen=True)
class SubstitutionScore:
    position: int
    token: str
    score: float


def entity_positions(example: DelexExample) -> set[int]:
    """Question positions occupied by condition-entity surface forms; these
    are never substituted."""
    taken = set()
    for start, end in example.value_spans:
        taken.update(range(start, end + 1))
    return taken


def _gradients(example: DelexExample, model: TargetModel, table: Table) -> torch.Tensor:
    gold = gold_labels(example.example, table)
    return input_gradient(example.example.question, gold, table, model)


def score_substitutions(example: DelexExample, model: TargetModel, table: Table,
                        candidates=None):
    """Exact first-order scores (e_candidate - e_original) . grad_i for every
    allowed (position, candidate); lower means a stronger attack.

    ``candidates`` maps position -> iterable of vocabulary token ids; by
    default every vocabulary token at every non-entity position.
    """
    question = example.example.question
    excluded = entity_positions(example)
    grads = _gradients(example, model, table)
    emb = model.emb.weight.detach()
    scores: list[list[SubstitutionScore]] = []
    any_candidates = False
    for i, token in enumerate(question):
        if i in excluded:
            scores.append([])
            continue
        ids = range(len(model.vocab)) if candidates is None else candidates.get(i, ())
        ids = list(ids)
        if not ids:
            scores.append([])
            continue
        any_candidates = True
        base = emb[model.vocab.id(token)]
        row_scores = (emb[ids] - base) @ grads[i]
        scores.append([
            SubstitutionScore(i, model.vocab.token(c), float(s))
            for c, s in zip(ids, row_scores)
        ])
    if not any_candidates:
        raise ValueError("no substitution candidates at any position")
    return scores


def _best_substitution(example: DelexExample, model: TargetModel, table: Table,
                       candidates=None):
    """Argmin of the score matrix, excluding the original token at each
    position; ties break to the lowest (position, token id)."""
    question = example.example.question
    best = None
    for row in score_substitutions(example, model, table, candidates):
        for sub in row:
            if sub.token == question[sub.position]:
                continue
            key = (sub.score, sub.position, model.vocab.id(sub.token))
            if best is None or key < best[0]:
                best = (key, sub)
    if best is None:
        raise ValueError("no substitution candidates at any position")
    return best[1]


def _apply(question, position: int, token: str) -> tuple[str, ...]:
    out = list(question)
    out[position] = token
    return tuple(out)


def _real_token_ids(model: TargetModel):
    return [i for i, t in enumerate(model.vocab.tokens) if t != UNK]


def attack_unconstrained(example: DelexExample, model: TargetModel,
                         table: Table) -> AttackRecord:
    """Best single-token substitution searched over the whole vocabulary."""
    ids = _real_token_ids(model)
    candidates = {i: ids for i in range(len(example.example.question))}
    sub = _best_substitution(example, model, table, candidates)
    adversarial = _apply(example.example.question, sub.position, sub.token)
    return make_record(example, adversarial, "unconstrained", table, model,
                       position=sub.position)


def nearest_neighbors(model: TargetModel, token_id: int, k: int,
                      pool=None) -> list[int]:
    """k nearest vocabulary tokens by Euclidean embedding distance, excluding
    the token itself; ties break to the lowest token id."""
    emb = model.emb.weight.detach()
    pool = _real_token_ids(model) if pool is None else list(pool)
    dists = torch.linalg.norm(emb[pool] - emb[token_id], dim=1)
    ranked = sorted(zip(pool, dists.tolist()), key=lambda p: (p[1], p[0]))
    return [i for i, _ in ranked if i != token_id][:k]


def attack_knn(example: DelexExample, model: TargetModel, table: Table,
               k: int = 10) -> AttackRecord:
    """Substitution restricted to the k nearest neighbors of each original
    token embedding."""
    if k < 1:
        raise ValueError("k must be >= 1")
    question = example.example.question
    candidates = {
        i: nearest_neighbors(model, model.vocab.id(tok), k)
        for i, tok in enumerate(question)
    }
    sub = _best_substitution(example, model, table, candidates)
    adversarial = _apply(question, sub.position, sub.token)
    return make_record(example, adversarial, "knn", table, model,
                       position=sub.position)


def _perturb_token(token: str, rng: random.Random, in_vocab) -> str:
    """Seeded character swap or insertion repeated until the token leaves the
    vocabulary (so it maps to the unknown embedding)."""
    for _ in range(100):
        if len(token) >= 2 and rng.random() < 0.5:
            i = rng.randrange(len(token) - 1)
            cand = token[:i] + token[i + 1] + token[i] + token[i + 2:]
        else:
            i = rng.randrange(len(token) + 1)
            cand = token[:i] + rng.choice(string.ascii_lowercase) + token[i:]
        if cand != token and not in_vocab(cand):
            return cand
    raise RuntimeError(f"could not perturb token {token!r} out of the vocabulary")


def attack_charswap(example: DelexExample, model: TargetModel, table: Table,
                    seed: int = 0) -> AttackRecord:
    """Pick the position where replacement by the unknown embedding scores
    best, then realize it as a seeded character swap or insertion."""
    question = example.example.question
    excluded = entity_positions(example)
    eligible = [i for i, tok in enumerate(question)
                if i not in excluded and tok.isalpha()]
    if not eligible:
        raise ValueError("no non-entity alphabetic token to perturb")
    grads = _gradients(example, model, table)
    emb = model.emb.weight.detach()
    unk_vec = emb[model.vocab.unk_id]
    best = min(
        eligible,
        key=lambda i: (float((unk_vec - emb[model.vocab.id(question[i])]) @ grads[i]), i),
    )
    rng = random.Random(f"{seed}:{best}:{question[best]}")
    perturbed = _perturb_token(question[best], rng, lambda t: t in model.vocab)
    adversarial = _apply(question, best, perturbed)
    return make_record(example, adversarial, "charswap", table, model,
                       position=best)


ATTACKS = {
    "unconstrained": attack_unconstrained,
    "knn": attack_knn,
    "charswap": attack_charswap,
}


def run_attack(method: str, example: DelexExample, model: TargetModel,
               table: Table, **kwargs) -> AttackRecord:
    if method not in ATTACKS:
        raise ValueError(f"unknown attack method {method!r}")
    return ATTACKS[method](example, model, table, **kwargs)
