"""Local attacks vs brute-force enumeration of the linearized objective."""

import random

import pytest
import torch

from advqa.attacks import (attack_charswap, attack_knn, attack_unconstrained,
                           entity_positions, nearest_neighbors, run_attack,
                           score_substitutions)
from advqa.data import synthesize_mini_corpus
from advqa.delex import CoverageFailure, covers_entities, delexicalize
from advqa.target import gold_labels, input_gradient
from advqa.vocab import UNK


def delexed_examples(corpus, limit=None):
    out = []
    for ex in corpus:
        d = delexicalize(ex, corpus.table_of(ex))
        if not isinstance(d, CoverageFailure):
            out.append((d, corpus.table_of(ex)))
        if limit and len(out) >= limit:
            break
    return out


def brute_force_best(example, model, table, candidate_ids):
    """Independent enumeration of argmin (e_c - e_orig) . grad_i with the
    documented (score, position, token id) tie-break."""
    gold = gold_labels(example.example, table)
    grads = input_gradient(example.example.question, gold, table, model)
    emb = model.emb.weight.detach()
    excluded = entity_positions(example)
    best = None
    for i, tok in enumerate(example.example.question):
        if i in excluded:
            continue
        base = emb[model.vocab.id(tok)]
        for c in candidate_ids(i, tok):
            cand = model.vocab.token(c)
            if cand == tok:
                continue
            score = float((emb[c] - base) @ grads[i])
            key = (score, i, c)
            if best is None or key < best[0]:
                best = (key, i, cand)
    return best[1], best[2]


class TestScores:
    def test_original_token_scores_zero(self, micro_target, tiny_corpus):
        (d, table), = delexed_examples(tiny_corpus, limit=1)
        rows = score_substitutions(d, micro_target, table)
        for row in rows:
            for sub in row:
                if sub.token == d.example.question[sub.position]:
                    assert sub.score == 0.0

    def test_entity_positions_have_no_candidates(self, micro_target, tiny_corpus):
        for d, table in delexed_examples(tiny_corpus, limit=10):
            if not d.entity_map.entries:
                continue
            rows = score_substitutions(d, micro_target, table)
            for pos in entity_positions(d):
                assert rows[pos] == []

    def test_no_candidates_errors(self, micro_target, tiny_corpus):
        (d, table), = delexed_examples(tiny_corpus, limit=1)
        empty = {i: () for i in range(len(d.example.question))}
        with pytest.raises(ValueError):
            score_substitutions(d, micro_target, table, empty)


class TestUnconstrained:
    def test_matches_brute_force(self, micro_target, tiny_corpus):
        real_ids = [i for i, t in enumerate(micro_target.vocab.tokens) if t != UNK]
        for d, table in delexed_examples(tiny_corpus, limit=8):
            record = attack_unconstrained(d, micro_target, table)
            pos, tok = brute_force_best(d, micro_target, table,
                                        lambda i, t: real_ids)
            assert record.position == pos
            assert record.adversarial[pos] == tok

    def test_single_token_edit(self, micro_target, tiny_corpus):
        for d, table in delexed_examples(tiny_corpus, limit=8):
            record = attack_unconstrained(d, micro_target, table)
            diffs = [i for i, (a, b) in
                     enumerate(zip(record.original, record.adversarial)) if a != b]
            assert diffs == [record.position]

    def test_entities_preserved(self, micro_target, tiny_corpus):
        for d, table in delexed_examples(tiny_corpus, limit=10):
            record = attack_unconstrained(d, micro_target, table)
            assert covers_entities(record.adversarial, d.entity_map)
            assert record.entity_ok


class TestKnn:
    def test_neighbors_match_pairwise_oracle(self, micro_target):
        emb = micro_target.emb.weight.detach()
        pool = [i for i, t in enumerate(micro_target.vocab.tokens) if t != UNK]
        for token_id in pool[:20]:
            got = nearest_neighbors(micro_target, token_id, 3)
            dists = sorted(
                ((float(torch.linalg.norm(emb[j] - emb[token_id])), j)
                 for j in pool if j != token_id))
            assert got == [j for _, j in dists[:3]]

    def test_k_equals_vocab_reduces_to_unconstrained(self, micro_target,
                                                     tiny_corpus):
        for d, table in delexed_examples(tiny_corpus, limit=4):
            big = attack_knn(d, micro_target, table, k=len(micro_target.vocab))
            un = attack_unconstrained(d, micro_target, table)
            assert big.adversarial == un.adversarial

    def test_matches_brute_force(self, micro_target, tiny_corpus):
        for d, table in delexed_examples(tiny_corpus, limit=6):
            record = attack_knn(d, micro_target, table, k=5)
            def cands(i, tok):
                return nearest_neighbors(micro_target,
                                         micro_target.vocab.id(tok), 5)
            pos, tok = brute_force_best(d, micro_target, table, cands)
            assert record.position == pos and record.adversarial[pos] == tok

    def test_invalid_k(self, micro_target, tiny_corpus):
        (d, table), = delexed_examples(tiny_corpus, limit=1)
        with pytest.raises(ValueError):
            attack_knn(d, micro_target, table, k=0)


class TestCharswap:
    def test_deterministic_and_out_of_vocab(self, micro_target, tiny_corpus):
        for d, table in delexed_examples(tiny_corpus, limit=6):
            a = attack_charswap(d, micro_target, table, seed=5)
            b = attack_charswap(d, micro_target, table, seed=5)
            assert a.adversarial == b.adversarial
            perturbed = a.adversarial[a.position]
            assert perturbed not in micro_target.vocab
            assert a.original[a.position].isalpha()

    def test_single_char_token_uses_insertion(self):
        from advqa.attacks import _perturb_token
        out = _perturb_token("a", random.Random(0), lambda t: t == "a")
        assert len(out) == 2 and "a" in out

    def test_no_eligible_position_errors(self, micro_target, medal_table,
                                         medal_example):
        # an all-numeric question has no alphabetic token to perturb
        from advqa.delex import DelexExample, EntityMap
        d = delexicalize(medal_example, medal_table)
        bare = DelexExample(d.sql_tokens, ("5", "7"), EntityMap(()), "medals",
                            medal_example.__class__(("5", "7"), medal_example.sql,
                                                    "medals"), ())
        with pytest.raises(ValueError):
            attack_charswap(bare, micro_target, medal_table)


class TestDispatch:
    def test_unknown_method(self, micro_target, tiny_corpus):
        (d, table), = delexed_examples(tiny_corpus, limit=1)
        with pytest.raises(ValueError, match="unknown attack"):
            run_attack("zzz", d, micro_target, table)
