"""Generator: encoder/latent contracts, the MMD double-loop oracle,
Gumbel-Softmax ST, decoding modes, and checkpoints."""

import itertools
import math

import pytest
import torch

from advqa.generator import (GeneratorModel, build_generator_vocabs, encode,
                             gumbel_softmax, generate, imq_kernel,
                             load_generator, mmd_penalty, sample_latent,
                             save_generator, sequence_nll, decode_step)
from advqa.vocab import BOS, EOS, UNK, Vocab


@pytest.fixture
def micro_generator():
    torch.manual_seed(1)
    src = Vocab({"select", "max", "wins", "where", "year", ">", "et_0"})
    tgt = Vocab({"what", "is", "the", "max", "wins", "year", "et_0", "?",
                 "select", "where", ">"}, specials=(UNK, BOS, EOS))
    return GeneratorModel(src, tgt, emb_dim=6, hidden_dim=5, latent_dim=3)


SQL = ("select", "max", "wins", "where", "year", ">", "et_0")


class TestEncode:
    def test_deterministic(self, micro_generator):
        _, a = encode(SQL, micro_generator)
        _, b = encode(SQL, micro_generator)
        assert torch.equal(a.mu, b.mu) and torch.equal(a.log_sigma, b.log_sigma)

    def test_zeroed_projections_give_bias(self, micro_generator):
        with torch.no_grad():
            micro_generator.mu_proj.weight.zero_()
            micro_generator.mu_proj.bias.fill_(0.25)
        _, post = encode(SQL, micro_generator)
        assert torch.allclose(post.mu, torch.full((3,), 0.25, dtype=torch.float64))

    def test_mu_matches_manual_affine(self, micro_generator):
        states, post = encode(SQL, micro_generator)
        embs = micro_generator.src_emb(
            torch.tensor(micro_generator.src_vocab.ids(SQL)))
        _, final = micro_generator.enc(embs.unsqueeze(1))
        summary = torch.cat([final[0, 0], final[1, 0]])
        manual = micro_generator.mu_proj(summary)
        assert torch.allclose(post.mu, manual)

    def test_log_sigma_clamped(self, micro_generator):
        with torch.no_grad():
            micro_generator.sigma_proj.bias.fill_(100.0)
        _, post = encode(SQL, micro_generator)
        assert float(post.log_sigma.detach().max()) <= 2.0

    def test_empty_input_rejected(self, micro_generator):
        with pytest.raises(ValueError):
            encode((), micro_generator)


class TestLatent:
    def test_fixed_seed_identical(self, micro_generator):
        _, post = encode(SQL, micro_generator)
        a = sample_latent(post, torch.Generator().manual_seed(9))
        b = sample_latent(post, torch.Generator().manual_seed(9))
        assert torch.equal(a, b)

    def test_monte_carlo_mean(self, micro_generator):
        _, post = encode(SQL, micro_generator)
        rng = torch.Generator().manual_seed(0)
        draws = torch.stack([sample_latent(post, rng) for _ in range(100_000)])
        sigma = torch.exp(post.log_sigma)
        tol = 3.0 * sigma / math.sqrt(100_000)
        assert bool(((draws.mean(dim=0) - post.mu).abs() <= tol).all())

    def test_reparameterization_gradient(self, micro_generator):
        from oracles import assert_close_rel, finite_difference
        _, post = encode(SQL, micro_generator)
        mu = post.mu.detach().clone().requires_grad_(True)
        log_sigma = post.log_sigma.detach().clone().requires_grad_(True)

        def scalar(m, ls):
            rng = torch.Generator().manual_seed(4)
            eps = torch.randn(m.shape, generator=rng, dtype=torch.float64)
            z = m + torch.exp(ls) * eps
            return (z ** 2).sum()

        scalar(mu, log_sigma).backward()
        numeric = finite_difference(lambda: scalar(mu, log_sigma), mu.data)
        assert_close_rel(mu.grad, numeric, rel=1e-4)


class TestMMD:
    def double_loop(self, z_post, z_prior, c):
        n = len(z_post)
        k = lambda x, y: c / (c + float(((x - y) ** 2).sum()))
        same = sum(k(z_post[i], z_post[j]) + k(z_prior[i], z_prior[j])
                   for i in range(n) for j in range(n) if i != j)
        cross = sum(k(z_post[i], z_prior[j])
                    for i in range(n) for j in range(n))
        return same / (n * (n - 1)) - 2.0 * cross / (n * n)

    def test_kernel_self_is_one(self):
        x = torch.randn(4, dtype=torch.float64)
        assert float(imq_kernel(x, x, 3.0)) == 1.0

    def test_matches_double_loop(self):
        torch.manual_seed(2)
        for n in (2, 3, 5, 8):
            for dim in (1, 2, 4):
                z_post = torch.randn(n, dim, dtype=torch.float64)
                z_prior = torch.randn(n, dim, dtype=torch.float64)
                c = 2.0 * dim
                got = float(mmd_penalty(z_post, z_prior, c))
                assert abs(got - self.double_loop(z_post, z_prior, c)) < 1e-12

    def test_symmetric_in_sample_sets(self):
        torch.manual_seed(3)
        a = torch.randn(4, 2, dtype=torch.float64)
        b = torch.randn(4, 2, dtype=torch.float64)
        assert math.isclose(float(mmd_penalty(a, b, 4.0)),
                            float(mmd_penalty(b, a, 4.0)), rel_tol=1e-12)

    def test_preconditions(self):
        one = torch.zeros(1, 2, dtype=torch.float64)
        two = torch.zeros(2, 2, dtype=torch.float64)
        with pytest.raises(ValueError):
            mmd_penalty(one, one, 4.0)
        with pytest.raises(ValueError):
            mmd_penalty(two, two, 0.0)


class TestGumbel:
    def test_hard_is_one_hot(self):
        logits = torch.tensor([0.3, -1.0, 2.0], dtype=torch.float64)
        rng = torch.Generator().manual_seed(0)
        for _ in range(50):
            hard, _ = gumbel_softmax(logits, 1.0, rng)
            hard = hard.detach()
            assert float(hard.sum()) == 1.0
            assert set(hard.tolist()) <= {0.0, 1.0}

    def test_noise_free_equals_softmax(self):
        logits = torch.tensor([0.5, -0.25, 1.5, 0.0], dtype=torch.float64)
        _, soft = gumbel_softmax(logits, 1.0, None)
        assert float((soft - torch.softmax(logits, dim=0)).abs().max()) < 1e-12

    def test_frequencies_match_softmax(self):
        logits = torch.tensor([1.0, 0.0, -0.5], dtype=torch.float64)
        probs = torch.softmax(logits, dim=0)
        rng = torch.Generator().manual_seed(7)
        n = 100_000
        counts = torch.zeros(3)
        for _ in range(n):
            hard, _ = gumbel_softmax(logits, 1.0, rng)
            counts[int(torch.argmax(hard.detach()))] += 1
        freq = counts / n
        sd = torch.sqrt(probs * (1 - probs) / n)
        assert bool(((freq - probs).abs() <= 3.0 * sd).all())

    def test_straight_through_gradient(self):
        logits = torch.tensor([0.2, -0.4, 0.9], dtype=torch.float64,
                              requires_grad=True)
        weights = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        hard, soft = gumbel_softmax(logits, 1.0, None)
        (hard @ weights).backward()
        st_grad = logits.grad.clone()
        logits.grad = None
        _, soft2 = gumbel_softmax(logits, 1.0, None)
        (soft2 @ weights).backward()
        assert torch.allclose(st_grad, logits.grad)

    def test_temperature_positive(self):
        with pytest.raises(ValueError):
            gumbel_softmax(torch.zeros(2, dtype=torch.float64), 0.0, None)


class TestDecoding:
    def test_step_distribution_normalizes(self, micro_generator):
        torch.manual_seed(5)
        enc_states, post = encode(SQL, micro_generator)
        src_ids = micro_generator.src_token_ids(SQL)
        state = micro_generator.initial_state(post.mu)
        for _ in range(20):
            prev = torch.randn(6, dtype=torch.float64)
            dist, state = decode_step(prev, state, enc_states, src_ids,
                                      micro_generator)
            dist = dist.detach()
            assert abs(float(dist.sum()) - 1.0) < 1e-6
            assert float(dist.min()) >= 0.0

    def test_beam_width_one_equals_greedy(self, micro_generator):
        greedy = generate(SQL, micro_generator, mode="greedy")[0]
        beam = generate(SQL, micro_generator, mode="beam", size=1)[0]
        assert greedy.tokens == beam.tokens

    def test_beam_sorted_and_matches_enumeration(self, micro_generator):
        hyps = generate(SQL, micro_generator, mode="beam", size=3, max_len=3)
        probs = [h.log_prob_value for h in hyps]
        assert probs == sorted(probs, reverse=True)
        # exhaustive enumeration over all sequences of length <= 3
        enc_states, post = encode(SQL, micro_generator)
        src_ids = micro_generator.src_token_ids(SQL)
        eos = micro_generator.tgt_vocab.id(EOS)
        tokens = [t for t in micro_generator.tgt_vocab.tokens if t != BOS]
        best = []
        for length in range(0, 4):
            for seq in itertools.product(tokens, repeat=length):
                nll = sequence_nll(micro_generator, SQL, seq, post.mu, enc_states)
                best.append((-float(nll.detach()), seq))
        # sequences shorter than max_len end with EOS, matching sequence_nll;
        # length-3 beam survivors carry no EOS term, so compare only the
        # completed hypotheses the beam reports with EOS-terminated scores
        completed = [h for h in hyps if len(h.tokens) < 3]
        best.sort(key=lambda p: -p[0])
        top = [seq for _, seq in best[:len(completed)]]
        for h in completed:
            assert h.tokens in top

    def test_sampling_deterministic_per_seed(self, micro_generator):
        a = generate(SQL, micro_generator, mode="sample", size=3,
                     rng=torch.Generator().manual_seed(6))
        b = generate(SQL, micro_generator, mode="sample", size=3,
                     rng=torch.Generator().manual_seed(6))
        assert [h.tokens for h in a] == [h.tokens for h in b]
        assert all(len(h.soft_history) == len(h.tokens) for h in a)

    def test_sample_requires_rng(self, micro_generator):
        with pytest.raises(ValueError):
            generate(SQL, micro_generator, mode="sample")

    def test_unknown_mode(self, micro_generator):
        with pytest.raises(ValueError):
            generate(SQL, micro_generator, mode="magic")


class TestVocabAndCheckpoint:
    def test_placeholders_always_present(self):
        src, tgt = build_generator_vocabs([(("select", "wins"), ("what", "?"))])
        for i in range(4):
            assert f"et_{i}" in src and f"et_{i}" in tgt
        assert "select" in tgt  # source tokens copyable

    def test_round_trip(self, tmp_path, micro_generator):
        path = tmp_path / "g.ckpt"
        save_generator(micro_generator, path)
        loaded = load_generator(path)
        a = generate(SQL, micro_generator, mode="greedy")[0]
        b = generate(SQL, loaded, mode="greedy")[0]
        assert a.tokens == b.tokens
        assert math.isclose(a.log_prob_value, b.log_prob_value, rel_tol=1e-12)
