"""Stochastic Wasserstein seq2seq question generator: bidirectional GRU
encoder over linearized SQL, Gaussian latent, MMD penalty, attention + copy
decoder, Gumbel-Softmax sampling, and greedy/beam/sample decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .delex import MAX_PLACEHOLDERS, placeholder
from .vocab import BOS, EOS, UNK, Vocab

LOG_SIGMA_MIN, LOG_SIGMA_MAX = -6.0, 2.0
_TINY = 1e-12


@dataclass
class Posterior:
    mu: torch.Tensor
    log_sigma: torch.Tensor


@dataclass
class Hypothesis:
    tokens: tuple[str, ...]
    log_prob: torch.Tensor          # 0-d tensor; graph retained when generated for training
    soft_history: list = field(default_factory=list)  # per-step straight-through vectors

    @property
    def log_prob_value(self) -> float:
        return float(self.log_prob)


class GeneratorModel(nn.Module):
    def __init__(self, src_vocab: Vocab, tgt_vocab: Vocab, emb_dim: int = 64,
                 hidden_dim: int = 128, latent_dim: int = 32):
        super().__init__()
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        d2 = 2 * hidden_dim
        self.src_emb = nn.Embedding(len(src_vocab), emb_dim)
        self.tgt_emb = nn.Embedding(len(tgt_vocab), emb_dim)
        self.enc = nn.GRU(emb_dim, hidden_dim, bidirectional=True)
        self.mu_proj = nn.Linear(d2, latent_dim)
        self.sigma_proj = nn.Linear(d2, latent_dim)
        self.z2state = nn.Linear(latent_dim, hidden_dim)
        self.dec = nn.GRU(emb_dim, hidden_dim)
        self.attn = nn.Linear(hidden_dim, d2, bias=False)
        self.out = nn.Linear(hidden_dim + d2, len(tgt_vocab))
        self.copy_gate = nn.Linear(hidden_dim + d2 + emb_dim, 1)
        self.double()

    def src_token_ids(self, sql_tokens) -> torch.Tensor:
        """Source tokens mapped into the *target* vocabulary for copying."""
        return torch.tensor(self.tgt_vocab.ids(sql_tokens), dtype=torch.long)

    def initial_state(self, z: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.z2state(z))

    def decoder_forward(self, input_embs: torch.Tensor, state: torch.Tensor,
                        enc_states: torch.Tensor, src_tgt_ids: torch.Tensor):
        """Teacher-forced decoder over T steps: returns (T, |V_tgt|) mixture
        distributions (gate * generation + (1-gate) * attention copy) and the
        final recurrent state."""
        outs, last = self.dec(input_embs.unsqueeze(1), state.view(1, 1, -1))
        states = outs.squeeze(1)                                    # (T, h)
        scores = self.attn(states) @ enc_states.T                   # (T, L)
        alpha = torch.softmax(scores, dim=1)
        ctx = alpha @ enc_states                                    # (T, 2h)
        p_gen = torch.softmax(self.out(torch.cat([states, ctx], dim=1)), dim=1)
        gate = torch.sigmoid(self.copy_gate(
            torch.cat([states, ctx, input_embs], dim=1)))           # (T, 1)
        copy = torch.zeros_like(p_gen)
        copy = copy.scatter_add(1, src_tgt_ids.unsqueeze(0).expand(alpha.shape[0], -1), alpha)
        final = gate * p_gen + (1.0 - gate) * copy
        return final, last.view(-1)


def encode(sql_tokens, model: GeneratorModel):
    """(per-token encoder states, Posterior) for a linearized SQL sequence."""
    if not sql_tokens:
        raise ValueError("encoder input must be non-empty")
    ids = torch.tensor(model.src_vocab.ids(sql_tokens), dtype=torch.long)
    embs = model.src_emb(ids)
    states, final = model.enc(embs.unsqueeze(1))
    summary = torch.cat([final[0, 0], final[1, 0]])
    mu = model.mu_proj(summary)
    log_sigma = torch.clamp(model.sigma_proj(summary), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return states.squeeze(1), Posterior(mu, log_sigma)


def sample_latent(post: Posterior, rng: torch.Generator) -> torch.Tensor:
    """Reparameterized draw z = mu + sigma * eps, differentiable in (mu, log sigma)."""
    eps = torch.randn(post.mu.shape, generator=rng, dtype=torch.float64)
    return post.mu + torch.exp(post.log_sigma) * eps


def imq_kernel(x: torch.Tensor, y: torch.Tensor, c: float) -> torch.Tensor:
    return c / (c + ((x - y) ** 2).sum())


def mmd_penalty(z_post: torch.Tensor, z_prior: torch.Tensor, c: float) -> torch.Tensor:
    """Unbiased MMD estimate with the inverse multiquadratic kernel
    k(x, y) = C / (C + ||x - y||^2) between n posterior and n prior draws."""
    n = z_post.shape[0]
    if n < 2 or z_prior.shape[0] != n:
        raise ValueError("the MMD estimator needs matched sample sets of size >= 2")
    if c <= 0:
        raise ValueError("kernel constant must be positive")
    sq = lambda a, b: torch.cdist(a, b) ** 2
    k_pp = c / (c + sq(z_post, z_post))
    k_qq = c / (c + sq(z_prior, z_prior))
    k_pq = c / (c + sq(z_post, z_prior))
    off_diag = (k_pp.sum() - k_pp.diagonal().sum()
                + k_qq.sum() - k_qq.diagonal().sum()) / (n * (n - 1))
    return off_diag - 2.0 * k_pq.sum() / (n * n)


def gumbel_softmax(logits: torch.Tensor, tau: float, rng: torch.Generator | None):
    """(straight-through hard one-hot, soft distribution).

    The returned hard vector forwards as an exact one-hot while gradients
    flow through the soft distribution; rng=None zeroes the Gumbel noise.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if rng is None:
        noisy = logits / tau
    else:
        u = torch.rand(logits.shape, generator=rng, dtype=torch.float64)
        gumbel = -torch.log(-torch.log(u + _TINY) + _TINY)
        noisy = (logits + gumbel) / tau
    soft = torch.softmax(noisy, dim=-1)
    hard = torch.zeros_like(soft)
    hard[torch.argmax(soft)] = 1.0
    hard_st = (hard - soft).detach() + soft
    return hard_st, soft


def decode_step(prev_emb: torch.Tensor, state: torch.Tensor,
                enc_states: torch.Tensor, src_tgt_ids: torch.Tensor,
                model: GeneratorModel):
    """One decoder step; the emitted distribution sums to one over the target
    vocabulary (source tokens reachable through the copy component)."""
    dists, new_state = model.decoder_forward(prev_emb.unsqueeze(0), state,
                                             enc_states, src_tgt_ids)
    return dists[0], new_state


def sequence_nll(model: GeneratorModel, sql_tokens, question_tokens,
                 z: torch.Tensor, enc_states: torch.Tensor) -> torch.Tensor:
    """Teacher-forced -sum_i log p(y_i | z, y_<i, x), end token included."""
    src_ids = model.src_token_ids(sql_tokens)
    gold = list(question_tokens) + [EOS]
    inputs = [BOS] + list(question_tokens)
    input_embs = model.tgt_emb(torch.tensor(model.tgt_vocab.ids(inputs), dtype=torch.long))
    dists, _ = model.decoder_forward(input_embs, model.initial_state(z),
                                     enc_states, src_ids)
    gold_ids = torch.tensor(model.tgt_vocab.ids(gold), dtype=torch.long)
    picked = dists[torch.arange(len(gold)), gold_ids]
    return -torch.log(picked + _TINY).sum()


def _emb_of(model: GeneratorModel, token: str) -> torch.Tensor:
    return model.tgt_emb(torch.tensor(model.tgt_vocab.id(token), dtype=torch.long))


def _greedy(model, enc_states, src_ids, z, max_len):
    state = model.initial_state(z)
    prev = _emb_of(model, BOS)
    tokens = []
    log_prob = torch.zeros((), dtype=torch.float64)
    eos_id = model.tgt_vocab.id(EOS)
    for _ in range(max_len):
        dist, state = decode_step(prev, state, enc_states, src_ids, model)
        idx = int(torch.argmax(dist))
        log_prob = log_prob + torch.log(dist[idx] + _TINY)
        if idx == eos_id:
            break
        token = model.tgt_vocab.token(idx)
        tokens.append(token)
        prev = _emb_of(model, token)
    return Hypothesis(tuple(tokens), log_prob)


def _beam(model, enc_states, src_ids, z, size, max_len):
    eos_id = model.tgt_vocab.id(EOS)
    start = (0.0, [], model.initial_state(z), _emb_of(model, BOS))
    beams = [start]
    finished = []
    for _ in range(max_len):
        candidates = []
        for logp, toks, state, prev in beams:
            dist, new_state = decode_step(prev, state, enc_states, src_ids, model)
            top = torch.topk(dist, min(size, dist.shape[0]))
            for p, idx in zip(top.values, top.indices):
                candidates.append((logp + float(torch.log(p.detach() + _TINY)), toks,
                                   int(idx), new_state))
        candidates.sort(key=lambda c: (-c[0], c[2]))
        beams = []
        for logp, toks, idx, state in candidates:
            if idx == eos_id:
                finished.append((logp, toks))
            else:
                token = model.tgt_vocab.token(idx)
                beams.append((logp, toks + [token], state, _emb_of(model, token)))
            if len(beams) >= size:
                break
        if not beams:
            break
    finished.extend((logp, toks) for logp, toks, _, _ in beams)
    finished.sort(key=lambda c: -c[0])
    return [Hypothesis(tuple(toks), torch.tensor(lp, dtype=torch.float64))
            for lp, toks in finished[:size]]


def _sample_one(model, enc_states, src_ids, post, rng, tau, max_len):
    z = sample_latent(post, rng)
    state = model.initial_state(z)
    prev = _emb_of(model, BOS)
    tokens = []
    soft_history = []
    log_prob = torch.zeros((), dtype=torch.float64)
    eos_id = model.tgt_vocab.id(EOS)
    for _ in range(max_len):
        dist, state = decode_step(prev, state, enc_states, src_ids, model)
        hard_st, _ = gumbel_softmax(torch.log(dist + _TINY), tau, rng)
        idx = int(torch.argmax(hard_st.detach()))
        log_prob = log_prob + torch.log(dist[idx] + _TINY)
        if idx == eos_id:
            break
        tokens.append(model.tgt_vocab.token(idx))
        soft_history.append(hard_st)
        prev = _emb_of(model, model.tgt_vocab.token(idx))
    return Hypothesis(tuple(tokens), log_prob, soft_history)


def generate(sql_tokens, model: GeneratorModel, mode: str = "greedy",
             size: int = 1, max_len: int = 24, rng: torch.Generator | None = None,
             tau: float = 1.0, keep_graph: bool = False) -> list[Hypothesis]:
    """Hypothesis set construction.  greedy/beam decode from the posterior
    mean; sample draws a fresh latent per hypothesis and picks tokens with
    straight-through Gumbel-Softmax (soft history retained for training)."""
    if size < 1:
        raise ValueError("size must be >= 1")
    ctx = torch.enable_grad() if keep_graph else torch.no_grad()
    with ctx:
        enc_states, post = encode(sql_tokens, model)
        src_ids = model.src_token_ids(sql_tokens)
        if mode == "greedy":
            return [_greedy(model, enc_states, src_ids, post.mu, max_len)]
        if mode == "beam":
            return _beam(model, enc_states, src_ids, post.mu, size, max_len)
        if mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs a seeded generator")
            return [_sample_one(model, enc_states, src_ids, post, rng, tau, max_len)
                    for _ in range(size)]
    raise ValueError(f"unknown decoding mode {mode!r}")


# ---------------------------------------------------------------------------
# Vocabulary construction and checkpoints

def build_generator_vocabs(pairs) -> tuple[Vocab, Vocab]:
    """(source, target) vocabularies from (sql_tokens, question_tokens)
    pairs; placeholders are always real vocabulary items and every source
    token is a target item so the copy head can emit it."""
    src_tokens, tgt_tokens = set(), set()
    for sql_tokens, question_tokens in pairs:
        src_tokens.update(sql_tokens)
        tgt_tokens.update(question_tokens)
        tgt_tokens.update(sql_tokens)
    placeholders = {placeholder(i) for i in range(MAX_PLACEHOLDERS)}
    src_vocab = Vocab(src_tokens | placeholders, specials=(UNK,))
    tgt_vocab = Vocab(tgt_tokens | placeholders, specials=(UNK, BOS, EOS))
    return src_vocab, tgt_vocab


def save_generator(model: GeneratorModel, path):
    save_checkpoint(path, "generator",
                    {"emb_dim": model.emb_dim, "hidden_dim": model.hidden_dim,
                     "latent_dim": model.latent_dim},
                    {"src": model.src_vocab.tokens, "tgt": model.tgt_vocab.tokens},
                    model.state_dict())


def load_generator(path) -> GeneratorModel:
    header, state = load_checkpoint(path)
    if header["kind"] != "generator":
        raise ValueError(f"{path}: checkpoint kind {header['kind']!r} is not a generator")
    cfg = header["config"]
    model = GeneratorModel(Vocab.from_ordered(header["vocabs"]["src"]),
                           Vocab.from_ordered(header["vocabs"]["tgt"]),
                           cfg["emb_dim"], cfg["hidden_dim"], cfg["latent_dim"])
    model.load_state_dict(state)
    return model
