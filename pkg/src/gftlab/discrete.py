"""Discrete AR testbed: an enumerable joint over token sequences, AR losses, exact oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax as np_log_softmax
from scipy.special import logsumexp

from . import autodiff as ad
from .models import NULL_CLASS
from .prng import Prng
from .schedules import BetaSchedule

P_MIN = 1e-4
DROPOUT = 0.10
ENUMERATION_BUDGET = 10**6


class EnumerationBudgetError(ValueError):
    pass


def all_sequences(vocab: int, length: int) -> np.ndarray:
    """Every sequence in lexicographic order; row i spells i in base V."""
    n = vocab**length
    if n > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(f"V^N = {n} exceeds the enumeration budget {ENUMERATION_BUDGET}")
    ids = np.arange(n)
    digits = [(ids // vocab ** (length - 1 - j)) % vocab for j in range(length)]
    return np.stack(digits, axis=1).astype(np.int64)


def prefix_index(tokens, n, vocab):
    tokens = np.asarray(tokens, dtype=np.int64)
    idx = np.zeros(tokens.shape[0], dtype=np.int64)
    for j in range(n):
        idx = idx * vocab + tokens[:, j]
    return idx


@dataclass
class ToyJoint:
    """Exact p(c, x_1..x_N); ``cond[n]`` has shape (C, V^n, V)."""

    prior: np.ndarray
    cond: list
    seed: int = 0
    skew: float = 2.0

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.cond = [np.asarray(t, dtype=np.float64) for t in self.cond]
        self.uncond = self._marginalize()

    @property
    def num_classes(self):
        return self.prior.shape[0]

    @property
    def vocab(self):
        return self.cond[0].shape[-1]

    @property
    def length(self):
        return len(self.cond)

    def config(self):
        return {"seed": self.seed, "vocab": self.vocab, "length": self.length,
                "num_classes": self.num_classes, "skew": self.skew}

    def _marginalize(self):
        # joint[c, prefix] = p(c) p(prefix | c), grown one position at a time
        joint = self.prior[:, None].copy()
        uncond = []
        for table in self.cond:
            post = joint / joint.sum(axis=0, keepdims=True)
            uncond.append(np.einsum("cp,cpv->pv", post, table))
            joint = (joint[:, :, None] * table).reshape(self.num_classes, -1)
        return uncond

    def log_cond_rows(self, tokens, n, c):
        return np.log(self.cond[n][np.asarray(c), prefix_index(tokens, n, self.vocab)])

    def log_uncond_rows(self, tokens, n):
        return np.log(self.uncond[n][prefix_index(tokens, n, self.vocab)])

    def sequence_probs(self, c=None) -> np.ndarray:
        """p(x | c) over all V^N sequences, or p(x) when c is None/NULL."""
        seqs = all_sequences(self.vocab, self.length)
        logp = np.zeros(seqs.shape[0])
        for n in range(self.length):
            rows = self.log_uncond_rows(seqs, n) if c is None or c == NULL_CLASS else self.log_cond_rows(seqs, n, c)
            logp += rows[np.arange(seqs.shape[0]), seqs[:, n]]
        return np.exp(logp)

    def conditional_entropy(self) -> float:
        """H(X | C) in nats."""
        h = 0.0
        for c in range(self.num_classes):
            p = self.sequence_probs(c)
            h -= self.prior[c] * np.sum(p * np.log(p))
        return float(h)

    def sample(self, prng: Prng, n: int):
        c = prng.categorical(np.broadcast_to(self.prior, (n, self.num_classes)))
        tokens = np.zeros((n, self.length), dtype=np.int64)
        for pos in range(self.length):
            rows = self.cond[pos][c, prefix_index(tokens, pos, self.vocab)]
            tokens[:, pos] = prng.categorical(rows)
        return tokens, c


def build_toy_joint(seed=0, vocab=4, length=3, num_classes=2, skew=2.0) -> ToyJoint:
    """Seeded softmax tables with every entry >= P_MIN.

    Rows are ``(1 - V*P_MIN) * softmax(skew * z) + P_MIN`` with z ~ N(0, 1).
    """
    if vocab < 2 or length < 1 or num_classes < 2 or skew <= 0:
        raise ValueError("need V >= 2, N >= 1, C >= 2, skew > 0")
    prng = Prng(seed).fork("toy_joint")
    prior_logits = prng.normal(num_classes)
    prior = np.exp(np_log_softmax(0.5 * prior_logits))
    cond = []
    for n in range(length):
        z = prng.normal((num_classes, vocab**n, vocab))
        p = np.exp(np_log_softmax(skew * z, axis=-1))
        cond.append((1.0 - vocab * P_MIN) * p + P_MIN)
    return ToyJoint(prior, cond, seed=seed, skew=skew)


# -- logit combiners ----------------------------------------------------------------


def cfg_logit_combine(l_c, l_u, s):
    """l_c + s (l_c - l_u), which equals (1+s) l_c - s l_u and is exact when l_c == l_u."""
    s = np.asarray(s, dtype=np.float64)
    if isinstance(l_c, ad.Node) or isinstance(l_u, ad.Node):
        return ad.add(l_c, ad.mul(ad.sub(l_c, l_u), s))
    l_c = np.asarray(l_c)
    return l_c + s * (l_c - np.asarray(l_u))


def gft_logit_combine(l_s, l_u, beta):
    """beta * l_s + (1 - beta) * sg[l_u]."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any((beta <= 0) | (beta > 1)):
        raise ValueError("beta must lie in (0, 1]")
    return ad.add(ad.mul(l_s, beta), ad.mul(ad.stop_gradient(l_u), 1.0 - beta))


def predict_logits(net, prefix, c, beta=1.0) -> np.ndarray:
    """Next-token logits after ``prefix`` (length < N)."""
    prefix = np.asarray(prefix, dtype=np.int64)
    n = prefix.shape[0]
    if n >= net.length:
        raise ValueError("prefix must be shorter than N")
    tokens = np.zeros((1, net.length), dtype=np.int64)
    tokens[0, :n] = prefix
    with ad.no_grad():
        return net(tokens, np.array([c]), beta).value[0, n]


# -- losses --------------------------------------------------------------------------


@dataclass
class ARDraws:
    beta: np.ndarray  # (B, N)
    mask: np.ndarray  # (B,)

    @property
    def masked_fraction(self) -> float:
        return float(np.mean(self.mask))


def draw_ar(prng: Prng, batch: int, length: int, dropout=DROPOUT, beta=None, schedule: BetaSchedule | None = None):
    """beta0 ~ 1 - U[0,1) (or pinned), expanded per position by ``schedule``; then the mask."""
    b0 = 1.0 - prng.uniform(batch)
    if beta is not None:
        b0 = np.full(batch, float(beta))
    mask = prng.bernoulli(dropout, batch)
    if schedule is None or schedule.kind == "constant":
        betas = np.repeat(b0[:, None], length, axis=1)
    else:
        betas = BetaSchedule(schedule.kind, 1.0, schedule.alpha, length).betas(b0)
    return ARDraws(betas, mask)


def _sequence_nll(logits, tokens):
    lp = ad.log_softmax(logits)
    return ad.mul(ad.sum_(ad.pick_last(lp, tokens), axis=1), -1.0)


def _reduce(per_sample, weights):
    if weights is None:
        return ad.mean(per_sample)
    w = np.asarray(weights, dtype=np.float64)
    return ad.sum_(ad.mul(per_sample, w / w.sum()))


def gft_ar_loss(net, tokens, c, draws: ARDraws, weights=None, uncond=None):
    tokens = np.asarray(tokens, dtype=np.int64)
    c_in = np.where(draws.mask, NULL_CLASS, c)
    beta_in = np.where(draws.mask[:, None], 1.0, draws.beta)
    live = net(tokens, c_in, beta_in)
    if uncond is None:
        with ad.no_grad():
            uncond = net(tokens, NULL_CLASS, 1.0)
    combined = gft_logit_combine(live, uncond, draws.beta[:, :, None])
    return _reduce(_sequence_nll(combined, tokens), weights)


def cfg_ar_loss(net, tokens, c, draws: ARDraws, weights=None):
    tokens = np.asarray(tokens, dtype=np.int64)
    c_in = np.where(draws.mask, NULL_CLASS, c)
    logits = net(tokens, c_in, 1.0)
    return _reduce(_sequence_nll(logits, tokens), weights)


def sequence_logprob(net, tokens, c, beta=1.0):
    return ad.mul(_sequence_nll(net(tokens, c, beta), tokens), -1.0)


def draw_negatives(prng: Prng, c):
    """For each i, the condition of a uniformly chosen other batch element."""
    b = c.shape[0]
    if b < 2:
        raise ValueError("negative conditions need a batch of at least 2")
    j = (np.arange(b) + 1 + prng.integers(b - 1, b)) % b
    return c[j]


def cca_loss_terms(policy, ref, tokens, c_pos, c_neg, s=1.0):
    """Positive and negative halves of the contrastive loss, as separate graphs."""
    if s <= 0:
        raise ValueError("CCA needs s > 0")
    terms = []
    for c, sign in ((c_pos, 1.0), (c_neg, -1.0)):
        lp = sequence_logprob(policy, tokens, c)
        with ad.no_grad():
            lr = sequence_logprob(ref, tokens, c).value
        r = ad.mul(ad.sub(lp, lr), sign / s)
        terms.append(ad.mean(ad.mul(ad.log_sigmoid(r), -1.0)))
    return terms[0], terms[1]


def cca_loss(policy, ref, tokens, c_pos, c_neg, s=1.0):
    pos, neg = cca_loss_terms(policy, ref, tokens, c_pos, c_neg, s)
    return ad.add(pos, neg)


def implicit_reward(policy, ref, tokens, c, s=1.0) -> np.ndarray:
    with ad.no_grad():
        lp = sequence_logprob(policy, tokens, c).value
        lr = sequence_logprob(ref, tokens, c).value
    return (lp - lr) / s


# -- exact distributions ----------------------------------------------------------------


@dataclass
class TiltedChain:
    steps: list  # steps[n]: (V^n, V) tilted rows
    sequence_probs: np.ndarray  # (V^N,)
    s: np.ndarray  # per-position scales


def tilted_target_chain(joint: ToyJoint, c: int, s) -> TiltedChain:
    """Per-step p(x_n|x_<n,c)^(1+s) p(x_n|x_<n)^(-s), renormalized.

    ``s`` is a scalar or one scale per position.
    """
    s_steps = np.broadcast_to(np.asarray(s, dtype=np.float64), (joint.length,))
    if np.any(s_steps < 0):
        raise ValueError("guidance scale must be >= 0")
    steps = []
    for n in range(joint.length):
        logits = (1.0 + s_steps[n]) * np.log(joint.cond[n][c]) - s_steps[n] * np.log(joint.uncond[n])
        steps.append(np.exp(logits - logsumexp(logits, axis=-1, keepdims=True)))
    seqs = all_sequences(joint.vocab, joint.length)
    logp = np.zeros(seqs.shape[0])
    for n, rows in enumerate(steps):
        logp += np.log(rows[prefix_index(seqs, n, joint.vocab), seqs[:, n]])
    return TiltedChain(steps, np.exp(logp), s_steps.copy())


def _enumerate(logit_fn, vocab, length, chunk=1 << 15):
    seqs = all_sequences(vocab, length)
    out = np.empty(seqs.shape[0])
    for lo in range(0, seqs.shape[0], chunk):
        part = seqs[lo : lo + chunk]
        lp = np_log_softmax(logit_fn(part), axis=-1)
        out[lo : lo + chunk] = np.take_along_axis(lp, part[:, :, None], axis=-1)[..., 0].sum(axis=1)
    return np.exp(out)


def _beta_rows(beta, length):
    beta = np.asarray(beta, dtype=np.float64)
    return np.broadcast_to(beta, (length,)) if beta.ndim <= 1 else beta


def exact_model_distribution(net, c, beta=1.0) -> np.ndarray:
    """Sequence distribution of guidance-free sampling; ``beta`` is a float or (N,) schedule."""
    betas = _beta_rows(beta, net.length)

    def logits(part):
        with ad.no_grad():
            return net(part, np.full(part.shape[0], c), np.broadcast_to(betas, (part.shape[0], net.length))).value

    return _enumerate(logits, net.vocab, net.length)


def cfg_model_distribution(cond_net, c, s, uncond_net=None) -> np.ndarray:
    """Sequence distribution of CFG sampling with per-step logits (1+s) l_c - s l_u."""
    uncond_net = cond_net if uncond_net is None else uncond_net
    s_rows = np.broadcast_to(np.asarray(s, dtype=np.float64), (cond_net.length,))

    def logits(part):
        b = part.shape[0]
        with ad.no_grad():
            l_c = cond_net(part, np.full(b, c), 1.0).value
            l_u = uncond_net(part, np.full(b, NULL_CLASS), 1.0).value
        return cfg_logit_combine(l_c, l_u, s_rows[None, :, None])

    return _enumerate(logits, cond_net.vocab, cond_net.length)


def sample_ar(net, c, schedule: BetaSchedule, prng: Prng, n: int = 1, mode="gft"):
    """Ancestral sampling with per-step beta; one net call per step (two under CFG)."""
    length = net.length
    betas = schedule.betas() if schedule.kind != "constant" else np.full(length, schedule.beta0)
    if betas.shape[0] != length:
        raise ValueError("schedule length must equal N")
    tokens = np.zeros((n, length), dtype=np.int64)
    cs = np.full(n, c)
    for pos in range(length):
        with ad.no_grad():
            if mode == "gft":
                logits = net(tokens, cs, np.full((n, length), betas[pos])).value[:, pos]
            elif mode == "cfg":
                s = 1.0 / betas[pos] - 1.0
                l_c = net(tokens, cs, 1.0).value[:, pos]
                l_u = net(tokens, np.full(n, NULL_CLASS), 1.0).value[:, pos]
                logits = cfg_logit_combine(l_c, l_u, s)
            else:
                raise ValueError(f"unknown sampling mode {mode!r}")
        probs = np.exp(np_log_softmax(logits, axis=-1))
        tokens[:, pos] = prng.categorical(probs)
    return tokens


def sequence_ids(tokens, vocab):
    return prefix_index(tokens, np.asarray(tokens).shape[1], vocab)
