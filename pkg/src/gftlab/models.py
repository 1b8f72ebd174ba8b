"""Toy networks conditioned on class and pseudo-temperature beta.

Classes are integer ids ``0..C-1``; :data:`NULL_CLASS` (``-1``) is the null
condition and maps to the last row of the class table.  Every network
evaluates the unconditional model as ``forward(..., NULL_CLASS, beta=1)``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .prng import Prng

NULL_CLASS = -1


def fourier_embed(v, num_pairs: int) -> np.ndarray:
    """[sin(w_0 v), cos(w_0 v), sin(w_1 v), ...] with w_k = 2 pi 2^k."""
    v = np.asarray(v, dtype=np.float64)
    freqs = 2.0 * np.pi * 2.0 ** np.arange(num_pairs)
    ang = v[..., None] * freqs
    out = np.empty(v.shape + (2 * num_pairs,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _embed_unit_interval(v, num_pairs):
    # The ladder has period 1, so 0 and 1 would collide; halve the input.
    return fourier_embed(0.5 * np.asarray(v, dtype=np.float64), num_pairs)


def class_rows(c, num_classes: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64)
    if np.any((c < NULL_CLASS) | (c >= num_classes)):
        raise ValueError(f"unknown class id in {np.unique(c)}; valid ids are 0..{num_classes - 1} or {NULL_CLASS}")
    return np.where(c == NULL_CLASS, num_classes, c)


class Module:
    """Flat, ordered parameter dictionary plus helpers."""

    kind = "module"

    def __init__(self):
        self.params: dict[str, ad.Node] = {}

    def _add(self, name, value):
        self.params[name] = ad.parameter(value)
        return self.params[name]

    def _linear(self, name, fan_in, fan_out, prng: Prng, zero=False):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = prng.normal((fan_in, fan_out)) / np.sqrt(fan_in)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(fan_out))

    def _apply(self, name, x):
        return ad.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def config(self) -> dict:
        raise NotImplementedError

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def state_arrays(self) -> dict:
        return {k: p.value for k, p in self.params.items()}

    def load_arrays(self, arrays: dict):
        if set(arrays) != set(self.params):
            raise ValueError("parameter names do not match the network")
        for k, v in arrays.items():
            if v.shape != self.params[k].value.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].value.shape}")
        for k, v in arrays.items():
            self.params[k].value = np.array(v, dtype=np.float64)


def _beta_column(beta, batch):
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (batch,))
    if np.any((beta <= 0.0) | (beta > 1.0)):
        raise ValueError("beta must lie in (0, 1]")
    return beta


class NoisePredictor(Module):
    """MLP noise predictor eps(x_t | t, c, beta).

    The trunk sees ``concat(x_t, t_emb + beta_emb + c_emb)``.  The last
    affine layer of the beta pathway starts at zero.
    """

    kind = "noise_predictor"

    def __init__(self, num_classes=3, dim=2, hidden=(128, 128, 128), emb_dim=128,
                 fourier_pairs=4, beta_hidden=64, seed=0):
        super().__init__()
        self.num_classes = num_classes
        self.dim = dim
        self.hidden = tuple(hidden)
        self.emb_dim = emb_dim
        self.fourier_pairs = fourier_pairs
        self.beta_hidden = beta_hidden
        self.seed = seed
        prng = Prng(seed).fork("init", self.kind)
        f2 = 2 * fourier_pairs
        self._linear("t_mlp.0", f2, emb_dim, prng)
        self._linear("t_mlp.1", emb_dim, emb_dim, prng)
        self._linear("beta_mlp.0", f2, beta_hidden, prng)
        self._linear("beta_mlp.1", beta_hidden, emb_dim, prng, zero=True)
        self._add("class_table", prng.normal((num_classes + 1, emb_dim)))
        width = dim + emb_dim
        for i, h in enumerate(self.hidden):
            self._linear(f"trunk.{i}", width, h, prng)
            width = h
        self._linear("out", width, dim, prng)

    def config(self):
        return {"kind": self.kind, "num_classes": self.num_classes, "dim": self.dim,
                "hidden": list(self.hidden), "emb_dim": self.emb_dim,
                "fourier_pairs": self.fourier_pairs, "beta_hidden": self.beta_hidden, "seed": self.seed}

    def beta_embedding(self, beta_features):
        h = ad.silu(self._apply("beta_mlp.0", beta_features))
        return self._apply("beta_mlp.1", h)

    def forward(self, x_t, t, c, beta=1.0) -> ad.Node:
        ad.record_forward()
        x_t = ad.as_node(x_t)
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        beta = _beta_column(beta, b)
        rows = class_rows(np.broadcast_to(c, (b,)), self.num_classes)
        t_emb = self._apply("t_mlp.1", ad.silu(self._apply("t_mlp.0", _embed_unit_interval(t, self.fourier_pairs))))
        beta_emb = self.beta_embedding(_embed_unit_interval(beta, self.fourier_pairs))
        cond = t_emb + beta_emb + ad.take_rows(self.params["class_table"], rows)
        h = ad.concat([x_t, cond], axis=-1)
        for i in range(len(self.hidden)):
            h = ad.silu(self._apply(f"trunk.{i}", h))
        return self._apply("out", h)

    __call__ = forward


class ARLogitNet(Module):
    """Next-token logits for every position of a length-N sequence at once.

    Position ``n`` sees the concatenated embeddings of tokens ``0..n-1``
    (later slots zeroed), plus ``pos_emb[n] + c_emb + beta_emb`` appended.
    """

    kind = "ar_logit_net"

    def __init__(self, vocab=4, length=3, num_classes=2, hidden=(128, 128), emb_dim=32,
                 fourier_pairs=4, beta_hidden=64, seed=0):
        super().__init__()
        self.vocab = vocab
        self.length = length
        self.num_classes = num_classes
        self.hidden = tuple(hidden)
        self.emb_dim = emb_dim
        self.fourier_pairs = fourier_pairs
        self.beta_hidden = beta_hidden
        self.seed = seed
        prng = Prng(seed).fork("init", self.kind)
        self._add("token_table", prng.normal((vocab, emb_dim)))
        self._add("slot_table", prng.normal((max(length - 1, 1), emb_dim)))
        self._add("pos_table", prng.normal((length, emb_dim)))
        self._add("class_table", prng.normal((num_classes + 1, emb_dim)))
        self._linear("beta_mlp.0", 2 * fourier_pairs, beta_hidden, prng)
        self._linear("beta_mlp.1", beta_hidden, emb_dim, prng, zero=True)
        width = (length - 1) * emb_dim + emb_dim
        for i, h in enumerate(self.hidden):
            self._linear(f"trunk.{i}", width, h, prng)
            width = h
        self._linear("out", width, vocab, prng)
        mask = np.zeros((length, max(length - 1, 0), emb_dim))
        for n in range(length):
            mask[n, :n] = 1.0
        self._prefix_mask = mask.reshape(length, -1)

    def config(self):
        return {"kind": self.kind, "vocab": self.vocab, "length": self.length,
                "num_classes": self.num_classes, "hidden": list(self.hidden), "emb_dim": self.emb_dim,
                "fourier_pairs": self.fourier_pairs, "beta_hidden": self.beta_hidden, "seed": self.seed}

    def forward(self, tokens, c, beta=1.0) -> ad.Node:
        """Logits of shape (B, N, V); row n depends only on tokens[:, :n].

        ``beta`` broadcasts to (B,) or (B, N).
        """
        ad.record_forward()
        tokens = np.asarray(tokens, dtype=np.int64)
        b, n_len, e = tokens.shape[0], self.length, self.emb_dim
        if tokens.shape[1] < n_len - 1:
            raise ValueError("token array shorter than N - 1")
        if np.any((tokens < 0) | (tokens >= self.vocab)):
            raise ValueError("token id out of range")
        beta = np.asarray(beta, dtype=np.float64)
        beta = np.broadcast_to(beta if beta.ndim == 2 else np.broadcast_to(beta, (b,))[:, None], (b, n_len))
        if np.any((beta <= 0.0) | (beta > 1.0)):
            raise ValueError("beta must lie in (0, 1]")
        rows = class_rows(np.broadcast_to(c, (b,)), self.num_classes)
        h1 = ad.silu(self._apply("beta_mlp.0", _embed_unit_interval(beta, self.fourier_pairs)))
        beta_emb = self._apply("beta_mlp.1", h1)  # (B, N, E)
        cls = ad.reshape(ad.take_rows(self.params["class_table"], rows), (b, 1, e))
        cond = beta_emb + cls + self.params["pos_table"]
        if n_len > 1:
            tok = ad.take_rows(self.params["token_table"], tokens[:, : n_len - 1]) + self.params["slot_table"]
            tok = ad.reshape(tok, (b, 1, (n_len - 1) * e))
            prefix = tok * self._prefix_mask
            h = ad.concat([prefix, cond], axis=-1)
        else:
            h = cond
        for i in range(len(self.hidden)):
            h = ad.silu(self._apply(f"trunk.{i}", h))
        return self._apply("out", h)

    __call__ = forward


def context_index(tokens, n, vocab):
    """Dense index of the prefix tokens[:, :n] among all prefixes of all lengths."""
    tokens = np.asarray(tokens, dtype=np.int64)
    offset = (vocab**n - 1) // (vocab - 1) if vocab > 1 else n
    idx = np.zeros(tokens.shape[0], dtype=np.int64)
    for j in range(n):
        idx = idx * vocab + tokens[:, j]
    return offset + idx


class TabularLogits(Module):
    """One free logit vector per (class-or-null, prefix); ignores beta."""

    kind = "tabular_logits"

    def __init__(self, vocab=4, length=3, num_classes=2, init=None):
        super().__init__()
        self.vocab = vocab
        self.length = length
        self.num_classes = num_classes
        n_ctx = sum(vocab**n for n in range(length))
        table = np.zeros((num_classes + 1, n_ctx, vocab)) if init is None else np.array(init, dtype=np.float64)
        self._add("table", table)

    def config(self):
        return {"kind": self.kind, "vocab": self.vocab, "length": self.length, "num_classes": self.num_classes}

    def forward(self, tokens, c, beta=1.0) -> ad.Node:
        ad.record_forward()
        tokens = np.asarray(tokens, dtype=np.int64)
        b = tokens.shape[0]
        rows = class_rows(np.broadcast_to(c, (b,)), self.num_classes)
        n_ctx = self.params["table"].shape[1]
        flat = ad.reshape(self.params["table"], ((self.num_classes + 1) * n_ctx, self.vocab))
        idx = np.stack([rows * n_ctx + context_index(tokens, n, self.vocab) for n in range(self.length)], axis=1)
        return ad.take_rows(flat, idx)

    __call__ = forward


class ExactTableNet(Module):
    """Oracle logits wired to a ToyJoint.

    With ``guided=True`` the output for class c is the guidance-free optimum
    ``(1/beta) log p(x_n|x_<n,c) - (1/beta - 1) log p(x_n|x_<n)``; otherwise
    beta is ignored and the exact conditional log-table is returned.
    """

    kind = "exact_table"

    def __init__(self, joint, guided=True):
        super().__init__()
        self.joint = joint
        self.guided = guided
        self.vocab, self.length, self.num_classes = joint.vocab, joint.length, joint.num_classes

    def config(self):
        return {"kind": self.kind, "guided": self.guided, "joint": self.joint.config()}

    def forward(self, tokens, c, beta=1.0) -> ad.Node:
        ad.record_forward()
        tokens = np.asarray(tokens, dtype=np.int64)
        b = tokens.shape[0]
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
        beta = np.asarray(beta, dtype=np.float64)
        beta = np.broadcast_to(beta if beta.ndim == 2 else np.broadcast_to(beta, (b,))[:, None], (b, self.length))
        out = np.empty((b, self.length, self.vocab))
        for n in range(self.length):
            lc = self.joint.log_cond_rows(tokens, n, np.where(c == NULL_CLASS, 0, c))
            lu = self.joint.log_uncond_rows(tokens, n)
            if self.guided:
                inv = 1.0 / beta[:, n : n + 1]
                row = inv * lc - (inv - 1.0) * lu
            else:
                row = lc
            out[:, n] = np.where((c == NULL_CLASS)[:, None], lu, row)
        return ad.constant(out)

    __call__ = forward


class OracleDenoiser(Module):
    """Noise predictor wired to the analytic optimum of a mixture."""

    kind = "oracle_denoiser"

    def __init__(self, mixture):
        super().__init__()
        self.mixture = mixture
        self.num_classes = mixture.num_classes
        self.dim = 2

    def config(self):
        return {"kind": self.kind, "mixture": self.mixture.config()}

    def forward(self, x_t, t, c, beta=1.0) -> ad.Node:
        from .diffusion import theorem1_target

        ad.record_forward()
        x = ad.as_node(x_t).value
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
        beta = _beta_column(beta, b)
        class_rows(c, self.num_classes)
        return ad.constant(theorem1_target(self.mixture, x, t, c, beta))

    __call__ = forward
