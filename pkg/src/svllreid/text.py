"""Prompt assembly, learnable per-identity tokens, token masking and the text encoder.

A prompt reads ``<sos> a photo of a <S1> ... <SM> person <eos>``; the ``<Sm>``
positions hold rows of the ``PromptBank`` for the prompt's identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Module, Transformer, normal
from .tensor import Parameter, Tensor

SOS, EOS, MASK = "<sos>", "<eos>", "<mask>"
TEMPLATES = {
    "person": ("a photo of a", "person"),
    "vehicle": ("a photo of a", "vehicle"),
}


class Vocabulary:
    """Bijective token <-> id map with reserved ids listed before any word."""

    def __init__(self, n_slots, words=()):
        reserved = [SOS, EOS, MASK] + [f"<S{m + 1}>" for m in range(n_slots)]
        self.n_slots = n_slots
        self.n_reserved = len(reserved)
        self._tokens = list(reserved)
        for w in words:
            if w not in self._tokens:
                self._tokens.append(w)
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    @classmethod
    def for_templates(cls, n_slots):
        words = []
        for t in TEMPLATES.values():
            for w in " ".join(t).split():
                if w not in words:
                    words.append(w)
        return cls(n_slots, words)

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token):
        return self._ids[token]

    def token(self, idx):
        return self._tokens[idx]

    def slot_id(self, m):
        return self._ids[f"<S{m + 1}>"]

    def is_reserved(self, idx):
        return idx < self.n_reserved

    def dumps(self):
        return "".join(f"{t}\t{i}\n" for i, t in enumerate(self._tokens))

    @classmethod
    def loads(cls, text):
        rows = [line.split("\t") for line in text.splitlines() if line]
        toks = [t for t, _ in sorted(rows, key=lambda r: int(r[1]))]
        if [int(i) for _, i in sorted(rows, key=lambda r: int(r[1]))] != list(range(len(toks))):
            raise ValueError("vocabulary ids are not a contiguous 0..n-1 range")
        n_slots = sum(1 for t in toks if t.startswith("<S") and t.endswith(">"))
        vocab = cls(n_slots, [t for t in toks[3 + n_slots:]])
        if vocab._tokens != toks:
            raise ValueError("vocabulary file does not follow the reserved-id layout")
        return vocab

    def template_ids(self, kind="person"):
        """Token ids of the full template with slot markers, plus slot positions."""
        head, tail = TEMPLATES[kind]
        ids = [self.id(SOS)] + [self.id(w) for w in head.split()]
        start = len(ids)
        ids += [self.slot_id(m) for m in range(self.n_slots)]
        ids += [self.id(w) for w in tail.split()] + [self.id(EOS)]
        return ids, list(range(start, start + self.n_slots))


class PromptBank(Module):
    """``N x M x d_word`` learnable token vectors, one set per identity."""

    def __init__(self, n_identities, n_slots, d_word, rng, std=0.02):
        if n_slots < 1:
            raise ValueError("need at least one learnable token per identity")
        self.tokens = Parameter(normal(rng, (n_identities, n_slots, d_word), std))

    @property
    def n_identities(self):
        return self.tokens.shape[0]

    @property
    def n_slots(self):
        return self.tokens.shape[1]


@dataclass
class EmbeddedPrompt:
    tokens: Tensor            # (length, d_word)
    identity: int
    slot_positions: list
    mask: tuple = field(default_factory=tuple)

    def __len__(self):
        return self.tokens.shape[0]


class TextEncoder(Module):
    """Tiny text transformer: frozen word table, learned positions, EOS pooling."""

    def __init__(self, vocab_size, d_word=32, d_embed=32, layers=2, heads=2,
                 context=16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.context = context
        self.token_embedding = Parameter(normal(rng, (vocab_size, d_word), 0.02))
        self.mask_embedding = Parameter(normal(rng, (d_word,), 0.02), trainable=False)
        self.positional = Parameter(normal(rng, (context, d_word), 0.01))
        self.transformer = Transformer(d_word, layers, heads, rng)
        self.ln_final = LayerNorm(d_word)
        self.proj = Parameter(normal(rng, (d_word, d_embed), d_word ** -0.5))

    def __call__(self, seq):
        """Encode ``(n, length, d_word)`` prompt embeddings into unit rows ``(n, d_e)``."""
        n, length, _ = seq.shape
        if length > self.context:
            raise ValueError(f"prompt length {length} exceeds context {self.context}")
        x = seq + self.positional[:length]
        x = self.ln_final(self.transformer(x))
        eos = x[:, length - 1, :]
        return T.l2_normalize(eos @ self.proj)


class PromptBuilder:
    """Splices bank rows into the fixed template and applies slot masks in batch."""

    def __init__(self, vocab, encoder, kind="person"):
        self.vocab = vocab
        self.encoder = encoder
        self.kind = kind
        ids, self.slot_positions = vocab.template_ids(kind)
        self.template_ids = np.asarray(ids)
        s0 = self.slot_positions[0]
        s1 = self.slot_positions[-1] + 1
        self._head = self.template_ids[:s0]
        self._tail = self.template_ids[s1:]

    @property
    def length(self):
        return len(self.template_ids)

    def batch(self, bank, identities, keep=None):
        """Prompt embeddings ``(n, length, d_word)`` for ``identities``.

        ``keep`` is an optional ``(n, M)`` 0/1 array; zero entries are replaced
        by the fixed mask embedding.
        """
        identities = np.asarray(identities, dtype=np.int64)
        if identities.size and (identities.min() < 0 or identities.max() >= bank.n_identities):
            raise IndexError(f"identity outside 0..{bank.n_identities - 1}")
        n = len(identities)
        table = self.encoder.token_embedding.data
        d = table.shape[1]
        head = np.broadcast_to(table[self._head], (n, len(self._head), d))
        tail = np.broadcast_to(table[self._tail], (n, len(self._tail), d))
        slots = bank.tokens[identities]
        if keep is not None:
            keep = np.asarray(keep, dtype=table.dtype)[:, :, None]
            fill = (1.0 - keep) * self.encoder.mask_embedding.data
            slots = slots * keep + fill
        return T.concat([Tensor(head, dtype=table.dtype), slots,
                         Tensor(tail, dtype=table.dtype)], axis=1)


def assemble_prompt(identity, bank, builder):
    seq = builder.batch(bank, [identity])
    return EmbeddedPrompt(seq.reshape(seq.shape[1:]), int(identity),
                          list(builder.slot_positions))


def mask_count(alpha, n_slots):
    """``floor(alpha * M)`` computed exactly on the decimal value of ``alpha``."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return math.floor(Fraction(repr(float(alpha))) * n_slots)


def sample_keep(n, n_slots, alpha, rng):
    """``(n, M)`` keep matrix with exactly ``floor(alpha*M)`` zeros per row."""
    k = mask_count(alpha, n_slots)
    keep = np.ones((n, n_slots))
    if k:
        for i in range(n):
            keep[i, rng.choice(n_slots, size=k, replace=False)] = 0.0
    return keep


def mask_prompt(y, alpha, rng, mask_embedding):
    """Replace ``floor(alpha*M)`` random slot vectors of ``y`` by the mask embedding."""
    M = len(y.slot_positions)
    k = mask_count(alpha, M)
    if k == 0:
        return EmbeddedPrompt(y.tokens, y.identity, list(y.slot_positions), ())
    chosen = tuple(sorted(int(c) for c in rng.choice(M, size=k, replace=False)))
    keep = np.ones((len(y), 1), dtype=y.tokens.dtype)
    for c in chosen:
        keep[y.slot_positions[c]] = 0.0
    mask_emb = mask_embedding.data if isinstance(mask_embedding, Tensor) else mask_embedding
    tokens = y.tokens * keep + (1.0 - keep) * np.asarray(mask_emb, dtype=y.tokens.dtype)
    return EmbeddedPrompt(tokens, y.identity, list(y.slot_positions), chosen)


def encode_text(prompts, encoder):
    """Unit-norm text embeddings ``(n, d_e)`` for one prompt or a list of them."""
    if isinstance(prompts, EmbeddedPrompt):
        prompts = [prompts]
    seq = T.concat([p.tokens.reshape(1, *p.tokens.shape) for p in prompts], axis=0)
    return encoder(seq)
