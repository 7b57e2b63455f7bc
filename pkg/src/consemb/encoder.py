"""Deterministic sentence encoder and the feature-space distance."""
from __future__ import annotations

import warnings
import zlib

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateInputWarning, InvalidInputError
from .grammar import tokenize

MODES = ("bag_of_embeddings", "trained_contrastive")


def distance(a, b, norm: str = "l2") -> float:
    """``1 - a.b / (|a| |b|)`` with either the l1 or the l2 norm.

    A zero vector makes the ratio undefined; the distance is then 1 and a
    :class:`DegenerateInputWarning` is emitted.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    ord_ = {"l1": 1, "l2": 2}.get(norm)
    if ord_ is None:
        raise InvalidInputError(f"unknown norm {norm!r}")
    na, nb = np.linalg.norm(a, ord_), np.linalg.norm(b, ord_)
    if na == 0 or nb == 0:
        warnings.warn("distance of a zero vector; defined as 1", DegenerateInputWarning)
        return 1.0
    return float(1.0 - (a @ b) / (na * nb))


def distance_t(a: torch.Tensor, b: torch.Tensor, norm: str = "l2") -> torch.Tensor:
    """Batched torch version of :func:`distance` over the last dimension."""
    p = {"l1": 1, "l2": 2}[norm]
    denom = a.norm(p=p, dim=-1) * b.norm(p=p, dim=-1)
    sim = (a * b).sum(-1) / denom.clamp_min(torch.finfo(a.dtype).tiny)
    return 1.0 - torch.where(denom > 0, sim, torch.zeros_like(sim))


def _token_row(token: str, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([zlib.crc32(token.encode()), seed])
    return rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim)


class SentenceEncoder:
    """Mean of token embeddings, optionally followed by a trained projection.

    Rows are derived from a hash of each token string, so the table does not
    depend on vocabulary order. Special tokens map to zero rows and are
    excluded from the mean.
    """

    def __init__(self, vocab, mode: str = "bag_of_embeddings", dim: int = 64, seed: int = 0):
        if mode not in MODES:
            raise InvalidInputError(f"unknown encoder mode {mode!r}")
        self.vocab = vocab
        self.mode = mode
        self.dim = dim
        self.seed = seed
        n_special = len(vocab.itos) - len(vocab.words())
        table = np.zeros((len(vocab), dim))
        for i, tok in enumerate(vocab.itos):
            if i >= n_special:
                table[i] = _token_row(tok, dim, seed)
        self.table = torch.tensor(table, dtype=torch.float64)
        self.valid = torch.zeros(len(vocab), dtype=torch.bool)
        self.valid[n_special:] = True
        self.proj = torch.eye(dim, dtype=torch.float64)

    @property
    def vocab_size(self):
        return len(self.vocab)

    def encode_ids(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(list(ids), dtype=torch.long)
        if len(ids):
            ids = ids[self.valid[ids]]
        if len(ids) == 0:
            warnings.warn("encoding empty text; returning the zero vector", DegenerateInputWarning)
            return torch.zeros(self.dim, dtype=torch.float64)
        return self.table[ids].mean(0) @ self.proj

    def encode(self, text: str) -> np.ndarray:
        ids = [self.vocab.stoi[t] for t in tokenize(text) if t in self.vocab.stoi]
        return self.encode_ids(ids).numpy().copy()

    def encode_soft(self, probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Expected-embedding bag for per-position token distributions.

        ``probs`` is B x T x V, ``mask`` is B x T. Probability mass on special
        tokens is dropped, matching the hard path where they are skipped.
        """
        table = (self.table * self.valid.unsqueeze(1)).to(probs.dtype)
        emb = probs @ table
        m = mask.to(probs.dtype).unsqueeze(-1)
        bag = (emb * m).sum(1) / m.sum(1).clamp_min(1.0)
        return bag @ self.proj.to(probs.dtype)

    distance = staticmethod(distance)
    distance_t = staticmethod(distance_t)

    def state(self) -> dict:
        return {"mode": self.mode, "dim": self.dim, "seed": self.seed,
                "table": self.table.clone(), "proj": self.proj.clone()}

    @classmethod
    def from_state(cls, vocab, state: dict) -> "SentenceEncoder":
        enc = cls(vocab, state["mode"], state["dim"], state["seed"])
        enc.table = state["table"].clone()
        enc.proj = state["proj"].clone()
        return enc

    def fit_contrastive(self, groups, steps: int = 200, lr: float = 1e-2, temperature: float = 0.1):
        """Train table and projection so texts of the same group embed together.

        ``groups`` is a list of lists of paraphrased texts; texts in one group
        are positives for each other (InfoNCE over the batch).
        """
        if self.mode != "trained_contrastive":
            raise InvalidInputError("fit_contrastive needs mode='trained_contrastive'")
        gen = torch.Generator().manual_seed(self.seed)
        table = self.table.clone().requires_grad_(True)
        proj = self.proj.clone().requires_grad_(True)
        opt = torch.optim.Adam([table, proj], lr=lr)
        enc = [[[self.vocab.stoi[t] for t in tokenize(x) if t in self.vocab.stoi] for x in g]
               for g in groups if len(g) >= 2]
        if len(enc) < 2:
            raise InvalidInputError("need at least two groups with two texts each")
        valid = self.valid.to(torch.float64).unsqueeze(1)

        def bag(ids):
            return (table * valid)[torch.tensor(ids)].mean(0) @ proj

        for _ in range(steps):
            idx = torch.randperm(len(enc), generator=gen)[:32].tolist()
            a = torch.stack([bag(enc[i][0]) for i in idx])
            b = torch.stack([bag(enc[i][1]) for i in idx])
            logits = F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T / temperature
            target = torch.arange(len(idx))
            loss = (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.table = table.detach()
        self.proj = proj.detach()
        return self
