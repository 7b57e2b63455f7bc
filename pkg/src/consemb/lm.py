"""Tiny decoder-only language model and the instruction fine-tuning objectives."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError
from .grammar import detokenize, tokenize, vocabulary
from .noise import NoiseSpec, inject_noise

PAD, BOS, SEP, EOS, UNK = "<pad>", "<bos>", "<sep>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, SEP, EOS, UNK)

SUMMARY_INSTRUCTION = "summarize the clinical report:"
PLAN_INSTRUCTION = "suggest the radiotherapy plan:"


class Vocab:
    def __init__(self, tokens=None):
        words = list(tokens) if tokens is not None else vocabulary()
        words = [w for w in words if w not in SPECIALS]
        self.itos = list(SPECIALS) + words
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @property
    def pad_id(self):
        return self.stoi[PAD]

    @property
    def eos_id(self):
        return self.stoi[EOS]

    def encode(self, text: str) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokenize(text)]

    def decode(self, ids) -> str:
        toks = [self.itos[i] for i in ids if self.itos[i] not in SPECIALS]
        return detokenize(toks)

    def words(self):
        return self.itos[len(SPECIALS):]


# -- model ------------------------------------------------------------------

@dataclass
class LMConfig:
    vocab_size: int
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    context_len: int = 256
    mlp_ratio: int = 4
    lora_rank: int = 0


class LoRALinear(nn.Module):
    """Frozen base projection plus a trainable low-rank update."""

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features) / math.sqrt(base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x):
        return self.base(x) + (x @ self.lora_a.T) @ self.lora_b.T


class CausalSelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"embed_dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=-1)
        q, k, v = (t.view(B, L, self.heads, C // self.heads).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // self.heads)
        causal = torch.ones(L, L, dtype=torch.bool).triu(1)
        att = att.masked_fill(causal, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, C)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = CausalSelfAttention(cfg.embed_dim, cfg.heads)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = nn.Sequential(nn.Linear(cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim), nn.GELU(),
                                 nn.Linear(cfg.mlp_ratio * cfg.embed_dim, cfg.embed_dim))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TinyLM(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.pos_emb = nn.Embedding(cfg.context_len, cfg.embed_dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.vocab_size, bias=False)
        self.apply(self._init)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        if cfg.lora_rank:
            self._add_lora(cfg.lora_rank)

    @staticmethod
    def _init(m):
        # token embeddings keep the unit-variance default so that embedding
        # noise at small L*C stays a perturbation rather than swamping the signal
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
        if isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.zeros_(m.bias)

    def _add_lora(self, rank):
        for p in self.parameters():
            p.requires_grad_(False)
        for blk in self.blocks:
            blk.attn.qkv = LoRALinear(blk.attn.qkv, rank)
            blk.attn.proj = LoRALinear(blk.attn.proj, rank)

    @property
    def embed_dim(self):
        return self.cfg.embed_dim

    def embed(self, ids):
        return self.tok_emb(ids)

    def forward_embeds(self, emb, return_hidden=False):
        L = emb.shape[1]
        if L > self.cfg.context_len:
            raise InvalidInputError(f"sequence length {L} exceeds context {self.cfg.context_len}")
        x = emb + self.pos_emb(torch.arange(L))
        for blk in self.blocks:
            x = blk(x)
        h = self.ln_f(x)
        logits = self.head(h)
        return (logits, h) if return_hidden else logits

    def forward(self, ids=None, inputs_embeds=None, return_hidden=False):
        emb = self.embed(ids) if inputs_embeds is None else inputs_embeds
        return self.forward_embeds(emb, return_hidden)


# -- batching ---------------------------------------------------------------

@dataclass
class InstructionSample:
    instruction: str
    input: str
    target: str


@dataclass
class Batch:
    """Right-padded token batch.

    ``labels[b, t]`` is the token expected after position t; only positions
    with ``loss_mask`` set (target tokens and the end token) enter the loss.
    """
    ids: torch.Tensor
    labels: torch.Tensor
    loss_mask: torch.Tensor
    pad_mask: torch.Tensor

    def __len__(self):
        return self.ids.shape[0]


def encode_sample(sample: InstructionSample, vocab: Vocab, context_len: int):
    prompt = vocab.encode(sample.instruction) + vocab.encode(sample.input)
    target = vocab.encode(sample.target) + [vocab.eos_id]
    budget = context_len - len(target) - 2
    if budget < len(vocab.encode(sample.instruction)):
        raise InvalidInputError("target alone exceeds the context length")
    if len(prompt) > budget:
        warnings.warn(f"input truncated from {len(prompt)} to {budget} tokens (head kept)")
        prompt = prompt[:budget]
    prefix = [vocab.stoi[BOS]] + prompt + [vocab.stoi[SEP]]
    return prefix, target


def collate(samples, vocab: Vocab, context_len=256) -> Batch:
    if not samples:
        raise InvalidInputError("empty batch")
    seqs, starts = [], []
    for s in samples:
        if not tokenize(s.target):
            raise InvalidInputError("empty target text")
        prefix, target = encode_sample(s, vocab, context_len)
        seqs.append(prefix + target)
        starts.append(len(prefix))
    L = max(len(s) for s in seqs)
    B = len(seqs)
    ids = torch.full((B, L), vocab.pad_id, dtype=torch.long)
    labels = torch.full((B, L), vocab.pad_id, dtype=torch.long)
    loss_mask = torch.zeros(B, L, dtype=torch.bool)
    pad_mask = torch.ones(B, L, dtype=torch.bool)
    for b, (seq, start) in enumerate(zip(seqs, starts)):
        n = len(seq)
        ids[b, :n] = torch.tensor(seq)
        labels[b, : n - 1] = torch.tensor(seq[1:])
        # position t predicts seq[t+1]; target tokens start at index `start`
        loss_mask[b, start - 1: n - 1] = True
        pad_mask[b, :n] = False
    return Batch(ids, labels, loss_mask, pad_mask)


# -- objectives -------------------------------------------------------------

@dataclass(frozen=True)
class ConsistencySpec:
    lam: float = 1.0
    norm: str = "l2"
    relaxation: str = "soft"

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise InvalidInputError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.norm not in ("l1", "l2"):
            raise InvalidInputError(f"unknown norm {self.norm!r}")
        if self.relaxation not in ("soft", "hard"):
            raise InvalidInputError(f"unknown relaxation {self.relaxation!r}")


def _ce(logits, batch: Batch):
    if not batch.loss_mask.any():
        raise InvalidInputError("batch has no target tokens")
    return F.cross_entropy(logits[batch.loss_mask], batch.labels[batch.loss_mask])


def loss_vanilla(model: TinyLM, batch: Batch):
    return _ce(model.forward_embeds(model.embed(batch.ids)), batch)


def loss_neftune(model: TinyLM, batch: Batch, spec: NoiseSpec, generator=None):
    noisy = inject_noise(model.embed(batch.ids), spec, batch.pad_mask, generator)
    return _ce(model.forward_embeds(noisy), batch)


def ceftune_terms(model: TinyLM, batch: Batch, nspec: NoiseSpec, cspec: ConsistencySpec,
                  encoder, generator=None, teacher: TinyLM | None = None):
    """Return ``(noisy cross-entropy, consistency term)``.

    The clean branch runs ``teacher`` (default: ``model`` itself) under
    ``no_grad``, which is the stop-gradient copy of the parameters.
    """
    if encoder.vocab_size != model.cfg.vocab_size:
        raise ConfigurationError(
            f"encoder vocabulary {encoder.vocab_size} != model vocabulary {model.cfg.vocab_size}")
    noisy = inject_noise(model.embed(batch.ids), spec=nspec, pad_mask=batch.pad_mask,
                         generator=generator)
    logits = model.forward_embeds(noisy)
    ce = _ce(logits, batch)
    teacher = model if teacher is None else teacher
    with torch.no_grad():
        clean_logits = teacher(batch.ids)
    mask = batch.loss_mask
    if cspec.relaxation == "soft":
        s_noisy = encoder.encode_soft(logits.softmax(-1), mask)
        s_clean = encoder.encode_soft(clean_logits.softmax(-1), mask)
        reg = encoder.distance_t(s_noisy, s_clean, cspec.norm).mean()
    else:
        noisy_ids = logits.detach().argmax(-1)
        clean_ids = clean_logits.argmax(-1)
        d = []
        for b in range(len(batch)):
            m = mask[b]
            a = encoder.encode_ids(noisy_ids[b][m].tolist())
            c = encoder.encode_ids(clean_ids[b][m].tolist())
            d.append(encoder.distance_t(a, c, cspec.norm))
        reg = torch.stack(d).mean().detach().to(ce.dtype)
    return ce, reg


def loss_ceftune(model: TinyLM, batch: Batch, nspec: NoiseSpec, cspec: ConsistencySpec,
                 encoder, generator=None, teacher: TinyLM | None = None):
    if cspec.lam == 0:
        return loss_neftune(model, batch, nspec, generator)
    ce, reg = ceftune_terms(model, batch, nspec, cspec, encoder, generator, teacher)
    return ce + cspec.lam * reg


# -- decoding ---------------------------------------------------------------

def prompt_ids(vocab: Vocab, prompt: str) -> list[int]:
    return [vocab.stoi[BOS]] + vocab.encode(prompt) + [vocab.stoi[SEP]]


@torch.no_grad()
def generate(model: TinyLM, vocab: Vocab, prompt: str, max_new_tokens: int = 64) -> str:
    """Greedy decoding until the end token or ``max_new_tokens``."""
    ids = prompt_ids(vocab, prompt)
    ctx = model.cfg.context_len
    if len(ids) > ctx:
        raise InvalidInputError(f"prompt has {len(ids)} tokens, context is {ctx}")
    out = []
    was_training = model.training
    model.eval()
    try:
        for _ in range(max_new_tokens):
            if len(ids) >= ctx:
                break
            logits = model(torch.tensor([ids]))[0, -1]
            nxt = int(logits.argmax())
            if nxt == vocab.eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
    finally:
        model.train(was_training)
    return vocab.decode(out)


def instruction_for(role: str) -> str:
    return {"summary": SUMMARY_INSTRUCTION, "plan": PLAN_INSTRUCTION}[role]


def make_prompt(role: str, text: str) -> str:
    return f"{instruction_for(role)} {text}"
