"""Expert training loop and LM checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .encoder import SentenceEncoder
from .errors import ConfigurationError, ValidationError
from .hashing import config_hash, state_hash
from .lm import (ConsistencySpec, InstructionSample, LMConfig, TinyLM, Vocab, collate,
                 generate, loss_ceftune, loss_neftune, loss_vanilla, make_prompt,
                 PLAN_INSTRUCTION, SUMMARY_INSTRUCTION)
from .noise import NoiseSpec

log = logging.getLogger(__name__)

OBJECTIVES = ("vanilla", "neftune", "ceftune")
ROLES = ("summary", "plan", "unified")
CHECKPOINT_FORMAT = "consemb.lm/1"


@dataclass
class LMTrainConfig:
    role: str = "plan"
    objective: str = "vanilla"
    seed: int = 0
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    context_len: int = 256
    alpha: float = 5.0
    noise_distribution: str = "uniform"
    length_mode: str = "sequence"
    noise_seed: int | None = None   # defaults to ``seed``
    lam: float = 1.0
    consistency_norm: str = "l2"
    relaxation: str = "soft"
    encoder_mode: str = "bag_of_embeddings"
    encoder_dim: int = 64
    finetuning: str = "full"
    lora_rank: int = 4
    # plan expert input: ground-truth summaries, or meta["generated_summary"]
    plan_input: str = "ground_truth"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown role {self.role!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.finetuning not in ("full", "lora"):
            raise ConfigurationError(f"unknown finetuning mode {self.finetuning!r}")
        if self.plan_input not in ("ground_truth", "generated"):
            raise ConfigurationError(f"unknown plan input {self.plan_input!r}")

    def noise_spec(self) -> NoiseSpec:
        alpha = 0.0 if self.objective == "vanilla" else self.alpha
        seed = self.seed if self.noise_seed is None else self.noise_seed
        return NoiseSpec(alpha, self.noise_distribution, seed, self.length_mode)

    def consistency_spec(self) -> ConsistencySpec:
        return ConsistencySpec(self.lam, self.consistency_norm, self.relaxation)


@dataclass
class TrainedLM:
    model: TinyLM
    vocab: Vocab
    encoder: SentenceEncoder
    config: LMTrainConfig
    curve: list = field(default_factory=list)

    def generate(self, role: str, text: str, max_new_tokens: int = 64) -> str:
        return generate(self.model, self.vocab, make_prompt(role, text), max_new_tokens)

    @property
    def weights_hash(self) -> str:
        return state_hash(self.model.state_dict())


@dataclass
class CheckpointRef:
    path: Path
    config_hash: str
    weights_hash: str

    def load(self) -> TrainedLM:
        return load_lm(self.path)


def check_disjoint(train_cases, val_cases):
    overlap = {c.id for c in train_cases} & {c.id for c in val_cases}
    if overlap:
        raise ValidationError(f"train/val splits share case ids: {sorted(overlap)[:5]}")


def _plan_source(case, plan_input):
    if plan_input == "generated":
        gen = case.meta.get("generated_summary")
        if gen is None:
            raise ValidationError(f"case {case.id} has no generated summary")
        return gen
    return case.summary


def build_samples(cases, role: str, plan_input="ground_truth") -> list[InstructionSample]:
    out = []
    if role in ("summary", "unified"):
        out += [InstructionSample(SUMMARY_INSTRUCTION, c.report, c.summary) for c in cases]
    if role in ("plan", "unified"):
        out += [InstructionSample(PLAN_INSTRUCTION, _plan_source(c, plan_input), c.plan)
                for c in cases]
    return out


def build_encoder(vocab, cfg: LMTrainConfig, cases=()) -> SentenceEncoder:
    enc = SentenceEncoder(vocab, cfg.encoder_mode, cfg.encoder_dim, seed=cfg.seed)
    if cfg.encoder_mode == "trained_contrastive":
        from .grammar import TemplateGrammar
        grammar = TemplateGrammar()
        rng = np.random.default_rng([cfg.seed, 17])
        groups = [[grammar.render_report(c.fields, rng), grammar.render_report(c.fields, rng),
                   c.summary] for c in cases]
        enc.fit_contrastive(groups)
    return enc


def _objective_loss(model, batch, cfg, nspec, cspec, encoder, gen):
    if cfg.objective == "vanilla":
        return loss_vanilla(model, batch)
    if cfg.objective == "neftune":
        return loss_neftune(model, batch, nspec, gen)
    return loss_ceftune(model, batch, nspec, cspec, encoder, gen)


def fit_lm(train_cases, val_cases, cfg: LMTrainConfig) -> TrainedLM:
    check_disjoint(train_cases, val_cases)
    torch.manual_seed(cfg.seed)
    vocab = Vocab()
    lora = cfg.lora_rank if cfg.finetuning == "lora" else 0
    model = TinyLM(LMConfig(len(vocab), cfg.embed_dim, cfg.layers, cfg.heads, cfg.context_len,
                            lora_rank=lora))
    encoder = build_encoder(vocab, cfg, train_cases)
    samples = build_samples(train_cases, cfg.role, cfg.plan_input)
    val_samples = build_samples(val_cases, cfg.role, cfg.plan_input) if val_cases else []
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    nspec, cspec = cfg.noise_spec(), cfg.consistency_spec()
    gen = nspec.generator()
    order_rng = np.random.default_rng(cfg.seed)
    curve = []
    for epoch in range(cfg.epochs):
        model.train()
        perm = order_rng.permutation(len(samples))
        losses = []
        for i in range(0, len(perm), cfg.batch_size):
            batch = collate([samples[j] for j in perm[i:i + cfg.batch_size]], vocab, cfg.context_len)
            loss = _objective_loss(model, batch, cfg, nspec, cspec, encoder, gen)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if val_samples:
            row["val_loss"] = evaluate_loss(model, val_samples, vocab, cfg)
        curve.append(row)
        log.info("epoch %d %s", epoch + 1, row)
    model.eval()
    return TrainedLM(model, vocab, encoder, cfg, curve)


@torch.no_grad()
def evaluate_loss(model, samples, vocab, cfg) -> float:
    total, n = 0.0, 0
    for i in range(0, len(samples), 64):
        batch = collate(samples[i:i + 64], vocab, cfg.context_len)
        k = int(batch.loss_mask.sum())
        total += float(loss_vanilla(model, batch)) * k
        n += k
    return total / max(n, 1)


def save_lm(trained: TrainedLM, path) -> CheckpointRef:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(trained.config)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "model_config": asdict(trained.model.cfg),
        "vocab": trained.vocab.itos,
        "state_dict": trained.model.state_dict(),
        "encoder": trained.encoder.state(),
        "rng_state": torch.get_rng_state(),
        "curve": trained.curve,
        "weights_hash": trained.weights_hash,
    }
    torch.save(payload, path)
    path.with_suffix(".curve.json").write_text(json.dumps(
        {"config_hash": payload["config_hash"], "curve": trained.curve}, indent=2))
    return CheckpointRef(path, payload["config_hash"], payload["weights_hash"])


def load_lm(path) -> TrainedLM:
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not an LM checkpoint")
    vocab = Vocab(payload["vocab"])
    model = TinyLM(LMConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    encoder = SentenceEncoder.from_state(vocab, payload["encoder"])
    cfg = LMTrainConfig(**payload["config"])
    return TrainedLM(model, vocab, encoder, cfg, payload["curve"])


def train_expert(role, train_cases, val_cases, objective, config: LMTrainConfig | None = None,
                 out_dir=".") -> CheckpointRef:
    cfg = replace(config or LMTrainConfig(), role=role, objective=objective)
    trained = fit_lm(train_cases, val_cases, cfg)
    name = f"lm-{role}-{objective}-seed{cfg.seed}.pt"
    return save_lm(trained, Path(out_dir) / name)
