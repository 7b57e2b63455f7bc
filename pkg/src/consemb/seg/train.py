"""Plan encoding through a frozen LM, segmentation objectives, training and inference."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call

from ..errors import ConfigurationError, InvalidInputError, ValidationError
from ..finetune import TrainedLM, load_lm
from ..hashing import config_hash
from ..noise import NoiseSpec, inject_noise
from ..synth import DEFAULT_PATCH, MaskTensor, VolumeTensor, coordinate_channels, crop_offsets
from .model import PromptBank, SegConfig, SegModel

log = logging.getLogger(__name__)

OBJECTIVES = ("default", "neseg", "ceseg")
CHECKPOINT_FORMAT = "consemb.seg/1"


# -- plan encoding ----------------------------------------------------------

@dataclass
class PlanTokens:
    ids: torch.Tensor       # B x L
    pad_mask: torch.Tensor  # B x L, True at padding


def tokenize_plans(vocab, plans) -> PlanTokens:
    enc = [vocab.encode(p) or [vocab.stoi["<unk>"]] for p in plans]
    L = max(len(e) for e in enc)
    ids = torch.full((len(enc), L), vocab.pad_id, dtype=torch.long)
    pad = torch.ones(len(enc), L, dtype=torch.bool)
    for b, e in enumerate(enc):
        ids[b, :len(e)] = torch.tensor(e)
        pad[b, :len(e)] = False
    return PlanTokens(ids, pad)


def frozen_params(lm) -> dict:
    return {k: v.detach() for k, v in lm.named_parameters()}


def encode_plan(lm, plan: PlanTokens, prompts: torch.Tensor, nspec: NoiseSpec | None = None,
                generator=None, pooling="mean"):
    """Prepend prompts to (optionally noised) plan embeddings and run the frozen LM.

    Returns B x 1 x C. The LM runs on detached copies of its parameters, so
    gradients reach only ``prompts`` (and whatever consumes the output).
    """
    params = frozen_params(lm)
    C = params["tok_emb.weight"].shape[1]
    if prompts.shape[-1] != C:
        raise ConfigurationError(f"prompt width {prompts.shape[-1]} != LM width {C}")
    emb = F.embedding(plan.ids, params["tok_emb.weight"])
    if nspec is not None:
        emb = inject_noise(emb, nspec, plan.pad_mask, generator)
    B = emb.shape[0]
    n = prompts.shape[0]
    x = torch.cat([prompts.to(emb.dtype).unsqueeze(0).expand(B, n, C), emb], dim=1)
    _, h = functional_call(lm, params, (), {"inputs_embeds": x, "return_hidden": True})
    keep = torch.cat([torch.ones(B, n, dtype=torch.bool), ~plan.pad_mask], dim=1)
    if pooling == "mean":
        w = keep.to(h.dtype).unsqueeze(-1)
        return ((h * w).sum(1) / w.sum(1)).unsqueeze(1)
    last = keep.long().cumsum(1).argmax(1)
    return h[torch.arange(B), last].unsqueeze(1)


# -- objectives -------------------------------------------------------------

@dataclass
class SegBatch:
    images: torch.Tensor     # B x Cin x H x W x S
    masks: torch.Tensor      # B x H x W x S, float {0,1}
    plans: PlanTokens
    clean_plans: PlanTokens | None = None

    def __post_init__(self):
        if self.images.shape[2:] != self.masks.shape[1:]:
            raise InvalidInputError(
                f"mask dims {tuple(self.masks.shape[1:])} != image dims {tuple(self.images.shape[2:])}")


def segmentation_loss(logits, masks, dice_weight=1.0, eps=1e-6):
    """Voxelwise binary cross-entropy plus soft Dice."""
    ce = F.binary_cross_entropy_with_logits(logits, masks)
    if not dice_weight:
        return ce
    p = torch.sigmoid(logits).flatten(1)
    g = masks.flatten(1)
    dice = (2 * (p * g).sum(1) + eps) / (p.sum(1) + g.sum(1) + eps)
    return ce + dice_weight * (1 - dice).mean()


def loss_neseg(model: SegModel, lm, prompts: PromptBank, batch: SegBatch, nspec: NoiseSpec | None,
               generator=None, dice_weight=1.0, pooling="mean"):
    emb = encode_plan(lm, batch.plans, prompts.prompts, nspec, generator, pooling)
    logits = model(batch.images, emb)
    return segmentation_loss(logits, batch.masks, dice_weight)


def ceseg_terms(model, lm, prompts, batch, nspec, generator=None, dice_weight=1.0,
                pooling="mean", literal=False, clean_prompts=None):
    """Return ``(segmentation loss, consistency term)``.

    The clean embedding goes through the stop-gradient prompt view (or
    ``clean_prompts`` if given); the consistency term is the cosine distance,
    or the raw cosine when ``literal``.
    """
    noisy = encode_plan(lm, batch.plans, prompts.prompts, nspec, generator, pooling)
    seg = segmentation_loss(model(batch.images, noisy), batch.masks, dice_weight)
    clean_plans = batch.clean_plans if batch.clean_plans is not None else batch.plans
    with torch.no_grad():
        shadow = prompts.shadow if clean_prompts is None else clean_prompts.detach()
        clean = encode_plan(lm, clean_plans, shadow, None, pooling=pooling)
    cos = F.cosine_similarity(noisy[:, 0], clean[:, 0], dim=-1)
    reg = cos.mean() if literal else (1 - cos).mean()
    return seg, reg


def loss_ceseg(model, lm, prompts, batch, nspec, lam=1.0, generator=None, dice_weight=1.0,
               pooling="mean"):
    if lam < 0:
        raise InvalidInputError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return loss_neseg(model, lm, prompts, batch, nspec, generator, dice_weight, pooling)
    seg, reg = ceseg_terms(model, lm, prompts, batch, nspec, generator, dice_weight, pooling)
    return seg + lam * reg


# -- training ---------------------------------------------------------------

@dataclass
class SegTrainConfig:
    objective: str = "ceseg"
    seed: int = 0
    epochs: int = 10
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 4
    patch_dims: tuple = DEFAULT_PATCH
    alpha: float = 5.0
    noise_distribution: str = "uniform"
    noise_seed: int | None = None
    lam: float = 1.0
    n_prompts: int = 8
    base_channels: int = 8
    levels: int = 3
    align_levels: tuple | None = None
    use_text: bool = True
    dice_weight: float = 1.0
    pooling: str = "mean"
    train_on_generated: bool = False
    # also log the raw cosine between noisy and clean embeddings
    log_raw_cos: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown segmentation objective {self.objective!r}")
        self.patch_dims = tuple(self.patch_dims)
        if self.align_levels is not None:
            self.align_levels = tuple(self.align_levels)

    def noise_spec(self) -> NoiseSpec | None:
        if self.objective == "default" or not self.use_text:
            return None
        seed = self.seed if self.noise_seed is None else self.noise_seed
        return NoiseSpec(self.alpha, self.noise_distribution, seed)

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.objective == "ceseg" else 0.0


@dataclass
class TrainedSeg:
    model: SegModel
    prompts: PromptBank
    lm: TrainedLM
    config: SegTrainConfig
    curve: list = field(default_factory=list)
    lm_path: str | None = None

    def plan_embedding(self, plans):
        plan = tokenize_plans(self.lm.vocab, plans)
        with torch.no_grad():
            return encode_plan(self.lm.model, plan, self.prompts.prompts, None,
                               pooling=self.config.pooling)


def model_input(vol: VolumeTensor, ref_shape=None) -> np.ndarray:
    """Stack intensity with coordinate channels normalized to ``ref_shape``."""
    shape = vol.data.shape
    coords = coordinate_channels(shape, ref_shape or shape)
    return np.concatenate([vol.data[None].astype(np.float32), coords], axis=0)


def _training_plans(cases, cfg: SegTrainConfig):
    if not cfg.train_on_generated:
        return [c.plan for c in cases]
    missing = [c.id for c in cases if "generated_plan" not in c.meta]
    if missing:
        raise ValidationError(f"cases without generated plans: {missing[:5]}")
    return [c.meta["generated_plan"] for c in cases]


def _batches(perm, size):
    # a trailing batch of one joins its predecessor: batch statistics need two samples
    out = [perm[i:i + size] for i in range(0, len(perm), size)]
    if len(out) > 1 and len(out[-1]) == 1:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def fit_seg(train_cases, lm: TrainedLM, cfg: SegTrainConfig, lm_path=None,
            on_epoch=None) -> TrainedSeg:
    torch.manual_seed(cfg.seed)
    for p in lm.model.parameters():
        p.requires_grad_(False)
    lm_hash_before = lm.weights_hash
    C = lm.model.embed_dim
    seg_cfg = SegConfig(base_channels=cfg.base_channels, levels=cfg.levels, text_dim=C,
                        n_prompts=cfg.n_prompts, use_text=cfg.use_text,
                        align_levels=cfg.align_levels, pooling=cfg.pooling)
    model = SegModel(seg_cfg)
    prompts = PromptBank(cfg.n_prompts, C)
    params = list(model.parameters()) + ([prompts.prompts] if cfg.use_text else [])
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    nspec = cfg.noise_spec()
    gen = nspec.generator() if nspec else None
    plans = _training_plans(train_cases, cfg)
    full_shape = train_cases[0].volume.data.shape
    inputs = [model_input(c.volume, full_shape) for c in train_cases]
    order_rng = np.random.default_rng(cfg.seed)
    curve = []
    model.train()
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(train_cases))
        losses, regs = [], []
        for idx in _batches(perm, cfg.batch_size):
            imgs, masks = [], []
            for j in idx:
                case = train_cases[j]
                off = crop_offsets(case.volume.data, cfg.patch_dims,
                                   int(order_rng.integers(2**31)))
                sl = tuple(slice(o, o + p) for o, p in zip(off, cfg.patch_dims))
                imgs.append(inputs[j][(slice(None),) + sl])
                masks.append(case.mask.data[sl])
            batch = SegBatch(torch.from_numpy(np.stack(imgs)),
                             torch.from_numpy(np.stack(masks).astype(np.float32)),
                             tokenize_plans(lm.vocab, [plans[j] for j in idx]),
                             tokenize_plans(lm.vocab, [train_cases[j].plan for j in idx]))
            if not cfg.use_text:
                loss = segmentation_loss(model(batch.images, None), batch.masks, cfg.dice_weight)
            elif cfg.effective_lambda > 0:
                seg_loss, reg = ceseg_terms(model, lm.model, prompts, batch, nspec, gen,
                                            cfg.dice_weight, cfg.pooling)
                loss = seg_loss + cfg.effective_lambda * reg
                regs.append(reg.item())
            else:
                loss = loss_neseg(model, lm.model, prompts, batch, nspec, gen, cfg.dice_weight,
                                  cfg.pooling)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if regs:
            row["consistency"] = float(np.mean(regs))
            if cfg.log_raw_cos:
                row["raw_cos"] = 1.0 - row["consistency"]
        curve.append(row)
        log.info("seg epoch %d loss %.4f", epoch + 1, curve[-1]["train_loss"])
        if on_epoch is not None:
            model.eval()
            on_epoch(TrainedSeg(model, prompts, lm, cfg, curve))
            model.train()
    if lm.weights_hash != lm_hash_before:
        raise ValidationError("frozen LM weights changed during segmentation training")
    model.eval()
    return TrainedSeg(model, prompts, lm, cfg, curve, str(lm_path) if lm_path else None)


# -- inference --------------------------------------------------------------

def _window_starts(n, w, overlap):
    if w == n:
        return [0]
    step = max(1, int(round(w * (1 - overlap))))
    starts = list(range(0, n - w + 1, step))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def window_grid(shape, window_dims, overlap):
    return [_window_starts(n, w, overlap) for n, w in zip(shape, window_dims)]


BLEND_MODES = ("gaussian", "constant")


def blend_weights(window_dims, mode="gaussian", sigma_scale=0.125) -> torch.Tensor:
    """Per-voxel tile weights that fade towards the tile border."""
    if mode == "constant":
        return torch.ones(window_dims)
    if mode != "gaussian":
        raise InvalidInputError(f"unknown blend mode {mode!r}, expected one of {BLEND_MODES}")
    w = torch.ones(())
    for n in window_dims:
        r = torch.arange(n, dtype=torch.float64) - (n - 1) / 2
        w = w[..., None] * torch.exp(-0.5 * (r / (sigma_scale * n)) ** 2)
    w = w / w.max()
    return w.clamp_min(w[w > 0].min()).float()


@torch.no_grad()
def predict_logits(seg: TrainedSeg, vol: VolumeTensor, plan: str | None, window_dims=None,
                   overlap=0.5, emb=None, blend="gaussian") -> np.ndarray:
    """Voxel logits over the whole volume, tiled when ``window_dims`` is given."""
    if not 0 <= overlap < 1:
        raise InvalidInputError(f"overlap must be in [0, 1), got {overlap}")
    shape = vol.data.shape
    f = seg.model.cfg.pool_factor
    padded = tuple(-(-n // f) * f for n in shape)
    data = np.zeros(padded, dtype=np.float32)
    data[:shape[0], :shape[1], :shape[2]] = vol.data
    x = np.concatenate([data[None], coordinate_channels(padded, shape)], axis=0)
    x = torch.from_numpy(x)[None]
    if seg.config.use_text:
        text = emb if emb is not None else seg.plan_embedding([plan or ""])
    else:
        text = None
    window_dims = tuple(window_dims) if window_dims is not None else padded
    if any(w > n for w, n in zip(window_dims, padded)):
        raise InvalidInputError(f"window {window_dims} larger than padded volume {padded}")
    seg.model.check_dims(window_dims)
    weight = blend_weights(window_dims, blend)
    total = torch.zeros(padded)
    count = torch.zeros(padded)
    for sx in _window_starts(padded[0], window_dims[0], overlap):
        for sy in _window_starts(padded[1], window_dims[1], overlap):
            for sz in _window_starts(padded[2], window_dims[2], overlap):
                sl = (slice(sx, sx + window_dims[0]), slice(sy, sy + window_dims[1]),
                      slice(sz, sz + window_dims[2]))
                total[sl] += weight * seg.model(x[(slice(None), slice(None)) + sl], text)[0]
                count[sl] += weight
    logits = (total / count).numpy()
    return logits[:shape[0], :shape[1], :shape[2]]


def sliding_window_infer(seg: TrainedSeg, vol: VolumeTensor, plan: str | None, window_dims,
                         overlap=0.5, blend="gaussian") -> MaskTensor:
    logits = predict_logits(seg, vol, plan, window_dims, overlap, blend=blend)
    return MaskTensor((logits > 0).astype(np.uint8), vol.spacing_mm)


def infer_direct(seg: TrainedSeg, vol: VolumeTensor, plan: str | None) -> MaskTensor:
    logits = predict_logits(seg, vol, plan, None)
    return MaskTensor((logits > 0).astype(np.uint8), vol.spacing_mm)


# -- checkpoints ------------------------------------------------------------

def save_seg(seg: TrainedSeg, path, lm_path=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(seg.config)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seg_config": asdict(seg.model.cfg),
        "state_dict": seg.model.state_dict(),
        "prompts": seg.prompts.state_dict(),
        "lm_path": str(lm_path or seg.lm_path or ""),
        "lm_hash": seg.lm.weights_hash,
        "curve": seg.curve,
    }
    torch.save(payload, path)
    return path


def load_seg(path, lm: TrainedLM | None = None) -> TrainedSeg:
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a segmentation checkpoint")
    if lm is None:
        lm_path = Path(payload["lm_path"])
        if not lm_path.is_absolute():
            lm_path = Path(path).parent / lm_path
        lm = load_lm(lm_path)
    if lm.weights_hash != payload["lm_hash"]:
        raise ValidationError("frozen LM does not match the hash recorded in the checkpoint")
    scfg = dict(payload["seg_config"])
    model = SegModel(SegConfig(**scfg))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    prompts = PromptBank(scfg["n_prompts"], scfg["text_dim"])
    prompts.load_state_dict(payload["prompts"])
    cfg = SegTrainConfig(**payload["config"])
    return TrainedSeg(model, prompts, lm, cfg, payload["curve"], payload["lm_path"])
