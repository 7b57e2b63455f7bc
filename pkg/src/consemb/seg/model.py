"""Text-conditioned 3D residual U-Net."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ConfigurationError, InvalidInputError


NORMS = {"batch": nn.BatchNorm3d,
         "instance": lambda c: nn.InstanceNorm3d(c, affine=True)}


@dataclass
class SegConfig:
    in_channels: int = 4          # intensity + 3 coordinate channels
    base_channels: int = 8
    levels: int = 3
    text_dim: int = 64
    n_prompts: int = 8
    heads: int = 2
    use_text: bool = True
    # skip levels that get an alignment block; None means all of them
    align_levels: tuple | None = None
    pooling: str = "mean"
    # batch statistics are frozen at inference, which keeps tiled and
    # whole-volume predictions consistent; "instance" is the alternative
    norm: str = "batch"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if self.align_levels is not None:
            self.align_levels = tuple(self.align_levels)

    @property
    def pool_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def aligned(self, level: int) -> bool:
        return self.use_text and (self.align_levels is None or level in self.align_levels)


class ResUnit(nn.Module):
    def __init__(self, cin, cout, stride=1, norm="batch"):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = NORMS[norm](cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = NORMS[norm](cout)
        self.act = nn.SiLU()
        self.skip = (nn.Identity() if cin == cout and stride == 1
                     else nn.Conv3d(cin, cout, 1, stride=stride))

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + self.skip(x))


class AlignBlock(nn.Module):
    """Two-way attention between text tokens and a flattened feature map.

    Order: text self-attention, text attends to image, text MLP, image
    attends to text. Image features are the last stream updated, so the
    skip connection carries text-conditioned features.
    """

    def __init__(self, channels, text_dim, heads):
        super().__init__()
        if channels % heads:
            raise ConfigurationError(f"{channels} channels not divisible by {heads} heads")
        self.text_proj = nn.Linear(text_dim, channels)
        self.self_attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.t2i = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.mlp = nn.Sequential(nn.Linear(channels, 2 * channels), nn.SiLU(),
                                 nn.Linear(2 * channels, channels))
        self.i2t = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norms = nn.ModuleList(nn.LayerNorm(channels) for _ in range(4))

    def forward(self, feat, text):
        B, C = feat.shape[:2]
        spatial = feat.shape[2:]
        img = feat.flatten(2).transpose(1, 2)
        t = self.text_proj(text)
        t = self.norms[0](t + self.self_attn(t, t, t, need_weights=False)[0])
        t = self.norms[1](t + self.t2i(t, img, img, need_weights=False)[0])
        t = self.norms[2](t + self.mlp(t))
        img = self.norms[3](img + self.i2t(img, t, t, need_weights=False)[0])
        return img.transpose(1, 2).reshape(B, C, *spatial)


class SegModel(nn.Module):
    def __init__(self, cfg: SegConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SegConfig()
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for lvl in range(cfg.levels):
            self.down.append(ResUnit(cin, cfg.channels(lvl), 1 if lvl == 0 else 2, cfg.norm))
            cin = cfg.channels(lvl)
        # plan embeddings share a large common component; per-feature
        # standardization exposes the part that varies between plans
        self.text_norm = nn.BatchNorm1d(cfg.text_dim) if cfg.use_text else None
        self.align = nn.ModuleDict({
            str(lvl): AlignBlock(cfg.channels(lvl), cfg.text_dim, cfg.heads)
            for lvl in range(cfg.levels - 1) if cfg.aligned(lvl)})
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for lvl in reversed(range(cfg.levels - 1)):
            self.up.append(nn.ConvTranspose3d(cfg.channels(lvl + 1), cfg.channels(lvl), 2, stride=2))
            self.dec.append(ResUnit(2 * cfg.channels(lvl), cfg.channels(lvl), norm=cfg.norm))
        self.head = nn.Conv3d(cfg.channels(0), 1, 1)

    def check_dims(self, spatial):
        f = self.cfg.pool_factor
        bad = [n for n in spatial if n % f]
        if bad:
            need = tuple((-n) % f for n in spatial)
            raise InvalidInputError(
                f"spatial dims {tuple(spatial)} not divisible by {f}; pad by {need}")

    def forward(self, x, text=None):
        """``x`` is B x in_channels x H x W x S; ``text`` is B x T x text_dim."""
        self.check_dims(x.shape[2:])
        if text is not None and self.text_norm is not None:
            text = self.text_norm(text.transpose(1, 2)).transpose(1, 2)
        skips = []
        for lvl, unit in enumerate(self.down):
            x = unit(x)
            if lvl < self.cfg.levels - 1:
                if str(lvl) in self.align and text is not None:
                    x = self.align[str(lvl)](x, text)
                skips.append(x)
        for up, dec in zip(self.up, self.dec):
            x = up(x)
            x = dec(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)[:, 0]


class PromptBank(nn.Module):
    """Learnable prompt vectors and their stop-gradient view."""

    def __init__(self, n_prompts: int, dim: int):
        super().__init__()
        self.prompts = nn.Parameter(torch.randn(n_prompts, dim) * 0.02)

    @property
    def shadow(self) -> torch.Tensor:
        return self.prompts.detach()

    def forward(self):
        return self.prompts
