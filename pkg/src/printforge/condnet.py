"""Conditional denoiser: small U-Net with timestep FiLM modulation,
decoupled text/style cross-attention, LoRA adapters on the attention
projections, and a zero-initialized spatial control branch.

Conditioning contract:
  cross-attn output = Attn(Q, text) + style_weight * Attn(Q, style),
  with separate key/value projections per stream. Null conditions are
  all-zero token tensors; zero value vectors make the stream exactly inert.
  Control features enter the encoder through zero-initialized 1x1 convs,
  so a fresh branch changes nothing.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from . import numcore, promptgrammar


class UnknownTarget(KeyError):
    pass


@dataclass
class UNetConfig:
    image_size: int = 32
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    token_dim: int = 128
    style_tokens: int = 4
    style_weight: float = 1.0
    lora_rank: int = 8
    lora_alpha: float = 8.0
    groups: int = 8
    vocab_checksum: str = ""

    def __post_init__(self):
        assert self.base_channels % self.groups == 0


class LoRALinear(nn.Module):
    """Linear layer with an additive low-rank adapter: W + (alpha/r) B A."""

    def __init__(self, in_features, out_features, rank, alpha, bias=True):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.rank = rank
        self.alpha = alpha
        self.lora_A = nn.Parameter(torch.randn(rank, in_features) / math.sqrt(in_features))
        self.lora_B = nn.Parameter(torch.zeros(out_features, rank))
        self.enabled = True

    def effective_weight(self):
        w = self.base.weight
        if self.enabled:
            w = w + (self.alpha / self.rank) * (self.lora_B @ self.lora_A)
        return w

    def forward(self, x):
        return numcore.linear(x, self.effective_weight(), self.base.bias)


def apply_lora(weight: torch.Tensor, A: torch.Tensor, B: torch.Tensor,
               rank: int, alpha: float, enabled: bool = True) -> torch.Tensor:
    """Effective weight under an adapter; disabled returns the base weight."""
    if not enabled:
        return weight
    return weight + (alpha / rank) * (B @ A)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(numcore.silu(self.norm1(x)))
        scale, shift = self.emb(numcore.silu(emb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(numcore.silu(h))
        return h + self.skip(x)


class DecoupledCrossAttention(nn.Module):
    """Shared query, separate key/value projections for text and style."""

    def __init__(self, channels, token_dim, rank, alpha, groups=8):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.inner = token_dim
        self.to_q = LoRALinear(channels, self.inner, rank, alpha, bias=False)
        self.to_k_text = LoRALinear(token_dim, self.inner, rank, alpha, bias=False)
        self.to_v_text = LoRALinear(token_dim, self.inner, rank, alpha, bias=False)
        self.to_k_style = LoRALinear(token_dim, self.inner, rank, alpha, bias=False)
        self.to_v_style = LoRALinear(token_dim, self.inner, rank, alpha, bias=False)
        self.to_out = LoRALinear(self.inner, channels, rank, alpha)

    def forward(self, x, text_tokens, style_tokens, style_weight):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        out = numcore.softmax_attention(q, self.to_k_text(text_tokens),
                                        self.to_v_text(text_tokens))
        if style_weight != 0.0:
            out = out + style_weight * numcore.softmax_attention(
                q, self.to_k_style(style_tokens), self.to_v_style(style_tokens))
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Encoder(nn.Module):
    """Down path; shared topology between the main U-Net and control branch."""

    def __init__(self, cfg: UNetConfig, in_channels=1):
        super().__init__()
        c = cfg.base_channels
        chans = [c * m for m in cfg.channel_mults]
        self.stem = nn.Conv2d(in_channels, chans[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        emb = cfg.token_dim
        for i, ch in enumerate(chans):
            prev = chans[i - 1] if i > 0 else chans[0]
            self.blocks.append(ResBlock(prev, ch, emb, cfg.groups))
            self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ResBlock(chans[-1], chans[-1], emb, cfg.groups)
        self.channels = chans

    def forward(self, x, emb, fuse=None):
        """Returns (per-resolution skip features, bottom features).

        `fuse` is an optional list of additive features per resolution plus
        bottom, supplied by the control branch.
        """
        h = self.stem(x)
        skips = []
        for i, (block, down) in enumerate(zip(self.blocks, self.downs)):
            h = block(h, emb)
            if fuse is not None:
                h = h + fuse[i]
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        if fuse is not None:
            h = h + fuse[-1]
        return skips, h


class ControlBranch(nn.Module):
    """Encoder copy fed with the control image; fused through zero convs."""

    def __init__(self, cfg: UNetConfig, encoder: Encoder):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        self.fusers = nn.ModuleList(
            [nn.Conv2d(ch, ch, 1) for ch in encoder.channels]
            + [nn.Conv2d(encoder.channels[-1], encoder.channels[-1], 1)])
        for f in self.fusers:
            nn.init.zeros_(f.weight)
            nn.init.zeros_(f.bias)

    def forward(self, control, emb):
        skips, bottom = self.encoder(control, emb)
        feats = skips + [bottom]
        return [f(h) for f, h in zip(self.fusers, feats)]


class CondUNet(nn.Module):
    """epsilon-predicting denoiser with text/style/control conditioning."""

    def __init__(self, cfg: UNetConfig, vocab=None, generator=None):
        super().__init__()
        if generator is not None:
            torch.manual_seed(generator)
        self.cfg = cfg
        self.vocab = vocab or promptgrammar.default_vocabulary()
        d = cfg.token_dim
        # factor-embedding table, learned jointly with the denoiser
        self.factor_embed = nn.ParameterDict({
            f.replace(" ", "_"): nn.Parameter(
                torch.randn(len(self.vocab.values(f)), d) / math.sqrt(d))
            for f in promptgrammar.FACTORS
        })
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.encoder = Encoder(cfg, in_channels=1)
        chans = self.encoder.channels
        r, a = cfg.lora_rank, cfg.lora_alpha
        # cross-attention at the two coarsest resolutions (8x8 and 4x4 at
        # the default 32px input)
        self.attn_skip = DecoupledCrossAttention(chans[-1], d, r, a, cfg.groups)
        self.attn_mid = DecoupledCrossAttention(chans[-1], d, r, a, cfg.groups)
        self.ctrl = ControlBranch(cfg, self.encoder)
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(len(chans))):
            in_ch = chans[i] + (chans[i + 1] if i + 1 < len(chans) else chans[-1])
            self.up_blocks.append(ResBlock(in_ch, chans[i], d, cfg.groups))
        self.out_norm = nn.GroupNorm(cfg.groups, chans[0])
        self.out_conv = nn.Conv2d(chans[0], 1, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        self.style_weight = cfg.style_weight

    # -- conditioning helpers ------------------------------------------------

    def embed_specs(self, specs) -> torch.Tensor:
        """(B, 5, d) text tokens; None entries encode the null condition."""
        d = self.cfg.token_dim
        rows = []
        for spec in specs:
            if spec is None:
                rows.append(torch.zeros(len(promptgrammar.FACTORS), d))
                continue
            idx = promptgrammar.spec_to_indices(spec, self.vocab)
            rows.append(torch.stack([
                self.factor_embed[f.replace(" ", "_")][i]
                for f, i in zip(promptgrammar.FACTORS, idx)]))
        return torch.stack(rows)

    def null_style(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.cfg.style_tokens, self.cfg.token_dim)

    # -- forward -------------------------------------------------------------

    def forward(self, x_t, t, text_tokens=None, style_tokens=None, control=None):
        b = x_t.shape[0]
        if text_tokens is None:
            text_tokens = torch.zeros(b, len(promptgrammar.FACTORS), self.cfg.token_dim)
        if style_tokens is None:
            style_tokens = self.null_style(b)
        emb = self.time_mlp(timestep_embedding(t, self.cfg.token_dim))
        fuse = self.ctrl(control, emb) if control is not None else None
        skips, h = self.encoder(x_t, emb, fuse=fuse)
        skips[-1] = self.attn_skip(skips[-1], text_tokens, style_tokens, self.style_weight)
        h = self.attn_mid(h, text_tokens, style_tokens, self.style_weight)
        for i, block in enumerate(self.up_blocks):
            skip = skips[len(skips) - 1 - i]
            h = numcore.upsample_nearest(h, 2)
            h = block(numcore.concat([h, skip]), emb)
        return self.out_conv(numcore.silu(self.out_norm(h)))

    denoise = forward

    # -- adapter control -----------------------------------------------------

    def lora_modules(self) -> dict:
        return {name: m for name, m in self.named_modules() if isinstance(m, LoRALinear)}

    def set_lora_enabled(self, enabled: bool):
        for m in self.lora_modules().values():
            m.enabled = enabled

    def adapter_parameters(self):
        """LoRA tensors plus the factor-embedding table (trained in
        adapters-only mode)."""
        params = {}
        for name, m in self.lora_modules().items():
            params[f"lora.{name}.A"] = m.lora_A
            params[f"lora.{name}.B"] = m.lora_B
        for f, p in self.factor_embed.items():
            params[f"embed.{f}"] = p
        return params

    def control_parameters(self):
        return {f"ctrl.{n}": p for n, p in self.ctrl.named_parameters()}

    def base_parameters(self):
        adapter_ids = {id(p) for p in self.adapter_parameters().values()}
        ctrl_ids = {id(p) for p in self.ctrl.parameters()}
        return {n: p for n, p in self.named_parameters()
                if id(p) not in adapter_ids and id(p) not in ctrl_ids}

    # -- checkpoint ----------------------------------------------------------

    def checkpoint_tensors(self) -> dict:
        out = {}
        for n, p in self.named_parameters():
            name = n
            if ".lora_A" in n or ".lora_B" in n:
                name = "lora." + n.replace(".lora_A", ".A").replace(".lora_B", ".B")
            elif n.startswith("ctrl."):
                name = n  # already under the reserved prefix
            out[name] = p
        return out

    def load_tensors(self, tensors: dict):
        own = self.checkpoint_tensors()
        missing = set(own) - set(tensors)
        if missing:
            raise UnknownTarget(f"checkpoint missing tensors: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, p in own.items():
                p.copy_(torch.from_numpy(tensors[name].reshape(p.shape)))


def build_model(cfg: UNetConfig | None = None, seed: int = 0,
                vocab=None) -> CondUNet:
    cfg = cfg or UNetConfig()
    model = CondUNet(cfg, vocab=vocab, generator=seed)
    cfg.vocab_checksum = model.vocab.checksum
    return model
