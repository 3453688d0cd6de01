"""Multi-view denoiser: a small pixel-space U-Net conditioned on part tokens.

The net predicts the noise added to a 32x32 image given the timestep, a
camera index, and a token sequence it cross-attends to.  Cross-attention
sits at the 16x16 and 8x8 resolutions (four sites total); their post-softmax
maps can be recorded for supervision and for part localization.  Every
cross-attention linear carries a built-in low-rank adapter whose up
projection starts at zero, so the adapter is inert until the second training
stage deliberately moves it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

ATTN_SITES = ("down16", "down8", "mid8", "up16")


# --- noise schedule -------------------------------------------------------


@dataclass
class DiffusionSchedule:
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor

    @property
    def steps(self):
        return self.betas.shape[0]

    def add_noise(self, x0, eps, t):
        """q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
        ab = self.alphas_cumprod[t].view(-1, 1, 1, 1)
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps

    def x0_from_eps(self, xt, eps, t):
        ab = self.alphas_cumprod[t].view(-1, 1, 1, 1)
        return (xt - (1.0 - ab).sqrt() * eps) / ab.sqrt()

    def eps_from_x0(self, xt, x0, t):
        ab = self.alphas_cumprod[t].view(-1, 1, 1, 1)
        return (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()


def make_schedule(steps=1000, beta_start=1e-4, beta_end=0.02) -> DiffusionSchedule:
    betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
    return DiffusionSchedule(
        betas=betas.to(torch.float32),
        alphas_cumprod=alphas_cumprod.to(torch.float32),
    )


def timestep_embedding(t, dim, dtype=torch.float32):
    """Sinusoidal features, (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / half
    )
    ang = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


# --- building blocks ------------------------------------------------------


class AdaptedLinear(nn.Module):
    """Linear layer with a rank-r additive adapter.

    The down projection is random, the up projection starts at zero, so a
    fresh adapter changes nothing.  Training stages pick which of the two
    parameter groups (base vs adapter) they move.
    """

    def __init__(self, in_features, out_features, rank=4, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.rank = rank
        self.lora_a = nn.Parameter(torch.randn(rank, in_features) / math.sqrt(rank))
        self.lora_b = nn.Parameter(torch.zeros(out_features, rank))

    def forward(self, x):
        out = F.linear(x, self.weight, self.bias)
        return out + F.linear(F.linear(x, self.lora_a), self.lora_b)


class CrossAttention(nn.Module):
    """Spatial queries attending over the conditioning tokens."""

    def __init__(self, channels, context_dim, heads=2, rank=4):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must divide evenly across heads")
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = AdaptedLinear(channels, channels, rank=rank, bias=False)
        self.to_k = AdaptedLinear(context_dim, channels, rank=rank, bias=False)
        self.to_v = AdaptedLinear(context_dim, channels, rank=rank, bias=False)
        self.to_out = AdaptedLinear(channels, channels, rank=rank)

    def forward(self, x, context, sink=None, site=None):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k = self.to_k(context)
        v = self.to_v(context)
        dh = c // self.heads

        def split(z):
            return z.view(b, -1, self.heads, dh).transpose(1, 2)

        att = torch.softmax(
            split(q) @ split(k).transpose(-1, -2) / math.sqrt(dh), dim=-1
        )  # (b, heads, hw, L)
        if sink is not None:
            # head-averaged, reshaped to (b, L, h, w); kept on the graph so
            # losses on the maps can train the attention
            sink[site] = att.mean(dim=1).transpose(1, 2).reshape(b, -1, h, w)
        out = (att @ split(v)).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out).transpose(1, 2).view(b, c, h, w)
        return x + out

    def features(self, x, context):
        """The residual branch output before the skip, (b, c, h, w).

        Used by the consistency objective, which compares these maps across
        two noise draws.
        """
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k = self.to_k(context)
        v = self.to_v(context)
        dh = c // self.heads

        def split(z):
            return z.view(b, -1, self.heads, dh).transpose(1, 2)

        att = torch.softmax(
            split(q) @ split(k).transpose(-1, -2) / math.sqrt(dh), dim=-1
        )
        out = (att @ split(v)).transpose(1, 2).reshape(b, h * w, c)
        return self.to_out(out).transpose(1, 2).view(b, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        )

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class PartDenoiser(nn.Module):
    """U-Net over 32x32 RGB with cross-attention at 16x16 and 8x8."""

    def __init__(
        self,
        context_dim=64,
        channels=(32, 64, 96),
        time_dim=128,
        views=4,
        heads=2,
        adapter_rank=4,
    ):
        super().__init__()
        c0, c1, c2 = channels
        self.context_dim = context_dim
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.view_embed = nn.Embedding(views, time_dim)

        self.conv_in = nn.Conv2d(3, c0, 3, padding=1)
        self.down1 = ResBlock(c0, c0, time_dim)
        self.pool1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.down2 = ResBlock(c1, c1, time_dim)
        self.attn_down16 = CrossAttention(c1, context_dim, heads, adapter_rank)
        self.pool2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down3 = ResBlock(c2, c2, time_dim)
        self.attn_down8 = CrossAttention(c2, context_dim, heads, adapter_rank)
        self.mid1 = ResBlock(c2, c2, time_dim)
        self.attn_mid8 = CrossAttention(c2, context_dim, heads, adapter_rank)
        self.mid2 = ResBlock(c2, c2, time_dim)
        self.unpool2 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.up2 = ResBlock(c1 + c1, c1, time_dim)
        self.attn_up16 = CrossAttention(c1, context_dim, heads, adapter_rank)
        self.unpool1 = nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1)
        self.up1 = ResBlock(c0 + c0, c0, time_dim)
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, 3, 3, padding=1)

    def attention_sites(self):
        return {
            "down16": self.attn_down16,
            "down8": self.attn_down8,
            "mid8": self.attn_mid8,
            "up16": self.attn_up16,
        }

    def forward(self, x, t, view, context, attn_sink=None):
        """Predict the noise.  attn_sink, if given, is a dict that receives
        the head-averaged post-softmax map of each cross-attention site."""
        emb = self.time_mlp(timestep_embedding(t, self.time_dim, x.dtype))
        emb = emb + self.view_embed(view)

        h0 = self.down1(self.conv_in(x), emb)
        h1 = self.down2(self.pool1(h0), emb)
        h1 = self.attn_down16(h1, context, attn_sink, "down16")
        h2 = self.down3(self.pool2(h1), emb)
        h2 = self.attn_down8(h2, context, attn_sink, "down8")
        m = self.mid1(h2, emb)
        m = self.attn_mid8(m, context, attn_sink, "mid8")
        m = self.mid2(m, emb)
        u2 = self.up2(torch.cat([self.unpool2(m), h1], dim=1), emb)
        u2 = self.attn_up16(u2, context, attn_sink, "up16")
        u1 = self.up1(torch.cat([self.unpool1(u2), h0], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(u1)))

    def cross_attention_features(self, x, t, view, context):
        """Residual-branch feature maps of every cross-attention site.

        Follows the same computation path as forward.  Returns a dict
        site -> (b, c, h, w), with gradients attached.
        """
        emb = self.time_mlp(timestep_embedding(t, self.time_dim, x.dtype))
        emb = emb + self.view_embed(view)
        feats = {}
        h0 = self.down1(self.conv_in(x), emb)
        h1 = self.down2(self.pool1(h0), emb)
        feats["down16"] = self.attn_down16.features(h1, context)
        h1 = h1 + feats["down16"]
        h2 = self.down3(self.pool2(h1), emb)
        feats["down8"] = self.attn_down8.features(h2, context)
        h2 = h2 + feats["down8"]
        m = self.mid1(h2, emb)
        feats["mid8"] = self.attn_mid8.features(m, context)
        m = m + feats["mid8"]
        m = self.mid2(m, emb)
        u2 = self.up2(torch.cat([self.unpool2(m), h1], dim=1), emb)
        feats["up16"] = self.attn_up16.features(u2, context)
        return feats


def adapter_parameters(model):
    """The low-rank adapter tensors, as a name -> parameter dict."""
    return {
        n: p
        for n, p in model.named_parameters()
        if n.endswith("lora_a") or n.endswith("lora_b")
    }


def backbone_parameters(model):
    """Everything that is not an adapter."""
    return {
        n: p
        for n, p in model.named_parameters()
        if not (n.endswith("lora_a") or n.endswith("lora_b"))
    }


# --- conditioning ---------------------------------------------------------


class ConditioningBank(nn.Module):
    """Learned token sets that frame the denoiser's context sequences.

    Stage one conditions on a single class token per species; stage two
    conditions on part tokens plus a shared global token.  Each regime has a
    learned null sequence of matching length for classifier-free guidance.
    """

    def __init__(self, species_count, part_count=5, token_dim=64):
        super().__init__()
        self.part_count = part_count
        self.token_dim = token_dim
        self.class_tokens = nn.Parameter(torch.randn(species_count, token_dim))
        self.class_null = nn.Parameter(torch.randn(1, token_dim))
        self.global_token = nn.Parameter(torch.randn(1, token_dim))
        self.null_tokens = nn.Parameter(torch.randn(part_count + 1, token_dim))

    def class_context(self, species_ids):
        """(B, 1, D) single-token context for stage one."""
        return self.class_tokens[species_ids][:, None, :]

    def class_null_context(self, batch):
        return self.class_null[None].expand(batch, -1, -1)

    def part_context(self, part_tokens):
        """(B, M, D) part tokens -> (B, M+1, D) with the global token."""
        b = part_tokens.shape[0]
        g = self.global_token[None].expand(b, -1, -1)
        return torch.cat([part_tokens, g], dim=1)

    def part_null_context(self, batch):
        return self.null_tokens[None].expand(batch, -1, -1)


# --- attention aggregation ------------------------------------------------


def aggregate_attention(maps, part_count, size=16):
    """Average the recorded site maps into per-part heat maps.

    maps: dict site -> (B, L, h, w) with L >= part_count (extra tokens such
    as the global token are dropped).  8x8 sites are upsampled bilinearly.
    Returns (B, part_count, size, size).
    """
    pooled = []
    for site in ATTN_SITES:
        # keep the incoming dtype: downcasting would inject float32 noise
        # into double-precision gradient checks
        m = maps[site][:, :part_count]
        if m.shape[-1] != size:
            m = F.interpolate(m, size=(size, size), mode="bilinear", align_corners=False)
        pooled.append(m)
    return torch.stack(pooled, dim=0).mean(dim=0)


def normalize_attention(agg, eps=1e-8):
    """Partition-of-unity over parts: A_m / (sum_k A_k + eps).

    Normalization runs in float64 so the tiny floor does not distort the
    result when the part mass is healthy.
    """
    a = agg.to(torch.float64)
    return (a / (a.sum(dim=1, keepdim=True) + eps)).to(agg.dtype)


# --- sampling -------------------------------------------------------------


def guided_eps(model, schedule, xt, t, view, ctx_cond, ctx_uncond, guidance,
               rescale=0.0):
    """Classifier-free guided noise prediction with optional std rescale.

    Conditional and unconditional branches run as one batched forward.  The
    rescale mixes the guided x0 with a version matched to the conditional
    branch's per-sample std, which tames the saturation high guidance causes.
    """
    b = xt.shape[0]
    if ctx_cond.shape[1] != ctx_uncond.shape[1]:
        raise ValueError("conditional and null contexts must share length")
    eps_both = model(
        torch.cat([xt, xt]),
        torch.cat([t, t]),
        torch.cat([view, view]),
        torch.cat([ctx_cond, ctx_uncond]),
    )
    eps_c, eps_u = eps_both[:b], eps_both[b:]
    eps = eps_u + guidance * (eps_c - eps_u)
    if rescale <= 0.0:
        return eps
    x0_pos = schedule.x0_from_eps(xt, eps_c, t)
    x0_cfg = schedule.x0_from_eps(xt, eps, t)
    std_pos = x0_pos.std(dim=(1, 2, 3), keepdim=True)
    std_cfg = x0_cfg.std(dim=(1, 2, 3), keepdim=True).clamp_min(1e-8)
    x0_mix = rescale * (x0_cfg * std_pos / std_cfg) + (1.0 - rescale) * x0_cfg
    return schedule.eps_from_x0(xt, x0_mix, t)


def ddim_timesteps(schedule, steps):
    """Evenly spaced timestep ladder, descending, ending at 0."""
    idx = torch.linspace(schedule.steps - 1, 0, steps).round().long()
    return torch.unique(idx, sorted=True).flip(0)


def ddim_unroll(model, schedule, xt, view, ctx_cond, ctx_uncond, steps=50,
                guidance=7.5, rescale=0.0):
    """The sampler's deterministic update chain from a given canvas.

    Differentiable, so a caller holding the canvas a run started from can
    optimize through the whole trajectory.  Returns x0 in model space.
    """
    b = xt.shape[0]
    ladder = ddim_timesteps(schedule, steps)
    for i, step in enumerate(ladder):
        t = torch.full((b,), int(step), dtype=torch.long)
        eps = guided_eps(
            model, schedule, xt, t, view, ctx_cond, ctx_uncond, guidance, rescale
        )
        x0 = schedule.x0_from_eps(xt, eps, t)
        if i + 1 < len(ladder):
            ab_prev = schedule.alphas_cumprod[ladder[i + 1]]
            xt = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps
        else:
            xt = x0
    return xt


@torch.no_grad()
def ddim_sample(
    model,
    schedule,
    ctx_cond,
    ctx_uncond,
    view,
    steps=50,
    guidance=7.5,
    rescale=0.3,
    generator=None,
    image_size=32,
    attn_carrier=None,
    initial=None,
):
    """Deterministic DDIM sampling with classifier-free guidance.

    view: (B,) camera indices.  Returns x0 in model space (roughly [-1, 1]).
    attn_carrier, if given, is filled with normalized part attention maps
    recorded on the final model call.  initial, if given, replaces the
    generator draw for the starting canvas.
    """
    b = ctx_cond.shape[0]
    if initial is None:
        initial = torch.randn(b, 3, image_size, image_size, generator=generator)
    xt = ddim_unroll(model, schedule, initial, view, ctx_cond, ctx_uncond,
                     steps, guidance, rescale)
    if attn_carrier is not None:
        part_count = ctx_cond.shape[1] - 1
        sink = {}
        t = torch.full((b,), int(schedule.steps // 4), dtype=torch.long)
        noisy = schedule.add_noise(
            xt, torch.randn(xt.shape, generator=generator), t
        )
        model(noisy, t, view, ctx_cond, attn_sink=sink)
        agg = aggregate_attention(sink, part_count)
        attn_carrier["maps"] = normalize_attention(agg)
    return xt


def to_unit(x):
    """Model space [-1, 1] -> image space [0, 1], clipped."""
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def from_unit(x):
    return x * 2.0 - 1.0
