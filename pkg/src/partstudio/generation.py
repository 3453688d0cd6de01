"""Batch generation from part selections, with replayable provenance.

Everything downstream of a trained checkpoint funnels through here: the
evaluation suites, the CLI and the HTTP service all build selections,
call generate(), and get back images plus a provenance record that
replays to the same bytes on the same checkpoint.
"""

import io

import numpy as np
import torch
from PIL import Image

from .denoiser import ddim_sample, to_unit
from .latent import compose_latents

PROVENANCE_FORMAT = "partstudio-generation"
PROVENANCE_VERSION = 1


class GenerationResult:
    """Images plus the latents/tokens/attention behind them."""

    def __init__(self, images, views, latents, tokens, attention, provenance,
                 initial_noise=None):
        self.images = images  # (B, 3, H, W) in [0, 1]
        self.views = views  # (B,)
        self.latents = latents  # (B, M, D_p)
        self.tokens = tokens  # (B, M, D_t)
        self.attention = attention  # (B, M, 16, 16) or None
        self.provenance = provenance
        self.initial_noise = initial_noise  # the canvas the sampler started from

    def __len__(self):
        return self.images.shape[0]


def seen_selections(species_id, part_count):
    """Selections that reproduce one catalog species unchanged."""
    return [{"kind": "species", "species_id": int(species_id)}] * part_count


def _sample_images(bundle, tables, views, generator, steps, guidance,
                   rescale, want_attention, schedule):
    from .training import schedule_from_meta

    latent, den, bank = bundle.latent, bundle.denoiser, bundle.bank
    if schedule is None:
        schedule = schedule_from_meta(bundle.meta)
    with torch.no_grad():
        tokens = latent.tokens_from_latents(tables)
        ctx = bank.part_context(tokens)
        null = bank.part_null_context(tables.shape[0])
        view_t = torch.as_tensor(views, dtype=torch.long)
        carrier = {} if want_attention else None
        # drawn here, not inside the sampler, so the result can hand the
        # canvas to whoever wants to replay or invert the run
        canvas = torch.randn(tables.shape[0], 3, 32, 32, generator=generator)
        x = ddim_sample(
            den,
            schedule,
            ctx,
            null,
            view_t,
            steps=steps,
            guidance=guidance,
            rescale=rescale,
            generator=generator,
            attn_carrier=carrier,
            initial=canvas,
        )
    return x, tokens, view_t, carrier, canvas


def generate(
    bundle,
    selections,
    views,
    seed=0,
    steps=50,
    guidance=3.0,
    rescale=0.3,
    want_attention=False,
    schedule=None,
):
    """Render creatures from per-slot selections.

    selections: one selection list per creature (see compose_latents);
    views: camera index per creature, aligned with selections.  All random
    draws (slot sampling and diffusion noise) come from one generator, so
    the provenance record pins the output exactly.
    """
    if len(selections) != len(views):
        raise ValueError("selections and views must align one to one")
    if len(selections) == 0:
        raise ValueError("nothing to generate")
    provenance = {
        "format": PROVENANCE_FORMAT,
        "version": PROVENANCE_VERSION,
        "selections": [list(s) for s in selections],
        "views": [int(v) for v in views],
        "seed": int(seed),
        "steps": int(steps),
        "guidance": float(guidance),
        "rescale": float(rescale),
    }
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        tables = torch.stack(
            [compose_latents(bundle.latent, s, generator=g) for s in selections]
        )
    x, tokens, view_t, carrier, canvas = _sample_images(
        bundle, tables, views, g, steps, guidance, rescale, want_attention,
        schedule,
    )
    return GenerationResult(
        images=to_unit(x),
        views=view_t,
        latents=tables,
        tokens=tokens,
        attention=carrier["maps"].float() if carrier else None,
        provenance=provenance,
        initial_noise=canvas,
    )


def generate_from_latents(
    bundle,
    latents,
    views,
    seed=0,
    steps=50,
    guidance=3.0,
    rescale=0.3,
    want_attention=False,
    schedule=None,
):
    """Render creatures whose (M, D_p) latent tables are already fixed.

    The seed drives only the diffusion noise, so a stored latent table plus
    a seed replays to the same images regardless of how the table was
    originally assembled.
    """
    tables = torch.as_tensor(latents, dtype=torch.float32)
    if tables.dim() == 2:
        tables = tables[None]
    if tables.shape[0] != len(views):
        raise ValueError("latent tables and views must align one to one")
    g = torch.Generator().manual_seed(int(seed))
    x, tokens, view_t, carrier, canvas = _sample_images(
        bundle, tables, views, g, steps, guidance, rescale, want_attention,
        schedule,
    )
    return GenerationResult(
        images=to_unit(x),
        views=view_t,
        latents=tables,
        tokens=tokens,
        attention=carrier["maps"].float() if carrier else None,
        provenance=None,
        initial_noise=canvas,
    )


def replay(bundle, record, want_attention=False):
    """Re-run a provenance record; same checkpoint -> same bytes."""
    if record.get("format") != PROVENANCE_FORMAT:
        raise ValueError("not a generation provenance record")
    if int(record.get("version", -1)) != PROVENANCE_VERSION:
        raise ValueError(f"unsupported provenance version {record.get('version')}")
    return generate(
        bundle,
        record["selections"],
        record["views"],
        seed=record["seed"],
        steps=record["steps"],
        guidance=record["guidance"],
        rescale=record["rescale"],
        want_attention=want_attention,
    )


def to_png_bytes(image):
    """(3, H, W) tensor in [0, 1] -> PNG bytes, deterministic."""
    arr = np.round(image.detach().cpu().numpy() * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr.transpose(1, 2, 0)).save(buf, format="PNG")
    return buf.getvalue()


def image_grid(images, columns=4, pad=2, fill=1.0):
    """Tile (B, 3, H, W) into one (3, H', W') image for quick inspection."""
    b, c, h, w = images.shape
    rows = (b + columns - 1) // columns
    grid = torch.full(
        (c, rows * (h + pad) + pad, columns * (w + pad) + pad), fill
    )
    for i in range(b):
        r, col = divmod(i, columns)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        grid[:, y:y + h, x:x + w] = images[i]
    return grid
