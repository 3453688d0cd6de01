"""Hierarchical part latent space.

A learned species embedding is split by one affine layer into M compact part
latents.  Each latent is paired with a shared positional embedding naming its
slot (head, wings, ...) and expanded by a small MLP into the conditioning
token the denoiser cross-attends to.  Because the split is per part, latents
can be recombined across species, drawn from the catalog-level Gaussian of a
slot, or interpolated between two species before token expansion.
"""

from __future__ import annotations

from collections import OrderedDict

import torch
from torch import nn


class PartLatentModel(nn.Module):
    """species embedding -> per-part latents -> conditioning tokens."""

    def __init__(
        self,
        species_count,
        part_count=5,
        species_dim=768,
        part_dim=4,
        token_dim=64,
    ):
        super().__init__()
        self.species_count = species_count
        self.part_count = part_count
        self.species_dim = species_dim
        self.part_dim = part_dim
        self.token_dim = token_dim
        self.species_embed = nn.Parameter(torch.randn(species_count, species_dim))
        self.f = nn.Linear(species_dim, part_count * part_dim)
        self.pe = nn.Parameter(torch.randn(part_count, part_dim))
        self.g = nn.Sequential(
            OrderedDict(
                [
                    ("layer1", nn.Linear(2 * part_dim, 4 * part_dim)),
                    ("act", nn.SiLU()),
                    ("layer2", nn.Linear(4 * part_dim, token_dim)),
                ]
            )
        )

    def species_latents(self, species_ids) -> torch.Tensor:
        """(B,) ids -> (B, M, D_p) part latents."""
        ids = torch.as_tensor(species_ids, dtype=torch.long)
        emb = self.species_embed[ids]
        return self.f(emb).view(ids.shape[0], self.part_count, self.part_dim)

    def all_species_latents(self) -> torch.Tensor:
        return self.species_latents(torch.arange(self.species_count))

    def tokens_from_latents(self, latents) -> torch.Tensor:
        """(..., M, D_p) latents -> (..., M, D_t) tokens.

        The slot embedding is concatenated, not added, so even a latent of
        zeros produces a slot-specific token.
        """
        pe = self.pe.expand(*latents.shape[:-2], -1, -1)
        return self.g(torch.cat([latents, pe], dim=-1))

    def tokens(self, species_ids) -> torch.Tensor:
        return self.tokens_from_latents(self.species_latents(species_ids))

    @torch.no_grad()
    def part_statistics(self):
        """Catalog-level Gaussian per slot: mean and population std, (M, D_p).

        Computed from the current nominal species latents, so it tracks the
        model as training moves the embeddings.
        """
        latents = self.all_species_latents()
        mu = latents.mean(dim=0)
        var = latents.var(dim=0, unbiased=False)
        return mu, var.sqrt()

    @torch.no_grad()
    def sample_part(self, part_index, generator=None) -> torch.Tensor:
        """Draw one latent for a slot from its catalog Gaussian."""
        mu, sigma = self.part_statistics()
        eps = torch.randn(self.part_dim, generator=generator)
        return mu[part_index] + sigma[part_index] * eps

    @torch.no_grad()
    def interpolate(self, species_a, species_b, alpha) -> torch.Tensor:
        """Per-part blend of two species, (M, D_p).

        alpha=1 returns species_a's latents bit-exactly; alpha=0 species_b's.
        """
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        # read both rows off the full-catalog batch so the endpoints agree
        # bitwise with every other consumer of the nominal latents
        nominal = self.all_species_latents()
        pa, pb = nominal[species_a], nominal[species_b]
        if alpha == 1.0:
            return pa.clone()
        if alpha == 0.0:
            return pb.clone()
        return alpha * pa + (1.0 - alpha) * pb


def compose_latents(model, selections, generator=None) -> torch.Tensor:
    """Assemble a (M, D_p) latent table from per-slot selections.

    Each selection is a dict:
      {"kind": "species", "species_id": int}
      {"kind": "sample"}                        draws from the slot Gaussian
      {"kind": "interpolate", "species_a": int, "species_b": int, "alpha": x}
      {"kind": "latent", "values": [x...]}      an explicit D_p vector

    Slots are positional: selections[m] fills slot m.  A shared generator
    makes the whole composition reproducible from one seed; "latent" rows
    pin a previously drawn vector so it survives re-composition unchanged.
    """
    if len(selections) != model.part_count:
        raise ValueError(
            f"need exactly {model.part_count} selections, got {len(selections)}"
        )
    with torch.no_grad():
        nominal = model.all_species_latents()
        rows = []
        for m, sel in enumerate(selections):
            kind = sel["kind"]
            if kind == "species":
                sid = int(sel["species_id"])
                if not 0 <= sid < model.species_count:
                    raise ValueError(f"species_id {sid} outside catalog")
                rows.append(nominal[sid, m])
            elif kind == "sample":
                rows.append(model.sample_part(m, generator=generator))
            elif kind == "interpolate":
                latents = model.interpolate(
                    int(sel["species_a"]), int(sel["species_b"]), float(sel["alpha"])
                )
                rows.append(latents[m])
            elif kind == "latent":
                row = torch.as_tensor(sel["values"], dtype=torch.float32)
                if row.shape != (model.part_dim,):
                    raise ValueError(
                        f"latent for slot {m} must have {model.part_dim} values"
                    )
                rows.append(row)
            else:
                raise ValueError(f"unknown selection kind {kind!r}")
        return torch.stack(rows, dim=0)
