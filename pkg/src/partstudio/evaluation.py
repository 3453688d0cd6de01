"""Measurement: oracle classifier, retrieval diversity, part metrics.

The oracle is a small CNN trained on the rendered corpus; it grades
generated images (classification fidelity) and embeds them for
retrieval-based diversity scoring.  The remaining metrics read the
denoiser's part-attention maps and features: spatial overlap between
part regions, exact-match rate of part recombination, and feature
variance across noise draws.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import world
from .denoiser import to_unit
from .generation import generate, seen_selections
from .training import load_corpus_tensors, schedule_from_meta


# --- oracle ----------------------------------------------------------------


class OracleNet(nn.Module):
    """Species classifier over RGB plus a derived foreground channel.

    The penultimate layer doubles as an embedding space: features() returns
    the L2-normalized activation, so cosine similarity is a dot product.
    """

    def __init__(self, species_count, feature_dim=64, image_size=32):
        super().__init__()
        self.species_count = species_count
        self.feature_dim = feature_dim
        self.image_size = image_size
        self.conv = nn.Sequential(
            nn.Conv2d(4, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.SiLU(),
        )
        side = image_size // 8
        self.embed = nn.Linear(64 * side * side, feature_dim)
        self.head = nn.Linear(feature_dim, species_count)

    def features(self, x):
        h = self.conv(x).flatten(1)
        return F.normalize(self.embed(h), dim=1)

    def forward(self, x):
        return self.head(self.features(x))


def foreground_channel(images, background, tol=0.02):
    """Pixels that differ from the flat background color, (B, 1, H, W).

    tol rides above the checker texture amplitude, so textured corpora
    still map to a clean silhouette.
    """
    bg = torch.tensor(background, dtype=images.dtype).view(1, 3, 1, 1)
    return ((images - bg).abs().amax(dim=1, keepdim=True) > tol).to(images.dtype)


def oracle_inputs(images, background):
    """(B, 3, H, W) unit-range images -> (B, 4, H, W) oracle input."""
    return torch.cat([images, foreground_channel(images, background)], dim=1)


def train_oracle(manifest, epochs=40, lr=2e-3, batch_size=32, seed=0,
                 noise=0.03):
    """Fit the oracle on the train split; deterministic for a given seed."""
    data = load_corpus_tensors(manifest, split="train")
    images = to_unit(data.images)
    labels = data.species
    torch.manual_seed(seed)
    oracle = OracleNet(manifest.species_count, image_size=manifest.image_size)
    opt = torch.optim.AdamW(oracle.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    n = len(labels)
    oracle.train()
    for _ in range(epochs):
        order = torch.randperm(n, generator=g)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            x, y = images[idx], labels[idx]
            flip = torch.rand(len(idx), generator=g) < 0.5
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            x = x + noise * torch.randn(x.shape, generator=g)
            x = x.clamp(0.0, 1.0)
            logits = oracle(oracle_inputs(x, manifest.background))
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
    oracle.eval()
    return oracle


@torch.no_grad()
def classify_images(oracle, images, background):
    """(B,) predicted species for unit-range images."""
    return oracle(oracle_inputs(images, background)).argmax(dim=1)


@torch.no_grad()
def oracle_accuracy(oracle, manifest, split="val"):
    data = load_corpus_tensors(manifest, split=split)
    preds = classify_images(oracle, to_unit(data.images), manifest.background)
    return float((preds == data.species).float().mean())


def save_oracle(path, oracle, background):
    torch.save(
        {
            "state": oracle.state_dict(),
            "species_count": oracle.species_count,
            "feature_dim": oracle.feature_dim,
            "image_size": oracle.image_size,
            "background": tuple(background),
        },
        path,
    )


def load_oracle(path):
    blob = torch.load(path, weights_only=True)
    oracle = OracleNet(
        blob["species_count"], blob["feature_dim"], blob["image_size"]
    )
    oracle.load_state_dict(blob["state"])
    oracle.eval()
    return oracle, tuple(blob["background"])


@torch.no_grad()
def corpus_features(oracle, manifest, split="train"):
    """Oracle embeddings of the rendered corpus: (features, species)."""
    data = load_corpus_tensors(manifest, split=split)
    feats = oracle.features(
        oracle_inputs(to_unit(data.images), manifest.background)
    )
    return feats, data.species


# --- retrieval diversity ----------------------------------------------------


def retrieval_diversity(gen_features, db_features, db_species, species_count,
                        k=5):
    """Entropy of the species retrieved for a batch of generations.

    Each generated embedding retrieves its k nearest corpus entries by
    cosine similarity (embeddings are unit-norm, so similarity is a dot
    product); every retrieved entry votes for its species.  Returns the
    vote histogram, its entropy H and the effective species count e^H.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if k > db_features.shape[0]:
        raise ValueError("k exceeds the retrieval database size")
    gen = gen_features.to(torch.float64)
    db = db_features.to(torch.float64)
    sims = gen @ db.T
    top = sims.topk(k, dim=1).indices
    votes = db_species[top.reshape(-1)]
    counts = torch.bincount(votes, minlength=species_count).to(torch.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    entropy = float(-(nz * nz.log()).sum())
    return {
        "histogram": [int(c) for c in counts],
        "entropy": entropy,
        "effective_species": math.exp(entropy),
        "k": k,
        "samples": int(gen_features.shape[0]),
    }


# --- attention-based part metrics -------------------------------------------


def attention_overlap(maps, threshold=None):
    """Mean pairwise separation of thresholded part regions, in [0, 1].

    maps: (B, M, h, w) partition-of-unity attention.  Each part's region is
    the set of cells where its share exceeds the uniform level 1/M; a pair
    scores 1 - IoU, so disjoint regions score 1.  Two empty regions count
    as fully overlapping, which penalizes attention that turned off.
    """
    b, m = maps.shape[:2]
    if threshold is None:
        threshold = 1.0 / m
    regions = (maps > threshold).flatten(2)
    scores = []
    for i in range(b):
        vals = []
        for a in range(m):
            for c in range(a + 1, m):
                inter = (regions[i, a] & regions[i, c]).sum().item()
                union = (regions[i, a] | regions[i, c]).sum().item()
                iou = 1.0 if union == 0 else inter / union
                vals.append(1.0 - iou)
        scores.append(sum(vals) / len(vals))
    return float(sum(scores) / len(scores))


def composition_assignments(species_count, n_pairs, part_count, seed=0):
    """Random two-species slot assignments, both parents always present."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_pairs):
        a, b = (int(x) for x in rng.choice(species_count, size=2, replace=False))
        sources = [int(s) for s in rng.choice([a, b], size=part_count)]
        ia, ib = (int(x) for x in rng.choice(part_count, size=2, replace=False))
        sources[ia], sources[ib] = a, b
        out.append((a, b, sources))
    return out


def part_composition_score(bundle, catalog, n_pairs=20, view=1,
                           guidance=3.0, steps=50, seed=0):
    """Did each slot of a two-parent recombination come out as assigned?

    For every composed creature the attention region of each slot is read
    off the generated image; the region's mean color is matched against the
    two parents' nominal colors for that part.  Returns the exact-match
    rate (every slot right), the per-slot accuracy, and the mean cosine
    similarity between region color and the assigned parent color.
    """
    table = catalog.descriptor_table()  # (C, M, 6), colors in [:, :, 3:]
    assigns = composition_assignments(
        len(catalog), n_pairs, catalog.part_count, seed=seed
    )
    selections = [
        [{"kind": "species", "species_id": s} for s in sources]
        for _, _, sources in assigns
    ]
    result = generate(
        bundle,
        selections,
        [view] * n_pairs,
        seed=seed,
        steps=steps,
        guidance=guidance,
        want_attention=True,
    )
    size = result.images.shape[-1]
    regions = F.interpolate(
        result.attention, size=(size, size), mode="bilinear",
        align_corners=False,
    ) > (1.0 / catalog.part_count)
    exact, slot_hits, cosims = 0, 0, []
    m_total = catalog.part_count
    for i, (a, b, sources) in enumerate(assigns):
        ok = 0
        for m in range(m_total):
            sel = regions[i, m]
            if not sel.any():
                continue
            color = result.images[i][:, sel].mean(dim=1).numpy()
            ca, cb = table[a, m, 3:], table[b, m, 3:]
            pred = a if np.linalg.norm(color - ca) <= np.linalg.norm(color - cb) else b
            if pred == sources[m]:
                ok += 1
            want = table[sources[m], m, 3:]
            denom = np.linalg.norm(color) * np.linalg.norm(want)
            if denom > 0:
                cosims.append(float(color @ want / denom))
        slot_hits += ok
        exact += int(ok == m_total)
    return {
        "exact_match_rate": exact / n_pairs,
        "slot_accuracy": slot_hits / (n_pairs * m_total),
        "color_cosine": float(np.mean(cosims)) if cosims else 0.0,
        "pairs": n_pairs,
    }


# --- consistency -------------------------------------------------------------


@torch.no_grad()
def consistency_variance(bundle, manifest, n_images=8, n_draws=4,
                         t_frac=0.25, seed=0, split="val"):
    """Cross-attention feature spread over repeated noisings of one image.

    For each held-out image, the same timestep gets n_draws independent
    noise draws; the denoiser's cross-attention features are collected for
    each and their mean pairwise distance (normalized per feature element)
    is averaged over images.  Lower means the features depend on the
    conditioning rather than the noise.
    """
    latent, den, bank = bundle.latent, bundle.denoiser, bundle.bank
    schedule = schedule_from_meta(bundle.meta)
    data = load_corpus_tensors(manifest, split=split)
    g = torch.Generator().manual_seed(seed)
    pick = torch.randperm(len(data), generator=g)[:n_images]
    t_step = int(t_frac * schedule.steps)
    spreads = []
    for i in pick.tolist():
        x0 = data.images[i:i + 1]
        view = data.views[i:i + 1]
        toks = latent.tokens(data.species[i:i + 1])
        ctx = bank.part_context(toks)
        t = torch.tensor([t_step])
        feats = []
        for _ in range(n_draws):
            eps = torch.randn(x0.shape, generator=g)
            xt = schedule.add_noise(x0, eps, t)
            site_feats = den.cross_attention_features(xt, t, view, ctx)
            feats.append(torch.cat([v.flatten() for v in site_feats.values()]))
        dists = [
            (feats[a] - feats[b]).pow(2).mean().sqrt().item()
            for a in range(n_draws)
            for b in range(a + 1, n_draws)
        ]
        spreads.append(sum(dists) / len(dists))
    return float(sum(spreads) / len(spreads))


# --- suites ------------------------------------------------------------------


def evaluate_fidelity(bundle, oracle, manifest, per_view=1, guidance=3.0,
                      steps=50, seed=0, chunk=24):
    """Generate every seen species at every view and grade with the oracle."""
    c = manifest.species_count
    m = manifest.part_count
    selections, views, wanted = [], [], []
    for sid in range(c):
        for v in range(world.VIEW_COUNT):
            for _ in range(per_view):
                selections.append(seen_selections(sid, m))
                views.append(v)
                wanted.append(sid)
    preds = []
    for lo in range(0, len(selections), chunk):
        res = generate(
            bundle, selections[lo:lo + chunk], views[lo:lo + chunk],
            seed=seed + lo, steps=steps, guidance=guidance,
        )
        preds.extend(
            classify_images(oracle, res.images, manifest.background).tolist()
        )
    hits = [int(p == w) for p, w in zip(preds, wanted)]
    per_species = [
        float(np.mean([h for h, w in zip(hits, wanted) if w == sid]))
        for sid in range(c)
    ]
    return {
        "accuracy": float(np.mean(hits)),
        "per_species": per_species,
        "images": len(hits),
        "guidance": guidance,
    }


def evaluate_overlap(bundle, manifest, per_species=2, guidance=3.0,
                     steps=50, seed=0):
    """Attention overlap score over seen-species generations, all views."""
    c, m = manifest.species_count, manifest.part_count
    selections, views = [], []
    for sid in range(c):
        for j in range(per_species):
            selections.append(seen_selections(sid, m))
            views.append((sid * per_species + j) % world.VIEW_COUNT)
    res = generate(bundle, selections, views, seed=seed, steps=steps,
                   guidance=guidance, want_attention=True)
    return {
        "overlap_score": attention_overlap(res.attention),
        "images": len(selections),
    }


def evaluate_diversity(bundle, oracle, manifest, n_samples=200, k=5,
                       view=1, guidance=3.0, steps=50, seed=0, chunk=25):
    """Retrieval diversity of creatures with every slot drawn at random."""
    m = manifest.part_count
    db_feats, db_species = corpus_features(oracle, manifest, split="train")
    feats = []
    sample_all = [{"kind": "sample"}] * m
    for lo in range(0, n_samples, chunk):
        n = min(chunk, n_samples - lo)
        res = generate(
            bundle, [sample_all] * n, [view] * n,
            seed=seed + lo, steps=steps, guidance=guidance,
        )
        with torch.no_grad():
            feats.append(
                oracle.features(
                    oracle_inputs(res.images, manifest.background)
                )
            )
    out = retrieval_diversity(
        torch.cat(feats), db_feats, db_species, manifest.species_count, k=k
    )
    out["view"] = view
    return out


def evaluate_composition(bundle, manifest, n_pairs=20, view=1, guidance=3.0,
                         steps=50, seed=0):
    return part_composition_score(
        bundle, manifest.catalog, n_pairs=n_pairs, view=view,
        guidance=guidance, steps=steps, seed=seed,
    )


def evaluate_consistency(bundle, manifest, n_images=8, n_draws=4, seed=0):
    return {
        "consistency_variance": consistency_variance(
            bundle, manifest, n_images=n_images, n_draws=n_draws, seed=seed
        ),
        "images": n_images,
        "draws": n_draws,
    }


SUITES = {
    "fidelity": evaluate_fidelity,
    "overlap": evaluate_overlap,
    "diversity": evaluate_diversity,
    "composition": evaluate_composition,
    "consistency": evaluate_consistency,
}


def run_suite(name, bundle, manifest, oracle=None, **kwargs):
    """Dispatch one named suite; fidelity and diversity need the oracle."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; pick from {sorted(SUITES)}")
    fn = SUITES[name]
    if name in ("fidelity", "diversity"):
        if oracle is None:
            raise ValueError(f"suite {name!r} needs a trained oracle")
        return fn(bundle, oracle, manifest, **kwargs)
    return fn(bundle, manifest, **kwargs)
