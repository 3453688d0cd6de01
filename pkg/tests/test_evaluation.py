"""Oracles for the measurement suite.

The retrieval-diversity test carries its own naive reimplementation
(pure python floats, explicit sort) and demands exact agreement; the
attention metrics are checked against hand-computed cases.
"""

import math

import numpy as np
import pytest
import torch

from partstudio import world
from partstudio.checkpoint import load_checkpoint
from partstudio.denoiser import to_unit
from partstudio.evaluation import (
    OracleNet,
    attention_overlap,
    classify_images,
    composition_assignments,
    consistency_variance,
    corpus_features,
    evaluate_composition,
    evaluate_consistency,
    evaluate_diversity,
    evaluate_fidelity,
    evaluate_overlap,
    foreground_channel,
    load_oracle,
    oracle_accuracy,
    oracle_inputs,
    part_composition_score,
    retrieval_diversity,
    run_suite,
    save_oracle,
    train_oracle,
)
from partstudio.training import load_corpus_tensors


@pytest.fixture(scope="module")
def micro_oracle(micro_corpus):
    return train_oracle(micro_corpus, epochs=25, seed=3)


@pytest.fixture(scope="module")
def micro_bundle(micro_stage2):
    return load_checkpoint(micro_stage2)


# --- retrieval diversity vs naive twin --------------------------------------


def naive_retrieval_entropy(gen, db, species, species_count, k):
    """Brute-force reimplementation: python floats, explicit sorting."""
    gen = [[float(v) for v in row] for row in gen]
    db = [[float(v) for v in row] for row in db]
    counts = [0] * species_count
    for row in gen:
        sims = [sum(a * b for a, b in zip(row, d)) for d in db]
        order = sorted(range(len(db)), key=lambda i: (-sims[i], i))
        for i in order[:k]:
            counts[int(species[i])] += 1
    total = sum(counts)
    h = -sum((c / total) * math.log(c / total) for c in counts if c)
    return counts, h


def test_retrieval_matches_naive_on_randomized_instances():
    rng = np.random.default_rng(0)
    for trial in range(100):
        c = int(rng.integers(2, 9))
        n_db = int(rng.integers(6, 40))
        n_gen = int(rng.integers(1, 20))
        dim = int(rng.integers(3, 9))
        k = int(rng.integers(1, min(6, n_db + 1)))
        gen = torch.nn.functional.normalize(torch.from_numpy(rng.standard_normal((n_gen, dim))), dim=1)
        db = torch.nn.functional.normalize(torch.from_numpy(rng.standard_normal((n_db, dim))), dim=1)
        species = torch.from_numpy(rng.integers(0, c, size=n_db))
        out = retrieval_diversity(gen, db, species, c, k=k)
        counts, h = naive_retrieval_entropy(gen, db, species, c, k)
        assert out["histogram"] == counts, f"trial {trial}"
        assert abs(out["entropy"] - h) <= 1e-9, f"trial {trial}"
        assert -1e-12 <= out["entropy"] <= math.log(c) + 1e-12
        assert out["effective_species"] == pytest.approx(math.exp(h))


def test_retrieval_single_species_database_has_zero_entropy():
    gen = torch.nn.functional.normalize(torch.randn(7, 5), dim=1)
    db = torch.nn.functional.normalize(torch.randn(11, 5), dim=1)
    out = retrieval_diversity(gen, db, torch.zeros(11, dtype=torch.long), 4, k=3)
    assert out["entropy"] == 0.0
    assert out["effective_species"] == 1.0
    assert out["histogram"][0] == 7 * 3


def test_retrieval_identical_generations_spread_no_further():
    g = torch.nn.functional.normalize(torch.randn(1, 6), dim=1)
    gen = g.repeat(10, 1)
    db = torch.nn.functional.normalize(torch.randn(20, 6), dim=1)
    species = torch.arange(20) % 5
    out = retrieval_diversity(gen, db, species, 5, k=4)
    # ten copies retrieve the same 4 entries, at most 4 species get votes
    assert sum(1 for v in out["histogram"] if v) <= 4


def test_retrieval_rejects_bad_k():
    gen = torch.randn(2, 4)
    db = torch.randn(3, 4)
    sp = torch.zeros(3, dtype=torch.long)
    with pytest.raises(ValueError):
        retrieval_diversity(gen, db, sp, 2, k=0)
    with pytest.raises(ValueError):
        retrieval_diversity(gen, db, sp, 2, k=4)


# --- attention overlap -------------------------------------------------------


def test_overlap_disjoint_regions_score_one():
    maps = torch.zeros(1, 4, 4, 4)
    for m in range(4):
        maps[0, m, m] = 1.0  # each part owns one row
    assert attention_overlap(maps) == 1.0


def test_overlap_identical_regions_score_zero():
    maps = torch.full((2, 3, 4, 4), 0.9)
    assert attention_overlap(maps) == 0.0


def test_overlap_uniform_maps_score_zero():
    # exactly uniform shares never exceed the 1/M threshold: regions are
    # empty and empty pairs count as total overlap
    maps = torch.full((1, 5, 4, 4), 1.0 / 5)
    assert attention_overlap(maps) == 0.0


def test_overlap_hand_computed_case():
    maps = torch.zeros(1, 2, 2, 2)
    maps[0, 0, 0, 0] = 0.9
    maps[0, 0, 0, 1] = 0.9
    maps[0, 1, 0, 1] = 0.9
    maps[0, 1, 1, 1] = 0.9
    # regions {00,01} and {01,11}: IoU 1/3, score 2/3
    assert attention_overlap(maps) == pytest.approx(2.0 / 3.0, abs=1e-12)


# --- oracle ------------------------------------------------------------------


def test_foreground_channel_matches_part_masks(micro_corpus):
    rec = micro_corpus.records[0]
    img = world.load_record(micro_corpus, rec)
    x = torch.from_numpy(img.pixels).permute(2, 0, 1)[None]
    fg = foreground_channel(x, micro_corpus.background)[0, 0].bool()
    union = torch.from_numpy(img.masks.any(axis=0))
    assert torch.equal(fg, union)


def test_oracle_features_unit_norm(micro_oracle, micro_corpus):
    data = load_corpus_tensors(micro_corpus)
    x = oracle_inputs(to_unit(data.images[:8]), micro_corpus.background)
    with torch.no_grad():
        f = micro_oracle.features(x)
    assert f.shape == (8, micro_oracle.feature_dim)
    assert torch.allclose(f.norm(dim=1), torch.ones(8), atol=1e-5)


def test_oracle_classifies_held_out_split(micro_oracle, micro_corpus):
    assert oracle_accuracy(micro_oracle, micro_corpus, split="val") == 1.0


def test_oracle_training_is_deterministic(micro_corpus):
    a = train_oracle(micro_corpus, epochs=2, seed=11)
    b = train_oracle(micro_corpus, epochs=2, seed=11)
    for (na, pa), (nb, pb) in zip(
        a.state_dict().items(), b.state_dict().items()
    ):
        assert na == nb and torch.equal(pa, pb)


def test_oracle_save_load_round_trip(tmp_path, micro_oracle, micro_corpus):
    path = tmp_path / "oracle.pt"
    save_oracle(path, micro_oracle, micro_corpus.background)
    loaded, bg = load_oracle(path)
    assert bg == micro_corpus.background
    data = load_corpus_tensors(micro_corpus)
    imgs = to_unit(data.images[:6])
    assert torch.equal(
        classify_images(loaded, imgs, bg),
        classify_images(micro_oracle, imgs, micro_corpus.background),
    )


def test_corpus_features_shapes(micro_oracle, micro_corpus):
    feats, species = corpus_features(micro_oracle, micro_corpus)
    n = len(micro_corpus.train_records())
    assert feats.shape == (n, micro_oracle.feature_dim)
    assert species.shape == (n,)


# --- composition assignments --------------------------------------------------


def test_composition_assignments_include_both_parents():
    for a, b, sources in composition_assignments(6, 50, 5, seed=2):
        assert a != b
        assert set(sources) <= {a, b}
        assert a in sources and b in sources


def test_composition_assignments_deterministic():
    assert composition_assignments(5, 10, 5, seed=7) == composition_assignments(
        5, 10, 5, seed=7
    )


# --- metrics over a live bundle ----------------------------------------------


def test_part_composition_score_ranges(micro_bundle, micro_corpus):
    out = part_composition_score(
        micro_bundle, micro_corpus.catalog, n_pairs=3, steps=8, seed=1
    )
    assert 0.0 <= out["exact_match_rate"] <= 1.0
    assert 0.0 <= out["slot_accuracy"] <= 1.0
    assert -1.0 <= out["color_cosine"] <= 1.0
    assert out["pairs"] == 3


def test_consistency_variance_positive_and_deterministic(
    micro_bundle, micro_corpus
):
    a = consistency_variance(micro_bundle, micro_corpus, n_images=2, n_draws=3, seed=4)
    b = consistency_variance(micro_bundle, micro_corpus, n_images=2, n_draws=3, seed=4)
    assert a == b
    assert a > 0.0


def test_evaluate_fidelity_structure(micro_bundle, micro_oracle, micro_corpus):
    out = evaluate_fidelity(
        micro_bundle, micro_oracle, micro_corpus, per_view=1, steps=6, seed=0
    )
    assert out["images"] == micro_corpus.species_count * world.VIEW_COUNT
    assert 0.0 <= out["accuracy"] <= 1.0
    assert len(out["per_species"]) == micro_corpus.species_count


def test_evaluate_overlap_structure(micro_bundle, micro_corpus):
    out = evaluate_overlap(micro_bundle, micro_corpus, per_species=1, steps=6)
    assert 0.0 <= out["overlap_score"] <= 1.0
    assert out["images"] == micro_corpus.species_count


def test_evaluate_diversity_structure(micro_bundle, micro_oracle, micro_corpus):
    out = evaluate_diversity(
        micro_bundle, micro_oracle, micro_corpus, n_samples=6, k=3, steps=6
    )
    assert out["samples"] == 6
    assert sum(out["histogram"]) == 6 * 3
    assert 0.0 <= out["entropy"] <= math.log(micro_corpus.species_count) + 1e-9


def test_run_suite_dispatch(micro_bundle, micro_oracle, micro_corpus):
    out = run_suite(
        "consistency", micro_bundle, micro_corpus, n_images=2, n_draws=2
    )
    assert "consistency_variance" in out
    with pytest.raises(ValueError):
        run_suite("nope", micro_bundle, micro_corpus)
    with pytest.raises(ValueError):
        run_suite("fidelity", micro_bundle, micro_corpus)


def test_evaluate_composition_runs(micro_bundle, micro_corpus):
    out = evaluate_composition(micro_bundle, micro_corpus, n_pairs=2, steps=6)
    assert out["pairs"] == 2


def test_evaluate_consistency_runs(micro_bundle, micro_corpus):
    out = evaluate_consistency(micro_bundle, micro_corpus, n_images=2, n_draws=2)
    assert out["draws"] == 2
    assert out["consistency_variance"] >= 0.0
