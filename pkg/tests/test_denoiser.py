import numpy as np
import pytest
import torch

from partstudio.denoiser import (
    ATTN_SITES,
    ConditioningBank,
    PartDenoiser,
    adapter_parameters,
    aggregate_attention,
    backbone_parameters,
    ddim_sample,
    ddim_timesteps,
    guided_eps,
    make_schedule,
    normalize_attention,
    timestep_embedding,
)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule()


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return PartDenoiser(context_dim=64)


@pytest.fixture(scope="module")
def bank():
    torch.manual_seed(1)
    return ConditioningBank(species_count=12, part_count=5, token_dim=64)


def _ctx(bank, batch=2):
    torch.manual_seed(2)
    toks = torch.randn(batch, 5, 64)
    return bank.part_context(toks)


class TestSchedule:
    def test_alpha_bar_matches_numpy_oracle(self, schedule):
        betas = np.linspace(1e-4, 0.02, 1000, dtype=np.float64)
        abar = np.cumprod(1.0 - betas)
        assert np.allclose(
            schedule.alphas_cumprod.numpy(), abar, rtol=1e-5, atol=1e-9
        )
        assert abar[-1] == pytest.approx(4.0358e-5, rel=1e-3)

    def test_alpha_bar_monotone(self, schedule):
        d = np.diff(schedule.alphas_cumprod.numpy())
        assert (d < 0).all()

    def test_noising_is_invertible(self, schedule):
        g = torch.Generator().manual_seed(4)
        x0 = torch.randn(3, 3, 32, 32, generator=g)
        eps = torch.randn(3, 3, 32, 32, generator=g)
        t = torch.tensor([10, 500, 990])
        xt = schedule.add_noise(x0, eps, t)
        back = schedule.x0_from_eps(xt, eps, t)
        assert torch.allclose(back, x0, atol=1e-3)
        eps_back = schedule.eps_from_x0(xt, back, t)
        assert torch.allclose(eps_back, eps, atol=1e-3)

    def test_noising_statistics(self, schedule):
        # at t the marginal is N(sqrt(abar) x0, (1-abar) I)
        g = torch.Generator().manual_seed(5)
        x0 = torch.zeros(4096, 3, 4, 4)
        t = torch.full((4096,), 700, dtype=torch.long)
        xt = schedule.add_noise(x0, torch.randn(x0.shape, generator=g), t)
        want = float(1.0 - schedule.alphas_cumprod[700])
        assert xt.var().item() == pytest.approx(want, rel=0.05)

    def test_ddim_ladder(self, schedule):
        ladder = ddim_timesteps(schedule, 50)
        assert ladder[0] == 999 and ladder[-1] == 0
        assert (ladder[:-1] > ladder[1:]).all()


class TestDenoiser:
    def test_output_shape(self, model, bank):
        x = torch.randn(2, 3, 32, 32)
        eps = model(x, torch.tensor([5, 700]), torch.tensor([0, 3]), _ctx(bank))
        assert eps.shape == x.shape

    def test_conditioning_channels_all_matter(self, model, bank):
        torch.manual_seed(6)
        x = torch.randn(1, 3, 32, 32)
        t = torch.tensor([300])
        v = torch.tensor([1])
        ctx = _ctx(bank, 1)
        base = model(x, t, v, ctx)
        assert not torch.allclose(base, model(x, torch.tensor([301]), v, ctx))
        assert not torch.allclose(base, model(x, t, torch.tensor([2]), ctx))
        assert not torch.allclose(base, model(x, t, v, ctx + 0.1))

    def test_token_role_permutation_changes_prediction(self, model, bank):
        # swapping which slot a latent token occupies is a different creature
        torch.manual_seed(7)
        x = torch.randn(1, 3, 32, 32)
        t = torch.tensor([250])
        v = torch.tensor([0])
        toks = torch.randn(1, 5, 64)
        a = model(x, t, v, bank.part_context(toks))
        b = model(x, t, v, bank.part_context(toks[:, [1, 0, 2, 3, 4]]))
        assert not torch.allclose(a, b)

    def test_context_order_invariance_of_attention(self, model, bank):
        # cross-attention itself does not care about sequence order; role
        # identity must therefore live inside the tokens
        torch.manual_seed(8)
        x = torch.randn(1, 3, 32, 32)
        t = torch.tensor([250])
        v = torch.tensor([0])
        ctx = _ctx(bank, 1)
        perm = torch.randperm(ctx.shape[1])
        a = model(x, t, v, ctx)
        b = model(x, t, v, ctx[:, perm])
        assert torch.allclose(a, b, atol=1e-5)

    def test_timestep_embedding(self):
        emb = timestep_embedding(torch.tensor([0, 1, 999]), 128)
        assert emb.shape == (3, 128)
        assert not torch.allclose(emb[0], emb[1])

    def test_attention_maps_recorded(self, model, bank):
        x = torch.randn(2, 3, 32, 32)
        sink = {}
        model(x, torch.tensor([5, 5]), torch.tensor([0, 1]), _ctx(bank), attn_sink=sink)
        assert set(sink) == set(ATTN_SITES)
        assert sink["down16"].shape == (2, 6, 16, 16)
        assert sink["down8"].shape == (2, 6, 8, 8)
        assert sink["mid8"].shape == (2, 6, 8, 8)
        assert sink["up16"].shape == (2, 6, 16, 16)
        for m in sink.values():
            # post-softmax rows: mass over tokens sums to one at every pixel
            assert torch.allclose(m.sum(dim=1), torch.ones_like(m.sum(dim=1)), atol=1e-5)

    def test_feature_maps_match_residual_delta(self, model, bank):
        torch.manual_seed(9)
        x = torch.randn(1, 64, 16, 16)
        ctx = _ctx(bank, 1)
        att = model.attn_down16
        delta = att(x, ctx) - x
        assert torch.allclose(att.features(x, ctx), delta, atol=1e-6)

    def test_feature_maps_cover_all_sites(self, model, bank):
        feats = model.cross_attention_features(
            torch.randn(1, 3, 32, 32), torch.tensor([100]), torch.tensor([0]), _ctx(bank, 1)
        )
        assert set(feats) == set(ATTN_SITES)
        assert feats["down16"].shape == (1, 64, 16, 16)
        assert feats["mid8"].shape == (1, 96, 8, 8)


class TestAdapters:
    def test_fresh_adapters_are_inert(self, bank):
        torch.manual_seed(10)
        a = PartDenoiser(context_dim=64)
        x = torch.randn(1, 3, 32, 32)
        t, v = torch.tensor([100]), torch.tensor([2])
        ctx = _ctx(bank, 1)
        base = a(x, t, v, ctx)
        with torch.no_grad():
            for n, p in adapter_parameters(a).items():
                if n.endswith("lora_a"):
                    p.mul_(3.0)  # harmless while the up projection is zero
        assert torch.equal(a(x, t, v, ctx), base)
        with torch.no_grad():
            for n, p in adapter_parameters(a).items():
                if n.endswith("lora_b"):
                    p.add_(0.05)
        assert not torch.allclose(a(x, t, v, ctx), base)

    def test_adapter_partition(self, model):
        ad = adapter_parameters(model)
        bb = backbone_parameters(model)
        # four sites, four linears each, two tensors per adapter
        assert len(ad) == 32
        assert set(ad) | set(bb) == {n for n, _ in model.named_parameters()}
        assert not set(ad) & set(bb)

    def test_adapter_gradients_flow_to_up_projection(self, model, bank):
        model.zero_grad()
        eps = model(
            torch.randn(1, 3, 32, 32), torch.tensor([50]), torch.tensor([0]), _ctx(bank, 1)
        )
        eps.square().mean().backward()
        for n, p in adapter_parameters(model).items():
            if n.endswith("lora_b"):
                assert p.grad is not None and p.grad.abs().sum() > 0, n
        for n, p in backbone_parameters(model).items():
            assert p.grad is not None, n
        model.zero_grad()


class TestConditioningBank:
    def test_shapes(self, bank):
        ids = torch.tensor([0, 11])
        assert bank.class_context(ids).shape == (2, 1, 64)
        assert bank.class_null_context(2).shape == (2, 1, 64)
        toks = torch.randn(2, 5, 64)
        ctx = bank.part_context(toks)
        assert ctx.shape == (2, 6, 64)
        assert torch.equal(ctx[:, :5], toks)
        assert torch.equal(ctx[0, 5], ctx[1, 5])  # shared global token
        assert bank.part_null_context(2).shape == (2, 6, 64)

    def test_parameter_names(self, bank):
        names = {n for n, _ in bank.named_parameters()}
        assert names == {"class_tokens", "class_null", "global_token", "null_tokens"}


class TestAttentionAggregation:
    def test_aggregate_upsamples_and_averages(self):
        maps = {
            "down16": torch.full((1, 6, 16, 16), 0.1),
            "down8": torch.full((1, 6, 8, 8), 0.3),
            "mid8": torch.full((1, 6, 8, 8), 0.5),
            "up16": torch.full((1, 6, 16, 16), 0.7),
        }
        agg = aggregate_attention(maps, part_count=5)
        assert agg.shape == (1, 5, 16, 16)
        assert torch.allclose(agg, torch.full_like(agg, 0.4))

    def test_normalize_partition_of_unity(self):
        g = torch.Generator().manual_seed(11)
        agg = torch.rand(2, 5, 16, 16, generator=g) + 0.05
        norm = normalize_attention(agg)
        s = norm.sum(dim=1)
        assert torch.allclose(s, torch.ones_like(s), atol=1e-6)

    def test_normalize_survives_zero_mass(self):
        norm = normalize_attention(torch.zeros(1, 5, 16, 16))
        assert torch.isfinite(norm).all()
        assert norm.abs().sum() == 0


class TestGuidance:
    def test_unit_guidance_is_conditional_branch(self, model, bank, schedule):
        torch.manual_seed(12)
        xt = torch.randn(2, 3, 32, 32)
        t = torch.tensor([400, 400])
        v = torch.tensor([0, 1])
        ctx_c = _ctx(bank)
        ctx_u = bank.part_null_context(2)
        eps = guided_eps(model, schedule, xt, t, v, ctx_c, ctx_u, guidance=1.0)
        direct = model(xt, t, v, ctx_c)
        assert torch.allclose(eps, direct, atol=1e-5)

    def test_zero_guidance_is_null_branch(self, model, bank, schedule):
        torch.manual_seed(13)
        xt = torch.randn(2, 3, 32, 32)
        t = torch.tensor([400, 400])
        v = torch.tensor([0, 1])
        eps = guided_eps(
            model, schedule, xt, t, v, _ctx(bank), bank.part_null_context(2), guidance=0.0
        )
        direct = model(xt, t, v, bank.part_null_context(2))
        assert torch.allclose(eps, direct, atol=1e-5)

    def test_rescale_pulls_std_toward_conditional(self, model, bank, schedule):
        torch.manual_seed(14)
        xt = torch.randn(2, 3, 32, 32)
        t = torch.tensor([600, 600])
        v = torch.tensor([2, 3])
        ctx_c, ctx_u = _ctx(bank), bank.part_null_context(2)
        eps_plain = guided_eps(model, schedule, xt, t, v, ctx_c, ctx_u, 7.5, rescale=0.0)
        eps_resc = guided_eps(model, schedule, xt, t, v, ctx_c, ctx_u, 7.5, rescale=1.0)
        eps_c = model(xt, t, v, ctx_c)
        std_pos = schedule.x0_from_eps(xt, eps_c, t).std(dim=(1, 2, 3))
        std_plain = schedule.x0_from_eps(xt, eps_plain, t).std(dim=(1, 2, 3))
        std_resc = schedule.x0_from_eps(xt, eps_resc, t).std(dim=(1, 2, 3))
        assert torch.allclose(std_resc, std_pos, rtol=1e-4)
        assert not torch.allclose(std_plain, std_pos, rtol=1e-4)

    def test_context_length_mismatch_rejected(self, model, bank, schedule):
        xt = torch.randn(1, 3, 32, 32)
        with pytest.raises(ValueError):
            guided_eps(
                model, schedule, xt, torch.tensor([10]), torch.tensor([0]),
                _ctx(bank, 1), bank.class_null_context(1), 7.5,
            )


class TestSampling:
    def test_ddim_deterministic(self, model, bank, schedule):
        ctx_c, ctx_u = _ctx(bank), bank.part_null_context(2)
        view = torch.tensor([0, 2])
        a = ddim_sample(model, schedule, ctx_c, ctx_u, view, steps=5,
                        generator=torch.Generator().manual_seed(21))
        b = ddim_sample(model, schedule, ctx_c, ctx_u, view, steps=5,
                        generator=torch.Generator().manual_seed(21))
        assert torch.equal(a, b)
        c = ddim_sample(model, schedule, ctx_c, ctx_u, view, steps=5,
                        generator=torch.Generator().manual_seed(22))
        assert not torch.equal(a, c)

    def test_ddim_records_attention(self, model, bank, schedule):
        carrier = {}
        out = ddim_sample(
            model, schedule, _ctx(bank, 1), bank.part_null_context(1),
            torch.tensor([1]), steps=3,
            generator=torch.Generator().manual_seed(23), attn_carrier=carrier,
        )
        assert out.shape == (1, 3, 32, 32)
        assert carrier["maps"].shape == (1, 5, 16, 16)
        s = carrier["maps"].sum(dim=1)
        assert torch.allclose(s, torch.ones_like(s), atol=1e-5)
