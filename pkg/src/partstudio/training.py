"""Two-stage training.

Stage one teaches the denoiser backbone multi-view generation with one class
token per species, plus a learned null token for guidance.  Stage two
freezes the backbone, switches conditioning to part tokens, and trains only
the low-rank adapters, the part latent space, and the stage-two token bank,
under the full objective (noise prediction, attention grounding, feature
consistency, latent prior).

Runs are reproducible: every stochastic draw comes from a generator seeded
by (config seed, stage, epoch), so a resumed run and an uninterrupted run
produce identical checkpoints.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from . import world
from .checkpoint import load_checkpoint, load_extra_state, save_checkpoint
from .denoiser import (
    ConditioningBank,
    PartDenoiser,
    adapter_parameters,
    aggregate_attention,
    backbone_parameters,
    ddim_unroll,
    from_unit,
    guided_eps,
    make_schedule,
    normalize_attention,
    to_unit,
)
from .latent import PartLatentModel
from .losses import (
    attention_loss,
    consistency_loss,
    diffusion_loss,
    downsample_masks,
    latent_regularizer,
)

VIEW_FLIP = (0, 3, 2, 1)  # horizontal flip swaps the two profile views


@dataclass
class TrainConfig:
    data_root: str
    run_dir: str
    init_checkpoint: str = None  # stage-one weights, required for stage two
    epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-4
    latent_lr: float = None  # stage two only: rate for the fresh latent path
    lr_decay: str = "none"  # "none" or "cosine" (per-epoch, resume-safe)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    lambda_attn: float = 0.01
    lambda_cl: float = 0.001
    lambda_reg: float = 0.0001
    p_uncond: float = 0.1
    flip_augment: bool = True
    species_dim: int = 768
    part_dim: int = 4
    token_dim: int = 64
    channels: tuple = (32, 64, 96)
    time_dim: int = 128
    heads: int = 2
    adapter_rank: int = 4
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    log_every: int = 25

    def to_json(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        if "channels" in obj:
            obj["channels"] = tuple(obj["channels"])
        return cls(**obj)

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def schedule_from_config(config):
    return make_schedule(config.schedule_steps, config.beta_start, config.beta_end)


def schedule_from_meta(meta):
    sched = meta.get("schedule", {})
    return make_schedule(
        sched.get("steps", 1000), sched.get("beta_start", 1e-4),
        sched.get("beta_end", 0.02),
    )


# --- data ----------------------------------------------------------------


@dataclass
class CorpusTensors:
    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    masks: torch.Tensor  # (N, M, 16, 16) binary, attention resolution
    species: torch.Tensor  # (N,)
    views: torch.Tensor  # (N,)
    species_count: int
    part_count: int

    def __len__(self):
        return self.images.shape[0]


def load_corpus_tensors(manifest, split="train") -> CorpusTensors:
    records = [r for r in manifest.records if r["split"] == split]
    if not records:
        raise ValueError(f"manifest has no {split!r} records")
    images, masks, species, views = [], [], [], []
    for rec in records:
        img = world.load_record(manifest, rec)
        images.append(torch.from_numpy(img.pixels).permute(2, 0, 1))
        masks.append(torch.from_numpy(img.masks.copy()))
        species.append(rec["species_id"])
        views.append(rec["view_index"])
    return CorpusTensors(
        images=from_unit(torch.stack(images)),
        masks=downsample_masks(torch.stack(masks)),
        species=torch.tensor(species, dtype=torch.long),
        views=torch.tensor(views, dtype=torch.long),
        species_count=manifest.species_count,
        part_count=manifest.part_count,
    )


def flip_horizontal(images, masks, views):
    """Mirror a batch; profile views swap sides, frontal views keep labels."""
    table = torch.tensor(VIEW_FLIP, dtype=torch.long)
    return images.flip(-1), masks.flip(-1), table[views]


# --- model assembly -------------------------------------------------------


def build_models(config, species_count, part_count):
    torch.manual_seed(config.seed)
    latent = PartLatentModel(
        species_count=species_count,
        part_count=part_count,
        species_dim=config.species_dim,
        part_dim=config.part_dim,
        token_dim=config.token_dim,
    )
    den = PartDenoiser(
        context_dim=config.token_dim,
        channels=config.channels,
        time_dim=config.time_dim,
        views=world.VIEW_COUNT,
        heads=config.heads,
        adapter_rank=config.adapter_rank,
    )
    bank = ConditioningBank(
        species_count=species_count, part_count=part_count,
        token_dim=config.token_dim,
    )
    return latent, den, bank


def stage_parameters(stage, latent, den, bank):
    """The parameters a stage trains, as a name -> tensor dict."""
    if stage == 1:
        params = {f"denoiser.{n}": p for n, p in backbone_parameters(den).items()}
        params["cond.class_tokens"] = bank.class_tokens
        params["cond.class_null"] = bank.class_null
        return params
    params = {f"denoiser.{n}": p for n, p in adapter_parameters(den).items()}
    params.update({n: p for n, p in latent.named_parameters()})
    params["cond.global_token"] = bank.global_token
    params["cond.null_tokens"] = bank.null_tokens
    return params


def apply_stage_freeze(stage, latent, den, bank):
    trained = set(stage_parameters(stage, latent, den, bank))
    for prefix, module in (("", latent), ("denoiser.", den), ("cond.", bank)):
        for n, p in module.named_parameters():
            p.requires_grad_(prefix + n in trained)


def parameter_groups(trained, config, stage):
    """Optimizer groups for a stage's trained parameters.

    The stage-two latent path starts from scratch while the adapters sit on
    a pretrained backbone, so it may run at its own (usually faster) rate.
    """
    if stage != 2 or config.latent_lr is None:
        return [{"params": list(trained.values()), "lr": config.lr}]
    pretrained = ("denoiser.", "cond.")
    return [
        {
            "params": [p for n, p in trained.items() if n.startswith(pretrained)],
            "lr": config.lr,
        },
        {
            "params": [p for n, p in trained.items() if not n.startswith(pretrained)],
            "lr": config.latent_lr,
        },
    ]


# --- the loop -------------------------------------------------------------


class MetricsLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, row):
        with self.path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")


def _train_step_stage1(batch, models, schedule, config, g):
    latent, den, bank = models
    imgs, _, species, views = batch
    b = imgs.shape[0]
    t = torch.randint(0, schedule.steps, (b,), generator=g)
    eps = torch.randn(imgs.shape, generator=g)
    xt = schedule.add_noise(imgs, eps, t)
    ctx = bank.class_context(species)
    drop = torch.rand(b, generator=g) < config.p_uncond
    ctx = torch.where(drop[:, None, None], bank.class_null_context(b), ctx)
    loss = diffusion_loss(den(xt, t, views, ctx), eps)
    return loss, {"loss_diff": loss.item(), "loss_attn": 0.0,
                  "loss_cl": 0.0, "loss_reg": 0.0}


def _train_step_stage2(batch, models, schedule, config, g):
    latent, den, bank = models
    imgs, masks, species, views = batch
    b = imgs.shape[0]
    t = torch.randint(0, schedule.steps, (b,), generator=g)
    eps = torch.randn(imgs.shape, generator=g)
    xt = schedule.add_noise(imgs, eps, t)
    ctx_cond = bank.part_context(latent.tokens(species))
    drop = torch.rand(b, generator=g) < config.p_uncond
    ctx = torch.where(drop[:, None, None], bank.part_null_context(b), ctx_cond)

    sink = {} if config.lambda_attn > 0 else None
    loss_diff = diffusion_loss(den(xt, t, views, ctx, attn_sink=sink), eps)
    loss = loss_diff
    parts = {"loss_diff": loss_diff.item(), "loss_attn": 0.0,
             "loss_cl": 0.0, "loss_reg": 0.0}
    if config.lambda_attn > 0:
        norm = normalize_attention(
            aggregate_attention(sink, latent.part_count)
        )
        l_attn = attention_loss(norm, masks, sample_weight=(~drop).float())
        loss = loss + config.lambda_attn * l_attn
        parts["loss_attn"] = l_attn.item()
    if config.lambda_cl > 0:
        e1 = torch.randn(imgs.shape, generator=g)
        e2 = torch.randn(imgs.shape, generator=g)
        l_cl = consistency_loss(den, schedule, imgs, t, views, ctx_cond, e1, e2)
        loss = loss + config.lambda_cl * l_cl
        parts["loss_cl"] = l_cl.item()
    if config.lambda_reg > 0:
        l_reg = latent_regularizer(latent.species_latents(species))
        loss = loss + config.lambda_reg * l_reg
        parts["loss_reg"] = l_reg.item()
    return loss, parts


def run_training(config, stage, resume=None):
    """Train one stage to completion; returns the checkpoint path.

    resume, if given, must be a checkpoint written by this function for the
    same stage; training continues at the next epoch.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / f"config_stage{stage}.json").write_text(
        json.dumps(config.to_json(), indent=1)
    )
    manifest = world.load_manifest(config.data_root)
    data = load_corpus_tensors(manifest)
    schedule = schedule_from_config(config)

    start_epoch, global_step = 0, 0
    opt_state = None
    if resume is not None:
        bundle = load_checkpoint(resume)
        latent, den, bank = bundle.latent, bundle.denoiser, bundle.bank
        state = load_extra_state(resume)
        opt_state = state.get("optim")
        start_epoch = int(state.get("next_epoch", 0))
        global_step = int(state.get("global_step", 0))
    elif stage == 2:
        if not config.init_checkpoint:
            raise ValueError("stage 2 needs init_checkpoint (stage-one weights)")
        bundle = load_checkpoint(config.init_checkpoint)
        latent, den, bank = bundle.latent, bundle.denoiser, bundle.bank
        with torch.no_grad():
            # start the stage-two tokens inside the geometry stage one
            # carved out: the global token plays the class token's role
            bank.global_token.copy_(bank.class_tokens.mean(dim=0, keepdim=True))
            bank.null_tokens.copy_(bank.class_null.expand_as(bank.null_tokens))
    else:
        latent, den, bank = build_models(config, data.species_count, data.part_count)

    apply_stage_freeze(stage, latent, den, bank)
    trained = stage_parameters(stage, latent, den, bank)
    groups = parameter_groups(trained, config, stage)
    base_rates = [group["lr"] for group in groups]
    opt = torch.optim.AdamW(groups, weight_decay=config.weight_decay)
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    log = MetricsLog(run_dir / "metrics.jsonl")
    ckpt_path = run_dir / f"stage{stage}.ckpt"
    step_fn = _train_step_stage1 if stage == 1 else _train_step_stage2
    models = (latent, den, bank)
    for m in models:
        m.train()
    started = time.monotonic()
    n_batches = len(data) // config.batch_size
    for epoch in range(start_epoch, config.epochs):
        if config.lr_decay == "cosine":
            factor = 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
            for group, base in zip(opt.param_groups, base_rates):
                group["lr"] = base * factor
        g = torch.Generator().manual_seed(config.seed + 100_000 * stage + epoch)
        order = torch.randperm(len(data), generator=g)
        for bi in range(n_batches):
            idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
            imgs = data.images[idx]
            masks = data.masks[idx]
            species = data.species[idx]
            views = data.views[idx]
            if config.flip_augment:
                do = torch.rand(len(idx), generator=g) < 0.5
                if do.any():
                    fi, fm, fv = flip_horizontal(imgs[do], masks[do], views[do])
                    imgs = imgs.clone(); masks = masks.clone(); views = views.clone()
                    imgs[do], masks[do], views[do] = fi, fm, fv
            loss, parts = step_fn((imgs, masks, species, views), models,
                                  schedule, config, g)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(trained.values(), config.grad_clip)
            opt.step()
            global_step += 1
            if global_step % config.log_every == 0 or bi == n_batches - 1:
                log.append({
                    "stage": stage, "epoch": epoch, "step": global_step,
                    "loss": loss.item(), **parts,
                    "lr": opt.param_groups[0]["lr"],
                    "seconds": round(time.monotonic() - started, 3),
                })
        save_checkpoint(
            ckpt_path, latent, den, bank,
            meta={
                "stage": stage,
                "epochs_done": epoch + 1,
                "config": config.to_json(),
                "schedule": {
                    "steps": config.schedule_steps,
                    "beta_start": config.beta_start,
                    "beta_end": config.beta_end,
                },
                "species_count": data.species_count,
                "part_count": data.part_count,
            },
            extra_state={
                "optim": opt.state_dict(),
                "next_epoch": epoch + 1,
                "global_step": global_step,
            },
        )
    for m in models:
        m.eval()
    return ckpt_path


# --- inversion ------------------------------------------------------------


def invert_image(bundle, images, views, steps=1000, lr=None, seed=0,
                 schedule=None, guidance=3.0, rescale=0.3, bank_size=16,
                 init=None, replay_noise=None, replay_steps=50):
    """Recover part latents that reproduce the given views.

    images: (K, 3, H, W) in [0, 1]; views: (K,) camera indices.  Everything
    but a free (M, D_p) latent table is frozen.

    Two objectives, picked by what the caller knows about the image:

    - replay_noise given (K, 3, H, W): the image came out of this system and
      its provenance pins the canvas the sampler started from, so the whole
      deterministic trajectory is rerun differentiably and compared to the
      target in pixels.  The source latents are this objective's exact
      minimum.  guidance/rescale/replay_steps must repeat the generation
      settings.

    - otherwise: denoising error over a fixed bank of noised copies, one per
      image and bank timestep, drawn once up front (redrawing every step
      buries the latent signal under objective jitter).  Predictions run
      through the same guided predictor the sampler uses, since generated
      images carry its sharpening and a bare conditional pass misattributes
      that to the latents.  Unless an explicit (M, D_p) init is given, the
      catalog's nominal latents and the zero table are scored against the
      bank and the best one seeds the descent.  Identifies the right species
      but not the exact latents; see the replay mode for that.
    """
    latent, den, cond = bundle.latent, bundle.denoiser, bundle.bank
    for module in (latent, den, cond):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    if schedule is None:
        schedule = schedule_from_meta(bundle.meta)
    images = torch.as_tensor(images, dtype=torch.float32)
    views = torch.as_tensor(views, dtype=torch.long)
    k = images.shape[0]

    if lr is None:
        # the replay basin has flat directions that want longer strides
        lr = 0.3 if replay_noise is not None else 0.05

    if replay_noise is not None:
        canvas = torch.as_tensor(replay_noise, dtype=torch.float32)

        def objective(table, step):
            toks = latent.tokens_from_latents(table[None].expand(k, -1, -1))
            x = ddim_unroll(den, schedule, canvas, views,
                            cond.part_context(toks),
                            cond.part_null_context(k),
                            replay_steps, guidance, rescale)
            return (to_unit(x) - images).square().mean()

        if init is None:
            init = torch.zeros(latent.part_count, latent.part_dim)
    else:
        x0 = from_unit(images)
        g = torch.Generator().manual_seed(seed)
        # image-major bank: entry i * bank_size + j noises image i at stratum j
        t_lo, t_hi = int(0.02 * schedule.steps), int(0.8 * schedule.steps)
        tb = torch.linspace(t_lo, t_hi, bank_size).long().repeat(k)
        xb = x0.repeat_interleave(bank_size, dim=0)
        vb = views.repeat_interleave(bank_size)
        eps = torch.randn(xb.shape, generator=g)
        xt = schedule.add_noise(xb, eps, tb)

        def bank_loss(tables, idx):
            n = idx.shape[0]
            toks = latent.tokens_from_latents(
                tables[:, None].expand(-1, n, -1, -1)
                .reshape(-1, *tables.shape[1:])
            )
            ctx = cond.part_context(toks)
            eps_hat = guided_eps(den, schedule,
                                 xt[idx].repeat(tables.shape[0], 1, 1, 1),
                                 tb[idx].repeat(tables.shape[0]),
                                 vb[idx].repeat(tables.shape[0]),
                                 ctx, cond.part_null_context(ctx.shape[0]),
                                 guidance, rescale)
            err = (eps_hat - eps[idx].repeat(tables.shape[0], 1, 1, 1)) ** 2
            return err.reshape(tables.shape[0], -1).mean(dim=1)

        # rotate t-stratified quarters of the bank so a step costs a quarter
        # of a full pass while every stratum still speaks within four steps
        phases = min(4, bank_size)
        offsets = torch.arange(k)[:, None] * bank_size
        slices = [(offsets + torch.arange(p, bank_size, phases)).reshape(-1)
                  for p in range(phases)]

        def objective(table, step):
            return bank_loss(table[None], slices[step % phases])[0]

        if init is None:
            candidates = torch.cat([
                torch.zeros(1, latent.part_count, latent.part_dim),
                latent.all_species_latents().detach(),
            ])
            with torch.no_grad():
                scores = bank_loss(candidates, torch.arange(k * bank_size))
            init = candidates[int(scores.argmin())]

    table = nn.Parameter(init.clone())
    opt = torch.optim.Adam([table], lr=lr)
    history = []
    for step in range(steps):
        # hold the base rate for most of the run, then cosine down to a
        # small floor for the final polish
        u = max(0.0, step / steps - 0.6) / 0.4
        decay = 0.5 * (1.0 + math.cos(math.pi * u))
        for group in opt.param_groups:
            group["lr"] = lr * (0.02 + 0.98 * decay)
        loss = objective(table, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return table.detach().clone(), history
