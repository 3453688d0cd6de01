"""3D lifting by score distillation.

A dense voxel field (softplus density, sigmoid color) is rendered from the
four canonical cameras with emission-absorption compositing and pushed
toward the denoiser's belief: at each step the renders are noised, the
guided model predicts the clean image, and the field regresses toward that
prediction.  The sampled timestep window narrows over the run, so early
steps settle layout and late steps sharpen texture.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .denoiser import from_unit, guided_eps, to_unit
from .world import DEFAULT_BACKGROUND, VIEW_AZIMUTHS_DEG

GRID_SIZE = 48
ELEVATION_DEG = 15.0
CAMERA_RADIUS = 2.2
AZIMUTH_JITTER_DEG = 10.0


class VoxelField(nn.Module):
    """Dense grid over the [-1, 1] cube, indexed [z][y][x]."""

    def __init__(self, grid_size=GRID_SIZE):
        super().__init__()
        self.grid_size = grid_size
        # softplus(-3) is nearly transparent; color raw 0 is mid gray
        self.density_raw = nn.Parameter(
            torch.full((1, 1, grid_size, grid_size, grid_size), -3.0)
        )
        self.color_raw = nn.Parameter(
            torch.zeros(1, 3, grid_size, grid_size, grid_size)
        )

    def sample(self, points):
        """Trilinear density and color at world points (..., 3).

        Activations are applied on the grid before interpolation, so space
        outside the cube stays exactly empty under zero padding.
        """
        shape = points.shape[:-1]
        grid = points.reshape(1, 1, 1, -1, 3).to(self.density_raw.dtype)
        sigma_grid = F.softplus(self.density_raw)
        color_grid = torch.sigmoid(self.color_raw)
        sigma = F.grid_sample(
            sigma_grid, grid, mode="bilinear", padding_mode="zeros",
            align_corners=False,
        ).reshape(*shape)
        color = F.grid_sample(
            color_grid, grid, mode="bilinear", padding_mode="zeros",
            align_corners=False,
        ).reshape(3, *shape).movedim(0, -1)
        return sigma, color

    def to_arrays(self):
        with torch.no_grad():
            return {
                "density": F.softplus(self.density_raw)[0, 0].numpy(),
                "color": torch.sigmoid(self.color_raw)[0].numpy(),
            }

    def save(self, path):
        np.savez_compressed(path, **self.to_arrays())
        return path


def camera_rays(azimuth_deg, elevation_deg=ELEVATION_DEG, image_size=32,
                radius=CAMERA_RADIUS, fov_deg=55.0):
    """Perspective rays for an orbit camera looking at the origin.

    z is up; azimuth 0 puts the camera on the +x axis.  Returns the eye
    (3,) and unit directions (H, W, 3); image rows run top to bottom.
    """
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    eye = torch.tensor([
        radius * math.cos(el) * math.cos(az),
        radius * math.cos(el) * math.sin(az),
        radius * math.sin(el),
    ])
    forward = -eye / eye.norm()
    up_world = torch.tensor([0.0, 0.0, 1.0])
    right = torch.linalg.cross(forward, up_world)
    right = right / right.norm()
    up = torch.linalg.cross(right, forward)
    half = math.tan(math.radians(fov_deg) / 2)
    lin = (torch.arange(image_size) + 0.5) / image_size * 2 - 1
    v, u = torch.meshgrid(-lin * half, lin * half, indexing="ij")
    dirs = forward + u[..., None] * right + v[..., None] * up
    return eye, dirs / dirs.norm(dim=-1, keepdim=True)


def render_field(field, azimuth_deg, elevation_deg=ELEVATION_DEG,
                 image_size=32, n_samples=64, background=DEFAULT_BACKGROUND):
    """Emission-absorption compositing over a constant background.

    Returns (3, H, W) in [0, 1], differentiable in the field parameters.
    """
    eye, dirs = camera_rays(azimuth_deg, elevation_deg, image_size)
    span = math.sqrt(3.0)  # the grid cube's bounding-sphere radius
    near, far = CAMERA_RADIUS - span, CAMERA_RADIUS + span
    step = (far - near) / n_samples
    ts = near + (torch.arange(n_samples) + 0.5) * step
    points = eye + dirs[..., None, :] * ts[:, None]  # (H, W, S, 3)
    sigma, color = field.sample(points)
    alpha = 1.0 - torch.exp(-sigma * step)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha], dim=-1),
        dim=-1,
    )[..., :-1]
    weights = trans * alpha  # (H, W, S)
    rgb = (weights[..., None] * color).sum(dim=-2)
    bg = torch.tensor(background)
    rgb = rgb + (1.0 - weights.sum(dim=-1, keepdim=True)) * bg
    return rgb.movedim(-1, 0)


def view_azimuth(view_index, jitter_deg=0.0):
    return VIEW_AZIMUTHS_DEG[view_index] + jitter_deg


def timestep_window(step, total_steps=2000, narrow_lo=600, narrow_hi=1600,
                    start=0.98, floor=0.02, ceil=0.3):
    """The (lo, hi) timestep fractions sampled at a given step.

    Both bounds start at 0.98; the lower bound reaches its floor after
    narrow_lo steps, the upper its ceiling after narrow_hi, linearly.
    """
    lo = start + (floor - start) * min(step / narrow_lo, 1.0)
    hi = start + (ceil - start) * min(step / narrow_hi, 1.0)
    return lo, max(hi, lo)


def sds_step(field, bundle, schedule, context, null_context, views, azimuths,
             t_frac_range, guidance=7.5, rescale=0.3, generator=None,
             background=DEFAULT_BACKGROUND):
    """One distillation step over a batch of cameras.

    Renders each camera, noises the renders inside the given timestep
    window, and regresses them toward the guided clean-image prediction.
    Returns the scalar loss (graph attached to the field only).
    """
    renders = torch.stack([
        render_field(field, az, background=background) for az in azimuths
    ])
    x = from_unit(renders)
    b = x.shape[0]
    lo, hi = t_frac_range
    t_lo = int(lo * (schedule.steps - 1))
    t_hi = max(int(hi * (schedule.steps - 1)), t_lo)
    t = torch.randint(t_lo, t_hi + 1, (b,), generator=generator)
    eps = torch.randn(x.shape, generator=generator)
    with torch.no_grad():
        xt = schedule.add_noise(x, eps, t)
        eps_hat = guided_eps(
            bundle.denoiser, schedule, xt, t, views, context, null_context,
            guidance, rescale,
        )
        x0_hat = schedule.x0_from_eps(xt, eps_hat, t).clamp(-1.0, 1.0)
    return 0.5 * F.mse_loss(x, x0_hat)


def optimize_3d(bundle, latent_table, steps=2000, guidance=7.5, rescale=0.3,
                lr=0.05, seed=0, grid_size=GRID_SIZE, schedule=None,
                background=DEFAULT_BACKGROUND, log_every=100, on_log=None):
    """Distill a creature defined by part latents into a voxel field.

    latent_table: (M, D_p).  Each step supervises all four canonical
    cameras with fresh azimuth jitter.  Returns (field, history).
    """
    from .training import schedule_from_meta

    if schedule is None:
        schedule = schedule_from_meta(bundle.meta)
    for module in (bundle.latent, bundle.denoiser, bundle.bank):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    with torch.no_grad():
        toks = bundle.latent.tokens_from_latents(
            torch.as_tensor(latent_table, dtype=torch.float32)[None]
        )
        context = bundle.bank.part_context(toks).expand(4, -1, -1)
        null_context = bundle.bank.part_null_context(4)
    field = VoxelField(grid_size)
    opt = torch.optim.Adam(field.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    views = torch.arange(4)
    history = []
    for step in range(steps):
        jitter = (torch.rand(4, generator=g) * 2 - 1) * AZIMUTH_JITTER_DEG
        azimuths = [view_azimuth(v, float(jitter[v])) for v in range(4)]
        window = timestep_window(step, total_steps=steps)
        loss = sds_step(field, bundle, schedule, context, null_context, views,
                        azimuths, window, guidance, rescale, g, background)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            entry = {"step": step, "loss": loss.item(),
                     "t_window": [round(window[0], 4), round(window[1], 4)]}
            history.append(entry)
            if on_log is not None:
                on_log(entry)
    return field, history


def render_turntable(field, frames=12, elevation_deg=ELEVATION_DEG,
                     image_size=32, background=DEFAULT_BACKGROUND):
    """Evenly spaced orbit renders, (frames, 3, H, W) in [0, 1]."""
    with torch.no_grad():
        return torch.stack([
            render_field(field, 360.0 * i / frames, elevation_deg,
                         image_size, background=background)
            for i in range(frames)
        ])


def load_field(path) -> VoxelField:
    data = np.load(path)
    density = torch.from_numpy(data["density"])
    color = torch.from_numpy(data["color"])
    field = VoxelField(density.shape[-1])
    with torch.no_grad():
        # invert the activations so save/load round-trips the rendered look
        eps = 1e-6
        d = density.clamp_min(eps)
        field.density_raw.copy_(
            (d + torch.log(-torch.expm1(-d)))[None, None]
        )
        c = color.clamp(eps, 1 - eps)
        field.color_raw.copy_(torch.log(c / (1 - c))[None])
    return field
