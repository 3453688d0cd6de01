"""Checkpoint archive: header.json + tensors/<name>.npy inside a zip.

Latent-space tensors are stored under their bare parameter names
(species_embed, f.weight, pe, g.layer1.weight, ...), the denoiser under
denoiser.*, and the conditioning tokens under cond.*.  Zip entries carry a
fixed timestamp and sorted order, so saving the same model twice yields
byte-identical files; the service's content-addressed store relies on that.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .denoiser import ConditioningBank, PartDenoiser
from .latent import PartLatentModel

FORMAT = "partstudio-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(Exception):
    pass


def _collect_tensors(latent_model, denoiser, bank):
    tensors = {}
    for name, p in latent_model.named_parameters():
        tensors[name] = p.detach().cpu().numpy()
    for name, p in denoiser.named_parameters():
        tensors[f"denoiser.{name}"] = p.detach().cpu().numpy()
    for name, p in bank.named_parameters():
        tensors[f"cond.{name}"] = p.detach().cpu().numpy()
    return tensors


def _write_entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(path, latent_model, denoiser, bank, meta=None, extra_state=None):
    """Write the three modules plus optional metadata and training state.

    extra_state, if given, is a dict of picklable blobs (optimizer state,
    RNG snapshots) stored under state/<key>.pt; they are not part of the
    stable tensor contract.
    """
    path = Path(path)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "latent": {
            "species_count": latent_model.species_count,
            "part_count": latent_model.part_count,
            "species_dim": latent_model.species_dim,
            "part_dim": latent_model.part_dim,
            "token_dim": latent_model.token_dim,
        },
        "denoiser": {
            "context_dim": denoiser.context_dim,
            "channels": [
                denoiser.conv_in.out_channels,
                denoiser.pool1.out_channels,
                denoiser.pool2.out_channels,
            ],
            "time_dim": denoiser.time_dim,
            "views": denoiser.view_embed.num_embeddings,
            "heads": denoiser.attn_down16.heads,
            "adapter_rank": denoiser.attn_down16.to_q.rank,
        },
        "meta": meta or {},
    }
    tensors = _collect_tensors(latent_model, denoiser, bank)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "header.json", json.dumps(header, indent=1, sort_keys=True))
        for name in sorted(tensors):
            buf = io.BytesIO()
            np.save(buf, tensors[name])
            _write_entry(zf, f"tensors/{name}.npy", buf.getvalue())
        for key in sorted(extra_state or {}):
            buf = io.BytesIO()
            torch.save(extra_state[key], buf)
            _write_entry(zf, f"state/{key}.pt", buf.getvalue())
    tmp.replace(path)  # atomic: never leave a half-written checkpoint
    return path


@dataclass
class LoadedCheckpoint:
    latent: PartLatentModel
    denoiser: PartDenoiser
    bank: ConditioningBank
    header: dict
    path: Path

    @property
    def meta(self):
        return self.header.get("meta", {})


def load_checkpoint(path) -> LoadedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path} is not a {FORMAT} archive")
            tensors = {}
            for entry in zf.namelist():
                if entry.startswith("tensors/") and entry.endswith(".npy"):
                    name = entry[len("tensors/"):-len(".npy")]
                    tensors[name] = np.load(io.BytesIO(zf.read(entry)))
    except (zipfile.BadZipFile, KeyError) as err:
        raise CheckpointError(f"unreadable checkpoint {path}: {err}") from err

    lat_cfg = header["latent"]
    den_cfg = header["denoiser"]
    latent = PartLatentModel(**lat_cfg)
    denoiser = PartDenoiser(
        context_dim=den_cfg["context_dim"],
        channels=tuple(den_cfg["channels"]),
        time_dim=den_cfg["time_dim"],
        views=den_cfg["views"],
        heads=den_cfg["heads"],
        adapter_rank=den_cfg["adapter_rank"],
    )
    bank = ConditioningBank(
        species_count=lat_cfg["species_count"],
        part_count=lat_cfg["part_count"],
        token_dim=lat_cfg["token_dim"],
    )

    def fill(module, prefix):
        with torch.no_grad():
            for name, p in module.named_parameters():
                key = prefix + name
                if key not in tensors:
                    raise CheckpointError(f"checkpoint missing tensor {key}")
                arr = tensors.pop(key)
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(
                        f"tensor {key} has shape {arr.shape}, expected {tuple(p.shape)}"
                    )
                p.copy_(torch.from_numpy(arr))

    fill(latent, "")
    fill(denoiser, "denoiser.")
    fill(bank, "cond.")
    if tensors:
        raise CheckpointError(f"checkpoint has unknown tensors: {sorted(tensors)}")
    latent.eval()
    denoiser.eval()
    bank.eval()
    return LoadedCheckpoint(latent=latent, denoiser=denoiser, bank=bank,
                            header=header, path=path)


def load_extra_state(path):
    """Read the state/<key>.pt blobs back, if any."""
    out = {}
    with zipfile.ZipFile(path) as zf:
        for entry in zf.namelist():
            if entry.startswith("state/") and entry.endswith(".pt"):
                key = entry[len("state/"):-len(".pt")]
                out[key] = torch.load(io.BytesIO(zf.read(entry)), weights_only=False)
    return out
