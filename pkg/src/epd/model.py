"""The four networks, the replay buffer and the schedule, with checkpointing.

Checkpoint directory layout (format version 1)::

    manifest.json   format, version, stage marker, config hash, module hashes
    config.cfg      flat key = value dump of the producing config
    params.bin      named parameter blocks, each with a shape header
    buffer.bin      replay buffer: magic, (capacity, size, cursor, dim), entries
    schedule.json   diffusion schedule endpoints
    losses.csv      per-step training losses (when produced by training)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import Config
from .diffusion import Denoiser, DenoiserConfig, DiffusionSchedule, make_schedule
from .distribution import TrajectoryDistributionModel
from .energy import EnergyModel, ReplayBuffer
from .guidance import GuidanceEncoder
from .nn import Module
from .rng import make_rng

FORMAT = "epd-checkpoint"
VERSION = 1
BLOCK_MAGIC = b"EPDPARM1"


class CheckpointError(ValueError):
    pass


class EPDModel:
    """``td`` (alpha), ``gg`` (beta), ``ebm`` (gamma), ``denoiser`` (delta)."""

    def __init__(self, config: Config):
        config.validate()
        self.config = config
        m, d = config.model, config.data
        seed = config.train.seed
        z_dim = 5 * d.t_future
        self.td = TrajectoryDistributionModel(make_rng(seed, "init", "td"), d.t_future, m.td_hidden,
                                              m.td_head_hidden, m.td_use_neighbors)
        self.gg = GuidanceEncoder(make_rng(seed, "init", "gg"), m.gg_hidden, m.gg_feature_dim, m.gg_heads,
                                  m.gg_share_recurrent)
        self.ebm = EnergyModel(make_rng(seed, "init", "ebm"), z_dim, self.gg.output_dim, m.energy_hidden,
                               m.encoder_hidden, config.langevin)
        dc = config.diffusion
        self.denoiser = Denoiser(make_rng(seed, "init", "denoiser"), DenoiserConfig(
            d.t_future, self.gg.output_dim, dc.d_model, dc.heads, dc.layers, dc.ffn, dc.time_dim))
        self.schedule: DiffusionSchedule = make_schedule(dc.T, dc.beta_start, dc.beta_end)
        self.buffer = ReplayBuffer(z_dim, m.buffer_capacity)
        self.stages_completed: list[int] = []

    @property
    def z_dim(self) -> int:
        return self.ebm.z_dim

    @property
    def stage(self) -> int:
        return max(self.stages_completed, default=0)

    def modules(self) -> dict[str, Module]:
        return {"td": self.td, "gg": self.gg, "ebm": self.ebm, "denoiser": self.denoiser}

    def fingerprints(self) -> dict[str, str]:
        return {name: m.fingerprint() for name, m in self.modules().items()}

    def require_stages(self, needed, purpose: str) -> None:
        missing = sorted(set(needed) - set(self.stages_completed))
        if missing:
            raise CheckpointError(f"{purpose} needs training stages {missing}; checkpoint has {self.stages_completed}")

    def copy_buffer(self) -> ReplayBuffer:
        return ReplayBuffer.from_bytes(self.buffer.to_bytes())

    # persistence
    def save(self, path, losses: list[dict] | None = None) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        blocks = {f"{mod}/{name}": t.data for mod, m in self.modules().items() for name, t in m.params.items()}
        (path / "params.bin").write_bytes(encode_blocks(blocks))
        (path / "buffer.bin").write_bytes(self.buffer.to_bytes())
        (path / "schedule.json").write_text(self.schedule.to_json() + "\n")
        self.config.save(path / "config.cfg")
        manifest = {
            "format": FORMAT,
            "version": VERSION,
            "stages_completed": self.stages_completed,
            "stage": self.stage,
            "config_hash": self.config.hash(),
            "module_hashes": self.fingerprints(),
            "blocks": {k: list(v.shape) for k, v in blocks.items()},
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if losses is not None:
            write_losses(losses, path / "losses.csv")
        return path

    @classmethod
    def load(cls, path) -> "EPDModel":
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
        except FileNotFoundError as exc:
            raise CheckpointError(f"{path} is not a checkpoint directory") from exc
        if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
            raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')} v{manifest.get('version')}")
        cfg = config_mod.load(path / "config.cfg")
        if cfg.hash() != manifest["config_hash"]:
            raise CheckpointError("config hash does not match the manifest")
        model = cls(cfg)
        blocks = decode_blocks((path / "params.bin").read_bytes())
        for mod, m in model.modules().items():
            m.load_state_dict({k.split("/", 1)[1]: v for k, v in blocks.items() if k.startswith(mod + "/")})
        for name, arr in blocks.items():
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"non-finite parameter block {name}")
        model.buffer = ReplayBuffer.from_bytes((path / "buffer.bin").read_bytes())
        model.schedule = DiffusionSchedule.from_json((path / "schedule.json").read_text())
        model.stages_completed = list(manifest["stages_completed"])
        if model.fingerprints() != manifest["module_hashes"]:
            raise CheckpointError("parameter hashes do not match the manifest")
        return model


def encode_blocks(blocks: dict[str, np.ndarray]) -> bytes:
    out = [BLOCK_MAGIC, struct.pack("<q", len(blocks))]
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_blocks(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:8] != BLOCK_MAGIC:
        raise CheckpointError("params.bin: bad magic")
    (count,) = struct.unpack_from("<q", raw, 8)
    pos = 16
    blocks = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return blocks


def write_losses(rows: list[dict], path) -> None:
    keys = ["stage", "step", "loss"]
    extra = sorted({k for r in rows for k in r} - set(keys))
    with open(path, "w") as f:
        f.write(",".join(keys + extra) + "\n")
        for r in rows:
            f.write(",".join(repr(r.get(k, "")) if isinstance(r.get(k), float) else str(r.get(k, "")) for k in keys + extra) + "\n")
