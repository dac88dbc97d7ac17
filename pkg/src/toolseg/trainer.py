"""Alternating generator/discriminator optimization with replay buffers.

One step translates an image to an annotation and back, and an annotation to
an image and back, updates both generators against frozen discriminators,
then updates each discriminator on a real sample and a buffered fake.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import (LossRecord, LossWeights, cycle_consistency_loss, discriminator_loss,
                     edge_consistency_loss, full_objective, generator_adversarial_loss)
from .networks import (DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator,
                       load_network, network_from_payload, network_payload)
from .serialization import FormatError, pack, prefixed, read_meta, subtree, unpack, write_atomic
from .synthdata import DatasetManifest, UnpairedSampler

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "toolseg-train-state"
CHECKPOINT_VERSION = 1
LATEST = "latest.safetensors"
LOG_COLUMNS = ("epoch", "step") + LossRecord.names() + ("lr",)


class CheckpointError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, epoch: int | None = None, step: int | None = None):
        self.term, self.epoch, self.step = term, epoch, step
        where = "" if epoch is None else f" at epoch {epoch}, step {step}"
        super().__init__(f"non-finite loss term {term!r}{where}")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 1
    n_fixed_epochs: int = 20
    n_decay_epochs: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    buffer_capacity: int = 50
    seed: int = 0
    gen_width: int = 64
    disc_width: int = 64
    n_residual_blocks: int = 9
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.n_fixed_epochs < 0 or self.n_decay_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.buffer_capacity < 0:
            raise ValueError("buffer_capacity must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    @property
    def n_epochs(self) -> int:
        return self.n_fixed_epochs + self.n_decay_epochs

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "weights" in data:
            data["weights"] = LossWeights(**data["weights"])
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Constant for the fixed epochs, then linear decay that would hit zero one epoch past the end."""
    if not 0 <= epoch < cfg.n_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.n_epochs})")
    if epoch < cfg.n_fixed_epochs:
        return cfg.base_lr
    return cfg.base_lr * (1.0 - (epoch - cfg.n_fixed_epochs + 1) / (cfg.n_decay_epochs + 1))


class ReplayBuffer:
    """Pool of past generator outputs shown to the discriminator."""

    def __init__(self, capacity: int = 50):
        self.capacity = capacity
        self.items: list[torch.Tensor] = []

    def __len__(self):
        return len(self.items)

    def query(self, item: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        if self.capacity == 0:
            return item
        item = item.detach().clone()
        if len(self.items) < self.capacity:
            self.items.append(item)
            return item
        if rng.random() < 0.5:
            return item
        k = int(rng.integers(len(self.items)))
        old, self.items[k] = self.items[k], item
        return old


def buffer_query(buffer: ReplayBuffer, item, rng: np.random.Generator):
    return buffer.query(item, rng)


@dataclass
class TrainState:
    config: TrainConfig
    G_A: torch.nn.Module
    G_I: torch.nn.Module
    D_A: torch.nn.Module
    D_I: torch.nn.Module
    opt_G: torch.optim.Optimizer
    opt_D: torch.optim.Optimizer
    buffer_A: ReplayBuffer
    buffer_I: ReplayBuffer
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    @property
    def generators(self):
        return self.G_A, self.G_I

    @property
    def discriminators(self):
        return self.D_A, self.D_I


def _make_optimizers(cfg, nets):
    g = torch.optim.Adam(list(nets[0].parameters()) + list(nets[1].parameters()),
                         lr=cfg.base_lr, betas=cfg.betas)
    d = torch.optim.Adam(list(nets[2].parameters()) + list(nets[3].parameters()),
                         lr=cfg.base_lr, betas=cfg.betas)
    return g, d


def init_state(cfg: TrainConfig, image_channels: int = 3, annotation_channels: int = 1) -> TrainState:
    """Fresh networks, optimizers and buffers, all seeded from ``cfg.seed``."""
    base = 4 * int(cfg.seed)
    g_a = build_generator(GeneratorSpec(image_channels, annotation_channels, cfg.gen_width,
                                        cfg.n_residual_blocks), base, "G_A")
    g_i = build_generator(GeneratorSpec(annotation_channels, image_channels, cfg.gen_width,
                                        cfg.n_residual_blocks), base + 1, "G_I")
    d_a = build_discriminator(DiscriminatorSpec(annotation_channels, cfg.disc_width), base + 2, "D_A")
    d_i = build_discriminator(DiscriminatorSpec(image_channels, cfg.disc_width), base + 3, "D_I")
    opt_g, opt_d = _make_optimizers(cfg, (g_a, g_i, d_a, d_i))
    return TrainState(cfg, g_a, g_i, d_a, d_i, opt_g, opt_d, ReplayBuffer(cfg.buffer_capacity),
                      ReplayBuffer(cfg.buffer_capacity), np.random.default_rng([int(cfg.seed), 7]))


def to_tensor(grid) -> torch.Tensor:
    """``H x W x C`` array (or an existing ``N x C x H x W`` tensor) to a float32 batch of one."""
    if isinstance(grid, torch.Tensor):
        return grid if grid.dim() == 4 else grid.permute(2, 0, 1)[None].float()
    arr = np.asarray(grid, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def set_lr(state: TrainState, lr: float) -> None:
    for opt in (state.opt_G, state.opt_D):
        for group in opt.param_groups:
            group["lr"] = lr


def _requires_grad(nets, flag: bool):
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def _check_finite(terms: dict[str, torch.Tensor]):
    for name, value in terms.items():
        if not math.isfinite(float(value.detach())):
            raise NonFiniteLossError(name)


def generator_losses(state: TrainState, image: torch.Tensor, annotation: torch.Tensor):
    """Forward both cycles and return ``(terms, fake_annotation, fake_image)``."""
    w = state.config.weights
    fake_a = state.G_A(image)
    fake_i = state.G_I(annotation)
    rec_i = state.G_I(fake_a)
    rec_a = state.G_A(fake_i)
    terms = {
        "adv_GA": generator_adversarial_loss(state.D_A(fake_a), w.adv_mode),
        "adv_GI": generator_adversarial_loss(state.D_I(fake_i), w.adv_mode),
        "cyc": cycle_consistency_loss(image, rec_i) + cycle_consistency_loss(annotation, rec_a),
    }
    if w.mu_edge > 0:
        terms["edge"] = edge_consistency_loss(fake_a, image)
    else:
        terms["edge"] = torch.zeros((), dtype=image.dtype)
    return terms, fake_a, fake_i


def train_step(state: TrainState, image, annotation) -> LossRecord:
    """One generator update followed by one update of each discriminator."""
    cfg = state.config
    w = cfg.weights
    image, annotation = to_tensor(image), to_tensor(annotation)

    _requires_grad(state.discriminators, False)
    terms, fake_a, fake_i = generator_losses(state, image, annotation)
    _check_finite(terms)
    loss_g = full_objective(terms["adv_GA"], terms["adv_GI"], terms["cyc"], terms["edge"], w)
    state.opt_G.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_G.step()
    _requires_grad(state.discriminators, True)

    _requires_grad(state.generators, False)
    pool_a = state.buffer_A.query(fake_a.detach(), state.rng)
    pool_i = state.buffer_I.query(fake_i.detach(), state.rng)
    d_terms = {
        "d_A": discriminator_loss(state.D_A(annotation), state.D_A(pool_a), w.adv_mode),
        "d_I": discriminator_loss(state.D_I(image), state.D_I(pool_i), w.adv_mode),
    }
    _check_finite(d_terms)
    state.opt_D.zero_grad(set_to_none=True)
    (d_terms["d_A"] + d_terms["d_I"]).backward()
    state.opt_D.step()
    _requires_grad(state.generators, True)

    state.step += 1
    values = {k: float(v.detach()) for k, v in {**terms, **d_terms}.items()}
    return LossRecord(**values)


# ---------------------------------------------------------------- checkpoints


def _optimizer_payload(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    tensors, layout = {}, {}
    for idx, slots in sd["state"].items():
        layout[str(idx)] = sorted(slots)
        for name, value in slots.items():
            tensors[f"{prefix}/{idx}/{name}"] = value
    return tensors, {"param_groups": sd["param_groups"], "layout": layout}


def _optimizer_state(tensors, meta, prefix: str) -> dict:
    state = {int(idx): {name: tensors[f"{prefix}/{idx}/{name}"] for name in names}
             for idx, names in meta["layout"].items()}
    groups = [dict(g, betas=tuple(g["betas"])) for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors, meta = {}, {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "nets": {},
        "rng": state.rng.bit_generator.state,
    }
    for role in ("G_A", "G_I", "D_A", "D_I"):
        net_tensors, net_meta = network_payload(getattr(state, role))
        tensors.update(prefixed(net_tensors, f"nets/{role}"))
        meta["nets"][role] = net_meta
    for name in ("opt_G", "opt_D"):
        opt_tensors, meta[name] = _optimizer_payload(getattr(state, name), name)
        tensors.update(opt_tensors)
    for name in ("buffer_A", "buffer_I"):
        items = getattr(state, name).items
        meta[name] = len(items)
        tensors.update({f"{name}/{k}": t for k, t in enumerate(items)})
    return pack(tensors, meta)


def save_checkpoint(state: TrainState, path) -> Path:
    return write_atomic(path, checkpoint_bytes(state))


def _read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        tensors, meta = unpack(path.read_bytes())
    except FormatError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a training checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has checkpoint version {meta.get('version')}, "
                              f"this build reads version {CHECKPOINT_VERSION}")
    return tensors, meta


def load_checkpoint(path) -> TrainState:
    tensors, meta = _read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    nets = [network_from_payload(subtree(tensors, f"nets/{r}"), meta["nets"][r])
            for r in ("G_A", "G_I", "D_A", "D_I")]
    opt_g, opt_d = _make_optimizers(cfg, nets)
    opt_g.load_state_dict(_optimizer_state(tensors, meta["opt_G"], "opt_G"))
    opt_d.load_state_dict(_optimizer_state(tensors, meta["opt_D"], "opt_D"))
    buffers = []
    for name in ("buffer_A", "buffer_I"):
        buf = ReplayBuffer(cfg.buffer_capacity)
        buf.items = [tensors[f"{name}/{k}"] for k in range(meta[name])]
        buffers.append(buf)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(cfg, *nets, opt_g, opt_d, *buffers, rng, meta["epoch"], meta["step"])


def load_segmenter(path) -> torch.nn.Module:
    """``G_A`` from either a training checkpoint or a single-network file."""
    try:
        fmt = read_meta(path).get("format")
    except FormatError as exc:
        raise CheckpointError(str(exc)) from exc
    if fmt == CHECKPOINT_FORMAT:
        return load_checkpoint(path).G_A
    return load_network(path)


# ---------------------------------------------------------------- loop


def _read_log(path: Path, before_step: int) -> list[dict]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return [row for row in csv.DictReader(fh) if int(row["step"]) < before_step]


def _write_log(path: Path, rows: list[dict], mode: str):
    with path.open(mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if mode == "w":
            writer.writeheader()
        writer.writerows(rows)


def _format_row(epoch, step, record: LossRecord, lr):
    row = {"epoch": epoch, "step": step, "lr": repr(float(lr))}
    row.update({k: repr(v) for k, v in record.as_dict().items()})
    return row


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch_{epoch:03d}.safetensors"


def train(manifest: DatasetManifest, cfg: TrainConfig, out_dir, resume=None,
          stop_after_epoch: int | None = None, on_epoch=None):
    """Run the full schedule, checkpointing after every epoch.

    Returns ``(state, epoch_means)`` where ``epoch_means`` holds one mean
    :class:`LossRecord` per completed epoch of this call. Per-step losses are
    appended to ``out_dir/losses.csv``. ``stop_after_epoch`` ends the run early
    (used to simulate an interruption).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume)
        if state.config.to_dict() != cfg.to_dict():
            log.warning("resume config differs from the stored one; using the stored config")
        cfg = state.config
    else:
        state = init_state(cfg)
    sampler = UnpairedSampler(manifest, cfg.seed)
    steps = cfg.steps_per_epoch or len(manifest.split("train"))

    log_path = out / "losses.csv"
    _write_log(log_path, _read_log(log_path, state.step) if resume is not None else [], "w")

    stream = sampler.stream(state.step)
    epoch_means = []
    while state.epoch < cfg.n_epochs:
        lr = lr_at_epoch(state.epoch, cfg)
        set_lr(state, lr)
        rows, records = [], []
        for _ in range(steps):
            image, annotation = next(stream)
            try:
                record = train_step(state, image, annotation)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(exc.term, state.epoch, state.step) from exc
            rows.append(_format_row(state.epoch, state.step - 1, record, lr))
            records.append(record)
        _write_log(log_path, rows, "a")
        mean = LossRecord(**{k: float(np.mean([getattr(r, k) for r in records]))
                             for k in LossRecord.names()})
        epoch_means.append(mean)
        state.epoch += 1
        ckpt = save_checkpoint(state, out / checkpoint_name(state.epoch))
        shutil.copyfile(ckpt, out / LATEST)
        log.info("epoch %d/%d lr=%.3g %s", state.epoch, cfg.n_epochs, lr,
                 " ".join(f"{k}={v:.4f}" for k, v in mean.as_dict().items()))
        if on_epoch is not None:
            on_epoch(state, mean)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            break
    return state, epoch_means


def read_loss_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))

