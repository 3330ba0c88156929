"""Training loop: P x K batches, occluded sample augmentation, the four
losses, Adam with warmup + step decay, deterministic resumable steps.

Every step draws its randomness from ``default_rng([seed, step, ...])`` so a
run restarted from a checkpoint at step t replays steps t, t+1, ... exactly.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .augment import (AugmentedSample, Obstacle, augment_batch, mine_batch_hard,
                      mine_contrast_triplets, standard_augment)
from .checkpoint import Checkpoint, save_checkpoint
from .data import Dataset, PKSampler, make_obstacle_set, normalize
from .errors import ConfigError, NumericError
from .losses import (LossComponents, LossConfig, decorrelation_loss, distance_matrix_np, id_loss,
                     reverse_triplet_loss, total_loss, triplet_loss)
from .model import ModelConfig, build_model
from .nn import Module

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "epoch", "lr", "ce", "o", "tri", "rtri", "total")


@dataclass
class TrainConfig:
    epochs: int = 80
    warmup_epochs: int = 10
    base_lr: float = 3.5e-4
    start_lr: float = 3.5e-5
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    P: int = 8
    K: int = 4
    k: int = 2  # obstacles per batch
    osa: bool = True
    cfl: bool = True
    std_aug: bool = True
    num_obstacles: int = 20  # size of the synthetic training obstacle pool
    checkpoint_every: int = 0  # epochs; 0 = final only
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.start_lr > self.base_lr:
            raise ConfigError("train: start_lr must not exceed base_lr")
        if self.epochs < 1:
            raise ConfigError(f"train: epochs={self.epochs} must be positive")
        # decay epochs past the end of a short run are simply never reached
        if any(e < 1 for e in self.decay_epochs):
            raise ConfigError(f"train: decay epochs {self.decay_epochs} must be >= 1")
        if self.cfl and not self.osa:
            raise ConfigError("train: contrast feature learning needs occluded sample augmentation")
        if self.osa and self.k < 1:
            raise ConfigError(f"train: k={self.k} must be >= 1 when osa is on")
        if self.P < 2 or self.K < 2:
            raise ConfigError("train: triplet mining needs P >= 2 and K >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warmup start_lr -> base_lr over epochs 1..warmup, then step decay."""
    if epoch < 1:
        raise ConfigError(f"lr_at: epoch={epoch} must be >= 1")
    if config.warmup_epochs > 1 and epoch <= config.warmup_epochs:
        frac = (epoch - 1) / (config.warmup_epochs - 1)
        lr = config.start_lr + frac * (config.base_lr - config.start_lr)
    else:
        lr = config.base_lr
    for e in config.decay_epochs:
        if epoch >= e:
            lr *= config.decay_factor
    return lr


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              moments: dict[str, tuple[np.ndarray, np.ndarray]], t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, in place.  ``t`` is the 1-based step."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam: non-finite gradient for parameter {name}")
        if weight_decay:
            g = g + weight_decay * p
        m, v = moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, module: Module, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.module = module
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.moments = {n: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for n, p in module.named_parameters()}

    def step(self, lr: float) -> None:
        named = dict(self.module.named_parameters())
        self.t += 1
        adam_step({n: p.data for n, p in named.items()}, {n: p.grad for n, p in named.items()},
                  self.moments, self.t, lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for n, (m, v) in self.moments.items():
            out[f"adam.m/{n}"] = m
            out[f"adam.v/{n}"] = v
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for n in self.moments:
            self.moments[n] = (tensors[f"adam.m/{n}"].copy(), tensors[f"adam.v/{n}"].copy())
        self.t = int(t)


# ---------------------------------------------------------------------------
# single step
# ---------------------------------------------------------------------------

def build_samples(records: Sequence, cfg: TrainConfig, obstacles: Sequence[Obstacle],
                  rng: np.random.Generator, source_indices: Sequence[int]) -> list[AugmentedSample]:
    items = []
    for r in records:
        pix = standard_augment(r.pixels, rng) if cfg.std_aug else np.asarray(r.pixels, np.float32)
        items.append(SimpleNamespace(pixels=pix, person_id=r.person_id, camera_id=r.camera_id))
    if cfg.osa:
        return augment_batch(items, obstacles, cfg.k, rng, source_indices)
    return [AugmentedSample(it.pixels, it.person_id, it.camera_id, None,
                            np.zeros(it.pixels.shape[1:], dtype=bool), s)
            for it, s in zip(items, source_indices)]


def compute_losses(model, samples: Sequence[AugmentedSample], labels: np.ndarray, cfg: TrainConfig,
                   mean, std, rng: np.random.Generator | None = None):
    """Forward the expanded batch and evaluate every loss component."""
    lc = cfg.loss
    x = normalize(np.stack([s.pixels for s in samples]), mean, std).astype(model.classifier.weight.dtype)
    out = model(x, rng=rng)
    zero = dc.Tensor(np.zeros((), dtype=x.dtype))
    ce = id_loss(out.logits, labels, lc.epsilon, lc.reduction)
    if out.bundle is not None and lc.alpha > 0:
        if lc.decorrelation_mode == "shared":
            n = len(samples) if lc.reduction == "sum" else 1
            o = decorrelation_loss(model.queries, lc.alpha, n)
        else:
            o = decorrelation_loss(out.bundle.F, lc.alpha)
            if lc.reduction == "mean":
                o = dc.scale(o, 1.0 / len(samples))
    else:
        o = zero
    pids = np.array([s.person_id for s in samples])
    dist = distance_matrix_np(out.f.data.astype(np.float64))
    if cfg.cfl:
        mined = mine_contrast_triplets(pids, [s.obstacle_id for s in samples], dist)
    else:
        mined = mine_batch_hard(pids, dist)
    tri, rtri = zero, zero
    if len(mined.triplets):
        a, p, n_ = (mined.triplets[:, i] for i in range(3))
        tri = triplet_loss(out.f[a], out.f[p], out.f[n_], lc.margin, lc.reduction)
        if cfg.cfl and out.fbar is not None:
            rtri = reverse_triplet_loss(out.fbar[a], out.fbar[p], out.fbar[n_], lc.margin, lc.reduction)
    comps = LossComponents(ce, o, tri, rtri)
    return comps, total_loss(comps, lc.lam), mined


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), 0x5EED])


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    model: Module
    optimizer: Adam
    trace: list[tuple]
    step: int
    checkpoint: Checkpoint
    checkpoint_path: Path | None = None


def prepare_model_config(dataset: Dataset, model_cfg: ModelConfig | None) -> ModelConfig:
    model_cfg = model_cfg or ModelConfig()
    return dataclasses.replace(model_cfg, height=dataset.height, width=dataset.width,
                               num_classes=len(dataset.train_ids),
                               pixel_mean=tuple(float(v) for v in dataset.pixel_mean),
                               pixel_std=tuple(float(v) for v in dataset.pixel_std))


def make_checkpoint(model, opt: Adam, step: int, model_cfg: ModelConfig, cfg: TrainConfig,
                    extra: dict | None = None) -> Checkpoint:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update({k: v.copy() for k, v in opt.state_tensors().items()})
    meta = {"step": step, "adam_t": opt.t, "model": model_cfg.to_dict(), "train": cfg.to_dict()}
    if extra:
        meta.update(extra)
    return Checkpoint(tensors, meta)


def model_from_checkpoint(ckpt: Checkpoint):
    cfg = ModelConfig.from_dict(ckpt.meta["model"])
    model = build_model(cfg)
    model.load_state_dict(ckpt.group("model/"))
    return model, cfg


def write_trace(path: str | Path, trace: Sequence[tuple]) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            fh.write("\t".join(repr(v) for v in row) + "\n")


def read_trace(path: str | Path) -> list[tuple]:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            rows.append((int(parts[0]), int(parts[1]), *(float(v) for v in parts[2:])))
    return rows


def fit(dataset: Dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
        obstacles: Sequence[Obstacle] | None = None, out_dir: str | Path | None = None,
        resume: Checkpoint | None = None, max_steps: int | None = None,
        progress: Callable[[tuple], None] | None = None) -> FitResult:
    """Run the training loop; returns the final model, optimiser and loss trace.

    ``max_steps`` caps the total number of steps (counted from step 0) and
    is meant for tests and smoke runs.
    """
    labels_of = dataset.label_map()
    if resume is not None:
        model, model_cfg = model_from_checkpoint(resume)
        start = int(resume.meta["step"])
    else:
        model_cfg = prepare_model_config(dataset, model_cfg)
        model = build_model(model_cfg, cfg.seed)
        start = 0
    if model_cfg.num_classes != len(labels_of):
        raise ConfigError(f"model has {model_cfg.num_classes} classes, dataset has {len(labels_of)} train ids")
    opt = Adam(model, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    if resume is not None:
        opt.load_state(resume.tensors, resume.meta["adam_t"])
    if cfg.osa and not obstacles:
        obstacles = make_obstacle_set(cfg.num_obstacles, cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    sampler = PKSampler([r.person_id for r in dataset.train], cfg.P, cfg.K, cfg.seed)
    per_epoch = len(sampler)
    total_steps = cfg.epochs * per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    mean, std = np.asarray(model_cfg.pixel_mean), np.asarray(model_cfg.pixel_std)
    trace: list[tuple] = []
    cached_epoch, batches = None, None
    ckpt_path = None
    t0 = time.time()
    for step in range(start, total_steps):
        epoch = step // per_epoch + 1
        if epoch != cached_epoch:
            batches, cached_epoch = sampler.batches(epoch), epoch
        idx = batches[step % per_epoch]
        lr = lr_at(epoch, cfg)
        rng = step_rng(cfg.seed, step)
        records = [dataset.train[i] for i in idx]
        samples = build_samples(records, cfg, obstacles or [], rng, idx)
        labels = np.array([labels_of[s.person_id] for s in samples])
        comps, total, _ = compute_losses(model, samples, labels, cfg, mean, std, rng)
        if not np.isfinite(total.item()):
            if out_dir is not None:
                save_checkpoint(out_dir / "last_good.ckpt", make_checkpoint(model, opt, step, model_cfg, cfg))
            raise NumericError(f"non-finite loss at step {step} (epoch {epoch})")
        model.zero_grad()
        total.backward()
        opt.step(lr)
        row = (step, epoch, lr, *comps.values(), total.item())
        trace.append(row)
        if progress is not None:
            progress(row)
        last_in_epoch = (step + 1) % per_epoch == 0
        if out_dir is not None and cfg.checkpoint_every and last_in_epoch and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch{epoch:03d}.ckpt",
                            make_checkpoint(model, opt, step + 1, model_cfg, cfg))
    end_step = max(start, total_steps)
    ckpt = make_checkpoint(model, opt, end_step, model_cfg, cfg)
    if out_dir is not None:
        ckpt_path = out_dir / "model.ckpt"
        save_checkpoint(ckpt_path, ckpt)
        write_trace(out_dir / "loss_trace.tsv", trace)
    log.info("trained %d steps in %.1fs", end_step - start, time.time() - t0)
    return FitResult(model, opt, trace, end_step, ckpt, ckpt_path)
