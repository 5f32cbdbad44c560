"""Training protocol: slice sampling, AdamW, warm-restart schedule,
early stopping, and exact-resume checkpoints.

The learning rate stays at lr_max for a constant lead-in, then follows
cosine decay periods that each start at lr_max and land exactly on
lr_min at their final epoch before restarting. Optimization is AdamW
with decoupled weight decay. The best epoch is the one with the lowest
mean validation loss; training stops early once the gap to it exceeds
the patience.

All randomness (epoch slice sampling, batch shuffling, the U(-a, a)
noise added to scanner-prior features in the dattn_scanner variant)
flows through one numpy generator whose state is serialized into every
checkpoint, so a resumed run replays the exact trajectory of an
uninterrupted one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cdf import CdfFeature, cdf_diff, cdf_of_scan
from .checkpoint import (
    Checkpoint,
    arrays_from_state_dict,
    load_arrays_into_model,
)
from .data import (
    CtVolume,
    DatasetManifest,
    read_volume,
    sample_slice_indices,
)
from .errors import ConfigError, TrainingDivergedError
from .network import NetworkConfig, SegmentationNet, build_model, normalize_slice
from .objective import loss


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 2e-4
    lr_min: float = 1e-8
    constant_epochs: int = 25
    restart_periods: tuple[int, ...] = (10, 20)
    max_epochs: int = 50
    batch_size: int = 8
    early_stop_patience: int = 25
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    slices_per_train_scan: int = 50
    slices_per_val_scan: int = 25
    noise_amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.lr_min < self.lr_max):
            raise ConfigError("need 0 < lr_min < lr_max")
        if self.constant_epochs < 0 or min(self.restart_periods, default=1) < 1:
            raise ConfigError("schedule epochs must be positive")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.constant_epochs + sum(self.restart_periods) < self.max_epochs:
            raise ConfigError("schedule does not cover max_epochs")
        if not (0 < self.early_stop_patience <= self.max_epochs):
            raise ConfigError("patience must lie in [1, max_epochs]")
        if self.batch_size < 1 or self.slices_per_train_scan < 1 or self.slices_per_val_scan < 1:
            raise ConfigError("batch and slice counts must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.eps <= 0 or self.noise_amplitude < 0:
            raise ConfigError("weight_decay/eps/noise_amplitude out of range")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for an epoch under the constant-then-restart plan.

    Within a restart period of length T, epoch t (0-based) maps to
    lr_min + (lr_max - lr_min) * (1 + cos(pi * t/(T-1))) / 2, so the
    period opens at lr_max and its last epoch sits exactly at lr_min.
    """
    if not 0 <= epoch < cfg.max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    if epoch < cfg.constant_epochs:
        return cfg.lr_max
    t = epoch - cfg.constant_epochs
    for period in cfg.restart_periods:
        if t < period:
            if period == 1:
                return cfg.lr_max
            phase = t / (period - 1)
            return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * phase)) / 2
        t -= period
    raise ConfigError(f"epoch {epoch} beyond the configured schedule")


class AdamW(torch.optim.Optimizer):
    """AdamW with decoupled weight decay and bias-corrected moments.

    Update order per parameter: p *= (1 - lr*wd), then
    p -= lr * mhat / (sqrt(vhat) + eps).
    """

    def __init__(self, params, lr: float, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        if closure is not None:
            raise ConfigError("closures are not supported")
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            wd = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if not torch.isfinite(grad).all():
                    raise TrainingDivergedError("non-finite gradient")
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                step = state["step"]
                m, v = state["m"], state["v"]
                if wd:
                    p.mul_(1.0 - lr * wd)
                m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
                v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
                m_hat = m / (1.0 - beta1 ** step)
                v_hat = v / (1.0 - beta2 ** step)
                p.addcdiv_(m_hat, v_hat.sqrt_().add_(eps), value=-lr)
        return None


# ---------------------------------------------------------------------------
# Epoch assembly
# ---------------------------------------------------------------------------

@dataclass
class _ScanEntry:
    volume: CtVolume
    images: np.ndarray      # (S, H, W) float32 in [0,1]
    labels: np.ndarray      # (S, H, W) bool
    domain: np.ndarray | None  # (n_bins,) float32, variant-dependent


def _domain_vector(volume: CtVolume, net_cfg: NetworkConfig,
                   priors: dict[str, CdfFeature] | None) -> np.ndarray | None:
    if not net_cfg.uses_domain:
        return None
    if priors is None or volume.scanner not in priors:
        raise ConfigError(f"no scanner prior for tag {volume.scanner!r}")
    prior = priors[volume.scanner]
    if prior.n_bins != net_cfg.n_cdf_bins:
        raise ConfigError(
            f"prior for {volume.scanner!r} has {prior.n_bins} bins, "
            f"network expects {net_cfg.n_cdf_bins}"
        )
    if net_cfg.variant == "dattn_scanner":
        return prior.values.astype(np.float32)
    feature = cdf_diff(cdf_of_scan(volume, prior.edges), prior)
    return feature.values.astype(np.float32)


def _load_entries(manifest: DatasetManifest, split: str, net_cfg: NetworkConfig,
                  priors: dict[str, CdfFeature] | None) -> list[_ScanEntry]:
    records = sorted(manifest.split(split), key=lambda r: r.scan_id)
    if not records:
        raise ConfigError(f"manifest has no {split} records")
    entries = []
    for record in records:
        v = read_volume(record.path)
        images = np.stack([normalize_slice(v.slice(i)) for i in range(v.shape[0])])
        entries.append(_ScanEntry(
            volume=v,
            images=images,
            labels=v.emph_mask.copy(),
            domain=_domain_vector(v, net_cfg, priors),
        ))
    return entries


def _gather(entries: list[_ScanEntry], n_per_scan: int, seeds) -> tuple:
    """Stack sampled slices of every scan into flat sample arrays."""
    imgs, labs, doms = [], [], []
    for entry, seed in zip(entries, seeds):
        idx = sample_slice_indices(entry.volume, n_per_scan, seed)
        imgs.append(entry.images[idx])
        labs.append(entry.labels[idx])
        if entry.domain is not None:
            doms.append(np.repeat(entry.domain[None, :], idx.size, axis=0))
    images = np.concatenate(imgs)
    labels = np.concatenate(labs)
    domains = np.concatenate(doms) if doms else None
    return images, labels, domains


def _batches(images, labels, domains, order, batch_size):
    for start in range(0, order.size, batch_size):
        sel = order[start : start + batch_size]
        x = torch.from_numpy(images[sel]).unsqueeze(1)
        lab = torch.from_numpy(labels[sel])
        y = torch.stack([(~lab).float(), lab.float()], dim=1)
        dom = None if domains is None else torch.from_numpy(domains[sel])
        yield x, y, dom


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_dsc: float
    is_best: bool


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochStats]


def write_train_log(history: list[EpochStats], path: str | Path) -> None:
    lines = ["# epoch\tlr\ttrain_loss\tval_loss\tval_dsc\tis_best"]
    for h in history:
        lines.append(
            f"{h.epoch}\t{format(h.lr, '.17g')}\t{format(h.train_loss, '.17g')}\t"
            f"{format(h.val_loss, '.17g')}\t{format(h.val_dsc, '.17g')}\t{int(h.is_best)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _run_split(model, opt, batches, train: bool):
    """One pass over a batch stream; returns (mean loss, hard dsc)."""
    total_loss = 0.0
    n_samples = 0
    inter = 0
    denom = 0
    for x, y, dom in batches:
        if train:
            logits = model(x, dom)
        else:
            with torch.no_grad():
                logits = model(x, dom)
        probs = torch.softmax(logits, dim=1)
        value = loss(y, probs)
        if not torch.isfinite(value.total):
            raise TrainingDivergedError(f"loss became {value.total.item()}")
        if train:
            opt.zero_grad()
            value.total.backward()
            opt.step()
        b = x.shape[0]
        total_loss += value.total.item() * b
        n_samples += b
        with torch.no_grad():
            pred = logits[:, 1] > logits[:, 0]
            truth = y[:, 1] > 0.5
            inter += int((pred & truth).sum())
            denom += int(pred.sum()) + int(truth.sum())
    mean_loss = total_loss / n_samples
    hard_dsc = 1.0 if denom == 0 else 2.0 * inter / denom
    return mean_loss, hard_dsc


def train(manifest: DatasetManifest, net_cfg: NetworkConfig, train_cfg: TrainConfig,
          priors: dict[str, CdfFeature] | None = None,
          resume: Checkpoint | None = None) -> TrainResult:
    """Full training run returning the final checkpoint and epoch log.

    The checkpoint carries both the last state (for exact resumption)
    and the best-validation snapshot (for evaluation). Deterministic for
    a given (manifest, configs, seed).
    """
    train_entries = _load_entries(manifest, "train", net_cfg, priors)
    val_entries = _load_entries(manifest, "val", net_cfg, priors)
    model = build_model(net_cfg)
    opt = AdamW(model.parameters(), lr=train_cfg.lr_max,
                betas=(train_cfg.beta1, train_cfg.beta2),
                eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(train_cfg.seed))
    start_epoch = 0
    best_epoch = -1
    best_val = None
    best_arrays: dict[str, np.ndarray] = {}
    if resume is not None:
        if NetworkConfig(**resume.net_config) != net_cfg:
            raise ConfigError("checkpoint network config does not match")
        load_arrays_into_model(model, resume.params)
        _restore_optimizer(model, opt, resume)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch + 1
        best_epoch = resume.best_epoch
        best_val = resume.best_val_loss
        best_arrays = dict(resume.best_params)

    # the validation set is sampled once with fixed per-scan seeds so it
    # never shifts between epochs or across a resume
    val_seeds = [np.random.SeedSequence(entropy=train_cfg.seed, spawn_key=(101, i))
                 for i in range(len(val_entries))]
    val_data = _gather(val_entries, train_cfg.slices_per_val_scan, val_seeds)
    val_order = np.arange(val_data[0].shape[0])

    uses_noise = net_cfg.variant == "dattn_scanner" and train_cfg.noise_amplitude > 0
    history: list[EpochStats] = []
    for epoch in range(start_epoch, train_cfg.max_epochs):
        lr = lr_at(epoch, train_cfg)
        for group in opt.param_groups:
            group["lr"] = lr

        seeds = [rng for _ in train_entries]
        images, labels, domains = _gather(train_entries,
                                          train_cfg.slices_per_train_scan, seeds)
        order = rng.permutation(images.shape[0])
        if uses_noise and domains is not None:
            noise = rng.uniform(-train_cfg.noise_amplitude,
                                train_cfg.noise_amplitude, domains.shape)
            domains = (domains + noise).astype(np.float32)

        model.train()
        train_loss, _ = _run_split(
            model, opt,
            _batches(images, labels, domains, order, train_cfg.batch_size),
            train=True,
        )
        model.eval()
        val_loss, val_dsc = _run_split(
            model, opt,
            _batches(*val_data, val_order, train_cfg.batch_size),
            train=False,
        )

        is_best = best_val is None or val_loss < best_val
        if is_best:
            best_val = val_loss
            best_epoch = epoch
            best_arrays = arrays_from_state_dict(model.state_dict())
        history.append(EpochStats(epoch, lr, train_loss, val_loss, val_dsc, is_best))
        if epoch - best_epoch > train_cfg.early_stop_patience:
            break

    ckpt = Checkpoint(
        net_config=asdict(net_cfg),
        train_config=_train_config_dict(train_cfg),
        epoch=history[-1].epoch if history else start_epoch - 1,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        params=arrays_from_state_dict(model.state_dict()),
        best_params=best_arrays,
        opt_m=_moment_arrays(model, opt, "m"),
        opt_v=_moment_arrays(model, opt, "v"),
        opt_steps=_step_counts(model, opt),
        rng_state=rng.bit_generator.state,
    )
    return TrainResult(checkpoint=ckpt, history=history)


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["restart_periods"] = list(cfg.restart_periods)
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "restart_periods" in d:
        d["restart_periods"] = tuple(d["restart_periods"])
    return TrainConfig(**d)


def _moment_arrays(model: nn.Module, opt: AdamW, key: str) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        state = opt.state.get(p)
        if state:
            out[name] = state[key].detach().numpy().astype(np.float64)
        else:
            out[name] = np.zeros(tuple(p.shape), dtype=np.float64)
    return out


def _step_counts(model: nn.Module, opt: AdamW) -> dict[str, int]:
    return {
        name: int(opt.state[p]["step"]) if opt.state.get(p) else 0
        for name, p in model.named_parameters()
    }


def _restore_optimizer(model: nn.Module, opt: AdamW, ckpt: Checkpoint) -> None:
    for name, p in model.named_parameters():
        if name not in ckpt.opt_m:
            raise ConfigError(f"checkpoint lacks optimizer state for {name}")
        state = opt.state[p]
        state["step"] = ckpt.opt_steps.get(name, 0)
        state["m"] = torch.from_numpy(ckpt.opt_m[name].astype(np.float32))
        state["v"] = torch.from_numpy(ckpt.opt_v[name].astype(np.float32))
