"""Training orchestration: epochs, schedules, the norm statistic, evaluation.

One run is a plain sequential loop, deterministic per seed: every epoch
freezes the adaptive denominator delta = alpha * epoch * mean_norm (the
mean norm comes from a full forward pass over the training set after the
previous epoch, 0.05 before the first), iterates seeded-shuffled
mini-batches through forward / loss / backward / SGD, then evaluates and
records one history row.

Sub-seeds derive from the run seed by a fixed splitting rule:
SeedSequence([seed, 0]) initializes parameters, SeedSequence([seed, 1, e])
shuffles epoch e, SeedSequence([seed, 2, e]) drives epoch-e augmentation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import classify, data, losses, net as net_mod
from .pedcc import CentroidSet, RankError, subspace_projector

INITIAL_MEAN_NORM = 0.05

LOSS_KINDS = ("pod", "nac", "cosine", "softmax_ce")


class DivergenceError(RuntimeError):
    """Loss became NaN/Inf; carries the epoch and batch where it happened."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"loss diverged to {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    loss: str = "pod"
    alpha: float = 0.01
    lam: float = 1.0
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    lr_drops: tuple = (6, 12, 18)
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    latent_dim: int = 64
    backbone: str = "dense:784:256,relu,dense:256:64"
    eval_every: int = 1
    augment: bool = False
    checkpoint_every: int = 0  # 0 disables intra-run checkpoints

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}, expected one of {LOSS_KINDS}")
        for name in ("epochs", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        for name in ("lr", "lr_drop_factor", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha", "lam", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float | None
    mean_norm: float
    delta: float
    lr: float
    low_norm_accuracy: float | None
    high_norm_accuracy: float | None
    offdiag_energy: float | None
    subspace_alignment: float | None


class TrainHistory:
    """Per-epoch records with CSV/JSON export."""

    COLUMNS = [f.name for f in fields(EpochRecord)]

    def __init__(self, records=None):
        self.records: list[EpochRecord] = list(records or [])

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for rec in self.records:
                writer.writerow(
                    ["" if getattr(rec, c) is None else repr(getattr(rec, c)) for c in self.COLUMNS]
                )

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != cls.COLUMNS:
                raise ValueError(f"unexpected history header {header}")
            records = []
            for row in reader:
                values = {}
                for col, cell in zip(cls.COLUMNS, row):
                    if cell == "":
                        values[col] = None
                    elif col == "epoch":
                        values[col] = int(cell)
                    else:
                        values[col] = float(cell)
                records.append(EpochRecord(**values))
        return cls(records)

    def summary(self) -> dict:
        last = self.final
        return {
            "epochs": len(self.records),
            "final_train_loss": last.train_loss,
            "final_test_accuracy": last.test_accuracy,
            "final_mean_norm": last.mean_norm,
            "final_delta": last.delta,
            "final_offdiag_energy": last.offdiag_energy,
            "final_subspace_alignment": last.subspace_alignment,
            "final_low_norm_accuracy": last.low_norm_accuracy,
            "final_high_norm_accuracy": last.high_norm_accuracy,
        }


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step schedule: the base rate decays by the drop factor at each drop epoch."""
    if epoch < 1:
        raise ValueError("epoch index is 1-based")
    n_drops = sum(1 for d in config.lr_drops if epoch >= d)
    return config.lr * config.lr_drop_factor**n_drops


def update_norm_mean(latents: np.ndarray) -> float:
    """Arithmetic mean of raw latent L2 norms over a full training set."""
    latents = np.asarray(latents)
    if latents.shape[0] == 0:
        raise ValueError("cannot average over an empty set")
    return float(np.linalg.norm(latents, axis=1).mean())


def _network_inputs(images: np.ndarray, first_layer) -> np.ndarray:
    """Arrange (B, H, W, C) images for the backbone's first layer."""
    if images.ndim == 2:
        return images
    if isinstance(first_layer, net_mod.Conv3x3):
        return images.transpose(0, 3, 1, 2)
    return images.reshape(images.shape[0], -1)


def _prepared_inputs(ds: data.Dataset, first_layer) -> np.ndarray:
    images = ds.images
    if ds.mean is not None:
        images = data.standardize(images, ds.mean, ds.std)
    return _network_inputs(images, first_layer)


def _latents_in_chunks(network, inputs, skip_last=0, chunk=1024):
    outs = [
        network.latent(inputs[i : i + chunk], skip_last=skip_last)
        for i in range(0, inputs.shape[0], chunk)
    ]
    return np.concatenate(outs) if outs else np.zeros((0, 0))


def build_model(config: TrainConfig, cs: CentroidSet) -> net_mod.Network:
    """Backbone from the config spec; the softmax baseline appends a trainable
    linear head onto the class count (the centroid layer stays frozen and is
    never a parameter)."""
    specs = net_mod.parse_layer_specs(config.backbone)
    if specs[-1][0] != "dense":
        raise ValueError("backbone must end in a dense layer onto the latent dimension")
    if specs[-1][2] != config.latent_dim:
        raise ValueError(
            f"backbone output {specs[-1][2]} does not match latent_dim {config.latent_dim}"
        )
    if config.loss != "softmax_ce" and config.latent_dim != cs.dim:
        raise ValueError(f"latent_dim {config.latent_dim} does not match centroid dim {cs.dim}")
    if config.loss == "softmax_ce":
        specs = specs + [("dense", config.latent_dim, cs.num_classes)]
    init_seed = np.random.SeedSequence([config.seed, 0])
    return net_mod.build_network(specs, seed=init_seed)


def _batch_loss(config, latent, labels, cs, delta):
    """Dispatch on the loss kind; returns (value, grad_latent)."""
    if config.loss == "softmax_ce":
        return losses.softmax_ce_loss(losses.Logits(latent), labels)
    batch = losses.LatentBatch(latent, labels)
    if config.loss == "pod":
        lam = config.lam if latent.shape[0] > 1 else 0.0  # single-sample batch: no SC term
        bundle = losses.pod_loss(batch, cs, delta=delta, lam=lam)
    elif config.loss == "nac":
        bundle = losses.nac_loss(batch, cs, delta=delta)
    else:
        bundle = losses.cosine_loss(batch, cs)
    return bundle.value, bundle.grad


def evaluate(
    network: net_mod.Network,
    cs: CentroidSet,
    dataset: data.Dataset,
    head_attached: bool = False,
    chunk: int = 1024,
) -> classify.EvalMetrics:
    """One-pass metrics over a split.

    With ``head_attached`` the trailing dense layer provides logits for the
    decision while the penultimate activations serve as the latents for the
    norm/correlation/alignment diagnostics.
    """
    first = network.layers[0]
    inputs = _prepared_inputs(dataset, first)
    latents, preds = [], []
    head = network.layers[-1] if head_attached else None
    for i in range(0, inputs.shape[0], chunk):
        latent = network.latent(inputs[i : i + chunk], skip_last=1 if head_attached else 0)
        latents.append(latent)
        if head_attached:
            logits, _ = head.forward(latent)
            preds.append(np.argmax(logits, axis=1))
        else:
            preds.append(classify.classify_cosine_batch(latent, cs))
    latents = np.concatenate(latents)
    preds = np.concatenate(preds)
    try:
        projector = subspace_projector(cs)
    except RankError:
        projector = None  # circle sets with k > 3 span all of R^2
    return classify.compute_metrics(latents, dataset.labels, preds, cs, projector)


def run_training(
    config: TrainConfig,
    train_set: data.Dataset,
    test_set: data.Dataset,
    cs: CentroidSet,
    checkpoint_dir=None,
) -> tuple[net_mod.Network, TrainHistory]:
    """Full training run; returns the trained network and per-epoch history.

    With ``checkpoint_dir`` set, a checkpoint lands there every
    ``config.checkpoint_every`` epochs as ``model_epoch{e}.podn``.
    """
    if train_set.num_classes != cs.num_classes:
        raise ValueError(
            f"dataset has {train_set.num_classes} classes, centroid set has {cs.num_classes}"
        )
    network = build_model(config, cs)
    first = network.layers[0]
    skip_last = 1 if config.loss == "softmax_ce" else 0
    n_train = len(train_set)
    plain_inputs = _prepared_inputs(train_set, first)
    augmenting = config.augment and train_set.is_image
    policy = data.AugmentPolicy()
    history = TrainHistory()
    mean_norm = INITIAL_MEAN_NORM
    for epoch in range(1, config.epochs + 1):
        delta = losses.delta_schedule(
            losses.DeltaState(alpha=config.alpha, epoch=epoch, mean_norm=mean_norm)
        )
        lr = lr_at(config, epoch)
        perm = np.random.default_rng(np.random.SeedSequence([config.seed, 1, epoch])).permutation(
            n_train
        )
        aug_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, epoch]))
        loss_total = 0.0
        for batch_idx, start in enumerate(range(0, n_train, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            if augmenting:
                raw = np.stack([data.augment(img, policy, aug_rng) for img in train_set.images[idx]])
                if train_set.mean is not None:
                    raw = data.standardize(raw, train_set.mean, train_set.std)
                x = _network_inputs(raw, first)
            else:
                x = plain_inputs[idx]
            labels = train_set.labels[idx]
            latent, caches = network.forward(x)
            if not np.all(np.isfinite(latent)):
                raise DivergenceError(epoch, batch_idx, float("nan"))
            value, grad_latent = _batch_loss(config, latent, labels, cs, delta)
            if not math.isfinite(value):
                raise DivergenceError(epoch, batch_idx, value)
            param_grads, _ = network.backward(caches, grad_latent)
            network.sgd_step(param_grads, lr, config.momentum, config.weight_decay)
            loss_total += value * len(idx)
        train_loss = loss_total / n_train
        full_latents = _latents_in_chunks(network, plain_inputs, skip_last=skip_last)
        mean_norm = update_norm_mean(full_latents)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            metrics = evaluate(network, cs, test_set, head_attached=bool(skip_last))
            record = EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                test_accuracy=metrics.accuracy,
                mean_norm=mean_norm,
                delta=delta,
                lr=lr,
                low_norm_accuracy=metrics.low_norm_accuracy,
                high_norm_accuracy=metrics.high_norm_accuracy,
                offdiag_energy=metrics.offdiag_energy,
                subspace_alignment=metrics.subspace_alignment,
            )
        else:
            record = EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                test_accuracy=None,
                mean_norm=mean_norm,
                delta=delta,
                lr=lr,
                low_norm_accuracy=None,
                high_norm_accuracy=None,
                offdiag_energy=None,
                subspace_alignment=None,
            )
        history.append(record)
        if checkpoint_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            net_mod.save_checkpoint(network, Path(checkpoint_dir) / f"model_epoch{epoch}.podn")
    return network, history


def write_summary(path, config: TrainConfig, history: TrainHistory, extra: dict | None = None):
    payload = {"config": config.__dict__ | {"lr_drops": list(config.lr_drops)}}
    payload.update(history.summary())
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
    return payload
