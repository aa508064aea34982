"""Triplet sampling, loss, accuracy and the embedding training loop.

A triplet is (anchor, positive, negative): two images of one specimen and
one of another.  The hinge loss pushes the anchor-negative embedding
distance beyond the anchor-positive distance by at least the margin; the
triplet accuracy is the fraction of triplets where that separation holds.
Training applies Adam to a single shared encoder evaluated on all three
roles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc


class SamplingError(ValueError):
    """Dataset cannot supply valid triplets."""


class AccuracyError(ValueError):
    """Triplet accuracy requested on an empty batch."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the last good checkpoint reference."""

    def __init__(self, epoch: int, checkpoint_path=None):
        self.epoch = epoch
        self.checkpoint_path = checkpoint_path
        where = f" (last good checkpoint: {checkpoint_path})" if checkpoint_path else ""
        super().__init__(f"training diverged in epoch {epoch}{where}")


@dataclass(frozen=True)
class Triplet:
    """Manifest row indices of the three images."""

    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.1
    squared: bool = True
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class TrainingHistory:
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    used_images: set = field(default_factory=set)

    def append(self, epoch: int, loss: float, accuracy: float) -> None:
        if not (0.0 <= accuracy <= 1.0):
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.accuracies.append(accuracy)

    def save(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "triplet_accuracy"])
            for e, l, a in zip(self.epochs, self.losses, self.accuracies):
                writer.writerow([e, repr(l), repr(a)])

    @classmethod
    def load(cls, path) -> "TrainingHistory":
        history = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != ["epoch", "loss", "triplet_accuracy"]:
                raise ValueError(f"unexpected history header {header}")
            for row in reader:
                history.append(int(row[0]), float(row[1]), float(row[2]))
        return history


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _class_index(manifest: list[dict]) -> dict[int, np.ndarray]:
    by_class: dict[int, list[int]] = {}
    for i, row in enumerate(manifest):
        by_class.setdefault(int(row["specimen_id"]), []).append(i)
    return {k: np.array(v) for k, v in sorted(by_class.items())}


def _check_sampleable(by_class: dict[int, np.ndarray]) -> None:
    if len(by_class) < 2:
        raise SamplingError(f"triplet sampling needs >= 2 classes, got {len(by_class)}")
    for cls, rows in by_class.items():
        if len(rows) < 2:
            raise SamplingError(f"class {cls} has {len(rows)} image(s), needs >= 2")


def sample_triplet_batch(manifest: list[dict], n: int,
                         rng: np.random.Generator | int) -> list[Triplet]:
    """``n`` uniform random triplets; deterministic per generator state.

    Anchors are uniform over all images, positives uniform over the
    anchor's class minus the anchor itself, negatives uniform over all
    other-class images.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(rng))
    by_class = _class_index(manifest)
    _check_sampleable(by_class)
    class_of = np.empty(len(manifest), dtype=np.int64)
    for cls, rows in by_class.items():
        class_of[rows] = cls

    anchors = rng.integers(0, len(manifest), size=n)
    triplets = []
    for a in anchors:
        cls = int(class_of[a])
        same = by_class[cls]
        pos = a
        while pos == a:
            pos = int(same[rng.integers(0, len(same))])
        neg = a
        while class_of[neg] == cls:
            neg = int(rng.integers(0, len(manifest)))
        triplets.append(Triplet(int(a), pos, neg))
    return triplets


# ---------------------------------------------------------------------------
# Loss, gradient, accuracy
# ---------------------------------------------------------------------------

def _as_embedding_batches(e_a, e_p, e_n):
    e_a, e_p, e_n = (np.atleast_2d(np.asarray(e)) for e in (e_a, e_p, e_n))
    if not (e_a.shape == e_p.shape == e_n.shape):
        raise enc.ShapeError(
            f"embedding shapes differ: {e_a.shape} / {e_p.shape} / {e_n.shape}"
        )
    return e_a, e_p, e_n


def _distances(e_a, e_p, e_n, squared: bool):
    d_ap = np.sum((e_a - e_p) ** 2, axis=1)
    d_an = np.sum((e_a - e_n) ** 2, axis=1)
    if not squared:
        d_ap = np.sqrt(d_ap)
        d_an = np.sqrt(d_an)
    return d_ap, d_an


def triplet_loss(e_a, e_p, e_n, config: TripletLossConfig) -> float:
    """Summed hinge loss over the batch."""
    e_a, e_p, e_n = _as_embedding_batches(e_a, e_p, e_n)
    d_ap, d_an = _distances(e_a, e_p, e_n, config.squared)
    return float(np.sum(np.maximum(0.0, d_ap - d_an + config.margin)))


def triplet_loss_gradient(e_a, e_p, e_n, config: TripletLossConfig):
    """Gradients of the summed loss w.r.t. each embedding batch.

    Inactive triplets (hinge <= 0, boundary included) contribute zero.
    """
    e_a, e_p, e_n = _as_embedding_batches(e_a, e_p, e_n)
    d_ap, d_an = _distances(e_a, e_p, e_n, config.squared)
    active = (d_ap - d_an + config.margin) > 0

    if config.squared:
        g_a = 2.0 * (e_n - e_p)
        g_p = 2.0 * (e_p - e_a)
        g_n = 2.0 * (e_a - e_n)
    else:
        # d/dx ||x|| = x / ||x||; zero-distance pairs get a zero subgradient
        with np.errstate(divide="ignore", invalid="ignore"):
            u_ap = np.where(d_ap[:, None] > 0, (e_a - e_p) / d_ap[:, None], 0.0)
            u_an = np.where(d_an[:, None] > 0, (e_a - e_n) / d_an[:, None], 0.0)
        g_a = u_ap - u_an
        g_p = -u_ap
        g_n = u_an
    mask = active[:, None].astype(e_a.dtype)
    return g_a * mask, g_p * mask, g_n * mask


def triplet_accuracy(e_a, e_p, e_n, margin: float) -> float:
    """Fraction of triplets with d(a,p)^2 + margin < d(a,n)^2."""
    e_a, e_p, e_n = _as_embedding_batches(e_a, e_p, e_n)
    if e_a.shape[0] == 0:
        raise AccuracyError("triplet accuracy of an empty batch is undefined")
    d_ap, d_an = _distances(e_a, e_p, e_n, squared=True)
    return float(np.mean(d_ap + margin < d_an))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[np.ndarray], learning_rate: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = learning_rate
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(model: enc.EncoderModel, manifest: list[dict], config: TripletLossConfig,
          images: np.ndarray | None = None, image_dir=None,
          checkpoint_dir=None) -> tuple[enc.EncoderModel, TrainingHistory]:
    """Train the shared encoder on sampled triplets.

    One epoch runs ceil(len(manifest) / batch_size) batches.  ``images``
    may carry preloaded pixels aligned with the manifest; otherwise they
    are read from ``image_dir``.  Deterministic per config seed.  On a
    non-finite loss, aborts with a reference to the last per-epoch
    checkpoint (written when ``checkpoint_dir`` is given).
    """
    from .drr import load_manifest_images

    config.validate()
    history = TrainingHistory()
    if config.epochs == 0:
        return model, history

    by_class = _class_index(manifest)
    _check_sampleable(by_class)
    if images is None:
        if image_dir is None:
            raise ValueError("either images or image_dir is required")
        images = load_manifest_images(manifest, image_dir)
    if images.shape[0] != len(manifest):
        raise enc.ShapeError(f"{images.shape[0]} images for {len(manifest)} manifest rows")

    model = model.copy()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    optimizer = Adam(model.params, config.learning_rate)
    n_batches = math.ceil(len(manifest) / config.batch_size)
    last_checkpoint = None

    for epoch in range(config.epochs):
        epoch_losses = []
        epoch_accuracies = []
        for _ in range(n_batches):
            batch = sample_triplet_batch(manifest, config.batch_size, rng)
            idx = np.array([[t.anchor, t.positive, t.negative] for t in batch])
            history.used_images.update(
                (int(manifest[i]["specimen_id"]), int(manifest[i]["image_id"]))
                for i in idx.reshape(-1)
            )
            x = images[idx.T.reshape(-1)]  # anchors, then positives, then negatives
            emb, caches = enc._forward_cached(model, x[:, None, :, :].astype(model.dtype))
            n = len(batch)
            e_a, e_p, e_n = emb[:n], emb[n:2 * n], emb[2 * n:]

            loss = triplet_loss(e_a, e_p, e_n, config)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, last_checkpoint)
            epoch_losses.append(loss)
            epoch_accuracies.append(triplet_accuracy(e_a, e_p, e_n, config.margin))

            g_a, g_p, g_n = triplet_loss_gradient(e_a, e_p, e_n, config)
            upstream = np.concatenate([g_a, g_p, g_n]).astype(model.dtype)
            grads = enc._backward_cached(model, caches, upstream)
            optimizer.step(model.params, grads)

        history.append(epoch, float(np.mean(epoch_losses)),
                       float(np.mean(epoch_accuracies)))
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch_{epoch:03d}.ostm"
            enc.persist_model(model, path)
            last_checkpoint = path
    return model, history
