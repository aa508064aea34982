"""Embedding store, kNN classification, pairwise verification and shape retrieval.

Each radiograph is reduced to a unit-norm embedding ("fingerprint").
Specimens are identified by nearest-neighbor voting over stored
fingerprints, verified by thresholding pairwise Euclidean distances at
the training margin, and assigned a 3D shape by returning the winning
specimen's catalog mesh.  The better-match rank counts how many catalog
shapes would have been closer to the query's true shape than the
predicted one.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .mesh import TriMesh, mesh_distance, rigid_align

MAX_UNIT_NORM_DEV = 1e-5
MAX_PAIR_DISTANCE = 2.0 + 1e-6


class StoreError(ValueError):
    """Malformed embedding store."""


class ClassifierError(ValueError):
    """kNN query against an empty or too-small store."""


class FilterError(ValueError):
    """Pair filter admits fewer than two rows."""


class CatalogError(KeyError):
    """Specimen without a catalog mesh."""


@dataclass
class EmbeddingStore:
    """Parallel arrays of per-image metadata plus (n, d) unit-norm embeddings."""

    specimen_ids: np.ndarray
    image_ids: np.ndarray
    rx: np.ndarray
    ry: np.ndarray
    energy: np.ndarray
    embeddings: np.ndarray

    def __len__(self) -> int:
        return len(self.specimen_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def validate(self) -> None:
        n = len(self.specimen_ids)
        for name in ("image_ids", "rx", "ry", "energy"):
            if len(getattr(self, name)) != n:
                raise StoreError(f"{name} length != {n}")
        if self.embeddings.shape[0] != n:
            raise StoreError(f"{self.embeddings.shape[0]} embeddings for {n} rows")
        if n == 0:
            return
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > MAX_UNIT_NORM_DEV:
            raise StoreError(f"embedding norm deviates from 1 by {worst}")
        keys = set(zip(self.specimen_ids.tolist(), self.image_ids.tolist()))
        if len(keys) != n:
            raise StoreError("duplicate (specimen_id, image_id) rows")

    def subset(self, mask: np.ndarray) -> "EmbeddingStore":
        return EmbeddingStore(self.specimen_ids[mask], self.image_ids[mask],
                              self.rx[mask], self.ry[mask], self.energy[mask],
                              self.embeddings[mask])

    def save(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["specimen", "image", "rx", "ry", "energy"]
                            + [f"e{i}" for i in range(self.dim)])
            for i in range(len(self)):
                writer.writerow(
                    [int(self.specimen_ids[i]), int(self.image_ids[i]),
                     repr(float(self.rx[i])), repr(float(self.ry[i])),
                     repr(float(self.energy[i]))]
                    + [repr(float(v)) for v in self.embeddings[i]]
                )

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header[:5] != ["specimen", "image", "rx", "ry", "energy"]:
                raise StoreError(f"unexpected store header {header[:5]}")
            d = len(header) - 5
            spec, img, rx, ry, en, emb = [], [], [], [], [], []
            for row in reader:
                spec.append(int(row[0]))
                img.append(int(row[1]))
                rx.append(float(row[2]))
                ry.append(float(row[3]))
                en.append(float(row[4]))
                emb.append([float(v) for v in row[5:]])
                if len(emb[-1]) != d:
                    raise StoreError(f"row with {len(emb[-1])} embedding values, want {d}")
        store = cls(np.array(spec), np.array(img), np.array(rx), np.array(ry),
                    np.array(en), np.array(emb, dtype=np.float32).reshape(len(spec), d))
        store.validate()
        return store


def embed_images(model: enc.EncoderModel, manifest: list[dict], image_dir=None,
                 images: np.ndarray | None = None, batch_size: int = 64) -> EmbeddingStore:
    """One embedding row per manifest image, in manifest order."""
    from .drr import load_manifest_images

    if images is None:
        if image_dir is None:
            raise ValueError("either images or image_dir is required")
        images = load_manifest_images(manifest, image_dir)
    n = len(manifest)
    d = model.spec.embedding_dim
    embeddings = np.zeros((n, d), dtype=np.float32)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        embeddings[start:stop] = enc.forward(model, images[start:stop])
    store = EmbeddingStore(
        specimen_ids=np.array([int(r["specimen_id"]) for r in manifest]),
        image_ids=np.array([int(r["image_id"]) for r in manifest]),
        rx=np.array([float(r["rx"]) for r in manifest]),
        ry=np.array([float(r["ry"]) for r in manifest]),
        energy=np.array([float(r["energy"]) for r in manifest]),
        embeddings=embeddings,
    )
    store.validate()
    return store


# ---------------------------------------------------------------------------
# kNN classification
# ---------------------------------------------------------------------------

def knn_classify(store: EmbeddingStore, query: np.ndarray, k: int = 1) -> int:
    """Majority specimen among the k nearest stored embeddings.

    Distance ties resolve to the lower image id; vote ties to the smaller
    mean distance, then to the lower specimen id.
    """
    if len(store) == 0:
        raise ClassifierError("cannot classify against an empty store")
    if not (1 <= k <= len(store)):
        raise ClassifierError(f"k={k} outside [1, {len(store)}]")
    q = np.asarray(query, dtype=np.float64)
    dists = np.linalg.norm(store.embeddings.astype(np.float64) - q, axis=1)
    order = np.lexsort((store.specimen_ids, store.image_ids, dists))[:k]

    nearest = store.specimen_ids[order]
    classes, votes = np.unique(nearest, return_counts=True)
    best = votes.max()
    tied = classes[votes == best]
    if len(tied) == 1:
        return int(tied[0])
    means = {int(c): dists[order][nearest == c].mean() for c in tied}
    return min(sorted(means), key=lambda c: (means[c], c))


# ---------------------------------------------------------------------------
# Pairwise separation (verification against the margin threshold)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairFilter:
    """Angle deviation limits (degrees, from the grid center) and energy window."""

    rx_limit: float
    ry_limit: float
    energy_min: float
    energy_max: float


FILTER_PRESETS = {
    "narrow_energy_4deg": PairFilter(4.0, 4.0, 146.0, 158.0),
    "full_energy_4deg": PairFilter(4.0, 4.0, 140.0, 158.0),
    "deg7": PairFilter(7.0, 7.0, 140.0, 158.0),
    "rx22_ry4": PairFilter(22.0, 4.0, 140.0, 158.0),
    "rx4_ry22": PairFilter(4.0, 22.0, 140.0, 158.0),
    "full": PairFilter(22.0, 22.0, 140.0, 158.0),
}


@dataclass
class SeparationReport:
    filter: PairFilter
    threshold: float
    accuracy: float
    intra_pairs: int
    inter_pairs: int
    correct_pairs: int

    def to_dict(self) -> dict:
        return {
            "filter": {
                "rx_limit": self.filter.rx_limit,
                "ry_limit": self.filter.ry_limit,
                "energy_min": self.filter.energy_min,
                "energy_max": self.filter.energy_max,
            },
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "intra_pairs": self.intra_pairs,
            "inter_pairs": self.inter_pairs,
            "correct_pairs": self.correct_pairs,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


def filter_rows(store: EmbeddingStore, filt: PairFilter) -> np.ndarray:
    """Boolean mask of rows within the filter's angle/energy window."""
    rx_center = (store.rx.min() + store.rx.max()) / 2.0
    ry_center = (store.ry.min() + store.ry.max()) / 2.0
    return ((np.abs(store.rx - rx_center) <= filt.rx_limit + 1e-9)
            & (np.abs(store.ry - ry_center) <= filt.ry_limit + 1e-9)
            & (store.energy >= filt.energy_min - 1e-9)
            & (store.energy <= filt.energy_max + 1e-9))


def pairwise_separation(store: EmbeddingStore, threshold: float,
                        filt: PairFilter) -> SeparationReport:
    """Exhaustive pairwise verification at the distance threshold.

    A pair is correct when same-specimen distances fall below the
    threshold and different-specimen distances do not.
    """
    if len(store) == 0:
        raise FilterError("separation over an empty store")
    mask = filter_rows(store, filt)
    sub = store.subset(mask)
    if len(sub) < 2:
        raise FilterError(f"filter keeps {len(sub)} row(s); need at least 2")

    emb = sub.embeddings.astype(np.float64)
    ids = sub.specimen_ids
    n = len(sub)
    intra = inter = correct = 0
    for i in range(n - 1):
        d = np.linalg.norm(emb[i + 1:] - emb[i], axis=1)
        if d.max() > MAX_PAIR_DISTANCE or d.min() < 0.0:
            raise StoreError(f"pair distance {d.max()} outside [0, {MAX_PAIR_DISTANCE}]")
        same = ids[i + 1:] == ids[i]
        below = d < threshold
        intra += int(same.sum())
        inter += int((~same).sum())
        correct += int((same & below).sum() + (~same & ~below).sum())
    total = intra + inter
    return SeparationReport(filter=filt, threshold=threshold,
                            accuracy=correct / total, intra_pairs=intra,
                            inter_pairs=inter, correct_pairs=correct)


# ---------------------------------------------------------------------------
# Shape retrieval and rank evaluation
# ---------------------------------------------------------------------------

def estimate_shape(query_image: np.ndarray, model: enc.EncoderModel,
                   store: EmbeddingStore, mesh_catalog: dict[int, TriMesh],
                   k: int = 1) -> tuple[int, TriMesh]:
    """Nearest-specimen retrieval: returns the winning specimen's catalog mesh."""
    embedding = enc.forward(model, query_image)
    specimen = knn_classify(store, embedding, k=k)
    if specimen not in mesh_catalog:
        raise CatalogError(f"specimen {specimen} has no catalog mesh")
    return specimen, mesh_catalog[specimen]


def candidate_rms(truth_mesh: TriMesh, mesh_catalog: dict[int, TriMesh],
                  samples: int = 20_000, seed: int = 0,
                  align_samples: int = 2000) -> dict[int, float]:
    """Aligned RMS distance from every catalog mesh to the true mesh."""
    out = {}
    for sid in sorted(mesh_catalog):
        aligned = rigid_align(mesh_catalog[sid], truth_mesh,
                              samples=align_samples, seed=seed).aligned
        out[sid] = mesh_distance(aligned, truth_mesh, n=samples, seed=seed).rms_mm
    return out


def better_match_rank(query_truth_mesh: TriMesh, predicted_id: int,
                      mesh_catalog: dict[int, TriMesh], samples: int = 20_000,
                      seed: int = 0) -> int:
    """Number of catalog specimens strictly closer (by RMS) than the prediction."""
    if predicted_id not in mesh_catalog:
        raise CatalogError(f"predicted specimen {predicted_id} not in catalog")
    rms = candidate_rms(query_truth_mesh, mesh_catalog, samples=samples, seed=seed)
    return int(sum(1 for sid, value in rms.items() if value < rms[predicted_id]))
