"""Post-hoc analyses: capsule redundancy histograms, explanation error, and
per-concept prototype extraction."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import LabeledImageSet, write_pgm
from .layers import CapsuleTensor

_EPS = 1e-12


@dataclass
class RedundancyHistogram:
    """Distribution of pairwise |cosine similarity| between capsules."""

    bin_edges: np.ndarray     # 21 edges over [0, 1]
    fractions: np.ndarray     # 20 bins, sums to 1
    mean: float

    def to_csv(self) -> str:
        lines = ["bin_low,bin_high,fraction"]
        for lo, hi, f in zip(self.bin_edges[:-1], self.bin_edges[1:],
                             self.fractions):
            lines.append(f"{lo:.2f},{hi:.2f},{f:.6f}")
        return "\n".join(lines) + "\n"


def redundancy_histogram(caps, bins: int = 20) -> RedundancyHistogram:
    """Pairwise |cos| between all capsule pairs, pooled over the batch.

    Accepts a CapsuleTensor or a (B, n, d) array; needs n >= 2. Invariant to
    positive per-capsule rescaling.
    """
    values = caps.data.value if isinstance(caps, CapsuleTensor) else np.asarray(caps)
    if values.ndim != 3 or values.shape[1] < 2:
        raise ValueError(f"need a (B, n>=2, d) capsule array, got {values.shape}")
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    unit = values / np.maximum(norms, _EPS)
    gram = np.abs(unit @ unit.transpose(0, 2, 1))
    n = values.shape[1]
    iu, ju = np.triu_indices(n, k=1)
    sims = np.clip(gram[:, iu, ju].ravel(), 0.0, 1.0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(sims, bins=edges)
    return RedundancyHistogram(
        bin_edges=edges,
        fractions=counts / sims.size,
        mean=float(sims.mean()),
    )


def explanation_error(activations: np.ndarray, Z: np.ndarray) -> float:
    """Batch-mean Euclidean distance between concept activations and the
    binary ground-truth indicators."""
    activations = np.asarray(activations, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if activations.shape != Z.shape:
        raise ValueError(f"activations {activations.shape} vs Z {Z.shape}")
    return float(np.linalg.norm(activations - Z, axis=1).mean())


def prototype_select(concept_norms: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k images with the highest activation per concept.

    ``concept_norms`` is (N, m). Ties break toward the lower index; when
    k >= N every index is returned, sorted by activation. Output is (m, k').
    """
    n, m = concept_norms.shape
    k = min(k, n)
    picks = np.empty((m, k), dtype=np.int64)
    for j in range(m):
        order = np.argsort(-concept_norms[:, j], kind="stable")
        picks[j] = order[:k]
    return picks


def dump_prototypes(concept_norms: np.ndarray, dataset: LabeledImageSet,
                    k: int, out_dir: str) -> str:
    """Write per-concept prototype PGMs plus an index manifest CSV; returns
    the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    picks = prototype_select(concept_norms, k)
    lines = ["concept,rank,index,activation"]
    for j in range(picks.shape[0]):
        for rank, idx in enumerate(picks[j]):
            lines.append(f"{j},{rank},{idx},{concept_norms[idx, j]:.6f}")
            write_pgm(os.path.join(out_dir, f"concept{j}_rank{rank}.pgm"),
                      dataset.images[idx, 0])
    manifest = os.path.join(out_dir, "prototypes.csv")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest
