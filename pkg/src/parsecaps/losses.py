"""Training objectives: classification, concept presentation, concept
triplet, reconstruction, and the two overall compositions (with and without
concept supervision). All losses are batch-averaged scalars.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layers import CapsuleTensor, ConceptState, Linear, Module, capsule_norms, \
    uniform_param
from .tensor import ShapeError, Tensor, relu, softmax, tlog, tmean, tsum


@dataclass
class LossWeights:
    """Loss weights and margins.

    ``lam`` scales the presentation loss, ``eta`` the triplet loss (both in
    the concept-supervised composition), ``gamma`` the reconstruction loss
    (unsupervised composition). ``t_plus``/``t_minus`` are the activation
    margins of the presentation loss, ``t_triplet`` the triplet margin.
    """

    lam: float = 0.5
    eta: float = 0.1
    gamma: float = 0.0005
    t_plus: float = 0.9
    t_minus: float = 0.1
    t_triplet: float = 0.2

    def __post_init__(self):
        if not (0.0 <= self.t_minus < self.t_plus <= 1.0):
            raise ValueError(
                f"need 0 <= t_minus < t_plus <= 1, got {self.t_minus}, {self.t_plus}")
        if self.t_triplet <= 0.0:
            raise ValueError(f"triplet margin must be positive, got {self.t_triplet}")
        if min(self.lam, self.eta, self.gamma) < 0.0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class ConceptBatch:
    """Concept supervision for one batch: the binary indicator matrix plus
    both sides of the joint embedding space."""

    Z: np.ndarray                   # (B, m) entries in {0, 1}
    concept_embeddings: Tensor      # (m, d_e) learned table, one row per concept
    capsule_embeddings: Tensor      # (B, m, d_e)


class ConceptEmbedding(Module):
    """Joint latent space for concept capsules and concept identifiers.

    Capsules pass through a shared linear embedding layer; each concept
    identifier owns a learned table row (the phrases themselves carry no
    text encoder).
    """

    def __init__(self, rng, m: int, d_c: int, d_e: int = 16):
        self.capsule_proj = Linear(rng, d_c, d_e)
        self.phrase_table = uniform_param(rng, (m, d_e), d_e)
        self.m = m

    def __call__(self, concept_caps: CapsuleTensor, Z: np.ndarray) -> ConceptBatch:
        return ConceptBatch(
            Z=Z,
            concept_embeddings=self.phrase_table,
            capsule_embeddings=self.capsule_proj(concept_caps.data),
        )


def presentation_loss(concepts: ConceptState, Z: np.ndarray,
                      t_plus: float = 0.9, t_minus: float = 0.1) -> Tensor:
    """Margin loss pushing present-concept capsule norms above ``t_plus``
    and absent-concept norms below ``t_minus``. Consumes the raw
    pre-softmax norms."""
    norms = concepts.norms
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape != norms.shape:
        raise ShapeError(f"indicator shape {Z.shape} != concept norms {norms.shape}")
    present = relu(t_plus - norms) ** 2 * Z
    absent = relu(norms - t_minus) ** 2 * (1.0 - Z)
    return tmean(tsum(present + absent, axis=1))


def triplet_loss(cap_emb: Tensor, concept_emb: Tensor,
                 t_triplet: float = 0.2) -> Tensor:
    """Hinge on squared embedding distances: capsule i must sit closer to
    concept i than any other capsule j does, by the margin. Zero when
    there are no negative pairs (m < 2)."""
    b, m, d_e = cap_emb.shape
    if concept_emb.shape != (m, d_e):
        raise ShapeError(
            f"concept table {concept_emb.shape} != capsule embedding ({m}, {d_e})")
    if m < 2:
        return Tensor(0.0)
    diff = cap_emb.reshape((b, m, 1, d_e)) - concept_emb.reshape((1, 1, m, d_e))
    dist = tsum(diff * diff, axis=3)                      # (B, j, i)
    eye = np.eye(m)
    matched = tsum(dist * eye.reshape((1, m, m)), axis=1)  # (B, i) distance of pair i
    hinge = relu(matched.reshape((b, 1, m)) - dist + t_triplet)
    return tmean(tsum(hinge * (1.0 - eye).reshape((1, m, m)), axis=(1, 2)))


def classification_loss(class_caps: CapsuleTensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy of the softmax over class-capsule norms."""
    norms = capsule_norms(class_caps.data)                # (B, n_class)
    b, n_class = norms.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != batch ({b},)")
    onehot = np.zeros((b, n_class))
    onehot[np.arange(b), labels] = 1.0
    logp = tlog(softmax(norms))
    return -tmean(tsum(logp * onehot, axis=1))


def reconstruction_loss(recon: Tensor, x) -> Tensor:
    """Mean squared error between the reconstruction and the input."""
    target = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction {recon.shape} != target {target.shape}")
    residual = recon - Tensor(target)
    return tmean(residual * residual)


@dataclass
class LossParts:
    """Computed loss components; disabled ones stay None."""

    classification: Tensor
    presentation: Optional[Tensor] = None
    triplet: Optional[Tensor] = None
    reconstruction: Optional[Tensor] = None


def total_loss(parts: LossParts, weights: LossWeights, mode: str) -> Tensor:
    """Compose the overall objective.

    supervised:   L_c + lam * L_p + eta * L_t
    unsupervised: L_c + gamma * L_r
    Components left at None contribute nothing (ablations switch them off).
    """
    if mode not in ("supervised", "unsupervised"):
        raise ValueError(f"unknown loss mode {mode!r}")
    total = parts.classification
    if mode == "supervised":
        if parts.presentation is not None:
            total = total + weights.lam * parts.presentation
        if parts.triplet is not None:
            total = total + weights.eta * parts.triplet
    else:
        if parts.reconstruction is not None:
            total = total + weights.gamma * parts.reconstruction
    return total
