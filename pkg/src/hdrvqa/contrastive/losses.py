"""NT-Xent contrastive losses.

A batch is described by projector outputs ``z`` (N x K), integer ``labels``
and a per-sample ``ugc_mask``. Samples sharing a label are each other's
positives. Anchors in the synthetic-class regime average the loss over all
their positives; anchors flagged in ``ugc_mask`` are their own class and must
have exactly one partner (their transformed view).

The numpy functions are the reference implementation and expose a
closed-form gradient; :func:`ntxent_loss` is the torch version used for
training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import logsumexp

from hdrvqa.errors import LossRoutingError


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass
class LabeledBatch:
    z: np.ndarray
    labels: np.ndarray
    tau: float = 0.1
    ugc_mask: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        self.labels = np.asarray(self.labels).ravel()
        n = self.z.shape[0]
        if n < 2:
            raise ValueError("a contrastive batch needs at least two samples")
        if self.labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got {self.labels.size}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.ugc_mask is None:
            self.ugc_mask = np.zeros(n, dtype=bool)
        self.ugc_mask = np.asarray(self.ugc_mask, dtype=bool).ravel()
        if self.ugc_mask.shape != (n,):
            raise ValueError(f"expected {n} ugc flags, got {self.ugc_mask.size}")
        if np.any(np.linalg.norm(self.z, axis=1) == 0):
            raise ValueError("zero embedding in batch; cosine similarity undefined")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def positive_mask(self) -> np.ndarray:
        same = self.labels[:, None] == self.labels[None, :]
        np.fill_diagonal(same, False)
        return same

    def check_routing(self) -> np.ndarray:
        """Positive mask, after verifying every anchor has a legal positive set."""
        pos = self.positive_mask()
        counts = pos.sum(axis=1)
        orphan = np.flatnonzero(counts == 0)
        if orphan.size:
            raise LossRoutingError(f"anchors {orphan.tolist()} have no positive partner in the batch")
        bad_ugc = np.flatnonzero(self.ugc_mask & (counts != 1))
        if bad_ugc.size:
            raise LossRoutingError(
                f"unique-class anchors {bad_ugc.tolist()} must have exactly one positive, "
                f"found {counts[bad_ugc].tolist()}")
        return pos

    def logits(self) -> np.ndarray:
        """phi(z_i, z_k) / tau, diagonal set to -inf."""
        u = self.z / np.linalg.norm(self.z, axis=1, keepdims=True)
        s = (u @ u.T) / self.tau
        np.fill_diagonal(s, -np.inf)
        return s


def _anchor_loss(logits_row: np.ndarray, positives: np.ndarray) -> float:
    return float(logsumexp(logits_row) - logits_row[positives].mean())


def ntxent_syn(batch: LabeledBatch, i: int) -> float:
    """Loss of anchor ``i`` averaged over every other sample sharing its label."""
    pos = batch.positive_mask()[i]
    if not pos.any():
        raise LossRoutingError(
            f"anchor {i} is a singleton class; use the pairwise loss for unique-class samples")
    return _anchor_loss(batch.logits()[i], pos)


def ntxent_pairwise(batch: LabeledBatch, i: int, j: int) -> float:
    """Loss of anchor ``i`` against the single designated positive ``j``."""
    if i == j:
        raise LossRoutingError("anchor and positive must differ")
    if not (0 <= i < batch.n and 0 <= j < batch.n):
        raise IndexError(f"indices ({i}, {j}) outside a batch of {batch.n}")
    pos = np.zeros(batch.n, dtype=bool)
    pos[j] = True
    return _anchor_loss(batch.logits()[i], pos)


def _per_anchor(batch: LabeledBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = batch.check_routing()
    s = batch.logits()
    lse = logsumexp(s, axis=1)
    counts = pos.sum(axis=1)
    pos_mean = np.where(pos, s, 0.0).sum(axis=1) / counts
    return lse - pos_mean, s, pos


def total_loss(batch: LabeledBatch) -> float:
    """Mean over anchors: synthetic anchors use the class-averaged loss, unique ones the pairwise loss."""
    losses, _, _ = _per_anchor(batch)
    return float(losses.mean())


def total_loss_and_grad(batch: LabeledBatch) -> tuple[float, np.ndarray]:
    """Total loss and its closed-form gradient with respect to ``batch.z``."""
    losses, s, pos = _per_anchor(batch)
    n = batch.n
    softmax = np.exp(s - logsumexp(s, axis=1, keepdims=True))
    # d loss / d logits, with logits = u u^T / tau
    w = (softmax - pos / pos.sum(axis=1, keepdims=True)) / n
    norms = np.linalg.norm(batch.z, axis=1, keepdims=True)
    u = batch.z / norms
    grad_u = (w + w.T) @ u / batch.tau
    grad_z = (grad_u - u * np.sum(u * grad_u, axis=1, keepdims=True)) / norms
    return float(losses.mean()), grad_z


def ntxent_loss(z: torch.Tensor, labels: torch.Tensor, tau: float = 0.1,
                ugc_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Torch counterpart of :func:`total_loss`, differentiable in ``z``."""
    n = z.shape[0]
    pos = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    pos = pos & ~eye
    counts = pos.sum(dim=1)
    if torch.any(counts == 0):
        raise LossRoutingError("every anchor needs at least one positive in the batch")
    if ugc_mask is not None and torch.any(ugc_mask & (counts != 1)):
        raise LossRoutingError("unique-class anchors must have exactly one positive")
    u = F.normalize(z, dim=1)
    s = (u @ u.T) / tau
    s = s.masked_fill(eye, float("-inf"))
    lse = torch.logsumexp(s, dim=1)
    pos_mean = torch.where(pos, s, torch.zeros_like(s)).sum(dim=1) / counts
    return (lse - pos_mean).mean()


def paired_view_labels(batch_size: int) -> torch.Tensor:
    """Labels for [anchors; positives] where each frame is its own class."""
    idx = torch.arange(batch_size)
    return torch.cat([idx, idx])
