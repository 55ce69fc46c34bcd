"""Training objective: report cross-entropy plus a margin-based restoration loss.

The restoration term compares each restored slot-triple against the case's
ground-truth triple (positive energy) and against a corrupted variant of it
(negative energy) through a hinge with margin gamma.  Three L1 energies are
available:

- ``likelihood`` (default): the energy of a token under a slot is its
  negative log-mass, ``-log p(t)``.  Its unique zero is the exact
  ground-truth assignment, so slot supervision cannot be satisfied by
  embedding mixtures, and the hinge gradient in logit space is the
  cross-entropy-style ``p - onehot``, which never vanishes when a slot
  saturates on a wrong token.  The corrupted side is floored at the chance
  level, ``-log(p + 1/width)``, so a vanishing corrupted-token mass cannot
  disable the hinge while the positive side is still violated.
- ``alignment``: L1 distances between softmax-expected slot embeddings and
  the target token embeddings; gradients also shape the embedding table.
- ``transe``: the literal additive composition |e_s + r - e_o| over expected
  embeddings, with the corrupted triple's energy computed from the table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .extraction import ClinicalGraph, Triple
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    cross_entropy_logits,
    matmul,
    take_rows,
)
from .vocab import PAD, SPECIALS

log = logging.getLogger(__name__)

NUM_SPECIALS = len(SPECIALS)
ENERGY_MODES = ("likelihood", "alignment", "transe")

# Additive floor under gathered ground-truth probabilities before the log; it
# only matters when a handcrafted distribution puts exactly zero mass on a
# queried token (softmax outputs stay far above it), keeping the energy
# finite there.  The corrupted side instead floors at chance mass, 1/width.
PROBABILITY_FLOOR = 1e-315


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights for the combined objective plus the hinge margin."""

    lambda_ce: float = 1.0
    lambda_tr: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_tr < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma <= 0:
            raise ValueError("margin gamma must be positive")


def transe_energy(e_s, r, e_o) -> Tensor:
    """L1 norm of e_s + r - e_o for equal-length embedding vectors."""
    e_s = e_s if isinstance(e_s, Tensor) else Tensor(e_s)
    r = r if isinstance(r, Tensor) else Tensor(r)
    e_o = e_o if isinstance(e_o, Tensor) else Tensor(e_o)
    if not e_s.shape == r.shape == e_o.shape:
        raise ShapeError(f"energy operands differ: {e_s.shape}, {r.shape}, {e_o.shape}")
    return (e_s + r - e_o).abs().sum()


def hinge_term(d_pos, d_neg, gamma: float) -> Tensor:
    """max(d_pos - d_neg + gamma, 0), elementwise over tensors or scalars."""
    d_pos = d_pos if isinstance(d_pos, Tensor) else Tensor(d_pos)
    d_neg = d_neg if isinstance(d_neg, Tensor) else Tensor(d_neg)
    return (d_pos - d_neg + gamma).relu()


class NegativeSampler:
    """Entity-replacement corruption that never emits a triple present in the graph."""

    REJECTION_BOUND = 32

    def __init__(self, graph: ClinicalGraph, rng, allowed_entities=None):
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        entities = set(graph.entity_set)
        if allowed_entities is not None:
            entities &= set(allowed_entities)
        self.entities = sorted(entities)
        self._exists = {(t.subject, t.relation, t.object) for t in graph.triples}

    def _candidate(self, triple: Triple, side: str, entity: str) -> Triple | None:
        s, o = (entity, triple.object) if side == "subject" else (triple.subject, entity)
        if s == o or (s, triple.relation, o) in self._exists:
            return None
        return Triple(s, triple.relation, o)

    def corrupt(self, triple: Triple) -> Triple | None:
        """Replace the subject or the object with an entity forming an unseen triple."""
        if not self.entities:
            log.warning("negative sampler has no candidate entities")
            return None
        first = "subject" if self.rng.integers(2) == 0 else "object"
        other = "object" if first == "subject" else "subject"
        for side in (first, other):
            for _ in range(self.REJECTION_BOUND):
                entity = self.entities[int(self.rng.integers(len(self.entities)))]
                cand = self._candidate(triple, side, entity)
                if cand is not None:
                    return cand
            for idx in self.rng.permutation(len(self.entities)):
                cand = self._candidate(triple, side, self.entities[int(idx)])
                if cand is not None:
                    return cand
        log.warning("no valid corruption exists for (%s, %s, %s); skipping",
                    triple.subject, triple.relation, triple.object)
        return None


def triple_restoration_loss(slot_probs: Tensor, token_table: Tensor, gt_ids,
                            neg_ids, gamma: float = 1.0,
                            mode: str = "likelihood") -> Tensor:
    """Summed hinge over a case's triples; slot-triple i is aligned to triple i.

    ``gt_ids`` and ``neg_ids`` are [k, 3] vocabulary-id arrays; a negative
    component in a ``neg_ids`` row marks a triple whose corruption was
    skipped, which drops that hinge term.  Excess slots stay unsupervised;
    excess triples beyond slot capacity are truncated.  In ``likelihood``
    mode the energies live on the restored distributions and ``token_table``
    only supplies the vocabulary size, so no gradient reaches the embeddings.
    """
    if mode not in ENERGY_MODES:
        raise ValueError(f"mode must be one of {ENERGY_MODES}, got {mode!r}")
    gt = np.asarray(gt_ids, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(neg_ids, dtype=np.int64).reshape(-1, 3)
    if gt.shape != neg.shape:
        raise ShapeError(f"gt and negative id shapes differ: {gt.shape} vs {neg.shape}")
    capacity = slot_probs.shape[0] // 3
    if gt.shape[0] > capacity:
        log.debug("truncating %d triples to slot capacity %d", gt.shape[0], capacity)
        gt, neg = gt[:capacity], neg[:capacity]
    k = gt.shape[0]
    if k == 0:
        return Tensor(0.0)
    vocab_size = token_table.shape[0]
    if gt.min() < NUM_SPECIALS or gt.max() >= vocab_size:
        raise IndexError("ground-truth ids must be non-special vocabulary ids")
    keep = (neg >= 0).all(axis=1)
    if keep.any() and neg[keep].min() < NUM_SPECIALS:
        raise IndexError("corrupted ids must be non-special vocabulary ids")
    if not keep.any():
        return Tensor(0.0)
    rows = np.flatnonzero(keep)
    if mode == "likelihood":
        width = vocab_size - NUM_SPECIALS
        if slot_probs.shape[1] != width:
            raise ShapeError(
                f"slot distributions have width {slot_probs.shape[1]}, expected {width}")
        onehot = np.zeros((3 * k, width))
        onehot[np.arange(3 * k), gt.ravel() - NUM_SPECIALS] = 1.0
        used = take_rows(slot_probs, np.arange(3 * k))
        gt_nll = ((used * Tensor(onehot)).sum(axis=1) + PROBABILITY_FLOOR).log() * -1.0
        d_pos = gt_nll.reshape(k, 3).sum(axis=1)
        col = np.argmax(neg[rows] != gt[rows], axis=1)
        neg_onehot = np.zeros((rows.size, width))
        neg_onehot[np.arange(rows.size), neg[rows, col] - NUM_SPECIALS] = 1.0
        slot_p = take_rows(slot_probs, 3 * rows + col)
        d_neg = ((slot_p * Tensor(neg_onehot)).sum(axis=1) + 1.0 / width).log() * -1.0
        return hinge_term(take_rows(d_pos, rows), d_neg, gamma).sum()
    content = take_rows(token_table, np.arange(NUM_SPECIALS, vocab_size))
    e_hat = matmul(slot_probs, content)
    if mode == "alignment":
        used = take_rows(e_hat, np.arange(3 * k))
        gt_emb = take_rows(token_table, gt.ravel())
        d_pos = (used - gt_emb).abs().sum(axis=1).reshape(k, 3).sum(axis=1)
        col = np.argmax(neg[rows] != gt[rows], axis=1)
        slot_hat = take_rows(e_hat, 3 * rows + col)
        d_neg = (slot_hat - take_rows(token_table, neg[rows, col])).abs().sum(axis=1)
    else:
        s_hat = take_rows(e_hat, 3 * np.arange(k))
        r_hat = take_rows(e_hat, 3 * np.arange(k) + 1)
        o_hat = take_rows(e_hat, 3 * np.arange(k) + 2)
        d_pos = (s_hat + r_hat - o_hat).abs().sum(axis=1)
        neg_s = take_rows(token_table, neg[rows, 0])
        neg_r = take_rows(token_table, neg[rows, 1])
        neg_o = take_rows(token_table, neg[rows, 2])
        d_neg = (neg_s + neg_r - neg_o).abs().sum(axis=1)
    return hinge_term(take_rows(d_pos, rows), d_neg, gamma).sum()


def report_cross_entropy(logits: Tensor, target_ids) -> Tensor:
    """Mean NLL of the teacher-forced targets; padded positions are ignored."""
    targets = np.asarray(target_ids, dtype=np.int64)
    return cross_entropy_logits(logits, targets, ignore_index=PAD)


def total_loss(ce: Tensor, tr: Tensor, weights: LossWeights) -> Tensor:
    """Weighted sum of the two branches; aborts naming any non-finite input."""
    if not np.isfinite(ce.data).all():
        raise NonFiniteError("cross-entropy branch is non-finite")
    if not np.isfinite(tr.data).all():
        raise NonFiniteError("triple-restoration branch is non-finite")
    return ce * weights.lambda_ce + tr * weights.lambda_tr
