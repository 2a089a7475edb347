"""Training objective: cross-entropy and triplet terms per branch plus the
cross-branch orthogonality penalty on the GRU weight matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .model import GRU_WEIGHTS, BranchOutput, GruParams

ORTH_MODES = ("frobenius", "literal")

# Column layout of a quadruplet row: anchor, s1, s2, s3, s4.
# KWS positives share the keyword (s1, s2); SV positives share the speaker (s1, s3).
FOUR_SCENARIO_TRIPLETS = {
    "kws": ((1, 3), (1, 4), (2, 3), (2, 4)),
    "sv": ((1, 2), (1, 4), (3, 2), (3, 4)),
}
# Two-scenario rows are anchor, s1, s4.
TWO_SCENARIO_TRIPLETS = {"kws": ((1, 2),), "sv": ((1, 2),)}


def cross_entropy(logits: Tensor, target) -> Tensor:
    """``-log softmax(logits)[target]``, averaged when batched."""
    return ad.softmax_xent(logits, target)


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    return 1.0 - ad.cosine_similarity(a, b)


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float = 0.5) -> Tensor:
    """Mean of ``max(0, d(a, p) - d(a, n) + margin)`` with cosine distance d."""
    if margin < 0:
        raise ValueError(f"triplet margin must be >= 0, got {margin}")
    gap = cosine_distance(anchor, positive) - cosine_distance(anchor, negative)
    return ad.mean_all(ad.hinge(gap + margin))


def orth_term(w_kws: Tensor, w_sv: Tensor, mode: str = "frobenius") -> Tensor:
    """Penalty on ``w_kws @ w_sv.T``: squared Frobenius norm, or the plain entry sum."""
    if w_kws.shape != w_sv.shape:
        raise ShapeError(f"orth_term: branch matrices differ in shape: {w_kws.shape} vs {w_sv.shape}")
    product = ad.matmul(w_kws, ad.transpose(w_sv))
    if mode == "frobenius":
        return ad.frobenius_sq(product)
    if mode == "literal":
        return ad.sum_all(product)
    raise ValueError(f"unknown orth mode {mode!r}; expected one of {ORTH_MODES}")


def l_orth(gru_kws: list[GruParams], gru_sv: list[GruParams], mode: str = "frobenius") -> Tensor:
    """Sum of :func:`orth_term` over the six weight matrices of every layer. Biases are not penalised."""
    if len(gru_kws) != len(gru_sv):
        raise ShapeError(f"l_orth: branches have {len(gru_kws)} and {len(gru_sv)} GRU layers")
    total = None
    for layer_kws, layer_sv in zip(gru_kws, gru_sv):
        for name in GRU_WEIGHTS:
            term = orth_term(getattr(layer_kws, name), getattr(layer_sv, name), mode)
            total = term if total is None else total + term
    return total


def cross_branch_norm(gru_kws: list[GruParams], gru_sv: list[GruParams]) -> float:
    """Summed ``||W_kws W_sv^T||_F`` over all weight pairs; a diagnostic, not a loss."""
    return float(sum(np.linalg.norm(getattr(a, n).value @ getattr(b, n).value.T)
                     for a, b in zip(gru_kws, gru_sv) for n in GRU_WEIGHTS))


@dataclass
class LossBreakdown:
    l_ckws: float
    l_tkws: float
    l_csv: float
    l_tsv: float
    l_orth: float
    total: float
    lambda_orth: float = 1.0
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> list[float]:
        return [self.l_ckws, self.l_tkws, self.l_csv, self.l_tsv, self.l_orth, self.total]


def _scalar(x) -> float:
    return float(x.value) if isinstance(x, Tensor) else float(x)


def total_loss(l_ckws, l_tkws, l_csv, l_tsv, l_orth_value, lambda_orth: float = 1.0) -> LossBreakdown:
    """Combine the five components. Accepts tensors (for backprop) or plain numbers."""
    parts = [l_ckws, l_tkws, l_csv, l_tsv]
    tensor = None
    if any(isinstance(p, Tensor) for p in parts + [l_orth_value]):
        tensor = ad.Tensor(0.0)
        for p in parts:
            tensor = tensor + p
        if lambda_orth != 0:
            tensor = tensor + ad.scale(l_orth_value if isinstance(l_orth_value, Tensor)
                                       else Tensor(float(l_orth_value)), lambda_orth)
    values = [_scalar(p) for p in parts]
    orth = _scalar(l_orth_value)
    total = sum(values) + (lambda_orth * orth if lambda_orth != 0 else 0.0)
    return LossBreakdown(*values, orth, total, lambda_orth, tensor)


def branch_losses(out: BranchOutput, labels: np.ndarray, rows: np.ndarray,
                  triplets: tuple, margin: float) -> tuple[Tensor, Tensor]:
    """CE over every clip slot in ``rows`` and the mean of the scheduled triplets.

    ``out`` holds outputs of the distinct clips of a batch; ``rows`` is an
    (anchors, slots) array of indices into them; ``labels`` are class indices
    for each distinct clip.
    """
    flat = rows.reshape(-1)
    ce = cross_entropy(ad.take_rows(out.logits, flat), labels[flat])
    anchor_idx = np.concatenate([rows[:, 0]] * len(triplets))
    pos_idx = np.concatenate([rows[:, p] for p, _ in triplets])
    neg_idx = np.concatenate([rows[:, n] for _, n in triplets])
    emb = out.embedding
    trip = triplet_loss(ad.take_rows(emb, anchor_idx), ad.take_rows(emb, pos_idx),
                        ad.take_rows(emb, neg_idx), margin)
    return ce, trip
