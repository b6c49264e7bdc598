"""Softmax cross-entropy and the multi-head training objective.

Each classifier head contributes one mean-over-batch cross-entropy term;
heads over fine classes (z0, z1, z3) score against fine labels, heads over
coarse classes (z2, z4) against coarse labels. The total is their
unweighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import LabelOutOfRangeError, MissingHeadError, NonFiniteInputError

__all__ = [
    "LossBreakdown",
    "softmax_cross_entropy",
    "total_loss",
    "HEAD_LABEL_KIND",
    "VARIANT_HEADS",
]

# which label stream supervises each head
HEAD_LABEL_KIND = {"z0": "fine", "z1": "fine", "z2": "coarse",
                   "z3": "fine", "z4": "coarse"}

# heads each architecture variant must produce
VARIANT_HEADS = {
    "resnet": ("z0",),
    "two_branch": ("z0", "z1", "z2"),
    "graft": ("z0", "z3", "z4"),
    "engraf": ("z0", "z1", "z2", "z3", "z4"),
}


@dataclass
class LossBreakdown:
    """Per-head loss terms and their sum. Values are scalar tensors during
    training and plain floats once detached for logging."""

    per_head: dict
    total: object

    def detached(self) -> "LossBreakdown":
        per = {k: float(v) for k, v in self.per_head.items()}
        return LossBreakdown(per_head=per, total=float(self.total))


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy with row-max subtraction for f32 stability.

    Returns -(1/m) * sum_i log softmax(logits_i)[labels_i], differentiable
    with respect to logits.
    """
    if logits.ndim != 2:
        raise NonFiniteInputError(f"logits must be (B, n), got shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise NonFiniteInputError("logits contain NaN or infinity")
    labels = labels.to(dtype=torch.long)
    n = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n):
        raise LabelOutOfRangeError(
            f"labels must lie in [0, {n}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_probs = shifted - shifted.exp().sum(dim=1, keepdim=True).log()
    picked = log_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    return -picked.mean()


def total_loss(heads, fine: torch.Tensor, coarse: torch.Tensor,
               variant: str | None = None) -> LossBreakdown:
    """Sum one cross-entropy term per present head.

    When ``variant`` is given, the heads required by that variant must all
    be present (MissingHead otherwise). ``heads`` is a HeadLogits or any
    object with a ``present()`` mapping of head name to logits.
    """
    present = heads.present()
    if variant is not None:
        required = VARIANT_HEADS.get(variant)
        if required is None:
            raise MissingHeadError(f"unknown variant {variant!r}")
        missing = [h for h in required if h not in present]
        if missing:
            raise MissingHeadError(f"variant {variant!r} requires heads {missing}")
    if not present:
        raise MissingHeadError("no heads present")
    per_head = {}
    for name in sorted(present):
        target = fine if HEAD_LABEL_KIND[name] == "fine" else coarse
        per_head[name] = softmax_cross_entropy(present[name], target)
    total = None
    for v in per_head.values():
        total = v if total is None else total + v
    return LossBreakdown(per_head=per_head, total=total)
