"""Training objectives on logits.

Every loss is a *sum* over the batch.  Teacher or previous-model logits are
detached, so gradients reach only the model being trained.  Class subsets are
lists of head indices; restricted softmaxes renormalize over the subset alone,
so logits outside the subset get exactly zero gradient from that term.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

Subset = Sequence[int] | None


class ParameterError(ValueError):
    pass


class LabelError(ValueError):
    pass


def _restrict(logits: torch.Tensor, class_subset: Subset) -> torch.Tensor:
    if class_subset is None:
        return logits
    idx = list(class_subset)
    if not idx:
        raise ParameterError("class subset is empty")
    width = logits.shape[-1]
    if min(idx) < 0 or max(idx) >= width:
        raise ParameterError(f"class subset {idx} outside logit width {width}")
    return logits[..., torch.as_tensor(idx, dtype=torch.long, device=logits.device)]


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def softmax_temperature(logits: torch.Tensor, class_subset: Subset, tau: float) -> torch.Tensor:
    """Softmax of ``logits / tau`` over ``class_subset``."""
    _check_tau(tau)
    z = _restrict(logits, class_subset) / tau
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def kd_kl(teacher_logits: torch.Tensor, student_logits: torch.Tensor, class_subset: Subset, tau: float) -> torch.Tensor:
    """Summed KL(p_teacher || p_student) at temperature ``tau``; no tau**2 factor."""
    _check_tau(tau)
    t = _restrict(teacher_logits.detach(), class_subset) / tau
    s = _restrict(student_logits, class_subset) / tau
    log_pt = F.log_softmax(t, dim=-1)
    log_ps = F.log_softmax(s, dim=-1)
    pt = log_pt.exp()
    return (torch.xlogy(pt, pt) - pt * log_ps).sum()


def cls_loss(logits: torch.Tensor, labels: torch.Tensor, class_subset: Subset = None) -> torch.Tensor:
    """Summed cross-entropy of the softmax over ``class_subset``.

    ``labels`` are head indices and must all lie in the subset.
    """
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    logits = logits.reshape(-1, logits.shape[-1])
    if class_subset is not None:
        idx = list(class_subset)
        pos = {c: i for i, c in enumerate(idx)}
        bad = [int(y) for y in labels.tolist() if int(y) not in pos]
        if bad:
            raise LabelError(f"labels {sorted(set(bad))} outside class subset")
        labels = torch.as_tensor([pos[int(y)] for y in labels.tolist()], dtype=torch.long)
        logits = _restrict(logits, idx)
    elif len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise LabelError(f"labels outside logit width {logits.shape[-1]}")
    if len(labels) == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels, reduction="sum")


def sparsity_penalty(gammas: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of |gamma|; d|x|/dx at 0 is 0 in torch, which keeps zeroed scales at zero."""
    return sum((g.abs().sum() for g in gammas), torch.zeros(()))


# -- composite objectives ----------------------------------------------------


def teacher_init_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """First-task teacher fine-tuning: plain cross-entropy over C_1."""
    return cls_loss(logits, labels)


def student_init_loss(
    student_logits: torch.Tensor, teacher_logits: torch.Tensor, labels: torch.Tensor, tau: float = 2.0,
    lambda_init: float = 1.0,
) -> torch.Tensor:
    loss = cls_loss(student_logits, labels)
    if lambda_init:
        loss = loss + lambda_init * kd_kl(teacher_logits, student_logits, None, tau)
    return loss


def _ce_plus_restricted_kd(logits, ref_logits, labels, prev_classes, tau, lam):
    if not list(prev_classes):
        raise ParameterError("previous-class set is empty")
    loss = cls_loss(logits, labels)
    if lam:
        loss = loss + lam * kd_kl(ref_logits, logits, prev_classes, tau)
    return loss


def student_sub_loss(
    student_logits, teacher_logits, labels, prev_classes, tau: float = 2.0, lambda_sub: float = 10.0
) -> torch.Tensor:
    """Later-task student loss: CE over all seen classes + KD from the teacher on old classes."""
    return _ce_plus_restricted_kd(student_logits, teacher_logits, labels, prev_classes, tau, lambda_sub)


def lwf_loss(logits, prev_logits, labels, prev_classes, tau: float = 2.0, lam: float = 1.0) -> torch.Tensor:
    return _ce_plus_restricted_kd(logits, prev_logits, labels, prev_classes, tau, lam)


def icarl_loss(logits, prev_logits, labels, prev_classes, tau: float = 2.0, lam: float = 1.0) -> torch.Tensor:
    """Same form as LwF; the caller feeds batches drawn from the task data plus memory."""
    return _ce_plus_restricted_kd(logits, prev_logits, labels, prev_classes, tau, lam)


def icarl_kd_loss(student_logits, teacher_logits, labels, prev_classes, tau: float = 2.0, lam: float = 1.0):
    return _ce_plus_restricted_kd(student_logits, teacher_logits, labels, prev_classes, tau, lam)


def ssil_loss(
    task_logits: torch.Tensor,
    task_labels: torch.Tensor,
    mem_logits: torch.Tensor,
    mem_labels: torch.Tensor,
    ref_task_logits: torch.Tensor,
    ref_mem_logits: torch.Tensor,
    current_classes,
    prev_classes,
    tau: float = 2.0,
    lam: float = 1.0,
) -> torch.Tensor:
    """Separated softmax: task CE over current classes, memory CE over previous
    classes, and KD on previous classes over the union batch."""
    if not list(prev_classes):
        raise ParameterError("previous-class set is empty")
    loss = cls_loss(task_logits, task_labels, current_classes)
    if len(mem_labels):
        loss = loss + cls_loss(mem_logits, mem_labels, prev_classes)
    if lam:
        kd = kd_kl(ref_task_logits, task_logits, prev_classes, tau)
        if len(mem_labels):
            kd = kd + kd_kl(ref_mem_logits, mem_logits, prev_classes, tau)
        loss = loss + lam * kd
    return loss


def ssil_kd_loss(task_logits, task_labels, mem_logits, mem_labels, teacher_task_logits, teacher_mem_logits,
                 current_classes, prev_classes, tau: float = 2.0, lam: float = 1.0) -> torch.Tensor:
    """SS-IL with the self-distillation reference replaced by the previous-task teacher."""
    return ssil_loss(task_logits, task_labels, mem_logits, mem_labels, teacher_task_logits, teacher_mem_logits,
                     current_classes, prev_classes, tau, lam)


def prune_regularized_loss(logits, labels, gammas, mu: float = 0.1, class_subset: Subset = None) -> torch.Tensor:
    """Cross-entropy plus ``mu`` times the l1 norm of the prunable BN scales."""
    if mu < 0:
        raise ParameterError("mu must be >= 0")
    loss = cls_loss(logits, labels, class_subset)
    if mu:
        loss = loss + mu * sparsity_penalty(gammas)
    return loss
