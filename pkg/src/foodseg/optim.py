"""AdamW with decoupled weight decay, and the warmup + poly learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class AdamWState:
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor
    step: int = 0


def adamw_step(param: torch.Tensor, grad: torch.Tensor, state: AdamWState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place update of ``param`` and ``state``.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta); decay
    uses the pre-update theta and never enters the moments.
    """
    if not torch.isfinite(grad).all():
        raise NonFiniteError(f"non-finite gradient for parameter of shape {tuple(param.shape)}")
    b1, b2 = betas
    state.step += 1
    state.exp_avg.mul_(b1).add_(grad, alpha=1 - b1)
    state.exp_avg_sq.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    m_hat = state.exp_avg / (1 - b1 ** state.step)
    v_hat = state.exp_avg_sq / (1 - b2 ** state.step)
    update = m_hat / (v_hat.sqrt() + eps)
    if weight_decay:
        update = update + weight_decay * param
    param.sub_(lr * update)


class AdamW(torch.optim.Optimizer):
    """``torch.optim`` front-end over :func:`adamw_step`."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError(f"invalid lr {lr}")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ValueError(f"invalid betas {betas}")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                st = self.state[p]
                if not st:
                    st["adamw"] = AdamWState(torch.zeros_like(p), torch.zeros_like(p))
                adamw_step(p, p.grad, st["adamw"], group["lr"], group["betas"],
                           group["eps"], group["weight_decay"])
        return loss

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr * group.get("lr_scale", 1.0)


NO_DECAY_KEYS = ("pos_embed", "mask_token", "codebook")


def param_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    """Decay matrices/kernels only; biases, norms and embedding tables are exempt."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or any(k in name for k in NO_DECAY_KEYS):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [dict(params=decay, weight_decay=weight_decay)]
    if no_decay:
        groups.append(dict(params=no_decay, weight_decay=0.0))
    return groups


def warmup_poly_lr(t: int, base_lr: float, total: int, warmup: int, power: float = 0.9) -> float:
    """Learning rate for 1-based iteration ``t``.

    Linear ramp base*t/warmup below ``warmup``, then poly decay to 0 at ``total``.
    The first step (t=1) therefore runs at base/warmup rather than 0.
    """
    if t <= 0:
        return 0.0
    if warmup > 0 and t < warmup:
        return base_lr * t / warmup
    if total <= warmup:
        return base_lr
    frac = min(max((t - warmup) / (total - warmup), 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


def check_finite(loss: torch.Tensor, where: str) -> None:
    value = float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss)
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss ({value}) in {where}")


def clip_grads(params: Iterable[torch.nn.Parameter], max_norm: float | None) -> None:
    if max_norm:
        torch.nn.utils.clip_grad_norm_(list(params), max_norm)
