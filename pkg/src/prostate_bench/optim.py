"""Rectified Adam, Lookahead, their composition (Ranger) and the flat+cosine
learning-rate schedule.

Two forms of the same update: functional ``radam_step``/``lookahead_sync``/
``ranger_step`` that return new arrays (numpy or torch), and the in-place
:class:`Ranger` torch optimiser used for training. Tests hold the two to
each other.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch


def rho_inf(beta2: float) -> float:
    """Maximum length of the approximated simple moving average."""
    return 2.0 / (1.0 - beta2) - 1.0


def rho_t(t: int, beta2: float) -> float:
    b2t = beta2 ** t
    return rho_inf(beta2) - 2.0 * t * b2t / (1.0 - b2t)


def rectification(t: int, beta2: float, threshold: float = 4.0) -> float | None:
    """Variance rectification factor r_t, or None when the momentum branch applies."""
    rinf, rt = rho_inf(beta2), rho_t(t, beta2)
    if rt <= threshold:
        return None
    return math.sqrt((rt - 4.0) * (rt - 2.0) * rinf / ((rinf - 4.0) * (rinf - 2.0) * rt))


def _is_finite(g) -> bool:
    if torch.is_tensor(g):
        return bool(torch.isfinite(g).all())
    return bool(np.all(np.isfinite(g)))


def _sqrt(x):
    return torch.sqrt(x) if torch.is_tensor(x) else np.sqrt(x)


def _copy(x):
    return x.clone() if torch.is_tensor(x) else np.array(x, copy=True)


def _zeros_like(x):
    return torch.zeros_like(x) if torch.is_tensor(x) else np.zeros_like(x, dtype=np.result_type(x, np.float32))


def lerp(a, b, w: float):
    """a + w (b - a), evaluated so that w=0 gives a and w=1 gives b exactly."""
    if w < 0.5:
        return a + w * (b - a)
    return b - (1.0 - w) * (b - a)


@dataclass
class RAdamState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    threshold: float = 4.0
    last_rectified: bool | None = None

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got {(self.beta1, self.beta2)}")
        if self.eps < 0 or self.weight_decay < 0:
            raise ValueError("eps and weight_decay must be >= 0")


@dataclass
class LookaheadState:
    slow: list
    k: int = 6
    alpha: float = 0.5
    counter: int = 0

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        self.slow = [_copy(p) for p in self.slow]


def radam_update(p, g, m, v, t: int, lr: float, beta1: float, beta2: float, eps: float,
                 weight_decay: float, threshold: float = 4.0):
    """One RAdam update for a single tensor; returns ``(p, m, v, rectified)``.

    ``t`` is the already-incremented step count.
    """
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    if weight_decay:
        p = p * (1.0 - lr * weight_decay)
    m_hat = m / (1.0 - beta1 ** t)
    r = rectification(t, beta2, threshold)
    if r is None:
        p = p - lr * m_hat
    else:
        v_hat = v / (1.0 - beta2 ** t)
        p = p - (lr * r) * m_hat / (_sqrt(v_hat) + eps)
    return p, m, v, r is not None


def radam_step(params: list, grads: list, state: RAdamState, lr: float, names: list[str] | None = None):
    """Apply one RAdam step to every parameter; returns ``(new_params, state)``."""
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for i, g in enumerate(grads):
        if not _is_finite(g):
            name = names[i] if names else f"param[{i}]"
            raise FloatingPointError(f"non-finite gradient in parameter group {name}")
    if not state.exp_avg:
        state.exp_avg = [_zeros_like(p) for p in params]
        state.exp_avg_sq = [_zeros_like(p) for p in params]
    state.step += 1
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if tuple(np.shape(p)) != tuple(np.shape(g)):
            raise ValueError(f"shape mismatch for param[{i}]: {np.shape(p)} vs {np.shape(g)}")
        p, state.exp_avg[i], state.exp_avg_sq[i], rect = radam_update(
            p, g, state.exp_avg[i], state.exp_avg_sq[i], state.step, lr,
            state.beta1, state.beta2, state.eps, state.weight_decay, state.threshold,
        )
        state.last_rectified = rect
        out.append(p)
    return out, state


def lookahead_sync(fast: list, state: LookaheadState):
    """Count one inner step; every ``k``-th call pull the slow weights toward
    the fast ones and reset the fast weights onto them."""
    state.counter += 1
    if state.counter % state.k != 0:
        return fast, state
    state.slow = [lerp(s, f, state.alpha) for s, f in zip(state.slow, fast)]
    return [_copy(s) for s in state.slow], state


def ranger_step(params: list, grads: list, radam: RAdamState, la: LookaheadState, lr: float):
    params, radam = radam_step(params, grads, radam, lr)
    params, la = lookahead_sync(params, la)
    return params, radam, la


def _radam_update_(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay, threshold):
    """In-place torch version of :func:`radam_update`."""
    m.mul_(beta1).add_(g, alpha=1.0 - beta1)
    v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
    if weight_decay:
        p.mul_(1.0 - lr * weight_decay)
    bc1 = 1.0 - beta1 ** t
    r = rectification(t, beta2, threshold)
    if r is None:
        p.add_(m, alpha=-lr / bc1)
    else:
        denom = (v / (1.0 - beta2 ** t)).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr * r / bc1)


class Ranger(torch.optim.Optimizer):
    """Lookahead wrapped around RAdam with decoupled weight decay.

    ``k=None`` disables Lookahead and gives plain RAdam. The Lookahead sync
    happens for every parameter group in the same step.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 k: int | None = 6, alpha: float = 0.5, threshold: float = 4.0):
        if not lr > 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        if k is not None and int(k) < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        defaults = dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay, threshold=threshold)
        super().__init__(params, defaults)
        self.k = k
        self.alpha = alpha
        self.inner_steps = 0
        for group in self.param_groups:
            for p in group["params"]:
                self.state[p]["slow"] = p.detach().clone()

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        self._check_grads()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                st = self.state[p]
                if "step" not in st:
                    st["step"] = 0
                    st["exp_avg"] = torch.zeros_like(p)
                    st["exp_avg_sq"] = torch.zeros_like(p)
                st["step"] += 1
                _radam_update_(p, g, st["exp_avg"], st["exp_avg_sq"], st["step"], group["lr"],
                               beta1, beta2, group["eps"], group["weight_decay"], group["threshold"])
        self.inner_steps += 1
        if self.k is not None and self.inner_steps % self.k == 0:
            for group in self.param_groups:
                for p in group["params"]:
                    st = self.state[p]
                    st["slow"].lerp_(p, self.alpha)
                    p.copy_(st["slow"])
        return loss

    def _check_grads(self) -> None:
        grads = [p.grad for g in self.param_groups for p in g["params"] if p.grad is not None]
        if not grads or torch.stack(torch._foreach_norm(grads)).isfinite().all():
            return
        # Slow path only once the cheap norm test has tripped.
        for gi, group in enumerate(self.param_groups):
            for pi, p in enumerate(group["params"]):
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise FloatingPointError(f"non-finite gradient in parameter group {gi} (param {pi})")

    def state_dict(self):
        sd = super().state_dict()
        sd["lookahead"] = {"k": self.k, "alpha": self.alpha, "inner_steps": self.inner_steps}
        return sd

    def load_state_dict(self, state_dict):
        # torch keeps tensors that need no dtype/device cast, so copy to avoid
        # sharing moment buffers with the source optimiser.
        state_dict = copy.deepcopy(state_dict)
        la = state_dict.pop("lookahead", None)
        sd = state_dict
        super().load_state_dict(sd)
        if la is not None:
            self.k, self.alpha, self.inner_steps = la["k"], la["alpha"], la["inner_steps"]


def RAdam(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, threshold: float = 4.0) -> Ranger:
    return Ranger(params, lr, betas, eps, weight_decay, k=None, threshold=threshold)


@dataclass
class ScheduleSpec:
    base_lr: float = 1e-3
    total_steps: int = 1000
    flat_fraction: float = 0.75
    final_lr: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.flat_fraction < 1.0:
            raise ValueError(f"flat_fraction must be in (0, 1), got {self.flat_fraction}")
        if int(self.total_steps) < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not self.base_lr > 0 or self.final_lr < 0 or self.final_lr > self.base_lr:
            raise ValueError("need base_lr > 0 and 0 <= final_lr <= base_lr")
        self.total_steps = int(self.total_steps)

    @property
    def flat_steps(self) -> int:
        return int(math.floor(self.flat_fraction * self.total_steps))


def flat_cos_lr(step: int, spec: ScheduleSpec) -> float:
    """Hold ``base_lr`` for the flat phase, then half-cosine down to ``final_lr``.

    The anneal phase covers steps ``flat_steps .. total_steps - 1``; its
    first step still equals ``base_lr`` and its last equals ``final_lr``.
    """
    if not 0 <= step < spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps})")
    flat = spec.flat_steps
    if step < flat:
        return spec.base_lr
    span = max(spec.total_steps - 1 - flat, 1)
    u = min((step - flat) / span, 1.0)
    return spec.final_lr + (spec.base_lr - spec.final_lr) * (1.0 + math.cos(math.pi * u)) / 2.0
