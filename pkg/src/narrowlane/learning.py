"""Advantage actor-critic learning on top of the numpy network.

Rollouts are stored as segments (truncated at a maximum length, each
carrying a bootstrap value). Returns use the discounted k-step
recursion; advantages subtract the collection-time value estimates and
are treated as constants in the policy gradient. One scalar objective
drives every update:

    total = policy_loss + value_coeff * value_loss

with policy_loss = -mean(log pi(a) * A) - entropy_coeff * mean(H) and
value_loss the plain MSE against the returns. The same scalar is what
the finite-difference gradient checker probes, so the analytic gradients
below have no untested paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .network import (
    PARAM_SHAPES,
    VALUE_HEAD,
    backward,
    forward_with_cache,
    relu_mask_signature,
    zeros_like_params,
)

LOG_GUARD = 1e-12


def action_distribution(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return -np.sum(np.where(p > 0, p * np.log(np.maximum(p, LOG_GUARD)), 0.0), axis=-1)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def k_step_returns(rewards, dones, bootstrap_value: float, gamma: float) -> np.ndarray:
    """Discounted returns by backward recursion; a terminal step cuts the
    tail off, otherwise the final step continues into the bootstrap."""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    out = np.empty_like(rewards)
    nxt = float(bootstrap_value)
    for i in range(rewards.shape[0] - 1, -1, -1):
        if dones[i]:
            nxt = 0.0
        nxt = rewards[i] + gamma * nxt
        out[i] = nxt
    return out


@dataclass
class RolloutSegment:
    """A contiguous slice of one episode, at most segment_len steps."""

    stacks: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    bootstrap_value: float

    def __len__(self) -> int:
        return int(self.actions.shape[0])


@dataclass
class UpdateBatch:
    """Flat transition batch ready for gradient steps."""

    stacks: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    def take(self, idx) -> "UpdateBatch":
        return UpdateBatch(
            self.stacks[idx], self.actions[idx], self.returns[idx], self.advantages[idx]
        )


def advantages(returns, values) -> np.ndarray:
    """A = R - V, with V frozen at its collection-time estimate."""
    return np.asarray(returns, dtype=np.float64) - np.asarray(values, dtype=np.float64)


def merge_segments(segments, gamma: float) -> UpdateBatch:
    """Compute per-segment returns, then concatenate in the given order."""
    rets = [k_step_returns(s.rewards, s.dones, s.bootstrap_value, gamma) for s in segments]
    return UpdateBatch(
        stacks=np.concatenate([s.stacks for s in segments]),
        actions=np.concatenate([s.actions for s in segments]),
        returns=np.concatenate(rets),
        advantages=np.concatenate([r - s.values for r, s in zip(rets, segments)]),
    )


def iterate_minibatches(batch: UpdateBatch, size: int, rng: np.random.Generator):
    """Disjoint shuffled minibatches covering the batch once; the last one
    may be smaller."""
    n = len(batch)
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield batch.take(order[start : start + size])


def losses(
    params: dict,
    batch: UpdateBatch,
    entropy_coeff: float = 0.01,
    value_coeff: float = 0.5,
    with_grads: bool = True,
    chunk: int = 64,
):
    """Actor-critic losses and, optionally, gradients of the total scalar.

    Gradients flow through fresh forward passes; returns and advantages
    in the batch are constants. The value head's contribution to shared
    encoder gradients is scaled by value_coeff, matching the scalar that
    the gradient checker differentiates.
    """
    n = len(batch)
    grads = zeros_like_params(params) if with_grads else None
    pol_sum = 0.0
    ent_sum = 0.0
    val_sum = 0.0
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        acts = batch.actions[sl]
        adv = batch.advantages[sl]
        rets = batch.returns[sl]
        logits, values, _, cache = forward_with_cache(params, batch.stacks[sl])
        logp_all = log_softmax(logits)
        probs = np.exp(logp_all)
        rows = np.arange(acts.shape[0])
        logp = logp_all[rows, acts]
        ent = entropy(probs)
        verr = values.astype(np.float64) - rets

        pol_sum += float(-(logp * adv).sum() - entropy_coeff * ent.sum())
        ent_sum += float(ent.sum())
        val_sum += float((verr**2).sum())

        if with_grads:
            onehot = np.zeros_like(probs)
            onehot[rows, acts] = 1.0
            dlogits = (
                adv[:, None] * (probs - onehot)
                + entropy_coeff * probs * (logp_all + ent[:, None])
            ) / n
            dvalues = value_coeff * 2.0 * verr / n
            dtype = params["fc_w"].dtype
            g = backward(params, cache, dlogits.astype(dtype), dvalues.astype(dtype))
            for k in grads:
                grads[k] += g[k]

    policy_loss = pol_sum / n
    value_loss = val_sum / n
    mean_entropy = ent_sum / n
    if with_grads:
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in {k}")
    return policy_loss, value_loss, mean_entropy, grads


def total_loss(params: dict, batch: UpdateBatch, entropy_coeff=0.01, value_coeff=0.5) -> float:
    p, v, _, _ = losses(params, batch, entropy_coeff, value_coeff, with_grads=False)
    return p + value_coeff * v


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, params: dict) -> "AdamState":
        return cls(m=zeros_like_params(params), v=zeros_like_params(params))


def apply_update(
    params: dict,
    grads: dict,
    opt: AdamState,
    lr_policy: float = 1e-4,
    lr_value: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam step in place. The value head runs at its own learning
    rate; everything else (encoder and policy head) uses lr_policy."""
    opt.t += 1
    bc1 = 1.0 - beta1**opt.t
    bc2 = 1.0 - beta2**opt.t
    for k in PARAM_SHAPES:
        g = grads[k]
        m = opt.m[k]
        v = opt.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        lr = lr_value if k in VALUE_HEAD else lr_policy
        params[k] -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst_coord: tuple = ("", 0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def gradient_check(
    params: dict,
    batch: UpdateBatch,
    eps: float = 1e-5,
    coords_per_tensor: int = 25,
    seed: int = 0,
    entropy_coeff: float = 0.01,
    value_coeff: float = 0.5,
    corrupt: Optional[dict] = None,
) -> GradCheckResult:
    """Central finite differences of the total loss against the analytic
    gradients, on randomly probed coordinates of every tensor.

    Coordinates whose perturbation flips any ReLU activation are skipped:
    at a kink the two-sided difference estimates a subgradient average,
    not the derivative the analytic pass computes. The exclusion rate is
    capped so a broken implementation cannot hide behind it.

    `corrupt` scales selected analytic gradients and exists so the checker
    itself can be shown to catch wrong gradients.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("finite-difference step must be within [1e-7, 1e-3]")
    if params["fc_w"].dtype != np.float64:
        raise ValueError("gradient_check requires float64 parameters")

    _, _, _, grads = losses(params, batch, entropy_coeff, value_coeff, with_grads=True)
    if corrupt:
        for k, scale in corrupt.items():
            grads[k] = grads[k] * scale

    n = len(batch)
    rows = np.arange(n)

    def probe(p):
        logits, values, _, cache = forward_with_cache(p, batch.stacks)
        logp_all = log_softmax(logits)
        ent = entropy(np.exp(logp_all))
        pol = -(logp_all[rows, batch.actions] * batch.advantages).sum()
        pol -= entropy_coeff * ent.sum()
        val = ((values.astype(np.float64) - batch.returns) ** 2).sum()
        return (pol + value_coeff * val) / n, relu_mask_signature(cache)

    _, base_mask = probe(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_coord = ("", 0)
    checked = 0
    excluded = 0
    for name in PARAM_SHAPES:
        flat = params[name].ravel()
        picks = rng.choice(
            flat.shape[0], size=min(coords_per_tensor, flat.shape[0]), replace=False
        )
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            up, mask_up = probe(params)
            flat[idx] = orig - eps
            down, mask_down = probe(params)
            flat[idx] = orig
            if not (np.array_equal(mask_up, base_mask) and np.array_equal(mask_down, base_mask)):
                excluded += 1
                continue
            numeric = (up - down) / (2.0 * eps)
            analytic = float(grads[name].flat[idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
            checked += 1
            if rel > worst:
                worst = rel
                worst_coord = (name, int(idx))
    total = checked + excluded
    if total == 0 or excluded > 0.05 * total:
        raise RuntimeError(
            f"gradient check excluded too many coordinates ({excluded}/{total}); "
            "the probe batch sits on too many activation kinks"
        )
    return GradCheckResult(worst, checked, excluded, worst_coord)
