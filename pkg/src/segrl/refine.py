"""Reinforcement-learned refinement of segmentation logits.

A small policy network reads the pooled encoder embedding and picks a
scaling action alpha from a discrete set. A separate residual module
computes a correction r from the initial logits z, and the refined output
is O = z + alpha * r. The policy trains with REINFORCE against the rewarded
improvement in Dice; the residual convolutions train by ordinary backprop
of the segmentation loss through O. The sampling step is the only
non-differentiable piece, and only the policy sees its gradient estimator.

The reward baseline is plain running state (an exponential moving
average), never a parameter: nothing backpropagates into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import metrics
from .decoder import LogitMap, ProbMap
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Linear, ReLU, stable_softmax

POLICY_HIDDEN = 64
RESIDUAL_HIDDEN = 32


@dataclass(frozen=True)
class ActionSpace:
    """Ordered candidate values for the residual scale alpha."""

    alphas: tuple[float, ...] = (-0.1, 0.0, 0.1)

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas:
            raise ConfigError("action space must be nonempty")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ConfigError("action alphas must be strictly increasing")
        if 0.0 not in alphas:
            raise ConfigError("action space must contain 0.0 (the no-op action)")
        object.__setattr__(self, "alphas", alphas)

    def __len__(self):
        return len(self.alphas)


@dataclass(frozen=True)
class PolicyOutput:
    action_probs: np.ndarray
    sampled_index: int
    log_prob: float
    alpha: float


@dataclass(frozen=True)
class BaselineState:
    """Running reward baseline; state only, updated by EMA, never by gradients."""

    value: float = 0.0
    momentum: float = 0.9
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("baseline momentum must lie in [0, 1)")


def update_baseline(state: BaselineState, reward: float) -> BaselineState:
    """First reward seeds the baseline; later rewards blend in with (1-momentum)."""
    if not math.isfinite(reward):
        raise ValueError("reward must be finite")
    if not state.initialized:
        return replace(state, value=float(reward), initialized=True)
    new_value = state.momentum * state.value + (1.0 - state.momentum) * reward
    return replace(state, value=float(new_value))


def policy_loss(log_prob: float, reward: float, baseline: float) -> float:
    """REINFORCE loss -log_prob * advantage; the advantage is gradient-constant."""
    return -log_prob * (reward - baseline)


class PolicyNet:
    """Two-layer fully connected policy over the discrete action set.

    The final layer starts at zero so the initial action distribution is
    exactly uniform and early training is not biased toward any alpha.
    """

    def __init__(self, in_dim: int, actions: ActionSpace, rng: np.random.Generator):
        self.actions = actions
        self.fc1 = Linear(in_dim, POLICY_HIDDEN, rng=rng, name="policy.fc1")
        self.relu = ReLU()
        self.fc2 = Linear(POLICY_HIDDEN, len(actions), zero_init=True, name="policy.fc2")

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def forward_batch(self, pooled: np.ndarray) -> np.ndarray:
        """(N, D) pooled embeddings -> (N, |A|) action probabilities."""
        logits = self.fc2.forward(self.relu.forward(self.fc1.forward(pooled)))
        return stable_softmax(logits, axis=1)

    def backward_batch(self, probs: np.ndarray, indices: np.ndarray,
                       coeff: np.ndarray) -> None:
        """Accumulates d(mean_i coeff_i * -log probs[i, indices[i]]) / d(weights).

        coeff carries the advantage (and any loss-mixing scale); it is treated
        as a constant, which is exactly the REINFORCE estimator.
        """
        n = probs.shape[0]
        dlogits = probs.copy()
        dlogits[np.arange(n), indices] -= 1.0
        dlogits *= (coeff / n)[:, None]
        self.fc1.backward(self.relu.backward(self.fc2.backward(dlogits)))

    def sample_batch(self, pooled: np.ndarray, rng: np.random.Generator):
        """Returns (probs, indices, log_probs, alphas); one draw per row."""
        probs = self.forward_batch(pooled)
        u = rng.random(probs.shape[0])
        cum = probs.cumsum(axis=1)
        indices = np.minimum((cum < u[:, None]).sum(axis=1), len(self.actions) - 1)
        picked = probs[np.arange(probs.shape[0]), indices]
        log_probs = np.log(np.maximum(picked, 1e-12))
        alphas = np.asarray(self.actions.alphas)[indices]
        return probs, indices, log_probs, alphas

    def greedy_batch(self, pooled: np.ndarray):
        """Argmax actions (ties resolve to the lowest index)."""
        probs = self.forward_batch(pooled)
        indices = probs.argmax(axis=1)
        alphas = np.asarray(self.actions.alphas)[indices]
        return probs, indices, alphas


def policy_forward(policy: PolicyNet, pooled: np.ndarray, mode: str,
                   rng: np.random.Generator | None = None) -> PolicyOutput:
    """Single-embedding policy step in 'sample' or 'greedy' mode."""
    if pooled.ndim != 1:
        raise ShapeError(f"pooled embedding must be a vector, got {pooled.shape}")
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        probs, indices, log_probs, alphas = policy.sample_batch(pooled[None], rng)
        return PolicyOutput(action_probs=probs[0], sampled_index=int(indices[0]),
                            log_prob=float(log_probs[0]), alpha=float(alphas[0]))
    if mode == "greedy":
        probs, indices, alphas = policy.greedy_batch(pooled[None])
        idx = int(indices[0])
        return PolicyOutput(action_probs=probs[0], sampled_index=idx,
                            log_prob=float(np.log(max(probs[0, idx], 1e-12))),
                            alpha=float(alphas[0]))
    raise ValueError(f"mode must be 'sample' or 'greedy', got {mode!r}")


class ResidualRefiner:
    """Two 3x3 convolutions K -> 32 -> K computing the correction r from z.

    The second convolution starts at zero so r is exactly 0 at
    initialization and refinement begins as a no-op.
    """

    def __init__(self, num_classes: int, rng: np.random.Generator):
        self.conv1 = Conv2d(num_classes, RESIDUAL_HIDDEN, 3, rng=rng,
                            name="residual.conv1")
        self.relu = ReLU()
        self.conv2 = Conv2d(RESIDUAL_HIDDEN, num_classes, 3, zero_init=True,
                            name="residual.conv2")

    def params(self):
        return self.conv1.params() + self.conv2.params()

    def forward(self, z: np.ndarray) -> np.ndarray:
        """(N, K, H, W) logits -> same-shape residual correction."""
        zl = np.ascontiguousarray(z.transpose(0, 2, 3, 1))
        out = self.conv2.forward(self.relu.forward(self.conv1.forward(zl)))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, dr: np.ndarray) -> np.ndarray:
        drl = np.ascontiguousarray(dr.transpose(0, 2, 3, 1))
        dz = self.conv1.backward(self.relu.backward(self.conv2.backward(drl)))
        return np.ascontiguousarray(dz.transpose(0, 3, 1, 2))


def residual(refiner: ResidualRefiner, z: LogitMap) -> LogitMap:
    """Single-sample residual computation on a (K, H, W) logit map."""
    return LogitMap(scores=refiner.forward(z.scores[None])[0])


def refine(z, alpha: float, r):
    """Residual composition O = z + alpha * r on logit maps or raw arrays.

    alpha == 0.0 short-circuits to an exact copy of z, so the no-op action
    is bit-identical to the unrefined logits (no float rounding from the
    multiply-add).
    """
    wrap = isinstance(z, LogitMap)
    zs = z.scores if wrap else np.asarray(z)
    rs = r.scores if isinstance(r, LogitMap) else np.asarray(r)
    if zs.shape != rs.shape:
        raise ShapeError(f"z and r shapes differ: {zs.shape} vs {rs.shape}")
    out = zs.copy() if alpha == 0.0 else zs + alpha * rs
    return LogitMap(scores=out) if wrap else out


def _mean_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    counts = metrics.ConfusionCounts(num_classes)
    metrics.accumulate(counts, pred, gt)
    per_class = metrics.dice_per_class(counts)
    return float(np.mean(list(per_class.values()))) if per_class else 0.0


def compute_reward(refined, unrefined, gt: np.ndarray) -> float:
    """Per-image Dice improvement of the refined over the unrefined prediction.

    Both inputs are hardened by argmax first, so the reward depends only on
    the predicted label maps; it is a plain scalar with no gradient path.
    """
    rp = refined.probs if isinstance(refined, ProbMap) else np.asarray(refined)
    up = unrefined.probs if isinstance(unrefined, ProbMap) else np.asarray(unrefined)
    if rp.shape != up.shape:
        raise ShapeError(f"refined and unrefined shapes differ: {rp.shape} vs {up.shape}")
    k = rp.shape[0]
    refined_pred = rp.argmax(axis=0)
    unrefined_pred = up.argmax(axis=0)
    return _mean_dice(refined_pred, gt, k) - _mean_dice(unrefined_pred, gt, k)


def compute_rewards_batch(refined_logits: np.ndarray, unrefined_logits: np.ndarray,
                          gt: np.ndarray) -> np.ndarray:
    """(N,) per-image rewards from batched (N, K, H, W) logits.

    Argmax commutes with softmax, so rewards from logits equal rewards from
    probability maps.
    """
    n, k = refined_logits.shape[:2]
    refined_pred = refined_logits.argmax(axis=1)
    unrefined_pred = unrefined_logits.argmax(axis=1)
    out = np.empty(n)
    for i in range(n):
        out[i] = (_mean_dice(refined_pred[i], gt[i], k)
                  - _mean_dice(unrefined_pred[i], gt[i], k))
    return out
