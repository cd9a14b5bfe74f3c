"""Factorized categorical controller over per-class weight bins and the α bin.

The policy has no input: one logit row per source class over ``n`` weight
bins (bin k means weight ``k / (n - 1)``) and one logit vector over ``n'``
bins for the source-loss scale (bin k' means ``beta * k' / (n' - 1)``).
Each training iteration is a one-step episode: one action is sampled, the
model takes one step, and the resulting validation reward scores that action.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .optim import OptimizerState, adam_state, adam_step


@dataclass(frozen=True, eq=False)
class PolicyParams:
    class_logits: np.ndarray  # (c_S, n)
    alpha_logits: np.ndarray  # (n',)
    beta: float = 0.5

    def __post_init__(self):
        cl = np.array(self.class_logits, dtype=np.float64)
        al = np.array(self.alpha_logits, dtype=np.float64)
        if cl.ndim != 2 or cl.shape[0] < 1 or cl.shape[1] < 2:
            raise ValueError(f"class_logits must be (c_S >= 1, n >= 2), got {cl.shape}")
        if al.ndim != 1 or al.size < 1:
            raise ValueError("alpha_logits must be a non-empty vector")
        if not (np.all(np.isfinite(cl)) and np.all(np.isfinite(al))):
            raise ValueError("policy logits must be finite")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        object.__setattr__(self, "class_logits", cl)
        object.__setattr__(self, "alpha_logits", al)

    @property
    def num_source_classes(self) -> int:
        return self.class_logits.shape[0]

    @property
    def n(self) -> int:
        return self.class_logits.shape[1]

    @property
    def n_alpha(self) -> int:
        return self.alpha_logits.size

    def class_probs(self) -> np.ndarray:
        return _softmax(self.class_logits)

    def alpha_probs(self) -> np.ndarray:
        return _softmax(self.alpha_logits)


@dataclass(frozen=True)
class Action:
    weight_bins: np.ndarray  # (c_S,) ints in [0, n)
    alpha_bin: int
    log_prob: float


@dataclass(frozen=True)
class BaselineState:
    b: float = 0.0
    gamma: float = 0.05
    initialized: bool = False

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("baseline decay gamma must lie in (0, 1]")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def init_policy(num_source_classes: int, n: int = 11, n_alpha: int = 100,
                beta: float = 0.5) -> PolicyParams:
    """All-zero logits, i.e. every factor starts exactly uniform."""
    if num_source_classes < 1 or n < 2 or n_alpha < 1:
        raise ValueError("need c_S >= 1, n >= 2, n' >= 1")
    return PolicyParams(np.zeros((num_source_classes, n)), np.zeros(n_alpha), beta)


def weight_of(k: int, n: int) -> float:
    if n < 2 or not 0 <= k < n:
        raise ValueError(f"weight bin {k} out of range for n={n}")
    return k / (n - 1)


def alpha_of(k: int, n_alpha: int, beta: float) -> float:
    """Scale for α bin ``k``; a single bin (``n_alpha == 1``) maps to ``beta``."""
    if not 0 <= k < n_alpha:
        raise ValueError(f"alpha bin {k} out of range for n'={n_alpha}")
    if n_alpha == 1:
        return float(beta)
    return beta * (k / (n_alpha - 1))


def weights_of_bins(bins, n: int) -> np.ndarray:
    """Vectorized ``weight_of``."""
    return np.asarray(bins, dtype=np.float64) / (n - 1)


def _draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def log_prob_of(policy: PolicyParams, weight_bins, alpha_bin: int) -> float:
    cl = policy.class_logits
    log_class = cl - cl.max(axis=1, keepdims=True)
    log_class -= np.log(np.exp(log_class).sum(axis=1, keepdims=True))
    al = policy.alpha_logits - policy.alpha_logits.max()
    al -= np.log(np.exp(al).sum())
    rows = np.arange(cl.shape[0])
    return float(log_class[rows, np.asarray(weight_bins)].sum() + al[alpha_bin])


def sample_action(policy: PolicyParams, rng: np.random.Generator) -> Action:
    """Draw each class's bin and the α bin independently by inverse CDF.

    Exactly ``c_S + 1`` uniforms are consumed from ``rng`` per call.
    """
    u = rng.random(policy.num_source_classes + 1)
    bins = _draw(policy.class_probs(), u[:-1])
    alpha_bin = int(_draw(policy.alpha_probs(), u[-1:])[0])
    return Action(bins, alpha_bin, log_prob_of(policy, bins, alpha_bin))


def sample_actions(policy: PolicyParams, count: int, rng: np.random.Generator):
    """Batch draw; returns ``(weight_bins (count, c_S), alpha_bins (count,))``."""
    u = rng.random((count, policy.num_source_classes + 1))
    bins = _draw(policy.class_probs()[None], u[:, :-1])
    alpha_bins = _draw(policy.alpha_probs()[None], u[:, -1:])[:, 0]
    return bins, alpha_bins


def update_baseline(state: BaselineState, reward: float) -> BaselineState:
    """Moving average ``b' = (1 - gamma) * b + gamma * R``."""
    if not np.isfinite(reward):
        raise ValueError(f"reward must be finite, got {reward}")
    return replace(state, b=(1.0 - state.gamma) * state.b + state.gamma * float(reward),
                   initialized=True)


def _stack(actions) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(actions, tuple) and len(actions) == 2 and isinstance(actions[0], np.ndarray):
        bins, alpha = actions
        return np.atleast_2d(bins), np.atleast_1d(alpha)
    actions = list(actions)
    return (np.array([a.weight_bins for a in actions], dtype=np.int64),
            np.array([a.alpha_bin for a in actions], dtype=np.int64))


def log_prob_graph(class_logits: Tensor, alpha_logits: Tensor, bins: np.ndarray,
                   alpha_bins: np.ndarray) -> Tensor:
    """Differentiable per-action log-probabilities, shape ``(N,)``.

    ``class_logits`` may be ``(c_S, n)`` (shared) or ``(N, c_S, n)`` (one copy
    per action, which yields per-action gradients from a single backward).
    """
    lc = ad.log_softmax(class_logits)
    la = ad.log_softmax(alpha_logits)
    if class_logits.data.ndim == 2:
        lc = ad.add(Tensor(np.zeros((bins.shape[0], 1, 1))), lc)
        la = ad.add(Tensor(np.zeros((bins.shape[0], 1))), la)
    per_class = ad.pick(lc, bins)               # (N, c_S)
    per_alpha = ad.pick(la, alpha_bins)         # (N,)
    return ad.add(ad.sum(per_class, axis=1), per_alpha)


def reinforce_gradient(policy: PolicyParams, actions, advantages,
                       per_sample: bool = False):
    """Score-function estimate of the gradient of expected reward.

    Returns ``(d/d class_logits, d/d alpha_logits)`` of
    ``mean_i A_i * log pi(a_i)``. With ``per_sample=True`` each action's own
    term ``A_i * grad log pi(a_i)`` is returned with a leading axis instead.
    """
    bins, alpha_bins = _stack(actions)
    adv = np.asarray(advantages, dtype=np.float64).reshape(-1)
    if bins.shape[0] == 0:
        raise ValueError("reinforce needs at least one action")
    if adv.size != bins.shape[0]:
        raise ValueError(f"{bins.shape[0]} actions but {adv.size} advantages")
    count = bins.shape[0]
    if per_sample:
        cl = Tensor(np.broadcast_to(policy.class_logits, (count, *policy.class_logits.shape)), True)
        al = Tensor(np.broadcast_to(policy.alpha_logits, (count, policy.n_alpha)), True)
        objective = ad.sum(ad.mul(log_prob_graph(cl, al, bins, alpha_bins), adv))
    else:
        cl = Tensor(policy.class_logits, True)
        al = Tensor(policy.alpha_logits, True)
        objective = ad.mul(ad.sum(ad.mul(log_prob_graph(cl, al, bins, alpha_bins), adv)),
                           1.0 / count)
    objective.backward()
    return cl.grad, al.grad


def policy_optimizer(policy: PolicyParams) -> OptimizerState:
    return adam_state([policy.class_logits, policy.alpha_logits])


def reinforce_update(policy: PolicyParams, actions, rewards, baseline: float,
                     state: OptimizerState, lr: float, update_class_logits: bool = True):
    """One Adam ascent step on the REINFORCE objective with advantage ``R - b``.

    ``update_class_logits=False`` freezes the weight-bin logits (and their
    optimizer moments) and only trains the α factor.
    Returns ``(new_policy, new_state)``.
    """
    rewards = np.atleast_1d(np.asarray(rewards, dtype=np.float64))
    g_class, g_alpha = reinforce_gradient(policy, actions, rewards - baseline)
    params = [policy.class_logits, policy.alpha_logits]
    # Adam minimizes, so feed the negated ascent direction
    new_params, new_state = adam_step(params, [-g_class, -g_alpha], state, lr)
    if not update_class_logits:
        new_params[0] = policy.class_logits
        new_state = replace(new_state, slots=state.slots[:2] + new_state.slots[2:])
    return replace(policy, class_logits=new_params[0], alpha_logits=new_params[1]), new_state


def action_space_size(num_source_classes: int, n: int, n_alpha: int) -> int:
    """Number of joint actions, ``n' * n ** c_S`` as an exact Python integer."""
    if num_source_classes < 1 or n < 1 or n_alpha < 1:
        raise ValueError("sizes must be positive")
    return n_alpha * n ** num_source_classes


def rank_source_classes(policy: PolicyParams, num_samples: int = 10000,
                        rng: np.random.Generator | None = None):
    """Monte Carlo mean weight per source class, sorted descending.

    Returns a list of ``(class_id, mean_weight)``; ties keep ascending class id.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    bins, _ = sample_actions(policy, num_samples, rng)
    means = weights_of_bins(bins, policy.n).mean(axis=0)
    order = sorted(range(policy.num_source_classes), key=lambda c: (-means[c], c))
    return [(c, float(means[c])) for c in order]


def write_ranking_csv(path, ranking, class_names: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_id", "class_name", "mean_weight", "rank"])
        for rank, (cls, weight) in enumerate(ranking, start=1):
            name = class_names[cls] if class_names is not None else f"class_{cls}"
            writer.writerow([cls, name, f"{weight:.6f}", rank])


def save_policy(path, policy: PolicyParams) -> None:
    meta = {"num_source_classes": policy.num_source_classes, "n": policy.n,
            "n_alpha": policy.n_alpha, "beta": policy.beta}
    save_arrays(path, "policy", {"class_logits": policy.class_logits,
                                 "alpha_logits": policy.alpha_logits}, meta)


def load_policy(path) -> PolicyParams:
    arrays, meta = load_arrays(path, "policy")
    policy = PolicyParams(arrays["class_logits"], arrays["alpha_logits"], meta["beta"])
    if (policy.num_source_classes, policy.n, policy.n_alpha) != (
            meta["num_source_classes"], meta["n"], meta["n_alpha"]):
        raise ValueError(f"{path}: logit shapes disagree with stored sizes")
    return policy
