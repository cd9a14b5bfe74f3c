"""Joint source/target training loops.

Every strategy shares one loop. An iteration has two phases:

1. sample an action from the (frozen) policy, build the weighted source
   batch and the target batch, and take one SGD-momentum step on the
   joint loss;
2. score the target head on a fresh validation batch, turn the score into
   an advantage against the moving-average baseline, and (for policy-driven
   strategies) take one REINFORCE step.

Strategies differ only in how phase 1 picks weights and scales:

* ``l2tl``: per-class weights and the source scale both come from the
  learned policy, with top-weight filtering of an oversampled source batch.
* ``random-search``: like ``l2tl`` but the class-weight logits never move,
  so weights stay uniformly random; the scale is still learned.
* ``uniform``: every source example has weight 1 and no filtering; the scale
  is still learned.
* ``finetune``: source-only steps with scale 1 for the first
  ``finetune_source_steps`` iterations, then target-only steps with a fresh
  target head and a reset optimizer.
* ``scratch``: target-only steps throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .datasets import LabeledDataset, SplitSet, concat, sample_batch
from .metrics import METRIC_KINDS, reward, score_logits
from .model import ModelConfig, TwoHeadModel, per_example_loss
from .optim import LrSchedule, apply_step, lr_at, sgd_momentum_state
from .policy import (BaselineState, PolicyParams, alpha_of, init_policy, policy_optimizer,
                     reinforce_update, sample_action, update_baseline, weights_of_bins)

STRATEGIES = ("l2tl", "finetune", "scratch", "uniform", "random-search")
POLICY_STRATEGIES = ("l2tl", "uniform", "random-search")


class TrainingError(RuntimeError):
    """A numeric failure inside a run, tagged with where it happened."""

    def __init__(self, strategy: str, seed: int, iteration: int, cause: Exception):
        super().__init__(f"strategy={strategy} seed={seed} iteration={iteration}: {cause}")
        self.strategy = strategy
        self.seed = seed
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    """Run settings. Defaults are scaled for a single CPU core."""

    strategy: str = "l2tl"
    iterations: int = 3000
    batch_source: int = 64
    batch_target: int = 64
    batch_policy: int = 256
    batch_multiplier: int = 5
    finetune_source_steps: int = 1500
    lr: float = 0.001
    lr_schedule: str = "cosine"
    warmup_steps: int = 300
    momentum: float = 0.9
    policy_lr: float = 1e-4
    num_weight_bins: int = 11
    num_alpha_bins: int = 100
    alpha_range: float = 0.5
    baseline_decay: float = 0.05
    reward_metric: str = "top1-accuracy"
    eval_every: int = 50
    seed: int = 0
    replay_final_training: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ("batch_source", "batch_target", "batch_policy", "batch_multiplier",
                     "eval_every", "num_alpha_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_weight_bins < 2:
            raise ValueError("num_weight_bins must be at least 2")
        if self.lr <= 0 or self.policy_lr < 0 or self.alpha_range <= 0:
            raise ValueError("lr and alpha_range must be positive, policy_lr non-negative")
        if not 0 < self.baseline_decay <= 1:
            raise ValueError("baseline_decay must lie in (0, 1]")
        if self.reward_metric not in METRIC_KINDS:
            raise ValueError(f"reward_metric must be one of {METRIC_KINDS}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.iterations and not 0 <= self.warmup_steps < self.iterations:
            raise ValueError("need 0 <= warmup_steps < iterations")
        if self.strategy == "finetune" and self.iterations and not (
                0 <= self.finetune_source_steps < self.iterations):
            raise ValueError("finetune needs 0 <= finetune_source_steps < iterations")


TRACE_COLUMNS = ("iteration", "l_s", "l_t", "alpha", "reward", "baseline", "advantage",
                 "lr", "eval_metric", "mean_lambda")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    l_s: float
    l_t: float
    alpha: float
    reward: float
    baseline: float
    advantage: float
    lr: float
    eval_metric: float | None
    mean_lambda: float


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if not isinstance(v, int) else str(v)


@dataclass
class TrainTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name)
                         for r in self.records], dtype=np.float64)

    def evals(self) -> list[tuple[int, float]]:
        return [(r.iteration, r.eval_metric) for r in self.records if r.eval_metric is not None]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for r in self.records:
                writer.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])


def read_trace_csv(path) -> TrainTrace:
    trace = TrainTrace()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            values = {}
            for f in fields(TraceRecord):
                raw = row.get(f.name, "")
                if f.name == "iteration":
                    values[f.name] = int(raw)
                elif raw == "":
                    values[f.name] = None if f.name == "eval_metric" else math.nan
                else:
                    values[f.name] = float(raw)
            trace.records.append(TraceRecord(**values))
    return trace


@dataclass
class TrainedModel:
    model: TwoHeadModel
    policy: PolicyParams | None
    trace: TrainTrace
    strategy: str
    seed: int
    replay_trace: TrainTrace | None = None


# building blocks ---------------------------------------------------------------

def select_top_weighted(weights, batch_size: int, multiplier: int = 1) -> np.ndarray:
    """Indices of the ``batch_size`` largest weights among ``multiplier * batch_size``.

    Ties are broken by ascending candidate position; the result is sorted.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (multiplier * batch_size,):
        raise ValueError(f"expected {multiplier * batch_size} candidate weights, got {weights.shape}")
    order = np.argsort(-weights, kind="stable")
    return np.sort(order[:batch_size])


def joint_loss_terms(model: TwoHeadModel, source_batch, target_batch, weights,
                     alpha_s: float, alpha_t: float):
    """Return ``(source_term, target_term)`` of the joint objective.

    ``source_term = alpha_s * sum_j weights_j * L_S`` and
    ``target_term = alpha_t * sum_k L_T``; a term whose batch is None or whose
    scale is zero is the float 0.0 and builds no graph.
    """
    if alpha_s < 0 or alpha_t < 0:
        raise ValueError("loss scales must be non-negative")
    source_term: Tensor | float = 0.0
    target_term: Tensor | float = 0.0
    if source_batch is not None and alpha_s != 0:
        x, y = source_batch
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(y),):
            raise ValueError(f"{len(y)} source examples but {weights.shape} weights")
        losses = per_example_loss(model.source_logits(x), y)
        source_term = ad.mul(ad.sum(ad.mul(losses, weights)), alpha_s)
    if target_batch is not None and alpha_t != 0:
        x, y = target_batch
        target_term = ad.mul(ad.sum(per_example_loss(model.target_logits(x), y)), alpha_t)
    return source_term, target_term


def joint_loss(source_batch, target_batch, weights, alpha_s: float, alpha_t: float,
               model: TwoHeadModel):
    """``alpha_s * sum_j w_j L_S(x_j) + alpha_t * sum_k L_T(x'_k)``."""
    s, t = joint_loss_terms(model, source_batch, target_batch, weights, alpha_s, alpha_t)
    return ad.add(s, t) if isinstance(s, Tensor) or isinstance(t, Tensor) else Tensor(s + t)


def _value(term) -> float:
    return term.item() if isinstance(term, Tensor) else float(term)


def evaluate(model: TwoHeadModel, dataset: LabeledDataset, kind: str = "top1-accuracy",
             chunk: int = 1024) -> float:
    """Metric of the target head over a whole dataset."""
    logits = np.concatenate([model.target_logits(dataset.features[i:i + chunk]).data
                             for i in range(0, len(dataset), chunk)])
    return score_logits(kind, logits, dataset.labels)


# the loop --------------------------------------------------------------------------

def _train(config: TrainConfig, source: SplitSet | None, target: SplitSet,
           model_config: ModelConfig | None) -> TrainedModel:
    strategy = config.strategy
    if source is None and strategy != "scratch":
        raise ValueError(f"strategy {strategy} needs a source dataset")
    if len(target.val) == 0:
        raise ValueError("target validation split is empty; it is needed for the reward")
    if source is not None and source.train.feature_shape != target.train.feature_shape:
        raise ValueError("source and target features must have the same shape")
    if model_config is None:
        model_config = ModelConfig(input_shape=target.train.feature_shape,
                                   num_source_classes=source.num_classes if source else 1,
                                   num_target_classes=target.num_classes,
                                   init_seed=config.seed)
    streams = np.random.SeedSequence(config.seed).spawn(5)
    src_rng, tgt_rng, val_rng, pol_rng, aux_rng = (np.random.default_rng(s) for s in streams)

    model = TwoHeadModel(model_config)
    uses_policy = strategy in POLICY_STRATEGIES
    policy = init_policy(model_config.num_source_classes, config.num_weight_bins,
                         config.num_alpha_bins, config.alpha_range) if uses_policy else None
    pol_state = policy_optimizer(policy) if uses_policy else None
    baseline = BaselineState(0.0, config.baseline_decay)
    trace = TrainTrace()
    n_iter = config.iterations
    if n_iter == 0:
        return TrainedModel(model, policy, trace, strategy, config.seed)

    schedule = LrSchedule(config.lr, n_iter, config.warmup_steps, config.lr_schedule)
    all_params = model.parameters()
    source_only = [p for k, p in model.params.items() if not k.startswith("target_head")]
    target_only = [p for k, p in model.params.items() if not k.startswith("source_head")]
    opt_state = sgd_momentum_state([p.data for p in all_params], config.momentum)
    switch_at = config.finetune_source_steps if strategy == "finetune" else 0
    n_bins = config.num_weight_bins

    for i in range(1, n_iter + 1):
        try:
            lr = lr_at(schedule, i - 1)
            # phase 1: model step under a frozen policy
            source_batch = target_batch = None
            weights = None
            mean_lambda = 1.0
            if uses_policy:
                action = sample_action(policy, pol_rng)
                alpha_s = alpha_of(action.alpha_bin, policy.n_alpha, policy.beta)
                alpha_t = 1.0
                if strategy == "uniform":
                    x, y = sample_batch(source.train, config.batch_source, src_rng)
                    weights = np.ones(config.batch_source)
                else:
                    class_w = weights_of_bins(action.weight_bins, n_bins)
                    mean_lambda = float(class_w.mean())
                    x, y = sample_batch(source.train,
                                        config.batch_multiplier * config.batch_source, src_rng)
                    cand_w = class_w[y]
                    keep = select_top_weighted(cand_w, config.batch_source, config.batch_multiplier)
                    x, y, weights = x[keep], y[keep], cand_w[keep]
                source_batch = (x, y)
                target_batch = sample_batch(target.train, config.batch_target, tgt_rng)
                trainable = all_params
            elif i <= switch_at:
                alpha_s, alpha_t = 1.0, 0.0
                source_batch = sample_batch(source.train, config.batch_source, src_rng)
                weights = np.ones(config.batch_source)
                trainable = source_only
            else:
                if strategy == "finetune" and i == switch_at + 1 and switch_at > 0:
                    model.reinit_target_head(aux_rng)
                    all_params = model.parameters()
                    target_only = [p for k, p in model.params.items()
                                   if not k.startswith("source_head")]
                    opt_state = sgd_momentum_state([p.data for p in all_params], config.momentum)
                alpha_s, alpha_t = 0.0, 1.0
                target_batch = sample_batch(target.train, config.batch_target, tgt_rng)
                trainable = target_only

            s_term, t_term = joint_loss_terms(model, source_batch, target_batch, weights,
                                              alpha_s, alpha_t)
            loss = ad.add(s_term, t_term) if isinstance(s_term, Tensor) or isinstance(t_term, Tensor) \
                else None
            if loss is not None and model_config.weight_decay:
                loss = ad.add(loss, _decay(trainable, model_config.weight_decay))
            if loss is not None:
                loss.backward()
            mask = [any(p is q for q in trainable) for p in all_params]
            opt_state = apply_step(all_params, opt_state, lr, mask)

            # phase 2: reward on a fresh validation batch, policy step
            val_batch = sample_batch(target.val, config.batch_policy, val_rng)
            r = reward(config.reward_metric, model, val_batch)
            b = baseline.b
            advantage = r - b
            if uses_policy:
                policy, pol_state = reinforce_update(
                    policy, [action], [r], b, pol_state, config.policy_lr,
                    update_class_logits=(strategy == "l2tl"))
            baseline = update_baseline(baseline, r)

            eval_metric = None
            if i % config.eval_every == 0 or i == n_iter:
                eval_metric = evaluate(model, target.test, config.reward_metric)
            trace.records.append(TraceRecord(
                i, _value(s_term), _value(t_term), alpha_s, r, b, advantage, lr,
                eval_metric, mean_lambda))
        except (NumericError, FloatingPointError) as exc:
            raise TrainingError(strategy, config.seed, i, exc) from exc

    result = TrainedModel(model, policy, trace, strategy, config.seed)
    if config.replay_final_training and uses_policy:
        combined = SplitSet(concat(target.train, target.val, "target/train+val"),
                            target.val, target.test)
        replay_cfg = replace(config, replay_final_training=False, policy_lr=0.0)
        replay = _replay(replay_cfg, source, combined, model_config, policy)
        result.model = replay.model
        result.replay_trace = replay.trace
    return result


def _decay(params, coefficient: float) -> Tensor:
    total = None
    for p in params:
        sq = ad.sum(ad.mul(p, p))
        total = sq if total is None else ad.add(total, sq)
    return ad.mul(total, coefficient)


def _replay(config: TrainConfig, source: SplitSet, target: SplitSet,
            model_config: ModelConfig, policy: PolicyParams) -> TrainedModel:
    """Retrain from initialization on ``target.train`` with the policy frozen."""
    streams = np.random.SeedSequence([config.seed, 1]).spawn(3)
    src_rng, tgt_rng, pol_rng = (np.random.default_rng(s) for s in streams)
    model = TwoHeadModel(model_config)
    params = model.parameters()
    opt_state = sgd_momentum_state([p.data for p in params], config.momentum)
    schedule = LrSchedule(config.lr, config.iterations, config.warmup_steps, config.lr_schedule)
    trace = TrainTrace()
    for i in range(1, config.iterations + 1):
        try:
            lr = lr_at(schedule, i - 1)
            action = sample_action(policy, pol_rng)
            alpha_s = alpha_of(action.alpha_bin, policy.n_alpha, policy.beta)
            if config.strategy == "uniform":
                x, y = sample_batch(source.train, config.batch_source, src_rng)
                weights = np.ones(config.batch_source)
                mean_lambda = 1.0
            else:
                class_w = weights_of_bins(action.weight_bins, policy.n)
                mean_lambda = float(class_w.mean())
                x, y = sample_batch(source.train, config.batch_multiplier * config.batch_source,
                                    src_rng)
                keep = select_top_weighted(class_w[y], config.batch_source, config.batch_multiplier)
                x, y, weights = x[keep], y[keep], class_w[y][keep]
            target_batch = sample_batch(target.train, config.batch_target, tgt_rng)
            s_term, t_term = joint_loss_terms(model, (x, y), target_batch, weights, alpha_s, 1.0)
            loss = ad.add(s_term, t_term)
            if model_config.weight_decay:
                loss = ad.add(loss, _decay(params, model_config.weight_decay))
            loss.backward()
            opt_state = apply_step(params, opt_state, lr)
            eval_metric = None
            if i % config.eval_every == 0 or i == config.iterations:
                eval_metric = evaluate(model, target.test, config.reward_metric)
            trace.records.append(TraceRecord(i, _value(s_term), _value(t_term), alpha_s,
                                             math.nan, math.nan, math.nan, lr, eval_metric,
                                             mean_lambda))
        except (NumericError, FloatingPointError) as exc:
            raise TrainingError(config.strategy, config.seed, i, exc) from exc
    return TrainedModel(model, policy, trace, config.strategy, config.seed)


def _require(config: TrainConfig, strategy: str) -> None:
    if config.strategy != strategy:
        raise ValueError(f"config.strategy is {config.strategy!r}, expected {strategy!r}")


def l2tl_train(config: TrainConfig, source: SplitSet, target: SplitSet,
               model_config: ModelConfig | None = None) -> TrainedModel:
    _require(config, "l2tl")
    return _train(config, source, target, model_config)


def finetune_train(config: TrainConfig, source: SplitSet, target: SplitSet,
                   model_config: ModelConfig | None = None) -> TrainedModel:
    _require(config, "finetune")
    return _train(config, source, target, model_config)


def scratch_train(config: TrainConfig, target: SplitSet,
                  model_config: ModelConfig | None = None,
                  source: SplitSet | None = None) -> TrainedModel:
    """Target-only training; ``source`` only fixes the source-head width if given."""
    _require(config, "scratch")
    return _train(config, source, target, model_config)


def uniform_weight_train(config: TrainConfig, source: SplitSet, target: SplitSet,
                         model_config: ModelConfig | None = None) -> TrainedModel:
    _require(config, "uniform")
    return _train(config, source, target, model_config)


def random_search_train(config: TrainConfig, source: SplitSet, target: SplitSet,
                        model_config: ModelConfig | None = None) -> TrainedModel:
    _require(config, "random-search")
    return _train(config, source, target, model_config)


def train(config: TrainConfig, source: SplitSet | None, target: SplitSet,
          model_config: ModelConfig | None = None) -> TrainedModel:
    """Dispatch on ``config.strategy``."""
    return _train(config, source, target, model_config)
