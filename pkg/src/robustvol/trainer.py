"""Backward actor-critic training with PPO updates.

For ``n = N-1, ..., 0`` a critic ``V_n`` and an actor ``pi_n`` are trained
against the already trained continuation ``V_{n+1}`` (the payoff at
``n = N-1``). Every epoch:

1. draw states from the training sampler, actions from the frozen policy,
   and an antithetic pair of Gaussian increments per state;
2. regress the critic on ``exp(-r dt) * mean_pm V_{n+1}(F(x, a, +-xi))``;
3. form advantages against the updated critic, normalize them over the
   epoch, and take PPO clipped-surrogate steps on the actor.

After the epoch budget, the critic gets one more pass on data generated by
the deterministic policy. Step ``n`` starts from step ``n+1``'s weights.
"""
from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import corrvine
from .dynamics import (
    augment_path_state, feature_stats, log_euler_step, sample_states, state_features,
)
from .model import ModelSpec
from .neural import (
    AdamState, MlpParams, adam_step, backward, forward, init_mlp, renormalize, save_params, transfer_init,
)
from .policy import (
    BangBangAction, BernoulliPolicy, GaussianPolicy, bangbang_controls, bernoulli_entropy,
    bernoulli_entropy_grad, bernoulli_ratio, clamp_q, latent_dim, n_bits, policy_to_bytes, sigmoid, squash_map,
)

log = logging.getLogger(__name__)

FAMILIES = ("continuous", "bangbang")
ADV_VAR_FLOOR = 1e-12

TRAIN_DOMAIN = 0
INIT_DOMAIN = 2


@dataclass
class TrainSchedule:
    outer_epochs: int = 500
    inner_epochs: int = 10
    lr_start: float = 5e-3
    lr_end: float = 1e-4
    inner_lr_divisor: float = 10.0
    temp_start: float = 1.0
    temp_end: float = 0.01
    entropy_start: float = 0.01
    entropy_end: float = 0.0
    clip_eps: float = 0.2
    penalty_beta: float = corrvine.DEFAULT_BETA
    penalty_delta: float = corrvine.DEFAULT_DELTA
    mc_samples: int = 2 ** 15
    minibatch: int = 2 ** 10
    anneal_mid: float = 0.5
    anneal_steepness: float = 12.0
    hidden: int = 32
    final_critic_epochs: int = 1
    plateau_stop: bool = False
    plateau_patience: int = 25

    def __post_init__(self):
        if self.outer_epochs < 1 or self.inner_epochs < 1:
            raise ValueError("epoch budgets must be positive")
        if not (self.lr_start > 0 and self.lr_end > 0 and self.inner_lr_divisor > 0):
            raise ValueError("learning rates must be positive")
        if not (0 < self.temp_end < self.temp_start):
            raise ValueError("temperature must decrease to a positive value")
        if self.entropy_start < 0 or self.entropy_end < 0:
            raise ValueError("entropy coefficients must be nonnegative")
        if self.clip_eps <= 0:
            raise ValueError("PPO clip parameter must be positive")
        if self.penalty_beta < 0 or self.penalty_delta <= 0:
            raise ValueError("need penalty beta >= 0 and delta > 0")
        if self.minibatch < 1 or self.mc_samples % self.minibatch:
            raise ValueError("minibatch size must divide the number of Monte Carlo samples")

    def epochs(self, n: int, steps: int) -> int:
        return self.outer_epochs if n == steps - 1 else self.inner_epochs

    def lr_scale(self, n: int, steps: int) -> float:
        return 1.0 if n == steps - 1 else 1.0 / self.inner_lr_divisor

    def to_dict(self) -> dict:
        return asdict(self)


def anneal(epoch: int, total: int, v_start: float, v_end: float, mid: float = 0.5, steepness: float = 12.0) -> float:
    """Sigmoid decay ``v_end + (v_start - v_end) / (1 + exp(k (s - c)))`` with ``s = epoch / (total - 1)``."""
    if total < 1:
        raise ValueError("total number of epochs must be positive")
    if not 0 <= epoch < total:
        raise ValueError("epoch outside the schedule")
    s = epoch / (total - 1) if total > 1 else 1.0
    return v_end + (v_start - v_end) / (1.0 + math.exp(steepness * (s - mid)))


class TrainingError(RuntimeError):
    pass


# -- value functions -------------------------------------------------------------

class CriticValue:
    """A trained critic viewed as a function of raw states."""

    def __init__(self, spec: ModelSpec, net: MlpParams):
        self.spec = spec
        self.net = net

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return forward(self.net, state_features(states, self.spec))[:, 0]


@dataclass
class StepArtifacts:
    n: int
    actor: GaussianPolicy | BernoulliPolicy
    critic: MlpParams
    learning_curve: list = field(default_factory=list)
    final_critic_loss: float = float("nan")

    def value(self) -> CriticValue:
        return CriticValue(self.actor.spec, self.critic)


# -- epoch data ------------------------------------------------------------------

@dataclass
class EpochData:
    states: np.ndarray
    feats: np.ndarray
    targets: np.ndarray
    old_out: np.ndarray          # latent means or logits under the frozen policy
    actions: np.ndarray          # latent samples or bits
    advantages: np.ndarray | None = None


def _is_augmented(payoff) -> bool:
    return bool(getattr(payoff, "augmented", False))


def transition_targets(states, sigma, L, xi, n: int, spec: ModelSpec, continuation: Callable,
                       augmented: bool) -> np.ndarray:
    """Discounted continuation averaged over the antithetic pair ``(xi, -xi)``."""
    vals = []
    for sign in (1.0, -1.0):
        nxt = log_euler_step(states, sigma, L, sign * xi, spec)
        if augmented:
            augment_path_state(nxt, n + 1, spec)
        vals.append(continuation(nxt))
    out = spec.step_discount * 0.5 * (vals[0] + vals[1])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite regression targets")
    return out


def collect(policy, n: int, spec: ModelSpec, continuation: Callable, m: int, rng,
            augmented: bool = False, deterministic: bool = False) -> EpochData:
    states = sample_states(n, m, spec, rng, augmented)
    feats = state_features(states, spec)
    out = forward(policy.net, feats)
    if isinstance(policy, GaussianPolicy):
        z = out if deterministic else out + math.sqrt(policy.temperature) * rng.standard_normal(out.shape)
        act = squash_map(z, spec)
        sigma, L, actions = act.sigma, act.factor.L, z
    else:
        q = clamp_q(sigmoid(out))
        bits = (q >= 0.5) if deterministic else (rng.random(q.shape) < q)
        actions = bits.astype(float)
        sigma, L = bangbang_controls(actions, spec)
    xi = rng.standard_normal((m, spec.dim))
    targets = transition_targets(states, sigma, L, xi, n, spec, continuation, augmented)
    return EpochData(states, feats, targets, out, actions)


def _minibatches(m: int, size: int, rng):
    perm = rng.permutation(m)
    for s in range(0, m, size):
        yield perm[s:s + size]


def critic_update(critic: MlpParams, adam: AdamState, feats: np.ndarray, targets: np.ndarray,
                  lr: float, minibatch: int, rng) -> float:
    """One pass of minibatch Adam steps on the squared regression loss; returns the mean loss."""
    losses = []
    for idx in _minibatches(len(targets), minibatch, rng):
        pred, cache = forward(critic, feats[idx], return_cache=True)
        resid = pred[:, 0] - targets[idx]
        loss = float(np.mean(resid * resid))
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite critic loss")
        losses.append(loss)
        g = (2.0 / len(idx)) * resid[:, None]
        adam_step(critic, backward(critic, feats[idx], g, cache), adam, lr)
    return float(np.mean(losses))


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    sd = float(np.std(adv))
    if sd * sd < ADV_VAR_FLOOR:
        log.debug("advantage variance %.3g below floor, using raw advantages", sd * sd)
        return adv
    return (adv - adv.mean()) / sd


def _clipped_surrogate(ratio, adv, eps):
    """Per-sample surrogate value and the mask where its gradient is live."""
    clipped = np.clip(ratio, 1 - eps, 1 + eps)
    value = np.minimum(ratio * adv, clipped * adv)
    live = np.where(adv >= 0, ratio <= 1 + eps, ratio >= 1 - eps)
    outside = (ratio < 1 - eps) | (ratio > 1 + eps)
    return value, live, outside


def penalty_and_grad(mean_out: np.ndarray, spec: ModelSpec, beta: float, delta: float):
    """Correlation penalty at the deterministic control and its gradient w.r.t. the latent mean."""
    d = spec.dim
    zr = mean_out[:, d:]
    y = np.clip(np.tanh(zr), -corrvine.SQUASH_LIMIT, corrvine.SQUASH_LIMIT)
    L = corrvine.cvine_build(y).L
    rho = L @ np.swapaxes(L, -1, -2)
    value, g_rho = corrvine.corr_penalty(rho, spec.corr_bounds, beta, delta, with_grad=True)
    g_L = (g_rho + np.swapaxes(g_rho, -1, -2)) @ L
    g_y = corrvine.cvine_build_vjp(y, g_L)
    g = np.zeros_like(mean_out)
    g[:, d:] = g_y * (1.0 - y * y)
    return value, g


def actor_update_continuous(policy: GaussianPolicy, adam: AdamState, data: EpochData, lr: float,
                            schedule: TrainSchedule, rng) -> dict:
    """PPO ascent on the clipped surrogate minus the correlation penalty."""
    spec = policy.spec
    lam = policy.temperature
    eps = schedule.clip_eps
    use_penalty = spec.uncertain and spec.dim >= 3 and schedule.penalty_beta > 0
    objs, pens, clips = [], [], []
    for idx in _minibatches(len(data.targets), schedule.minibatch, rng):
        out, cache = forward(policy.net, data.feats[idx], return_cache=True)
        z = data.actions[idx]
        m_old = data.old_out[idx]
        adv = data.advantages[idx]
        diff = out - m_old
        ratio = np.exp(np.sum(diff * (z - 0.5 * (out + m_old)), axis=1) / lam)
        value, live, outside = _clipped_surrogate(ratio, adv, eps)
        b = len(idx)
        g = -((live * adv * ratio)[:, None] * (z - out) / lam) / b
        pen = 0.0
        if use_penalty:
            pv, pg = penalty_and_grad(out, spec, schedule.penalty_beta, schedule.penalty_delta)
            pen = float(pv.mean())
            g += pg / b
        adam_step(policy.net, backward(policy.net, data.feats[idx], g, cache), adam, lr)
        objs.append(float(value.mean()) - pen)
        pens.append(pen)
        clips.append(float(outside.mean()))
    return {"actor_objective": float(np.mean(objs)), "penalty": float(np.mean(pens)),
            "clip_fraction": float(np.mean(clips)), "entropy": float("nan")}


def actor_update_bangbang(policy: BernoulliPolicy, adam: AdamState, data: EpochData, lr: float,
                          gamma: float, schedule: TrainSchedule, rng) -> dict:
    """PPO ascent on the clipped surrogate plus ``gamma`` times the mean entropy."""
    eps = schedule.clip_eps
    q_old = clamp_q(sigmoid(data.old_out))
    objs, ents, clips = [], [], []
    for idx in _minibatches(len(data.targets), schedule.minibatch, rng):
        out, cache = forward(policy.net, data.feats[idx], return_cache=True)
        q_raw = sigmoid(out)
        q = clamp_q(q_raw)
        bits = data.actions[idx]
        adv = data.advantages[idx]
        ratio = bernoulli_ratio(q, q_old[idx], bits)
        value, live, outside = _clipped_surrogate(ratio, adv, eps)
        b = len(idx)
        alive = (q_raw > 1e-6) & (q_raw < 1 - 1e-6)
        g = -((live * adv * ratio)[:, None] * (bits - q) * alive) / b
        ent = bernoulli_entropy(q)
        if gamma > 0:
            g -= gamma * bernoulli_entropy_grad(q_raw) / b
        adam_step(policy.net, backward(policy.net, data.feats[idx], g, cache), adam, lr)
        objs.append(float(value.mean() + gamma * ent.mean()))
        ents.append(float(ent.mean()))
        clips.append(float(outside.mean()))
    return {"actor_objective": float(np.mean(objs)), "penalty": 0.0,
            "clip_fraction": float(np.mean(clips)), "entropy": float(np.mean(ents))}


def _make_policy(family: str, spec: ModelSpec, net: MlpParams, temperature: float):
    if family == "continuous":
        return GaussianPolicy(spec, net, temperature)
    if family == "bangbang":
        return BernoulliPolicy(spec, net)
    raise ValueError(f"unknown policy family {family!r}; expected one of {FAMILIES}")


def fresh_networks(family: str, spec: ModelSpec, n: int, schedule: TrainSchedule, rng,
                   augmented: bool = False) -> tuple[MlpParams, MlpParams]:
    shift, scale = feature_stats(spec, n, augmented)
    in_dim = len(shift)
    out_dim = latent_dim(spec) if family == "continuous" else n_bits(spec)
    actor = init_mlp(in_dim, out_dim, schedule.hidden, rng, shift, scale)
    critic = init_mlp(in_dim, 1, schedule.hidden, rng, shift, scale)
    return actor, critic


def train_step(n: int, continuation: Callable, spec: ModelSpec, schedule: TrainSchedule, family: str,
               rng, init: StepArtifacts | None = None, augmented: bool = False) -> StepArtifacts:
    """Train the actor and critic of time step ``n`` for a fixed epoch budget."""
    total = schedule.epochs(n, spec.steps)
    lr_scale = schedule.lr_scale(n, spec.steps)
    if init is None:
        actor_net, critic_net = fresh_networks(family, spec, n, schedule, rng, augmented)
    else:
        shift, scale = feature_stats(spec, n, augmented)
        actor_net = renormalize(transfer_init(init.actor.net), shift, scale)
        critic_net = renormalize(transfer_init(init.critic), shift, scale)
    policy = _make_policy(family, spec, actor_net, schedule.temp_start)
    actor_adam = AdamState.zeros_like(actor_net)
    critic_adam = AdamState.zeros_like(critic_net)
    m = schedule.mc_samples
    curve = []
    best, stale = math.inf, 0
    for ep in range(total):
        try:
            lr = lr_scale * anneal(ep, total, schedule.lr_start, schedule.lr_end,
                                   schedule.anneal_mid, schedule.anneal_steepness)
            if family == "continuous":
                explore = anneal(ep, total, schedule.temp_start, schedule.temp_end,
                                 schedule.anneal_mid, schedule.anneal_steepness)
                policy.temperature = explore
            else:
                explore = anneal(ep, total, schedule.entropy_start, schedule.entropy_end,
                                 schedule.anneal_mid, schedule.anneal_steepness)
            data = collect(policy, n, spec, continuation, m, rng, augmented)
            c_loss = critic_update(critic_net, critic_adam, data.feats, data.targets, lr, schedule.minibatch, rng)
            data.advantages = normalize_advantages(data.targets - forward(critic_net, data.feats)[:, 0])
            if family == "continuous":
                stats = actor_update_continuous(policy, actor_adam, data, lr, schedule, rng)
            else:
                stats = actor_update_bangbang(policy, actor_adam, data, lr, explore, schedule, rng)
        except (FloatingPointError, ValueError) as exc:
            raise TrainingError(f"step n={n}, epoch={ep}: {exc}") from exc
        curve.append({"step": n, "epoch": ep, "critic_loss": c_loss, **stats, "lr": lr,
                      "lambda_or_gamma": explore})
        if schedule.plateau_stop:
            if c_loss < best * (1 - 1e-3):
                best, stale = c_loss, 0
            else:
                stale += 1
                if stale >= schedule.plateau_patience:
                    break
    # last critic pass on the deterministic policy
    try:
        for _ in range(schedule.final_critic_epochs):
            data = collect(policy, n, spec, continuation, m, rng, augmented, deterministic=True)
            c_loss = critic_update(critic_net, critic_adam, data.feats, data.targets, lr, schedule.minibatch, rng)
    except (FloatingPointError, ValueError) as exc:
        raise TrainingError(f"step n={n}, final critic pass: {exc}") from exc
    if family == "continuous":
        policy.temperature = schedule.temp_end
    return StepArtifacts(n, policy, critic_net, curve, final_critic_loss=c_loss)


def save_step(directory, art: StepArtifacts) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, f"actor_{art.n:04d}.bin"), "wb") as fh:
        fh.write(policy_to_bytes(art.actor))
    save_params(os.path.join(directory, f"critic_{art.n:04d}.bin"), art.critic, {"step": art.n})


def train_backward(spec: ModelSpec, payoff: Callable, schedule: TrainSchedule, family: str = "continuous",
                   seed: int = 0, checkpoint_dir=None, progress: Callable | None = None) -> list[StepArtifacts]:
    """Train all time steps backward; returns artifacts indexed by time step.

    Deterministic given ``seed``. With ``checkpoint_dir`` each finished step is
    written immediately so that a failed run leaves its partial progress.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown policy family {family!r}")
    if family == "bangbang":
        n_bits(spec)  # rejects unsupported configurations up front
    augmented = _is_augmented(payoff)
    if augmented:
        spec.monitoring_stride()
    init_rng = np.random.default_rng([seed, INIT_DOMAIN])
    out: list[StepArtifacts | None] = [None] * spec.steps
    continuation = payoff
    prev = None
    t0 = time.perf_counter()
    for n in range(spec.steps - 1, -1, -1):
        rng = np.random.default_rng([seed, TRAIN_DOMAIN, n])
        if prev is None:
            # fresh networks draw from their own stream so that step seeds stay aligned
            actor, critic = fresh_networks(family, spec, n, schedule, init_rng, augmented)
            prev = StepArtifacts(n + 1, _make_policy(family, spec, actor, schedule.temp_start), critic)
        try:
            art = train_step(n, continuation, spec, schedule, family, rng, init=prev, augmented=augmented)
        except TrainingError as exc:
            where = f" (partial checkpoints in {checkpoint_dir})" if checkpoint_dir else ""
            raise TrainingError(f"{exc}{where}") from exc
        if checkpoint_dir is not None:
            save_step(checkpoint_dir, art)
        out[n] = art
        prev = art
        continuation = art.value()
        if progress is not None:
            progress(n, art, time.perf_counter() - t0)
    return out
