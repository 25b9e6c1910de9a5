"""GRPO objective: group-relative advantages, clipped token-level surrogate,
optional KL regularization, and policy-entropy measurement.

All quantities are computed over a flattened token view of the rollout
batch, so loss, gradient, and entropy are single vectorized passes for the
linear-softmax toy policies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DataError, GradientOracle


@dataclass(frozen=True)
class FlatTokens:
    """Flattened per-token view of a rollout batch.

    ``token_weight`` carries the objective weighting 1/(n_prompts * G * |o|)
    for each token, so weighted sums over tokens realize the per-response
    token mean, per-group response mean, and batch mean in one shot.
    """

    token_id: np.ndarray
    prompt_idx: np.ndarray
    resp_idx: np.ndarray
    position: np.ndarray
    prev_token: np.ndarray
    old_logprob: np.ndarray
    ref_logprob: np.ndarray | None
    resp_len: np.ndarray
    token_weight: np.ndarray

    @property
    def num_tokens(self) -> int:
        return int(self.token_id.size)


@dataclass
class RolloutBatch:
    """One step's rollouts: G sampled responses per prompt, with rewards and
    the generation-time log-probabilities frozen for the importance ratio.

    ``responses[i][g]`` is an int token array; ``old_logprobs[i][g]`` the
    matching per-token log-probabilities of the generating policy;
    ``rewards`` has shape (n_prompts, G).  ``ref_logprobs`` is present only
    when a KL term is in use.
    """

    prompts: list
    responses: list[list[np.ndarray]]
    old_logprobs: list[list[np.ndarray]]
    rewards: np.ndarray
    ref_logprobs: list[list[np.ndarray]] | None = None

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=float)
        n = len(self.prompts)
        if len(self.responses) != n or len(self.old_logprobs) != n:
            raise DataError("responses and old_logprobs must align with prompts")
        if n == 0:
            raise DataError("empty rollout batch")
        g = len(self.responses[0])
        for i in range(n):
            if len(self.responses[i]) != g or len(self.old_logprobs[i]) != g:
                raise DataError(f"prompt {i} does not have exactly {g} responses")
            for j in range(g):
                resp = np.asarray(self.responses[i][j])
                lp = np.asarray(self.old_logprobs[i][j], dtype=float)
                if resp.shape != lp.shape:
                    raise DataError(f"response/logprob length mismatch at prompt {i}, response {j}")
                if resp.size == 0:
                    raise DataError(f"empty response at prompt {i}, response {j}")
                if np.any(lp > 0.0):
                    raise DataError("old log-probabilities must be <= 0")
        if self.rewards.shape != (n, g):
            raise DataError(f"rewards shape {self.rewards.shape} != {(n, g)}")
        if not np.all(np.isfinite(self.rewards)):
            raise DataError("rewards must be finite")
        if self.ref_logprobs is not None and len(self.ref_logprobs) != n:
            raise DataError("ref_logprobs must align with prompts")
        self._flat: FlatTokens | None = None

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)

    @property
    def group_size(self) -> int:
        return len(self.responses[0])

    @property
    def num_responses(self) -> int:
        return self.n_prompts * self.group_size

    @property
    def mean_response_length(self) -> float:
        return float(np.mean([r.size for group in self.responses for r in group]))

    def flat(self) -> FlatTokens:
        """Build (and cache) the flattened token view."""
        if self._flat is not None:
            return self._flat
        g = self.group_size
        token_id, prompt_idx, resp_idx, position, prev_tok, old_lp = [], [], [], [], [], []
        ref_lp = [] if self.ref_logprobs is not None else None
        resp_len = []
        for i in range(self.n_prompts):
            for j in range(g):
                resp = np.asarray(self.responses[i][j], dtype=int)
                length = resp.size
                ridx = i * g + j
                token_id.append(resp)
                prompt_idx.append(np.full(length, i, dtype=int))
                resp_idx.append(np.full(length, ridx, dtype=int))
                position.append(np.arange(length, dtype=int))
                prev = np.empty(length, dtype=int)
                prev[0] = -1
                prev[1:] = resp[:-1]
                prev_tok.append(prev)
                old_lp.append(np.asarray(self.old_logprobs[i][j], dtype=float))
                if ref_lp is not None:
                    ref_lp.append(np.asarray(self.ref_logprobs[i][j], dtype=float))
                resp_len.append(length)
        resp_len = np.asarray(resp_len, dtype=int)
        resp_idx_arr = np.concatenate(resp_idx)
        weight = 1.0 / (self.n_prompts * g * resp_len.astype(float))
        self._flat = FlatTokens(
            token_id=np.concatenate(token_id),
            prompt_idx=np.concatenate(prompt_idx),
            resp_idx=resp_idx_arr,
            position=np.concatenate(position),
            prev_token=np.concatenate(prev_tok),
            old_logprob=np.concatenate(old_lp),
            ref_logprob=np.concatenate(ref_lp) if ref_lp is not None else None,
            resp_len=resp_len,
            token_weight=weight[resp_idx_arr],
        )
        return self._flat

    def subset(self, prompt_indices: np.ndarray) -> "RolloutBatch":
        """New batch restricted to the given prompts (groups stay intact)."""
        idx = [int(i) for i in prompt_indices]
        return RolloutBatch(
            prompts=[self.prompts[i] for i in idx],
            responses=[self.responses[i] for i in idx],
            old_logprobs=[self.old_logprobs[i] for i in idx],
            rewards=self.rewards[idx],
            ref_logprobs=[self.ref_logprobs[i] for i in idx] if self.ref_logprobs is not None else None,
        )


def normalize_advantages(rewards, eps_num: float = 1e-12) -> np.ndarray:
    """Group-relative advantages: center by group mean, scale by the group's
    population standard deviation (guarded by ``eps_num``).

    Degenerate groups (zero variance) yield identically zero advantages.
    Input and output have shape (n_groups, G) with G >= 2.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 2:
        raise ConfigError(f"expected rewards of shape (n_groups, G), got {r.shape}")
    if r.shape[1] < 2:
        raise ConfigError(f"each group needs at least 2 responses, got {r.shape[1]}")
    if not np.all(np.isfinite(r)):
        raise DataError("rewards must be finite")
    mu = r.mean(axis=1, keepdims=True)
    sigma = r.std(axis=1, keepdims=True)
    return (r - mu) / (sigma + eps_num)


def clipped_surrogate(ratio, advantage, eps_clip: float):
    """Per-token pessimistic surrogate: min of the raw and clipped-ratio
    advantage terms."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    clipped = np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip)
    return np.minimum(ratio * advantage, clipped * advantage)


def _token_advantages(batch: RolloutBatch, eps_num: float) -> np.ndarray:
    flat = batch.flat()
    adv = normalize_advantages(batch.rewards, eps_num)
    return adv.ravel()[flat.resp_idx]


def _kl_delta(flat: FlatTokens, logprobs: np.ndarray) -> np.ndarray:
    if flat.ref_logprob is None:
        raise ConfigError("kl_coeff > 0 requires ref_logprobs in the batch")
    return logprobs - flat.ref_logprob


def grpo_loss(
    theta: np.ndarray,
    batch: RolloutBatch,
    policy,
    eps_clip: float = 0.2,
    beta: float = 0.0,
    eps_num: float = 1e-12,
) -> float:
    """Negated group-relative clipped-surrogate objective.

    Token terms are averaged within each response, then across the group,
    then over prompts, and the sign is flipped so that minimizing the loss
    maximizes the objective.  With ``beta > 0`` a per-token KL penalty toward
    the reference policy is subtracted from the objective, using the
    nonnegative estimator exp(-d) + d - 1 with d the log-ratio of current to
    reference token probabilities.
    """
    flat = batch.flat()
    logprobs = policy.token_logprobs(theta, batch)
    ratio = np.exp(logprobs - flat.old_logprob)
    adv = _token_advantages(batch, eps_num)
    objective = float(np.sum(flat.token_weight * clipped_surrogate(ratio, adv, eps_clip)))
    if beta > 0.0:
        delta = _kl_delta(flat, logprobs)
        kl = np.exp(-delta) + delta - 1.0
        objective -= beta * float(np.sum(flat.token_weight * kl))
    return -objective


def grpo_grad(
    theta: np.ndarray,
    batch: RolloutBatch,
    policy,
    eps_clip: float = 0.2,
    beta: float = 0.0,
    eps_num: float = 1e-12,
) -> np.ndarray:
    """Exact analytic gradient of ``grpo_loss`` via the score function.

    A token contributes gradient through the importance ratio only while the
    unclipped branch attains the surrogate min; strictly clipped tokens are
    constant in the parameters and contribute nothing.
    """
    flat = batch.flat()
    logprobs = policy.token_logprobs(theta, batch)
    ratio = np.exp(logprobs - flat.old_logprob)
    adv = _token_advantages(batch, eps_num)
    clipped = np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip)
    unclipped_active = ratio * adv <= clipped * adv
    coeff = -flat.token_weight * np.where(unclipped_active, adv * ratio, 0.0)
    if beta > 0.0:
        delta = _kl_delta(flat, logprobs)
        coeff = coeff + beta * flat.token_weight * (1.0 - np.exp(-delta))
    return policy.weighted_score_sum(theta, batch, coeff)


def policy_entropy(theta: np.ndarray, batch: RolloutBatch, policy) -> float:
    """Mean Shannon entropy (nats) of the full conditional next-token
    distribution, over every generated token position in the batch."""
    entropies = policy.token_entropies(theta, batch)
    if entropies.size == 0:
        raise DataError("cannot compute entropy of an empty batch")
    return float(entropies.mean())


def make_grpo_oracle(
    policy,
    eps_clip: float = 0.2,
    beta: float = 0.0,
    eps_num: float = 1e-12,
) -> GradientOracle:
    """Bundle the loss and its analytic gradient as a gradient oracle."""

    def loss_fn(theta, batch):
        return grpo_loss(theta, batch, policy, eps_clip, beta, eps_num)

    def grad_fn(theta, batch):
        return grpo_grad(theta, batch, policy, eps_clip, beta, eps_num)

    return GradientOracle(loss_fn=loss_fn, grad_fn=grad_fn)
