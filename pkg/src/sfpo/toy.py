"""Desk-scale synthetic tasks and analytic-gradient policy classes.

Both policy classes are linear-softmax models over deterministic,
parameter-free features of (prompt, prefix): logits = W @ features.  That
makes every log-probability, score vector, and entropy an exact closed-form
quantity, so GRPO training on these tasks is verifiable against independent
numerical oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import ConfigError, DataError
from .grpo import RolloutBatch


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


class ToyPolicy:
    """Linear-softmax policy over deterministic features.

    Subclasses define the feature map; everything parameter-dependent is a
    vectorized matrix product against the weight matrix W of shape
    (vocab_size, feature_dim), stored flattened as ``params``.
    """

    kind = "linear_softmax"

    def __init__(self, vocab_size: int, max_len: int, feature_dim: int, eos_token: int | None):
        if vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {vocab_size}")
        if max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {max_len}")
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.feature_dim = feature_dim
        self.eos_token = eos_token
        self.params = self.init_params()

    @property
    def dim(self) -> int:
        return self.vocab_size * self.feature_dim

    def init_params(self) -> np.ndarray:
        return np.zeros(self.dim)

    def weight_matrix(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DataError(f"expected parameter vector of shape ({self.dim},), got {theta.shape}")
        return theta.reshape(self.vocab_size, self.feature_dim)

    # -- feature map (subclass responsibility) ------------------------------

    def encode_prompts(self, prompts: list) -> np.ndarray:
        raise NotImplementedError

    def feature_rows(self, prompt_enc: np.ndarray, prev_tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Feature matrix, one row per (prompt, previous token, position)."""
        raise NotImplementedError

    # -- single-position helpers --------------------------------------------

    def logits(self, theta: np.ndarray, prompt, prefix=()) -> np.ndarray:
        prev = prefix[-1] if len(prefix) else -1
        enc = self.encode_prompts([prompt])
        rows = self.feature_rows(enc, np.array([prev]), np.array([len(prefix)]))
        return self.weight_matrix(theta) @ rows[0]

    def distribution(self, theta: np.ndarray, prompt, prefix=()) -> np.ndarray:
        return _softmax(self.logits(theta, prompt, prefix))

    # -- vectorized batch quantities ----------------------------------------

    def _batch_features(self, batch: RolloutBatch) -> np.ndarray:
        flat = batch.flat()
        enc = self.encode_prompts(batch.prompts)
        return self.feature_rows(enc[flat.prompt_idx], flat.prev_token, flat.position)

    def _batch_logprob_table(self, theta: np.ndarray, batch: RolloutBatch) -> np.ndarray:
        features = self._batch_features(batch)
        return _log_softmax(features @ self.weight_matrix(theta).T)

    def token_logprobs(self, theta: np.ndarray, batch: RolloutBatch) -> np.ndarray:
        """Log-probability of each sampled token under parameters ``theta``."""
        flat = batch.flat()
        if np.any(flat.token_id < 0) or np.any(flat.token_id >= self.vocab_size):
            raise DataError("token id outside vocabulary")
        table = self._batch_logprob_table(theta, batch)
        return table[np.arange(flat.num_tokens), flat.token_id]

    def token_entropies(self, theta: np.ndarray, batch: RolloutBatch) -> np.ndarray:
        """Shannon entropy (nats) of the conditional distribution at every
        generated token position."""
        table = self._batch_logprob_table(theta, batch)
        probs = np.exp(table)
        return -(probs * table).sum(axis=1)

    def weighted_score_sum(self, theta: np.ndarray, batch: RolloutBatch, coeff: np.ndarray) -> np.ndarray:
        """Sum over token positions of coeff_t * grad(log prob of token t).

        The score of a linear-softmax token is (onehot - probs) outer
        features, so the weighted sum collapses to one matrix product.
        """
        flat = batch.flat()
        features = self._batch_features(batch)
        table = _log_softmax(features @ self.weight_matrix(theta).T)
        scores = -np.exp(table) * coeff[:, None]
        scores[np.arange(flat.num_tokens), flat.token_id] += coeff
        return (scores.T @ features).ravel()


class SoftmaxBanditPolicy(ToyPolicy):
    """Single-token policy: one softmax over arms per context.

    Prompts are context indices; features are the context one-hot, so the
    weight matrix is a per-context logit table.
    """

    kind = "softmax_bandit"

    def __init__(self, num_contexts: int, num_arms: int):
        if num_contexts < 1:
            raise ConfigError(f"num_contexts must be >= 1, got {num_contexts}")
        self.num_contexts = num_contexts
        super().__init__(vocab_size=num_arms, max_len=1, feature_dim=num_contexts, eos_token=None)

    def encode_prompts(self, prompts: list) -> np.ndarray:
        enc = np.asarray(prompts, dtype=int)
        if enc.ndim != 1:
            raise DataError("bandit prompts must be context indices")
        if np.any(enc < 0) or np.any(enc >= self.num_contexts):
            raise DataError("context index outside range")
        return enc

    def feature_rows(self, prompt_enc, prev_tokens, positions) -> np.ndarray:
        rows = np.zeros((len(prompt_enc), self.feature_dim))
        rows[np.arange(len(prompt_enc)), prompt_enc] = 1.0
        return rows


class LinearSeqPolicy(ToyPolicy):
    """Autoregressive policy for digit-pair prompts.

    Features concatenate one-hots of the two prompt digits, their joint pair
    (which makes any prompt-to-sequence mapping linearly realizable), the
    previous token (with a dedicated start slot), and the position.  The last
    vocabulary entry is the end-of-sequence token.
    """

    kind = "linear_seq"

    def __init__(self, vocab_size: int, max_len: int, digit_base: int = 10):
        if digit_base < 2:
            raise ConfigError(f"digit_base must be >= 2, got {digit_base}")
        self.digit_base = digit_base
        feature_dim = 2 * digit_base + digit_base * digit_base + (vocab_size + 1) + max_len
        super().__init__(vocab_size, max_len, feature_dim, eos_token=vocab_size - 1)

    def encode_prompts(self, prompts: list) -> np.ndarray:
        enc = np.asarray(prompts, dtype=int)
        if enc.ndim != 2 or enc.shape[1] != 2:
            raise DataError("digit prompts must be (d1, d2) pairs")
        if np.any(enc < 0) or np.any(enc >= self.digit_base):
            raise DataError("prompt digit outside base range")
        return enc

    def feature_rows(self, prompt_enc, prev_tokens, positions) -> np.ndarray:
        n = len(prompt_enc)
        base = self.digit_base
        rows = np.zeros((n, self.feature_dim))
        idx = np.arange(n)
        d1 = prompt_enc[:, 0]
        d2 = prompt_enc[:, 1]
        rows[idx, d1] = 1.0
        rows[idx, base + d2] = 1.0
        rows[idx, 2 * base + d1 * base + d2] = 1.0
        prev_offset = 2 * base + base * base
        # previous-token slot; -1 (no previous token yet) gets the last slot
        prev = np.where(prev_tokens < 0, self.vocab_size, prev_tokens)
        rows[idx, prev_offset + prev] = 1.0
        pos_offset = prev_offset + self.vocab_size + 1
        rows[idx, pos_offset + positions] = 1.0
        return rows


def logprob_and_grad(policy: ToyPolicy, prompt, response, theta: np.ndarray | None = None):
    """Exact per-token log-probabilities and score vectors for one response.

    Returns ``(logprobs, scores)`` with shapes (len,) and (len, dim); each
    score row is the flattened gradient of that token's log-probability.
    Evaluates at ``policy.params`` unless ``theta`` is given.
    """
    theta = policy.params if theta is None else np.asarray(theta, dtype=float)
    response = np.asarray(response, dtype=int)
    if response.ndim != 1 or response.size == 0:
        raise DataError("response must be a non-empty 1-D token sequence")
    if np.any(response < 0) or np.any(response >= policy.vocab_size):
        raise DataError("token id outside vocabulary")
    weight = policy.weight_matrix(theta)
    enc = policy.encode_prompts([prompt])
    length = response.size
    prev = np.empty(length, dtype=int)
    prev[0] = -1
    prev[1:] = response[:-1]
    rows = policy.feature_rows(np.repeat(enc, length, axis=0), prev, np.arange(length))
    table = _log_softmax(rows @ weight.T)
    logprobs = table[np.arange(length), response]
    probs = np.exp(table)
    onehot = np.zeros_like(probs)
    onehot[np.arange(length), response] = 1.0
    scores = (onehot - probs)[:, :, None] * rows[:, None, :]
    return logprobs, scores.reshape(length, policy.dim)


@dataclass
class SyntheticTask:
    """A verifiable toy task: seeded prompt sampling plus a deterministic
    binary reward."""

    kind: str
    vocab_size: int
    max_len: int
    meta: dict = field(default_factory=dict)
    _sample_prompts: Callable = None
    _reward: Callable = None
    _correct: Callable = None

    def sample_prompts(self, rng: np.random.Generator, n: int) -> list:
        return self._sample_prompts(rng, n)

    def reward_fn(self, prompt, response) -> float:
        return float(self._reward(prompt, np.asarray(response, dtype=int)))

    def correct_response(self, prompt) -> np.ndarray:
        """One response that attains reward 1 for this prompt."""
        return np.asarray(self._correct(prompt), dtype=int)


def _digits_of(value: int, base: int) -> list[int]:
    if value == 0:
        return [0]
    digits = []
    while value:
        digits.append(value % base)
        value //= base
    return digits[::-1]


def make_task(
    kind: str,
    seed: int = 0,
    num_arms: int = 16,
    num_contexts: int = 4,
    digit_base: int = 10,
) -> SyntheticTask:
    """Build a synthetic task.

    ``group_bandit``: prompts are context indices; exactly one arm per
    context (fixed by ``seed``) earns reward 1.  ``digit_sum``: prompts are
    two digits; reward 1 iff the response spells the digits of their sum,
    terminated by the end-of-sequence token.
    """
    if kind == "group_bandit":
        if num_arms < 2:
            raise ConfigError(f"num_arms must be >= 2, got {num_arms}")
        correct_arms = np.random.default_rng(seed).integers(0, num_arms, size=num_contexts)

        def sample(rng, n):
            return [int(c) for c in rng.integers(0, num_contexts, size=n)]

        def reward(prompt, response):
            return 1.0 if response.size >= 1 and int(response[0]) == int(correct_arms[prompt]) else 0.0

        def correct(prompt):
            return [int(correct_arms[prompt])]

        return SyntheticTask(
            kind=kind,
            vocab_size=num_arms,
            max_len=1,
            meta={"num_contexts": num_contexts, "correct_arms": correct_arms.tolist()},
            _sample_prompts=sample,
            _reward=reward,
            _correct=correct,
        )
    if kind == "digit_sum":
        vocab_size = digit_base + 1
        eos = vocab_size - 1

        def sample(rng, n):
            pairs = rng.integers(0, digit_base, size=(n, 2))
            return [(int(a), int(b)) for a, b in pairs]

        def reward(prompt, response):
            eos_hits = np.flatnonzero(response == eos)
            emitted = response[: eos_hits[0]] if eos_hits.size else response
            return 1.0 if emitted.tolist() == _digits_of(prompt[0] + prompt[1], digit_base) else 0.0

        def correct(prompt):
            return _digits_of(prompt[0] + prompt[1], digit_base) + [eos]

        return SyntheticTask(
            kind=kind,
            vocab_size=vocab_size,
            max_len=3,
            meta={"digit_base": digit_base},
            _sample_prompts=sample,
            _reward=reward,
            _correct=correct,
        )
    raise ConfigError(f"unknown task kind {kind!r}")


def make_policy(kind: str, task: SyntheticTask) -> ToyPolicy:
    """Build the policy class matching a task's prompt structure."""
    if kind == "softmax_bandit":
        if task.kind != "group_bandit":
            raise ConfigError(f"softmax_bandit policy requires a group_bandit task, got {task.kind!r}")
        return SoftmaxBanditPolicy(task.meta["num_contexts"], task.vocab_size)
    if kind == "linear_seq":
        if task.kind != "digit_sum":
            raise ConfigError(f"linear_seq policy requires a digit_sum task, got {task.kind!r}")
        return LinearSeqPolicy(task.vocab_size, task.max_len, digit_base=task.meta["digit_base"])
    raise ConfigError(f"unknown policy kind {kind!r}")


def _nucleus_truncate(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Zero out everything outside the smallest top-p mass set, renormalize."""
    if top_p >= 1.0:
        return probs
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_probs = np.take_along_axis(probs, order, axis=1)
    cumulative_before = np.cumsum(sorted_probs, axis=1) - sorted_probs
    keep_sorted = cumulative_before < top_p
    keep = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    truncated = np.where(keep, probs, 0.0)
    return truncated / truncated.sum(axis=1, keepdims=True)


def sample_rollouts(
    policy: ToyPolicy,
    task: SyntheticTask,
    batch_size: int,
    group_size: int,
    temperature: float = 1.0,
    top_p: float = 1.0,
    seed: int = 0,
    theta: np.ndarray | None = None,
    ref_theta: np.ndarray | None = None,
) -> RolloutBatch:
    """Sample ``group_size`` responses per prompt, fully seeded.

    Sampling applies temperature scaling and then nucleus (top-p)
    truncation.  The stored log-probabilities are the untruncated,
    temperature-1 policy values of the sampled tokens: the importance-ratio
    denominator, not the truncated sampling probabilities.  ``ref_theta``
    additionally records reference-policy log-probabilities for a KL term.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not 0.0 < top_p <= 1.0:
        raise ConfigError(f"top_p must be in (0, 1], got {top_p}")
    if batch_size < 1 or group_size < 1:
        raise ConfigError("batch_size and group_size must be >= 1")
    theta = policy.params if theta is None else np.asarray(theta, dtype=float)
    weight = policy.weight_matrix(theta)
    ref_weight = policy.weight_matrix(ref_theta) if ref_theta is not None else None

    rng = np.random.default_rng(seed)
    prompts = task.sample_prompts(rng, batch_size)
    if task.vocab_size != policy.vocab_size or task.max_len > policy.max_len:
        raise ConfigError("policy vocabulary/length does not cover the task")
    enc = policy.encode_prompts(prompts)
    repeated = np.repeat(enc, group_size, axis=0)

    n = batch_size * group_size
    tokens = np.full((n, policy.max_len), -1, dtype=int)
    logprobs = np.zeros((n, policy.max_len))
    ref_logprobs = np.zeros((n, policy.max_len)) if ref_weight is not None else None
    lengths = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    prev = np.full(n, -1, dtype=int)

    for position in range(policy.max_len):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        rows = policy.feature_rows(repeated[idx], prev[idx], np.full(idx.size, position))
        logits = rows @ weight.T
        policy_logprobs = _log_softmax(logits)
        sampling_probs = _nucleus_truncate(_softmax(logits / temperature), top_p)
        draws = rng.random(idx.size)
        cdf = np.cumsum(sampling_probs, axis=1)
        choice = np.minimum((cdf < draws[:, None]).sum(axis=1), policy.vocab_size - 1)
        local = np.arange(idx.size)
        tokens[idx, position] = choice
        logprobs[idx, position] = np.minimum(policy_logprobs[local, choice], 0.0)
        if ref_logprobs is not None:
            ref_table = _log_softmax(rows @ ref_weight.T)
            ref_logprobs[idx, position] = np.minimum(ref_table[local, choice], 0.0)
        lengths[idx] += 1
        prev[idx] = choice
        if policy.eos_token is not None:
            active[idx[choice == policy.eos_token]] = False

    responses, old_lp, ref_lp, rewards = [], [], [], np.zeros((batch_size, group_size))
    for i in range(batch_size):
        group_resp, group_lp, group_ref = [], [], []
        for g in range(group_size):
            row = i * group_size + g
            length = lengths[row]
            resp = tokens[row, :length].copy()
            group_resp.append(resp)
            group_lp.append(logprobs[row, :length].copy())
            if ref_logprobs is not None:
                group_ref.append(ref_logprobs[row, :length].copy())
            rewards[i, g] = task.reward_fn(prompts[i], resp)
        responses.append(group_resp)
        old_lp.append(group_lp)
        if ref_logprobs is not None:
            ref_lp.append(group_ref)
    return RolloutBatch(
        prompts=prompts,
        responses=responses,
        old_logprobs=old_lp,
        rewards=rewards,
        ref_logprobs=ref_lp if ref_logprobs is not None else None,
    )
