"""DQN meta-policy over cache replacement actions.

The agent sees one candidate chunk at a time (drawn from the proactively
retrieved set, in descending similarity order) and picks among five
actions: skip, or admit while making room via one of four eviction
sub-policies (LRU, least-similar, stalest, GDSF). The 12-dimensional state
summarizes prompt/candidate/cache similarity structure, candidate
volatility and size, cache occupancy and staleness, the recent hit rate,
and the candidate's proximity to the reserved extraneous topics.

The network is a plain fully connected 12 -> 64 -> 64 -> 5 ReLU net,
trained by one-step Q-learning with experience replay, a periodically
synchronized target network, and plain SGD on the mean squared Bellman
error. Everything is numpy; gradients are hand-derived (and checked
against finite differences in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .cache import CacheState
from .errors import ConfigurationError
from .knowledge_base import Chunk, Volatility

STATE_DIM = 12
N_ACTIONS = 5
_LAYERS = (STATE_DIM, 64, 64, N_ACTIONS)


class Action(IntEnum):
    SKIP = 0
    ADMIT_EVICT_LRU = 1
    ADMIT_EVICT_LEAST_SIMILAR = 2
    ADMIT_EVICT_STALEST = 3
    ADMIT_EVICT_GDSF = 4


@dataclass(frozen=True)
class DqnHyperparams:
    gamma: float = 0.9
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 2000
    replay_capacity: int = 10000
    batch_size: int = 32
    learn_rate: float = 1e-3
    target_sync_every: int = 200
    reward_window: int = 5
    overhead_lambda: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ConfigurationError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if min(self.epsilon_decay_steps, self.replay_capacity, self.batch_size) < 1:
            raise ConfigurationError("decay steps, capacity, and batch must be positive")
        if self.learn_rate <= 0 or self.target_sync_every < 1:
            raise ConfigurationError("learn_rate and target_sync_every must be positive")
        if self.reward_window < 1:
            raise ConfigurationError("reward_window must be >= 1")
        if self.overhead_lambda < 0:
            raise ConfigurationError("overhead_lambda must be non-negative")

    def epsilon_at(self, step: int) -> float:
        frac = min(1.0, max(0.0, step / self.epsilon_decay_steps))
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Capacity-bounded ring buffer with seeded uniform sampling."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ConfigurationError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._storage: list[Transition] = []
        self._cursor = 0
        self._rng = np.random.default_rng(np.random.SeedSequence(seed & ((1 << 64) - 1)))

    def __len__(self) -> int:
        return len(self._storage)

    def push(self, t: Transition) -> None:
        if len(self._storage) < self.capacity:
            self._storage.append(t)
        else:
            self._storage[self._cursor] = t
        self._cursor = (self._cursor + 1) % self.capacity

    def sample(
        self,
        batch_size: int,
        rng: np.random.Generator | None = None,
        replace: bool = True,
    ) -> list[Transition]:
        if batch_size > len(self._storage):
            raise ValueError("not enough transitions to sample")
        gen = rng if rng is not None else self._rng
        if replace:
            idx = gen.integers(0, len(self._storage), size=batch_size)
        else:
            idx = gen.permutation(len(self._storage))[:batch_size]
        return [self._storage[i] for i in idx]


class QNetwork:
    """Fully connected 12 -> 64 -> 64 -> 5 net with ReLU hidden layers."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(seed & ((1 << 64) - 1)))
        self.W1 = rng.standard_normal((_LAYERS[1], _LAYERS[0])) * np.sqrt(2.0 / _LAYERS[0])
        self.b1 = np.zeros(_LAYERS[1])
        self.W2 = rng.standard_normal((_LAYERS[2], _LAYERS[1])) * np.sqrt(2.0 / _LAYERS[1])
        self.b2 = np.zeros(_LAYERS[2])
        self.W3 = rng.standard_normal((_LAYERS[3], _LAYERS[2])) * np.sqrt(2.0 / _LAYERS[2])
        self.b3 = np.zeros(_LAYERS[3])

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "W1": self.W1, "b1": self.b1,
            "W2": self.W2, "b2": self.b2,
            "W3": self.W3, "b3": self.b3,
        }

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        _, _, _, _, q = self._forward_cached(x)
        return q

    def _forward_cached(self, x: np.ndarray):
        z1 = x @ self.W1.T + self.b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.W2.T + self.b2
        a2 = np.maximum(z2, 0.0)
        q = a2 @ self.W3.T + self.b3
        return z1, a1, z2, a2, q

    def clone(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        for name, arr in self.parameters().items():
            setattr(other, name, arr.copy())
        return other

    def save(self, path: str) -> None:
        np.savez(path, format_version=np.int64(1), **self.parameters())

    @classmethod
    def load(cls, path: str) -> "QNetwork":
        data = np.load(path)
        if int(data["format_version"]) != 1:
            raise ValueError(f"unsupported checkpoint version {data['format_version']}")
        net = cls.__new__(cls)
        reference = cls(seed=0)
        for name, ref in reference.parameters().items():
            arr = np.asarray(data[name], dtype=np.float64)
            if arr.shape != ref.shape:
                raise ValueError(f"checkpoint parameter {name} has shape {arr.shape}")
            setattr(net, name, arr)
        return net


def q_forward(net: QNetwork, s: np.ndarray) -> np.ndarray:
    """Action values for one state."""
    return net.forward_batch(np.asarray(s, dtype=np.float64)[None, :])[0]


def select_action(
    net: QNetwork, s: np.ndarray, epsilon: float, rng: np.random.Generator
) -> int:
    """Epsilon-greedy over q_forward; exact ties resolve to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return int(np.argmax(q_forward(net, s)))


def compute_reward(
    window_hits: int, window_len: int, chunks_transferred: float, overhead_lambda: float
) -> float:
    """Windowed hit rate minus a transfer penalty; lambda = 0 is pure hit rate."""
    if window_len < 1:
        raise ValueError(f"window_len must be >= 1, got {window_len}")
    if not 0 <= window_hits <= window_len:
        raise ValueError(f"window_hits {window_hits} outside [0, {window_len}]")
    return window_hits / window_len - overhead_lambda * chunks_transferred


@dataclass
class Gradients:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray


def backprop_gradients(
    net: QNetwork, states: np.ndarray, actions: np.ndarray, targets: np.ndarray
) -> tuple[float, Gradients]:
    """Analytic gradients of the batch-mean squared error on the taken actions."""
    x = np.asarray(states, dtype=np.float64)
    batch = x.shape[0]
    z1, a1, z2, a2, q = net._forward_cached(x)
    rows = np.arange(batch)
    taken = q[rows, actions]
    err = taken - targets
    loss = float(np.mean(err ** 2))

    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / batch
    dW3 = dq.T @ a2
    db3 = dq.sum(axis=0)
    da2 = dq @ net.W3
    dz2 = da2 * (z2 > 0.0)
    dW2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ net.W2
    dz1 = da1 * (z1 > 0.0)
    dW1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return loss, Gradients(dW1, db1, dW2, db2, dW3, db3)


def train_step(
    net: QNetwork,
    target_net: QNetwork,
    buffer: ReplayBuffer,
    hp: DqnHyperparams,
    rng: np.random.Generator,
) -> float | None:
    """One uniform-batch Bellman update with plain SGD; returns the pre-step loss.

    Returns None (a no-op, not an error) while the buffer holds fewer than
    batch_size transitions.
    """
    if len(buffer) < hp.batch_size:
        return None
    batch = buffer.sample(hp.batch_size, rng=rng)
    states = np.stack([t.s for t in batch])
    actions = np.asarray([t.a for t in batch], dtype=np.int64)
    rewards = np.asarray([t.r for t in batch], dtype=np.float64)
    next_states = np.stack([t.s_next for t in batch])
    terminal = np.asarray([t.terminal for t in batch], dtype=bool)

    q_next = target_net.forward_batch(next_states).max(axis=1)
    targets = rewards + hp.gamma * q_next * (~terminal)

    loss, grads = backprop_gradients(net, states, actions, targets)
    lr = hp.learn_rate
    net.W1 -= lr * grads.W1
    net.b1 -= lr * grads.b1
    net.W2 -= lr * grads.W2
    net.b2 -= lr * grads.b2
    net.W3 -= lr * grads.W3
    net.b3 -= lr * grads.b3
    return loss


def sync_target(net: QNetwork, target_net: QNetwork) -> QNetwork:
    """Parameter-wise copy of the online net into the target net."""
    for name, arr in net.parameters().items():
        getattr(target_net, name)[...] = arr
    return target_net


@dataclass
class FeatureContext:
    """Per-decision inputs that do not live on the cache or the candidate."""

    kb_versions: np.ndarray
    reserved_anchors: np.ndarray
    max_size_units: int
    recent_hit_rate: float


def featurize(
    prompt: np.ndarray,
    cache: CacheState,
    chunk: Chunk,
    similarity: float,
    rank: int,
    n_candidates: int,
    ctx: FeatureContext,
) -> np.ndarray:
    """Build the 12-feature state for one candidate decision.

    Aggregates over an empty cache are defined as zero.
    """
    emb = cache.embedding_matrix()
    if len(emb):
        cand_sims = np.clip(emb @ chunk.embedding, -1.0, 1.0)
        prompt_sims = np.clip(emb @ prompt, -1.0, 1.0)
        max_cand = float(cand_sims.max())
        mean_cand = float(cand_sims.mean())
        max_prompt = float(prompt_sims.max())
        mean_prompt = float(prompt_sims.mean())
        ids = cache.ids_array()
        stale_frac = float(np.mean(cache.versions_array() < ctx.kb_versions[ids]))
    else:
        max_cand = mean_cand = max_prompt = mean_prompt = stale_frac = 0.0

    if len(ctx.reserved_anchors):
        extraneous_prox = float(np.max(ctx.reserved_anchors @ chunk.embedding))
    else:
        extraneous_prox = 0.0

    occupancy = cache.used_units / cache.capacity_units if cache.capacity_units else 1.0
    rank_norm = rank / (n_candidates - 1) if n_candidates > 1 else 0.0

    return np.array(
        [
            float(np.clip(similarity, -1.0, 1.0)),
            rank_norm,
            max_cand,
            mean_cand,
            max_prompt,
            mean_prompt,
            1.0 if chunk.volatility is Volatility.DYNAMIC else 0.0,
            chunk.size_units / ctx.max_size_units,
            occupancy,
            stale_frac,
            ctx.recent_hit_rate,
            float(np.clip(extraneous_prox, -1.0, 1.0)),
        ],
        dtype=np.float64,
    )
