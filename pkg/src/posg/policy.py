"""Stochastic policies and value functions over :class:`~posg.nn.DenseNet`."""
from __future__ import annotations

import math

import numpy as np

from .nn import DenseNet

LOG_2PI = math.log(2.0 * math.pi)


class _ObsNormalizer:
    def __init__(self, obs_low, obs_high):
        self.obs_low = np.asarray(obs_low, dtype=np.float64)
        self.obs_high = np.asarray(obs_high, dtype=np.float64)
        span = self.obs_high - self.obs_low
        self._scale = 2.0 / np.where(span > 0, span, 1.0)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_low) * self._scale - 1.0


class CategoricalPolicy(_ObsNormalizer):
    discrete = True

    def __init__(self, net: DenseNet, obs_low, obs_high):
        super().__init__(obs_low, obs_high)
        self.net = net
        self.n_actions = net.output_dim

    @classmethod
    def create(cls, obs_dim: int, n_actions: int, obs_low, obs_high, rng: np.random.Generator,
               hidden: tuple[int, ...] = (64, 64)) -> "CategoricalPolicy":
        net = DenseNet.create([obs_dim, *hidden, n_actions], rng, output_scale=0.01)
        return cls(net, obs_low, obs_high)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def _probs(self, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = logits - logits.max(axis=1, keepdims=True)
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return np.exp(log_p), log_p

    def act(self, obs: np.ndarray, rng: np.random.Generator | None, greedy: bool = False):
        logits = self.net(self.normalize(np.atleast_2d(obs)))
        probs, log_p = self._probs(logits)
        if greedy:
            actions = np.argmax(logits, axis=1)
        else:
            u = rng.random(len(probs))
            cdf = np.cumsum(probs, axis=1)
            actions = np.minimum((cdf < u[:, None]).sum(axis=1), self.n_actions - 1)
        return actions.astype(np.int64), log_p[np.arange(len(actions)), actions]

    def evaluate(self, obs: np.ndarray, actions: np.ndarray):
        """Log-probs and entropies of ``actions``, plus a cache for :meth:`backward`."""
        logits, cache = self.net.forward(self.normalize(obs))
        probs, log_p = self._probs(logits)
        idx = np.arange(len(actions))
        entropy = -(probs * log_p).sum(axis=1)
        return log_p[idx, actions], entropy, (cache, probs, log_p, actions, entropy)

    def backward(self, ctx, d_logp: np.ndarray, d_entropy: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients of ``sum(d_logp * logp + d_entropy * entropy)``."""
        cache, probs, log_p, actions, entropy = ctx
        d_logits = -probs * d_logp[:, None]
        d_logits[np.arange(len(actions)), actions] += d_logp
        d_logits -= d_entropy[:, None] * probs * (log_p + entropy[:, None])
        return self.net.backward(cache, d_logits)


class GaussianPolicy(_ObsNormalizer):
    """Diagonal Gaussian; the mean comes from the network, log-std is a free vector."""

    discrete = False

    def __init__(self, net: DenseNet, log_std: np.ndarray, obs_low, obs_high):
        super().__init__(obs_low, obs_high)
        self.net = net
        self.log_std = np.asarray(log_std, dtype=np.float64)
        self.act_dim = net.output_dim

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, obs_low, obs_high, rng: np.random.Generator,
               hidden: tuple[int, ...] = (64, 64), init_std: float = 0.5) -> "GaussianPolicy":
        net = DenseNet.create([obs_dim, *hidden, act_dim], rng, output_scale=0.01)
        return cls(net, np.full(act_dim, math.log(init_std)), obs_low, obs_high)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params + [self.log_std]

    def _log_prob(self, mean, actions):
        z = (actions - mean) * np.exp(-self.log_std)
        return (-0.5 * z * z - self.log_std - 0.5 * LOG_2PI).sum(axis=1), z

    def act(self, obs: np.ndarray, rng: np.random.Generator | None, greedy: bool = False):
        mean = self.net(self.normalize(np.atleast_2d(obs)))
        if greedy:
            actions = mean
        else:
            actions = mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)
        return actions, self._log_prob(mean, actions)[0]

    def evaluate(self, obs: np.ndarray, actions: np.ndarray):
        mean, cache = self.net.forward(self.normalize(obs))
        logp, z = self._log_prob(mean, actions)
        entropy = np.full(len(actions), float(np.sum(self.log_std + 0.5 * (LOG_2PI + 1.0))))
        return logp, entropy, (cache, z)

    def backward(self, ctx, d_logp: np.ndarray, d_entropy: np.ndarray) -> list[np.ndarray]:
        cache, z = ctx
        d_mean = d_logp[:, None] * z * np.exp(-self.log_std)
        d_log_std = (d_logp[:, None] * (z * z - 1.0)).sum(axis=0) + d_entropy.sum()
        return self.net.backward(cache, d_mean) + [d_log_std]


class ValueFunction(_ObsNormalizer):
    def __init__(self, net: DenseNet, obs_low, obs_high):
        super().__init__(obs_low, obs_high)
        self.net = net

    @classmethod
    def create(cls, obs_dim: int, obs_low, obs_high, rng: np.random.Generator,
               hidden: tuple[int, ...] = (64, 64)) -> "ValueFunction":
        return cls(DenseNet.create([obs_dim, *hidden, 1], rng), obs_low, obs_high)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def predict(self, obs: np.ndarray) -> np.ndarray:
        return self.net(self.normalize(np.atleast_2d(obs)))[:, 0]

    def loss_and_grads(self, obs: np.ndarray, targets: np.ndarray) -> tuple[float, list[np.ndarray]]:
        """Mean of ``0.5 * (V - target)^2`` and its parameter gradients."""
        out, cache = self.net.forward(self.normalize(obs))
        err = out[:, 0] - targets
        loss = 0.5 * float(np.mean(err * err))
        return loss, self.net.backward(cache, (err / len(err))[:, None])
