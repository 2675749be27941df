"""Desk-scale federated objectives.

``f(theta) = (1/n) * sum_i f_i(theta)`` where client ``i`` owns ``f_i``.
Three families are provided:

* :class:`QuadraticProblem` - ``f_i = 0.5 * |theta - c_i|^2`` with optional
  additive Gaussian gradient noise; heterogeneity is set by the spread of
  the centres.
* :class:`LogisticProblem` - multinomial logistic regression on
  client-partitioned samples.
* :class:`MLPProblem` - a tanh multilayer perceptron with softmax output.

Plus the non-iid shard partitioner and the synthetic per-client gradient
generator used to study the compression discrepancy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .param_space import GroupLayout, ParamVector


class Problem:
    """Interface shared by all objectives.

    ``batch=None`` means the full local dataset (exact ``grad f_i``).
    """

    layout: GroupLayout
    n_clients: int

    def gradient(self, client: int, theta: ParamVector, batch: np.ndarray | None = None) -> ParamVector:
        raise NotImplementedError

    def loss(self, client: int, theta: ParamVector) -> float:
        raise NotImplementedError

    def stochastic_gradient(self, client: int, theta: ParamVector, batch_size: int | None,
                            rng: np.random.Generator) -> ParamVector:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        return ParamVector.zeros(self.layout)

    def global_gradient(self, theta: ParamVector) -> ParamVector:
        acc = np.zeros(self.layout.d)
        for i in range(self.n_clients):
            acc = acc + self.gradient(i, theta).values
        return ParamVector(self.layout, acc / self.n_clients)

    def global_loss(self, theta: ParamVector) -> float:
        return float(sum(self.loss(i, theta) for i in range(self.n_clients)) / self.n_clients)

    def describe(self) -> dict:
        return {"kind": type(self).__name__, "n_clients": self.n_clients, "d": self.layout.d}


# --------------------------------------------------------------------------
# Quadratic
# --------------------------------------------------------------------------


class QuadraticProblem(Problem):
    def __init__(self, centers, noise_sigma: float = 0.0, groups: Sequence[int] | None = None):
        c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ConfigurationError("centers must be an (n, d) array with n, d >= 1")
        if noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be nonnegative")
        self.centers = c
        self.noise_sigma = float(noise_sigma)
        self.n_clients, d = c.shape
        self.layout = GroupLayout(tuple(groups)) if groups is not None else GroupLayout.single(d)
        if self.layout.d != d:
            raise ConfigurationError(f"groups sum to {self.layout.d}, centers have d={d}")

    @property
    def minimizer(self) -> ParamVector:
        return ParamVector(self.layout, self.centers.mean(axis=0))

    def heterogeneity(self) -> float:
        """``(1/n) sum_i |grad f_i - grad f|^2``, constant in theta here."""
        dev = self.centers - self.centers.mean(axis=0)
        return float(np.mean(np.sum(dev * dev, axis=1)))

    def gradient(self, client, theta, batch=None):
        return ParamVector(self.layout, theta.values - self.centers[client])

    def loss(self, client, theta):
        r = theta.values - self.centers[client]
        return 0.5 * float(np.dot(r, r))

    def stochastic_gradient(self, client, theta, batch_size, rng):
        g = theta.values - self.centers[client]
        if self.noise_sigma > 0:
            g = g + self.noise_sigma * rng.standard_normal(g.size)
        return ParamVector(self.layout, g)

    def global_gradient(self, theta):
        # mean-of-centres form keeps the identity grad f = theta - mean(c) exact
        return ParamVector(self.layout, theta.values - self.centers.mean(axis=0))

    def describe(self):
        return {**super().describe(), "noise_sigma": self.noise_sigma,
                "heterogeneity": self.heterogeneity()}


def make_quadratic(n: int, d: int, spread: float, rng: np.random.Generator,
                   noise_sigma: float = 0.0, groups: Sequence[int] | None = None) -> QuadraticProblem:
    """Centres at distance ``spread`` from the origin in random directions."""
    if n < 1 or d < 1:
        raise ConfigurationError("n and d must be >= 1")
    if spread < 0:
        raise ConfigurationError("spread must be nonnegative")
    z = rng.standard_normal((n, d))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    centers = spread * z / norms
    return QuadraticProblem(centers, noise_sigma=noise_sigma, groups=groups)


# --------------------------------------------------------------------------
# Data-backed problems
# --------------------------------------------------------------------------


@dataclass
class ClientPartition:
    indices: list[np.ndarray]

    def __post_init__(self):
        self.indices = [np.asarray(ix, dtype=np.int64) for ix in self.indices]

    @property
    def n_clients(self) -> int:
        return len(self.indices)

    def sizes(self) -> list[int]:
        return [int(ix.size) for ix in self.indices]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(y.size), y].mean())


class _DataProblem(Problem):
    def __init__(self, features, labels, partition: ClientPartition, l2_reg: float = 0.0,
                 n_classes: int | None = None):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ConfigurationError("features must be (N, p) and labels (N,)")
        if l2_reg < 0:
            raise ConfigurationError("l2_reg must be nonnegative")
        self.X, self.y = X, y
        self.partition = partition
        self.l2_reg = float(l2_reg)
        self.n_clients = partition.n_clients
        self.n_features = X.shape[1]
        self.n_classes = int(n_classes) if n_classes is not None else int(y.max()) + 1
        for i, ix in enumerate(partition.indices):
            if ix.size == 0:
                raise ConfigurationError(f"client {i} holds no samples")

    def _batch(self, client: int, batch):
        ix = self.partition.indices[client] if batch is None else np.asarray(batch, dtype=np.int64)
        if ix.size == 0:
            raise ConfigurationError(f"empty batch for client {client}")
        return self.X[ix], self.y[ix]

    def stochastic_gradient(self, client, theta, batch_size, rng):
        if batch_size is None:
            return self.gradient(client, theta)
        local = self.partition.indices[client]
        if local.size == 0:
            raise ConfigurationError(f"client {client} holds no samples")
        batch = local[rng.integers(0, local.size, size=batch_size)]
        return self.gradient(client, theta, batch)

    def _unpack(self, theta: ParamVector) -> list[np.ndarray]:
        raise NotImplementedError

    def _forward_loss(self, theta: ParamVector, Xb, yb) -> float:
        raise NotImplementedError

    def loss(self, client, theta):
        Xb, yb = self._batch(client, None)
        v = theta.values
        return self._forward_loss(theta, Xb, yb) + 0.5 * self.l2_reg * float(np.dot(v, v))

    def describe(self):
        return {**super().describe(), "n_features": self.n_features, "n_classes": self.n_classes,
                "l2_reg": self.l2_reg, "samples_per_client": self.partition.sizes()}


class LogisticProblem(_DataProblem):
    """Multinomial logistic regression; groups are ``[W (C*p), b (C)]``."""

    def __init__(self, features, labels, partition, l2_reg=0.0, n_classes=None):
        super().__init__(features, labels, partition, l2_reg, n_classes)
        C, p = self.n_classes, self.n_features
        self.layout = GroupLayout((C * p, C))

    def _unpack(self, theta):
        C, p = self.n_classes, self.n_features
        v = theta.values
        return [v[: C * p].reshape(C, p), v[C * p:]]

    def _forward_loss(self, theta, Xb, yb):
        W, b = self._unpack(theta)
        return _cross_entropy(Xb @ W.T + b, yb)

    def gradient(self, client, theta, batch=None):
        Xb, yb = self._batch(client, batch)
        W, b = self._unpack(theta)
        P = _softmax(Xb @ W.T + b)
        P[np.arange(yb.size), yb] -= 1.0
        P /= yb.size
        gW = P.T @ Xb
        gb = P.sum(axis=0)
        g = np.concatenate([gW.ravel(), gb]) + self.l2_reg * theta.values
        return ParamVector(self.layout, g)


class MLPProblem(_DataProblem):
    """Fully connected tanh network with a softmax output layer.

    ``hidden`` lists hidden widths; the layout has one group per weight
    matrix and one per bias vector, in forward order.
    """

    def __init__(self, features, labels, partition, hidden: Sequence[int] = (32,), l2_reg=0.0,
                 n_classes=None):
        super().__init__(features, labels, partition, l2_reg, n_classes)
        if any(h < 1 for h in hidden):
            raise ConfigurationError("hidden widths must be positive")
        self.sizes = [self.n_features, *[int(h) for h in hidden], self.n_classes]
        groups = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            groups += [fan_out * fan_in, fan_out]
        self.layout = GroupLayout(tuple(groups))

    def _unpack(self, theta):
        v = theta.values
        out, off = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = v[off: off + fan_out * fan_in].reshape(fan_out, fan_in)
            off += fan_out * fan_in
            b = v[off: off + fan_out]
            off += fan_out
            out += [W, b]
        return out

    def init_params(self, rng):
        parts = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            parts.append(rng.standard_normal(fan_out * fan_in) / np.sqrt(fan_in))
            parts.append(np.zeros(fan_out))
        return ParamVector(self.layout, np.concatenate(parts))

    def _forward(self, params, Xb):
        acts = [Xb]
        h = Xb
        n_layers = len(params) // 2
        for layer in range(n_layers):
            W, b = params[2 * layer], params[2 * layer + 1]
            z = h @ W.T + b
            h = z if layer == n_layers - 1 else np.tanh(z)
            acts.append(h)
        return acts

    def _forward_loss(self, theta, Xb, yb):
        return _cross_entropy(self._forward(self._unpack(theta), Xb)[-1], yb)

    def gradient(self, client, theta, batch=None):
        Xb, yb = self._batch(client, batch)
        params = self._unpack(theta)
        acts = self._forward(params, Xb)
        delta = _softmax(acts[-1])
        delta[np.arange(yb.size), yb] -= 1.0
        delta /= yb.size
        n_layers = len(params) // 2
        grads: list[np.ndarray] = [None] * len(params)  # type: ignore[list-item]
        for layer in reversed(range(n_layers)):
            W = params[2 * layer]
            grads[2 * layer] = delta.T @ acts[layer]
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ W) * (1.0 - acts[layer] ** 2)
        g = np.concatenate([x.ravel() for x in grads]) + self.l2_reg * theta.values
        return ParamVector(self.layout, g)

    def describe(self):
        return {**super().describe(), "layer_sizes": self.sizes}


# --------------------------------------------------------------------------
# Data generation and partitioning
# --------------------------------------------------------------------------


def shard_partition(labels, n: int, rng: np.random.Generator) -> ClientPartition:
    """Sort by label, cut into ``2n`` shards, deal two shards per client.

    Shard boundaries are aligned to class boundaries whenever there are at
    most ``2n`` classes, so every shard is single-class and every client
    sees at most two classes. With more classes than shards the sorted
    order is cut into near-equal contiguous pieces instead.
    """
    y = np.asarray(labels)
    n_shards = 2 * n
    if n < 1:
        raise ConfigurationError("need at least one client")
    if y.size < n_shards:
        raise ConfigurationError(f"{y.size} samples cannot fill {n_shards} shards")
    order = np.argsort(y, kind="stable")
    classes, counts = np.unique(y, return_counts=True)

    if classes.size <= n_shards:
        alloc = _allocate_shards(counts, n_shards)
        shards, start = [], 0
        for count, k in zip(counts, alloc):
            shards.extend(np.array_split(order[start:start + count], k))
            start += count
    else:
        shards = np.array_split(order, n_shards)

    perm = rng.permutation(n_shards)
    return ClientPartition([
        np.sort(np.concatenate([shards[perm[2 * i]], shards[perm[2 * i + 1]]])) for i in range(n)
    ])


def _allocate_shards(counts: np.ndarray, n_shards: int) -> list[int]:
    # largest remainder, at least one shard per class, never more shards than samples
    quota = counts / counts.sum() * n_shards
    alloc = np.maximum(1, np.floor(quota)).astype(int)
    alloc = np.minimum(alloc, counts)
    while alloc.sum() > n_shards:
        j = int(np.argmax(np.where(alloc > 1, alloc - quota, -np.inf)))
        alloc[j] -= 1
    while alloc.sum() < n_shards:
        room = np.where(alloc < counts, quota - alloc, -np.inf)
        j = int(np.argmax(room))
        alloc[j] += 1
    return alloc.tolist()


def make_blobs(n_samples: int, n_features: int, n_classes: int, rng: np.random.Generator,
               separation: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian class clusters with unit covariance."""
    means = separation * rng.standard_normal((n_classes, n_features)) / np.sqrt(n_features)
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    X = means[labels] + rng.standard_normal((n_samples, n_features))
    return X, labels


def load_csv_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read rows of ``label,f0,f1,...`` (header required)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise ConfigurationError(f"{path}: first column must be 'label'")
        rows = [r for r in reader if r]
    if not rows:
        raise ConfigurationError(f"{path}: no samples")
    data = np.array(rows, dtype=np.float64)
    labels = data[:, 0]
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise ConfigurationError(f"{path}: labels must be nonnegative integers")
    return data[:, 1:], labels.astype(np.int64)


def make_logistic(n_clients: int, rng: np.random.Generator, n_samples: int = 2000, n_features: int = 10,
                  n_classes: int = 10, l2_reg: float = 1e-4, data=None) -> LogisticProblem:
    X, y = data if data is not None else make_blobs(n_samples, n_features, n_classes, rng)
    part = shard_partition(y, n_clients, rng)
    return LogisticProblem(X, y, part, l2_reg=l2_reg, n_classes=int(np.max(y)) + 1)


def make_mlp(n_clients: int, rng: np.random.Generator, n_samples: int = 2000, n_features: int = 10,
             n_classes: int = 10, hidden: Sequence[int] = (32,), l2_reg: float = 1e-4, data=None) -> MLPProblem:
    X, y = data if data is not None else make_blobs(n_samples, n_features, n_classes, rng)
    part = shard_partition(y, n_clients, rng)
    return MLPProblem(X, y, part, hidden=hidden, l2_reg=l2_reg, n_classes=int(np.max(y)) + 1)


# --------------------------------------------------------------------------
# Synthetic heterogeneous gradients
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientDistribution:
    kind: str  # "gaussian" or "laplace"
    scale: float = 0.01

    def __post_init__(self):
        if self.kind not in ("gaussian", "laplace"):
            raise ConfigurationError(f"unknown distribution {self.kind!r}")
        if self.scale <= 0:
            raise ConfigurationError("scale must be positive")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.normal(0.0, self.scale, size=shape)
        return rng.laplace(0.0, self.scale, size=shape)

    @property
    def variance(self) -> float:
        return self.scale ** 2 if self.kind == "gaussian" else 2.0 * self.scale ** 2


def strong_signal_block(client: int, n: int, d: int) -> slice:
    """Coordinates client ``client`` amplifies: the ``client``-th of ``n`` contiguous blocks."""
    return slice(client * d // n, (client + 1) * d // n)


def synth_client_gradients(dist: GradientDistribution, n: int, d: int, s: float,
                           rng: np.random.Generator, layout: GroupLayout | None = None) -> list[ParamVector]:
    """IID draws per client with the client's own block scaled by ``s``."""
    if s < 1:
        raise ConfigurationError("scale factor s must be >= 1")
    layout = layout or GroupLayout.single(d)
    g = dist.sample(rng, (n, d))
    if s != 1:
        for i in range(n):
            g[i, strong_signal_block(i, n, d)] *= s
    return [ParamVector(layout, g[i]) for i in range(n)]


# --------------------------------------------------------------------------
# Declarative construction
# --------------------------------------------------------------------------

PROBLEM_KINDS = ("quadratic", "logistic", "mlp")


@dataclass(frozen=True)
class ProblemSpec:
    """Everything needed to rebuild a problem deterministically from a seed."""

    kind: str = "quadratic"
    n: int = 8
    d: int = 16
    spread: float = 1.0
    noise_sigma: float = 0.0
    groups: tuple[int, ...] | None = None
    seed: int | None = None
    n_samples: int = 2000
    n_features: int = 10
    n_classes: int = 10
    hidden: tuple[int, ...] = (32,)
    l2_reg: float = 1e-4
    data_path: str | None = None

    def __post_init__(self):
        if self.kind not in PROBLEM_KINDS:
            raise ConfigurationError(f"problem.kind must be one of {PROBLEM_KINDS}, got {self.kind!r}")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError(f"problem.n must be an integer >= 1, got {self.n}")
        if self.kind == "quadratic" and (int(self.d) != self.d or self.d < 1):
            raise ConfigurationError(f"problem.d must be an integer >= 1, got {self.d}")
        if self.spread < 0:
            raise ConfigurationError("problem.spread must be nonnegative")
        if self.noise_sigma < 0:
            raise ConfigurationError("problem.noise_sigma must be nonnegative")
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(int(g) for g in self.groups))
            if self.kind == "quadratic" and sum(self.groups) != self.d:
                raise ConfigurationError(f"problem.groups sum to {sum(self.groups)}, expected d={self.d}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def build(self, rng: np.random.Generator) -> Problem:
        if self.kind == "quadratic":
            return make_quadratic(self.n, self.d, self.spread, rng, noise_sigma=self.noise_sigma,
                                  groups=self.groups)
        data = load_csv_dataset(self.data_path) if self.data_path else None
        if self.kind == "logistic":
            return make_logistic(self.n, rng, self.n_samples, self.n_features, self.n_classes,
                                 l2_reg=self.l2_reg, data=data)
        return make_mlp(self.n, rng, self.n_samples, self.n_features, self.n_classes,
                        hidden=self.hidden, l2_reg=self.l2_reg, data=data)
