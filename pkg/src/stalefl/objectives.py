"""Finite-sum objectives, gradient oracles, and synthetic heterogeneous data.

All objectives expose the same oracle interface (loss / gradient /
stochastic_gradient), either per client or for the global average objective
F(w) = (1/N) sum_i F_i(w). Objectives are immutable after construction and
safe to query from concurrent workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Sentinel client index for the global objective F = (1/N) sum F_i.
GLOBAL: int | None = None

# Master seed for the shared class cluster centers. Fixed so that only the
# swap fraction varies heterogeneity across grid cells.
DEFAULT_CENTER_SEED = 20240601


class DimensionMismatchError(ValueError):
    pass


def check_param(w: np.ndarray, dim: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (dim,):
        raise DimensionMismatchError(f"expected parameter of shape ({dim},), got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("parameter vector contains non-finite entries")
    return w


@dataclass(frozen=True)
class ObjectiveStats:
    """Empirical or exact smoothness/variance constants of an objective."""

    smoothness_L: float
    sg_sq: float      # data-heterogeneity variance bound
    sigma_sq: float   # stochastic-gradient variance bound


class Objective:
    """Base oracle interface shared by all objective kinds."""

    n_clients: int
    dim: int

    def loss(self, w: np.ndarray, client: int | None = GLOBAL) -> float:
        raise NotImplementedError

    def gradient(self, w: np.ndarray, client: int | None = GLOBAL) -> np.ndarray:
        raise NotImplementedError

    def stochastic_gradient(
        self,
        client: int,
        w: np.ndarray,
        batch_size: int,
        rng: np.random.Generator,
    ) -> np.ndarray:
        raise NotImplementedError

    def _check_client(self, client: int | None) -> None:
        if client is GLOBAL:
            return
        if not 0 <= client < self.n_clients:
            raise IndexError(f"client index {client} out of range [0, {self.n_clients})")


class QuadraticObjective(Objective):
    """Per-client positive-definite quadratics F_i(w) = 1/2 (w-c_i)' A_i (w-c_i).

    The stochastic oracle adds zero-mean isotropic Gaussian noise with total
    variance `noise_var` (E||g~ - g||^2 = noise_var) instead of sampling data;
    `noise_var=0` makes the oracle exact. `batch_size` is accepted for
    interface compatibility and ignored.
    """

    def __init__(
        self,
        hessians: list[np.ndarray] | np.ndarray,
        centers: list[np.ndarray] | np.ndarray,
        noise_var: float = 0.0,
    ):
        self.hessians = [np.asarray(a, dtype=float) for a in hessians]
        self.centers = [np.asarray(c, dtype=float) for c in centers]
        if len(self.hessians) != len(self.centers):
            raise ValueError("need one Hessian per center")
        if noise_var < 0:
            raise ValueError("noise_var must be >= 0")
        self.n_clients = len(self.hessians)
        self.dim = self.centers[0].shape[0]
        for a, c in zip(self.hessians, self.centers):
            if a.shape != (self.dim, self.dim) or c.shape != (self.dim,):
                raise DimensionMismatchError("inconsistent quadratic dimensions")
            if not np.allclose(a, a.T):
                raise ValueError("Hessians must be symmetric")
            if np.linalg.eigvalsh(a)[0] <= 0:
                raise ValueError("Hessians must be positive definite")
        self.noise_var = float(noise_var)

    @classmethod
    def isotropic(cls, centers: list, noise_var: float = 0.0) -> "QuadraticObjective":
        centers = [np.asarray(c, dtype=float) for c in centers]
        d = centers[0].shape[0]
        return cls([np.eye(d)] * len(centers), centers, noise_var)

    def loss(self, w: np.ndarray, client: int | None = GLOBAL) -> float:
        w = check_param(w, self.dim)
        self._check_client(client)
        if client is GLOBAL:
            return float(np.mean([self.loss(w, i) for i in range(self.n_clients)]))
        r = w - self.centers[client]
        return 0.5 * float(r @ self.hessians[client] @ r)

    def gradient(self, w: np.ndarray, client: int | None = GLOBAL) -> np.ndarray:
        w = check_param(w, self.dim)
        self._check_client(client)
        if client is GLOBAL:
            g = np.zeros(self.dim)
            for i in range(self.n_clients):
                g += self.gradient(w, i)
            return g / self.n_clients
        return self.hessians[client] @ (w - self.centers[client])

    def stochastic_gradient(self, client, w, batch_size, rng):
        g = self.gradient(w, client)
        if self.noise_var == 0.0:
            return g
        scale = math.sqrt(self.noise_var / self.dim)
        return g + rng.normal(0.0, scale, size=self.dim)

    def global_minimizer(self) -> np.ndarray:
        a_bar = np.mean(self.hessians, axis=0)
        b_bar = np.mean([a @ c for a, c in zip(self.hessians, self.centers)], axis=0)
        return np.linalg.solve(a_bar, b_bar)

    def smoothness(self) -> float:
        # Exact: max Hessian eigenvalue over clients.
        return max(float(np.linalg.eigvalsh(a)[-1]) for a in self.hessians)


@dataclass
class SyntheticDataset:
    """Per-client labelled samples with a two-group label-swap structure."""

    features: list[np.ndarray]    # per client, (n_i, d)
    labels: list[np.ndarray]      # per client, (n_i,) ints
    groups: np.ndarray            # per client, 1 or 2
    class_count: int
    swap_fraction: float
    class_pair: tuple[int, int]

    @property
    def n_clients(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features[0].shape[1]

    def export_csv(self, path: str | Path) -> None:
        d = self.feature_dim
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["client_id", "group"] + [f"feature_{j}" for j in range(d)] + ["label"])
            for i, (x, y) in enumerate(zip(self.features, self.labels)):
                for row, lab in zip(x, y):
                    wr.writerow([i, int(self.groups[i])] + [f"{v:.17g}" for v in row] + [int(lab)])


def _swap_labels(labels: np.ndarray, frac: float, pair: tuple[int, int]) -> np.ndarray:
    """Relabel floor(frac*m) samples of each class in `pair` to the other class."""
    a, b = pair
    out = labels.copy()
    original = labels.copy()
    for src, dst in ((a, b), (b, a)):
        idx = np.nonzero(original == src)[0]
        n_swap = int(math.floor(frac * len(idx)))
        out[idx[:n_swap]] = dst
    return out


def build_label_swap_dataset(
    n_clients: int,
    samples_per_client: int,
    swap_fraction: float,
    class_pair: tuple[int, int] = (0, 1),
    rng: np.random.Generator | None = None,
    *,
    class_count: int = 10,
    feature_dim: int = 10,
    cluster_std: float = 1.0,
    center_seed: int = DEFAULT_CENTER_SEED,
    group2: np.ndarray | list[int] | None = None,
) -> SyntheticDataset:
    """Gaussian cluster per class with fixed shared centers; group-2 clients get
    a fraction of the designated class pair relabeled.

    If `group2` is None, the second half of a seeded shuffle of clients forms
    group 2 (pass the low-participation client indices for grid consistency).
    """
    if not 0.0 <= swap_fraction <= 1.0:
        raise ValueError("swap_fraction must lie in [0, 1]")
    a, b = class_pair
    if a == b or not (0 <= a < class_count and 0 <= b < class_count):
        raise ValueError("class_pair must be two distinct valid class indices")
    if rng is None:
        rng = np.random.default_rng(0)

    # Centers are drawn once from the fixed master seed so that only
    # swap_fraction varies heterogeneity across experiments.
    center_rng = np.random.default_rng(center_seed)
    centers = center_rng.normal(0.0, 3.0, size=(class_count, feature_dim))

    groups = np.ones(n_clients, dtype=int)
    if group2 is None:
        order = rng.permutation(n_clients)
        groups[order[n_clients // 2:]] = 2
    else:
        groups[np.asarray(group2, dtype=int)] = 2

    features, labels = [], []
    for i in range(n_clients):
        y = rng.integers(0, class_count, size=samples_per_client)
        x = centers[y] + rng.normal(0.0, cluster_std, size=(samples_per_client, feature_dim))
        if groups[i] == 2:
            y = _swap_labels(y, swap_fraction, class_pair)
        features.append(x)
        labels.append(y.astype(int))
    return SyntheticDataset(features, labels, groups, class_count, swap_fraction, class_pair)


class SoftmaxObjective(Objective):
    """Multinomial logistic regression over a SyntheticDataset.

    Parameters are the flattened (class_count x (feature_dim+1)) weight matrix,
    bias in the last column. Per-client loss is the mean cross-entropy over
    that client's training samples.
    """

    def __init__(self, dataset: SyntheticDataset, holdout_fraction: float = 0.0):
        self.dataset = dataset
        self.n_clients = dataset.n_clients
        self.n_classes = dataset.class_count
        self.n_features = dataset.feature_dim
        self.dim = self.n_classes * (self.n_features + 1)
        self.train_x: list[np.ndarray] = []
        self.train_y: list[np.ndarray] = []
        self.test_x: list[np.ndarray] = []
        self.test_y: list[np.ndarray] = []
        for x, y in zip(dataset.features, dataset.labels):
            n_test = int(round(holdout_fraction * len(y)))
            n_train = len(y) - n_test
            if n_train < 1:
                raise ValueError("holdout_fraction leaves a client with no training data")
            self.train_x.append(np.hstack([x[:n_train], np.ones((n_train, 1))]))
            self.train_y.append(y[:n_train])
            self.test_x.append(np.hstack([x[n_train:], np.ones((n_test, 1))]))
            self.test_y.append(y[n_train:])

    def _unpack(self, w: np.ndarray) -> np.ndarray:
        return w.reshape(self.n_classes, self.n_features + 1)

    @staticmethod
    def _log_softmax(z: np.ndarray) -> np.ndarray:
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def _client_loss(self, w_mat: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        logp = self._log_softmax(x @ w_mat.T)
        return float(-logp[np.arange(len(y)), y].mean())

    def _client_grad(self, w_mat: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        logp = self._log_softmax(x @ w_mat.T)
        p = np.exp(logp)
        p[np.arange(len(y)), y] -= 1.0
        return (p.T @ x) / len(y)

    def loss(self, w: np.ndarray, client: int | None = GLOBAL) -> float:
        w = check_param(w, self.dim)
        self._check_client(client)
        w_mat = self._unpack(w)
        if client is GLOBAL:
            return float(np.mean([
                self._client_loss(w_mat, x, y) for x, y in zip(self.train_x, self.train_y)
            ]))
        return self._client_loss(w_mat, self.train_x[client], self.train_y[client])

    def gradient(self, w: np.ndarray, client: int | None = GLOBAL) -> np.ndarray:
        w = check_param(w, self.dim)
        self._check_client(client)
        w_mat = self._unpack(w)
        if client is GLOBAL:
            g = np.zeros_like(w_mat)
            for x, y in zip(self.train_x, self.train_y):
                g += self._client_grad(w_mat, x, y)
            return (g / self.n_clients).ravel()
        return self._client_grad(w_mat, self.train_x[client], self.train_y[client]).ravel()

    def stochastic_gradient(self, client, w, batch_size, rng):
        w = check_param(w, self.dim)
        self._check_client(client)
        x, y = self.train_x[client], self.train_y[client]
        n = len(y)
        if n == 0:
            raise ValueError(f"client {client} has an empty dataset")
        if not 1 <= batch_size <= n:
            raise ValueError(f"batch_size must be in [1, {n}]")
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        return self._client_grad(self._unpack(w), x[idx], y[idx]).ravel()

    def test_accuracy(self, w: np.ndarray) -> float:
        w_mat = self._unpack(check_param(w, self.dim))
        hits = total = 0
        for x, y in zip(self.test_x, self.test_y):
            if len(y) == 0:
                continue
            pred = np.argmax(x @ w_mat.T, axis=1)
            hits += int((pred == y).sum())
            total += len(y)
        if total == 0:
            raise ValueError("no held-out samples available")
        return hits / total


def estimate_stats(
    obj: Objective,
    probe_points: list[np.ndarray],
    *,
    rng: np.random.Generator | None = None,
    batch_size: int = 1,
    n_noise_draws: int = 32,
) -> ObjectiveStats:
    """Empirical smoothness and variance constants from probe points.

    L-hat is the max pairwise gradient difference ratio over probes and
    clients (exact max Hessian eigenvalue for quadratics); sg_sq is the max
    over probes/clients of ||grad_i - grad||^2; sigma_sq is the max empirical
    batch-gradient variance around the full gradient.
    """
    if len(probe_points) < 2:
        raise ValueError("need at least 2 probe points")
    probes = [check_param(np.asarray(p, dtype=float), obj.dim) for p in probe_points]
    if rng is None:
        rng = np.random.default_rng(0)

    if isinstance(obj, QuadraticObjective):
        smoothness = obj.smoothness()
    else:
        smoothness = 0.0
        for i in range(obj.n_clients):
            grads = [obj.gradient(p, i) for p in probes]
            for a in range(len(probes)):
                for b in range(a + 1, len(probes)):
                    du = float(np.linalg.norm(probes[a] - probes[b]))
                    if du > 0:
                        dg = float(np.linalg.norm(grads[a] - grads[b]))
                        smoothness = max(smoothness, dg / du)

    sg_sq = 0.0
    for p in probes:
        g_global = obj.gradient(p, GLOBAL)
        for i in range(obj.n_clients):
            sg_sq = max(sg_sq, float(np.sum((obj.gradient(p, i) - g_global) ** 2)))

    sigma_sq = 0.0
    for p in probes:
        for i in range(obj.n_clients):
            g_full = obj.gradient(p, i)
            dev = np.mean([
                np.sum((obj.stochastic_gradient(i, p, batch_size, rng) - g_full) ** 2)
                for _ in range(n_noise_draws)
            ])
            sigma_sq = max(sigma_sq, float(dev))
    return ObjectiveStats(smoothness, sg_sq, sigma_sq)
