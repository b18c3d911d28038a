"""I-means: streaming assignment of flagged points to existing clusters or to
newly spawned ones, driven by per-cluster Beta-Bernoulli MAP estimates.

Each cluster ``k`` carries warm-up prior counts ``(a0, b0)`` and online
counts ``(a, b)``; ``theta_k = (a0 + a) / (a0 + a + b0 + b)`` is the chance
that a point whose nearest mean is ``k`` starts a new cluster.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import make_rng


@dataclass
class ClusterState:
    mean: np.ndarray
    v: np.ndarray
    count: int
    origin: str = "known"

    @property
    def sigma(self):
        if self.count < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.v / (self.count - 1))


@dataclass
class BetaParams:
    a0: int = 0
    b0: int = 0
    a: int = 0
    b: int = 0


def theta_map(params: BetaParams):
    num = params.a0 + params.a
    den = num + params.b0 + params.b
    if den <= 0:
        raise ValueError("all Beta counts are zero; run the warm-up first")
    return num / den


def update_known(cluster: ClusterState, x):
    """Welford step: fold ``x`` into the cluster's running mean and spread."""
    i = cluster.count + 1
    delta = x - cluster.mean
    mean = cluster.mean + delta / i
    v = cluster.v + delta * (x - mean)
    return ClusterState(mean, v, i, cluster.origin)


@dataclass
class Decision:
    index: int
    nearest: int
    distance: float
    spawned: bool
    cluster: int


@dataclass
class IMeansConfig:
    warmup_size: int = 200
    rule: str = "spawn-theta"
    gate: bool = True
    hold_outliers: bool = False
    min_size: int = 1
    sigma_multiplier: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.rule not in ("spawn-theta", "join-theta"):
            raise ValueError("rule must be 'spawn-theta' or 'join-theta'")
        if self.warmup_size < 0:
            raise ValueError("warmup_size must be >= 0")
        if self.hold_outliers and not self.gate:
            raise ValueError("hold_outliers needs the gate: without it no point would ever join")
        if self.min_size < 1:
            raise ValueError("min_size must be >= 1")


class IMeans:
    """Streaming cluster-count estimator.

    ``rule="spawn-theta"`` spawns with probability theta; ``rule="join-theta"``
    spawns with probability ``1 - theta``.  With ``gate`` on, a point lying
    inside the three-sigma radius of its nearest cluster always joins it and
    only outlying points face the Bernoulli draw.  With ``hold_outliers`` an
    outlying point that does not spawn is left unassigned (``cluster`` is -1)
    and counts as outlier evidence for its nearest cluster instead of being
    merged into it.

    ``k_new`` counts spawned clusters holding at least ``min_size`` points,
    so with ``min_size > 1`` a spawn only counts once others have joined it.
    """

    def __init__(self, clusters, config: IMeansConfig | None = None):
        if not clusters:
            raise ValueError("at least one initial cluster is required")
        self.config = config or IMeansConfig()
        self.clusters = list(clusters)
        self.beta = [BetaParams() for _ in self.clusters]
        self.k0 = len(self.clusters)
        self.confirmed = []
        self.warmup_seen = 0
        self.warmed_up = False
        self.rng = make_rng([self.config.seed, 11])
        self._means = np.array([c.mean for c in self.clusters], dtype=np.float64)
        norms = [np.linalg.norm(c.sigma) for c in self.clusters if c.count >= 2]
        self.reference_radius = float(np.median(norms)) if norms else 0.0

    @classmethod
    def from_labeled(cls, points, labels, class_names=None, config=None):
        """One cluster per class with that class's mean, spread and size."""
        points = np.asarray(points, dtype=np.float64)
        labels = np.asarray(labels).astype(str)
        if class_names is None:
            class_names = list(dict.fromkeys(labels.tolist()))
        if not class_names:
            raise ValueError("empty class list")
        clusters = []
        for c in class_names:
            rows = points[labels == c]
            if len(rows) == 0:
                raise ValueError(f"class {c!r} has no points")
            mean = rows.mean(axis=0)
            v = ((rows - mean) ** 2).sum(axis=0)
            if len(rows) < 2:
                warnings.warn(f"class {c!r} has one member; its spread is zero", stacklevel=2)
            clusters.append(ClusterState(mean, v, len(rows)))
        return cls(clusters, config)

    @property
    def n_clusters(self):
        return len(self.clusters)

    @property
    def k_new(self):
        return len(self.confirmed)

    @property
    def n_spawned(self):
        return len(self.clusters) - self.k0

    def _confirm(self, k):
        if k >= self.k0 and self.clusters[k].count == self.config.min_size:
            self.confirmed.append(k)

    def nearest_cluster(self, x):
        d = np.sqrt(((self._means - x) ** 2).sum(axis=1))
        idx = int(np.argmin(d))
        return float(d[idx]), idx

    def theta(self, k):
        return theta_map(self.beta[k])

    def radius(self, k):
        c = self.clusters[k]
        s = np.linalg.norm(c.sigma) if c.count >= 2 else self.reference_radius
        return self.config.sigma_multiplier * s

    def _outlying(self, k, dist):
        c = self.clusters[k]
        if c.count < 2 and c.origin == "known":
            return dist > 0.0
        return dist > self.radius(k)

    def warmup(self, points, finalize=True):
        """Three-sigma counting into the prior counts of the nearest cluster.

        With ``finalize`` set, clusters that received no warm-up point take
        the rounded average prior of those that did, so every cluster has a
        defined theta.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(points) == 0:
            raise ValueError("warm-up set is empty")
        for x in points:
            dist, k = self.nearest_cluster(x)
            if self._outlying(k, dist):
                self.beta[k].a0 += 1
            else:
                self.beta[k].b0 += 1
        self.warmup_seen += len(points)
        self.warmed_up = True
        if finalize:
            self._fill_empty_priors()
        return self

    def _fill_empty_priors(self):
        seen = [b for b in self.beta if b.a0 + b.b0 > 0]
        if not seen:
            return
        a0 = int(round(np.mean([b.a0 for b in seen])))
        b0 = int(round(np.mean([b.b0 for b in seen])))
        if a0 + b0 == 0:
            a0, b0 = (1, 0) if np.mean([b.a0 for b in seen]) > np.mean([b.b0 for b in seen]) else (0, 1)
        for b in self.beta:
            if b.a0 + b.b0 == 0:
                b.a0, b.b0 = a0, b0

    def spawn_prior(self):
        known = [b.b0 for b, c in zip(self.beta, self.clusters) if c.origin == "known"]
        return BetaParams(a0=1, b0=int(round(np.mean(known))) if known else 0)

    def process_instance(self, x, index=0):
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite point")
        dist, k = self.nearest_cluster(x)
        theta = self.theta(k)
        u = self.rng.random()
        outlying = not self.config.gate or self._outlying(k, dist)
        if not outlying:
            spawn = False
        elif self.config.rule == "spawn-theta":
            spawn = u < theta
        else:
            spawn = not u <= theta
        if spawn:
            self.beta[k].a += 1
            self.clusters.append(ClusterState(x.copy(), np.zeros_like(x), 1, "spawned"))
            self.beta.append(self.spawn_prior())
            self._means = np.vstack([self._means, x])
            target = len(self.clusters) - 1
            self._confirm(target)
        elif self.config.hold_outliers and outlying:
            self.beta[k].a += 1
            target = -1
        else:
            self.beta[k].b += 1
            self.clusters[k] = update_known(self.clusters[k], x)
            self._means[k] = self.clusters[k].mean
            target = k
            self._confirm(k)
        return Decision(index, k, dist, spawn, target)

    def run_batch(self, points):
        """Process rows in order; returns ``(k_new delta, decisions)``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, self._means.shape[1])
        before = self.k_new
        decisions = [self.process_instance(x, i) for i, x in enumerate(points)]
        return self.k_new - before, decisions

    def feed(self, points):
        """Stream entry point: the first ``warmup_size`` points ever fed set
        the prior counts; later points are clustered.

        Returns ``(k_new delta, decisions)`` for the clustered part.
        """
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points.reshape(0, self._means.shape[1]) if len(points) == 0 else points[None]
        need = max(0, self.config.warmup_size - self.warmup_seen)
        if need and len(points):
            self.warmup(points[:need], finalize=len(points) >= need)
            rest = points[need:]
            offset = min(need, len(points))
        else:
            rest, offset = points, 0
        if len(rest) == 0:
            return 0, []
        if not self.warmed_up:
            raise ValueError("no warm-up data seen yet")
        delta, decisions = self.run_batch(rest)
        for d in decisions:
            d.index += offset
        return delta, decisions

    def to_json(self):
        return json.dumps({
            "config": self.config.__dict__,
            "k0": self.k0,
            "k_new": self.k_new,
            "confirmed": self.confirmed,
            "warmup_seen": self.warmup_seen,
            "warmed_up": self.warmed_up,
            "reference_radius": self.reference_radius,
            "clusters": [
                {"mean": c.mean.tolist(), "v": c.v.tolist(), "sigma": c.sigma.tolist(),
                 "count": c.count, "origin": c.origin, "beta": b.__dict__}
                for c, b in zip(self.clusters, self.beta)
            ],
            "rng": self.rng.bit_generator.state,
        })

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        clusters = [ClusterState(np.array(c["mean"]), np.array(c["v"]), c["count"], c["origin"])
                    for c in obj["clusters"]]
        state = cls(clusters, IMeansConfig(**obj["config"]))
        state.beta = [BetaParams(**c["beta"]) for c in obj["clusters"]]
        state.k0 = obj["k0"]
        state.confirmed = list(obj["confirmed"])
        state.warmup_seen = obj["warmup_seen"]
        state.warmed_up = obj["warmed_up"]
        state.reference_radius = obj["reference_radius"]
        state.rng.bit_generator.state = obj["rng"]
        return state


def three_sigma_coverage(points, mean, sigma, multipliers=(1, 2, 3)):
    """Share of ``points`` within ``m * ||sigma||`` of ``mean`` for each ``m``."""
    d = np.linalg.norm(np.asarray(points) - mean, axis=1)
    s = np.linalg.norm(sigma)
    return {m: float(np.mean(d <= m * s)) for m in multipliers}

