"""Small dense-network substrate: layers, reverse-mode gradients and Adam.

Everything runs in float64 on numpy arrays.  Randomness (weight init,
dropout masks, latent draws) always comes from an explicit
``numpy.random.Generator`` so a fixed seed reproduces a run exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("linear", "lrelu", "tanh", "sigmoid")
BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class ShapeError(ValueError):
    """Input width does not match the layer it is fed to."""


class StaleCacheError(RuntimeError):
    """A cache is reused after the parameters it was computed with changed."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_standard_normal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    return rng.standard_normal((rows, cols))


def sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: str = "linear"
    slope: float = 0.2
    batch_norm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation == "lrelu" and not 0.0 < self.slope < 1.0:
            raise ValueError("lrelu slope must lie in (0, 1)")

    def to_dict(self):
        return {
            "input_width": self.input_width,
            "output_width": self.output_width,
            "activation": self.activation,
            "slope": self.slope,
            "batch_norm": self.batch_norm,
            "dropout_rate": self.dropout_rate,
        }


def _activate(spec, h):
    if spec.activation == "linear":
        return h
    if spec.activation == "lrelu":
        return np.maximum(h, spec.slope * h)
    if spec.activation == "tanh":
        return np.tanh(h)
    return sigmoid(h)


def _activation_grad(spec, h, out, g):
    if spec.activation == "linear":
        return g
    if spec.activation == "lrelu":
        return np.where(h > 0, g, spec.slope * g)
    if spec.activation == "tanh":
        return g * (1.0 - out * out)
    return g * out * (1.0 - out)


def init_weights(rng, fan_in, fan_out, scheme="glorot"):
    """``glorot``: uniform with limit sqrt(6 / (fan_in + fan_out));
    ``he``: normal with std sqrt(2 / fan_in)."""
    if scheme == "glorot":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))
    if scheme == "he":
        return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
    raise ValueError(f"unknown init scheme {scheme!r}")


@dataclass
class Cache:
    net_id: int
    version: int
    records: list = field(default_factory=list)
    output: np.ndarray | None = None


class Net:
    """A stack of dense layers.

    Each layer computes ``dropout(act(bn(x @ W + b)))``.  Parameters live in
    ``self.params`` keyed ``"<layer>.W"``, ``"<layer>.b"`` and, for batch-norm
    layers, ``"<layer>.gamma"`` / ``"<layer>.beta"``.  Running batch-norm
    statistics are buffers, not parameters.
    """

    def __init__(self, specs, rng=None, name="net", init="glorot"):
        specs = list(specs)
        if not specs:
            raise ValueError("a net needs at least one layer")
        for prev, nxt in zip(specs, specs[1:]):
            if prev.output_width != nxt.input_width:
                raise ShapeError(
                    f"{name}: layer widths do not chain ({prev.output_width} -> {nxt.input_width})"
                )
        self.specs = specs
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.version = 0
        for i, spec in enumerate(specs):
            if rng is None:
                W = np.zeros((spec.input_width, spec.output_width))
            else:
                W = init_weights(rng, spec.input_width, spec.output_width, init)
            self.params[f"{i}.W"] = W
            self.params[f"{i}.b"] = np.zeros(spec.output_width)
            if spec.batch_norm:
                self.params[f"{i}.gamma"] = np.ones(spec.output_width)
                self.params[f"{i}.beta"] = np.zeros(spec.output_width)
                self.buffers[f"{i}.mean"] = np.zeros(spec.output_width)
                self.buffers[f"{i}.var"] = np.ones(spec.output_width)

    @property
    def input_width(self):
        return self.specs[0].input_width

    @property
    def output_width(self):
        return self.specs[-1].output_width

    def param_names(self):
        return list(self.params)

    def bump_version(self):
        self.version += 1

    def __call__(self, x):
        return self.forward(x, training=False)[0]

    def forward(self, x, training=False, rng=None, batch_stats=None):
        """Run the net; returns ``(output, cache)``.

        In training mode dropout draws masks from ``rng`` and batch norm uses
        batch statistics, refreshing the running averages.  ``batch_stats``
        overrides the batch-norm choice alone, so a frozen net can keep
        dropout active while normalizing with its running averages.
        """
        if batch_stats is None:
            batch_stats = training
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"{self.name}: expected a 2-D batch, got shape {x.shape}")
        cache = Cache(id(self), self.version)
        for i, spec in enumerate(self.specs):
            if x.shape[1] != spec.input_width:
                raise ShapeError(
                    f"{self.name} layer {i}: expected width {spec.input_width}, got {x.shape[1]}"
                )
            rec = {"x": x}
            h = x @ self.params[f"{i}.W"] + self.params[f"{i}.b"]
            if spec.batch_norm:
                if batch_stats:
                    n = h.shape[0]
                    if n < 2:
                        raise ValueError(
                            f"{self.name} layer {i}: batch norm needs >= 2 rows in training mode"
                        )
                    mu = h.sum(axis=0) / n
                    c = h - mu
                    var = np.einsum("ij,ij->j", c, c) / n
                    m = BN_MOMENTUM
                    self.buffers[f"{i}.mean"] = m * self.buffers[f"{i}.mean"] + (1 - m) * mu
                    self.buffers[f"{i}.var"] = m * self.buffers[f"{i}.var"] + (1 - m) * var
                else:
                    mu = self.buffers[f"{i}.mean"]
                    var = self.buffers[f"{i}.var"]
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (h - mu) * inv_std
                rec.update(xhat=xhat, inv_std=inv_std, bn_training=batch_stats)
                h = self.params[f"{i}.gamma"] * xhat + self.params[f"{i}.beta"]
            rec["h"] = h
            out = _activate(spec, h)
            rec["a"] = out
            if training and spec.dropout_rate > 0.0:
                if rng is None:
                    raise ValueError(f"{self.name} layer {i}: dropout needs an rng in training mode")
                keep = 1.0 - spec.dropout_rate
                mask = (rng.random(out.shape) < keep) / keep
                rec["mask"] = mask
                out = out * mask
            cache.records.append(rec)
            x = out
        cache.output = x
        return x, cache

    def backward(self, cache, grad_out):
        """Return ``(param_grads, input_grad)`` for a cache from :meth:`forward`."""
        if cache.net_id != id(self) or cache.version != self.version:
            raise StaleCacheError(f"{self.name}: cache does not match current parameters")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != cache.output.shape:
            raise ShapeError(
                f"{self.name}: output gradient shape {g.shape} != output shape {cache.output.shape}"
            )
        grads = {}
        for i in range(len(self.specs) - 1, -1, -1):
            spec = self.specs[i]
            rec = cache.records[i]
            if "mask" in rec:
                g = g * rec["mask"]
            g = _activation_grad(spec, rec["h"], rec["a"], g)
            if spec.batch_norm:
                xhat = rec["xhat"]
                grads[f"{i}.gamma"] = (g * xhat).sum(axis=0)
                grads[f"{i}.beta"] = g.sum(axis=0)
                gx = g * self.params[f"{i}.gamma"]
                if rec["bn_training"]:
                    n = g.shape[0]
                    g = rec["inv_std"] / n * (
                        n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0)
                    )
                else:
                    g = gx * rec["inv_std"]
            grads[f"{i}.W"] = rec["x"].T @ g
            grads[f"{i}.b"] = g.sum(axis=0)
            g = g @ self.params[f"{i}.W"].T
        return grads, g

    def state(self):
        """Parameters and buffers in a fixed order, for serialization."""
        out = {f"param:{k}": v for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def load_state(self, state):
        for k, v in state.items():
            kind, name = k.split(":", 1)
            target = self.params if kind == "param" else self.buffers
            if name not in target or target[name].shape != v.shape:
                raise ShapeError(f"{self.name}: unexpected state entry {k} with shape {v.shape}")
            target[name] = np.array(v, dtype=np.float64)
        self.bump_version()

    def copy(self):
        other = Net(self.specs, rng=None, name=self.name)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other


@dataclass
class AdamState:
    step_size: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    timestep: int = 0

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


def adam_step(params, grads, state: AdamState):
    """Apply one bias-corrected Adam update to ``params`` in place.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves both params and state untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != np.shape(g):
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.timestep += 1
    t = state.timestep
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            v = np.zeros_like(params[name])
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        params[name] -= state.step_size * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    return params, state


def bce_from_output(out, target):
    """Mean binary cross-entropy of sigmoid outputs and d(loss)/d(out)."""
    o = np.clip(out, 1e-300, 1.0)
    q = np.clip(1.0 - out, 1e-300, 1.0)
    n = out.shape[0]
    if target == 1:
        return float(-np.log(o).mean()), -1.0 / o / n
    return float(-np.log(q).mean()), 1.0 / q / n
