"""Bidirectional GAN with a Gaussian-mixture latent prior.

The generator maps latents to data (``p -> 64 -> 128 -> d``, tanh output),
the encoder maps data to latents (``d -> 64 -> p``) and the discriminator
scores concatenated ``(x, z)`` pairs.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gmm
from .data import Normalizer
from .nn import AdamState, LayerSpec, Net, adam_step, bce_from_output, make_rng

CKPT_MAGIC = b"NEGM-CKPT"
CKPT_VERSION = 1


class NotTrainedError(RuntimeError):
    pass


class TrainingError(FloatingPointError):
    def __init__(self, epoch, batch, what):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 50
    latent_dim: int = 32
    step_size: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    d_step_size: float | None = None
    d_batch_norm: bool = True
    prior: str = "mixture"
    warmup_epochs: int = 50
    refit_interval: int = 50
    em_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "latent_dim", "refit_interval", "em_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0")
        if self.prior not in ("mixture", "unimodal"):
            raise ValueError("prior must be 'mixture' or 'unimodal'")


def generator_specs(p, d):
    return [
        LayerSpec(p, 64, "lrelu"),
        LayerSpec(64, 128, "lrelu"),
        LayerSpec(128, d, "tanh"),
    ]


def encoder_specs(d, p):
    return [LayerSpec(d, 64, "lrelu"), LayerSpec(64, p, "linear")]


def discriminator_specs(d, p, batch_norm=True):
    return [
        LayerSpec(d + p, 128, "lrelu", batch_norm=batch_norm, dropout_rate=0.5),
        LayerSpec(128, 128, "lrelu", batch_norm=batch_norm, dropout_rate=0.5),
        LayerSpec(128, 1, "sigmoid"),
    ]


class BiganModel:
    def __init__(self, d, p=32, seed=0, d_batch_norm=True):
        self.d = d
        self.p = p
        rng = make_rng([seed, 0])
        self.generator = Net(generator_specs(p, d), rng, "generator")
        self.encoder = Net(encoder_specs(d, p), rng, "encoder")
        self.discriminator = Net(discriminator_specs(d, p, d_batch_norm), rng, "discriminator")
        self.trained = False

    @property
    def nets(self):
        return {"generator": self.generator, "encoder": self.encoder,
                "discriminator": self.discriminator}

    def _check(self, x, width, what):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != width:
            raise ValueError(f"{what}: expected width {width}, got shape {x.shape}")
        return x

    def encode(self, x):
        if not self.trained:
            raise NotTrainedError("model has not been trained")
        x = self._check(x, self.d, "encode")
        if len(x) == 0:
            return np.zeros((0, self.p))
        return self.encoder(x)

    def generate(self, z):
        z = self._check(z, self.p, "generate")
        if len(z) == 0:
            return np.zeros((0, self.d))
        return self.generator(z)

    def reconstruct(self, x):
        return self.generate(self.encode(x))

    def discriminate(self, x, z):
        return self.discriminator(np.hstack([x, z]))[:, 0]


@dataclass
class History:
    d_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)
    e_loss: list = field(default_factory=list)
    d_real: list = field(default_factory=list)
    d_fake: list = field(default_factory=list)
    last_epoch_batches: list = field(default_factory=list)

    def __len__(self):
        return len(self.d_loss)

    def rows(self):
        return [
            {"epoch": i, "d_loss": self.d_loss[i], "g_loss": self.g_loss[i],
             "e_loss": self.e_loss[i], "d_real": self.d_real[i], "d_fake": self.d_fake[i]}
            for i in range(len(self))
        ]


def _fit_prior(model, x, K, config, epoch):
    z = model.encoder(x)
    res = gmm.fit_em(z, K, max_iter=config.em_iters, seed=[config.seed, 3, epoch])
    return res.prior


def train_step(model, x, z, opt, rng):
    """One discriminator update followed by one generator/encoder update.

    Real pairs ``(x, E(x))`` and fake pairs ``(G(z), z)`` go through the
    discriminator as one batch so batch norm shares statistics across both.
    Returns ``(d_loss, g_loss, e_loss, mean D(x, E(x)), mean D(G(z), z))``.
    """
    d = model.d
    m = len(x)
    G, E, D = model.generator, model.encoder, model.discriminator
    ex, cache_e = E.forward(x, training=True, rng=rng)
    gz, cache_g = G.forward(z, training=True, rng=rng)
    pairs = np.vstack([np.hstack([x, ex]), np.hstack([gz, z])])

    out, cache = D.forward(pairs, training=True, rng=rng)
    l_real, g_real = bce_from_output(out[:m], 1)
    l_fake, g_fake = bce_from_output(out[m:], 0)
    grads_d, _ = D.backward(cache, np.vstack([g_real, g_fake]) / 2)
    adam_step(D.params, grads_d, opt["discriminator"])
    D.bump_version()

    out2, cache2 = D.forward(pairs, training=True, rng=rng)
    e_loss, g_e = bce_from_output(out2[:m], 0)
    g_loss, g_g = bce_from_output(out2[m:], 1)
    _, g_in = D.backward(cache2, np.vstack([g_e, g_g]))
    grads_e, _ = E.backward(cache_e, g_in[:m, d:])
    grads_g, _ = G.backward(cache_g, g_in[m:, :d])
    adam_step(E.params, grads_e, opt["encoder"])
    adam_step(G.params, grads_g, opt["generator"])
    E.bump_version()
    G.bump_version()
    return (l_real + l_fake) / 2, g_loss, e_loss, float(out[:m].mean()), float(out[m:].mean())


def train(train_data, config: TrainConfig, model=None, callback=None):
    """Adversarially train a :class:`BiganModel` on ``train_data``.

    ``train_data`` is a FeatureMatrix (or array) scaled into [-1, 1].  With the
    mixture prior, the first ``warmup_epochs`` use a standard normal prior;
    then a mixture with one component per known class is fitted on the
    encodings and refreshed every ``refit_interval`` epochs.  A final prior is
    fitted on the trained encoder's output.

    Returns ``(model, prior, history)``.
    """
    x_all = np.asarray(getattr(train_data, "data", train_data), dtype=np.float64)
    labels = getattr(train_data, "labels", None)
    K = len(set(labels.tolist())) if labels is not None else 1
    n, d = x_all.shape
    p = config.latent_dim
    if model is None:
        model = BiganModel(d, p, seed=config.seed, d_batch_norm=config.d_batch_norm)
    if (model.d, model.p) != (d, p):
        raise ValueError("model shape does not match data/config")
    rng = make_rng([config.seed, 1])
    opt = {
        name: AdamState(config.step_size, config.beta1, config.beta2, config.epsilon)
        for name in model.nets
    }
    if config.d_step_size is not None:
        opt["discriminator"].step_size = config.d_step_size
    use_mixture = config.prior == "mixture"
    prior = gmm.MixturePrior.standard_normal(p)
    history = History()
    bs = config.batch_size
    for epoch in range(config.epochs):
        if use_mixture and epoch >= config.warmup_epochs and (
            (epoch - config.warmup_epochs) % config.refit_interval == 0
        ):
            prior = _fit_prior(model, x_all, K, config, epoch)
        order = rng.permutation(n)
        stats = []
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            z, _ = gmm.sample_prior(prior, len(idx), rng)
            row = train_step(model, x_all[idx], z, opt, rng)
            if not np.all(np.isfinite(row[:3])):
                raise TrainingError(epoch, b, "loss")
            stats.append(row)
        stats = np.array(stats)
        history.d_loss.append(float(stats[:, 0].mean()))
        history.g_loss.append(float(stats[:, 1].mean()))
        history.e_loss.append(float(stats[:, 2].mean()))
        history.d_real.append(float(stats[:, 3].mean()))
        history.d_fake.append(float(stats[:, 4].mean()))
        if epoch == config.epochs - 1:
            history.last_epoch_batches = stats[:, 3:5].tolist()
        if callback is not None:
            callback(epoch, history)
    model.trained = True
    if use_mixture:
        prior = _fit_prior(model, x_all, K, config, config.epochs)
    return model, prior, history


def encode(model, x):
    return model.encode(x)


def generate(model, z):
    return model.generate(z)


def reconstruct(model, x):
    return model.reconstruct(x)


def save_checkpoint(path, model: BiganModel, prior: gmm.MixturePrior,
                    normalizer: Normalizer | None = None, extras=None, meta=None):
    """Write model, prior, normalizer and optional extra arrays.

    Layout: ``NEGM-CKPT`` magic, u32 version, u32 header length, UTF-8 JSON
    header, then little-endian float64 blocks in the order the header lists.
    """
    blocks = []
    for net_name, net in model.nets.items():
        for k, v in net.state().items():
            blocks.append((f"{net_name}/{k}", v))
    blocks += [("prior/weights", prior.weights), ("prior/means", prior.means),
               ("prior/factors", prior.factors)]
    if normalizer is not None and normalizer.fitted:
        blocks += [("normalizer/lo", normalizer.lo), ("normalizer/hi", normalizer.hi)]
    for k, v in (extras or {}).items():
        blocks.append((f"extra/{k}", np.asarray(v, dtype=np.float64)))
    header = {
        "d": model.d,
        "p": model.p,
        "K": prior.n_components,
        "trained": model.trained,
        "layers": {name: [s.to_dict() for s in net.specs] for name, net in model.nets.items()},
        "blocks": [{"name": k, "shape": list(np.shape(v))} for k, v in blocks],
        "meta": meta or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hdr)))
        fh.write(hdr)
        for _, v in blocks:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    model: BiganModel
    prior: gmm.MixturePrior
    normalizer: Normalizer | None
    extras: dict
    meta: dict

    def __iter__(self):
        return iter((self.model, self.prior, self.normalizer))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    m = len(CKPT_MAGIC)
    if raw[:m] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < m + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, m)
    if version > CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = m + 8
    if len(raw) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    off += hlen
    arrays = {}
    for blk in header["blocks"]:
        shape = tuple(blk["shape"])
        count = int(np.prod(shape)) if shape else 1
        if len(raw) < off + 8 * count:
            raise CheckpointError(f"{path}: truncated block {blk['name']}")
        arrays[blk["name"]] = np.frombuffer(raw, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    try:
        d_bn = bool(header["layers"]["discriminator"][0]["batch_norm"])
    except (KeyError, IndexError, TypeError):
        raise CheckpointError(f"{path}: header lacks the discriminator layout") from None
    model = BiganModel(header["d"], header["p"], d_batch_norm=d_bn)
    for name, specs in header["layers"].items():
        net = model.nets[name]
        if [s.to_dict() for s in net.specs] != specs:
            raise CheckpointError(f"{path}: layer layout of {name} does not match this version")
        net.load_state({k.split("/", 1)[1]: v for k, v in arrays.items()
                        if k.startswith(name + "/")})
    model.trained = bool(header["trained"])
    prior = gmm.MixturePrior(arrays["prior/weights"], arrays["prior/means"], arrays["prior/factors"])
    normalizer = None
    if "normalizer/lo" in arrays:
        normalizer = Normalizer(arrays["normalizer/lo"], arrays["normalizer/hi"])
    extras = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("extra/")}
    return Checkpoint(model, prior, normalizer, extras, header.get("meta", {}))


def config_dict(config: TrainConfig):
    return asdict(config)
