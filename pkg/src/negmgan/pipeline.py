"""End-to-end orchestration: data preparation, offline training, online
detection over a test stream, and evaluation against held-out truth.

The online loop sees only feature rows.  Ground truth is rebuilt from the
run configuration inside :func:`cmd_eval`.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bigan, gmm
from .data import (
    SplitSpec,
    SyntheticSpec,
    build_splits,
    encode,
    generate_synthetic,
    kdd99_schema,
    load_csv,
    load_matrix,
    normalize,
    save_matrix,
)
from .imeans import IMeans, IMeansConfig
from .metrics import f1_unknown, rmse, s_r2
from .ucs import (
    ThresholdPolicy,
    baselines_from_losses,
    calibrate_threshold,
    extract_unknown,
    reconstruction_loss,
    ucs_scores,
)

OUTPUT_ENV = "NEGM_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@dataclass
class RunConfig:
    # data source: a .negm container, a KDD-layout .csv, or synthetic when empty
    dataset: str = ""
    label_column: str = "label"
    drop_columns: list[str] = field(default_factory=list)
    drop_constant: bool = False
    n_clusters: int = 16
    per_cluster: int = 625
    dim: int = 121
    separation: float = 10.0
    noise_fraction: float = 0.05
    noise_multiplier: float = 9.0
    # split
    known_classes: list[str] = field(default_factory=list)
    unknown_classes: list[str] = field(default_factory=list)
    known_test_fraction: float = 0.2
    # training
    epochs: int = 1000
    batch_size: int = 50
    latent_dim: int = 32
    step_size: float = 1e-5
    d_step_size: float | None = None
    d_batch_norm: bool = True
    prior: str = "mixture"
    warmup_epochs: int = 50
    prior_refit_interval: int = 50
    em_iters: int = 100
    # thresholding
    first_threshold: str = "quantile"
    first_batch_quantile: float = 0.10
    calibration_coverage: float = 0.99
    ema_decay: float = 0.7
    # I-means
    ws: int = 200
    imeans_rule: str = "spawn-theta"
    imeans_gate: bool = True
    imeans_hold_outliers: bool = False
    imeans_min_size: int = 1
    # streaming
    stream_batch: int = 500
    refit_every: int = 1
    output_dir: str = "negm-out"
    seed: int = 0

    def validate(self):
        if self.dataset and not Path(self.dataset).is_file():
            raise ConfigError(f"dataset: file {self.dataset!r} does not exist")
        if self.stream_batch < 1:
            raise ConfigError("stream_batch must be >= 1")
        if self.refit_every < 1:
            raise ConfigError("refit_every must be >= 1")
        if self.first_threshold not in ("quantile", "calibrated"):
            raise ConfigError("first_threshold must be 'quantile' or 'calibrated'")
        if set(self.known_classes) & set(self.unknown_classes):
            raise ConfigError("known_classes and unknown_classes overlap")
        try:
            self.train_config()
            self.synthetic_spec()
            self.threshold_policy()
            self.imeans_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def train_config(self):
        return bigan.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, latent_dim=self.latent_dim,
            step_size=self.step_size, d_step_size=self.d_step_size,
            d_batch_norm=self.d_batch_norm, prior=self.prior,
            warmup_epochs=self.warmup_epochs, refit_interval=self.prior_refit_interval,
            em_iters=self.em_iters, seed=self.seed,
        )

    def synthetic_spec(self):
        return SyntheticSpec(
            n_clusters=self.n_clusters, per_cluster=self.per_cluster, dim=self.dim,
            separation=self.separation, noise_fraction=self.noise_fraction,
            noise_multiplier=self.noise_multiplier, seed=self.seed,
        )

    def threshold_policy(self):
        return ThresholdPolicy(self.first_batch_quantile, self.ema_decay)

    def imeans_config(self):
        return IMeansConfig(warmup_size=self.ws, rule=self.imeans_rule,
                            gate=self.imeans_gate, hold_outliers=self.imeans_hold_outliers,
                            min_size=self.imeans_min_size, seed=self.seed)

    @property
    def out(self):
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


def _field_types():
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(RunConfig)}


def _coerce(name, kind, text):
    text = text.strip()
    args = typing.get_args(kind)
    if type(None) in args:
        if text.lower() in ("", "none"):
            return None
        kind = next(a for a in args if a is not type(None))
    if typing.get_origin(kind) is list:
        return [t.strip() for t in text.split(",") if t.strip()]
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"{name}: expected {kind.__name__}, got {text!r}") from None
    return text


def parse_config(text, overrides=None):
    """Build a :class:`RunConfig` from ``key = value`` lines.

    Blank lines and ``#`` comments are ignored; list values are
    comma-separated.  ``overrides`` (a mapping of raw strings) wins over the
    file.  Unknown keys and badly typed values raise :class:`ConfigError`.
    """
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = (lineno, raw)
    for key, raw in (overrides or {}).items():
        values[key] = ("override", str(raw))
    kwargs = {}
    for key, (where, raw) in values.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r} ({where})")
        kwargs[key] = _coerce(key, types[key], raw)
    return RunConfig(**kwargs)


def load_config(path=None, overrides=None):
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, overrides).validate()


def format_config(cfg: RunConfig):
    """Effective configuration in the same ``key = value`` format."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _model_facing(cfg: RunConfig):
    d = dataclasses.asdict(cfg)
    d.pop("output_dir")
    return d


@dataclass
class PreparedData:
    train: object
    test: object
    normalizer: object
    known: list
    unknown: list


def load_dataset(cfg: RunConfig):
    if not cfg.dataset:
        return generate_synthetic(cfg.synthetic_spec())
    if cfg.dataset.lower().endswith(".csv"):
        table = load_csv(cfg.dataset, kdd99_schema(), cfg.label_column)
        fm, _ = encode(table, {"columns": cfg.drop_columns, "drop_constant": cfg.drop_constant})
        return fm
    return load_matrix(cfg.dataset)


def default_classes(class_names):
    """Lower half of the (naturally sorted) classes known, upper half unknown."""
    names = sorted(class_names, key=lambda c: (len(c), c))
    half = len(names) // 2
    return names[:half], names[half:]


def prepare_from(fm, cfg: RunConfig, known=None, unknown=None) -> PreparedData:
    """Split ``fm`` into normalized train and test sets.

    Missing class lists are completed from the data: with neither given the
    lower half of the classes is known and the upper half unknown.
    """
    known = list(known if known is not None else cfg.known_classes)
    unknown = list(unknown if unknown is not None else cfg.unknown_classes)
    if not known and not unknown:
        known, unknown = default_classes(fm.class_names)
    elif not known:
        known = [c for c in fm.class_names if c not in unknown]
    elif not unknown:
        unknown = [c for c in fm.class_names if c not in known]
    train, test = build_splits(fm, SplitSpec(known, unknown, cfg.known_test_fraction, cfg.seed))
    train_n, norm = normalize(train)
    return PreparedData(train_n, norm.apply(test), norm, known, unknown)


def prepare(cfg: RunConfig) -> PreparedData:
    return prepare_from(load_dataset(cfg), cfg)


def cmd_synth(cfg: RunConfig, path=None):
    fm = generate_synthetic(cfg.synthetic_spec())
    path = Path(path) if path else cfg.out / "synthetic.negm"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_matrix(fm, path)
    return path


@dataclass
class TrainResult:
    checkpoint: Path
    history: Path
    model: bigan.BiganModel
    prior: gmm.MixturePrior


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "d_loss", "g_loss", "e_loss", "d_real", "d_fake"])
        for r in history.rows():
            w.writerow([r["epoch"]] + [repr(r[k]) for k in ("d_loss", "g_loss", "e_loss", "d_real", "d_fake")])


def train_model(cfg: RunConfig, data: PreparedData) -> bigan.Checkpoint:
    """Train the BiGAN and collect everything the online loop needs."""
    try:
        model, prior, history = bigan.train(data.train, cfg.train_config())
    except Exception as exc:
        raise StageError("train", exc) from exc
    try:
        losses = reconstruction_loss(model, data.train.data)
        baselines = baselines_from_losses(losses, data.train.labels, data.train.class_names)
        label_index = [data.train.class_names.index(c) for c in data.train.labels]
        extras = {
            "baselines": baselines.medians,
            "train_scores": ucs_scores(losses, baselines),
            "train_latents": model.encode(data.train.data),
            "train_label_index": np.array(label_index, dtype=np.float64),
        }
    except Exception as exc:
        raise StageError("baselines", exc) from exc
    meta = {"class_names": list(data.train.class_names), "config": _model_facing(cfg)}
    ckpt = bigan.Checkpoint(model, prior, data.normalizer, extras, meta)
    ckpt.history = history
    return ckpt


def cmd_train(cfg: RunConfig, data: PreparedData | None = None, out=None):
    """Train, then write ``model.ckpt`` and ``history.csv`` under ``out``."""
    try:
        data = data or prepare(cfg)
    except Exception as exc:
        raise StageError("data", exc) from exc
    ckpt = train_model(cfg, data)
    out = Path(out) if out else cfg.out
    out.mkdir(parents=True, exist_ok=True)
    path, hist = out / "model.ckpt", out / "history.csv"
    bigan.save_checkpoint(path, ckpt.model, ckpt.prior, ckpt.normalizer,
                          extras=ckpt.extras, meta=ckpt.meta)
    write_history(hist, ckpt.history)
    return TrainResult(path, hist, ckpt.model, ckpt.prior)


@dataclass
class BatchRecord:
    batch: int
    rows: int
    threshold: float | None
    flagged: int
    flagged_indices: list
    k_new_delta: int
    k_new_total: int
    components: int
    score_min: float | None = None
    score_median: float | None = None
    score_max: float | None = None
    error: str | None = None


@dataclass
class DetectionReport:
    records: list = field(default_factory=list)
    k0: int = 0
    k_new: int = 0
    components: int = 0

    def flags(self, n_rows):
        out = np.zeros(n_rows, dtype=bool)
        for r in self.records:
            out[np.asarray(r.flagged_indices, dtype=int)] = True
        return out

    def to_jsonl(self):
        lines = [json.dumps({"type": "batch", **dataclasses.asdict(r)}, sort_keys=True)
                 for r in self.records]
        lines.append(json.dumps({"type": "summary", "k0": self.k0, "k_new": self.k_new,
                                 "components": self.components, "batches": len(self.records)},
                                sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path):
        rep = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("type")
            if kind == "batch":
                rep.records.append(BatchRecord(**obj))
            else:
                rep.k0, rep.k_new, rep.components = obj["k0"], obj["k_new"], obj["components"]
        return rep


def run_online(cfg: RunConfig, checkpoint: bigan.Checkpoint, stream):
    """Process ``stream`` (feature rows only) in batches of ``stream_batch``.

    Per batch: reconstruction loss, UCS, thresholding, I-means over the
    encodings of flagged rows, and a mixture refit that grows the prior by
    the newly spawned cluster count.  A failing batch is recorded and the
    stream continues.
    """
    model, prior = checkpoint.model, checkpoint.prior
    extras = checkpoint.extras
    class_names = checkpoint.meta["class_names"]
    baselines = extras["baselines"]
    latents = extras["train_latents"]
    label_idx = extras["train_label_index"].astype(int)
    policy = cfg.threshold_policy()
    if cfg.first_threshold == "calibrated":
        policy.initial_threshold = calibrate_threshold(extras["train_scores"], cfg.calibration_coverage)
    labels = np.array(class_names, dtype=object)[label_idx]
    imeans = IMeans.from_labeled(latents, labels, class_names, cfg.imeans_config())
    k0 = len(class_names)
    report = DetectionReport(k0=k0)
    pool = [latents]
    refit_pending = False
    stream = np.asarray(stream, dtype=np.float64)
    n_batches = (len(stream) + cfg.stream_batch - 1) // cfg.stream_batch
    for t in range(n_batches):
        start = t * cfg.stream_batch
        xb = stream[start:start + cfg.stream_batch]
        rec = BatchRecord(t, len(xb), None, 0, [], 0, imeans.k_new, prior.n_components)
        before = imeans.k_new
        try:
            scores = ucs_scores(reconstruction_loss(model, xb), baselines)
            _, uc, thr, policy = extract_unknown(scores, policy, t)
            rec.threshold = thr
            rec.score_min, rec.score_median, rec.score_max = (
                float(scores.min()), float(np.median(scores)), float(scores.max()))
            rec.flagged = len(uc)
            rec.flagged_indices = (uc + start).tolist()
            z = model.encode(xb[uc])
            imeans.feed(z)
            if len(z):
                pool.append(z)
            refit_pending = refit_pending or imeans.k_new > before
            if refit_pending and ((t + 1) % cfg.refit_every == 0 or t == n_batches - 1):
                prior = _grow_prior(prior, imeans, pool, cfg, t)
                refit_pending = False
        except Exception as exc:  # noqa: BLE001 - recorded, stream continues
            rec.error = f"{type(exc).__name__}: {exc}"
            refit_pending = refit_pending or imeans.k_new > before
        finally:
            rec.k_new_delta = imeans.k_new - before
            rec.k_new_total = imeans.k_new
            rec.components = prior.n_components
        report.records.append(rec)
    if refit_pending:
        prior = _grow_prior(prior, imeans, pool, cfg, n_batches)
    report.k_new = imeans.k_new
    report.components = prior.n_components
    return report, prior, imeans


def _grow_prior(prior, imeans, pool, cfg, t):
    target = imeans.k0 + imeans.k_new
    grow = target - prior.n_components
    if grow <= 0:
        return prior
    fresh = imeans.confirmed[prior.n_components - imeans.k0:]
    spawned = np.array([imeans.clusters[k].mean for k in fresh])
    points = np.vstack(pool)
    res = gmm.refit_with_new_classes(prior, points, grow, new_means=spawned,
                                     max_iter=cfg.em_iters, seed=[cfg.seed, 5, t])
    return res.prior


def cmd_detect(cfg: RunConfig, checkpoint_path=None, data: PreparedData | None = None, out=None):
    """Load a checkpoint, stream the test split and write ``report.jsonl``."""
    out = Path(out) if out else cfg.out
    ckpt = bigan.load_checkpoint(Path(checkpoint_path) if checkpoint_path else out / "model.ckpt")
    data = data or prepare(cfg)
    report, _, _ = run_online(cfg, ckpt, data.test.data)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.jsonl")
    return report


@dataclass
class GroundTruth:
    unknown_flags: np.ndarray
    k_true: int

    def write(self, path):
        Path(path).write_text(json.dumps({"unknown_flags": self.unknown_flags.astype(int).tolist(),
                                          "k_true": self.k_true}), encoding="utf-8")

    @classmethod
    def read(cls, path):
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(np.asarray(obj["unknown_flags"], dtype=bool), int(obj["k_true"]))


def ground_truth(cfg: RunConfig, data: PreparedData | None = None):
    data = data or prepare(cfg)
    return GroundTruth(np.isin(data.test.labels, data.unknown), len(data.unknown))


class EvalMismatch(ValueError):
    pass


def cmd_eval(report: DetectionReport, truth: GroundTruth, baseline_rmse=None, path=None):
    """F1 over unknown flags, RMSE of the count, S-R² when a baseline is given."""
    n = sum(r.rows for r in report.records)
    if n != len(truth.unknown_flags):
        raise EvalMismatch(f"report covers {n} rows, truth has {len(truth.unknown_flags)}")
    flags = report.flags(n)
    err = rmse([report.k_new], [truth.k_true])
    metrics = {
        "f1": f1_unknown(flags, truth.unknown_flags),
        "rmse": err,
        "k_new": report.k_new,
        "k_true": truth.k_true,
    }
    if baseline_rmse is not None:
        metrics["s_r2"] = s_r2(err, float(baseline_rmse))
    if path is not None:
        Path(path).write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return metrics
