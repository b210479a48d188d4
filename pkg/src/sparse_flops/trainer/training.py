"""SGD training of the encoder on triplet loss plus an annealed sparsity penalty."""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import metrics
from .data import SyntheticDataset
from .losses import RegularizerKind, batch_triplet_loss, mine_triplets, regularizer
from .model import Activation, EncoderModel

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "step",
    "lambda",
    "loss",
    "triplet",
    "reg",
    "relaxed_flops",
    "p_mean",
    "flops_per_row",
    "r_sub",
    "dead_dims",
    "dead_embeddings",
)


class TrainingDiverged(FloatingPointError):
    pass


class CollapseWarning(UserWarning):
    """Embedding dimension is not smaller than the number of training classes."""


@dataclass
class RunConfig:
    lambda_max: float = 0.0
    anneal_T: int = 1000
    steps: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    margin: float = 0.2
    batch_size: int = 128
    samples_per_class: int = 4
    seed: int = 0
    regularizer_kind: RegularizerKind = RegularizerKind.FLOPS
    output_dim: int = 64
    hidden_dim: int = 128
    output_activation: Activation = Activation.RELU
    normalize_output: bool = True
    eval_interval: int = 250
    lr_decay_step: int | None = 1500  # lr is multiplied by lr_decay_factor from this step on
    lr_decay_factor: float = 0.1
    # synthetic data
    num_classes: int = 256
    per_class: int = 30
    input_dim: int = 128
    noise: float = 0.1
    data_seed: int = 0

    def __post_init__(self):
        self.regularizer_kind = RegularizerKind(self.regularizer_kind)
        self.output_activation = Activation(self.output_activation)
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_max", "lr", "momentum", "margin", "noise", "lr_decay_factor"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")
        if self.steps < 1 or self.anneal_T < 1:
            raise ValueError("steps and anneal_T must be >= 1")
        if self.anneal_T > self.steps:
            raise ValueError(f"anneal_T ({self.anneal_T}) must not exceed steps ({self.steps})")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.lr <= 0 or self.margin <= 0:
            raise ValueError("lr and margin must be > 0")
        if self.samples_per_class < 2 or self.batch_size < 2 * self.samples_per_class:
            raise ValueError("a batch needs at least two classes of at least two samples")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.lr_decay_step is not None and self.lr_decay_step < 0:
            raise ValueError("lr_decay_step must be >= 0")
        if self.output_dim < 1 or self.hidden_dim < 1:
            raise ValueError("layer widths must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["regularizer_kind"] = self.regularizer_kind.value
        out["output_activation"] = self.output_activation.value
        return out

    def replace(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **kw)


def anneal_lambda(t: int, config: RunConfig) -> float:
    """Quadratic warm-up ``lambda_max * (t / T)**2``, constant from ``t = T`` on."""
    if t < 0:
        raise ValueError("step must be >= 0")
    if t >= config.anneal_T:
        return float(config.lambda_max)
    return float(config.lambda_max) * (t / config.anneal_T) ** 2


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)

    def append(self, **kw) -> None:
        self.rows.append(tuple(kw[c] for c in LOG_COLUMNS))

    def column(self, name: str) -> list:
        i = LOG_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    @property
    def last(self) -> dict:
        return dict(zip(LOG_COLUMNS, self.rows[-1]))


def _sample_batch(rng, labels_by_class, classes, n_classes, per_class):
    chosen = rng.choice(classes, size=n_classes, replace=False)
    idx = [rng.choice(labels_by_class[c], size=per_class, replace=False) for c in chosen]
    return np.concatenate(idx)


def _standardize_output(model: EncoderModel, probe) -> None:
    # He init leaves output pre-activations far inside the SThresh dead zone
    # (|x| <= 0.5), where every gradient is zero; rescale to unit std.
    _, cache = model.forward(probe)
    s = float(cache.pre[-1].std())
    if s > 0:
        model.layers[-1].weights /= s
        model.layers[-1].bias /= s


def evaluate(model: EncoderModel, x) -> tuple[metrics.SparsityReport, int]:
    """Sparsity report over the whole of ``x`` and the number of all-zero embeddings."""
    z = model.embed(x)
    dead = int(np.count_nonzero(~z.any(axis=1)))
    return metrics.sparsity_report(z), dead


def train(config: RunConfig, dataset: SyntheticDataset, model: EncoderModel | None = None):
    """Minimize mean triplet loss + ``lambda(t) * regularizer`` with momentum SGD.

    Batches hold ``batch_size // samples_per_class`` training classes with
    ``samples_per_class`` samples each. Every ``eval_interval`` steps (and at
    the last step) sparsity statistics of the unseen-class split are logged.
    Deterministic given ``config.seed``.

    Returns:
        ``(model, TrainLog)``
    """
    n_train_classes = dataset.train_classes.size
    if config.output_dim >= n_train_classes:
        warnings.warn(
            f"embedding dim {config.output_dim} >= {n_train_classes} training classes; "
            "one-hot class codes become a trivial solution",
            CollapseWarning,
            stacklevel=2,
        )
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = EncoderModel.init(
            dataset.input_dim,
            config.output_dim,
            hidden=(config.hidden_dim,),
            output_activation=config.output_activation,
            normalize_output=config.normalize_output,
            rng=rng,
        )
        if config.output_activation is Activation.STHRESH:
            _standardize_output(model, dataset.train_x[: 4 * config.batch_size])
    by_class = {c: np.flatnonzero(dataset.train_y == c) for c in dataset.train_classes}
    eligible = np.array([c for c, ix in by_class.items() if ix.size >= config.samples_per_class])
    n_classes = min(config.batch_size // config.samples_per_class, eligible.size)
    if n_classes < 2:
        raise ValueError("not enough training classes with samples_per_class samples")

    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    log_ = TrainLog()

    for t in range(config.steps):
        lam = anneal_lambda(t, config)
        idx = _sample_batch(rng, by_class, eligible, n_classes, config.samples_per_class)
        z, cache = model.forward(dataset.train_x[idx])
        if not np.all(np.isfinite(z)):
            raise TrainingDiverged(f"non-finite embeddings at step {t} (lambda={lam})")
        triplets = mine_triplets(z, dataset.train_y[idx], rng)
        tl, g = batch_triplet_loss(z, triplets, config.margin)
        reg, g_reg = regularizer(config.regularizer_kind, z)
        loss = tl + lam * reg
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss!r} at step {t} (lambda={lam})")
        grads = model.backward(cache, g + lam * g_reg)
        lr = config.lr
        if config.lr_decay_step is not None and t >= config.lr_decay_step:
            lr *= config.lr_decay_factor
        for p, v, gr in zip(params, velocity, grads):
            v *= config.momentum
            v += gr
            p -= lr * v

        if (t + 1) % config.eval_interval == 0 or t + 1 == config.steps:
            rep, dead = evaluate(model, dataset.eval_x)
            log_.append(
                step=t + 1,
                **{"lambda": lam},
                loss=loss,
                triplet=tl,
                reg=reg,
                relaxed_flops=rep.relaxed_flops,
                p_mean=rep.p_mean,
                flops_per_row=rep.flops_per_row,
                r_sub=rep.r_sub,
                dead_dims=rep.dead_dims,
                dead_embeddings=dead,
            )
            log.debug("step %d loss %.4f p_mean %.4f r_sub %.3f", t + 1, loss, rep.p_mean, rep.r_sub)
    return model, log_
