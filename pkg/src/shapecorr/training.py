"""Adam optimizer and the supervised/unsupervised training loops."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .autodiff import NonFiniteValue
from .geometry import Mesh, PointCloud
from .losses import LaplacianOperator, LossWeights, build_laplacian, supervised_loss, unsupervised_loss
from .network import NetworkParams, ParamTensors, Tensor, decode_t, encode_t


class DataError(Exception):
    pass


@dataclass
class AdamState:
    """First/second moment estimates for a list of parameter arrays."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """One Adam update, in place on the parameter arrays."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.isfinite(g).all():
            raise NonFiniteValue("non-finite gradient in adam_step")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g**2
        m_hat = m / (1 - b1**state.t)
        v_hat = v / (1 - b2**state.t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "supervised"  # or "unsupervised"
    epochs_phase1: int = 25
    lr_phase1: float = 1e-3
    epochs_phase2: int = 2
    lr_phase2: float = 1e-4
    batch_size: int = 32
    points_per_shape: int = 6890
    weights: LossWeights = field(default_factory=LossWeights)
    translation_jitter: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("supervised", "unsupervised"):
            raise DataError(f"unknown training mode {self.mode!r}")
        if min(self.epochs_phase1, self.epochs_phase2) < 0 or self.batch_size < 1:
            raise DataError("epoch and batch counts must be positive")
        if min(self.lr_phase1, self.lr_phase2) <= 0 or self.points_per_shape < 1:
            raise DataError("learning rates and points_per_shape must be positive")


@dataclass
class TrainingItem:
    """One training shape; ``targets`` are ordered to match template vertices."""

    cloud: PointCloud
    targets: np.ndarray | None = None


@dataclass
class EpochLoss:
    epoch: int
    phase: int
    mean_loss: float


def _item_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, epoch)))


def train(
    template: Mesh,
    dataset: Iterable[TrainingItem],
    config: TrainingConfig,
    init: NetworkParams,
) -> tuple[NetworkParams, list[EpochLoss]]:
    """Two-phase training; returns updated params and a per-epoch loss log.

    Each batch item is jittered by a uniform translation, encoded, decoded
    at the template vertices and scored with the configured loss; gradients
    are averaged over the batch before the Adam update.
    """
    items = list(dataset)
    if not items:
        raise DataError("empty dataset")
    if config.mode == "supervised":
        for it in items:
            if it.targets is None:
                raise DataError("supervised training requires correspondence targets")
            if len(it.targets) != len(it.cloud):
                raise DataError("targets must pair 1:1 with the input cloud")

    laplacian: LaplacianOperator | None = None
    if config.mode == "unsupervised":
        laplacian = build_laplacian(template, "cotangent")

    params = NetworkParams(
        init.encoder,
        init.decoder,
        metadata=dict(init.metadata, training_seed=config.seed, mode=config.mode),
    )
    flat = params.flat_arrays()
    log: list[EpochLoss] = []
    epoch_index = 0

    for phase, (n_epochs, lr) in enumerate(
        [(config.epochs_phase1, config.lr_phase1), (config.epochs_phase2, config.lr_phase2)], start=1
    ):
        state = AdamState.for_params(flat, lr=lr)
        for _ in range(n_epochs):
            rng = _item_rng(config.seed, epoch_index)
            order = rng.permutation(len(items))
            epoch_losses = []
            for start in range(0, len(order), config.batch_size):
                batch = [items[k] for k in order[start : start + config.batch_size]]
                loss, leaves = _batch_loss(template, batch, params, config, laplacian, rng)
                try:
                    loss.backward()
                except NonFiniteValue as exc:
                    raise NonFiniteValue(
                        f"training diverged at epoch {epoch_index}, batch {start // config.batch_size}"
                    ) from exc
                grads = [t.grad for t in leaves]
                adam_step(state, flat, grads)
                epoch_losses.append(float(loss.data))
            log.append(EpochLoss(epoch_index, phase, float(np.mean(epoch_losses))))
            epoch_index += 1
    return params, log


def _batch_loss(template, batch, params, config, laplacian, rng) -> tuple[Tensor, list[Tensor]]:
    pt = ParamTensors.from_params(params, trainable=True)
    total: Tensor | None = None
    for item in batch:
        pts = item.cloud.points
        n = len(pts)
        if n > config.points_per_shape:
            idx = rng.choice(n, size=config.points_per_shape, replace=False)
        else:
            idx = np.arange(n)
        jitter = rng.uniform(-config.translation_jitter, config.translation_jitter, size=3)
        inp = pts[idx] + jitter

        code = encode_t(pt, Tensor(inp))
        if config.mode == "supervised":
            # targets move with the input so the pairing of eq-style
            # supervision survives the jitter
            target = item.targets[idx] + jitter
            pred = decode_t(pt, Tensor(template.vertices[idx]), code)
            item_loss = supervised_loss(pred, target)
        else:
            pred = decode_t(pt, Tensor(template.vertices), code)
            item_loss = unsupervised_loss(template, pred, inp, config.weights, laplacian)
        total = item_loss if total is None else total + item_loss
    loss = total * (1.0 / len(batch))
    return loss, pt.leaves()


def items_from_meshes(meshes: Iterable[Mesh], supervised: bool) -> list[TrainingItem]:
    """Wrap generated meshes whose vertex order encodes correspondence."""
    out = []
    for mesh in meshes:
        cloud = PointCloud(mesh.vertices)
        out.append(TrainingItem(cloud, mesh.vertices.copy() if supervised else None))
    return out


def write_loss_log(log: list[EpochLoss], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,phase,mean_loss\n")
        for row in log:
            fh.write(f"{row.epoch},{row.phase},{row.mean_loss:.12g}\n")


def config_with(config: TrainingConfig, **overrides) -> TrainingConfig:
    return replace(config, **overrides)
