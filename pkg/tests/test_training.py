import numpy as np
import pytest

from shapecorr.autodiff import NonFiniteValue
from shapecorr.geometry import PointCloud
from shapecorr.losses import LossWeights
from shapecorr.network import init_params
from shapecorr.training import (
    AdamState,
    DataError,
    TrainingConfig,
    TrainingItem,
    adam_step,
    config_with,
    items_from_meshes,
    train,
    write_loss_log,
)


def small_config(**kw):
    base = dict(
        mode="supervised",
        epochs_phase1=3,
        epochs_phase2=1,
        batch_size=4,
        points_per_shape=4,
        seed=0,
    )
    base.update(kw)
    return TrainingConfig(**base)


# ----------------------------------------------------------------------
# adam
# ----------------------------------------------------------------------


def test_adam_zero_gradient_identity():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState.for_params([p], lr=0.1)
    adam_step(state, [p], [np.zeros(3)])
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])
    assert state.t == 1


def test_adam_first_step_hand_value():
    p = np.array([0.0])
    state = AdamState.for_params([p], lr=0.1)
    adam_step(state, [p], [np.array([1.0])])
    # bias correction makes m_hat = v_hat = g at t=1
    assert abs(p[0] - (-0.1 / (1.0 + 1e-8))) < 1e-12


def test_adam_converges_on_quadratic():
    p = np.array([0.0])
    state = AdamState.for_params([p], lr=0.1)
    for _ in range(1000):
        g = 2.0 * (p - 3.0)
        adam_step(state, [p], [g])
    assert abs(p[0] - 3.0) < 1e-3


def test_adam_nonfinite_gradient():
    p = np.array([0.0])
    state = AdamState.for_params([p], lr=0.1)
    with pytest.raises(NonFiniteValue):
        adam_step(state, [p], [np.array([np.nan])])


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------


def test_overfit_single_shape(tetrahedron):
    items = [TrainingItem(PointCloud(tetrahedron.vertices), tetrahedron.vertices.copy())]
    cfg = small_config(epochs_phase1=5, epochs_phase2=0, batch_size=1)
    _, log = train(tetrahedron, items, cfg, init_params(0))
    assert len(log) == 5
    assert log[-1].mean_loss < log[0].mean_loss


def test_training_deterministic(tetrahedron):
    items = [
        TrainingItem(
            PointCloud(tetrahedron.vertices + 0.01 * k), tetrahedron.vertices + 0.01 * k
        )
        for k in range(3)
    ]
    cfg = small_config()
    _, log_a = train(tetrahedron, items, cfg, init_params(1))
    _, log_b = train(tetrahedron, items, cfg, init_params(1))
    assert [(l.epoch, l.phase, l.mean_loss) for l in log_a] == [
        (l.epoch, l.phase, l.mean_loss) for l in log_b
    ]


def test_phase_structure(tetrahedron):
    items = [TrainingItem(PointCloud(tetrahedron.vertices), tetrahedron.vertices.copy())]
    cfg = small_config(epochs_phase1=2, epochs_phase2=3, batch_size=1)
    _, log = train(tetrahedron, items, cfg, init_params(0))
    assert [l.phase for l in log] == [1, 1, 2, 2, 2]
    assert [l.epoch for l in log] == [0, 1, 2, 3, 4]


def test_supervised_requires_targets(tetrahedron):
    items = [TrainingItem(PointCloud(tetrahedron.vertices), None)]
    with pytest.raises(DataError):
        train(tetrahedron, items, small_config(), init_params(0))


def test_empty_dataset_rejected(tetrahedron):
    with pytest.raises(DataError):
        train(tetrahedron, [], small_config(), init_params(0))


def test_unsupervised_runs(tetrahedron):
    items = [TrainingItem(PointCloud(tetrahedron.vertices + 0.05))]
    cfg = small_config(
        mode="unsupervised",
        epochs_phase1=2,
        epochs_phase2=0,
        batch_size=1,
        weights=LossWeights(5e-3, 5e-3),
    )
    _, log = train(tetrahedron, items, cfg, init_params(0))
    assert all(np.isfinite(l.mean_loss) for l in log)


def test_config_validation():
    with pytest.raises(DataError):
        TrainingConfig(mode="semi")
    with pytest.raises(DataError):
        TrainingConfig(lr_phase1=0.0)
    with pytest.raises(DataError):
        TrainingConfig(batch_size=0)


def test_config_with_override():
    cfg = TrainingConfig()
    assert cfg.epochs_phase1 == 25 and cfg.lr_phase1 == 1e-3
    assert cfg.epochs_phase2 == 2 and cfg.lr_phase2 == 1e-4
    assert cfg.batch_size == 32 and cfg.points_per_shape == 6890
    assert cfg.translation_jitter == 0.03
    out = config_with(cfg, epochs_phase1=1)
    assert out.epochs_phase1 == 1 and out.lr_phase1 == cfg.lr_phase1


def test_items_from_meshes(tetrahedron):
    items = items_from_meshes([tetrahedron], supervised=True)
    np.testing.assert_array_equal(items[0].targets, tetrahedron.vertices)
    items = items_from_meshes([tetrahedron], supervised=False)
    assert items[0].targets is None


def test_loss_log_csv(tmp_path, tetrahedron):
    items = [TrainingItem(PointCloud(tetrahedron.vertices), tetrahedron.vertices.copy())]
    cfg = small_config(epochs_phase1=2, epochs_phase2=1, batch_size=1)
    _, log = train(tetrahedron, items, cfg, init_params(0))
    path = tmp_path / "loss.csv"
    write_loss_log(log, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,phase,mean_loss"
    assert len(lines) == 4
    for row, entry in zip(lines[1:], log):
        e, p, v = row.split(",")
        assert int(e) == entry.epoch and int(p) == entry.phase
        assert abs(float(v) - entry.mean_loss) < 1e-9
