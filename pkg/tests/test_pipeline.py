import numpy as np
import pytest

from umate import pipeline as pl
from umate.config import Config
from umate.dataset import generate_dataset
from umate.errors import CapacityError, ContractViolation, FormatError, VersionError
from umate.geometry import Topology

TINY = dict(d=8, kappa=8, n_max=20, dec_layers=1, dec_heads=2, mlp_depth=2, backbone_layers=1,
            backbone_heads=2, batch_size=5, epochs=1, n_levels=3, ot_max_iter=100)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(5, 2, seed=11)


@pytest.fixture(scope="module")
def trained(data):
    return pl.train(data, Config(**TINY))


def test_one_epoch_runs(trained):
    model, hist = trained
    assert len(hist.total) == 1 and np.isfinite(hist.total[0])
    assert model.epoch == 1 and model.step == 2
    assert model.plan is not None
    assert model.plan.plan.shape == (8, 8, 8)


def test_training_is_deterministic(data, trained):
    again, hist = pl.train(data, Config(**TINY))
    assert hist.total == trained[1].total
    for (k, a), (_, b) in zip(again.named_params(), trained[0].named_params()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=k)


def test_zero_weights_leave_parameters_unchanged(data):
    cfg = Config(**{**TINY, "lambda_align": 0.0, "lambda_gen": 0.0, "restart_dead": False})
    model = pl.initialize_model(data, cfg)
    before = model.state()
    pl.train(data, cfg, model=model)
    for k, v in model.state().items():
        np.testing.assert_array_equal(v, before[k], err_msg=k)


def test_checkpoint_round_trip(tmp_path, data, trained):
    model = trained[0]
    path = tmp_path / "m.ckpt"
    pl.save_checkpoint(model, path)
    back = pl.load_checkpoint(path)
    for (k, a), (_, b) in zip(model.named_params(), back.named_params()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=k)
    np.testing.assert_array_equal(back.plan.plan, model.plan.plan)
    assert back.cfg == model.cfg and back.step == model.step
    s = data[0]
    a = pl.task_predict(model, s.topology, s.density, np.random.default_rng(3))
    b = pl.task_predict(back, s.topology, s.density, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    # a second save is byte-identical
    path2 = tmp_path / "m2.ckpt"
    pl.save_checkpoint(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_errors(tmp_path, trained):
    path = tmp_path / "m.ckpt"
    pl.save_checkpoint(trained[0], path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(FormatError):
        pl.load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        pl.load_checkpoint(path)
    path.write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionError):
        pl.load_checkpoint(path)


def test_tasks_outputs(data, trained):
    model = trained[0]
    s = data[1]
    rng = np.random.default_rng(0)
    g = pl.task_generate(model, s.density, s.properties, rng, n=9)
    assert g.coords.shape == (9, 3) and g.topology.n == 9
    p = pl.task_predict(model, s.topology, s.density, rng)
    assert p.shape == (3,) and np.all(np.isfinite(p))
    rho = pl.task_confirm(model, s.topology, s.properties, rng)
    assert 0 < rho < 1


def test_task_errors(data, trained):
    model = trained[0]
    s = data[0]
    rng = np.random.default_rng(1)
    with pytest.raises(CapacityError):
        pl.task_generate(model, 0.3, s.properties, rng, n=21)
    with pytest.raises(ContractViolation):
        pl.task_generate(model, 0.3, [1.0, 2.0], rng)
    with pytest.raises(ContractViolation):
        pl.task_predict(model, s.topology, 0.0, rng)
    big = Topology(np.eye(3), rng.uniform(size=(21, 3)), np.zeros((21, 21), int) + np.eye(21, k=1, dtype=int)
                   + np.eye(21, k=-1, dtype=int))
    with pytest.raises(CapacityError):
        pl.task_predict(model, big, 0.3, rng)


def test_capacity_error_in_training(data):
    with pytest.raises(CapacityError):
        pl.train(data, Config(**{**TINY, "n_max": 8}))


def test_evaluate_is_deterministic(data, trained):
    model = trained[0]
    a = pl.evaluate(model, data.samples[:3], seed=4).aggregates()
    b = pl.evaluate(model, data.samples[:3], seed=4).aggregates()
    assert a == b
    with pytest.raises(ContractViolation):
        pl.evaluate(model, [], seed=0)
