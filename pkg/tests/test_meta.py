import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dmasum.autodiff import ParameterVector
from dmasum.errors import InputError, NumericError
from dmasum.meta import (LOG_HEADER, AdamState, MetaConfig, Trainer, VideoTask, adam_step,
                         batch_meta_train, learner_inner_loop, meta_train, meta_update,
                         plain_train, read_log, summed_objective, train_epoch, write_log)
from dmasum.model import DmaSumModel, ModelConfig

TINY = dict(input_dim=4, attn_dim=2, lstm_hidden=2, head_hidden=3, n_visual=1,
            n_sequential=1)


def ref_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on plain Python floats."""
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    out = []
    theta = list(theta)
    for t, g in enumerate(grads, start=1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            theta[i] = theta[i] - lr * mh / (math.sqrt(vh) + eps)
        out.append(list(theta))
    return out


def _pv(r, scale=1.0):
    return ParameterVector([("a", r.normal(size=(2, 3)) * scale), ("b", r.normal(size=(1, 2)))])


def test_adam_matches_reference(rng):
    theta = _pv(rng)
    grads = [_pv(rng, 0.1) for _ in range(10)]
    state = AdamState(theta)
    traj = []
    p = theta
    for g in grads:
        p = adam_step(state, p, g, 1e-2)
        traj.append(p.flatten())
    ref = ref_adam(theta.flatten(), [g.flatten() for g in grads], 1e-2)
    np.testing.assert_allclose(np.array(traj), np.array(ref), rtol=0, atol=1e-12)


@given(st.floats(1e-6, 0.999), st.integers(0, 2**31 - 1))
def test_sgd_meta_step_is_interpolation(beta, seed):
    r = np.random.default_rng(seed)
    theta, theta_m = _pv(r), _pv(r)
    new = meta_update(theta, theta_m, MetaConfig(meta_rate=beta, optimizer="sgd"))
    for k in theta:
        assert np.array_equal(new[k], theta[k] + beta * (theta_m[k] - theta[k]))


def test_sgd_meta_step_full_rate_returns_adapted(rng):
    theta, theta_m = _pv(rng), _pv(rng)
    new = meta_update(theta, theta_m, MetaConfig(meta_rate=1.0, optimizer="sgd"))
    assert new.equals(theta_m)


def test_meta_step_identity_when_unadapted(rng):
    theta = _pv(rng)
    assert meta_update(theta, theta.copy(), MetaConfig(meta_rate=0.3, optimizer="sgd")).equals(theta)
    # zero pseudo-gradient leaves Adam's step at exactly zero
    out = meta_update(theta, theta.copy(), MetaConfig(), AdamState(theta))
    assert out.equals(theta)


def test_inner_loop_zero_steps_is_identity(rng):
    theta = _pv(rng)
    calls = []

    def obj(p, key):
        calls.append(key)
        return 1.0, p.map(np.ones_like)

    out, loss = learner_inner_loop(obj, theta, MetaConfig(inner_steps=0))
    assert out.equals(theta) and loss == 1.0 and len(calls) == 1


def test_inner_loop_plain_gradient_steps(rng):
    theta = _pv(rng)
    target = _pv(rng)

    def obj(p, key):  # 0.5 |p - target|^2
        d = p.combine(target, lambda a, b: a - b)
        return 0.5 * float(np.sum(d.flatten() ** 2)), {k: d[k] for k in d}

    cfg = MetaConfig(learner_rate=0.1, inner_steps=3)
    out, _ = learner_inner_loop(obj, theta, cfg)
    expect = target.flatten() + 0.9 ** 3 * (theta.flatten() - target.flatten())
    np.testing.assert_allclose(out.flatten(), expect, atol=1e-14)
    assert not out.equals(theta)  # input untouched, copy returned


def test_inner_loop_nan_loss_raises(rng):
    with pytest.raises(NumericError, match="task v7"):
        learner_inner_loop(lambda p, k: (float("nan"), {}), _pv(rng), MetaConfig(), "v7")


def test_config_validation():
    for bad in (dict(learner_rate=0), dict(meta_rate=-1), dict(inner_steps=-1),
                dict(optimizer="rmsprop"), dict(epochs=-1)):
        with pytest.raises(InputError):
            MetaConfig(**bad)
    assert MetaConfig.summe().inner_steps == 3 and MetaConfig.tvsum().inner_steps == 5
    assert (MetaConfig().learner_rate, MetaConfig().meta_rate) == (3e-5, 6e-5)


def _tasks(n=4, T=6, seed=0):
    r = np.random.default_rng(seed)
    return [VideoTask(f"v{i}", r.normal(size=(T, 4)), r.uniform(size=T)) for i in range(n)]


def _model(seed=0, **kw):
    return DmaSumModel(ModelConfig(**TINY, **kw), seed=seed)


def test_task_length_mismatch():
    with pytest.raises(InputError):
        VideoTask("x", np.ones((3, 4)), np.ones(4))


def test_trainer_log_one_line_per_epoch_task():
    tr = meta_train(_model(), _tasks(), MetaConfig(learner_rate=1e-2, meta_rate=1e-2, epochs=3))
    assert len(tr.log) == 12 and tr.meta_updates == 12
    assert [e.epoch for e in tr.log] == [0] * 4 + [1] * 4 + [2] * 4
    for ep in range(3):
        assert sorted(e.task_id for e in tr.log if e.epoch == ep) == ["v0", "v1", "v2", "v3"]
    assert all(e.meta_param_delta_l2 > 0 for e in tr.log)


def test_epoch_order_is_reshuffled_and_seeded():
    cfg = MetaConfig(seed=4)
    tr = Trainer(_model(), cfg)
    orders = [tuple(tr.epoch_order(10, e)) for e in range(4)]
    assert len(set(orders)) > 1
    assert orders == [tuple(Trainer(_model(), cfg).epoch_order(10, e)) for e in range(4)]


def test_meta_training_reduces_loss():
    tasks = _tasks(2, T=8)
    model = _model()
    before = np.mean([model.loss_and_grad(t.features, t.target)[0] for t in tasks])
    meta_train(model, tasks, MetaConfig(learner_rate=1e-2, meta_rate=1e-2, epochs=30))
    after = np.mean([model.loss_and_grad(t.features, t.target)[0] for t in tasks])
    assert after < before


def test_training_is_deterministic():
    cfg = MetaConfig(learner_rate=1e-2, meta_rate=1e-2, epochs=2, seed=3)
    a = meta_train(_model(dropout=0.2), _tasks(), cfg)
    b = meta_train(_model(dropout=0.2), _tasks(), cfg)
    assert a.model.params.digest() == b.model.params.digest()
    assert a.log == b.log


def test_batch_one_equals_single_video_trainer():
    cfg = MetaConfig(learner_rate=1e-2, meta_rate=1e-2, epochs=2)
    a = meta_train(_model(), _tasks(), cfg)
    b = batch_meta_train(_model(), _tasks(), cfg, batch=1)
    assert a.model.params.equals(b.model.params)
    assert a.log == b.log


def test_batch_meta_groups_tasks():
    tr = batch_meta_train(_model(), _tasks(5), MetaConfig(learner_rate=1e-2, epochs=1), batch=2)
    assert tr.meta_updates == 3
    assert [len(e.task_id.split("+")) for e in tr.log] == [2, 2, 1]


def test_summed_objective_adds_losses_and_grads():
    model = _model()
    tasks = _tasks(2)
    from dmasum.meta import task_objective
    objs = [task_objective(model, t) for t in tasks]
    loss, grads = summed_objective(objs)(model.params, 0)
    parts = [o(model.params, 0) for o in objs]
    assert loss == pytest.approx(parts[0][0] + parts[1][0], rel=1e-15)
    for k in grads:
        np.testing.assert_allclose(grads[k], parts[0][1][k] + parts[1][1][k], atol=1e-15)


def test_plain_trainer_is_adam_on_task_loss():
    tasks = _tasks(1)
    cfg = MetaConfig(learner_rate=1e-2, epochs=1)
    model = _model()
    theta = model.params.copy()
    _, g = model.loss_and_grad(tasks[0].features, tasks[0].target)
    expect = adam_step(AdamState(theta), theta, g, 1e-2)
    tr = plain_train(model, tasks, cfg)
    assert tr.model.params.equals(expect) and tr.kind == "plain"


def test_fomaml_runs_and_logs():
    tr = Trainer(_model(), MetaConfig(learner_rate=1e-2, meta_rate=1e-2, epochs=1), "fomaml")
    tr.fit(_tasks(3))
    assert tr.meta_updates == 3


def test_train_epoch_returns_epoch_log():
    cfg = MetaConfig(learner_rate=1e-2, meta_rate=1e-2)
    model = _model()
    tr = Trainer(model, cfg)
    _, log0 = train_epoch(model, _tasks(), cfg, 0, tr)
    _, log1 = train_epoch(model, _tasks(), cfg, 1, tr)
    assert len(log0) == len(log1) == 4 and log1[0].epoch == 1


def test_unknown_trainer_and_empty_tasks():
    with pytest.raises(InputError):
        Trainer(_model(), MetaConfig(), "sgd-plain")
    with pytest.raises(InputError):
        Trainer(_model(), MetaConfig()).run_epoch([], 0)


def test_log_roundtrip(tmp_path):
    tr = plain_train(_model(), _tasks(2), MetaConfig(learner_rate=1e-2, epochs=2))
    p = tmp_path / "log.csv"
    write_log(p, tr, {"seed": 0})
    meta, rows = read_log(p)
    assert meta["trainer"] == "plain" and meta["config"] == {"seed": 0}
    assert len(rows) == 4 and list(rows[0]) == LOG_HEADER
    assert float(rows[-1]["inner_final_loss"]) == tr.log[-1].inner_final_loss
