import math

import numpy as np
import pytest

from resdec import training as TR
from resdec.data import make_synthetic_task
from resdec.errors import CheckpointError, ContractError, NumericError
from resdec.model import ModelConfig, ModelParams, param_shapes
from resdec.tensor import Tensor
from resdec.training import OptimizerState, TrainConfig, adadelta_step, dropout_apply, init_params, nll_loss

# hand evaluation of the Adadelta recurrences at step 1 with g = 1
FIRST_STEP = -0.004472091234310839
LN2_PLUS_LN4 = 2.0794415416798357


def single_param(value, name="out_bias"):
    """Tiny real model with ``name`` set to ``value`` and zero gradients everywhere."""
    cfg = TrainConfig(variant="baseline", embed_dim=1, hidden_dim=1, src_vocab=len(value), tgt_vocab=len(value),
                      precision="double")
    p = init_params(cfg)
    p[name].data[...] = value
    for t in p.values():
        t.grad = np.zeros_like(t.data)
    return p, cfg


def test_nll_uniform_is_log_vocab():
    V = 7
    lp = Tensor(np.full((2, 3, V), -math.log(V)))
    loss, n = nll_loss(lp, np.zeros((2, 3), int), np.ones((2, 3)))
    assert n == 6 and float(loss.data) / n == pytest.approx(math.log(V), abs=1e-12)


def test_nll_perfect_prediction_is_zero():
    lp = np.full((1, 2, 3), -np.inf)
    lp[0, 0, 1] = lp[0, 1, 2] = 0.0
    loss, _ = nll_loss(Tensor(lp), np.array([[1, 2]]), np.ones((1, 2)))
    assert float(loss.data) == 0.0


def test_nll_hand_computed():
    lp = np.log(np.array([[[0.5, 0.5], [0.75, 0.25]]]))
    loss, n = nll_loss(Tensor(lp), np.array([[0, 1]]), np.ones((1, 2)))
    assert float(loss.data) == pytest.approx(LN2_PLUS_LN4, abs=1e-12) and n == 2


def test_nll_masked_positions_ignored_and_neg_inf_rejected():
    with np.errstate(divide="ignore"):
        lp = np.log(np.array([[[0.5, 0.5], [1.0, 0.0]]]))
    loss, n = nll_loss(Tensor(lp), np.array([[0, 1]]), np.array([[1, 0]]))
    assert n == 1 and float(loss.data) == pytest.approx(math.log(2))
    with pytest.raises(NumericError):
        nll_loss(Tensor(lp), np.array([[0, 1]]), np.ones((1, 2)))


def test_adadelta_zero_gradient_leaves_params():
    p, cfg = single_param(np.arange(5.0))
    before = {k: t.data.copy() for k, t in p.items()}
    adadelta_step(p, OptimizerState.zeros_like(p), cfg)
    for k, t in p.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_adadelta_first_step_value():
    p, cfg = single_param(np.zeros(5))
    p["out_bias"].grad = np.ones(5)
    opt = OptimizerState.zeros_like(p)
    adadelta_step(p, opt, cfg)
    np.testing.assert_allclose(p["out_bias"].data, FIRST_STEP, rtol=1e-12)
    np.testing.assert_allclose(opt.sq_grad["out_bias"], 0.05, rtol=1e-12)
    assert p["out_bias"].grad is None or not p["out_bias"].grad.any()
    assert all(v.min() >= 0 for v in opt.sq_step.values())


def test_adadelta_step_one_scale_invariance():
    steps = []
    for g in (1.0, 1000.0):
        p, cfg = single_param(np.zeros(5))
        p["out_bias"].grad = np.full(5, g)
        adadelta_step(p, OptimizerState.zeros_like(p), cfg)
        steps.append(p["out_bias"].data[0])
    assert steps[1] == pytest.approx(steps[0], rel=0.01)


def test_adadelta_nan_names_parameter():
    p, cfg = single_param(np.zeros(5))
    p["out_bias"].grad = np.array([0, np.nan, 0, 0, 0.0])
    with pytest.raises(NumericError, match="out_bias"):
        adadelta_step(p, OptimizerState.zeros_like(p), cfg)


def test_adadelta_stays_finite_over_many_random_steps():
    p, cfg = single_param(np.zeros(5))
    opt = OptimizerState.zeros_like(p)
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        p["out_bias"].grad = rng.standard_normal(5) * 10.0 ** rng.integers(-6, 6)
        adadelta_step(p, opt, cfg)
    assert np.isfinite(p["out_bias"].data).all()
    assert (opt.sq_grad["out_bias"] >= 0).all() and (opt.sq_step["out_bias"] >= 0).all()


def test_dropout_identity_cases():
    x = Tensor(np.ones((3, 4)))
    assert dropout_apply(x, 0.0, True, np.random.default_rng(0)) is x
    assert dropout_apply(x, 0.5, False, None) is x
    with pytest.raises(ContractError):
        dropout_apply(x, 1.0, True, np.random.default_rng(0))


def test_dropout_preserves_mean():
    x = Tensor(np.ones(10 ** 6))
    out = dropout_apply(x, 0.5, True, np.random.default_rng(0)).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)) == {0.0, 2.0}


def test_init_scale_statistics_and_determinism():
    cfg = TrainConfig(variant="baseline", embed_dim=100, hidden_dim=4, src_vocab=10, tgt_vocab=1000)
    p = init_params(cfg)
    assert p["out_W"].size == 10 ** 5
    assert 0.0095 <= p["out_W"].data.std() <= 0.0105
    assert all(not t.data.any() for k, t in p.items() if k.endswith("_b") or k.endswith("_bias"))
    q = init_params(cfg)
    assert all(np.array_equal(p[k].data, q[k].data) for k in p)
    r = init_params(cfg, seed=2)
    assert not np.array_equal(p["out_W"].data, r["out_W"].data)


def test_config_validation():
    for bad in (dict(dropout_p=1.0), dict(dropout_p=-0.1), dict(rho=1.0), dict(epsilon=0.0), dict(precision="half")):
        with pytest.raises(ContractError):
            TrainConfig(variant="baseline", src_vocab=5, tgt_vocab=5, **bad)


def test_substreams_are_distinct():
    seeds = {TR.substream(1, name) for name in TR.STREAMS}
    assert len(seeds) == 3 and TR.substream(1, "init") != TR.substream(2, "init")


def _task(n, seed, length=(2, 6)):
    return make_synthetic_task("copy", 10, length, n, seed=seed)


def test_initial_loss_close_to_log_vocab():
    cfg = TrainConfig(variant="baseline", embed_dim=8, hidden_dim=8, src_vocab=14, tgt_vocab=14, max_epochs=0)
    r = TR.train(cfg, _task(50, 0), _task(10, 1))
    assert r.initial_loss == pytest.approx(math.log(14), rel=0.05)


@pytest.mark.parametrize("variant,scoring", [("baseline", None), ("memory_rnn", None), ("self_attentive_rnn", None),
                                             ("mean_residual", None), ("attn_residual", "content"),
                                             ("attn_residual", "content_scope")])
def test_training_loss_decreases_on_tiny_corpus(variant, scoring):
    cfg = TrainConfig(variant=variant, scoring=scoring, embed_dim=8, hidden_dim=8, src_vocab=14, tgt_vocab=14,
                      dropout_p=0.0, batch_size=10, max_epochs=20, init_scale=0.1)
    pairs = _task(10, 3)
    r = TR.train(cfg, pairs, pairs)
    losses = [m.train_loss for m in r.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(variant="attn_residual", embed_dim=6, hidden_dim=6, src_vocab=14, tgt_vocab=14,
                      max_epochs=2, batch_size=8)
    a = TR.train(cfg, _task(40, 0), _task(8, 1), metrics_log=tmp_path / "a.log")
    b = TR.train(cfg, _task(40, 0), _task(8, 1), metrics_log=tmp_path / "b.log")
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert (tmp_path / "a.log").read_text() == (tmp_path / "b.log").read_text()
    fields = (tmp_path / "a.log").read_text().splitlines()[0].split("\t")
    assert len(fields) == 4 and fields[0] == "1"


@pytest.mark.parametrize("precision", ["single", "double"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, precision):
    cfg = TrainConfig(variant="attn_residual", scoring="content_scope", embed_dim=5, hidden_dim=6,
                      src_vocab=11, tgt_vocab=13, precision=precision, init_scale=0.5)
    p = init_params(cfg)
    path = tmp_path / "ck.bin"
    TR.save_checkpoint(path, p, {"note": "x y"})
    q, meta = TR.load_checkpoint(path)
    assert q.config == p.config and meta["note"] == "x y" and meta["precision"] == precision
    for k in p:
        assert q[k].dtype == p[k].dtype
        assert q[k].data.tobytes() == p[k].data.tobytes()
    TR.save_checkpoint(tmp_path / "again.bin", q, {"note": "x y"})
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    cfg = TrainConfig(variant="baseline", embed_dim=2, hidden_dim=3, src_vocab=6, tgt_vocab=7)
    p = init_params(cfg)
    TR.save_checkpoint(tmp_path / "c", p)
    blob = (tmp_path / "c").read_bytes()
    assert blob.startswith(b"ARSQ1\n")
    header, _, body = blob.partition(b"\n\n")
    keys = {line.split("=")[0] for line in header.decode().splitlines()[1:]}
    assert {"variant", "scoring", "e", "d", "src_vocab", "tgt_vocab", "precision"} <= keys
    first = next(iter(param_shapes(p.config)))
    n = int.from_bytes(body[:4], "little")
    assert body[4:4 + n].decode() == first
    floats = sum(int(np.prod(s)) for s in param_shapes(p.config).values())
    names = sum(4 + len(k) + 4 + 4 * len(s) for k, s in param_shapes(p.config).items())
    assert len(body) == names + 4 * floats


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOPE\n")
    with pytest.raises(CheckpointError):
        TR.load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        TR.load_checkpoint(tmp_path / "missing")
    cfg = TrainConfig(variant="baseline", embed_dim=2, hidden_dim=3, src_vocab=6, tgt_vocab=7)
    TR.save_checkpoint(tmp_path / "c", init_params(cfg))
    (tmp_path / "t").write_bytes((tmp_path / "c").read_bytes()[:-7])
    with pytest.raises(CheckpointError):
        TR.load_checkpoint(tmp_path / "t")


def test_reloaded_model_reproduces_dev_loss(tmp_path):
    cfg = TrainConfig(variant="mean_residual", embed_dim=6, hidden_dim=6, src_vocab=14, tgt_vocab=14,
                      max_epochs=1, batch_size=8)
    dev = _task(20, 1)
    r = TR.train(cfg, _task(40, 0), dev, checkpoint=tmp_path / "ck")
    q, _ = TR.load_checkpoint(tmp_path / "ck")
    assert abs(TR.evaluate(q, dev)[0] - TR.evaluate(r.params, dev)[0]) < 1e-5


def test_model_params_validate_names_and_shapes():
    cfg = ModelConfig("baseline", 2, 3, 6, 7)
    tensors = {k: Tensor(np.zeros(s)) for k, s in param_shapes(cfg).items()}
    tensors["out_W"] = Tensor(np.zeros((3, 3)))
    with pytest.raises(ContractError):
        ModelParams(cfg, tensors)
    tensors.pop("out_W")
    with pytest.raises(ContractError):
        ModelParams(cfg, tensors)
