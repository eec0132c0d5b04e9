import dataclasses

import numpy as np
import pytest

from stmambasync import tensor as T
from stmambasync.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from stmambasync.data import StandardScaler
from stmambasync.model import ModelConfig, ModelParams, count_params, forward, predict
from stmambasync.nn import grad_check
from stmambasync.runs import load_run, params_equal, save_run
from stmambasync.train import TrainConfig

TOY = ModelConfig(N=3, M=2, Z=2, d=1, d_e=2, d_s=2, heads=2, d_state=3)


def toy_inputs(cfg=TOY, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, cfg.M, cfg.N, cfg.d))
    wk = rng.integers(0, 7, (batch, cfg.M))
    tod = rng.integers(0, cfg.steps_per_day, (batch, cfg.M))
    return x, wk, tod


def test_toy_width():
    assert TOY.d_h == 8 and TOY.d_inner == 16


@pytest.mark.parametrize("bad", [dict(N=0), dict(heads=3), dict(n_mamba_layers=-1), dict(M=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        dataclasses.replace(TOY, **bad)


def test_config_dict_round_trip():
    assert ModelConfig.from_dict({k: str(v) for k, v in TOY.to_dict().items()}) == TOY


@pytest.mark.parametrize("cfg", [
    TOY,
    ModelConfig(N=3, M=2, Z=2, d=1, d_e=2, d_s=2, heads=1, d_state=2, expand=2),
    ModelConfig(N=5, M=4, Z=3, d=2, d_e=4, d_s=0, heads=2, n_attention_layers=2,
                n_mamba_layers=3, expand=1, d_state=5),
    ModelConfig(),
])
def test_count_params_matches_registry(cfg):
    assert count_params(cfg) == ModelParams(cfg).n_scalars()


def test_count_params_separability():
    bigger = dataclasses.replace(TOY, d_state=6)
    no_mamba = dataclasses.replace(TOY, n_mamba_layers=0)
    assert count_params(bigger) != count_params(TOY)
    assert (count_params(dataclasses.replace(bigger, n_mamba_layers=0))
            == count_params(no_mamba))


def test_zero_layers_is_embedding_plus_head():
    cfg = dataclasses.replace(TOY, n_attention_layers=0, n_mamba_layers=0)
    p = ModelParams(cfg)
    assert p.n_scalars() == (sum(q.size for q in p.embed.parameters())
                             + sum(q.size for q in p.head.parameters()))


def test_reference_shapes():
    cfg = ModelConfig()
    p = ModelParams(cfg, 0)
    x = np.random.default_rng(0).standard_normal((12, 170, 1))
    wk, tod = np.zeros(12, dtype=int), np.arange(12)
    with T.no_grad():
        assert forward(x, wk, tod, p).shape == (12, 170, 1)


def test_forward_is_deterministic():
    x, wk, tod = toy_inputs()
    a = forward(x, wk, tod, ModelParams(TOY, 7)).data
    b = forward(x, wk, tod, ModelParams(TOY, 7)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, forward(x, wk, tod, ModelParams(TOY, 8)).data)


def test_mamba_only_variant_has_no_attention():
    p = ModelParams(dataclasses.replace(TOY, n_attention_layers=0))
    assert p.st_blocks == [] and len(p.mamba) == 1
    x, wk, tod = toy_inputs()
    assert forward(x, wk, tod, p).shape == (2, 2, 3, 1)


def test_head_is_per_node():
    p = ModelParams(dataclasses.replace(TOY, n_attention_layers=0, n_mamba_layers=0), 1)
    x, wk, tod = toy_inputs()
    base = forward(x, wk, tod, p).data
    x2 = x.copy()
    x2[:, :, 1] += 3.0
    out = forward(x2, wk, tod, p).data
    np.testing.assert_array_equal(out[:, :, [0, 2]], base[:, :, [0, 2]])


def test_forward_finite_over_seeds():
    for seed in range(100):
        x, wk, tod = toy_inputs(seed=seed)
        with T.no_grad():
            assert np.all(np.isfinite(forward(x, wk, tod, ModelParams(TOY, seed)).data))


def test_predict_matches_forward_and_batches():
    p = ModelParams(TOY, 2)
    x, wk, tod = toy_inputs(batch=5)
    np.testing.assert_allclose(predict(p, x, wk, tod, batch_size=2), forward(x, wk, tod, p).data,
                               rtol=1e-13, atol=1e-13)


def test_timer_records_every_stage():
    timer = {}
    forward(*toy_inputs(), ModelParams(TOY), timer=timer)
    assert set(timer) == {"embedding", "attention", "mamba", "head"}


def shift_free(params):
    keys = {id(b.temporal.W_K.bias) for b in params.st_blocks}
    keys |= {id(b.spatial.W_K.bias) for b in params.st_blocks}
    return [q for q in params.parameters() if id(q) not in keys]


def test_toy_model_gradients():
    p = ModelParams(TOY, 3)
    x, wk, tod = toy_inputs(batch=1, seed=4)
    y = np.random.default_rng(5).standard_normal((1, 2, 3, 1))

    def loss():
        r = forward(x, wk, tod, p) - y
        return T.mean(r * r)
    assert grad_check(loss, shift_free(p), h=1e-4) < 1e-4


# --- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)), "scalar": np.array(np.pi),
               "tiny": np.array([5e-324, -0.0, np.inf])}
    save_checkpoint(tmp_path / "c.ckpt", {"x": "1", "name": "run a"}, tensors)
    manifest, back = load_checkpoint(tmp_path / "c.ckpt")
    assert manifest == {"x": "1", "name": "run a"}
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")
    path = save_checkpoint(tmp_path / "ok", {}, {"w": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_run_round_trip(tmp_path):
    p = ModelParams(TOY, 11)
    scaler = StandardScaler(np.full((3, 1), 2.5), np.full((3, 1), 0.5))
    tcfg = TrainConfig(lr0=3e-4, milestones=(5, 9), patience=4, seed=2)
    save_run(tmp_path / "r.ckpt", p, scaler, tcfg, {"split": "6:2:2"})
    q, s2, t2, info, state = load_run(tmp_path / "r.ckpt")
    assert q.cfg == TOY and params_equal(p, q)
    assert t2 == tcfg and info == {"split": "6:2:2"} and state is None
    np.testing.assert_array_equal(s2.mean, scaler.mean)
    x, wk, tod = toy_inputs()
    np.testing.assert_array_equal(forward(x, wk, tod, p).data, forward(x, wk, tod, q).data)
