import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stefnet import autodiff as ad
from stefnet.autodiff import GradientTape, ShapeError
from stefnet.container import ContainerError, read_container, write_container
from stefnet.model import (StefConfig, factor_rows, forward, init_params, load_checkpoint,
                           param_count, param_shapes, predict_batch, save_checkpoint, zero_params)
from stefnet.training import mae_loss

SMALL = StefConfig(W=3, H=4, M=2, L=3, K=4, d=6, u=5)


def batch(cfg, B, seed=0, scale=5.0):
    rng = np.random.default_rng(seed)
    E = rng.poisson(scale, size=(B, cfg.L, cfg.W, cfg.H)).astype(float)
    F = rng.integers(0, 2, size=(B, cfg.L, cfg.W, cfg.H, cfg.M)).astype(float)
    X = rng.poisson(scale, size=(B, cfg.W, cfg.H)).astype(float)
    return E, F, X


def warmed(cfg, seed=0):
    """Parameters whose batch-norm statistics have been populated."""
    params = init_params(cfg, seed)
    E, F, _ = batch(cfg, 8, seed=seed + 100)
    forward(params, E, F, "train")
    return params


def test_init_deterministic():
    a, b = init_params(SMALL, 3), init_params(SMALL, 3)
    for name in a.tensors:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    c = init_params(SMALL, 4)
    assert not np.array_equal(a["conv2.kernel"].data, c["conv2.kernel"].data)


def test_init_dense_layers_for_wide_config():
    cfg = StefConfig(W=6, H=5, M=3, L=4, K=32, d=16, u=16)
    params = init_params(cfg, 0)
    dense = [n for n in params.tensors if n.startswith("dense1.") and n.endswith(".weight")]
    assert len(dense) == 4
    assert all(params[n].shape == (1050, 16) for n in dense)
    assert set(params.groups()) == {"theta1", "theta2", "thetaD1", "thetaL", "thetaD2"}


def test_init_contract():
    params = init_params(SMALL, 1)
    for name, t in params.tensors.items():
        if name.endswith("gamma"):
            np.testing.assert_array_equal(t.data, 1.0)
        elif name.endswith(("bias", "beta")):
            np.testing.assert_array_equal(t.data, 0.0)
        else:
            shape = t.shape
            fan_in, fan_out = (9 * shape[2], 9 * shape[3]) if len(shape) == 4 else shape
            assert np.abs(t.data).max() <= np.sqrt(6.0 / (fan_in + fan_out))


configs = st.builds(StefConfig, W=st.integers(1, 5), H=st.integers(1, 5), M=st.integers(1, 3),
                    L=st.integers(1, 4), K=st.integers(1, 6), d=st.integers(1, 6), u=st.integers(1, 6))


@settings(max_examples=30, deadline=None)
@given(configs)
def test_param_count_closed_form(cfg):
    params = init_params(cfg, 0)
    assert params.n_params() == param_count(cfg)
    assert params.n_params() == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


@settings(max_examples=30, deadline=None)
@given(configs, st.integers(1, 3))
def test_shape_chain(cfg, B):
    params = init_params(cfg, 0)
    E, F, _ = batch(cfg, B)
    if B * cfg.L * cfg.W * cfg.H < 2:
        return
    trace = {}
    out = forward(params, E, F, "train", trace=trace)
    assert trace["D"].shape == (B, cfg.L, cfg.W, cfg.H, cfg.K)
    assert trace["C"].shape == (B, cfg.L, cfg.W, cfg.H, cfg.K + cfg.M)
    assert trace["B"].shape == (B, cfg.L, cfg.W * cfg.H * (cfg.K + cfg.M))
    assert trace["A"].shape == (B, cfg.L, cfg.d)
    assert trace["g"].shape == (B, cfg.u)
    assert trace["h"].shape == (B, cfg.N)
    assert out.shape == (B, cfg.W, cfg.H)


def test_concat_shape_for_wide_config():
    cfg = StefConfig(W=6, H=5, M=3, L=4, K=32, d=8, u=8)
    trace = {}
    E, F, _ = batch(cfg, 1)
    forward(init_params(cfg, 0), E, F, "train", trace=trace)
    assert trace["C"].shape[1:] == (4, 6, 5, 35)


def test_forward_rejects_bad_shapes():
    params = init_params(SMALL, 0)
    E, F, _ = batch(SMALL, 2)
    with pytest.raises(ShapeError, match="input E"):
        forward(params, E[:, :2], F)
    with pytest.raises(ShapeError, match="input F"):
        forward(params, E, F[..., :1])


def test_zero_parameters_give_zero_output():
    E, F, _ = batch(SMALL, 3)
    out = forward(zero_params(SMALL), E * 7, F, "train")
    np.testing.assert_array_equal(out.data, 0.0)


def test_factor_columns_ablation():
    params = warmed(SMALL)
    rows = factor_rows(SMALL)
    for lag in range(SMALL.L):
        params[f"dense1.{lag}.weight"].data[rows] = 0.0
    E, F, _ = batch(SMALL, 4)
    a = predict_batch(params, E=E, F=F)
    b = predict_batch(params, E=E, F=np.zeros_like(F))
    c = predict_batch(params, E=E, F=1 - F)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_factor_rows_select_factor_channels():
    cfg = SMALL
    trace = {}
    E, F, _ = batch(cfg, 1)
    forward(init_params(cfg, 0), E, F, "train", trace=trace)
    flat = trace["B"][0, 0]
    np.testing.assert_array_equal(flat[factor_rows(cfg)], F[0, 0].reshape(-1))


@pytest.mark.parametrize("seed", range(5))
def test_factor_bit_flip_changes_output(seed):
    params = warmed(SMALL, seed)
    E, F, _ = batch(SMALL, 1, seed=seed)
    base = predict_batch(params, E=E, F=F)
    rng = np.random.default_rng(seed)
    idx = tuple(int(rng.integers(n)) for n in F.shape)
    F2 = F.copy()
    F2[idx] = 1 - F2[idx]
    assert not np.array_equal(base, predict_batch(params, E=E, F=F2))


def test_predict_requires_statistics():
    E, F, _ = batch(SMALL, 2)
    with pytest.raises(ValueError, match="unpopulated"):
        predict_batch(init_params(SMALL, 0), E=E, F=F)


def test_predict_pure_and_batch_independent():
    params = warmed(SMALL)
    before = {k: v.copy() for k, v in params.arrays().items()}
    stats = params.bn["bn1"].running_mean.copy()
    E, F, _ = batch(SMALL, 7, seed=5)
    a = predict_batch(params, E=E, F=F)
    b = predict_batch(params, E=E, F=F)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (7, SMALL.W, SMALL.H)
    for i in range(7):
        single = predict_batch(params, E=E[i:i + 1], F=F[i:i + 1])
        np.testing.assert_allclose(single[0], a[i], rtol=0, atol=1e-9)
    chunked = predict_batch(params, E=E, F=F, batch_size=3)
    np.testing.assert_allclose(chunked, a, rtol=0, atol=1e-9)
    for k, v in params.arrays().items():
        np.testing.assert_array_equal(v, before[k])
    np.testing.assert_array_equal(params.bn["bn1"].running_mean, stats)


def _grads(params, E, F, X):
    with GradientTape() as tape:
        loss = mae_loss(forward(params, E, F, "train"), X)
    ad.backward(loss, tape, params.tensors.values())
    return {k: t.grad for k, t in params.tensors.items()}


@pytest.mark.parametrize("seed", range(3))
def test_gradient_flow(seed):
    params = init_params(SMALL, seed)
    grads = _grads(params, *batch(SMALL, 4, seed=seed))
    for name, g in grads.items():
        if name in ("conv1.bias", "conv2.bias"):
            # a per-channel constant is removed by the train-mode batch norm that follows
            np.testing.assert_allclose(g, 0.0, atol=1e-12)
        else:
            assert np.any(g != 0), f"{name} received no gradient"


def test_model_gradient_matches_finite_differences():
    from oracles import central_diff, grad_close

    cfg = StefConfig(W=2, H=2, M=1, L=2, K=2, d=3, u=3)
    params = init_params(cfg, 11)
    E, F, X = batch(cfg, 2, seed=11, scale=3.0)
    grads = _grads(params, E, F, X)

    def loss():
        with ad.no_grad():
            return float(mae_loss(forward(params, E, F, "train"), X).data)

    for name, t in params.tensors.items():
        ok, worst = grad_close(grads[name], central_diff(loss, t.data))
        assert ok, f"{name}: worst relative error {worst}"


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = warmed(SMALL, 2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path, trained_epochs=7)
    loaded = load_checkpoint(path)
    assert loaded.config == SMALL and loaded.trained_epochs == 7 and loaded.seed == 2
    E, F, _ = batch(SMALL, 5, seed=9)
    np.testing.assert_array_equal(predict_batch(params, E=E, F=F), predict_batch(loaded, E=E, F=F))


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(warmed(SMALL), path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(ContainerError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(warmed(SMALL), path)
    meta, arrays = read_container(path)
    meta["config"]["W"] = SMALL.W + 1
    write_container(path, meta, arrays)
    with pytest.raises(ShapeError, match="config requires"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(warmed(SMALL), path)
    meta, arrays = read_container(path)
    meta["format_version"] = 99
    write_container(path, meta, arrays)
    with pytest.raises(ValueError, match="99.*version 1"):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ValueError):
        StefConfig(W=0, H=2, M=1)


def test_input_scale_is_transparent_for_zero_params():
    cfg = StefConfig(W=2, H=2, M=1, L=2, K=2, d=2, u=2, input_scale=10.0)
    E, F, _ = batch(cfg, 2)
    np.testing.assert_array_equal(forward(zero_params(cfg), E, F).data, 0.0)
