import copy

import numpy as np
import pytest

from floodseg.errors import ConfigError, FormatError, ShapeError
from floodseg.model import (
    REFERENCE_CONFIGS,
    ArchitectureConfig,
    backward_step,
    forward,
    init_params,
    load_config,
    load_params,
    loss_only,
    params_from_bytes,
    params_to_bytes,
    save_params,
    validate_config,
)
from floodseg.optim import OptimConfig, OptimState, sgd_step

import gradcheck

DILATED = [n for n in REFERENCE_CONFIGS if n.startswith("dilated")]
DECONV = [n for n in REFERENCE_CONFIGS if n.startswith("deconv")]


@pytest.mark.parametrize("name", REFERENCE_CONFIGS)
@pytest.mark.parametrize("size", [25, 50, 128, 320])
def test_reference_configs_preserve_size(name, size):
    trace = validate_config(load_config(name), size)
    assert (trace[-1]["height"], trace[-1]["width"]) == (size, size)
    assert trace[-1]["channels"] == 2
    if name in DILATED:
        assert all((t["height"], t["width"]) == (size, size) for t in trace)


def test_deconv_trace_descends_and_returns():
    heights = [t["height"] for t in validate_config(load_config("deconv-1"), 50)]
    assert min(heights) < 50 and heights[0] == heights[-1] == 50
    assert heights == [50, 50, 50, 25, 25, 25, 12, 12, 12, 25, 25, 50, 50, 50]


def test_deconv_without_match_fails_at_final_layer():
    d = copy.deepcopy(gradcheck.SMALL_DECONV)
    d["layers"][5]["output_padding"] = 0
    cfg = ArchitectureConfig.from_dict(d)
    validate_config(cfg, 24)
    with pytest.raises(ShapeError, match=r"layer 7 \(conv\): output 24x24 does not match input 25x25"):
        validate_config(cfg, 25)


def test_config_errors():
    d = copy.deepcopy(gradcheck.SMALL_DILATED)
    d["layers"][2]["padding"] = 0
    with pytest.raises(ShapeError, match="layer 2"):
        validate_config(ArchitectureConfig.from_dict(d), 25)
    d = copy.deepcopy(gradcheck.SMALL_DILATED)
    d["layers"][-1]["out_channels"] = 3
    with pytest.raises(ShapeError, match="expected 2"):
        validate_config(ArchitectureConfig.from_dict(d), 9)
    d = copy.deepcopy(gradcheck.SMALL_DILATED)
    d["layers"][0]["bogus"] = 1
    with pytest.raises(ConfigError, match="layers/0"):
        ArchitectureConfig.from_dict(d)
    with pytest.raises(ConfigError):
        load_config("no-such-net")


def test_config_dict_round_trip():
    for name in REFERENCE_CONFIGS:
        cfg = load_config(name)
        assert ArchitectureConfig.from_dict(cfg.to_dict()) == cfg


def test_init_is_deterministic_with_zero_biases():
    cfg = load_config("deconv-2")
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.tensors(), b.tensors()))
    assert all(not bias.any() for bias in a.biases)
    c = init_params(cfg, 8)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_stddev_is_he_normal():
    cfg = ArchitectureConfig.from_dict({
        "name": "wide", "family": "dilated", "input_channels": 16, "num_classes": 2,
        "layers": [{"type": "conv", "out_channels": 80, "kernel": 3, "padding": "same"},
                   {"type": "conv", "out_channels": 2, "kernel": 1}],
    })
    w = init_params(cfg, 0).weights[0]
    fan_in = 16 * 9
    assert fan_in * 80 >= 10 ** 4
    assert abs(w.std() / np.sqrt(2 / fan_in) - 1) < 0.10


def test_forward_properties():
    cfg = load_config("dilated-2")
    params = init_params(cfg, 1)
    x = np.random.default_rng(0).standard_normal((4, 25, 25))
    p = forward(params, x)
    assert p.shape == (2, 25, 25)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)
    assert forward(params, x).tobytes() == p.tobytes()
    params.weights[-1][:] = 0
    assert np.all(forward(params, x) == 0.5)
    assert np.isclose(loss_only(params, x, np.zeros((25, 25), dtype=int)), np.log(2))


def test_whole_network_gradient_dilated():
    err, n = gradcheck.check_network(gradcheck.SMALL_DILATED, size=9)
    assert n < 5000
    assert err < 1e-3


def test_whole_network_gradient_deconv_batch():
    err, _ = gradcheck.check_network(gradcheck.SMALL_DECONV, size=9, n=2)
    assert err < 1e-3


def test_saturated_network_has_vanishing_gradient():
    cfg = ArchitectureConfig.from_dict(gradcheck.SMALL_DILATED)
    params = init_params(cfg, 0)
    x = np.random.default_rng(1).standard_normal((4, 9, 9))
    # bias alone pushes class 1 to certainty
    params.weights[-1][:] = 0
    params.biases[-1][:] = [-20.0, 20.0]
    loss, grads = backward_step(params, x, np.ones((9, 9), dtype=int))
    assert loss < 1e-6
    assert np.sqrt(sum(float(np.sum(g * g)) for g in grads)) < 1e-4


def test_one_sgd_step_reduces_loss():
    params = init_params(load_config("deconv-1"), 3)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 4, 25, 25))
    y = (x[:, 3] < 0).astype(int)
    before, grads = backward_step(params, x, y)
    tensors = params.tensors()
    sgd_step(tensors, grads, OptimState.zeros_like(tensors), 0.01, OptimConfig())
    assert loss_only(params, x, y) < before


def test_batch_gradient_is_mean_of_per_patch():
    params = init_params(load_config("dilated-1"), 2)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 12, 12))
    y = rng.integers(0, 2, size=(3, 12, 12))
    loss, grads = backward_step(params, x, y)
    singles = [backward_step(params, x[i], y[i]) for i in range(3)]
    assert np.isclose(loss, np.mean([s[0] for s in singles]))
    for k, g in enumerate(grads):
        np.testing.assert_allclose(g, np.mean([s[1][k] for s in singles], axis=0), atol=1e-12)


def test_params_round_trip(tmp_path):
    for name in REFERENCE_CONFIGS:
        params = init_params(load_config(name), 5)
        params.meta = {"patch_size": 25}
        save_params(params, tmp_path / f"{name}.fpar")
        back = load_params(tmp_path / f"{name}.fpar")
        assert back.config == params.config and back.seed == 5 and back.meta == {"patch_size": 25}
        assert all(a.tobytes() == b.tobytes() and a.dtype == b.dtype
                   for a, b in zip(params.tensors(), back.tensors()))
        assert params_to_bytes(back) == params_to_bytes(params)
    p32 = init_params(load_config("dilated-1"), 5, dtype=np.float32)
    assert params_from_bytes(params_to_bytes(p32)).weights[0].dtype == np.float32


def test_params_truncated_and_mismatched():
    data = params_to_bytes(init_params(load_config("dilated-1"), 0))
    for cut in (2, 7, 40, len(data) - 5):
        with pytest.raises(FormatError):
            params_from_bytes(data[:cut])
    with pytest.raises(ShapeError, match=r"layer \d+ \(conv\)"):
        params_from_bytes(data, load_config("dilated-2"))
