import numpy as np
import pytest

from casdm.model import DiffusionModel, ModelConfig, Variant, as_tensors
from casdm.netcore import ad
from casdm.networks import NetworkSpec, UNet, norm_groups, timestep_embedding
from casdm.schedule import make_schedule

SCHED = make_schedule("cosine", 100)


def small(variant="casdm", **kw):
    return DiffusionModel(ModelConfig(variant=variant, channels=8, blocks=1, levels=2, **kw), SCHED)


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(np.array([1, 50, 100]), 16)
    assert e.shape == (3, 16)
    assert np.abs(e).max() <= 1.0
    assert not np.allclose(e[0], e[1])


def test_norm_groups():
    assert norm_groups(32) == 8
    assert norm_groups(12) == 4
    assert norm_groups(3) == 1


@pytest.mark.parametrize("variant,out_c", [("ddpm_eps", 1), ("ddpm_x0", 1), ("dual", 3)])
def test_theta_output_channels(variant, out_c, rng):
    m = small(variant)
    p = m.init(0)
    x = rng.standard_normal((2, 8, 8, 1)).astype(np.float32)
    y = m.forward_theta(as_tensors(p)["theta"], ad.constant(x), np.array([3, 70]))
    assert y.shape == (2, 8, 8, out_c)
    assert y.dtype == np.float32


def test_casdm_forward_outputs(rng):
    m = small()
    p = m.init(0)
    assert m.net_names == ("theta", "phi")
    x = rng.standard_normal((2, 8, 8, 1)).astype(np.float32)
    out = m.forward(as_tensors(p), x, np.array([5, 60]))
    assert out.eps_pred.shape == out.x0_pred.shape == out.r.shape == (2, 8, 8, 1)
    # zero-initialised last layer: x0' = 0 and r = sigmoid(0)
    assert np.all(out.x0_pred.data == 0)
    np.testing.assert_allclose(out.r.data, 0.5)
    assert out.x0_star._parents == () and not out.x0_star.requires_grad


def test_rgb_and_concat_input(rng):
    m = DiffusionModel(
        ModelConfig(channels=8, blocks=1, levels=1, image_channels=3, phi_input="concat_x0star_eps"), SCHED
    )
    out = m.forward(as_tensors(m.init(1)), rng.standard_normal((1, 8, 8, 3)).astype(np.float32), 7)
    assert out.x0_pred.shape == (1, 8, 8, 3) and out.r.shape == (1, 8, 8, 1)


def test_init_deterministic_and_stream_isolated():
    a = small().init(3)
    b = small().init(3)
    assert a["theta"].equal(b["theta"]) and a["phi"].equal(b["phi"])
    # theta's init does not depend on whether phi exists
    assert small("ddpm_eps").init(3)["theta"].equal(a["theta"])
    assert not small().init(4)["theta"].equal(a["theta"])


def test_forward_deterministic(rng):
    m = small()
    p = as_tensors(m.init(0))
    x = rng.standard_normal((2, 8, 8, 1)).astype(np.float32)
    a = m.forward(p, x, 10)
    b = m.forward(p, x, 10)
    assert np.array_equal(a.eps_pred.data, b.eps_pred.data)


def test_wrong_input_shape():
    m = small()
    with pytest.raises(ValueError):
        m.forward(as_tensors(m.init(0)), np.zeros((1, 4, 4, 1), np.float32), 1)


def test_bad_config_values():
    for kw in ({"variant": "nope"}, {"phi_arch": "x"}, {"phi_input": "y"}):
        with pytest.raises(ValueError):
            ModelConfig(**kw)


def test_attention_block_runs_and_has_gradients(rng):
    net = UNet(NetworkSpec(in_channels=1, out_channels=1, base_channels=8, blocks=1, levels=2, attention=(False, True)))
    p = net.init(np.random.default_rng(0))
    assert any("attn" in k for k in p.keys())
    leaves = p.tensors(requires_grad=True)
    y = net(leaves, ad.constant(rng.standard_normal((1, 8, 8, 1)).astype(np.float32)), np.array([4]))
    g = ad.grad(ad.sum(ad.square(y)), leaves)
    attn = [k for k in g if "attn" in k]
    assert any(np.abs(g[k]).max() > 0 for k in attn)


def test_fixed_resolution_phi(rng):
    m = small(phi_arch="fixres_cnn")
    out = m.forward(as_tensors(m.init(0)), rng.standard_normal((1, 8, 8, 1)).astype(np.float32), 9)
    assert out.x0_pred.shape == (1, 8, 8, 1)


def test_default_size_parameter_count():
    m = DiffusionModel(ModelConfig(), SCHED)
    n = {k: v.num_params for k, v in m.init(0).items()}
    assert 1e5 < n["theta"] < 2e6 and 1e5 < n["phi"] < 2e6
    assert Variant(m.cfg.variant) is Variant.CASDM
