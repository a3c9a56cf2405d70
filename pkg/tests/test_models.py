import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compmod import tensor as T
from compmod.errors import CompatibilityError, ConfigError, DimensionError, FormatError
from compmod.models import (
    FusionStrategy,
    MlpSpec,
    decode_checkpoint,
    default_specs,
    encode_checkpoint,
    fuse,
    fused_input,
    init_params,
    layers,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
)


def test_mlp_spec_validation():
    with pytest.raises(ConfigError):
        MlpSpec((4,))
    with pytest.raises(ConfigError):
        MlpSpec((4, 0))


def test_init_is_deterministic_with_zero_biases():
    specs = {"encoder": MlpSpec((4, 3))}
    a, b = init_params(specs, 7), init_params(specs, 7)
    assert a.tobytes() == b.tobytes()
    assert init_params(specs, 8).tobytes() != a.tobytes()
    assert np.all(a.values["encoder.0.b"] == 0.0)


def test_init_weight_distribution_is_centred_and_bounded():
    fan_in = 100
    p = init_params({"encoder": MlpSpec((fan_in, 1000))}, 3)
    w = p.values["encoder.0.W"].ravel()
    assert w.size == 100_000
    bound = 1 / np.sqrt(fan_in)
    sigma = bound / np.sqrt(3)  # std of U(-b, b)
    assert abs(w.mean()) < 3 * sigma / np.sqrt(w.size)
    assert np.abs(w).max() <= bound


def test_target_networks_copy_online_ones():
    specs = default_specs(6, rep_dim=4, embed_dim=3, encoder_hidden=(5,), projector_hidden=(4,), base="byol")
    p = init_params(specs, 0)
    assert p.subset("target")
    for k, v in p.subset("target").items():
        np.testing.assert_array_equal(v, p.values[k.replace("target_", "")])


def test_mlp_forward_zero_and_identity():
    x = T.const(np.arange(6.0).reshape(2, 3))
    zero = [(T.const(np.zeros((3, 2))), T.const(np.zeros((1, 2))))]
    np.testing.assert_array_equal(mlp_forward(zero, x).value, np.zeros((2, 2)))
    ident = [(T.const(np.eye(3)), T.const(np.zeros((1, 3))))]
    np.testing.assert_array_equal(mlp_forward(ident, x).value, x.value)
    with pytest.raises(DimensionError):
        mlp_forward(zero, T.const(np.ones((2, 4))))


def test_mlp_forward_gradients_for_every_weight():
    specs = {"encoder": MlpSpec((3, 4, 2))}
    p = init_params(specs, 1)
    rng = np.random.default_rng(0)
    x = T.const(rng.normal(size=(5, 3)))
    w_out = T.const(rng.normal(size=(5, 2)))
    for name, value in p.values.items():
        def f(v, name=name):
            binding = p.bind(overrides={name: v.value})
            binding[name] = v
            return T.total(T.mul(mlp_forward(layers(binding, "encoder", specs["encoder"]), x), w_out))

        # nudge biases off zero so the rectifier kinks are not hit exactly
        assert T.grad_check(f, value + 0.01) < 1e-5, name


def test_fusion_strategy_alpha_rules():
    FusionStrategy("mixup", alpha=0.3)
    FusionStrategy("mixup", sample_alpha=True)
    for bad in (dict(kind="mixup"), dict(kind="concat_repr", alpha=0.5), dict(kind="mixup", alpha=1.5), dict(kind="sum")):
        with pytest.raises(ConfigError):
            FusionStrategy(**bad)


def test_mixup_endpoints_and_symmetry():
    rng = np.random.default_rng(2)
    h1, h2 = T.const(rng.normal(size=(3, 4))), T.const(rng.normal(size=(3, 4)))
    mix = FusionStrategy("mixup", alpha=1.0)
    np.testing.assert_array_equal(fused_input(h1, h2, mix).value, h1.value)
    half = FusionStrategy("mixup", alpha=0.5)
    np.testing.assert_array_equal(fused_input(h1, h1, half).value, h1.value)
    a = fused_input(h1, h2, FusionStrategy("mixup", alpha=0.3)).value
    b = fused_input(h2, h1, FusionStrategy("mixup", alpha=0.7)).value
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_concat_repr_head_widths_at_paper_scale():
    specs = default_specs(32, rep_dim=512, embed_dim=128)
    assert specs["compmod"].widths == (1024, 512, 128)
    emb = default_specs(32, rep_dim=512, embed_dim=128, fusion=FusionStrategy("concat_embed"))
    assert emb["embed_fusion"].widths == (256, 128, 128)
    mix = default_specs(32, rep_dim=512, embed_dim=128, fusion=FusionStrategy("mixup", alpha=0.5))
    assert mix["compmod"].widths == (512, 512, 128)


def test_fuse_checks_strategy_against_params():
    specs = default_specs(6, rep_dim=4, embed_dim=3, encoder_hidden=(5,), projector_hidden=(4,))
    p = init_params(specs, 0)
    h = T.const(np.ones((2, 4)))
    with pytest.raises(ConfigError):
        fuse(h, h, FusionStrategy("concat_embed"), p, p.bind())
    with pytest.raises(DimensionError):
        fuse(h, h, FusionStrategy("mixup", alpha=0.5), p, p.bind())
    assert fuse(h, h, FusionStrategy(), p, p.bind()).shape == (2, 3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["concat_repr", "mixup"]))
def test_fuse_is_permutation_equivariant(seed, kind):
    rng = np.random.default_rng(seed)
    strategy = FusionStrategy(kind, alpha=0.4 if kind == "mixup" else None)
    specs = default_specs(6, rep_dim=4, embed_dim=3, encoder_hidden=(5,), projector_hidden=(4,), fusion=strategy)
    p = init_params(specs, seed)
    h1, h2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    full = fuse(T.const(h1), T.const(h2), strategy, p, p.bind()).value
    permuted = fuse(T.const(h1[perm]), T.const(h2[perm]), strategy, p, p.bind()).value
    np.testing.assert_allclose(permuted, full[perm], rtol=0, atol=1e-14)


def test_checkpoint_roundtrip_and_layout(tmp_path):
    specs = default_specs(6, rep_dim=4, embed_dim=3, encoder_hidden=(5,), projector_hidden=(4,))
    p = init_params(specs, 0)
    cfg = {"tau": 0.5}
    blob = encode_checkpoint(p, cfg)
    assert blob[:4] == b"CMPD" and blob[4] == 1
    length = int.from_bytes(blob[5:9], "little")
    assert len(blob) == 9 + length + 8 * p.n_params()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, p, cfg)
    q, manifest = load_checkpoint(path, expect_loss_config=cfg)
    assert q.tobytes() == p.tobytes()
    assert list(q.values) == list(p.values)
    assert manifest["params"][0]["group"] == "theta"
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, expect_loss_config={"tau": 0.4})
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:4] + b"\x02" + blob[5:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-8])
