import numpy as np
import pytest

from dilseg import net, ops
from dilseg.errors import (
    ConfigError,
    ModelFormatError,
    ModelTruncatedError,
    ModelVersionError,
    ShapeError,
)
from dilseg.tensor import Tensor


def param_bytes(network):
    return b"".join(t.data.tobytes() for _, _, t in network.parameters())


@pytest.mark.parametrize("builder", [net.build_standard_fcn, net.build_dilated_fcn])
def test_shape_contract(builder):
    network = builder(num_classes=8, base_channels=4, seed=3)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 96, 96)))
    out = network.forward(x)
    assert out.shape == (8, 96, 96)


def test_batch_forward_and_purity():
    network = net.build_dilated_fcn(base_channels=4, seed=1)
    img = np.random.default_rng(2).normal(size=(3, 16, 16))
    batch = Tensor(np.stack([img, img]))
    out = network.forward(batch)
    assert out.shape == (2, 8, 16, 16)
    assert np.array_equal(out.data[0], out.data[1])


@pytest.mark.parametrize("builder", [net.build_standard_fcn, net.build_dilated_fcn])
def test_build_determinism(builder):
    a = builder(base_channels=4, seed=11)
    b = builder(base_channels=4, seed=11)
    c = builder(base_channels=4, seed=12)
    assert param_bytes(a) == param_bytes(b)
    assert param_bytes(a) != param_bytes(c)


def test_spatial_divisibility_error():
    network = net.build_dilated_fcn(base_channels=4, seed=0)
    with pytest.raises(ShapeError, match="divisible by 8"):
        network.forward(Tensor(np.zeros((3, 50, 48))))
    with pytest.raises(ShapeError, match="crop to 48x48"):
        network.forward(Tensor(np.zeros((3, 50, 50))))


def test_input_channel_check():
    network = net.build_dilated_fcn(base_channels=4, seed=0)
    with pytest.raises(ShapeError, match="channels"):
        network.forward(Tensor(np.zeros((4, 16, 16))))


def test_builder_arg_validation():
    with pytest.raises(ConfigError):
        net.build_standard_fcn(base_channels=3)
    with pytest.raises(ConfigError):
        net.build_dilated_fcn(num_classes=1)


def expected_counts(c, k):
    conv = lambda cin, cout, m: cout * cin * m * m + cout
    shared = conv(3, c, 3) + conv(c, 2 * c, 3) + conv(2 * c, 4 * c, 3)
    tail = conv(4 * c, 4 * c, 3) + conv(4 * c, k, 1)
    standard = shared + tail + k * k * 16 * 16
    dilated = shared + tail
    return standard, dilated


def test_parameter_count_matches_enumeration():
    for c in (4, 8):
        want_std, want_dil = expected_counts(c, 8)
        s = net.build_standard_fcn(base_channels=c, seed=0)
        d = net.build_dilated_fcn(base_channels=c, seed=0)
        assert s.parameter_count() == want_std
        assert d.parameter_count() == want_dil
        assert s.parameter_count() == sum(t.data.size for _, _, t in s.parameters())
    assert net.build_standard_fcn(base_channels=8, seed=0).parameter_count() == 31928
    assert net.build_dilated_fcn(base_channels=8, seed=0).parameter_count() == 15544


def test_dilated_layers_add_no_parameters():
    d = net.build_dilated_fcn(base_channels=8, seed=0)
    convs = [l for l in d.layers if l.kind == "conv"]
    for layer in convs:
        if layer.spec.dilation > 1:
            twin = ops.ConvSpec(layer.spec.kernel_size, layer.spec.in_channels,
                                layer.spec.out_channels, dilation=1)
            twin_count = (twin.out_channels * twin.in_channels * twin.kernel_size ** 2
                          + twin.out_channels)
            have = layer.weight.data.size + layer.bias.data.size
            assert have == twin_count


def test_receptive_span_recurrence_values():
    s = net.build_standard_fcn(base_channels=4, seed=0)
    d = net.build_dilated_fcn(base_channels=4, seed=0)
    assert s.receptive_span(0) == 1
    assert s.receptive_span(1) == 3
    assert s.receptive_span(8) == 18
    assert s.receptive_span(12) == 38  # full trunk before the upsampling head
    assert d.receptive_span(8) == 32  # deepest dilated conv included
    assert d.receptive_span(10) == 32
    # the dilated trunk out-reaches the standard trunk at equal depth
    assert d.receptive_span(8) > s.receptive_span(8)
    with pytest.raises(ShapeError):
        s.receptive_span(13)  # includes the transposed-conv head


def test_receptive_span_all_r1_twin_is_smaller():
    d = net.build_dilated_fcn(base_channels=4, seed=0)
    twin_layers = []
    for layer in d.layers[:9]:
        if layer.kind == "conv":
            spec = ops.ConvSpec(layer.spec.kernel_size, layer.spec.in_channels,
                                layer.spec.out_channels, dilation=1)
            twin_layers.append(net.ConvLayer(spec, layer.weight, layer.bias))
        else:
            twin_layers.append(layer)
    twin = net.Network(net.VARIANT_DILATED, twin_layers, 8, output_stride=2)
    assert twin.receptive_span(8) == 16
    assert d.receptive_span(8) == 32


def ones_trunk(specs):
    """Conv/pool/relu stack with all-ones kernels for influence probing."""
    layers = []
    for item in specs:
        if item[0] == "conv":
            _, m, cin, cout, r = item
            spec = ops.ConvSpec(m, cin, cout, dilation=r)
            layers.append(net.ConvLayer(
                spec, Tensor(np.ones((cout, cin, m, m))), Tensor.zeros((cout,))))
            layers.append(net.ReluLayer())
        else:
            layers.append(net.MaxPoolLayer(ops.PoolSpec(2, 2)))
    return layers


def probe_influenced_columns(layers, h, w, out_unit):
    """Input columns that influence one output unit, found by delta images."""

    def forward(arr):
        x = Tensor(arr)
        for layer in layers:
            x, _ = layer.forward(x)
        return x.data

    base = np.ones((layers[0].spec.in_channels, h, w))
    ref = forward(base)[out_unit]
    cols = []
    for j in range(w):
        probe = base.copy()
        probe[:, h // 2, j] += 5.0
        if forward(probe)[out_unit] != ref:
            cols.append(j)
    assert cols, "probe unit saw no input at all"
    assert cols[0] > 0 and cols[-1] < w - 1, "span clipped by the image border"
    return cols


def probe_column_span(layers, h, w, out_unit):
    """End-to-end extent of the influenced columns (the per-axis span)."""
    cols = probe_influenced_columns(layers, h, w, out_unit)
    return cols[-1] - cols[0] + 1


@pytest.mark.parametrize("r", [1, 2, 4])
def test_single_conv_span_probe(r):
    layers = ones_trunk([("conv", 3, 3, 2, r)])
    cols = probe_influenced_columns(layers[:1], 12, 24, (0, 6, 12))
    # one dilated layer touches exactly M columns spaced r apart ...
    assert cols == [12 - r, 12, 12 + r]
    # ... spanning (M-1)r+1 input cells
    assert cols[-1] - cols[0] + 1 == (3 - 1) * r + 1


def test_trunk_span_probe_matches_recurrence():
    dilated = ones_trunk([
        ("conv", 3, 3, 4, 1), ("pool",),
        ("conv", 3, 4, 4, 1), ("conv", 3, 4, 4, 2), ("conv", 3, 4, 4, 4),
    ])
    standard = ones_trunk([
        ("conv", 3, 3, 4, 1), ("pool",),
        ("conv", 3, 4, 4, 1), ("pool",), ("conv", 3, 4, 4, 1),
    ])
    d_net = net.Network(net.VARIANT_DILATED, dilated, 8, 2)
    s_net = net.Network(net.VARIANT_STANDARD, standard, 8, 8)
    d_cols = probe_influenced_columns(dilated, 64, 64, (0, 16, 16))
    s_cols = probe_influenced_columns(standard, 64, 64, (0, 8, 8))
    # stacked r=1 context below each dilated tap makes the trunk span solid
    assert d_cols == list(range(d_cols[0], d_cols[-1] + 1))
    assert s_cols == list(range(s_cols[0], s_cols[-1] + 1))
    d_span = d_cols[-1] - d_cols[0] + 1
    s_span = s_cols[-1] - s_cols[0] + 1
    assert d_span == d_net.receptive_span(len(dilated)) == 32
    assert s_span == s_net.receptive_span(len(standard)) == 18
    assert d_span > s_span


def test_zero_classifier_head_predicts_class_zero():
    for builder, head_idx in [(net.build_standard_fcn, 11), (net.build_dilated_fcn, 9)]:
        network = builder(base_channels=4, seed=5)
        head = network.layers[head_idx]
        assert head.kind == "conv" and head.spec.kernel_size == 1
        head.weight.data[...] = 0.0
        head.bias.data[...] = 0.0
        logits = network.forward(Tensor(np.random.default_rng(1).normal(size=(3, 16, 16))))
        assert np.all(logits.data == 0.0)
        assert np.all(ops.predict_labels(logits) == 0)


def test_gradient_reaches_every_parameter(rng):
    for builder in (net.build_standard_fcn, net.build_dilated_fcn):
        network = builder(base_channels=4, seed=9)
        image = Tensor(rng.uniform(0.0, 1.0, size=(3, 16, 16)))
        labels = rng.integers(0, 8, size=(16, 16))
        loss, grads = network.loss_and_gradients(image, labels)
        assert np.isfinite(loss)
        for i, layer in enumerate(network.layers):
            for name in layer.params():
                assert np.any(grads[i][name].data != 0.0), \
                    f"dead branch: layer {i} {name}"


def test_channel_chain_validated():
    bad = [
        net.ConvLayer(ops.ConvSpec(3, 3, 4), Tensor(np.zeros((4, 3, 3, 3))),
                      Tensor.zeros((4,))),
        net.ConvLayer(ops.ConvSpec(3, 8, 4), Tensor(np.zeros((4, 8, 3, 3))),
                      Tensor.zeros((4,))),
    ]
    with pytest.raises(ShapeError, match="channel chain"):
        net.Network(net.VARIANT_DILATED, bad, 8, 2)


def test_save_load_round_trip(tmp_path, rng):
    for builder in (net.build_standard_fcn, net.build_dilated_fcn):
        network = builder(base_channels=4, seed=21)
        path = tmp_path / f"{network.variant}.dseg"
        net.save_model(network, path)
        loaded = net.load_model(path)
        assert loaded.variant == network.variant
        assert loaded.num_classes == network.num_classes
        assert loaded.output_stride == network.output_stride
        assert len(loaded.layers) == len(network.layers)
        for a, b in zip(network.layers, loaded.layers):
            assert a.kind == b.kind
            if a.kind == "conv":
                assert a.spec == b.spec
        # parameters survive exactly at 32-bit precision
        for (_, _, p), (_, _, q) in zip(network.parameters(), loaded.parameters()):
            assert np.array_equal(q.data, p.data.astype(np.float32).astype(np.float64))
        # 32-bit storage perturbs near-zero logits arbitrarily in pointwise
        # relative terms, so the output agreement bound is normwise
        x = Tensor(rng.normal(size=(3, 16, 16)))
        a = network.forward(x).data
        b = loaded.forward(x).data
        assert np.max(np.abs(a - b)) / np.max(np.abs(a)) <= 1e-6
        # a second save of the loaded net is byte-identical
        path2 = tmp_path / "again.dseg"
        net.save_model(loaded, path2)
        assert path2.read_bytes() == path.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.dseg"
    p.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(ModelFormatError):
        net.load_model(p)


def test_load_rejects_bad_version(tmp_path):
    network = net.build_dilated_fcn(base_channels=4, seed=0)
    p = tmp_path / "model.dseg"
    net.save_model(network, p)
    blob = bytearray(p.read_bytes())
    blob[4:6] = (9).to_bytes(2, "little")
    p.write_bytes(bytes(blob))
    with pytest.raises(ModelVersionError):
        net.load_model(p)


def test_load_rejects_truncation(tmp_path):
    network = net.build_dilated_fcn(base_channels=4, seed=0)
    p = tmp_path / "model.dseg"
    net.save_model(network, p)
    blob = p.read_bytes()
    for cut in (3, 5, 7, 20, len(blob) // 2, len(blob) - 1):
        q = tmp_path / f"cut{cut}.dseg"
        q.write_bytes(blob[:cut])
        with pytest.raises(ModelTruncatedError):
            net.load_model(q)


def test_load_rejects_trailing_bytes(tmp_path):
    network = net.build_dilated_fcn(base_channels=4, seed=0)
    p = tmp_path / "model.dseg"
    net.save_model(network, p)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(ModelFormatError, match="trailing"):
        net.load_model(p)
