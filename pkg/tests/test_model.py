import struct

import numpy as np
import pytest
import torch
from torch import nn

from liver4d import model
from liver4d.model import ModelConfigError, UNetConfig, WeightFileError

from gradcheck import finite_difference_check, tiny_double_unet


@pytest.fixture(scope="module")
def default_net():
    return model.build(UNetConfig())


@pytest.fixture(scope="module")
def narrow_net():
    return model.build(UNetConfig(base_filters=4))


def test_default_output_shape(default_net):
    x = np.random.default_rng(0).normal(size=(1, 128, 128, 3))
    assert model.forward(default_net, x).shape == (1, 128, 128, 1)


def test_batch_of_209_shape_and_duplicates(narrow_net):
    entry = np.random.default_rng(1).normal(size=(128, 128, 3)).astype(np.float32)
    out = model.forward(narrow_net, np.broadcast_to(entry, (209, 128, 128, 3)))
    assert out.shape == (209, 128, 128, 1)
    assert np.all(np.isfinite(out))
    assert all(np.array_equal(out[0], out[k]) for k in range(1, 209))


def test_encoder_ladder_and_latent_width(default_net):
    shapes = default_net.feature_shapes(128, 128)
    assert [s[1] for s in shapes] == [128, 64, 32, 16]
    assert [s[0] for s in shapes] == [64, 128, 256, 512]
    assert UNetConfig().latent_channels == 512


def test_decoder_receives_matching_skip_widths(default_net):
    encoder_out = [blk[-2].out_channels for blk in default_net.encoder]
    for d, (up, blk) in enumerate(zip(default_net.upsamplers, default_net.decoder)):
        skip = encoder_out[-2 - d]
        assert up.out_channels == skip
        assert blk[0].in_channels == up.out_channels + skip


def test_parameter_counts():
    assert model.count_parameters(nn.Conv2d(3, 32, 3)) == 896
    assert model.count_parameters(nn.Conv2d(64, 1, 1)) == 65


def test_default_parameter_count_in_band(default_net):
    n = model.count_parameters(default_net)
    assert 5.3e6 <= n <= 7.6e6
    assert n == 5_355_137


def test_wider_upsampling_kernel_moves_count_up():
    wide = model.count_parameters(model.build(UNetConfig(upsample_kernel=3)))
    assert model.count_parameters(model.build(UNetConfig())) < wide <= 7.6e6


def test_zero_weights_give_zero_output():
    net = model.build(UNetConfig(input_shape=(16, 16, 3), base_filters=2))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    out = model.forward(net, np.random.default_rng(2).normal(size=(3, 16, 16, 3)))
    assert np.array_equal(out, np.zeros_like(out))


def test_inference_is_deterministic(narrow_net):
    x = np.random.default_rng(3).normal(size=(4, 128, 128, 3))
    assert np.array_equal(model.forward(narrow_net, x), model.forward(narrow_net, x))


def test_entries_do_not_depend_on_batch_companions(tiny_model_config):
    net = model.build(tiny_model_config)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(7, 16, 16, 3))
    batched = model.forward(net, x)
    for k in range(7):
        assert np.array_equal(model.forward(net, x[k:k + 1]), batched[k:k + 1])


def test_shape_mismatch_is_an_error(tiny_model_config):
    net = model.build(tiny_model_config)
    with pytest.raises(ValueError):
        model.forward(net, np.zeros((1, 16, 16, 2)))
    with pytest.raises(ValueError):
        model.forward(net, np.zeros((16, 16, 3)))


def test_build_is_seeded():
    a = model.build(UNetConfig(input_shape=(16, 16, 3), base_filters=2, seed=5))
    b = model.build(UNetConfig(input_shape=(16, 16, 3), base_filters=2, seed=5))
    c = model.build(UNetConfig(input_shape=(16, 16, 3), base_filters=2, seed=6))
    for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb)
    assert not torch.equal(a.encoder[0][0].weight, c.encoder[0][0].weight)


@pytest.mark.parametrize("kwargs", [dict(input_shape=(100, 128, 3)), dict(decoder_blocks=2),
                                    dict(base_filters=0), dict(kernel=4), dict(dropout_rate=1.0),
                                    dict(input_shape=(128, 128))])
def test_invalid_config_is_rejected(kwargs):
    with pytest.raises(ModelConfigError):
        UNetConfig(**kwargs)


def test_dropout_only_in_decoder(default_net):
    assert not any(isinstance(m, nn.Dropout) for m in default_net.encoder.modules())
    assert sum(isinstance(m, nn.Dropout) for m in default_net.decoder.modules()) == 3


def test_training_mode_is_reproducible_with_fixed_rng(tiny_model_config):
    net = model.build(UNetConfig(input_shape=(16, 16, 3), base_filters=2, dropout_rate=0.5))
    x = model.to_tensor(np.random.default_rng(6).normal(size=(2, 16, 16, 3)))
    net.train()
    torch.manual_seed(0)
    a = net(x)
    torch.manual_seed(0)
    b = net(x)
    assert torch.equal(a, b)


# ------------------------------------------------------------- weight files


def test_save_load_round_trip_is_exact(tmp_path, tiny_model_config):
    net = model.build(tiny_model_config)
    path = model.save_weights(net, tmp_path / "w.weights", subject_id="S3")
    back = model.load_weights(path)
    x = np.random.default_rng(7).normal(size=(3, 16, 16, 3))
    assert np.array_equal(model.forward(back, x), model.forward(net, x))
    assert back.subject_id == "S3"
    assert back.config == tiny_model_config


def test_weight_file_byte_layout(tmp_path, tiny_model_config):
    net = model.build(tiny_model_config)
    raw = model.save_weights(net, tmp_path / "w.weights").read_bytes()
    assert raw[:4] == b"L4DW"
    version, hlen = struct.unpack("<IQ", raw[4:16])
    assert version == 1
    header = model.read_weight_header(tmp_path / "w.weights")
    first = header["tensors"][0]
    data = raw[16 + hlen:]
    arr = np.frombuffer(data, "<f4", count=int(np.prod(first["shape"])), offset=first["offset"])
    expected = net.state_dict()[first["name"]].numpy().ravel()
    assert np.array_equal(arr, expected)
    assert header["data_nbytes"] == len(data)


def test_load_with_wrong_config_names_tensor(tmp_path, tiny_model_config):
    path = model.save_weights(model.build(tiny_model_config), tmp_path / "w.weights")
    other = UNetConfig(input_shape=(16, 16, 3), base_filters=4)
    with pytest.raises(WeightFileError, match="encoder.0.0.weight"):
        model.load_weights(path, other)


def test_truncated_file_is_rejected(tmp_path, tiny_model_config):
    path = model.save_weights(model.build(tiny_model_config), tmp_path / "w.weights")
    raw = path.read_bytes()
    for cut in (10, 40, len(raw) - 5):
        bad = tmp_path / f"cut{cut}.weights"
        bad.write_bytes(raw[:cut])
        with pytest.raises(WeightFileError):
            model.load_weights(bad)


def test_corrupted_payload_is_rejected(tmp_path, tiny_model_config):
    path = model.save_weights(model.build(tiny_model_config), tmp_path / "w.weights")
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightFileError, match="checksum"):
        model.load_weights(path)


def test_unknown_version_is_rejected(tmp_path, tiny_model_config):
    path = model.save_weights(model.build(tiny_model_config), tmp_path / "w.weights")
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightFileError, match="version"):
        model.load_weights(path)


# ------------------------------------------------------------- gradients


def test_gradients_match_finite_differences():
    net, x, y = tiny_double_unet(base_filters=2, seed=1)
    worst, checked = finite_difference_check(net, x, y)
    assert checked == model.count_parameters(net)
    assert worst < 1e-3
