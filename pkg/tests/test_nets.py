import numpy as np
import pytest
import torch

from gaitdis import nets
from gaitdis.errors import InvalidInputError
from gaitdis.nets import (
    APPEARANCE_DIM,
    CANONICAL_DIM,
    POSE_DIM,
    GaitModel,
    decode_features,
    encode_frames,
    classify,
    init_weights,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    split_features,
)

torch.manual_seed(0)


@pytest.fixture(scope="module")
def model():
    return init_weights(GaitModel(n_train_subjects=5), seed=1).eval()


def random_frames(rng, n=2):
    return rng.uniform(0, 1, size=(n, 64, 32, 3)).astype(np.float32)


# ------------------------------------------------------------------- shapes


def test_feature_dims(model):
    rng = np.random.default_rng(0)
    feats = encode_frames(model, random_frames(rng, 3))
    assert feats.f_a.shape == (3, APPEARANCE_DIM)
    assert feats.f_c.shape == (3, CANONICAL_DIM)
    assert feats.f_p.shape == (3, POSE_DIM)


def test_zero_frame_finite(model):
    feats = encode_frames(model, np.zeros((1, 64, 32, 3), dtype=np.float32))
    for arr in (feats.f_a, feats.f_c, feats.f_p):
        assert np.isfinite(arr).all()


def test_encoder_layer_shape_contract():
    # spatial trace of the conv/pool stack for the standard 64x32 input
    expectations = {
        "conv1": (64, 64, 32),
        "pool1": (64, 32, 16),
        "conv2": (256, 32, 16),
        "pool2": (256, 16, 8),
        "conv3": (512, 8, 4),
        "pool3": (512, 4, 2),
    }
    model = GaitModel(n_train_subjects=2)
    seen = {}

    def hook(name):
        def fn(_mod, _inp, out):
            seen[name] = tuple(out.shape[1:])

        return fn

    for name, mod in model.encoder.features.named_children():
        mod.register_forward_hook(hook(name))
    with torch.no_grad():
        model.encoder(torch.zeros(1, 3, 64, 32))
    for name, shape in expectations.items():
        assert seen[name] == shape, f"{name}: {seen[name]} != {shape}"


def test_encoder_large_model_extra_conv():
    model = GaitModel(n_train_subjects=2, large_model=True)
    names = [n for n, _ in model.encoder.features.named_children()]
    assert "conv4" in names
    with torch.no_grad():
        feat = model.encoder(torch.zeros(2, 3, 64, 32))
    assert feat.shape == (2, 320)


def test_decoder_layer_shape_contract():
    expectations = {
        "tconv1": (256, 8, 4),
        "tconv2": (128, 16, 8),
        "tconv3": (64, 32, 16),
        "tconv4": (3, 64, 32),
    }
    model = GaitModel(n_train_subjects=2)
    seen = {}

    def hook(name):
        def fn(_mod, _inp, out):
            seen[name] = tuple(out.shape[1:])

        return fn

    for name, mod in model.decoder.net.named_children():
        mod.register_forward_hook(hook(name))
    with torch.no_grad():
        model.decoder(torch.zeros(1, 320))
    for name, shape in expectations.items():
        assert seen[name] == shape


def test_decode_shape_and_open_unit_range(model):
    rng = np.random.default_rng(1)
    out = decode_features(
        model,
        rng.standard_normal((2, 128)).astype(np.float32),
        rng.standard_normal((2, 128)).astype(np.float32),
        rng.standard_normal((2, 64)).astype(np.float32),
    )
    assert out.shape == (2, 64, 32, 3)
    assert out.min() > 0.0 and out.max() < 1.0  # sigmoid is strictly inside (0,1)


def test_decode_encode_shape_round_trip(model):
    rng = np.random.default_rng(2)
    frames = random_frames(rng, 2)
    feats = encode_frames(model, frames)
    recon = decode_features(model, feats.f_a, feats.f_c, feats.f_p)
    assert recon.shape == frames.shape


def test_split_order_is_appearance_canonical_pose():
    feat = torch.arange(320, dtype=torch.float32).unsqueeze(0)
    f_a, f_c, f_p = split_features(feat)
    assert f_a[0, 0] == 0 and f_a.shape[-1] == 128
    assert f_c[0, 0] == 128 and f_c.shape[-1] == 128
    assert f_p[0, 0] == 256 and f_p.shape[-1] == 64


# --------------------------------------------------------------------- lstm


def test_lstm_length_one(model):
    out = model.lstm_outputs(torch.zeros(1, 64))
    assert out.shape == (1, 256)


def test_lstm_empty_sequence_error(model):
    with pytest.raises(InvalidInputError):
        model.lstm_outputs(torch.zeros(0, 64))


def test_lstm_causality_bit_exact(model):
    torch.manual_seed(3)
    seq = torch.randn(8, 64)
    base = model.lstm_outputs(seq)
    perturbed = seq.clone()
    k = 5
    perturbed[k] += 10.0
    out = model.lstm_outputs(perturbed)
    assert torch.equal(out[:k], base[:k])
    assert not torch.allclose(out[k:], base[k:])


# -------------------------------------------------------------- classifiers


def test_classifier_uniform_at_zero_input_zero_weights():
    cls = torch.nn.Linear(128, 7)
    torch.nn.init.zeros_(cls.weight)
    torch.nn.init.zeros_(cls.bias)
    probs = classify(cls, torch.zeros(3, 128))
    assert torch.allclose(probs, torch.full((3, 7), 1 / 7))


def test_classifier_probabilities_sum_to_one(model):
    torch.manual_seed(4)
    probs = classify(model.classifier_sg, torch.randn(10, 128))
    assert probs.min() > 0
    assert torch.allclose(probs.sum(dim=-1), torch.ones(10), atol=1e-6)


def test_classifier_argmax_matches_dense_oracle(model):
    torch.manual_seed(5)
    x = torch.randn(20, 256)
    probs = classify(model.classifier_dg, x)
    W = model.classifier_dg.weight.detach().numpy().astype(np.float64)
    b = model.classifier_dg.bias.detach().numpy().astype(np.float64)
    logits = x.numpy().astype(np.float64) @ W.T + b
    assert np.array_equal(probs.argmax(dim=-1).numpy(), logits.argmax(axis=1))


def test_classifier_width_mismatch(model):
    with pytest.raises(InvalidInputError):
        classify(model.classifier_sg, torch.zeros(1, 64))


# ---------------------------------------------------------- gradient checks


from fdcheck import directional_fd_check  # noqa: E402


def small_double_model(k=3):
    model = init_weights(GaitModel(n_train_subjects=k), seed=7).double()
    model.eval()  # frozen batch statistics make the loss twice differentiable in eval
    return model


def test_encoder_gradient_fd():
    rng = np.random.default_rng(10)
    model = small_double_model()
    x = torch.from_numpy(rng.uniform(0, 1, size=(2, 3, 64, 32)))
    proj = torch.from_numpy(rng.standard_normal(320))
    params = [model.encoder.fc.weight, model.encoder.features.conv3.weight]

    def fn():
        return (model.encoder(x) * proj).sum()

    directional_fd_check(fn, params, rng, module=model.encoder)


def test_decoder_gradient_fd():
    rng = np.random.default_rng(11)
    model = small_double_model()
    f = torch.from_numpy(rng.standard_normal((2, 320)))
    proj = torch.from_numpy(rng.standard_normal((3, 64, 32)))
    params = [model.decoder.fc.weight, model.decoder.net.tconv2.weight]

    def fn():
        return (model.decoder(f) * proj).sum()

    directional_fd_check(fn, params, rng, module=model.decoder)


def test_lstm_gradient_fd_through_5_steps():
    rng = np.random.default_rng(12)
    model = small_double_model()
    seq = torch.from_numpy(rng.standard_normal((5, 2, 64)))
    proj = torch.from_numpy(rng.standard_normal(256))
    params = [model.lstm.weight_ih_l0, model.lstm.weight_hh_l2]

    def fn():
        return (model.lstm_outputs(seq) * proj).sum()

    directional_fd_check(fn, params, rng)


def test_gradient_reaches_input():
    rng = np.random.default_rng(13)
    model = small_double_model()
    x = torch.from_numpy(rng.uniform(0.2, 0.8, size=(1, 3, 64, 32))).requires_grad_(True)
    loss = model.encoder(x).sum()
    (grad,) = torch.autograd.grad(loss, x)
    assert torch.isfinite(grad).all()
    assert grad.abs().sum() > 0


# --------------------------------------------------------------- parameters


@pytest.mark.parametrize(
    "large,k,expected",
    [
        (False, 2, 6_891_719),
        (False, 16, 6_897_123),
        (True, 2, 8_269_511),
        (True, 16, 8_274_915),
    ],
)
def test_parameter_count_regression(large, k, expected):
    assert parameter_count(GaitModel(n_train_subjects=k, large_model=large)) == expected


def test_init_deterministic():
    a = init_weights(GaitModel(n_train_subjects=3), seed=9)
    b = init_weights(GaitModel(n_train_subjects=3), seed=9)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)


def test_classifier_bias_starts_zero():
    model = init_weights(GaitModel(n_train_subjects=4), seed=2)
    assert torch.all(model.classifier_sg.bias == 0)
    assert torch.all(model.classifier_dg.bias == 0)


# --------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = init_weights(GaitModel(n_train_subjects=4, large_model=True), seed=3)
    # make batch-norm running stats non-trivial
    model.train()
    with torch.no_grad():
        model.encoder(torch.rand(4, 3, 64, 32))
    path = tmp_path / "m.gdc"
    save_checkpoint(path, model, iteration=17, subjects=["a", "b", "c", "d"])
    loaded, meta = load_checkpoint(path)
    assert meta["iteration"] == 17
    assert meta["subjects"] == ["a", "b", "c", "d"]
    assert loaded.large_model and loaded.n_train_subjects == 4
    ref = model.state_dict()
    for name, tensor in loaded.state_dict().items():
        assert torch.equal(tensor, ref[name]), name
    # save -> load -> save produces identical bytes
    path2 = tmp_path / "m2.gdc"
    save_checkpoint(path2, loaded, iteration=17, subjects=["a", "b", "c", "d"])
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_architecture_mismatch(tmp_path):
    model = init_weights(GaitModel(n_train_subjects=2), seed=0)
    path = tmp_path / "m.gdc"
    save_checkpoint(path, model, 0, ["a", "b"])
    import json

    from gaitdis.containers import read_container, write_container

    meta, arrays = read_container(path)
    arrays["bogus.weight"] = np.zeros(3, dtype=np.float32)
    write_container(path, "checkpoint", meta, arrays)
    with pytest.raises(InvalidInputError):
        load_checkpoint(path)
