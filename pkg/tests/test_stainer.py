import numpy as np
import pytest
import torch
from torch import nn

from multistain.errors import CheckpointError, ConfigError
from multistain.prompts import build_prompt
from multistain.stainer import lora
from multistain.stainer.checkpoint import load_stainer, save_container, save_stainer
from multistain.stainer.model import (
    LatentKind, LatentTensor, ModelConfig, Stainer, apply_lora, designated_layers,
)
from multistain.tensors import to_tensor
from multistain.training.pair_encoder import PairEncoder


def make_stainer(attach=True, **cfg):
    torch.manual_seed(0)
    st = Stainer(ModelConfig(**cfg), PairEncoder())
    if attach:
        apply_lora(st)
    return st.eval()


@pytest.fixture(scope="module")
def stainer():
    return make_stainer()


# ------------------------------------------------------------------- shapes


def test_latent_shape(stainer, positive_record):
    x = stainer.encode_image(positive_record.input_tile)
    assert x.kind is LatentKind.CLEAN_INPUT
    assert tuple(x.values.shape) == (1, 8, 16, 16)


def test_encode_deterministic_and_finite(stainer, positive_record):
    a = stainer.encode_image(positive_record.input_tile).values
    b = stainer.encode_image(positive_record.input_tile).values
    assert torch.equal(a, b)
    black = np.zeros((64, 64, 3), np.uint8)
    assert torch.isfinite(stainer.encode_image(black).values).all()


def test_shape_mismatch_named(stainer):
    with pytest.raises(ConfigError, match=r"expected \(3, 64, 64\)"):
        stainer.encode_image(np.zeros((32, 32, 3), np.uint8))


@pytest.mark.parametrize("tile,df,widths", [(32, 2, (8, 16)), (64, 4, (16, 32, 32)), (64, 8, (8, 16, 16, 16))])
def test_shape_closure(tile, df, widths):
    unet = (16, 32) if tile // df >= 4 else (16,)
    st = make_stainer(tile_size=tile, downsample_factor=df, encoder_widths=widths, unet_widths=unet)
    out = st.virtual_stain(np.full((tile, tile, 3), 128, np.uint8), build_prompt("CYTO", "SP"))
    assert out.shape == (tile, tile, 3) and out.dtype == np.uint8


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(downsample_factor=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(tile_size=66).validate()
    with pytest.raises(ConfigError):
        ModelConfig(noise_sigma=-1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(lora_rank=0).validate()


# ------------------------------------------------------------------ prompts


def test_prompt_embedding(stainer):
    a = stainer.encode_prompt(build_prompt("NUCLEAR", "SP"))
    b = stainer.encode_prompt(build_prompt("NUCLEAR", "SP"))
    assert torch.equal(a.vector, b.vector)
    assert a.vector.shape == (32,)
    oov = stainer.encode_prompt("zyzzyva qwertyuiop")
    assert torch.isfinite(oov.vector).all()
    with pytest.raises(ConfigError):
        stainer.encode_prompt("   ")


def test_embedding_dim_mismatch(stainer, positive_record):
    xn = stainer.add_noise(stainer.encode_image(positive_record.input_tile), 0)
    with pytest.raises(ConfigError):
        stainer.denoise_step(xn, torch.zeros(16))


# -------------------------------------------------------------------- noise


def test_zero_sigma_is_identity(positive_record):
    st = make_stainer(noise_sigma=0.0)
    x = st.encode_image(positive_record.input_tile)
    xn = st.add_noise(x, seed=3)
    assert xn.kind is LatentKind.NOISED
    assert torch.equal(xn.values, x.values)


def test_noise_reproducible(stainer):
    v = torch.zeros(1, 8, 16, 16)
    assert torch.equal(stainer.noise_like(v, 5), stainer.noise_like(v, 5))
    assert not torch.equal(stainer.noise_like(v, 5), stainer.noise_like(v, 6))


def test_noise_moments(stainer):
    n = 10**6
    z = stainer.noise_like(torch.zeros(n), seed=11).double()
    sigma = stainer.cfg.noise_sigma
    assert abs(z.mean().item()) <= 4 * sigma / n ** 0.5
    assert abs(z.std().item() - sigma) <= 0.01 * sigma


def test_latent_kind_contracts(stainer, positive_record):
    x = stainer.encode_image(positive_record.input_tile)
    with pytest.raises(ValueError):
        stainer.denoise_step(x, stainer.encode_prompt("nuclear marker stain"))
    xn = stainer.add_noise(x, 0)
    with pytest.raises(ValueError):
        stainer.add_noise(xn, 0)
    with pytest.raises(ValueError):
        LatentTensor(torch.tensor([float("nan")]), LatentKind.NOISED, 0)


# ------------------------------------------------------------- zero-init


def test_zero_init_factors():
    st = make_stainer()
    for layer in lora.lora_layers(st):
        assert not layer.up.weight.any()
    for conv in st.skips:
        assert not conv.weight.any() and not conv.bias.any()


def test_attach_preserves_base_output(positive_record):
    st = make_stainer(attach=False)
    p = build_prompt("NUCLEAR", "SP")
    before = st.virtual_stain(positive_record.input_tile, p, seed=1)
    x = to_tensor(positive_record.input_tile)
    emb = st.encode_prompt(p).vector
    raw_before = st(x, emb, st.noise_like(torch.zeros(1, 8, 16, 16), 1))
    apply_lora(st)
    st.eval()
    raw_after = st(x, emb, st.noise_like(torch.zeros(1, 8, 16, 16), 1))
    assert (raw_after - raw_before).abs().max().item() <= 1e-6
    assert np.array_equal(before, st.virtual_stain(positive_record.input_tile, p, seed=1))


def test_unet_step_matches_base(stainer, positive_record):
    x = stainer.encode_image(positive_record.input_tile)
    xn = stainer.add_noise(x, 0)
    emb = stainer.encode_prompt("nuclear marker stain")
    y = stainer.denoise_step(xn, emb).values
    with stainer.base_only():
        y0 = stainer.denoise_step(xn, emb).values
    assert (y - y0).abs().max().item() <= 1e-6
    assert torch.equal(y, stainer.denoise_step(xn, emb).values)


def test_zero_skips_equal_no_skips(stainer, positive_record):
    x = stainer.encode_image(positive_record.input_tile)
    y = stainer.denoise_step(stainer.add_noise(x, 0), stainer.encode_prompt("cyto"))
    with_skips = stainer.decode_latent(y, x.skip_features, use_skips=True)
    without = stainer.decode_latent(y, None, use_skips=False)
    assert torch.equal(with_skips, without)
    assert with_skips.min() >= -1 and with_skips.max() <= 1
    assert tuple(with_skips.shape) == (1, 3, 64, 64)


def test_stale_or_missing_skips(stainer, positive_record, negative_record):
    x1 = stainer.encode_image(positive_record.input_tile)
    x2 = stainer.encode_image(negative_record.input_tile)
    y = stainer.denoise_step(stainer.add_noise(x1, 0), stainer.encode_prompt("cyto"))
    with pytest.raises(ValueError, match="stale"):
        stainer.decode_latent(y, x2.skip_features)
    with pytest.raises(ValueError):
        stainer.decode_latent(y, None)


# ------------------------------------------------------------- LoRA / groups


def test_rank_precondition():
    assert lora.wrap(nn.Linear(4, 4), 1, 1.0).rank == 1
    with pytest.raises(ConfigError):
        lora.wrap(nn.Linear(4, 4), 8, 1.0)
    with pytest.raises(ConfigError):
        lora.wrap(nn.Conv2d(4, 16, 3), 8, 1.0)
    with pytest.raises(ConfigError):
        lora.inject(nn.Sequential(), [], 2, 2.0)


def test_lora_scale_and_delta():
    base = nn.Linear(6, 5)
    layer = lora.wrap(base, 2, 8.0)
    assert layer.scale == 4.0
    with torch.no_grad():
        layer.up.weight.fill_(0.1)
    x = torch.randn(3, 6)
    delta = 4.0 * (x @ layer.down.weight.T) @ layer.up.weight.T
    assert torch.allclose(layer(x), base(x) + delta, atol=1e-6)


def test_every_part_has_targets(stainer):
    names = designated_layers(make_stainer(attach=False))
    assert all(names[k] for k in ("encoder", "unet", "decoder"))


def test_parameter_ratio_by_counting(stainer):
    counts = stainer.parameter_counts()
    # independent count over named parameters
    base = lora_n = first = skips = 0
    for name, p in stainer.named_parameters():
        if name.startswith("pair_encoder."):
            continue
        if name.startswith("skips."):
            skips += p.numel()
        elif name.startswith("unet.conv_in."):
            first += p.numel()
        elif name.endswith(("down.weight", "up.weight")) and ".base." not in name:
            lora_n += p.numel()
        else:
            base += p.numel()
    trainable = sum(p.numel() for p in stainer.parameters() if p.requires_grad)
    assert trainable == lora_n + first + skips == counts["trainable"]
    assert counts["base"] == base
    assert trainable / base < 0.10
    assert counts["trainable_ratio"] == pytest.approx(trainable / base)


def test_only_adapter_groups_trainable(stainer):
    for name, p in stainer.named_parameters():
        group = stainer._group_of(name)
        if name.startswith("pair_encoder.") or group == "base":
            assert not p.requires_grad, name
        else:
            assert p.requires_grad, name


def test_double_attach_rejected():
    with pytest.raises(ConfigError):
        apply_lora(make_stainer())


# --------------------------------------------------------------- inference


def test_single_unet_call(stainer, positive_record):
    before = stainer.unet.forward_calls
    stainer.virtual_stain(positive_record.input_tile, build_prompt("NUCLEAR", "SP"), seed=0)
    assert stainer.unet.forward_calls - before == 1


def test_virtual_stain_deterministic(stainer, positive_record):
    p = build_prompt("CYTO", "MP")
    a = stainer.virtual_stain(positive_record.input_tile, p, seed=4)
    b = stainer.virtual_stain(positive_record.input_tile, p, seed=4)
    assert np.array_equal(a, b)


def test_model_card_declares_conditioning(stainer):
    card = stainer.model_card()
    assert "FiLM" in card["conditioning"]
    assert card["markers"] == ["NUCLEAR", "CYTO"]
    assert card["prompt_bank_version"]


# -------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, positive_record):
    st = make_stainer()
    with torch.no_grad():
        for layer in lora.lora_layers(st):
            layer.up.weight.normal_(0, 0.01)
    path = save_stainer(tmp_path / "s.pt", st, {"prompt_mode": "MxP"})
    again, meta = load_stainer(path)
    assert meta["prompt_mode"] == "MxP"
    assert again.base_checksum() == st.base_checksum()
    p = build_prompt("NUCLEAR", "SP")
    assert np.array_equal(st.virtual_stain(positive_record.input_tile, p, 2),
                          again.virtual_stain(positive_record.input_tile, p, 2))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_stainer(tmp_path / "missing.pt")
    save_container(tmp_path / "enc.pt", "pair_encoder", {})
    with pytest.raises(CheckpointError, match="expected 'stainer'"):
        load_stainer(tmp_path / "enc.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_stainer(tmp_path / "junk.pt")


def test_checkpoint_detects_base_tampering(tmp_path):
    st = make_stainer()
    path = save_stainer(tmp_path / "s.pt", st)
    blob = torch.load(path, weights_only=True)
    key = next(iter(blob["base_state"]))
    blob["base_state"][key] = blob["base_state"][key] + 1
    torch.save(blob, path)
    with pytest.raises(CheckpointError, match="checksum"):
        load_stainer(path)
