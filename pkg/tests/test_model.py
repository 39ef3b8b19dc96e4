import math

import numpy as np
import pytest
import torch

from crashformer.dataset import ClassWeights
from crashformer.errors import ValidationError
from crashformer.model import (CrashFormer, DemoEncoder, ImageEncoder,
                               LargeKernelAttention, Latents, ModelConfig, SequenceEncoder,
                               feb_forward, fuse, load_checkpoint,
                               probabilities, save_checkpoint, series_decompose,
                               weighted_ce)

from gradcheck_util import max_fd_error

TINY = ModelConfig(seq_len=4, d_model=8, n_enc_layers=1, n_modes=2, img_size=16,
                   img_channels=[2, 3, 4], demo_hidden=8, clf_hidden=16, dropout=0.0)


def tiny_model(seed=0) -> CrashFormer:
    torch.manual_seed(seed)
    return CrashFormer(TINY).eval()


def tiny_batch(b=2, seed=0, img_size=16):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, 4, 27, generator=g),
            torch.rand(b, 3, img_size, img_size, generator=g),
            torch.randn(b, 144, generator=g))


def test_config_invariants():
    with pytest.raises(ValidationError):
        ModelConfig(decomp_kernel=4)
    with pytest.raises(ValidationError):
        ModelConfig(seq_len=4, n_modes=4)  # only 3 rfft bins for L=4
    with pytest.raises(ValidationError):
        ModelConfig(dropout=1.0)


def test_series_decompose_constant_and_kernel_one():
    x = torch.full((2, 6, 3), 2.5)
    seasonal, trend = series_decompose(x, 3)
    torch.testing.assert_close(trend, x)
    torch.testing.assert_close(seasonal, torch.zeros_like(x))
    seasonal, trend = series_decompose(torch.randn(2, 5, 4), 1)
    assert seasonal.abs().max() == 0


def test_series_decompose_hand_oracle():
    # x = [1,2,3,4], kernel 3, reflection padding -> [2,1,2,3,4,3]
    # windows: (2+1+2)/3, (1+2+3)/3, (2+3+4)/3, (3+4+3)/3
    x = torch.tensor([[[1.0], [2.0], [3.0], [4.0]]])
    seasonal, trend = series_decompose(x, 3)
    expected = torch.tensor([[[5 / 3], [2.0], [3.0], [10 / 3]]])
    torch.testing.assert_close(trend, expected)
    torch.testing.assert_close(seasonal + trend, x)


def test_series_decompose_reconstruction_random():
    x = torch.randn(3, 16, 5, dtype=torch.float64)
    for kernel in (1, 3, 5, 7):
        seasonal, trend = series_decompose(x, kernel)
        assert (seasonal + trend - x).abs().max() < 1e-12


def test_series_decompose_errors():
    with pytest.raises(ValidationError):
        series_decompose(torch.randn(1, 4, 1), 2)
    with pytest.raises(ValidationError):
        series_decompose(torch.randn(1, 2, 1), 7)


def test_feb_identity_and_zero():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(3, 8, 5, generator=g)
    n_freq = 8 // 2 + 1
    eye = torch.eye(5, dtype=torch.complex64).unsqueeze(0).repeat(n_freq, 1, 1)
    torch.testing.assert_close(feb_forward(x, eye), x, atol=1e-5, rtol=1e-5)
    zero = torch.zeros(n_freq, 5, 5, dtype=torch.complex64)
    assert feb_forward(x, zero).abs().max() == 0


def test_feb_matches_manual_dft_oracle():
    # L=4, d=1, x=[1,0,0,0], 3 modes with fixed complex weights; the oracle
    # builds the full Hermitian spectrum and inverts it by explicit sums.
    x = torch.tensor([[[1.0], [0.0], [0.0], [0.0]]], dtype=torch.float64)
    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 1, 1)) + 1j * rng.normal(size=(3, 1, 1))
    w[0] = w[0].real  # rfft bin 0 of a real series is real; keep the product real
    w[2] = w[2].real  # Nyquist bin likewise
    got = feb_forward(x, torch.from_numpy(w)).numpy()[0, :, 0]

    sig = np.array([1.0, 0.0, 0.0, 0.0])
    spec = np.zeros(3, dtype=complex)
    for k in range(3):
        spec[k] = sum(sig[n] * np.exp(-2j * np.pi * k * n / 4) for n in range(4))
        spec[k] *= w[k, 0, 0]
    full = np.array([spec[0], spec[1], spec[2], np.conj(spec[1])])
    manual = np.array([(full * np.exp(2j * np.pi * np.arange(4) * n / 4)).sum() / 4
                       for n in range(4)])
    np.testing.assert_allclose(got, manual.real, atol=1e-12)
    assert np.abs(manual.imag).max() < 1e-12


def test_feb_mode_bound():
    x = torch.randn(1, 4, 2)
    with pytest.raises(ValidationError):
        feb_forward(x, torch.zeros(4, 2, 2, dtype=torch.complex64))


def test_seq_encoder_shape_and_batch_consistency():
    torch.manual_seed(0)
    enc = SequenceEncoder(TINY).eval()
    x = torch.randn(2, 4, 27)
    out = enc(x)
    assert out.shape == (2, 224)
    both = torch.cat([x, x], dim=0)
    out2 = enc(both)
    torch.testing.assert_close(out2[:2], out2[2:])
    with pytest.raises(ValidationError):
        enc(torch.randn(2, 5, 27))


def test_seq_encoder_gradient_check():
    torch.manual_seed(3)
    enc = SequenceEncoder(TINY).double().eval()
    x = torch.randn(2, 4, 27, dtype=torch.float64)
    target = torch.randn(2, 224, dtype=torch.float64)
    make_loss = lambda: ((enc(x) - target) ** 2).mean()
    names = {"embed.weight", "embed.bias", "pos",
             "layers.0.freq.weight_re", "layers.0.freq.weight_im",
             "layers.0.ff.0.weight", "layers.0.ff.3.bias"}
    assert max_fd_error(enc, make_loss, names=names) <= 1e-3


def naive_conv2d(x, w, b, pad, dilation=1, groups=1):
    """Loop cross-correlation over a single (C,H,W) image."""
    c_out, c_in_g, kh, kw = w.shape
    c_in, h, wdt = x.shape
    xp = np.zeros((c_in, h + 2 * pad, wdt + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wdt] = x
    out = np.zeros((c_out, h, wdt))
    per_group = c_in // groups
    for co in range(c_out):
        gi = co // (c_out // groups)
        for i in range(h):
            for j in range(wdt):
                acc = 0.0
                for ci in range(c_in_g):
                    for ki in range(kh):
                        for kj in range(kw):
                            ii = i + ki * dilation
                            jj = j + kj * dilation
                            if ii < xp.shape[1] and jj < xp.shape[2]:
                                acc += xp[gi * per_group + ci, ii, jj] * w[co, ci, ki, kj]
                out[co, i, j] = acc + b[co]
    return out


def test_lka_zero_input_and_shape():
    torch.manual_seed(0)
    lka = LargeKernelAttention(3)
    x = torch.zeros(2, 3, 12, 12)
    assert lka(x).abs().max() == 0
    y = lka(torch.randn(2, 3, 12, 12))
    assert y.shape == (2, 3, 12, 12)


def test_lka_matches_naive_convolution_oracle():
    torch.manual_seed(9)
    lka = LargeKernelAttention(1).double()
    x = torch.randn(1, 1, 9, 9, dtype=torch.float64)
    with torch.no_grad():
        got = lka(x).numpy()[0]
    xn = x.numpy()[0]
    step1 = naive_conv2d(xn, lka.dw5.weight.detach().numpy(),
                         lka.dw5.bias.detach().numpy(), pad=2)
    step2 = naive_conv2d(step1, lka.dw7_dil3.weight.detach().numpy(),
                         lka.dw7_dil3.bias.detach().numpy(), pad=9, dilation=3)
    attn = naive_conv2d(step2, lka.pw.weight.detach().numpy(),
                        lka.pw.bias.detach().numpy(), pad=0)
    np.testing.assert_allclose(got, attn * xn, atol=1e-12)


def test_lka_identity_gating():
    lka = LargeKernelAttention(1).double()
    with torch.no_grad():
        for conv in (lka.dw5, lka.dw7_dil3, lka.pw):
            conv.weight.zero_()
            conv.bias.zero_()
        lka.dw5.weight[0, 0, 2, 2] = 1.0
        lka.dw7_dil3.weight[0, 0, 3, 3] = 1.0
        lka.pw.weight[0, 0, 0, 0] = 1.0
    x = torch.randn(1, 1, 9, 9, dtype=torch.float64)
    torch.testing.assert_close(lka(x), x * x)


def test_img_encoder_shape_and_no_scale_collapse():
    torch.manual_seed(0)
    enc = ImageEncoder(TINY).eval()
    out = enc(torch.rand(2, 3, 16, 16))
    assert out.shape == (2, 128)
    flat = torch.full((1, 3, 16, 16), 0.25)
    a, b = enc(flat), enc(2 * flat)
    assert (a - b).abs().max() > 1e-6
    with pytest.raises(ValidationError):
        enc(torch.rand(2, 16, 16))


def test_img_encoder_gradient_check():
    torch.manual_seed(5)
    enc = ImageEncoder(TINY).double().eval()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    target = torch.randn(1, 128, dtype=torch.float64)
    make_loss = lambda: ((enc(x) - target) ** 2).mean()
    names = {"stem.0.weight", "stages.0.lka.dw5.weight", "stages.0.lka.pw.weight",
             "stages.1.0.weight", "stages.2.mlp.0.weight", "head.bias"}
    assert max_fd_error(enc, make_loss, names=names) <= 1e-3


def test_demo_encoder_shape_zero_and_gradient():
    torch.manual_seed(1)
    enc = DemoEncoder(TINY).double().eval()
    x = torch.randn(3, 144, dtype=torch.float64)
    assert enc(x).shape == (3, 28)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    assert enc(x).abs().max() == 0
    torch.manual_seed(2)
    enc = DemoEncoder(TINY).double().eval()
    target = torch.randn(3, 28, dtype=torch.float64)
    make_loss = lambda: ((enc(x) - target) ** 2).mean()
    assert max_fd_error(enc, make_loss) <= 1e-3


def test_fuse_contract():
    g = torch.Generator().manual_seed(0)
    seq = torch.randn(4, 224, generator=g)
    img = torch.randn(4, 128, generator=g)
    demo = torch.randn(4, 28, generator=g)
    fused = fuse(seq, img, demo)
    assert fused.shape == (4, 380)
    torch.testing.assert_close(fused[:, :224], seq)
    torch.testing.assert_close(fused[:, 224:352], img)
    torch.testing.assert_close(fused[:, 352:], demo)
    perm = torch.tensor([2, 0, 3, 1])
    torch.testing.assert_close(fuse(seq[perm], img[perm], demo[perm]), fused[perm])
    with pytest.raises(ValidationError):
        fuse(seq, img[:3], demo)


def test_softmax_probabilities_examples():
    probs = probabilities(torch.tensor([[0.0, 0.0]]))
    torch.testing.assert_close(probs, torch.tensor([[0.5, 0.5]]))
    shifted = probabilities(torch.tensor([[3.0, 5.0], [3.0 + 7.0, 5.0 + 7.0]]))
    torch.testing.assert_close(shifted[0], shifted[1], atol=1e-6, rtol=0)
    probs = probabilities(torch.tensor([[2.0, 0.0]]))
    assert probs[0, 0].item() == pytest.approx(0.8808, abs=5e-5)
    assert probs[0, 1].item() == pytest.approx(0.1192, abs=5e-5)
    assert float(probs.sum(dim=1)) == pytest.approx(1.0, abs=1e-6)


def test_weighted_ce_closed_forms():
    w = ClassWeights(1.0, 2.0)
    sure = torch.tensor([[100.0, -100.0]], dtype=torch.float64)
    assert weighted_ce(sure, torch.tensor([0]), w).item() == pytest.approx(0.0, abs=1e-12)
    even = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    loss = weighted_ce(even, torch.tensor([1]), w)
    assert loss.item() == pytest.approx(2.0 * math.log(2.0), rel=1e-12)


def test_weighted_ce_matches_scalar_loop():
    rng = np.random.default_rng(6)
    logits = torch.tensor(rng.normal(size=(8, 2)))
    labels = torch.tensor(rng.integers(0, 2, size=8))
    w = ClassWeights(0.516, 15.327)
    got = weighted_ce(logits, labels, w).item()
    total = 0.0
    for i in range(8):
        z0, z1 = logits[i, 0].item(), logits[i, 1].item()
        m = max(z0, z1)
        log_norm = m + math.log(math.exp(z0 - m) + math.exp(z1 - m))
        y = int(labels[i])
        log_p = (z1 if y else z0) - log_norm
        total += -(w.w1 if y else w.w0) * log_p
    assert got == pytest.approx(total / 8, abs=1e-10)


def test_weighted_ce_gradient_check():
    rng = np.random.default_rng(7)
    base = torch.tensor(rng.normal(size=(4, 2)))
    labels = torch.tensor([0, 1, 1, 0])
    w = ClassWeights(0.7, 3.1)
    logits = base.clone().requires_grad_(True)
    weighted_ce(logits, labels, w).backward()
    analytic = logits.grad.numpy()
    eps = 1e-3
    numeric = np.zeros_like(analytic)
    for i in range(4):
        for j in range(2):
            up = base.clone()
            up[i, j] += eps
            dn = base.clone()
            dn[i, j] -= eps
            numeric[i, j] = (weighted_ce(up, labels, w) - weighted_ce(dn, labels, w)).item() / (2 * eps)
    err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-12)
    assert err <= 1e-3


def test_forward_shapes_and_latents():
    model = tiny_model()
    hist, tiles, demo = tiny_batch()
    latents = model.latents(hist, tiles, demo)
    assert isinstance(latents, Latents)
    assert latents.seq.shape == (2, 224)
    assert latents.img.shape == (2, 128)
    assert latents.demo.shape == (2, 28)
    assert latents.fused.shape == (2, 380)
    logits = model(hist, tiles, demo)
    assert logits.shape == (2, 2)
    probs = model.predict_proba(hist, tiles, demo)
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(2), atol=1e-6, rtol=0)


def test_ablation_disabled_image_is_bitwise_tile_independent():
    cfg = ModelConfig(**{**TINY.__dict__, "use_img": False})
    torch.manual_seed(0)
    model = CrashFormer(cfg).eval()
    hist, tiles, demo = tiny_batch()
    other_tiles = torch.rand(2, 3, 16, 16)
    a = model(hist, tiles, demo)
    b = model(hist, other_tiles, demo)
    assert torch.equal(a, b)
    c = model(hist, None, demo)
    assert torch.equal(a, c)


def test_ablation_four_arms_structural():
    hist, tiles, demo = tiny_batch()
    for use_img, use_demo in [(True, True), (False, True), (True, False), (False, False)]:
        cfg = ModelConfig(**{**TINY.__dict__, "use_img": use_img, "use_demo": use_demo})
        torch.manual_seed(0)
        model = CrashFormer(cfg).eval()
        latents = model.latents(hist, tiles if use_img else None, demo if use_demo else None)
        assert latents.fused.shape == (2, 380)
        assert model(hist, tiles if use_img else None, demo if use_demo else None).shape == (2, 2)


def test_missing_modal_input_raises():
    model = tiny_model()
    hist, tiles, demo = tiny_batch()
    with pytest.raises(ValidationError):
        model(hist, None, demo)
    with pytest.raises(ValidationError):
        model(hist, tiles, None)


def test_inference_determinism():
    hist, tiles, demo = tiny_batch(seed=11)
    a = tiny_model(seed=4)(hist, tiles, demo)
    b = tiny_model(seed=4)(hist, tiles, demo)
    assert torch.equal(a, b)


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model(seed=8)
    hist, tiles, demo = tiny_batch(seed=3)
    before = model(hist, tiles, demo)
    path = tmp_path / "model.zip"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.cfg == model.cfg
    after = loaded(hist, tiles, demo)
    torch.testing.assert_close(after, before, atol=1e-6, rtol=0)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "nope.zip")
