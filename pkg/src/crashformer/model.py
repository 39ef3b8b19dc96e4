"""Five-component multimodal risk classifier.

Latent widths are a fixed contract: sequence encoder -> 224, image
encoder -> 128, demographic encoder -> 28, fused vector 380, output
probabilities 2. The sequence encoder is an encoder-only frequency
transformer: each layer applies a learned complex filter to the lowest
FFT modes, removes the moving-average trend, and runs a position-wise
feed-forward, keeping the seasonal part throughout. The image encoder
stacks large-kernel-attention stages; disabled modalities are replaced
by learned constant vectors so the fusion width never changes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import ClassWeights
from .errors import ValidationError

SEQ_OUT = 224
IMG_OUT = 128
DEMO_OUT = 28
FUSED_OUT = SEQ_OUT + IMG_OUT + DEMO_OUT
N_CLASSES = 2


@dataclass
class ModelConfig:
    seq_len: int = 4
    n_features: int = 27
    d_model: int = 64
    n_enc_layers: int = 2
    n_modes: int = 2
    decomp_kernel: int = 3
    img_size: int = 256
    img_channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    demo_dim: int = 144
    demo_hidden: int = 64
    clf_hidden: int = 128
    dropout: float = 0.1
    use_img: bool = True
    use_demo: bool = True

    def __post_init__(self):
        if self.decomp_kernel % 2 == 0:
            raise ValidationError(f"decomposition kernel {self.decomp_kernel} must be odd")
        if self.n_modes > self.seq_len // 2 + 1:
            raise ValidationError(f"n_modes {self.n_modes} exceeds {self.seq_len // 2 + 1} "
                                  f"available frequencies for length {self.seq_len}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError(f"dropout {self.dropout} outside [0, 1)")


class Latents(NamedTuple):
    seq: torch.Tensor    # (B, 224)
    img: torch.Tensor    # (B, 128)
    demo: torch.Tensor   # (B, 28)
    fused: torch.Tensor  # (B, 380)


def series_decompose(x: torch.Tensor, kernel: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Split (B, L, d) into (seasonal, trend); trend is the centered moving
    average under reflection padding, so seasonal + trend == x exactly."""
    if kernel % 2 == 0:
        raise ValidationError(f"moving-average kernel {kernel} must be odd")
    if kernel == 1:
        return torch.zeros_like(x), x
    pad = kernel // 2
    if pad >= x.shape[1]:
        raise ValidationError(f"kernel {kernel} too large for length {x.shape[1]}")
    xt = x.transpose(1, 2)
    trend = F.avg_pool1d(F.pad(xt, (pad, pad), mode="reflect"), kernel, stride=1)
    trend = trend.transpose(1, 2)
    return x - trend, trend


def feb_forward(x: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Frequency-enhanced block: real FFT over the length axis, multiply the
    lowest `modes` bins by learned complex (d x d) matrices, zero the rest,
    inverse FFT back. `weights` is complex with shape (modes, d, d)."""
    b, length, d = x.shape
    n_freq = length // 2 + 1
    modes = weights.shape[0]
    if modes > n_freq:
        raise ValidationError(f"{modes} modes requested but only {n_freq} available")
    x_hat = torch.fft.rfft(x, dim=1)
    out_hat = torch.zeros_like(x_hat)
    out_hat[:, :modes] = torch.einsum("bmd,mde->bme", x_hat[:, :modes], weights)
    return torch.fft.irfft(out_hat, n=length, dim=1)


class FrequencyBlock(nn.Module):
    def __init__(self, d_model: int, n_modes: int):
        super().__init__()
        self.n_modes = n_modes
        self.weight_re = nn.Parameter(0.02 * torch.randn(n_modes, d_model, d_model))
        self.weight_im = nn.Parameter(0.02 * torch.randn(n_modes, d_model, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return feb_forward(x, torch.complex(self.weight_re, self.weight_im))


class FrequencyEncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.kernel = cfg.decomp_kernel
        self.freq = FrequencyBlock(cfg.d_model, cfg.n_modes)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, 4 * cfg.d_model),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(4 * cfg.d_model, cfg.d_model),
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.freq(x))
        x, _ = series_decompose(x, self.kernel)
        x = x + self.drop(self.ff(x))
        x, _ = series_decompose(x, self.kernel)
        return x


class SequenceEncoder(nn.Module):
    """(B, K, 27) history -> (B, 224)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.n_features, cfg.d_model)
        self.pos = nn.Parameter(0.02 * torch.randn(1, cfg.seq_len, cfg.d_model))
        self.layers = nn.ModuleList(FrequencyEncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.head = nn.Linear(cfg.seq_len * cfg.d_model, SEQ_OUT)

    def forward(self, history: torch.Tensor) -> torch.Tensor:
        if history.shape[1:] != (self.cfg.seq_len, self.cfg.n_features):
            raise ValidationError(f"expected history (B, {self.cfg.seq_len}, "
                                  f"{self.cfg.n_features}), got {tuple(history.shape)}")
        x = self.embed(history) + self.pos
        for layer in self.layers:
            x = layer(x)
        return self.head(x.flatten(1))


def lka_forward(x: torch.Tensor, dw5: nn.Conv2d, dw7_dil3: nn.Conv2d, pw: nn.Conv2d) -> torch.Tensor:
    """Large-kernel attention: the conv chain builds an attention map that
    gates the input elementwise."""
    attn = pw(dw7_dil3(dw5(x)))
    return attn * x


class LargeKernelAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.dw5 = nn.Conv2d(channels, channels, 5, padding=2, groups=channels)
        self.dw7_dil3 = nn.Conv2d(channels, channels, 7, padding=9, dilation=3, groups=channels)
        self.pw = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return lka_forward(x, self.dw5, self.dw7_dil3, self.pw)


class AttentionStageBlock(nn.Module):
    """Residual pair used inside each image stage: gated large-kernel
    attention, then a pointwise MLP."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.lka = LargeKernelAttention(channels)
        self.proj_out = nn.Conv2d(channels, channels, 1)
        self.norm2 = nn.GroupNorm(1, channels)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, 2 * channels, 1),
            nn.GELU(),
            nn.Conv2d(2 * channels, channels, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.proj_out(self.lka(F.gelu(self.proj_in(self.norm1(x)))))
        x = x + self.mlp(self.norm2(x))
        return x


class ImageEncoder(nn.Module):
    """(B, 3, H, W) map tile -> (B, 128)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.img_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, chans[0], 7, stride=4, padding=3),
            nn.GroupNorm(1, chans[0]),
            nn.GELU(),
        )
        stages = []
        for i, c in enumerate(chans):
            if i > 0:
                stages.append(nn.Sequential(
                    nn.Conv2d(chans[i - 1], c, 3, stride=2, padding=1),
                    nn.GroupNorm(1, c),
                ))
            stages.append(AttentionStageBlock(c))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(chans[-1], IMG_OUT)

    def forward(self, tiles: torch.Tensor) -> torch.Tensor:
        if tiles.dim() != 4 or tiles.shape[1] != 3:
            raise ValidationError(f"expected tiles (B, 3, H, W), got {tuple(tiles.shape)}")
        x = self.stem(tiles)
        x = self.stages(x)
        return self.head(x.mean(dim=(2, 3)))


class DemoEncoder(nn.Module):
    """(B, 144) normalized demographics -> (B, 28)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.demo_dim, cfg.demo_hidden),
            nn.GELU(),
            nn.Linear(cfg.demo_hidden, DEMO_OUT),
        )

    def forward(self, demo: torch.Tensor) -> torch.Tensor:
        return self.net(demo)


def fuse(seq: torch.Tensor, img: torch.Tensor, demo: torch.Tensor) -> torch.Tensor:
    """Fixed-order concatenation [seq | img | demo] -> (B, 380)."""
    if not (seq.shape[0] == img.shape[0] == demo.shape[0]):
        raise ValidationError(f"batch mismatch: {seq.shape[0]}, {img.shape[0]}, {demo.shape[0]}")
    return torch.cat([seq, img, demo], dim=1)


def probabilities(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=1)


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor, weights: ClassWeights) -> torch.Tensor:
    """Mean over the batch of -w_y * log p_y, computed on logits via
    log-softmax for stability."""
    log_p = F.log_softmax(logits, dim=1)
    w = torch.tensor([weights.w0, weights.w1], dtype=logits.dtype, device=logits.device)
    picked = log_p.gather(1, labels.view(-1, 1).long()).squeeze(1)
    return (-w[labels.long()] * picked).mean()


class CrashFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.seq_encoder = SequenceEncoder(cfg)
        self.img_encoder = ImageEncoder(cfg)
        self.demo_encoder = DemoEncoder(cfg)
        # Stand-ins for disabled modalities keep the fused width at 380
        # and the classifier comparable across ablation arms.
        self.img_placeholder = nn.Parameter(0.02 * torch.randn(IMG_OUT))
        self.demo_placeholder = nn.Parameter(0.02 * torch.randn(DEMO_OUT))
        self.classifier = nn.Sequential(
            nn.Linear(FUSED_OUT, cfg.clf_hidden),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.clf_hidden, N_CLASSES),
        )

    def latents(self, history: torch.Tensor, tiles: Optional[torch.Tensor],
                demo: Optional[torch.Tensor]) -> Latents:
        b = history.shape[0]
        seq = self.seq_encoder(history)
        if self.cfg.use_img:
            if tiles is None:
                raise ValidationError("model uses tiles but none were given")
            img = self.img_encoder(tiles)
        else:
            img = self.img_placeholder.unsqueeze(0).expand(b, -1)
        if self.cfg.use_demo:
            if demo is None:
                raise ValidationError("model uses demographics but none were given")
            dem = self.demo_encoder(demo)
        else:
            dem = self.demo_placeholder.unsqueeze(0).expand(b, -1)
        return Latents(seq=seq, img=img, demo=dem, fused=fuse(seq, img, dem))

    def forward(self, history: torch.Tensor, tiles: Optional[torch.Tensor] = None,
                demo: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.classifier(self.latents(history, tiles, demo).fused)

    def predict_proba(self, history, tiles=None, demo=None) -> torch.Tensor:
        return probabilities(self.forward(history, tiles, demo))


def save_checkpoint(model: CrashFormer, path: str | Path) -> None:
    """Single zip archive: parameter arrays under their dotted state-dict
    names plus the config as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(asdict(model.cfg), sort_keys=True))
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy())
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> CrashFormer:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        cfg = ModelConfig(**json.loads(zf.read("config.json")))
        model = CrashFormer(cfg)
        state = {}
        for name in model.state_dict():
            data = zf.read(f"params/{name}.npy")
            state[name] = torch.from_numpy(np.load(io.BytesIO(data)))
        model.load_state_dict(state)
    model.eval()
    return model
