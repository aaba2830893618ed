"""U-Net localization network producing full-resolution 2-channel softmax maps."""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dips.errors import CheckpointError, InvalidInputError, InvalidParameterError

CHECKPOINT_FORMAT = "dips-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    encoder_depth: int = 4
    base_channels: int = 16
    max_channels: int = 128
    input_size: tuple[int, int] = (64, 64)  # (W, H)
    skip_connections: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.encoder_depth < 1 or self.base_channels < 1:
            raise InvalidParameterError("encoder_depth and base_channels must be >= 1")
        if not self.skip_connections:
            raise InvalidParameterError("the localization network always uses skip connections")
        step = 2 ** self.encoder_depth
        w, h = self.input_size
        if w % step or h % step:
            raise InvalidParameterError(f"input size {self.input_size} must be divisible by {step}")

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


@dataclass
class LocalizationMap:
    fg: np.ndarray  # M1
    bg: np.ndarray  # M2

    @property
    def stacked(self):
        return np.stack([self.fg, self.bg], axis=-1)


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a learned (transposed-conv) upsampling path."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        ch = [min(config.base_channels * 2 ** i, config.max_channels)
              for i in range(config.encoder_depth + 1)]
        self.encoders = nn.ModuleList(
            [_double_conv(3, ch[0])] + [_double_conv(ch[i], ch[i + 1]) for i in range(config.encoder_depth)])
        self.upsamplers = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in reversed(range(config.encoder_depth))])
        self.decoders = nn.ModuleList(
            [_double_conv(2 * ch[i], ch[i]) for i in reversed(range(config.encoder_depth))])
        self.head = nn.Conv2d(ch[0], 2, 1)
        self._init_weights(config.init_seed)

    def _init_weights(self, seed):
        g = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[0] * m.weight[0, 0].numel()
                with torch.no_grad():
                    m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
                    if m.bias is not None:
                        m.bias.zero_()

    def forward(self, x):
        w, h = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (h, w):
            raise InvalidInputError(f"expected (B, 3, {h}, {w}) input, got {tuple(x.shape)}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.upsamplers, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return torch.softmax(self.head(x), dim=1)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


@torch.no_grad()
def localize(model, image):
    """Run ``model`` on one ``H x W x 3`` image and return its :class:`LocalizationMap`."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected H x W x 3 image, got {image.shape}")
    was_training = model.training
    model.eval()
    x = torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=torch.float32)[None]
    probs = model(x)[0].double().numpy()
    model.train(was_training)
    return LocalizationMap(probs[0], probs[1])


def save_checkpoint(path, model, optimizer=None, epoch=0, extra=None, rng_state=None):
    """Write config, weights, optimizer state, epoch and RNG states.

    The file is produced by ``torch.save`` into memory first so a crash never
    leaves a half-written checkpoint behind.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "rng_state": rng_state if rng_state is not None else {"torch": torch.get_rng_state()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return payload


def load_checkpoint(path, config=None):
    """Rebuild the model stored at ``path``.

    If ``config`` is given it must equal the stored one; nothing is reshaped
    silently.
    """
    payload = read_checkpoint(path)
    stored = ModelConfig.from_dict(payload["model_config"])
    if config is not None and config != stored:
        raise CheckpointError(f"checkpoint config {stored} does not match requested {config}")
    model = UNet(stored)
    try:
        model.load_state_dict(payload["model_state"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"weights in {path} do not fit: {exc}") from exc
    model.eval()
    return model, payload
