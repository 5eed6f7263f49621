"""U-Net mapping a 3-channel 2D input to one predicted slice.

Weight file layout (all integers little-endian)::

    bytes 0..3    magic b"L4DW"
    bytes 4..7    uint32 format version (currently 1)
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header: {"format_version", "config", "subject_id",
                  "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...],
                  "data_nbytes", "data_sha256"}
    remainder     concatenated tensor payloads, little-endian float32 (int64 for
                  batch-norm counters), C order;
                  each ``offset`` is relative to the start of this block
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

MAGIC = b"L4DW"
FORMAT_VERSION = 1
REPORTED_PARAMETER_COUNT = 6.8e6
_DTYPES = {"float32": "<f4", "int64": "<i8"}


class ModelConfigError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


@dataclass
class UNetConfig:
    input_shape: tuple[int, int, int] = (128, 128, 3)
    base_filters: int = 32
    encoder_blocks: int = 4
    decoder_blocks: int = 3
    leaky_slope: float = 0.1
    dropout_rate: float = 0.15
    use_batchnorm: bool = False
    kernel: int = 3
    upsample_kernel: int = 2
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(x) for x in self.input_shape)
        self.validate()

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelConfigError(f"input_shape must be (H, W, C), got {self.input_shape}")
        if self.base_filters < 1 or self.encoder_blocks < 1:
            raise ModelConfigError("base_filters and encoder_blocks must be positive")
        if self.decoder_blocks != self.encoder_blocks - 1:
            raise ModelConfigError("decoder_blocks must equal encoder_blocks - 1 (one per pooling step)")
        factor = 2 ** self.decoder_blocks
        if self.input_shape[0] % factor or self.input_shape[1] % factor:
            raise ModelConfigError(f"spatial size must be divisible by {factor}")
        if self.kernel % 2 != 1:
            raise ModelConfigError("kernel must be odd for size-preserving padding")
        if self.upsample_kernel not in (2, 3, 4):
            raise ModelConfigError("upsample_kernel must be 2, 3 or 4")
        if not 0 <= self.dropout_rate < 1:
            raise ModelConfigError("dropout_rate must lie in [0, 1)")

    @property
    def latent_channels(self) -> int:
        return self.base_filters * 2 ** self.encoder_blocks

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def _conv(cin, cout, config: UNetConfig) -> list[nn.Module]:
    layers = [nn.Conv2d(cin, cout, config.kernel, padding=config.kernel // 2)]
    if config.use_batchnorm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(config.leaky_slope))
    return layers


def _upsample(cin, cout, k) -> nn.ConvTranspose2d:
    # stride 2 with output exactly twice the input size
    padding, output_padding = {2: (0, 0), 3: (1, 1), 4: (1, 0)}[k]
    return nn.ConvTranspose2d(cin, cout, k, stride=2, padding=padding, output_padding=output_padding)


class UNet(nn.Module):
    """Encoder blocks: conv to the incoming width, conv doubling it; pooling after all but the last.

    With 32 base filters the encoder widths are 64, 128, 256, 512.  Each decoder
    block halves the width with a stride-2 transposed convolution, concatenates
    the matching encoder output and applies conv, dropout, conv.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        in_ch = config.input_shape[2]
        self.encoder = nn.ModuleList()
        width = config.base_filters
        for j in range(config.encoder_blocks):
            first = width if j == 0 else in_ch
            out = 2 * first
            self.encoder.append(nn.Sequential(*_conv(in_ch, first, config), *_conv(first, out, config)))
            in_ch = out
        self.pool = nn.MaxPool2d(2)
        self.upsamplers = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for _ in range(config.decoder_blocks):
            half = in_ch // 2
            self.upsamplers.append(_upsample(in_ch, half, config.upsample_kernel))
            self.decoder.append(nn.Sequential(
                *_conv(2 * half, half, config),
                nn.Dropout(config.dropout_rate),
                *_conv(half, half, config),
            ))
            in_ch = half
        self.head = nn.Conv2d(in_ch, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is ``(B, C, H, W)``; returns ``(B, 1, H, W)``."""
        skips = []
        for j, block in enumerate(self.encoder):
            x = block(x)
            if j < len(self.encoder) - 1:
                skips.append(x)
                x = self.pool(x)
        for up, block in zip(self.upsamplers, self.decoder):
            x = up(x)
            x = block(torch.cat([x, skips.pop()], dim=1))
        # 1x1 head as an explicit channel sum: the library 1x1 conv couples batch entries numerically
        weight = self.head.weight.reshape(1, -1, 1, 1)
        return torch.sum(x * weight, dim=1, keepdim=True) + self.head.bias.reshape(1, 1, 1, 1)

    def feature_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """``(channels, H, W)`` after each encoder block."""
        shapes = []
        h, w = height, width
        with torch.no_grad():
            x = torch.zeros(1, self.config.input_shape[2], h, w)
            for j, block in enumerate(self.encoder):
                x = block(x)
                shapes.append(tuple(x.shape[1:]))
                if j < len(self.encoder) - 1:
                    x = self.pool(x)
        return shapes


def build(config: UNetConfig | None = None) -> UNet:
    """Build a U-Net with seeded uniform fan-in initialisation."""
    config = config or UNetConfig()
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = UNet(config)
    return model.to(memory_format=torch.channels_last)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def to_tensor(batch) -> torch.Tensor:
    """``(B, H, W, C)`` array to a channels-last ``(B, C, H, W)`` float tensor."""
    t = torch.from_numpy(np.array(batch, dtype=np.float32))
    return t.permute(0, 3, 1, 2).contiguous(memory_format=torch.channels_last)


def forward(model: UNet, batch, micro_batch: int = 1) -> np.ndarray:
    """Inference on ``(B, H, W, C)`` input; returns ``(B, H, W, 1)``.

    Entries are pushed through in fixed-size micro-batches (zero padded), so an
    entry's output never depends on what else is in the batch.  oneDNN picks
    batch-size dependent kernels for some layer shapes otherwise.
    """
    batch = np.asarray(batch, dtype=np.float32)
    expected = tuple(model.config.input_shape)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ValueError(f"expected a batch of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                         f"got {batch.shape}")
    model.eval()
    n = batch.shape[0]
    out = np.empty(batch.shape[:3] + (1,), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, n, micro_batch):
            chunk = batch[start:start + micro_batch]
            k = chunk.shape[0]
            if k < micro_batch:
                chunk = np.concatenate([chunk, np.zeros((micro_batch - k,) + expected, np.float32)])
            pred = model(to_tensor(chunk)).permute(0, 2, 3, 1)
            out[start:start + k] = pred[:k].numpy()
    return out


# ------------------------------------------------------------- weight files


def save_weights(model: UNet, path, subject_id: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        dtype = "int64" if arr.dtype.kind in "iu" else "float32"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        blob = arr.tobytes(order="C")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    data = b"".join(blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "subject_id": subject_id,
        "tensors": tensors,
        "data_nbytes": len(data),
        "data_sha256": hashlib.sha256(data).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(data)
    tmp.replace(path)
    return path


def read_weight_header(path) -> dict:
    return _read(Path(path))[0]


def _read(path: Path) -> tuple[dict, bytes]:
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    if len(raw) < 16 + hlen:
        raise WeightFileError(f"{path}: truncated header")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    data = raw[16 + hlen:]
    if len(data) != header["data_nbytes"]:
        raise WeightFileError(f"{path}: truncated tensor data ({len(data)} of {header['data_nbytes']} bytes)")
    if hashlib.sha256(data).hexdigest() != header["data_sha256"]:
        raise WeightFileError(f"{path}: checksum mismatch")
    return header, data


def load_weights(path, config: UNetConfig | None = None) -> UNet:
    """Load a model; with ``config`` given, the file must match it tensor by tensor."""
    header, data = _read(Path(path))
    stored = UNetConfig.from_dict(header["config"])
    model = build(config if config is not None else stored)
    expected = model.state_dict()
    names = [t["name"] for t in header["tensors"]]
    missing = [n for n in expected if n not in names]
    if missing:
        raise WeightFileError(f"tensor {missing[0]} missing from {path}")
    state = {}
    for t in header["tensors"]:
        name = t["name"]
        if name not in expected:
            raise WeightFileError(f"unexpected tensor {name} in {path}")
        if list(expected[name].shape) != t["shape"]:
            raise WeightFileError(
                f"tensor {name}: file shape {t['shape']} does not match model shape {list(expected[name].shape)}"
            )
        arr = np.frombuffer(data, dtype=_DTYPES[t["dtype"]], count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"])
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.subject_id = header.get("subject_id")
    return model.to(memory_format=torch.channels_last)
