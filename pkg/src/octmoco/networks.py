"""Layer catalog and the three displacement/segmentation networks.

All tensors are 4-d (batch, channels, W, N): the depth axis of a volume
is treated as channels, the fast (W) and slow (N) scanning axes are the
spatial dims. Downsampling always acts on W only, via 2x1 convolutions
with stride 2x1, so the nets accept any number of B-scans.

Layer functions below operate on torch tensors; conv weights use the
(out, in, kW, kN) layout and transposed-conv weights (in, out, kW, kN).
Gradients come from reverse-mode autodiff; the test suite checks every
layer and full network against central finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import Boundaries, VesselMap, Volume, XDisplacementVec, ZDisplacementMap, _require
from .errors import DataError

EPS_INSTANCE_NORM = 1e-5


# ---------------------------------------------------------------------------
# layer catalog


def _pad_axis(x, dim, pad, mode):
    if pad == 0:
        return x
    size = x.shape[dim]
    if mode == "circular":
        left = torch.arange(size - pad, size)
        right = torch.arange(0, pad)
    else:  # reflect; a size-1 axis degenerates to replication
        if size == 1:
            left = torch.zeros(pad, dtype=torch.long)
            right = torch.zeros(pad, dtype=torch.long)
        else:
            left = torch.arange(pad, 0, -1)
            right = torch.arange(size - 2, size - 2 - pad, -1)
    return torch.cat([x.index_select(dim, left), x, x.index_select(dim, right)], dim=dim)


def conv2d(x, weight, bias=None, stride=(1, 1), padding="reflect"):
    """Cross-correlation with reflect/circular/no padding.

    Padding (when not "none") is symmetric (k-1)/2 per axis, so odd
    kernels preserve spatial dims at stride 1; the 2x1/stride-2x1 case
    runs unpadded and halves W.
    """
    _require(x.dim() == 4, "conv2d expects a (B, C, W, N) tensor")
    _require(weight.shape[1] == x.shape[1],
             f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if padding != "none":
        _require(padding in ("reflect", "circular"), f"unknown padding {padding!r}")
        ka, kb = weight.shape[2], weight.shape[3]
        _require(ka % 2 == 1 and kb % 2 == 1, "padded conv2d requires odd kernels")
        x = _pad_axis(x, 2, (ka - 1) // 2, padding)
        x = _pad_axis(x, 3, (kb - 1) // 2, padding)
    return F.conv2d(x, weight, bias, stride=tuple(stride))


def transposed_conv2d(x, weight, bias=None, stride=(2, 1)):
    """Adjoint of the strided, unpadded conv2d; upsamples W by stride."""
    _require(x.dim() == 4, "transposed_conv2d expects a (B, C, W, N) tensor")
    _require(weight.shape[0] == x.shape[1],
             f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[0]}")
    return F.conv_transpose2d(x, weight, bias, stride=tuple(stride))


def instance_norm(x, weight=None, bias=None, eps=EPS_INSTANCE_NORM):
    """Normalize each (batch, channel) plane over its spatial extent."""
    _require(x.dim() == 4, "instance_norm expects a (B, C, W, N) tensor")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        out = out * weight[None, :, None, None] + bias[None, :, None, None]
    return out


def spatial_dropout(x, p, training, rng=None):
    """Channel-wise dropout; whole (W, N) planes are zeroed together."""
    if not training or p <= 0:
        return x
    keep = torch.rand(x.shape[:2], generator=rng, device=x.device, dtype=x.dtype) >= p
    return x * keep.to(x.dtype)[:, :, None, None] / (1.0 - p)


# ---------------------------------------------------------------------------
# configs and parameter containers


@dataclass(frozen=True)
class NetConfig:
    in_channels: int
    levels: int = 4
    base_channels: int = 8
    dropout_p: float = 0.2
    use_segmentation_input: bool = False
    z_norm: float = 10.0
    x_norm: float = 1.0
    padding_mode: str = "reflect"

    def __post_init__(self):
        _require(self.levels >= 1, "levels must be >= 1")
        _require(0.0 <= self.dropout_p < 1.0, "dropout_p must lie in [0, 1)")
        _require(self.in_channels >= 1 and self.base_channels >= 1, "bad channel counts")
        _require(self.z_norm > 0 and self.x_norm > 0, "norm factors must be positive")

    @property
    def width_divisor(self):
        return 2 ** (self.levels - 1)


def default_x_norm(width):
    """The lateral normalization factor scales with B-scan width (W / 512)."""
    return width / 512.0


class ModelParams:
    """Named float32 parameter tensors with shape bookkeeping."""

    def __init__(self, tensors):
        self.tensors = {}
        for name, a in tensors.items():
            a = np.asarray(a, dtype=np.float32)
            if not np.isfinite(a).all():
                raise ValueError(f"parameter {name!r} contains non-finite values")
            self.tensors[name] = a

    @property
    def count(self):
        return int(sum(a.size for a in self.tensors.values()))

    @classmethod
    def from_module(cls, module):
        return cls({name: p.detach().cpu().numpy() for name, p in module.named_parameters()})

    def load_into(self, module):
        with torch.no_grad():
            for name, p in module.named_parameters():
                if name not in self.tensors:
                    raise DataError(f"checkpoint is missing parameter {name!r}")
                a = self.tensors[name]
                if tuple(a.shape) != tuple(p.shape):
                    raise DataError(f"parameter {name!r} has shape {a.shape}, expected {tuple(p.shape)}")
                p.copy_(torch.from_numpy(a).to(p.dtype))
        return module


def count_parameters(module):
    return int(sum(p.numel() for p in module.parameters()))


def init_parameters(module, seed):
    """He-style init of all conv weights from an explicit seed; norm scales
    start at 1, every bias at 0. Deterministic per seed."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() == 4:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                if name.endswith("tweight"):  # transposed layout: (in, out, kW, kN)
                    fan_in = p.shape[0] * p.shape[2] * p.shape[3]
                p.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
            elif name.endswith("norm_weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return module


# ---------------------------------------------------------------------------
# building blocks


class ConvUnit(nn.Module):
    """conv -> optional instance norm -> optional ReLU."""

    def __init__(self, cin, cout, kernel, stride=(1, 1), padding="reflect", norm=True, act=True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.act = act
        self.weight = nn.Parameter(torch.empty(cout, cin, *kernel))
        self.bias = None if norm else nn.Parameter(torch.zeros(cout))
        if norm:
            self.norm_weight = nn.Parameter(torch.ones(cout))
            self.norm_bias = nn.Parameter(torch.zeros(cout))
        else:
            self.norm_weight = None

    def forward(self, x):
        x = conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        if self.norm_weight is not None:
            x = instance_norm(x, self.norm_weight, self.norm_bias)
        if self.act:
            x = F.relu(x)
        return x


class UpUnit(nn.Module):
    """2x1 transposed conv (stride 2x1) -> instance norm -> ReLU."""

    def __init__(self, cin, cout):
        super().__init__()
        self.tweight = nn.Parameter(torch.empty(cin, cout, 2, 1))
        self.norm_weight = nn.Parameter(torch.ones(cout))
        self.norm_bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        x = transposed_conv2d(x, self.tweight, None, stride=(2, 1))
        x = instance_norm(x, self.norm_weight, self.norm_bias)
        return F.relu(x)


class ResidualBlock(nn.Module):
    """[3x3 conv -> IN -> ReLU -> 3x3 conv -> IN] + identity, ReLU after."""

    def __init__(self, ch, padding="reflect"):
        super().__init__()
        self.a = ConvUnit(ch, ch, (3, 3), padding=padding, norm=True, act=True)
        self.b = ConvUnit(ch, ch, (3, 3), padding=padding, norm=True, act=False)

    def forward(self, x):
        return F.relu(x + self.b(self.a(x)))


class Backbone(nn.Module):
    """Encoder/decoder over the en-face plane with W-only down/upsampling.

    Same-resolution encoder features pass through residual blocks before
    concatenation; there is no skip connection at the original
    resolution. Dropout hits each level's block output.
    """

    def __init__(self, cfg: NetConfig, out_channels=1):
        super().__init__()
        self.cfg = cfg
        pad = cfg.padding_mode
        widths = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        self.stem = ConvUnit(cfg.in_channels, widths[0], (1, 1), padding="none")
        self.enc_blocks = nn.ModuleList(ResidualBlock(w, pad) for w in widths)
        self.downs = nn.ModuleList(
            ConvUnit(widths[i - 1], widths[i], (2, 1), stride=(2, 1), padding="none")
            for i in range(1, cfg.levels)
        )
        self.skip_blocks = nn.ModuleList(
            ResidualBlock(widths[i], pad) for i in range(1, cfg.levels - 1)
        )
        self.ups = nn.ModuleList(UpUnit(widths[i], widths[i - 1]) for i in range(cfg.levels - 1, 0, -1))
        decs = []
        for i in range(cfg.levels - 2, -1, -1):
            cin = widths[i] * (2 if i >= 1 else 1)
            decs.append(ConvUnit(cin, widths[i], (3, 3), padding=pad))
        self.dec_blocks = nn.ModuleList(decs)
        self.head = ConvUnit(widths[0], out_channels, (1, 1), padding="none", norm=False, act=False)

    def forward(self, x, rng=None):
        cfg = self.cfg
        _require(x.shape[2] % cfg.width_divisor == 0,
                 f"W={x.shape[2]} must be divisible by {cfg.width_divisor}")
        drop = lambda t: spatial_dropout(t, cfg.dropout_p, self.training, rng)
        x = self.stem(x)
        feats = []
        for i, block in enumerate(self.enc_blocks):
            if i > 0:
                x = self.downs[i - 1](x)
            x = drop(block(x))
            feats.append(x)
        for j, up in enumerate(self.ups):
            level = cfg.levels - 2 - j
            x = up(x)
            if level >= 1:
                x = torch.cat([x, self.skip_blocks[level - 1](feats[level])], dim=1)
            x = drop(self.dec_blocks[j](x))
        return self.head(x)


class ZNet(nn.Module):
    """Axial displacement predictor; depth is the input channel axis.

    With segmentation input enabled, the normalized boundary pair is
    concatenated with the baseline output and refined by two 1x1 convs.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg, out_channels=1)
        if cfg.use_segmentation_input:
            w0 = cfg.base_channels
            self.seg_a = ConvUnit(3, w0, (1, 1), padding="none", norm=False, act=True)
            self.seg_b = ConvUnit(w0, 1, (1, 1), padding="none", norm=False, act=False)

    def forward(self, x, bnorm=None, rng=None):
        out = self.backbone(x, rng=rng)
        if self.cfg.use_segmentation_input:
            _require(bnorm is not None, "this config requires normalized boundaries")
            out = self.seg_b(self.seg_a(torch.cat([out, bnorm], dim=1)))
        return out


class VesselNet(nn.Module):
    """En-face vessel segmentation; same backbone, logit output."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg, out_channels=1)

    def forward(self, x, rng=None):
        return self.backbone(x, rng=rng)


class XNet(nn.Module):
    """Per-B-scan lateral displacement from a vessel map.

    Three 2x1/stride-2x1 convs shrink the fast axis to W/8, trailing 1x1
    convs process, and the output is averaged across the remaining
    fast-axis positions; no upsampling branch.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        pad = cfg.padding_mode
        w = [cfg.base_channels * 2**i for i in range(4)]
        self.stem = ConvUnit(cfg.in_channels, w[0], (3, 3), padding=pad)
        self.downs = nn.ModuleList(
            ConvUnit(w[i], w[i + 1], (2, 1), stride=(2, 1), padding="none") for i in range(3)
        )
        self.mixes = nn.ModuleList(ConvUnit(w[i + 1], w[i + 1], (3, 3), padding=pad) for i in range(3))
        self.head_a = ConvUnit(w[3], w[3], (1, 1), padding="none", norm=False, act=True)
        self.head_b = ConvUnit(w[3], 1, (1, 1), padding="none", norm=False, act=False)

    def forward(self, x, rng=None):
        _require(x.shape[2] % 8 == 0, f"W={x.shape[2]} must be divisible by 8")
        drop = lambda t: spatial_dropout(t, self.cfg.dropout_p, self.training, rng)
        x = drop(self.stem(x))
        for down, mix in zip(self.downs, self.mixes):
            x = drop(mix(down(x)))
        x = self.head_b(self.head_a(x))
        return x.mean(dim=2).squeeze(1)  # (B, N)


# ---------------------------------------------------------------------------
# single-volume forward passes over domain objects


def _as_batch(a):
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None]


def znet_forward(v: Volume, b_norm, cfg: NetConfig, params: ModelParams,
                 training=False, rng=None) -> ZDisplacementMap:
    """Predict the normalized axial displacement map for one volume."""
    _require(v.height == cfg.in_channels,
             f"volume depth {v.height} does not match config input channels {cfg.in_channels}")
    if cfg.use_segmentation_input:
        _require(b_norm is not None, "config expects normalized boundaries")
        _require(b_norm.shape == (2, v.width, v.n_slices), "normalized boundaries have wrong shape")
    model = params.load_into(ZNet(cfg))
    model.train(training)
    x = _as_batch(v.data)
    bn = _as_batch(b_norm) if cfg.use_segmentation_input else None
    with torch.no_grad() if not training else torch.enable_grad():
        out = model(x, bnorm=bn, rng=rng)
    return ZDisplacementMap(out.detach().numpy()[0, 0])


def vesselnet_forward(v_dz: Volume, cfg: NetConfig, params: ModelParams,
                      training=False, rng=None) -> np.ndarray:
    """Predict en-face vessel logits (W, N) for one Z-corrected volume.

    Apply a sigmoid to get probabilities; binarize at 0.5 for masks.
    """
    _require(v_dz.height == cfg.in_channels,
             f"volume depth {v_dz.height} does not match config input channels {cfg.in_channels}")
    model = params.load_into(VesselNet(cfg))
    model.train(training)
    with torch.no_grad() if not training else torch.enable_grad():
        out = model(_as_batch(v_dz.data), rng=rng)
    return out.detach().numpy()[0, 0]


def xnet_forward(s: VesselMap, cfg: NetConfig, params: ModelParams,
                 training=False, rng=None) -> XDisplacementVec:
    """Predict the normalized lateral displacement vector from a vessel map."""
    model = params.load_into(XNet(cfg))
    model.train(training)
    with torch.no_grad() if not training else torch.enable_grad():
        out = model(_as_batch(s.values[None]), rng=rng)
    return XDisplacementVec(out.detach().numpy()[0])


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


# ---------------------------------------------------------------------------
# reference configurations

ARCH_Z = "zdisp"
ARCH_VESSEL = "vessel"
ARCH_X = "xdisp"

_ARCH_CLASSES = {ARCH_Z: ZNet, ARCH_VESSEL: VesselNet, ARCH_X: XNet}


def build_network(arch, cfg: NetConfig):
    _require(arch in _ARCH_CLASSES, f"unknown architecture {arch!r}")
    return _ARCH_CLASSES[arch](cfg)


def reference_z_config():
    """Full-size configuration (496-pixel A-scans); ~484K parameters."""
    return NetConfig(in_channels=496, levels=4, base_channels=14, dropout_p=0.2,
                     use_segmentation_input=True, z_norm=10.0, x_norm=1.0)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + raw little-endian f32 blob


def save_checkpoint(path, arch, cfg: NetConfig, params: ModelParams):
    """Write `<path>` (JSON manifest) and a sibling `.bin` f32 blob."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    tensors = []
    chunks = []
    offset = 0
    for name, a in params.tensors.items():
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "config": {"arch": arch, **asdict(cfg)},
        "blob": blob_path.name,
        "tensors": tensors,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    blob_path.write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint; returns (arch, NetConfig, ModelParams)."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    cfg_dict = dict(manifest["config"])
    arch = cfg_dict.pop("arch")
    cfg = NetConfig(**cfg_dict)
    blob = (path.parent / manifest["blob"]).read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        a = np.frombuffer(blob[start : start + 4 * n], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = a.copy()
    return arch, cfg, ModelParams(tensors)
