"""Configurable 3D U-Net family for two-channel (DWI+ADC) lesion segmentation.

The architecture is anisotropy-aware: convolutions use larger kernels in-plane
(left-right / anterior-posterior) and all resampling is 2x2x1, so the
inferior-superior extent never changes. Five encoder levels feed a bottleneck
and five decoder levels; the final head is a 1x1x1 convolution plus sigmoid.

Variants (24 in total):
  * block: "StdUNet" (Conv-GN-LeakyReLU pairs, max-pool encoder) or
    "ResUNet" (GN-ReLU-Conv pairs with 1x1x1 projection shortcuts and
    strided-conv downsampling),
  * attention: none / SE / AGs / AGh / CBAM / SE_AGs applied to the five
    skip connections,
  * deep supervision: six sigmoid heads (bottleneck first) versus one.

Parameter names follow the checkpoint contract: enc{i}/..., bot/...,
dec{i}/..., att{i}/..., head{i}/... (dots become slashes on disk). Dropout
draws come from a caller-supplied generator; there is no hidden RNG state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BLOCK_KINDS = ("StdUNet", "ResUNet")
ATTENTION_KINDS = ("none", "SE", "AGs", "AGh", "CBAM", "SE_AGs")
AG_KINDS = ("AGs", "AGh", "SE_AGs")

LEAKY_SLOPE = 0.3


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    block: str = "StdUNet"
    attention: str = "none"
    deep_supervision: bool = False
    encoder_filters: tuple[int, ...] = (16, 32, 64, 128, 256)
    bottleneck_filters: int = 512
    gn_groups: int = 8
    dropout_rate: float = 0.5
    se_reduction: int = 8

    def __post_init__(self):
        object.__setattr__(self, "encoder_filters", tuple(int(f) for f in self.encoder_filters))
        if self.block not in BLOCK_KINDS:
            raise NetworkError(f"block must be one of {BLOCK_KINDS}, got {self.block!r}")
        if self.attention not in ATTENTION_KINDS:
            raise NetworkError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if len(self.encoder_filters) != 5:
            raise NetworkError("exactly five encoder levels are supported")
        if any(f < 1 for f in self.encoder_filters) or self.bottleneck_filters < 1:
            raise NetworkError("filter counts must be positive")
        for f in (*self.encoder_filters, self.bottleneck_filters):
            if f % self.gn_groups != 0:
                raise NetworkError(f"filter count {f} not divisible by gn_groups={self.gn_groups}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise NetworkError("dropout_rate must be in [0,1)")
        if self.attention in ("SE", "SE_AGs", "CBAM"):
            for f in self.encoder_filters:
                if f % self.se_reduction != 0:
                    raise NetworkError(
                        f"se_reduction={self.se_reduction} must divide encoder filters, got {f}"
                    )

    def to_json(self) -> str:
        return json.dumps(
            {
                "block": self.block,
                "attention": self.attention,
                "deep_supervision": self.deep_supervision,
                "encoder_filters": list(self.encoder_filters),
                "bottleneck_filters": self.bottleneck_filters,
                "gn_groups": self.gn_groups,
                "dropout_rate": self.dropout_rate,
                "se_reduction": self.se_reduction,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        raw = json.loads(text)
        raw["encoder_filters"] = tuple(raw["encoder_filters"])
        return cls(**raw)


@dataclass
class ForwardOutput:
    """Head probabilities (bottleneck-first when deep supervision is on).

    The last element is always the inference output. ``attention`` holds the
    gate coefficients at skip resolution for AG variants. ``stage_shapes``
    records the spatial shape after every encoder/bottleneck/decoder stage.
    """

    outputs: list[torch.Tensor]
    attention: dict[str, torch.Tensor] | None
    stage_shapes: dict[str, tuple[int, int, int]]

    @property
    def final(self) -> torch.Tensor:
        return self.outputs[-1]


class _Ctx:
    """Per-forward dropout context (training flag + caller RNG)."""

    def __init__(self, train: bool, rate: float, rng: torch.Generator | None):
        self.train = train
        self.rate = rate
        self.rng = rng

    def drop(self, x: torch.Tensor) -> torch.Tensor:
        if not self.train or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = torch.rand(x.shape, generator=self.rng, device=x.device, dtype=x.dtype) < keep
        return x * mask / keep


def _pad_same(x: torch.Tensor, kernel: tuple[int, int, int]) -> torch.Tensor:
    # left-light asymmetric padding: (k-1)//2 before, k//2 after, per axis
    kx, ky, kz = kernel
    pad = ((kz - 1) // 2, kz // 2, (ky - 1) // 2, ky // 2, (kx - 1) // 2, kx // 2)
    return F.pad(x, pad)


class PaddedConv3d(nn.Module):
    """Conv3d with shape-preserving asymmetric padding (stride 1) or ceil(n/2) halving."""

    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1, 1), bias=True):
        super().__init__()
        self.kernel = tuple(kernel)
        self.conv = nn.Conv3d(in_ch, out_ch, self.kernel, stride=tuple(stride), bias=bias)

    def forward(self, x):
        return self.conv(_pad_same(x, self.kernel))


def _up_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="trilinear", align_corners=False)


class StdBlock(nn.Module):
    """Two Conv(4x4x2)-GN-LeakyReLU(0.3) sequences, optional dropout after each."""

    def __init__(self, in_ch, out_ch, gn_groups, dropout=False):
        super().__init__()
        self.conv1 = PaddedConv3d(in_ch, out_ch, (4, 4, 2))
        self.norm1 = nn.GroupNorm(gn_groups, out_ch)
        self.conv2 = PaddedConv3d(out_ch, out_ch, (4, 4, 2))
        self.norm2 = nn.GroupNorm(gn_groups, out_ch)
        self.dropout = dropout

    def forward(self, x, ctx: _Ctx):
        x = F.leaky_relu(self.norm1(self.conv1(x)), LEAKY_SLOPE)
        if self.dropout:
            x = ctx.drop(x)
        x = F.leaky_relu(self.norm2(self.conv2(x)), LEAKY_SLOPE)
        if self.dropout:
            x = ctx.drop(x)
        return x


class ResBlock(nn.Module):
    """Two GN-ReLU-Conv sequences plus a 1x1x1 projection shortcut.

    The first network block uses Conv-GN-ReLU-Conv instead (no normalization
    of the raw input). Stride-2 blocks downsample in-plane only, with a 4x4x2
    kernel on the strided convolution and 3x3x2 elsewhere. Dropout, when
    enabled, sits before the last convolution.
    """

    def __init__(self, in_ch, out_ch, gn_groups, stride=(1, 1, 1), first=False, dropout=False):
        super().__init__()
        stride = tuple(stride)
        k1 = (4, 4, 2) if stride != (1, 1, 1) else (3, 3, 2)
        self.first = first
        self.dropout = dropout
        if first:
            self.conv1 = PaddedConv3d(in_ch, out_ch, k1, stride)
            self.norm1 = nn.GroupNorm(gn_groups, out_ch)
        else:
            self.norm1 = nn.GroupNorm(gn_groups, in_ch)
            self.conv1 = PaddedConv3d(in_ch, out_ch, k1, stride)
            self.norm2 = nn.GroupNorm(gn_groups, out_ch)
        self.conv2 = PaddedConv3d(out_ch, out_ch, (3, 3, 2))
        self.proj = nn.Conv3d(in_ch, out_ch, 1, stride=stride)

    def forward(self, x, ctx: _Ctx):
        if self.first:
            h = F.relu(self.norm1(self.conv1(x)))
        else:
            h = self.conv1(F.relu(self.norm1(x)))
            h = F.relu(self.norm2(h))
        if self.dropout:
            h = ctx.drop(h)
        h = self.conv2(h)
        return h + self.proj(x)


class SEBlock(nn.Module):
    """Squeeze-and-excitation: per-channel sigmoid gains from pooled features."""

    def __init__(self, channels, reduction):
        super().__init__()
        if channels % reduction:
            raise NetworkError(f"reduction {reduction} does not divide {channels} channels")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3, 4))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s[:, :, None, None, None]


class AttentionGate(nn.Module):
    """Additive attention gate on a skip connection.

    The gating signal comes from the adjacent coarser decoder stage (half the
    in-plane resolution). Coefficients are computed at the coarse grid, then
    trilinearly upsampled to the skip grid. "spatial" emits one coefficient
    channel; "hybrid" emits one per encoder channel.
    """

    def __init__(self, enc_ch, gate_ch, inter_ch, mode="spatial"):
        super().__init__()
        if mode not in ("spatial", "hybrid"):
            raise NetworkError(f"gate mode must be spatial or hybrid, got {mode!r}")
        self.mode = mode
        self.theta = nn.Conv3d(enc_ch, inter_ch, (2, 2, 1), stride=(2, 2, 1), bias=False)
        self.phi = nn.Conv3d(gate_ch, inter_ch, 1)
        self.psi = nn.Conv3d(inter_ch, 1 if mode == "spatial" else enc_ch, 1)

    def forward(self, xe, xd):
        # degenerate in-plane sizes (<2) on coarse desk grids need right padding
        pad_x = max(0, 2 - xe.shape[2])
        pad_y = max(0, 2 - xe.shape[3])
        t_in = F.pad(xe, (0, 0, 0, pad_y, 0, pad_x)) if (pad_x or pad_y) else xe
        t = self.theta(t_in)
        if t.shape[2:] != xd.shape[2:]:
            t = _up_to(t, xd.shape[2:])
        a = torch.sigmoid(self.psi(F.relu(t + self.phi(xd))))
        a = _up_to(a, xe.shape[2:])
        return xe * a, a


class CBAM(nn.Module):
    """Channel attention (shared MLP over avg+max descriptors) then spatial
    attention (7x7x3 convolution over channel-wise avg/max maps)."""

    def __init__(self, channels, reduction):
        super().__init__()
        if channels % reduction:
            raise NetworkError(f"reduction {reduction} does not divide {channels} channels")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)
        self.spatial = PaddedConv3d(2, 1, (7, 7, 3))

    def forward(self, x):
        avg = x.mean(dim=(2, 3, 4))
        mx = x.amax(dim=(2, 3, 4))
        mlp = lambda v: self.fc2(F.relu(self.fc1(v)))
        ca = torch.sigmoid(mlp(avg) + mlp(mx))
        x = x * ca[:, :, None, None, None]
        desc = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        sa = torch.sigmoid(self.spatial(desc))
        return x * sa


class SEGate(nn.Module):
    """SE modulation of the skip followed by a spatial attention gate."""

    def __init__(self, enc_ch, gate_ch, inter_ch, reduction):
        super().__init__()
        self.se = SEBlock(enc_ch, reduction)
        self.gate = AttentionGate(enc_ch, gate_ch, inter_ch, mode="spatial")


class UNet3D(nn.Module):
    """The full encoder-bottleneck-decoder network for one config."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        f = config.encoder_filters
        fb = config.bottleneck_filters
        g = config.gn_groups
        std = config.block == "StdUNet"

        in_chs = (2, f[0], f[1], f[2], f[3])
        for i in range(5):
            if std:
                block = StdBlock(in_chs[i], f[i], g)
            else:
                stride = (1, 1, 1) if i == 0 else (2, 2, 1)
                block = ResBlock(in_chs[i], f[i], g, stride=stride, first=(i == 0))
            setattr(self, f"enc{i + 1}", block)
        if std:
            self.bot = StdBlock(f[4], fb, g, dropout=True)
            self.pool = nn.MaxPool3d((2, 2, 1), ceil_mode=True)
        else:
            self.bot = ResBlock(f[4], fb, g, stride=(2, 2, 1), dropout=True)

        dec_in = (fb + f[4], f[4] + f[3], f[3] + f[2], f[2] + f[1], f[1] + f[0])
        dec_out = (f[4], f[3], f[2], f[1], f[0])
        for j in range(5):
            drop = j < 2
            if std:
                block = StdBlock(dec_in[j], dec_out[j], g, dropout=drop)
            else:
                block = ResBlock(dec_in[j], dec_out[j], g, dropout=drop)
            setattr(self, f"dec{j + 1}", block)

        att = config.attention
        gate_chs = (f[1], f[2], f[3], f[4], fb)  # gating width for enc1..enc5
        for i in range(5):
            if att == "SE":
                mod = SEBlock(f[i], config.se_reduction)
            elif att == "CBAM":
                mod = CBAM(f[i], config.se_reduction)
            elif att in ("AGs", "AGh"):
                mode = "spatial" if att == "AGs" else "hybrid"
                mod = AttentionGate(f[i], gate_chs[i], max(1, f[i] // 2), mode=mode)
            elif att == "SE_AGs":
                mod = SEGate(f[i], gate_chs[i], max(1, f[i] // 2), config.se_reduction)
            else:
                mod = None
            if mod is not None:
                setattr(self, f"att{i + 1}", mod)

        head_chs = {1: fb, 2: f[4], 3: f[3], 4: f[2], 5: f[1], 6: f[0]}
        head_ids = range(1, 7) if config.deep_supervision else (6,)
        for i in head_ids:
            setattr(self, f"head{i}", nn.Conv3d(head_chs[i], 1, 1))

    def _check_finite(self, t: torch.Tensor, name: str) -> torch.Tensor:
        if not torch.isfinite(t).all():
            raise NetworkError(f"non-finite activations after {name}")
        return t

    def forward(
        self,
        x: torch.Tensor,
        train: bool = False,
        rng: torch.Generator | None = None,
    ) -> ForwardOutput:
        squeeze = x.dim() == 4
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 5 or x.shape[1] != 2:
            raise NetworkError(f"expected input shaped (2, X, Y, Z) or (N, 2, X, Y, Z), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise NetworkError("non-finite values in network input")

        cfg = self.config
        std = cfg.block == "StdUNet"
        ctx = _Ctx(train, cfg.dropout_rate, rng)
        full_size = tuple(x.shape[2:])
        shapes: dict[str, tuple] = {}

        skips = []
        h = x
        for i in range(1, 6):
            block = getattr(self, f"enc{i}")
            if std:
                h = self._check_finite(block(h, ctx), f"enc{i}")
                skips.append(h)
                h = self.pool(h)
            else:
                h = self._check_finite(block(h, ctx), f"enc{i}")
                skips.append(h)
            shapes[f"enc{i}"] = tuple(skips[-1].shape[2:])
        bot = self._check_finite(self.bot(h, ctx), "bot")
        shapes["bot"] = tuple(bot.shape[2:])

        attention: dict[str, torch.Tensor] = {}
        if cfg.attention in ("SE", "CBAM"):
            skips = [getattr(self, f"att{i + 1}")(s) for i, s in enumerate(skips)]
        elif cfg.attention == "SE_AGs":
            skips = [getattr(self, f"att{i + 1}").se(s) for i, s in enumerate(skips)]

        stage_outputs = [bot]
        h = bot
        for j in range(1, 6):
            enc_idx = 6 - j  # enc5 feeds dec1, ..., enc1 feeds dec5
            skip = skips[enc_idx - 1]
            if cfg.attention in ("AGs", "AGh", "SE_AGs"):
                mod = getattr(self, f"att{enc_idx}")
                gate = mod.gate if cfg.attention == "SE_AGs" else mod
                skip, coeff = gate(skip, h)
                attention[f"att{enc_idx}"] = coeff
            h = _up_to(h, skip.shape[2:])
            h = torch.cat([skip, h], dim=1)
            h = self._check_finite(getattr(self, f"dec{j}")(h, ctx), f"dec{j}")
            shapes[f"dec{j}"] = tuple(h.shape[2:])
            stage_outputs.append(h)

        outputs = []
        head_ids = range(1, 7) if cfg.deep_supervision else (6,)
        for i in head_ids:
            feats = stage_outputs[i - 1] if cfg.deep_supervision else stage_outputs[-1]
            logits = getattr(self, f"head{i}")(feats)
            prob = torch.sigmoid(_up_to(logits, full_size))
            outputs.append(self._check_finite(prob, f"head{i}"))
        if squeeze:
            outputs = [o.squeeze(0) for o in outputs]
            attention = {k: v.squeeze(0) for k, v in attention.items()}
        return ForwardOutput(outputs, attention or None, shapes)


def _init_parameters(model: UNet3D, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    slope = LEAKY_SLOPE if model.config.block == "StdUNet" else 0.0
    gain = float(np.sqrt(2.0 / (1.0 + slope**2)))
    for name, p in sorted(model.named_parameters(), key=lambda item: item[0]):
        if p.dim() >= 2:  # conv / linear weights: fan-in scaled normal
            fan_in = p[0].numel()
            p.data.normal_(0.0, gain / np.sqrt(fan_in), generator=gen)
        else:  # biases and normalization offsets
            p.data.zero_()
    for _, m in model.named_modules():
        if isinstance(m, nn.GroupNorm):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()


def build_network(config: NetworkConfig, seed: int = 0) -> UNet3D:
    """Deterministically construct and initialize a network for the config."""
    model = UNet3D(config)
    _init_parameters(model, seed)
    model.eval()
    return model


def parameter_keys(model: UNet3D) -> list[str]:
    return sorted(name.replace(".", "/") for name, _ in model.named_parameters())


def save_checkpoint(model: UNet3D, path: str | Path, extra: dict | None = None) -> None:
    """Single-archive checkpoint: config JSON plus named parameter arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        name.replace(".", "/"): p.detach().cpu().numpy()
        for name, p in model.named_parameters()
    }
    arrays["config"] = np.frombuffer(model.config.to_json().encode(), dtype=np.uint8)
    if extra:
        arrays["extra"] = np.frombuffer(json.dumps(extra, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> UNet3D:
    path = Path(path)
    with np.load(path) as archive:
        config = NetworkConfig.from_json(bytes(archive["config"]).decode())
        model = UNet3D(config)
        state = {}
        for name, p in model.named_parameters():
            key = name.replace(".", "/")
            if key not in archive:
                raise NetworkError(f"checkpoint {path} is missing parameter {key}")
            state[name] = torch.from_numpy(np.array(archive[key])).to(p.dtype)
    model.load_state_dict(state, strict=False)
    model.eval()
    return model


def save_mt_checkpoint(teacher: UNet3D, student: UNet3D, path: str | Path, extra: dict | None = None) -> None:
    """One archive holding both models; plain load_checkpoint returns the teacher."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        name.replace(".", "/"): p.detach().cpu().numpy()
        for name, p in teacher.named_parameters()
    }
    arrays["config"] = np.frombuffer(teacher.config.to_json().encode(), dtype=np.uint8)
    for name, p in student.named_parameters():
        arrays[f"student/{name.replace('.', '/')}"] = p.detach().cpu().numpy()
    arrays["student/config"] = np.frombuffer(student.config.to_json().encode(), dtype=np.uint8)
    if extra:
        arrays["extra"] = np.frombuffer(json.dumps(extra, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_student_checkpoint(path: str | Path) -> UNet3D:
    """The student half of a mean-teacher checkpoint."""
    path = Path(path)
    with np.load(path) as archive:
        if "student/config" not in archive:
            raise NetworkError(f"{path} holds no student model")
        config = NetworkConfig.from_json(bytes(archive["student/config"]).decode())
        model = UNet3D(config)
        state = {}
        for name, p in model.named_parameters():
            key = f"student/{name.replace('.', '/')}"
            if key not in archive:
                raise NetworkError(f"checkpoint {path} is missing parameter {key}")
            state[name] = torch.from_numpy(np.array(archive[key])).to(p.dtype)
    model.load_state_dict(state, strict=False)
    model.eval()
    return model


def checkpoint_extra(path: str | Path) -> dict:
    with np.load(Path(path)) as archive:
        if "extra" not in archive:
            return {}
        return json.loads(bytes(archive["extra"]).decode())


def extract_attention_maps(model: UNet3D, x: torch.Tensor) -> dict[str, np.ndarray]:
    """Gate coefficients per gated level, upsampled to the input grid.

    att1 gates the finest skip and is returned as computed (already at input
    resolution); att2..att5 are trilinearly upsampled. Hybrid gates emit one
    coefficient per channel; those are channel-averaged for the map.
    """
    if model.config.attention not in AG_KINDS:
        raise NetworkError(f"attention kind {model.config.attention!r} has no attention gates")
    squeeze = x.dim() == 4
    if squeeze:
        x = x.unsqueeze(0)
    with torch.no_grad():
        out = model(x, train=False)
    full_size = tuple(x.shape[2:])
    maps = {}
    for name in sorted(out.attention):
        coeff = out.attention[name]
        if coeff.shape[1] > 1:
            coeff = coeff.mean(dim=1, keepdim=True)
        coeff = _up_to(coeff, full_size)
        maps[name] = coeff.squeeze(1).squeeze(0).cpu().numpy()
    return maps
