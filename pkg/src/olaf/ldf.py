"""Low-level dense feature (LDF) extractor and its wiring into CNN, U-Net and Transformer models.

    feat(x1, x2) = Conv3x3(x1) ++ UP(Conv3x3(x2))
    LDF(x1, x2)  = Conv1x1(ASPP(feat(x1, x2)))

where ``++`` is channel concatenation and UP is upsample -> 1x1 conv -> BN -> ReLU.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


def cfg_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


class ConfigError(ValueError):
    pass


class WiringError(ValueError):
    pass


@dataclass
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1
    dilation: int = 1
    has_bias: bool = True
    followed_by: tuple[str, ...] = ()

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        p, d, s = self.padding, self.dilation, self.stride
        return (h + 2 * p - d * (kh - 1) - 1) // s + 1, (w + 2 * p - d * (kw - 1) - 1) // s + 1

    def build(self) -> nn.Module:
        layers: list[nn.Module] = [nn.Conv2d(self.in_ch, self.out_ch, self.kernel, self.stride,
                                             self.padding, self.dilation, bias=self.has_bias)]
        for op in self.followed_by:
            if op == "batch-norm":
                layers.append(nn.BatchNorm2d(self.out_ch))
            elif op == "relu":
                layers.append(nn.ReLU())
            elif op != "none":
                raise ConfigError(f"unknown layer {op!r}")
        return nn.Sequential(*layers) if len(layers) > 1 else layers[0]


@dataclass
class LdfConfig:
    in_channels_x1: int = 16
    in_channels_x2: int = 32
    mid_channels: int = 48
    aspp_rates: tuple[int, ...] = (1, 6, 12, 18)
    aspp_out_channels: int = 256
    out_channels: int = 48
    upsample_factor: int = 2
    upsample_mode: str = "bilinear"

    def __post_init__(self):
        self.aspp_rates = tuple(self.aspp_rates)
        if int(self.upsample_factor) != self.upsample_factor or self.upsample_factor < 1:
            raise ConfigError(f"upsample factor must be a positive integer, got {self.upsample_factor}")
        self.upsample_factor = int(self.upsample_factor)
        if not self.aspp_rates:
            raise ConfigError("aspp_rates must not be empty")
        if any(r < 1 for r in self.aspp_rates) or list(self.aspp_rates) != sorted(set(self.aspp_rates)):
            raise ConfigError(f"aspp_rates must be positive and strictly increasing, got {self.aspp_rates}")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown upsample mode {self.upsample_mode!r}")

    @classmethod
    def desk(cls, in_x1: int = 16, in_x2: int = 32, factor: int = 2) -> "LdfConfig":
        """Scaled-down widths for CPU-sized experiments."""
        return cls(in_x1, in_x2, mid_channels=8, aspp_out_channels=32, out_channels=8,
                   upsample_factor=factor)


class UpBlock(nn.Module):
    """Upsample by an integer factor, then 1x1 conv, batch norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, factor: int, mode: str = "bilinear"):
        super().__init__()
        if int(factor) != factor or factor < 1:
            raise ConfigError(f"upsample factor must be a positive integer, got {factor}")
        self.factor = int(factor)
        self.mode = mode
        self.conv = nn.Conv2d(in_ch, out_ch, 1)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        if self.factor > 1:
            kw = {"align_corners": False} if self.mode == "bilinear" else {}
            x = F.interpolate(x, scale_factor=self.factor, mode=self.mode, **kw)
        return F.relu(self.bn(self.conv(x)))


class ASPP(nn.Module):
    """Dilated 3x3 branches + 1x1 branch + image-pool branch, concatenated and projected by 1x1."""

    def __init__(self, in_ch: int, out_ch: int, rates=(1, 6, 12, 18)):
        super().__init__()
        if not rates or any(r < 1 for r in rates):
            raise ConfigError(f"invalid ASPP rates {rates}")

        def branch(k, d):
            return nn.Sequential(
                nn.Conv2d(in_ch, out_ch, k, padding=d * (k // 2), dilation=d, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(),
            )

        self.atrous = nn.ModuleList(branch(3, r) for r in rates)
        self.point = branch(1, 1)
        self.pool = branch(1, 1)
        n_branches = len(rates) + 2
        self.project = nn.Sequential(
            nn.Conv2d(n_branches * out_ch, out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(),
        )

    @property
    def num_branches(self) -> int:
        return len(self.atrous) + 2

    def pooled(self, x):
        return F.adaptive_avg_pool2d(x, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        outs = [b(x) for b in self.atrous]
        outs.append(self.point(x))
        # image-level context, broadcast back over the map
        outs.append(self.pool(self.pooled(x)).expand(-1, -1, h, w))
        return self.project(torch.cat(outs, dim=1))


class LDF(nn.Module):
    def __init__(self, cfg: LdfConfig):
        super().__init__()
        self.cfg = cfg
        self.conv_x1 = nn.Conv2d(cfg.in_channels_x1, cfg.mid_channels, 3, stride=1, padding=1)
        self.conv_x2 = nn.Conv2d(cfg.in_channels_x2, cfg.mid_channels, 3, stride=1, padding=1)
        self.up = UpBlock(cfg.mid_channels, cfg.mid_channels, cfg.upsample_factor, cfg.upsample_mode)
        self.aspp = ASPP(2 * cfg.mid_channels, cfg.aspp_out_channels, cfg.aspp_rates)
        self.head = nn.Conv2d(cfg.aspp_out_channels, cfg.out_channels, 1)

    def fuse(self, x1, x2):
        a = self.conv_x1(x1)
        b = self.up(self.conv_x2(x2))
        if a.shape[-2:] != b.shape[-2:]:
            raise ValueError(f"x1 features {tuple(a.shape[-2:])} vs upsampled x2 {tuple(b.shape[-2:])}")
        return torch.cat([a, b], dim=1)

    def forward(self, x1, x2):
        return self.head(self.aspp(self.fuse(x1, x2)))


# -- wiring descriptors ---------------------------------------------------------

@dataclass
class Wiring:
    """Serializable description of where LDF instances tap and merge into a model."""

    pattern: str  # cnn | unet | transformer
    instances: list[dict] = field(default_factory=list)  # {"x1", "x2", "merge_into", "factor"}
    merge: str = "concat"
    resize: bool = False
    ldf: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Wiring":
        return cls(**json.loads(text))


def attach_cnn(taps: dict[str, int], decoder_stage: str, decoder_in: int, cfg: LdfConfig,
               tap_names=("block1", "block2")) -> Wiring:
    """LDF over two backbone taps, concatenated into a decoder stage input."""
    for t in tap_names:
        if t not in taps:
            raise WiringError(f"backbone does not expose tap {t!r}")
    return Wiring(
        "cnn",
        [{"x1": tap_names[0], "x2": tap_names[1], "merge_into": decoder_stage,
          "factor": cfg.upsample_factor, "decoder_in": decoder_in + cfg.out_channels}],
        ldf=cfg_dict(cfg),
    )


def attach_unet(encoder_layers: list[str], decoder_layers: list[str], cfg: LdfConfig) -> Wiring:
    """One LDF per encoder level (its two sub-block outputs), merged into the matching skip."""
    if len(encoder_layers) != len(decoder_layers):
        raise WiringError(f"{len(encoder_layers)} encoder levels vs {len(decoder_layers)} decoder levels")
    inst = [{"x1": f"{e}.sub1", "x2": f"{e}.sub2", "merge_into": f"{d}.skip", "factor": 1}
            for e, d in zip(encoder_layers, decoder_layers)]
    return Wiring("unet", inst, ldf=cfg_dict(cfg))


def attach_transformer(first_block: str, encoder_output: str, cfg: LdfConfig,
                       num_tokens: int | None = None, grid: tuple[int, int] | None = None) -> Wiring:
    """Single LDF on the first block (x2 = stride-2 pooled copy), merged with the encoder output."""
    if grid is None and num_tokens is not None:
        side = int(round(num_tokens ** 0.5))
        if side * side != num_tokens:
            raise WiringError(f"{num_tokens} tokens is not a square grid; declare the grid shape")
    return Wiring(
        "transformer",
        [{"x1": first_block, "x2": f"avgpool2({first_block})", "merge_into": encoder_output,
          "factor": 2}],
        resize=True,
        ldf=cfg_dict(cfg),
    )
