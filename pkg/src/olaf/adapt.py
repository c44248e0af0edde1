"""Input-layer weight surgery for (3+k)-channel inputs, baseline schemes and the warm-up schedule."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

SCHEMES = ("olaf-average", "random-5", "random-2", "average-rgb-5", "adapt-n-freeze")


class AdaptationError(ValueError):
    pass


def _check(w: torch.Tensor, k_new: int, allow_any_in: bool = False) -> None:
    if w.ndim != 4:
        raise AdaptationError(f"expected a [out, in, kh, kw] kernel, got shape {tuple(w.shape)}")
    if k_new < 1:
        raise AdaptationError(f"k_new must be >= 1, got {k_new}")
    if w.shape[1] != 3 and not allow_any_in:
        raise AdaptationError(f"expected an RGB (3-channel) kernel, got in_ch={w.shape[1]}")


def _kaiming(shape, fan_in: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    # torch's default Conv2d init: kaiming_uniform with a=sqrt(5) => U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    g = torch.Generator().manual_seed(int(seed))
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1).mul(bound).to(dtype)


def rgb_mean_slice(w: torch.Tensor) -> torch.Tensor:
    return w.mean(dim=1, keepdim=True)


def adapt_olaf(w: torch.Tensor, k_new: int = 2, allow_any_in: bool = False) -> torch.Tensor:
    """Keep the pretrained slices and initialise each new slice with their channel mean."""
    _check(w, k_new, allow_any_in)
    mean = rgb_mean_slice(w)
    return torch.cat([w, mean.expand(-1, k_new, -1, -1)], dim=1).contiguous()


def adapt_random5(w: torch.Tensor, k_new: int = 2, seed: int = 0) -> torch.Tensor:
    """Re-initialise every input slice from the default conv initializer."""
    _check(w, k_new)
    out_ch, in_ch, kh, kw = w.shape
    n_in = in_ch + k_new
    return _kaiming((out_ch, n_in, kh, kw), n_in * kh * kw, seed, w.dtype)


def adapt_random2(w: torch.Tensor, k_new: int = 2, seed: int = 0) -> torch.Tensor:
    """Keep the pretrained slices; the new slices are freshly initialised."""
    _check(w, k_new)
    out_ch, in_ch, kh, kw = w.shape
    new = _kaiming((out_ch, k_new, kh, kw), (in_ch + k_new) * kh * kw, seed, w.dtype)
    return torch.cat([w, new], dim=1)


def adapt_average_rgb5(w: torch.Tensor, k_new: int = 2) -> torch.Tensor:
    """Every slice, old and new, becomes the RGB channel mean."""
    _check(w, k_new)
    return rgb_mean_slice(w).expand(-1, w.shape[1] + k_new, -1, -1).contiguous()


def adapt_kernel(scheme: str, w: torch.Tensor, k_new: int, seed: int = 0) -> torch.Tensor:
    if scheme == "olaf-average":
        return adapt_olaf(w, k_new)
    if scheme == "random-5":
        return adapt_random5(w, k_new, seed)
    if scheme == "random-2":
        return adapt_random2(w, k_new, seed)
    if scheme == "average-rgb-5":
        return adapt_average_rgb5(w, k_new)
    raise AdaptationError(f"{scheme!r} is not a kernel-level scheme")


def adapt_conv(conv: nn.Conv2d, scheme: str, k_new: int, seed: int = 0) -> nn.Conv2d:
    """New Conv2d taking ``in_channels + k_new`` inputs; bias is carried over unchanged."""
    w = conv.weight.detach()
    new_w = adapt_kernel(scheme, w, k_new, seed)
    out = nn.Conv2d(new_w.shape[1], conv.out_channels, conv.kernel_size, conv.stride,
                    conv.padding, conv.dilation, conv.groups, bias=conv.bias is not None,
                    padding_mode=conv.padding_mode).to(dtype=w.dtype)
    with torch.no_grad():
        out.weight.copy_(new_w)
        if conv.bias is not None:
            out.bias.copy_(conv.bias.detach())
    return out


# -- Adapt-n-Freeze -----------------------------------------------------------------

class InputAdapter(nn.Module):
    """Conv over the augmented input followed by a 1x1 back to 3 channels."""

    def __init__(self, in_channels: int, width: int | None = None, kernel_size: int = 3):
        super().__init__()
        width = width or in_channels
        self.conv = nn.Conv2d(in_channels, width, kernel_size, padding=kernel_size // 2)
        self.to_rgb = nn.Conv2d(width, 3, 1)

    def forward(self, x):
        return self.to_rgb(self.conv(x))


class AdaptedModel(nn.Module):
    def __init__(self, adapter: InputAdapter, base: nn.Module):
        super().__init__()
        self.adapter = adapter
        self.base = base
        self.in_channels = adapter.conv.in_channels

    def forward(self, x):
        return self.base(self.adapter(x))


@dataclass
class StagedPlan:
    """Stage 1 (epochs < boundary) trains only the adapter; stage 2 trains everything."""

    model: AdaptedModel
    boundary: int = 5

    def stage(self, epoch: int) -> int:
        return 1 if epoch < self.boundary else 2

    def apply(self, epoch: int) -> int:
        stage = self.stage(epoch)
        for p in self.model.base.parameters():
            p.requires_grad_(stage == 2)
        for p in self.model.adapter.parameters():
            p.requires_grad_(True)
        return stage

    def trainable(self) -> list[nn.Parameter]:
        return [p for p in self.model.parameters() if p.requires_grad]


def build_adapt_n_freeze(base_model: nn.Module, k_new: int = 2, width: int | None = None,
                         boundary: int = 5, seed: int = 0) -> StagedPlan:
    torch.manual_seed(seed)
    adapter = InputAdapter(3 + k_new, width)
    plan = StagedPlan(AdaptedModel(adapter, base_model), boundary)
    plan.apply(0)
    return plan


# -- warm-up -------------------------------------------------------------------------

@dataclass
class WarmupSchedule:
    n_warm: int = 5
    base_lr: float = 1e-3
    mode: str = "ramp"  # ramp | freeze-backbone

    def multipliers(self, epochs: int) -> list[float]:
        return [warmup_multiplier(e, self) for e in range(epochs)]


def warmup_multiplier(epoch: int, sched: WarmupSchedule) -> float:
    """Linear LR ramp (epoch+1)/n_warm during warm-up, 1.0 afterwards."""
    if sched.mode != "ramp" or sched.n_warm <= 0 or epoch >= sched.n_warm:
        return 1.0
    return (epoch + 1) / sched.n_warm


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k].detach().cpu().numpy()).tobytes())
    return h.hexdigest()[:16]
