"""Miniature segmentation networks with optional LDF guidance, training step and checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapt import AdaptedModel, InputAdapter
from .channelizer import ShapeError
from .ldf import LDF, LdfConfig, Wiring, attach_cnn, attach_transformer, attach_unet


def conv_bn_relu(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.BatchNorm2d(out_ch), nn.ReLU())


def up2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class _InputChecked(nn.Module):
    in_channels: int

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            got = x.shape[1] if x.ndim == 4 else tuple(x.shape)
            raise ShapeError(f"expected {self.in_channels} input channels, got {got}")

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class EncoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.sub1 = conv_bn_relu(in_ch, out_ch)
        self.sub2 = conv_bn_relu(out_ch, out_ch)

    def forward(self, x):
        a = self.sub1(x)
        return a, self.sub2(a)


class MiniSegNet(_InputChecked):
    """Three conv blocks (strides 2/4/8) and a skip-free bilinear decoder.

    With ``ldf`` set, an LDF over the block-1 and block-2 outputs is
    concatenated into the stride-2 decoder stage.
    """

    arch = "minisegnet"

    def __init__(self, in_channels: int = 3, num_classes: int = 8, widths=(16, 32, 64),
                 ldf: LdfConfig | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.widths = tuple(widths)
        w1, w2, w3 = self.widths
        self.blocks = nn.ModuleList([EncoderBlock(in_channels, w1), EncoderBlock(w1, w2), EncoderBlock(w2, w3)])
        self.dec1 = conv_bn_relu(w3, w2)
        self.ldf = LDF(ldf) if ldf is not None else None
        self.dec2_in = w2 + (ldf.out_channels if ldf is not None else 0)
        self.dec2 = conv_bn_relu(self.dec2_in, w1)
        self.classifier = nn.Conv2d(w1, num_classes, 1)

    @staticmethod
    def default_ldf(widths=(16, 32, 64)) -> LdfConfig:
        return LdfConfig.desk(widths[0], widths[1], 2)

    def input_conv(self) -> nn.Conv2d:
        return self.blocks[0].sub1[0]

    def set_input_conv(self, conv: nn.Conv2d) -> None:
        self.blocks[0].sub1[0] = conv
        self.in_channels = conv.in_channels

    def taps(self) -> dict[str, int]:
        return {"block1": self.widths[0], "block2": self.widths[1]}

    def wiring(self) -> Wiring | None:
        if self.ldf is None:
            return None
        return attach_cnn(self.taps(), "dec2", self.widths[1], self.ldf.cfg)

    def forward(self, x):
        self._check_input(x)
        h, w = x.shape[-2:]
        feats = []
        for block in self.blocks:
            _, x = block(x)
            x = F.max_pool2d(x, 2)
            feats.append(x)
        y = self.dec1(up2(feats[2]))
        y = up2(y)
        if self.ldf is not None:
            g = self.ldf(feats[0], feats[1])
            if g.shape[-2:] != y.shape[-2:]:
                g = F.interpolate(g, size=y.shape[-2:], mode="bilinear", align_corners=False)
            y = torch.cat([y, g], dim=1)
        y = self.classifier(self.dec2(y))
        return F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)


class MiniUNet(_InputChecked):
    """Three-level U-Net; with ``ldf`` an LDF per encoder level feeds that level's skip."""

    arch = "miniunet"

    def __init__(self, in_channels: int = 3, num_classes: int = 8, widths=(16, 32, 64),
                 ldf: LdfConfig | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.widths = tuple(widths)
        chans = [in_channels, *self.widths]
        self.enc = nn.ModuleList(EncoderBlock(chans[i], chans[i + 1]) for i in range(3))
        self.bottleneck = conv_bn_relu(self.widths[2], self.widths[2])
        self.ldf_cfg = ldf
        self.ldfs = nn.ModuleList()
        if ldf is not None:
            for w in self.widths:
                self.ldfs.append(LDF(LdfConfig(w, w, ldf.mid_channels, ldf.aspp_rates,
                                               ldf.aspp_out_channels, ldf.out_channels, 1,
                                               ldf.upsample_mode)))
        extra = ldf.out_channels if ldf is not None else 0
        # decoder levels ordered deepest first
        self.dec = nn.ModuleList()
        below = self.widths[2]
        for w in reversed(self.widths):
            self.dec.append(nn.Sequential(conv_bn_relu(below + w + extra, w), conv_bn_relu(w, w)))
            below = w
        self.classifier = nn.Conv2d(self.widths[0], num_classes, 1)

    def decoder_in_channels(self) -> list[int]:
        return [d[0][0].in_channels for d in self.dec]

    def input_conv(self) -> nn.Conv2d:
        return self.enc[0].sub1[0]

    def set_input_conv(self, conv: nn.Conv2d) -> None:
        self.enc[0].sub1[0] = conv
        self.in_channels = conv.in_channels

    def wiring(self) -> Wiring | None:
        if self.ldf_cfg is None:
            return None
        return attach_unet(["enc0", "enc1", "enc2"], ["dec2", "dec1", "dec0"], self.ldf_cfg)

    def forward(self, x):
        self._check_input(x)
        skips = []
        for i, block in enumerate(self.enc):
            a, b = block(x)
            skip = b
            if len(self.ldfs):
                skip = torch.cat([b, self.ldfs[i](a, b)], dim=1)
            skips.append(skip)
            x = F.max_pool2d(b, 2)
        y = self.bottleneck(x)
        for dec, skip in zip(self.dec, reversed(skips)):
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = dec(torch.cat([y, skip], dim=1))
        return self.classifier(y)


class MiniTransformer(_InputChecked):
    """4x4 patch embedding, two self-attention blocks and a per-token linear decoder."""

    arch = "minitransformer"

    def __init__(self, in_channels: int = 3, num_classes: int = 8, dim: int = 32, depth: int = 2,
                 heads: int = 2, patch: int = 4, img_size: int = 64, ldf: LdfConfig | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.dim, self.depth, self.heads, self.patch, self.img_size = dim, depth, heads, patch, img_size
        self.widths = (dim,)
        self.embed = nn.Conv2d(in_channels, dim, patch, stride=patch)
        g = img_size // patch
        self.pos = nn.Parameter(torch.zeros(1, dim, g, g))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(dim, heads, 2 * dim, dropout=0.0, batch_first=True, norm_first=True)
            for _ in range(depth)
        )
        self.ldf_cfg = ldf
        self.ldf = LDF(LdfConfig(dim, dim, ldf.mid_channels, ldf.aspp_rates, ldf.aspp_out_channels,
                                 ldf.out_channels, 2, ldf.upsample_mode)) if ldf is not None else None
        self.decoder_in = dim + (ldf.out_channels if ldf is not None else 0)
        self.decoder = nn.Conv2d(self.decoder_in, num_classes, 1)

    def input_conv(self) -> nn.Conv2d:
        return self.embed

    def set_input_conv(self, conv: nn.Conv2d) -> None:
        self.embed = conv
        self.in_channels = conv.in_channels

    def wiring(self) -> Wiring | None:
        if self.ldf is None:
            return None
        g = self.img_size // self.patch
        return attach_transformer("block0", f"block{self.depth - 1}", self.ldf.cfg, grid=(g, g))

    def forward(self, x):
        self._check_input(x)
        h, w = x.shape[-2:]
        t = self.embed(x)
        gh, gw = t.shape[-2:]
        pos = self.pos if self.pos.shape[-2:] == (gh, gw) else F.interpolate(
            self.pos, size=(gh, gw), mode="bilinear", align_corners=False)
        tokens = (t + pos).flatten(2).transpose(1, 2)
        first = None
        for i, blk in enumerate(self.blocks):
            tokens = blk(tokens)
            if i == 0:
                first = tokens
        fmap = tokens.transpose(1, 2).reshape(-1, self.dim, gh, gw)
        if self.ldf is not None:
            f1 = first.transpose(1, 2).reshape(-1, self.dim, gh, gw)
            g = self.ldf(f1, F.avg_pool2d(f1, 2))
            if g.shape[-2:] != fmap.shape[-2:]:
                g = F.interpolate(g, size=fmap.shape[-2:], mode="bilinear", align_corners=False)
            fmap = torch.cat([fmap, g], dim=1)
        return F.interpolate(self.decoder(fmap), size=(h, w), mode="bilinear", align_corners=False)


ARCHS = {"minisegnet": MiniSegNet, "miniunet": MiniUNet, "minitransformer": MiniTransformer}


def default_ldf_config(arch: str, widths=(16, 32, 64)) -> LdfConfig:
    if arch == "minisegnet":
        return MiniSegNet.default_ldf(widths)
    if arch == "miniunet":
        return LdfConfig.desk(widths[0], widths[0], 1)
    return LdfConfig.desk(32, 32, 2)


def build_model(arch: str = "minisegnet", in_channels: int = 3, num_classes: int = 8,
                ldf: LdfConfig | bool | None = None, widths=(16, 32, 64), **kw) -> nn.Module:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHS)}")
    if ldf is True:
        ldf = default_ldf_config(arch, widths)
    elif ldf is False:
        ldf = None
    if arch == "minitransformer":
        return MiniTransformer(in_channels, num_classes, ldf=ldf, **kw)
    return ARCHS[arch](in_channels, num_classes, widths, ldf=ldf)


def forward(model: nn.Module, x) -> torch.Tensor:
    """Logits for a C x H x W stack (or a batch), returned with the same batching."""
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x)
    single = x.ndim == 3
    if single:
        x = x[None]
    dtype = next(model.parameters()).dtype
    out = model(x.to(dtype))
    return out[0] if single else out


def predict(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return model(x).argmax(1)


def segmentation_loss(logits, target, class_weights=None):
    return F.cross_entropy(logits, target, weight=class_weights)


def train_step(model: nn.Module, optimizer: torch.optim.Optimizer, x: torch.Tensor, y: torch.Tensor,
               base_lr: float, lr_multiplier: float = 1.0, class_weights=None) -> float:
    """One optimizer step; returns the loss before the update.

    A non-finite loss skips the update and rolls back the batch-norm running statistics
    that the forward pass already touched.
    """
    for group in optimizer.param_groups:
        group["lr"] = base_lr * lr_multiplier
    model.train()
    optimizer.zero_grad(set_to_none=True)
    buffers = {k: v.clone() for k, v in model.named_buffers()}
    loss = segmentation_loss(model(x), y, class_weights)
    value = float(loss.detach())
    if not math.isfinite(value):
        with torch.no_grad():
            for k, v in model.named_buffers():
                v.copy_(buffers[k])
        return value
    loss.backward()
    optimizer.step()
    return value


# -- checkpoints ------------------------------------------------------------------------

def model_manifest(model: nn.Module, provenance: dict | None = None) -> dict:
    inner = model.base if isinstance(model, AdaptedModel) else model
    ldf_cfg = getattr(inner, "ldf_cfg", None)
    if ldf_cfg is None and getattr(inner, "ldf", None) is not None:
        ldf_cfg = inner.ldf.cfg
    manifest = {
        "arch": inner.arch,
        "widths": list(inner.widths),
        "K": inner.num_classes,
        "in_channels": model.in_channels,
        "ldf": _jsonable(asdict(ldf_cfg)) if ldf_cfg is not None else None,
        "provenance": provenance or {},
    }
    if isinstance(model, AdaptedModel):
        manifest["adapter"] = {"in_channels": model.adapter.conv.in_channels,
                               "width": model.adapter.conv.out_channels}
    wiring = inner.wiring()
    manifest["wiring"] = json.loads(wiring.to_json()) if wiring is not None else None
    return manifest


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_checkpoint(path: str | Path, model: nn.Module, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path / "weights.npz", **state)
    (path / "manifest.json").write_text(json.dumps(model_manifest(model, provenance), indent=2))
    return path


def model_from_manifest(m: dict) -> nn.Module:
    ldf = LdfConfig(**m["ldf"]) if m.get("ldf") else None
    adapter = m.get("adapter")
    base_in = 3 if adapter else m["in_channels"]
    base = build_model(m["arch"], base_in, m["K"], ldf, tuple(m["widths"]))
    if adapter:
        return AdaptedModel(InputAdapter(adapter["in_channels"], adapter["width"]), base)
    return base


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {path}")
    manifest = json.loads((path / "manifest.json").read_text())
    model = model_from_manifest(manifest)
    with np.load(path / "weights.npz") as z:
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files}
    model.load_state_dict(state)
    model.eval()
    return model, manifest
