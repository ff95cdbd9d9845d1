"""Desk-scale generator and discriminator families.

Every generator maps an (N, C+1, H, W) tensor -- masked image plus mask channel --
to an (N, C, H, W) image in [0, 1] and keeps its front half in ``self.encoder``.
That attribute is the encoder/decoder boundary used for encoder isolation.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

ENCODER_BOUNDARY = "encoder"


def rgb_to_gray(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] == 1:
        return x
    w = x.new_tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True)


# ------------------------------------------------------------------------ AOT-GAN

def _layer_norm(feat):
    mean = feat.mean((2, 3), keepdim=True)
    std = feat.std((2, 3), keepdim=True) + 1e-9
    return 5 * (2 * (feat - mean) / std - 1)


class AOTBlock(nn.Module):
    """Split-transform-merge over several dilation rates with a learned spatial gate."""

    def __init__(self, dim, rates=(1, 2, 4, 8)):
        super().__init__()
        branch = dim // len(rates)
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(dim, branch, 3, padding=r, dilation=r), nn.ReLU(True)) for r in rates
        )
        self.fuse = nn.Conv2d(branch * len(rates), dim, 3, padding=1)
        self.gate = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):
        out = self.fuse(torch.cat([b(x) for b in self.branches], 1))
        g = torch.sigmoid(_layer_norm(self.gate(x)))
        return x * (1 - g) + out * g


class UpConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=True))


class AOTGenerator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        w0, w1, w2 = cfg.widths
        cin = cfg.image_channels + 1
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(cin, w0, 7), nn.ReLU(True),
            nn.Conv2d(w0, w1, 4, 2, 1), nn.ReLU(True),
            nn.Conv2d(w1, w2, 4, 2, 1), nn.ReLU(True),
        )
        self.middle = nn.Sequential(*[AOTBlock(w2, cfg.dilation_rates) for _ in range(cfg.block_counts[0])])
        self.decoder = nn.Sequential(
            UpConv(w2, w1), nn.ReLU(True), UpConv(w1, w0), nn.ReLU(True),
            nn.Conv2d(w0, cfg.image_channels, 3, padding=1),
        )

    def forward(self, x):
        return (torch.tanh(self.decoder(self.middle(self.encoder(x)))) + 1) / 2


# --------------------------------------------------------------------- DeepFillV2

class GatedConv(nn.Module):
    """Convolution whose ELU features are scaled by a per-pixel, per-channel sigmoid gate."""

    def __init__(self, cin, cout, k=3, stride=1, dilation=1, activation=True):
        super().__init__()
        self.cout = cout
        self.activation = activation
        self.conv = nn.Conv2d(cin, 2 * cout, k, stride, padding=dilation * (k - 1) // 2, dilation=dilation)

    def forward(self, x):
        feat, gate = self.conv(x).split(self.cout, dim=1)
        if self.activation:
            feat = F.elu(feat)
        return feat * torch.sigmoid(gate)


class GatedUpConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = GatedConv(cin, cout, 3)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DeepFillGenerator(nn.Module):
    """Coarse gated-convolution network; the contextual-attention refinement stage is omitted."""

    def __init__(self, cfg):
        super().__init__()
        w = cfg.widths
        cin = cfg.image_channels + 1
        self.encoder = nn.Sequential(
            GatedConv(cin, w[0], 5),
            GatedConv(w[0], w[1], 3, stride=2),
            GatedConv(w[1], w[2], 3),
            GatedConv(w[2], w[3], 3, stride=2),
            GatedConv(w[3], w[4], 3),
        )
        self.middle = nn.Sequential(
            *[GatedConv(w[4], w[4], 3, dilation=r) for r in cfg.dilation_rates],
            GatedConv(w[4], w[4], 3),
        )
        self.decoder = nn.Sequential(
            GatedUpConv(w[4], w[2]), GatedConv(w[2], w[2], 3),
            GatedUpConv(w[2], w[0]), GatedConv(w[0], max(w[0] // 2, 4), 3),
            GatedConv(max(w[0] // 2, 4), cfg.image_channels, 3, activation=False),
        )

    def forward(self, x):
        return (torch.tanh(self.decoder(self.middle(self.encoder(x)))) + 1) / 2


# -------------------------------------------------------------------- EdgeConnect

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def canny_edges(gray: torch.Tensor, sigma: float = 1.0, threshold: float = 0.08) -> torch.Tensor:
    """Canny-style edge map: Gaussian blur, Sobel gradients, non-maximum suppression, threshold.

    Hysteresis is replaced by a single threshold. Returns a {0, 1} tensor of the
    input's shape; no gradient flows through it.
    """
    with torch.no_grad():
        r = max(int(round(2 * sigma)), 1)
        t = torch.arange(-r, r + 1, dtype=gray.dtype, device=gray.device)
        g = torch.exp(-t * t / (2 * sigma * sigma))
        g = g / g.sum()
        x = F.pad(gray, (r, r, r, r), mode="replicate")
        x = F.conv2d(x, g.view(1, 1, 1, -1))
        x = F.conv2d(x, g.view(1, 1, -1, 1))
        sx = _SOBEL_X.to(gray)
        xp = F.pad(x, (1, 1, 1, 1), mode="replicate")
        gx = F.conv2d(xp, sx.view(1, 1, 3, 3))
        gy = F.conv2d(xp, sx.t().contiguous().view(1, 1, 3, 3))
        mag = torch.sqrt(gx * gx + gy * gy) / 8.0
        # quantise direction into 0, 45, 90, 135 degrees and compare with both neighbours
        angle = torch.rad2deg(torch.atan2(gy, gx)) % 180.0
        sector = (((angle + 22.5) // 45.0) % 4).long()
        mp = F.pad(mag, (1, 1, 1, 1))
        h, w = mag.shape[-2:]

        def shifted(dy, dx):
            return mp[..., 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

        offsets = [((0, 1), (0, -1)), ((1, 1), (-1, -1)), ((1, 0), (-1, 0)), ((1, -1), (-1, 1))]
        keep = torch.zeros_like(mag, dtype=torch.bool)
        for s, (a, b) in enumerate(offsets):
            local_max = (mag >= shifted(*a)) & (mag >= shifted(*b))
            keep |= (sector == s) & local_max
        return (keep & (mag > threshold)).to(gray.dtype)


class ResBlock(nn.Module):
    def __init__(self, dim, dilation=2):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=dilation, dilation=dilation), nn.BatchNorm2d(dim), nn.ReLU(True),
            nn.Conv2d(dim, dim, 3, padding=1), nn.BatchNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


def _edgeconnect_encoder(cin, widths):
    w0, w1, w2 = widths
    return nn.Sequential(
        nn.ReflectionPad2d(3), nn.Conv2d(cin, w0, 7), nn.BatchNorm2d(w0), nn.ReLU(True),
        nn.Conv2d(w0, w1, 4, 2, 1), nn.BatchNorm2d(w1), nn.ReLU(True),
        nn.Conv2d(w1, w2, 4, 2, 1), nn.BatchNorm2d(w2), nn.ReLU(True),
    )


def _edgeconnect_decoder(widths, cout):
    w0, w1, w2 = widths
    return nn.Sequential(
        nn.ConvTranspose2d(w2, w1, 4, 2, 1), nn.BatchNorm2d(w1), nn.ReLU(True),
        nn.ConvTranspose2d(w1, w0, 4, 2, 1), nn.BatchNorm2d(w0), nn.ReLU(True),
        nn.ReflectionPad2d(3), nn.Conv2d(w0, cout, 7),
    )


class EdgeStage(nn.Module):
    """Completes the edge map inside the hole from (gray, masked edges, mask)."""

    def __init__(self, widths, n_blocks):
        super().__init__()
        self.encoder = _edgeconnect_encoder(3, widths)
        self.middle = nn.Sequential(*[ResBlock(widths[2]) for _ in range(n_blocks)])
        self.decoder = _edgeconnect_decoder(widths, 1)

    def forward(self, x):
        return torch.sigmoid(self.decoder(self.middle(self.encoder(x))))


class EdgeConnectGenerator(nn.Module):
    """Two-stage generator: edge completion, then image completion conditioned on edges.

    The inpainting stage sees the masked image plus the completed edge map in
    the channel slot where the other families receive the mask, so the isolated
    encoder accepts ``I (+) 0`` like the others.
    """

    def __init__(self, cfg):
        super().__init__()
        self.edge_stage = cfg.edge_stage
        if cfg.edge_stage:
            ew = tuple(max(w // 2, 4) for w in cfg.widths)
            self.edge_generator = EdgeStage(ew, 1)
        self.encoder = _edgeconnect_encoder(cfg.image_channels + 1, cfg.widths)
        self.middle = nn.Sequential(*[ResBlock(cfg.widths[2]) for _ in range(cfg.block_counts[0])])
        self.decoder = _edgeconnect_decoder(cfg.widths, cfg.image_channels)

    def edges(self, x):
        """(input edges, predicted edges, completed edges) for an (image, mask) input."""
        image, mask = x[:, :-1], x[:, -1:]
        gray = rgb_to_gray(image)
        hole = F.max_pool2d(mask, 3, 1, 1)  # drop spurious edges along the hole border
        edges_in = canny_edges(gray) * (1 - hole)
        if not self.edge_stage:
            return edges_in, edges_in, edges_in
        pred = self.edge_generator(torch.cat([gray, edges_in, mask], 1))
        return edges_in, pred, edges_in * (1 - mask) + pred * mask

    def complete(self, x):
        """Inpainted image together with (input edges, predicted edges)."""
        edges_in, pred, edges = self.edges(x)
        h = self.encoder(torch.cat([x[:, :-1], edges], 1))
        return (torch.tanh(self.decoder(self.middle(h))) + 1) / 2, edges_in, pred

    def forward(self, x):
        return self.complete(x)[0]


# --------------------------------------------------------------------------- LaMa

class FourierUnit(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(2 * cin, 2 * cout, 1, bias=False)
        self.bn = nn.BatchNorm2d(2 * cout)

    def forward(self, x):
        n, c, h, w = x.shape
        ff = torch.fft.rfft2(x, norm="ortho")
        ff = torch.stack([ff.real, ff.imag], dim=2).view(n, 2 * c, h, w // 2 + 1)
        ff = F.relu(self.bn(self.conv(ff)))
        ff = ff.view(n, -1, 2, h, w // 2 + 1)
        ff = torch.complex(ff[:, :, 0], ff[:, :, 1])
        return torch.fft.irfft2(ff, s=(h, w), norm="ortho")


class SpectralTransform(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.down = nn.AvgPool2d(2, 2) if stride == 2 else nn.Identity()
        hidden = max(cout // 2, 1)
        self.conv1 = nn.Sequential(nn.Conv2d(cin, hidden, 1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU(True))
        self.fu = FourierUnit(hidden, hidden)
        self.conv2 = nn.Conv2d(hidden, cout, 1, bias=False)

    def forward(self, x):
        x = self.conv1(self.down(x))
        return self.conv2(x + self.fu(x))


class FFC(nn.Module):
    """Fast Fourier convolution over a (local, global) channel split."""

    def __init__(self, cin, cout, k, ratio_gin, ratio_gout, stride=1, padding=0, spectral=True):
        super().__init__()
        self.in_g = int(cin * ratio_gin)
        in_l = cin - self.in_g
        self.out_g = int(cout * ratio_gout)
        self.out_l = cout - self.out_g

        def conv(a, b):
            return nn.Conv2d(a, b, k, stride, padding, bias=False) if a > 0 and b > 0 else None

        self.l2l = conv(in_l, self.out_l)
        self.l2g = conv(in_l, self.out_g)
        self.g2l = conv(self.in_g, self.out_l)
        if self.in_g > 0 and self.out_g > 0:
            self.g2g = SpectralTransform(self.in_g, self.out_g, stride) if spectral else conv(self.in_g, self.out_g)
        else:
            self.g2g = None

    def forward(self, x_l, x_g):
        out_l = out_g = 0
        if self.out_l:
            out_l = sum(m(x) for m, x in ((self.l2l, x_l), (self.g2l, x_g)) if m is not None)
        if self.out_g:
            out_g = sum(m(x) for m, x in ((self.l2g, x_l), (self.g2g, x_g)) if m is not None)
        return out_l, out_g


class FFCBlock(nn.Module):
    """FFC + BatchNorm + ReLU on both paths, taking and returning a concatenated tensor."""

    def __init__(self, cin, cout, ratio_gin, ratio_gout, stride=1, spectral=True):
        super().__init__()
        self.ffc = FFC(cin, cout, 3, ratio_gin, ratio_gout, stride, 1, spectral)
        self.split_in = cin - int(cin * ratio_gin)
        self.bn_l = nn.BatchNorm2d(self.ffc.out_l) if self.ffc.out_l else None
        self.bn_g = nn.BatchNorm2d(self.ffc.out_g) if self.ffc.out_g else None

    def forward(self, x):
        x_l, x_g = x[:, :self.split_in], x[:, self.split_in:]
        l, g = self.ffc(x_l, x_g)
        out = []
        if self.bn_l is not None:
            out.append(F.relu(self.bn_l(l)))
        if self.bn_g is not None:
            out.append(F.relu(self.bn_g(g)))
        return torch.cat(out, 1)


class FFCResBlock(nn.Module):
    def __init__(self, dim, ratio=0.75, spectral=True):
        super().__init__()
        self.conv1 = FFCBlock(dim, dim, ratio, ratio, spectral=spectral)
        self.conv2 = FFCBlock(dim, dim, ratio, ratio, spectral=spectral)

    def forward(self, x):
        return x + self.conv2(self.conv1(x))


class LaMaGenerator(nn.Module):
    """Three plain conv layers, then an FFC block that opens the global (spectral) path."""

    def __init__(self, cfg):
        super().__init__()
        w0, w1, w2, w3 = cfg.widths
        cin = cfg.image_channels + 1
        spectral = cfg.spectral_branch
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(cin, w0, 7, bias=False), nn.BatchNorm2d(w0), nn.ReLU(True),
            nn.Conv2d(w0, w1, 3, 2, 1, bias=False), nn.BatchNorm2d(w1), nn.ReLU(True),
            nn.Conv2d(w1, w2, 3, 2, 1, bias=False), nn.BatchNorm2d(w2), nn.ReLU(True),
            FFCBlock(w2, w3, 0.0, 0.75, stride=2, spectral=spectral),
        )
        self.middle = nn.Sequential(*[FFCResBlock(w3, 0.75, spectral) for _ in range(cfg.block_counts[0])])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(w3, w2, 3, 2, 1, output_padding=1, bias=False), nn.BatchNorm2d(w2), nn.ReLU(True),
            nn.ConvTranspose2d(w2, w1, 3, 2, 1, output_padding=1, bias=False), nn.BatchNorm2d(w1), nn.ReLU(True),
            nn.ConvTranspose2d(w1, w0, 3, 2, 1, output_padding=1, bias=False), nn.BatchNorm2d(w0), nn.ReLU(True),
            nn.ReflectionPad2d(3), nn.Conv2d(w0, cfg.image_channels, 7),
        )

    def forward(self, x):
        return torch.sigmoid(self.decoder(self.middle(self.encoder(x))))


# ------------------------------------------------------------------ discriminator

class PatchDiscriminator(nn.Module):
    """Spectral-normalised PatchGAN; returns per-patch scores and intermediate features."""

    def __init__(self, cin=3, base=16):
        super().__init__()
        dims = [cin, base, 2 * base, 4 * base]
        strides = [2, 2, 1]
        self.layers = nn.ModuleList(
            nn.Sequential(spectral_norm(nn.Conv2d(a, b, 4, s, 1)), nn.LeakyReLU(0.2, True))
            for a, b, s in zip(dims[:-1], dims[1:], strides)
        )
        self.head = spectral_norm(nn.Conv2d(dims[-1], 1, 3, 1, 1))

    def forward(self, x, return_features=False):
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        score = self.head(x)
        return (score, feats) if return_features else score


GENERATORS = {
    "aotgan": AOTGenerator,
    "deepfillv2": DeepFillGenerator,
    "edgeconnect": EdgeConnectGenerator,
    "lama": LaMaGenerator,
}
