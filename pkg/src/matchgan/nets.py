"""Generator, discriminator trunk with adversarial/classification heads, and
the match head that scores concatenated embedding pairs."""

from __future__ import annotations

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class InvalidSize(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


def init_weights(module: nn.Module, seed: int, std: float = 0.02) -> nn.Module:
    """Gaussian(0, std) conv weights and zero biases, drawn from a private generator."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return module


def count_parameters(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


class ResidualBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
        )

    def forward(self, x):
        return x + self.main(x)


class Generator(nn.Module):
    """Encoder / residual bottleneck / decoder translator conditioned on a label.

    The target label is tiled over the image plane and concatenated to the
    input channels. Three stride-2 convolutions halve the resolution, three
    transposed convolutions double it back, and a 7x7 convolution with tanh
    produces the image.
    """

    def __init__(self, image_size: int, n_attr: int, base_width: int = 64, n_res: int = 6):
        super().__init__()
        if image_size % 8 or image_size < 8:
            raise InvalidSize(f"generator image_size {image_size} must be a multiple of 8")
        if base_width < 2 or base_width % 2:
            raise InvalidSize("base_width must be an even integer >= 2")
        self.image_size = image_size
        self.n_attr = n_attr
        self.base_width = base_width
        self.n_res = n_res

        w = base_width
        layers = []
        cin = 3 + n_attr
        for cout in (w, 2 * w, 4 * w):
            layers += [nn.Conv2d(cin, cout, 4, 2, 1, bias=False),
                       nn.InstanceNorm2d(cout, affine=True), nn.ReLU(inplace=True)]
            cin = cout
        layers += [ResidualBlock(cin) for _ in range(n_res)]
        for cout in (2 * w, w, w // 2):
            layers += [nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False),
                       nn.InstanceNorm2d(cout, affine=True), nn.ReLU(inplace=True)]
            cin = cout
        layers += [nn.Conv2d(cin, 3, 7, 1, 3, bias=False), nn.Tanh()]
        self.main = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1:] != (3, self.image_size, self.image_size):
            raise ShapeMismatch(f"expected [B,3,{self.image_size},{self.image_size}], got {tuple(x.shape)}")
        if y.shape != (x.shape[0], self.n_attr):
            raise ShapeMismatch(f"labels {tuple(y.shape)} do not match batch {x.shape[0]} x {self.n_attr}")
        y = y.to(x.dtype)[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        return self.main(torch.cat([x, y], dim=1))


def default_depth(image_size: int) -> int:
    if image_size >= 128:
        return 6
    return int(math.log2(image_size)) - 1


class Discriminator(nn.Module):
    """Leaky-ReLU conv trunk producing ``emb``, with a patch adversarial head
    and a full-extent classification head on top of it."""

    def __init__(self, image_size: int, n_attr: int, base_width: int = 64,
                 depth: Optional[int] = None, max_width: Optional[int] = None):
        super().__init__()
        depth = default_depth(image_size) if depth is None else depth
        if depth < 1 or image_size % (2 ** depth):
            raise InvalidSize(f"image_size {image_size} must be divisible by 2**{depth}")
        self.image_size = image_size
        self.n_attr = n_attr
        self.base_width = base_width
        self.depth = depth
        self.max_width = max_width

        layers = []
        cin = 3
        for i in range(depth):
            cout = base_width * 2 ** i
            if max_width is not None:
                cout = min(cout, max_width)
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.01)]
            cin = cout
        self.trunk = nn.Sequential(*layers)
        self.emb_channels = cin
        self.emb_spatial = image_size // 2 ** depth
        self.adv_head = nn.Conv2d(cin, 1, 3, 1, 1, bias=False)
        self.cls_head = nn.Conv2d(cin, n_attr, self.emb_spatial, bias=False)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1:] != (3, self.image_size, self.image_size):
            raise ShapeMismatch(f"expected [B,3,{self.image_size},{self.image_size}], got {tuple(x.shape)}")
        return self.trunk(x)

    def heads(self, emb: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        adv = self.adv_head(emb).mean(dim=(1, 2, 3))
        cls = self.cls_head(emb).flatten(1)
        return adv, cls

    def forward(self, x: torch.Tensor):
        """Return ``(emb, adv_score [B], cls_logits [B, n_attr])``."""
        emb = self.embed(x)
        adv, cls = self.heads(emb)
        return emb, adv, cls

    def adv(self, x: torch.Tensor) -> torch.Tensor:
        return self.heads(self.embed(x))[0]


class MatchHead(nn.Module):
    """Single convolution over two channel-concatenated embeddings, softmaxed
    over {matched, mismatched}. Not symmetric in its two arguments."""

    def __init__(self, emb_channels: int, emb_spatial: Tuple[int, int]):
        super().__init__()
        if emb_channels <= 0:
            raise ValueError("emb_channels must be positive")
        self.emb_channels = emb_channels
        self.emb_spatial = tuple(emb_spatial)
        self.conv = nn.Conv2d(2 * emb_channels, 2, self.emb_spatial)

    def logits(self, emb_a: torch.Tensor, emb_b: torch.Tensor) -> torch.Tensor:
        if emb_a.shape != emb_b.shape:
            raise ShapeMismatch(f"embedding shapes differ: {tuple(emb_a.shape)} vs {tuple(emb_b.shape)}")
        if emb_a.shape[1] != self.emb_channels or tuple(emb_a.shape[2:]) != self.emb_spatial:
            raise ShapeMismatch(f"unexpected embedding shape {tuple(emb_a.shape)}")
        return self.conv(torch.cat([emb_a, emb_b], dim=1)).flatten(1)

    def forward(self, emb_a: torch.Tensor, emb_b: torch.Tensor) -> torch.Tensor:
        """``[B, 2]`` probabilities; column 0 is P(matched)."""
        return F.softmax(self.logits(emb_a, emb_b), dim=1)


def build_generator(image_size: int, n_attr: int, base_width: int = 64, n_res: int = 6,
                    seed: int = 0, dtype=torch.float32) -> Generator:
    return init_weights(Generator(image_size, n_attr, base_width, n_res), seed).to(dtype)


def build_discriminator(image_size: int, n_attr: int, base_width: int = 64,
                        depth: Optional[int] = None, max_width: Optional[int] = None,
                        seed: int = 1, dtype=torch.float32) -> Discriminator:
    return init_weights(Discriminator(image_size, n_attr, base_width, depth, max_width), seed).to(dtype)


def build_match_head(emb_channels: int, emb_spatial: Tuple[int, int], seed: int = 2,
                     zero_init: bool = False, dtype=torch.float32) -> MatchHead:
    head = init_weights(MatchHead(emb_channels, emb_spatial), seed)
    if zero_init:
        nn.init.zeros_(head.conv.weight)
    return head.to(dtype)


def generator_forward(G: Generator, x: torch.Tensor, y_trg: torch.Tensor) -> torch.Tensor:
    return G(x, y_trg)


def discriminator_forward(D: Discriminator, x: torch.Tensor):
    return D(x)


def match_forward(head: MatchHead, emb_a: torch.Tensor, emb_b: torch.Tensor) -> torch.Tensor:
    """P(matched) per pair."""
    return head(emb_a, emb_b)[:, 0]
