"""
Residual building blocks shared by FusionVAE and the comparison networks.

Encoder cells: BN, Swish, 3x3 conv, BN, Swish, 3x3 conv, squeeze-and-excitation.
Decoder cells: BN, 1x1 expand, BN, Swish, depthwise 5x5, BN, Swish, 1x1 project, BN, SE.
Every residual branch ends in a zero-initialized conv so a fresh cell is the identity map.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

BN_EPS = 1e-5
# PyTorch momentum 0.05 == running-average decay 0.95
BN_MOMENTUM = 0.05
CHANNEL_MULT = 2


def batch_norm(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


def zero_init(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int):
        """
        Channel gating from globally pooled activations

        Args:
            channels: Number of input and output channels
        """
        super().__init__()
        hidden = max(channels // 16, 4)
        self.gate = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeezed = x.mean(dim=[2, 3])
        weights = self.gate(squeezed).view(x.size(0), -1, 1, 1)
        return x * weights


class BNSwishConv(nn.Module):
    """BN -> Swish -> (optional nearest upsample) -> conv; stride -1 means upsample by 2"""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        self.upsample = stride == -1
        self.bn = batch_norm(c_in)
        self.conv = nn.Conv2d(c_in, c_out, kernel_size, stride=abs(stride), padding=kernel_size // 2, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.silu(self.bn(x))
        if self.upsample:
            out = F.interpolate(out, scale_factor=2, mode='nearest')
        return self.conv(out)


class EncoderCell(nn.Module):
    def __init__(self, channels: int, use_se: bool = True):
        """
        Residual encoder cell x + F(x)

        Args:
            channels: Feature width, unchanged by the cell
            use_se: Apply squeeze-and-excitation to the residual branch
        """
        super().__init__()
        self.branch = nn.Sequential(
            BNSwishConv(channels, channels, 3),
            BNSwishConv(channels, channels, 3),
        )
        zero_init(self.branch[-1].conv)
        self.se = SqueezeExcite(channels) if use_se else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.se(self.branch(x))


class DecoderCell(nn.Module):
    def __init__(self, channels: int, expansion: int = 6, kernel_size: int = 5, use_se: bool = True):
        """
        Residual decoder cell with an inverted-bottleneck depthwise separable branch

        Args:
            channels: Feature width, unchanged by the cell
            expansion: Hidden width multiplier of the 1x1 expansion
            kernel_size: Depthwise kernel size
            use_se: Apply squeeze-and-excitation to the residual branch
        """
        super().__init__()
        hidden = channels * expansion
        self.project = nn.Conv2d(hidden, channels, 1, bias=False)
        self.branch = nn.Sequential(
            batch_norm(channels),
            nn.Conv2d(channels, hidden, 1, bias=False),
            batch_norm(hidden),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, kernel_size, padding=kernel_size // 2, groups=hidden, bias=False),
            batch_norm(hidden),
            nn.SiLU(),
            self.project,
            batch_norm(channels),
        )
        zero_init(self.project)
        self.se = SqueezeExcite(channels) if use_se else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.se(self.branch(x))


class DownCell(nn.Module):
    """Halves the resolution and multiplies channels; the skip path is a factorized 1x1 reduction"""

    def __init__(self, c_in: int, c_out: int, use_se: bool = True):
        super().__init__()
        quarter = c_out // 4
        self.skip = nn.ModuleList([
            nn.Conv2d(c_in, quarter, 1, stride=2),
            nn.Conv2d(c_in, quarter, 1, stride=2),
            nn.Conv2d(c_in, quarter, 1, stride=2),
            nn.Conv2d(c_in, c_out - 3 * quarter, 1, stride=2),
        ])
        self.branch = nn.Sequential(
            BNSwishConv(c_in, c_out, 3, stride=2),
            BNSwishConv(c_out, c_out, 3),
        )
        zero_init(self.branch[-1].conv)
        self.se = SqueezeExcite(c_out) if use_se else nn.Identity()

    def _factorized_reduce(self, x: torch.Tensor) -> torch.Tensor:
        x = F.silu(x)
        # shifted views keep every input pixel reachable by one of the strided convs
        padded = F.pad(x, (0, 1, 0, 1))
        views = [x, padded[:, :, 1:, 1:], padded[:, :, :-1, 1:], padded[:, :, 1:, :-1]]
        return torch.cat([conv(v) for conv, v in zip(self.skip, views)], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._factorized_reduce(x) + self.se(self.branch(x))


class UpCell(nn.Module):
    """Doubles the resolution and divides channels"""

    def __init__(self, c_in: int, c_out: int, use_se: bool = True):
        super().__init__()
        self.skip = nn.Conv2d(c_in, c_out, 1)
        self.branch = nn.Sequential(
            BNSwishConv(c_in, c_out, 3, stride=-1),
            BNSwishConv(c_out, c_out, 3),
        )
        zero_init(self.branch[-1].conv)
        self.se = SqueezeExcite(c_out) if use_se else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skip = self.skip(F.interpolate(x, scale_factor=2, mode='bilinear', align_corners=True))
        return skip + self.se(self.branch(x))


class DecoderCombiner(nn.Module):
    """Merges a sampled latent into the decoder state: 1x1 conv over the concatenation"""

    def __init__(self, channels: int, latent_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels + latent_channels, channels, 1)

    def forward(self, state: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([state, z], dim=1))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
