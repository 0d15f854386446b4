"""Architecture strings and their parser.

Networks are described as ' - '-separated token lists:

    K{k}S{s}C{c}[D{d}]   gated convolution (kernel, stride, channels,
                         optional dilation), optionally tagged with a
                         feature tap suffix like ``[P1]``
    downsample(2x)       2x block-average shrink
    upsample(2x)         2x enlarge
    concat               channel-concat with the next queued branch output
    clip                 clamp values to [-1, 1]
    [P]                  standalone tap marker (attention feature map)
    ACM / ATM            attention score computation / transfer
    dense(1)             fully-connected head to one unit (discriminator)

Channel numbers in the strings are the reference width; builders scale
them by a width multiplier (3-channel image outputs are never scaled).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ArchError

# reference generator: a coarse network hallucinates content at half
# resolution, a refine network sharpens at full working resolution, with
# attention transfer branches merging into the refine decoder
COARSE_ARCH = (
    "downsample(2x) - K5S2C32 - K3S1C32 - K3S2C64 - K3S1C64 - K3S1C64 - "
    "K3S1C64 - K3S1C64 - K3S1C64 - K3S1C64 - K3S1C64D2 - K3S1C64D2 - "
    "K3S1C64D2 - K3S1C64D2 - K3S1C64D2 - K3S1C64D4 - K3S1C64D4 - K3S1C64D4 - "
    "K3S1C64D4 - K3S1C64D8 - K3S1C64D8 - K3S1C64 - K3S1C64 - K3S1C64 - "
    "upsample(2x) - K3S1C32 - upsample(2x) - K3S1C3 - clip - upsample(2x)"
)

REFINE_ARCH = (
    "K5S2C32 - K3S1C32[P1] - K3S2C64 - K3S1C64[P2] - K3S2C128 - K3S1C128 - "
    "K3S1C128 - K3S1C128D2 - K3S1C128D4 - K3S1C128D8 - K3S1C128D16[P3] - "
    "concat - K3S1C128 - upsample(2x) - K3S1C64 - K3S1C64 - concat - "
    "upsample(2x) - K3S1C32 - K3S1C32 - concat - upsample(2x) - K3S1C3 - clip"
)

SCORE_BRANCH_ARCH = "[P3] - downsample(2x) - [P] - ACM"

TRANSFER_BRANCH_ARCHS = {
    "P3": "[P3] - ATM - K3S1C128 - concat",
    "P2": "[P2] - ATM - K3S1C64 - K3S1C64D2 - concat",
    "P1": "[P1] - ATM - K3S1C32 - K3S1C32D2 - concat",
}

DISCRIMINATOR_ARCH = (
    "K3S2C64 - K3S2C128 - K3S2C256 - K3S2C256 - K3S2C256 - K3S2C256 - dense(1)"
)


@dataclass(frozen=True)
class ConvToken:
    kernel: int
    stride: int
    channels: int
    dilation: int = 1
    tap: str | None = None

    def __str__(self):
        s = f"K{self.kernel}S{self.stride}C{self.channels}"
        if self.dilation != 1:
            s += f"D{self.dilation}"
        if self.tap:
            s += f"[{self.tap}]"
        return s


@dataclass(frozen=True)
class ResizeToken:
    kind: str  # 'downsample' or 'upsample'
    factor: int

    def __str__(self):
        return f"{self.kind}({self.factor}x)"


@dataclass(frozen=True)
class MarkToken:
    kind: str  # 'concat', 'clip', 'ACM', 'ATM'

    def __str__(self):
        return self.kind


@dataclass(frozen=True)
class TapToken:
    name: str

    def __str__(self):
        return f"[{self.name}]"


@dataclass(frozen=True)
class DenseToken:
    units: int

    def __str__(self):
        return f"dense({self.units})"


_CONV_RE = re.compile(r"^K(\d+)S(\d+)C(\d+)(?:D(\d+))?(?:\[(\w+)\])?$")
_RESIZE_RE = re.compile(r"^(downsample|upsample)\((\d+)x\)$")
_TAP_RE = re.compile(r"^\[(\w+)\]$")
_DENSE_RE = re.compile(r"^dense\((\d+)\)$")


@dataclass(frozen=True)
class ArchSpec:
    tokens: tuple = field(default_factory=tuple)

    def __str__(self):
        return " - ".join(str(t) for t in self.tokens)

    @property
    def conv_tokens(self) -> list[ConvToken]:
        return [t for t in self.tokens if isinstance(t, ConvToken)]

    @property
    def n_concats(self) -> int:
        return sum(
            1 for t in self.tokens if isinstance(t, MarkToken) and t.kind == "concat"
        )

    @property
    def taps(self) -> list[str]:
        names = [t.tap for t in self.tokens if isinstance(t, ConvToken) and t.tap]
        names += [t.name for t in self.tokens if isinstance(t, TapToken)]
        return names


def parse_arch(text: str) -> ArchSpec:
    """Parse an architecture string; round-trips via str()."""
    if not text or not text.strip():
        raise ArchError("empty architecture string")
    tokens = []
    for raw in text.split(" - "):
        tok = raw.strip()
        m = _CONV_RE.match(tok)
        if m:
            k, s, c, d, tap = m.groups()
            tokens.append(
                ConvToken(int(k), int(s), int(c), int(d) if d else 1, tap)
            )
            continue
        m = _RESIZE_RE.match(tok)
        if m:
            tokens.append(ResizeToken(m.group(1), int(m.group(2))))
            continue
        if tok in ("concat", "clip", "ACM", "ATM"):
            tokens.append(MarkToken(tok))
            continue
        m = _TAP_RE.match(tok)
        if m:
            tokens.append(TapToken(m.group(1)))
            continue
        m = _DENSE_RE.match(tok)
        if m:
            tokens.append(DenseToken(int(m.group(1))))
            continue
        raise ArchError(f"unknown architecture token {tok!r}")
    spec = ArchSpec(tokens=tuple(tokens))
    taps = spec.taps
    if len(taps) != len(set(taps)):
        raise ArchError(f"duplicate tap names in {text!r}")
    return spec


def scale_channels(channels: int, width_mult: float) -> int:
    """Scale a channel count by the width multiplier.  Three-channel
    (image) layers keep their width."""
    if channels == 3:
        return 3
    return max(1, round(channels * width_mult))


def receptive_profile(spec: ArchSpec) -> list[dict]:
    """Per-token receptive field bookkeeping.

    Returns one record per token with the receptive field extent in input
    pixels ('rf') and the input-pixel spacing of the current feature grid
    ('jump'); 'rf_local' is the extent measured in that grid's own cells.
    """
    rf = 1.0
    jump = 1.0
    profile = []
    for tok in spec.tokens:
        if isinstance(tok, ConvToken):
            rf += (tok.kernel - 1) * tok.dilation * jump
            jump *= tok.stride
        elif isinstance(tok, ResizeToken):
            if tok.kind == "downsample":
                rf += (tok.factor - 1) * jump
                jump *= tok.factor
            else:
                jump /= tok.factor
        profile.append(
            {"token": str(tok), "rf": rf, "jump": jump, "rf_local": rf / jump}
        )
    return profile
