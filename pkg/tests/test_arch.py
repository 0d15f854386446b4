"""Architecture string parsing and receptive-field bookkeeping."""

import pytest

from crafill.arch import (
    COARSE_ARCH,
    DISCRIMINATOR_ARCH,
    REFINE_ARCH,
    SCORE_BRANCH_ARCH,
    TRANSFER_BRANCH_ARCHS,
    ConvToken,
    parse_arch,
    receptive_profile,
    scale_channels,
)
from crafill.errors import ArchError


class TestParse:
    def test_basic_conv_token(self):
        spec = parse_arch("K5S2C32")
        tok = spec.tokens[0]
        assert (tok.kernel, tok.stride, tok.channels, tok.dilation) == (5, 2, 32, 1)

    def test_dilation_token(self):
        tok = parse_arch("K3S1C64D8").tokens[0]
        assert tok.dilation == 8

    def test_tap_suffix(self):
        tok = parse_arch("K3S1C32[P1]").tokens[0]
        assert tok.tap == "P1"

    def test_empty_rejected(self):
        with pytest.raises(ArchError):
            parse_arch("")
        with pytest.raises(ArchError):
            parse_arch("   ")

    def test_unknown_token_rejected(self):
        with pytest.raises(ArchError):
            parse_arch("K3S1C32 - maxpool(2x)")

    def test_duplicate_taps_rejected(self):
        with pytest.raises(ArchError):
            parse_arch("K3S1C32[P1] - K3S1C32[P1]")

    @pytest.mark.parametrize(
        "text",
        [COARSE_ARCH, REFINE_ARCH, SCORE_BRANCH_ARCH, DISCRIMINATOR_ARCH]
        + list(TRANSFER_BRANCH_ARCHS.values()),
    )
    def test_reference_strings_round_trip(self, text):
        assert str(parse_arch(text)) == text

    def test_refine_taps_and_concats(self):
        spec = parse_arch(REFINE_ARCH)
        assert spec.taps == ["P1", "P2", "P3"]
        assert spec.n_concats == 3

    def test_coarse_conv_count(self):
        assert len(parse_arch(COARSE_ARCH).conv_tokens) == 25


class TestWidthScaling:
    def test_quarter_width(self):
        assert scale_channels(32, 0.25) == 8
        assert scale_channels(64, 0.25) == 16
        assert scale_channels(128, 0.25) == 32

    def test_image_channels_never_scale(self):
        assert scale_channels(3, 0.25) == 3
        assert scale_channels(3, 2.0) == 3

    def test_floor_at_one(self):
        assert scale_channels(4, 0.1) == 1


class TestReceptiveField:
    def test_dilated_stack_extends_past_61_cells(self):
        spec = parse_arch(COARSE_ARCH)
        profile = receptive_profile(spec)
        last_d8 = max(
            i
            for i, tok in enumerate(spec.tokens)
            if isinstance(tok, ConvToken) and tok.dilation == 8
        )
        assert profile[last_d8]["rf_local"] > 61

    def test_jump_returns_to_input_scale(self):
        profile = receptive_profile(parse_arch(COARSE_ARCH))
        assert profile[-1]["jump"] == 1.0
