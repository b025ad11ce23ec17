"""Baseband OFDM link simulation."""

from .channel import (
    ChannelProfile,
    ChannelRealization,
    Tap,
    apply_channel,
    available_profiles,
    generate_channel,
    load_profile,
    snr_to_noise_var,
)
from .ldpc import LdpcCode, load_code, parse_alist
from .link import Link, LinkConfig, ResourceGrid
from .modulation import constellation, hard_demap, qam_map, soft_demap
from .receivers import (
    lmmse_equalize,
    ls_estimate,
    ls_lmmse_receive,
    perfect_csi_receive,
)

__all__ = [
    "ChannelProfile",
    "ChannelRealization",
    "Tap",
    "apply_channel",
    "available_profiles",
    "generate_channel",
    "load_profile",
    "snr_to_noise_var",
    "LdpcCode",
    "load_code",
    "parse_alist",
    "Link",
    "LinkConfig",
    "ResourceGrid",
    "constellation",
    "hard_demap",
    "qam_map",
    "soft_demap",
    "lmmse_equalize",
    "ls_estimate",
    "ls_lmmse_receive",
    "perfect_csi_receive",
]
