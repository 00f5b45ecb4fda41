"""Ternary quantization with Tequila deadzone reactivation."""

from ._core import (
    PackedModel,
    TequilaError,
    bench,
    boundary_fraction,
    deadzone_fraction,
    quantize,
    tequila_bias,
    train,
)

__all__ = [
    "PackedModel",
    "TequilaError",
    "bench",
    "boundary_fraction",
    "deadzone_fraction",
    "quantize",
    "tequila_bias",
    "train",
]
