"""Positional encodings: fixed 2d sine tables for the spatial grid and
learned embeddings for the output slots (object queries).
"""

from __future__ import annotations

import numpy as np

from .layers import ConfigError
from .tensor import Parameter, Tensor

SPATIAL_MODES = ("sine-attn", "sine-input", "learned-attn", "none")
QUERY_MODES = ("attn", "input")


def sine_encoding_2d(height: int, width: int, d: int,
                     temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2d sine/cosine table [d, H, W].

    The first d/2 channels encode the row coordinate, the last d/2 the
    column coordinate.  Within each half, channel pair k holds
    (sin, cos) of position / temperature^(2k / (d/2)).  Positions are
    integer grid indices.
    """
    if d % 4 != 0:
        raise ConfigError(f"sine encoding needs d divisible by 4, got {d}")
    half = d // 2
    k = np.arange(half // 2, dtype=np.float64)
    inv_freq = temperature ** (-2.0 * k / half)                  # [d/4]
    ys = np.arange(height, dtype=np.float64)[:, None] * inv_freq  # [H, d/4]
    xs = np.arange(width, dtype=np.float64)[:, None] * inv_freq   # [W, d/4]
    enc = np.zeros((d, height, width))
    enc[0:half:2] = np.sin(ys).T[:, :, None]
    enc[1:half:2] = np.cos(ys).T[:, :, None]
    enc[half::2] = np.sin(xs).T[:, None, :]
    enc[half + 1::2] = np.cos(xs).T[:, None, :]
    return enc


class SpatialEncoding:
    """Spatial positional table [d, H, W] in one of four modes.

    sine-* modes hold a fixed table; learned-attn holds a Parameter
    shared by every attention layer; none holds nothing.
    """

    def __init__(self, mode: str, height: int, width: int, d: int,
                 temperature: float = 10000.0, rng=None, name: str = "spatial_enc"):
        if mode not in SPATIAL_MODES:
            raise ConfigError(f"unknown spatial encoding mode {mode!r}")
        self.mode = mode
        self.shape = (d, height, width)
        self.param = None
        if mode in ("sine-attn", "sine-input"):
            self.table = Tensor(sine_encoding_2d(height, width, d, temperature))
        elif mode == "learned-attn":
            scale = np.sqrt(2.0 / (d + height * width))
            self.param = Parameter(name, Tensor(rng.normal(0.0, scale, (d, height, width))))
            self.table = self.param.tensor
        else:
            self.table = None

    def flat(self) -> Tensor | None:
        """Table collapsed to a [d, HW] sequence, or None in mode none."""
        if self.table is None:
            return None
        d = self.shape[0]
        return self.table.reshape(d, self.shape[1] * self.shape[2])

    def at_attention(self) -> Tensor | None:
        """Encoding to add inside every attention layer (q/k side)."""
        return self.flat() if self.mode in ("sine-attn", "learned-attn") else None

    def at_input(self) -> Tensor | None:
        """Encoding to add once to the encoder input sequence."""
        return self.flat() if self.mode == "sine-input" else None

    def parameters(self):
        return [self.param] if self.param is not None else []


def init_object_queries(num_queries: int, d: int, rng,
                        name: str = "object_queries") -> Parameter:
    """Learned output encodings [d, N], normal with Xavier-style scale."""
    if num_queries < 1 or d < 1:
        raise ConfigError(f"object queries need N, d >= 1, got {num_queries}, {d}")
    scale = np.sqrt(2.0 / (num_queries + d))
    return Parameter(name, Tensor(rng.normal(0.0, scale, (d, num_queries))))
