"""Gaussian Fourier positional encoding."""

from __future__ import annotations

import numpy as np

from .errors import InvalidConfig


class PositionalEncoder:
    """Scalar frequencies ``s_i ~ N(0, sigma2)`` applied element-wise to a point.

    The output for one point is laid out per frequency as
    ``sin(2 pi s_i x), sin(.. y), sin(.. z), cos(.. x), cos(.. y), cos(.. z)``,
    giving ``6 m`` values.
    """

    def __init__(self, frequencies, sigma2: float = float("nan"), seed: int | None = None):
        freqs = np.array(frequencies, dtype=np.float64).reshape(-1)
        if freqs.size < 1:
            raise InvalidConfig("encoder needs at least one frequency")
        freqs.flags.writeable = False
        self._frequencies = freqs
        self.sigma2 = sigma2
        self.seed = seed

    @classmethod
    def init(cls, m: int = 16, sigma2: float = 50.0, seed: int = 0) -> PositionalEncoder:
        if m < 1 or not sigma2 > 0:
            raise InvalidConfig(f"encoder needs m >= 1 and sigma2 > 0, got m={m}, sigma2={sigma2}")
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, np.sqrt(sigma2), size=m), sigma2, seed)

    @property
    def frequencies(self) -> np.ndarray:
        return self._frequencies

    @property
    def m(self) -> int:
        return self._frequencies.size

    @property
    def dim(self) -> int:
        return 6 * self.m

    def encode(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        arg = (2.0 * np.pi) * self._frequencies[None, :, None] * p[:, None, :]
        out = np.concatenate([np.sin(arg), np.cos(arg)], axis=2).reshape(p.shape[0], self.dim)
        return out[0] if single else out

    __call__ = encode


def init_encoder(m: int, sigma2: float, seed: int) -> PositionalEncoder:
    return PositionalEncoder.init(m, sigma2, seed)
