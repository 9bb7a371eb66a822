"""Zero-padded (linear) spatial convolution via real FFTs.

A kernel array of the image's shape is given together with the index of
its origin pixel. Output has the image's shape ("same" mode); the padded
transform size is at least ``2 n - 1`` per axis so nothing wraps around.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sfft


def padded_shape(shape: tuple[int, int]) -> tuple[int, int]:
    ny, nx = shape
    return (sfft.next_fast_len(2 * ny - 1, real=True), sfft.next_fast_len(2 * nx - 1, real=True))


class SpectralKernel:
    """Kernel stack ``(..., ny, nx)`` with origin ``centre``, held as rfft2
    spectra on the padded grid."""

    def __init__(self, kernel: np.ndarray, centre: tuple[int, int], workers: int | None = None):
        kernel = np.asarray(kernel, dtype=np.float64)
        self.shape = kernel.shape[-2:]
        self.centre = tuple(int(c) for c in centre)
        self.pshape = padded_shape(self.shape)
        self.workers = workers
        self.hat = sfft.rfft2(self.embed_kernel(kernel), workers=workers)

    def embed_kernel(self, kernel: np.ndarray) -> np.ndarray:
        """Place the kernel on the padded grid with its origin at index 0."""
        ny, nx = self.shape
        padded = np.zeros(kernel.shape[:-2] + self.pshape)
        padded[..., :ny, :nx] = kernel
        return np.roll(padded, (-self.centre[0], -self.centre[1]), axis=(-2, -1))

    def pad(self, image: np.ndarray) -> np.ndarray:
        ny, nx = self.shape
        out = np.zeros(image.shape[:-2] + self.pshape)
        out[..., :ny, :nx] = image
        return out

    def crop(self, padded: np.ndarray) -> np.ndarray:
        ny, nx = self.shape
        return padded[..., :ny, :nx]

    def rfft(self, padded: np.ndarray) -> np.ndarray:
        return sfft.rfft2(padded, workers=self.workers)

    def irfft(self, spectrum: np.ndarray) -> np.ndarray:
        return sfft.irfft2(spectrum, s=self.pshape, workers=self.workers)

    def full(self, image: np.ndarray) -> np.ndarray:
        """Convolution over the whole padded support (not cropped)."""
        return self.irfft(self.hat * self.rfft(self.pad(image)))

    def __call__(self, image: np.ndarray) -> np.ndarray:
        """Linear convolution of a 2D image, cropped to the image extent."""
        return self.crop(self.full(image))


def convolve_same(kernel: np.ndarray, centre: tuple[int, int], image: np.ndarray) -> np.ndarray:
    return SpectralKernel(kernel, centre)(image)
