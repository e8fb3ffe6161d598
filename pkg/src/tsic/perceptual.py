"""Perceptual-distance adapters used by both training and evaluation.

The default proxy is a multi-scale structural dissimilarity: mean over
scales of (1 - SSIM)/2 with a 7x7 Gaussian window, computed on the [-1, 1]
pixel range and differentiable through the autodiff tape. A pretrained
adapter can replace it by pointing at an .npz holding a fixed conv feature
stack (LPIPS-style normalized feature distances); nothing is bundled or
downloaded.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "PerceptualBackendUnavailable",
    "MsDssimProxy",
    "PretrainedFeatureDistance",
    "create_perceptual_adapter",
]


class PerceptualBackendUnavailable(RuntimeError):
    pass


class MsDssimProxy:
    """Multi-scale structural dissimilarity on [-1, 1] images.

    distance(x, y) = mean over usable scales of (1 - mean SSIM)/2, where each
    coarser scale is a 2x average-pool of the previous one. Zero iff the
    images agree; differentiable in both arguments.
    """

    name = "ms_dssim"

    def __init__(self, scales=3, window=7, sigma=1.5):
        self.scales = scales
        self.window = window
        ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
        g = np.exp(-(ax**2) / (2 * sigma**2))
        g /= g.sum()
        # the 2-D Gaussian window is separable: filter rows then columns
        self._krow = g[None, None, None, :]
        self._kcol = g[None, None, :, None]
        # dynamic range of [-1, 1] pixels is 2
        self.c1 = (0.01 * 2.0) ** 2
        self.c2 = (0.03 * 2.0) ** 2

    def _filter(self, t: Tensor) -> Tensor:
        n, c, h, w = t.shape
        flat = ad.reshape(t, (n * c, 1, h, w))
        out = ad.conv2d(flat, Tensor(self._krow.astype(t.data.dtype)), stride=1, pad=0)
        out = ad.conv2d(out, Tensor(self._kcol.astype(t.data.dtype)), stride=1, pad=0)
        return ad.reshape(out, (n, c, out.shape[2], out.shape[3]))

    def _ssim_scale(self, x: Tensor, y: Tensor) -> Tensor:
        mx = self._filter(x)
        my = self._filter(y)
        mxx = self._filter(x * x)
        myy = self._filter(y * y)
        mxy = self._filter(x * y)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2.0 * mx * my + self.c1) * (2.0 * cov + self.c2)
        den = (mx * mx + my * my + self.c1) * (vx + vy + self.c2)
        return ad.tmean(num / den)

    def distance(self, x, y):
        """x, y: Tensors [N,3,H,W] or ndarrays [3,H,W]; returns Tensor/float."""
        tensor_mode = isinstance(x, Tensor)
        if not tensor_mode:
            x = Tensor(np.asarray(x, dtype=np.float64)[None])
            y = Tensor(np.asarray(y, dtype=np.float64)[None])
        total = None
        used = 0
        cx, cy = x, y
        for s in range(self.scales):
            if cx.shape[2] < self.window or cx.shape[3] < self.window:
                break
            d = (1.0 - self._ssim_scale(cx, cy)) * 0.5
            total = d if total is None else total + d
            used += 1
            if s + 1 < self.scales:
                if cx.shape[2] % 2 or cx.shape[3] % 2:
                    break
                cx = ad.avg_pool2x(cx)
                cy = ad.avg_pool2x(cy)
        if used == 0:
            raise ValueError(f"images smaller than the {self.window}x{self.window} SSIM window")
        out = total * (1.0 / used)
        return out if tensor_mode else float(out.data)


class PretrainedFeatureDistance:
    """LPIPS-style distance over a user-supplied fixed conv stack.

    Expects an .npz with arrays conv0.w, conv0.b, conv1.w, ... (KCkhkw
    weights) and an integer array `strides`. Features are channel-normalized
    per layer; the distance is the mean squared feature difference averaged
    over layers.
    """

    name = "pretrained_features"

    def __init__(self, weights_path):
        if weights_path is None or not Path(weights_path).exists():
            raise PerceptualBackendUnavailable(
                "pretrained perceptual adapter needs an existing weights file; "
                "falling back to the ms_dssim proxy is the offline default"
            )
        with np.load(weights_path) as npz:
            strides = npz["strides"].astype(int)
            self.layers = []
            for i, s in enumerate(strides):
                w = npz[f"conv{i}.w"].astype(np.float64)
                b = npz[f"conv{i}.b"].astype(np.float64)
                self.layers.append((Tensor(w), Tensor(b), int(s), w.shape[2] // 2))
        if not self.layers:
            raise PerceptualBackendUnavailable("perceptual weights file holds no conv layers")

    def _features(self, x: Tensor):
        feats = []
        h = x
        for w, b, stride, pad in self.layers:
            h = ad.leaky_relu(ad.conv2d(h, w, b, stride=stride, pad=pad))
            norm = ad.sqrt(ad.tmean(ad.square(h), axis=1, keepdims=True) + 1e-10)
            feats.append(h / norm)
        return feats

    def distance(self, x, y):
        tensor_mode = isinstance(x, Tensor)
        if not tensor_mode:
            x = Tensor(np.asarray(x, dtype=np.float64)[None])
            y = Tensor(np.asarray(y, dtype=np.float64)[None])
        total = None
        for fx, fy in zip(self._features(x), self._features(y)):
            d = ad.tmean(ad.square(fx - fy))
            total = d if total is None else total + d
        out = total * (1.0 / len(self.layers))
        return out if tensor_mode else float(out.data)


def create_perceptual_adapter(kind="ms_dssim", weights_path=None):
    if kind == "ms_dssim":
        return MsDssimProxy()
    if kind == "pretrained_features":
        return PretrainedFeatureDistance(weights_path)
    raise ValueError(f"unknown perceptual adapter: {kind!r}")
