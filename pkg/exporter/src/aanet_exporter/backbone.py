"""Feature backbones: anything that maps an image to a spatial feature map.

The default is a deterministic multi-scale gradient filter bank: per
smoothing scale it emits the smoothed intensity, rectified axis and
diagonal gradients, and the gradient magnitude, plus one constant bias
channel so no spatial cell is ever all-zero. Pretrained network weights
are not reproducible offline, and the downstream retrieval engine is
backbone-agnostic by design, so a handcrafted bank is the dependable
default; register alternatives in ``BACKBONES``.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

BIAS = 0.05


class GradientBankBackbone:
    """Multi-scale oriented-gradient energies over a grayscale image."""

    name = "gradient-bank"
    scales = (1.0, 2.0, 4.0, 8.0)

    @property
    def channels(self) -> int:
        return 6 * len(self.scales) + 1

    def features(self, image: np.ndarray) -> np.ndarray:
        """(H, W) grayscale in [0, 1] -> (H, W, C) float32 feature map."""
        if image.ndim != 2:
            raise ValueError(f"expected a grayscale (H, W) image, got {image.shape}")
        img = image.astype(np.float64)
        planes = [np.full_like(img, BIAS)]
        for sigma in self.scales:
            smooth = gaussian_filter(img, sigma=sigma, mode="nearest")
            dy, dx = np.gradient(smooth)
            diag1 = (dx + dy) / np.sqrt(2.0)
            diag2 = (dx - dy) / np.sqrt(2.0)
            planes.append(smooth)
            planes.append(np.abs(dx))
            planes.append(np.abs(dy))
            planes.append(np.abs(diag1))
            planes.append(np.abs(diag2))
            planes.append(np.sqrt(dx * dx + dy * dy))
        return np.stack(planes, axis=-1).astype(np.float32)


BACKBONES = {
    GradientBankBackbone.name: GradientBankBackbone,
}


def get_backbone(identifier: str):
    try:
        return BACKBONES[identifier]()
    except KeyError:
        known = ", ".join(sorted(BACKBONES))
        raise ValueError(f"unknown backbone {identifier!r} (known: {known})") from None
