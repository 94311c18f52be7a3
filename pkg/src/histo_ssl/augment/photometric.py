from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import numpy.typing as npt
from skimage.color import hsv2rgb, rgb2hsv

from histo_ssl.errors import ConfigError
from histo_ssl.tensor_kernel import Rng

# ITU-R BT.601 luma weights
REC601 = np.array([0.299, 0.587, 0.114])


@dataclass
class PhotometricPolicy:
    """Probabilities and strengths of the colour augmentations"""

    hflip_p: float = 0.5
    vflip_p: float = 0.5
    jitter_p: float = 0.8
    jitter: Tuple[float, float, float, float] = (0.4, 0.4, 0.2, 0.1)
    grayscale_p: float = 0.2
    solarize_enabled: bool = True
    solarize_p: float = 0.2
    solarize_threshold: int = 128

    def __post_init__(self):
        for name in ("hflip_p", "vflip_p", "jitter_p", "grayscale_p", "solarize_p"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {value}")
        self.jitter = tuple(float(v) for v in self.jitter)
        if len(self.jitter) != 4 or any(v < 0 for v in self.jitter):
            raise ConfigError(
                f"jitter needs 4 non-negative strengths (brightness, contrast, "
                f"saturation, hue), got {self.jitter}"
            )
        if self.jitter[3] > 0.5:
            raise ConfigError(f"hue jitter must be <= 0.5, got {self.jitter[3]}")

    @classmethod
    def disabled(cls) -> "PhotometricPolicy":
        return cls(
            hflip_p=0.0,
            vflip_p=0.0,
            jitter_p=0.0,
            grayscale_p=0.0,
            solarize_enabled=False,
            solarize_p=0.0,
        )


def _to_uint8(x: npt.NDArray) -> npt.NDArray[np.uint8]:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def luma(view: npt.NDArray) -> npt.NDArray[np.float64]:
    return view.astype(np.float64) @ REC601


def grayscale(view: npt.NDArray[np.uint8]) -> npt.NDArray[np.uint8]:
    gray = _to_uint8(luma(view))
    return np.repeat(gray[..., None], 3, axis=-1)


def solarize(view: npt.NDArray[np.uint8], threshold: int) -> npt.NDArray[np.uint8]:
    """Invert every pixel value >= threshold."""
    return np.where(view >= threshold, 255 - view, view).astype(np.uint8)


def color_jitter(
    view: npt.NDArray[np.uint8], strengths: Tuple[float, ...], rng: Rng
) -> npt.NDArray[np.uint8]:
    """Brightness, contrast, saturation then hue, each factor drawn uniformly
    around the identity."""
    brightness, contrast, saturation, hue = strengths
    x = view.astype(np.float64)
    if brightness > 0:
        x = np.clip(x * rng.uniform(max(0.0, 1 - brightness), 1 + brightness), 0, 255)
    if contrast > 0:
        factor = rng.uniform(max(0.0, 1 - contrast), 1 + contrast)
        mean = luma(x).mean()
        x = np.clip(mean + factor * (x - mean), 0, 255)
    if saturation > 0:
        factor = rng.uniform(max(0.0, 1 - saturation), 1 + saturation)
        gray = luma(x)[..., None]
        x = np.clip(gray + factor * (x - gray), 0, 255)
    if hue > 0:
        shift = rng.uniform(-hue, hue)
        hsv = rgb2hsv(x / 255.0)
        hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
        x = hsv2rgb(hsv) * 255.0
    return _to_uint8(x)


def apply_photometric(
    view: npt.NDArray[np.uint8], policy: PhotometricPolicy, rng: Rng
) -> Tuple[npt.NDArray[np.uint8], List[str]]:
    """Apply flip-h, flip-v, jitter, grayscale and solarize in that order.

    Returns the augmented view and the names of the ops that fired.
    """
    applied = []
    if rng.random() < policy.hflip_p:
        view = view[:, ::-1]
        applied.append("hflip")
    if rng.random() < policy.vflip_p:
        view = view[::-1, :]
        applied.append("vflip")
    if rng.random() < policy.jitter_p:
        view = color_jitter(view, policy.jitter, rng)
        applied.append("jitter")
    if rng.random() < policy.grayscale_p:
        view = grayscale(view)
        applied.append("grayscale")
    if policy.solarize_enabled and rng.random() < policy.solarize_p:
        view = solarize(view, policy.solarize_threshold)
        applied.append("solarize")
    return np.ascontiguousarray(view), applied
