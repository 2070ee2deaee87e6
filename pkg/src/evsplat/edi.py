"""Event-based double integral deblurring.

A blurry frame is the mean of latent images over its exposure; each latent
is the midpoint image scaled by exp(c * E(t)), with E(t) the events between
the midpoint and t.  Dividing the blur by the sampled mean of that scale
recovers the midpoint image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .event_core import EPS, EventStream, Thresholds, integrate_events, warp_intensity


@dataclass
class BlurFrame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    t_mid: float
    tau: float
    event_slice: EventStream

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("exposure duration must be positive")

    @property
    def t_start(self) -> float:
        return self.t_mid - self.tau / 2

    @property
    def t_end(self) -> float:
        return self.t_mid + self.tau / 2


def sample_times(frame: BlurFrame, n: int) -> np.ndarray:
    """n uniform timestamps spanning the exposure, endpoints included."""
    return frame.t_start + np.arange(n) * (frame.tau / (n - 1))


def relative_counts(stream: EventStream, t_ref: float, t: float) -> np.ndarray:
    """Signed event count E(t) accumulated from ``t_ref`` to ``t`` (half-open)."""
    if t >= t_ref:
        return integrate_events(stream, t_ref, t).counts
    return -integrate_events(stream, t, t_ref).counts


def relative_maps(frame: BlurFrame, times) -> list[np.ndarray]:
    """E(t) relative to the exposure midpoint at each of ``times``."""
    return [relative_counts(frame.event_slice, frame.t_mid, t) for t in times]


def sharp_from_maps(image, maps, th: Thresholds) -> np.ndarray:
    """Blur divided by the mean of exp(c * E_k); ``maps`` may be real-valued."""
    denom = np.mean([np.exp(th.scale(np.asarray(m, dtype=np.float64))) for m in maps], axis=0)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        denom = denom[..., None]
    return np.clip(img / denom, EPS, 1.0)


def latents_from_maps(sharp, maps, th: Thresholds) -> list[np.ndarray]:
    """The midpoint image carried to each sample time by its relative map."""
    return [np.asarray(sharp, dtype=np.float64).copy() if not np.any(m) else warp_intensity(sharp, m, th)
            for m in maps]


def edi_sharp(frame: BlurFrame, th: Thresholds, q: int = 9) -> np.ndarray:
    """Sharp image at the exposure midpoint from the blur and its events."""
    if q < 3 or q % 2 == 0:
        raise ValueError("quadrature count must be odd and >= 3")
    return sharp_from_maps(frame.image, relative_maps(frame, sample_times(frame, q)), th)


def edi_latents(frame: BlurFrame, th: Thresholds, n: int = 9) -> tuple[list[np.ndarray], np.ndarray]:
    """n latent images at uniform exposure timestamps, plus those timestamps.

    The midpoint image uses the same n samples for its quadrature (odd n),
    so the middle latent equals ``edi_sharp(frame, th, n)``.
    """
    if n < 2:
        raise ValueError("need at least two latents")
    times = sample_times(frame, n)
    q = n if n % 2 == 1 and n >= 3 else 2 * (n // 2) + 1
    sharp = edi_sharp(frame, th, q)
    return latents_from_maps(sharp, relative_maps(frame, times), th), times
