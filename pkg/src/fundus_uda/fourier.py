"""Amplitude/phase decomposition and low-frequency amplitude swapping.

Spectra are kept centred (zero frequency at ``(H // 2, W // 2)``). The band
mask is a centred box whose half-extent is ``round(beta * H)`` rows and
``round(beta * W)`` columns, clipped to half the spectrum, so any
``beta >= 0.5`` replaces the whole amplitude spectrum. Every ``beta > 0``
swaps at least the 3x3 block around DC.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ImageSample


@dataclass(frozen=True)
class FrequencyDecomposition:
    amplitude: np.ndarray  # 3 x H x W, >= 0
    phase: np.ndarray  # 3 x H x W, in [-pi, pi)


@dataclass(frozen=True)
class AmplitudeGroup:
    mean_amplitude: np.ndarray  # 3 x H x W
    member_ids: tuple[str, ...]
    group_index: int


@dataclass(frozen=True)
class BandMask:
    beta: float
    mask: np.ndarray  # H x W in {0, 1}


def _as_chw(image) -> np.ndarray:
    px = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
    if px.ndim == 2:
        px = px[..., None]
    return np.asarray(px, dtype=np.float64).transpose(2, 0, 1)


def forward_dft(image) -> FrequencyDecomposition:
    """Per-channel centred 2-D DFT. Accepts an ImageSample or an H x W (x C) array."""
    x = _as_chw(image)
    if not np.all(np.isfinite(x)):
        raise ValueError("forward_dft: non-finite pixel values")
    spec = np.fft.fftshift(np.fft.fft2(x, axes=(-2, -1)), axes=(-2, -1))
    phase = np.angle(spec)
    phase[phase >= np.pi] -= 2 * np.pi
    return FrequencyDecomposition(np.abs(spec), phase)


def inverse_dft(decomp: FrequencyDecomposition) -> np.ndarray:
    """Real H x W x C image from a centred decomposition (no clipping)."""
    spec = decomp.amplitude * np.exp(1j * decomp.phase)
    x = np.fft.ifft2(np.fft.ifftshift(spec, axes=(-2, -1)), axes=(-2, -1))
    return np.real(x).transpose(1, 2, 0)


def _half_extent(beta: float, n: int) -> int:
    return max(1, min(int(np.floor(beta * n + 0.5)), n // 2))


def build_band_mask(beta: float, H: int, W: int, swap_dc: bool = True) -> BandMask:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    hh, hw = _half_extent(beta, H), _half_extent(beta, W)
    ch, cw = H // 2, W // 2
    mask = np.zeros((H, W), dtype=np.float64)
    mask[max(0, ch - hh):min(H, ch + hh + 1), max(0, cw - hw):min(W, cw + hw + 1)] = 1.0
    if not swap_dc:
        mask[ch, cw] = 0.0
    return BandMask(float(beta), mask)


def average_amplitude(images: Sequence[ImageSample], k: int = 1, seed: int = 0) -> list[AmplitudeGroup]:
    """Mean amplitude spectra over ``k`` seeded random, near-equal partitions of ``images``."""
    if not images:
        raise ValueError("average_amplitude: empty image list")
    if not 1 <= k <= len(images):
        raise ValueError(f"need 1 <= k <= {len(images)}, got k={k}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images must share one resolution, got {sorted(shapes)}")
    order = np.random.default_rng(seed).permutation(len(images)) if k > 1 else np.arange(len(images))
    groups = []
    for gi, part in enumerate(np.array_split(order, k)):
        amps = [forward_dft(images[i]).amplitude for i in sorted(part)]
        groups.append(AmplitudeGroup(np.mean(amps, axis=0),
                                     tuple(images[i].id for i in sorted(part)), gi))
    return groups


def synthesize(src: ImageSample, amp: AmplitudeGroup, beta: float, swap_dc: bool = True) -> np.ndarray:
    """Unclipped H x W x 3 synthesis: swapped amplitude inside the band, source phase everywhere."""
    dec = forward_dft(src)
    if amp.mean_amplitude.shape != dec.amplitude.shape:
        raise ValueError(f"resolution mismatch: amplitude {amp.mean_amplitude.shape[1:]} "
                         f"vs image {dec.amplitude.shape[1:]}")
    m = build_band_mask(beta, *src.shape, swap_dc=swap_dc).mask[None]
    mixed = m * amp.mean_amplitude + (1.0 - m) * dec.amplitude
    return inverse_dft(FrequencyDecomposition(mixed, dec.phase))


def stylize(src: ImageSample, amp: AmplitudeGroup, beta: float, swap_dc: bool = True) -> ImageSample:
    out = np.clip(synthesize(src, amp, beta, swap_dc), 0.0, 1.0).astype(np.float32)
    domain = "synth_t_to_s" if src.domain in ("target", "synth_t_to_s") else "synth_s_to_t"
    meta = {"origin_id": src.meta.get("origin_id", src.id), "beta": float(beta),
            "group_index": amp.group_index}
    return ImageSample(out, src.label, domain, f"{src.id}@b{beta:.4f}g{amp.group_index}", meta)


def expand_dataset(samples: Sequence[ImageSample], policy, groups: Sequence[AmplitudeGroup],
                   swap_dc: bool = True) -> list[ImageSample]:
    """n * k stylized copies of every sample (n betas from ``policy``, k amplitude groups)."""
    betas = list(getattr(policy, "betas", policy))
    return [stylize(s, g, b, swap_dc) for s in samples for b in betas for g in groups]
