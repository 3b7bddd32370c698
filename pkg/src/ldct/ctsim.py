"""Paired full/quarter-dose CT slice simulator at desk scale.

Pipeline: parametric ellipse phantoms -> parallel-beam line integrals ->
Poisson photon noise with a photon-starvation clamp -> ramp-filtered
back-projection. Attenuation is in 1/cm, projections are dimensionless
line integrals, and geometry is centered: pixel (row, col) sits at
x = (col - (S-1)/2) * spacing, y = (row - (S-1)/2) * spacing.

All randomness flows through explicit numpy Generators, so pipelines are
replayable from their seeds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation

Array = np.ndarray


@dataclass(frozen=True)
class Ellipse:
    cx: float      # center, cm
    cy: float
    a: float       # semi-axes, cm
    b: float
    angle: float   # radians, counterclockwise
    mu: float      # added attenuation, 1/cm


@dataclass
class Phantom:
    size: int
    pixel_spacing: float          # cm per pixel
    mu: Array                     # (size, size) attenuation map
    ellipses: tuple[Ellipse, ...]

    @property
    def radius(self) -> float:
        """Inscribed-circle radius in cm; all support must fit inside."""
        return self.size * self.pixel_spacing / 2.0


@dataclass
class Sinogram:
    angles: Array                 # (A,) radians, uniform in [0, pi)
    offsets: Array                # (D,) signed detector offsets, cm
    p: Array                      # (A, D) line integrals
    pixel_spacing: float


@dataclass(frozen=True)
class DoseModel:
    n0_full: float                # mean unattenuated photons per bin

    QUARTER_FACTOR = 0.25

    @property
    def n0_quarter(self) -> float:
        return self.n0_full * self.QUARTER_FACTOR

    def validate(self) -> None:
        if not self.n0_full > 0:
            raise ContractViolation(f"n0_full must be > 0, got {self.n0_full}")


# ---------------------------------------------------------------------------
# phantoms


def make_phantom(ellipses, size: int = 64, pixel_spacing: float = 0.25) -> Phantom:
    """Sum of ellipse attenuations on a centered grid.

    Every ellipse (center plus largest semi-axis) must fit inside the image's
    inscribed circle so projections see the full support.
    """
    ellipses = tuple(ellipses)
    radius = size * pixel_spacing / 2.0
    for i, e in enumerate(ellipses):
        if e.a <= 0 or e.b <= 0:
            raise ContractViolation(f"ellipse {i}: axes must be positive, got a={e.a}, b={e.b}")
        if np.hypot(e.cx, e.cy) + max(e.a, e.b) > radius + 1e-9:
            raise ContractViolation(
                f"ellipse {i} leaves the inscribed circle "
                f"(|center| + max axis = {np.hypot(e.cx, e.cy) + max(e.a, e.b):.3f} cm "
                f"> {radius:.3f} cm)")
    coords = (np.arange(size) - (size - 1) / 2.0) * pixel_spacing
    xx, yy = np.meshgrid(coords, coords)  # xx varies along columns
    mu = np.zeros((size, size))
    for e in ellipses:
        dx = xx - e.cx
        dy = yy - e.cy
        c, s = np.cos(e.angle), np.sin(e.angle)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        mu += e.mu * ((u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0)
    return Phantom(size=size, pixel_spacing=pixel_spacing, mu=mu, ellipses=ellipses)


def random_phantom(rng: np.random.Generator, size: int = 64,
                   pixel_spacing: float = 0.25) -> Phantom:
    """4-10 soft-tissue ellipses; with probability 0.5, 1-2 bone-like
    inserts near the top (the streak-prone thoracic-apex layout)."""
    radius = size * pixel_spacing / 2.0
    ellipses = []

    # body outline: a large centered soft-tissue ellipse
    body_a = rng.uniform(0.70, 0.85) * radius
    body_b = rng.uniform(0.55, 0.75) * radius
    ellipses.append(Ellipse(cx=0.0, cy=0.0, a=body_a, b=body_b,
                            angle=rng.uniform(0, np.pi), mu=rng.uniform(0.14, 0.20)))

    n_soft = int(rng.integers(4, 11)) - 1  # body ellipse counts toward the draw
    for _ in range(n_soft):
        r = rng.uniform(0.0, 0.55) * radius
        phi = rng.uniform(0, 2 * np.pi)
        cx, cy = r * np.cos(phi), r * np.sin(phi)
        max_axis = min(0.35 * radius, radius - np.hypot(cx, cy))
        a = rng.uniform(0.2, 1.0) * max_axis
        b = rng.uniform(0.2, 1.0) * max_axis
        ellipses.append(Ellipse(cx=cx, cy=cy, a=max(a, pixel_spacing), b=max(b, pixel_spacing),
                                angle=rng.uniform(0, np.pi), mu=rng.uniform(-0.05, 0.06)))

    if rng.random() < 0.5:
        for _ in range(int(rng.integers(1, 3))):
            cx = rng.uniform(-0.25, 0.25) * radius
            cy = -rng.uniform(0.35, 0.55) * radius  # negative y: top of the image
            max_axis = radius - np.hypot(cx, cy)
            a = min(rng.uniform(0.10, 0.30) * radius, max_axis)
            b = a * rng.uniform(0.3, 0.6)  # elongated, streaks run along the major axis
            ellipses.append(Ellipse(cx=cx, cy=cy, a=max(a, pixel_spacing),
                                    b=max(b, pixel_spacing),
                                    angle=rng.uniform(-0.4, 0.4),
                                    mu=rng.uniform(0.45, 0.70)))

    # clamp any accidental negative totals: attenuation cannot be negative
    phantom = make_phantom(ellipses, size=size, pixel_spacing=pixel_spacing)
    np.maximum(phantom.mu, 0.0, out=phantom.mu)
    return phantom


def ellipses_to_json(ellipses, path) -> None:
    doc = [{"cx": e.cx, "cy": e.cy, "a": e.a, "b": e.b, "angle": e.angle, "mu": e.mu}
           for e in ellipses]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def ellipses_from_json(path) -> tuple[Ellipse, ...]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return tuple(Ellipse(**e) for e in doc)


# ---------------------------------------------------------------------------
# projection


def _bilinear(img: Array, fy: Array, fx: Array) -> Array:
    """Bilinear sample of img at fractional pixel coords; zero outside."""
    size_y, size_x = img.shape
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    tx = fx - x0
    ty = fy - y0

    def at(yi, xi):
        inside = (yi >= 0) & (yi < size_y) & (xi >= 0) & (xi < size_x)
        vals = img[np.clip(yi, 0, size_y - 1), np.clip(xi, 0, size_x - 1)]
        return np.where(inside, vals, 0.0)

    return ((1 - ty) * (1 - tx) * at(y0, x0)
            + (1 - ty) * tx * at(y0, x0 + 1)
            + ty * (1 - tx) * at(y0 + 1, x0)
            + ty * tx * at(y0 + 1, x0 + 1))


def radon(phantom: Phantom, n_angles: int = 180, n_bins: int | None = None) -> Sinogram:
    """Parallel-beam line integrals: rays sampled at pixel_spacing steps with
    bilinear interpolation, summed times the step length."""
    if n_angles < 1:
        raise ContractViolation(f"need at least one angle, got {n_angles}")
    if n_bins is None:
        n_bins = phantom.size
    if n_bins < phantom.size:
        raise ContractViolation(
            f"detector bins {n_bins} must cover the phantom size {phantom.size}")
    size = phantom.size
    spacing = phantom.pixel_spacing
    angles = np.arange(n_angles) * np.pi / n_angles
    offsets = (np.arange(n_bins) - (n_bins - 1) / 2.0) * spacing
    # ray parameter t spans the inscribed circle's diameter
    t = (np.arange(size + 1) - size / 2.0) * spacing
    center = (size - 1) / 2.0

    p = np.empty((n_angles, n_bins))
    for ai, theta in enumerate(angles):
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        x = offsets[:, None] * cos_t - t[None, :] * sin_t
        y = offsets[:, None] * sin_t + t[None, :] * cos_t
        samples = _bilinear(phantom.mu, y / spacing + center, x / spacing + center)
        p[ai] = samples.sum(axis=1) * spacing
    return Sinogram(angles=angles, offsets=offsets, p=p, pixel_spacing=spacing)


# ---------------------------------------------------------------------------
# dose model


def apply_dose(sino: Sinogram, n0: float, rng: np.random.Generator) -> Sinogram:
    """Poisson photon statistics at flux n0 per bin.

    Transmitted counts k ~ Poisson(n0 * exp(-p)); the measured line integral
    is -ln(max(k,1)/n0). The max(k,1) clamp models photon starvation: bins
    behind high-attenuation objects saturate, which the ramp filter turns
    into streaks along the attenuating object's major axis.
    """
    if not n0 > 0:
        raise ContractViolation(f"n0 must be > 0, got {n0}")
    lam = n0 * np.exp(-sino.p)
    counts = rng.poisson(lam).astype(np.float64)
    measured = -np.log(np.maximum(counts, 1.0) / n0)
    return Sinogram(angles=sino.angles.copy(), offsets=sino.offsets.copy(),
                    p=measured, pixel_spacing=sino.pixel_spacing)


# ---------------------------------------------------------------------------
# reconstruction


def _ramp_filter(p: Array, spacing: float) -> Array:
    """Ram-Lak filtering of each projection row in the frequency domain,
    zero-padded to the next power of two >= 2D (no apodization window).

    The frequency response is the spectrum of the band-limited ramp's
    impulse response (1/4 at 0, -1/(pi n)^2 at odd lags), not a sampled
    |f|: the sampled version zeroes the DC term and produces a cupping
    bias across the reconstruction.
    """
    n_bins = p.shape[1]
    n_pad = 1 << int(np.ceil(np.log2(2 * n_bins)))
    kernel = np.zeros(n_pad)
    kernel[0] = 0.25
    odd = np.arange(1, n_pad // 2 + 1, 2)
    kernel[odd] = -1.0 / (np.pi * odd) ** 2
    kernel[-odd] = -1.0 / (np.pi * odd) ** 2
    response = np.real(np.fft.rfft(kernel))  # symmetric kernel: real spectrum
    spectrum = np.fft.rfft(p, n=n_pad, axis=1) * response[None, :] / spacing
    return np.fft.irfft(spectrum, n=n_pad, axis=1)[:, :n_bins]


def fbp(sino: Sinogram, size: int) -> Array:
    """Filtered back-projection onto a size x size grid (same spacing)."""
    n_bins = sino.p.shape[1]
    if n_bins < size:
        raise ContractViolation(
            f"sinogram with {n_bins} bins cannot reconstruct a {size}px image")
    spacing = sino.pixel_spacing
    q = _ramp_filter(sino.p, spacing)

    coords = (np.arange(size) - (size - 1) / 2.0) * spacing
    xx, yy = np.meshgrid(coords, coords)
    bin_index = np.arange(n_bins, dtype=np.float64)
    center = (n_bins - 1) / 2.0
    image = np.zeros((size, size))
    for ai in range(len(sino.angles)):
        theta = sino.angles[ai]
        s = xx * np.cos(theta) + yy * np.sin(theta)
        u = s / spacing + center
        image += np.interp(u.ravel(), bin_index, q[ai], left=0.0, right=0.0).reshape(size, size)
    return image * (np.pi / len(sino.angles))


# ---------------------------------------------------------------------------
# pair factory


def simulate_pair(phantom: Phantom, dose: DoseModel, n_angles: int = 180,
                  n_bins: int | None = None, rng: np.random.Generator | None = None):
    """One shared noiseless sinogram, two independent noise draws (full and
    quarter dose), both reconstructed by fbp.

    Returns (full_image, quarter_image, ground_truth_mu).
    """
    dose.validate()
    if rng is None:
        raise ContractViolation("simulate_pair needs an explicit rng")
    sino = radon(phantom, n_angles=n_angles, n_bins=n_bins)
    full_sino = apply_dose(sino, dose.n0_full, rng)
    quarter_sino = apply_dose(sino, dose.n0_quarter, rng)
    full = fbp(full_sino, phantom.size)
    quarter = fbp(quarter_sino, phantom.size)
    return full, quarter, phantom.mu.copy()
