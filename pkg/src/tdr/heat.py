"""Simulated degradation image streams from 2-D heat transfer.

Each asset solves ``dX/dt = a_m (X_xx + X_yy)`` on ``[0, 0.2]^2`` with the
boundary held at 30 and the interior starting at 0.  The ``n x n`` interior
grid is advanced by backward Euler with a 5-point Laplacian, the noisy
images get i.i.d. Gaussian pixel noise, and the failure time is the first
frame whose noiseless mean intensity reaches the threshold.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .prognostics import AssetStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    n_grid: int = 21
    n_steps: int = 150
    length: float = 0.2
    boundary_value: float = 30.0
    initial_value: float = 0.0
    diffusivity_range: tuple = (0.5e-4, 1.0e-4)
    noise_variance: float = 0.1
    threshold: float = 23.0
    keep_every: int = 10
    dt: float = 0.35
    n_assets: int = 500
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.diffusivity_range
        if not 0 < lo <= hi:
            raise ValueError(f"diffusivity range must be positive and ordered, got {self.diffusivity_range}")
        if min(self.n_grid, self.n_steps, self.keep_every) < 1 or self.length <= 0 or self.dt <= 0:
            raise ValueError("grid size, step count, keep_every, length and dt must be positive")
        if self.noise_variance < 0 or self.n_assets < 0:
            raise ValueError("noise variance and asset count must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["diffusivity_range"] = list(self.diffusivity_range)
        return d


@dataclass
class SimulatedAsset:
    stream: AssetStream
    true_ttf: int
    diffusivity: float


def _laplacian(n: int, h: float):
    t = sparse.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1])
    eye = sparse.identity(n)
    lap = (sparse.kron(eye, t) + sparse.kron(t, eye)) / h**2
    # boundary neighbours of each interior node
    edge = np.zeros(n)
    edge[0] += 1
    edge[-1] += 1
    count = (edge[:, None] + edge[None, :]).ravel()
    return lap.tocsc(), count / h**2


def simulate_field(diffusivity: float, cfg: SimConfig) -> np.ndarray:
    """Noiseless temperature frames ``(n, n, n_steps)``; frame 0 is the initial condition."""
    if diffusivity < 0:
        raise ValueError(f"diffusivity must be non-negative, got {diffusivity}")
    n = cfg.n_grid
    h = cfg.length / (n + 1)
    lap, bnd = _laplacian(n, h)
    r = diffusivity * cfg.dt
    solver = splu((sparse.identity(n * n, format="csc") - r * lap).tocsc())
    forcing = r * cfg.boundary_value * bnd
    u = np.full(n * n, cfg.initial_value, dtype=float)
    frames = np.empty((n, n, cfg.n_steps))
    frames[:, :, 0] = u.reshape(n, n)
    for t in range(1, cfg.n_steps):
        u = solver.solve(u + forcing)
        frames[:, :, t] = u.reshape(n, n)
    return frames


def simulate_stream(diffusivity: float, cfg: SimConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(noiseless, noisy)`` frame stacks of shape ``(n, n, n_steps)``."""
    clean = simulate_field(diffusivity, cfg)
    noisy = clean + rng.normal(0.0, math.sqrt(cfg.noise_variance), size=clean.shape)
    return clean, noisy


def compute_ttf(mean_series, threshold: float) -> int | None:
    """1-based index of the first value at or above `threshold`, or ``None``."""
    hits = np.flatnonzero(np.asarray(mean_series) >= threshold)
    return int(hits[0]) + 1 if hits.size else None


def truncate_subsample(stream, ttf: int, keep_every: int) -> AssetStream:
    """Drop frames after `ttf` (1-based), then keep frames 1, 1+k, 1+2k, ..."""
    if not isinstance(stream, AssetStream):
        stream = AssetStream(stream)
    if not 1 <= ttf <= stream.length:
        raise ValueError(f"failure time {ttf} outside the stream of {stream.length} frames")
    keep = np.arange(0, ttf, keep_every)
    return AssetStream(stream.images[:, :, keep], stream.mask[:, :, keep], stream.ttf)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def inject_missing(stream: AssetStream, rate: float, pattern: str, rng) -> AssetStream:
    """Mask ``round(rate * D)`` whole frames (``"image"``) or ``round(rate * count)`` pixels (``"entry"``).

    Removal order is a random permutation drawn from `rng`, so two calls with
    identically seeded generators give nested masks for increasing rates.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {rate}")
    pattern = {"imagewise": "image", "entrywise": "entry"}.get(pattern, pattern)
    mask = stream.mask.copy()
    if pattern == "image":
        d = stream.length
        drop = rng.permutation(d)[: _round_half_up(rate * d)]
        mask[:, :, drop] = False
    elif pattern == "entry":
        flat = mask.reshape(-1, order="F")
        drop = rng.permutation(flat.size)[: _round_half_up(rate * flat.size)]
        flat[drop] = False
        mask = flat.reshape(stream.mask.shape, order="F")
    else:
        raise ValueError(f"unknown missing pattern {pattern!r}")
    return AssetStream(np.where(mask, stream.images, 0.0), mask, stream.ttf)


def generate_dataset(cfg: SimConfig) -> list[SimulatedAsset]:
    """Simulate `cfg.n_assets` truncated, subsampled noisy streams with their failure times.

    Every asset draws from its own child generator of ``cfg.seed``; draws
    whose mean never reaches the threshold are redrawn.
    """
    lo, hi = cfg.diffusivity_range
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_assets)
    assets = []
    redraws = 0
    for child in children:
        rng = np.random.default_rng(child)
        for _ in range(1000):
            a = rng.uniform(lo, hi)
            clean, noisy = simulate_stream(a, cfg, rng)
            ttf = compute_ttf(clean.mean(axis=(0, 1)), cfg.threshold)
            if ttf is not None:
                break
            redraws += 1
        else:
            raise RuntimeError("no diffusivity in range reaches the failure threshold; "
                               "increase dt or n_steps")
        stream = truncate_subsample(AssetStream(noisy, ttf=float(ttf)), ttf, cfg.keep_every)
        assets.append(SimulatedAsset(stream, ttf, a))
    if redraws:
        log.warning("%d draws never crossed the threshold and were redrawn", redraws)
    return assets
