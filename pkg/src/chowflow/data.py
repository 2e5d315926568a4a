"""Seeded generators for the synthetic targets, with CSV persistence.

Three benchmark distributions over R^3 (extendable to higher d for the
mixture), plus the standard-Gaussian base:

  - moons3d: two unit semicircular arcs in parallel planes z = 0 and z = 1;
    the second arc is horizontally flipped (x -> -x + 0.5) and offset by 0.5
    in y to form the complementary crescent. Isotropic Gaussian noise.
  - mixture: three Gaussian blobs with means [6,3,3], [-2,-3,-2], [0,0,5]
    in the first three coordinates (zeros beyond), common diagonal sd 0.6,
    an approximately even split, and shuffled row order.
  - torus3d: major radius R = 3.0, minor r = 0.75, angles uniform on
    (0, 2pi), plus isotropic noise.

Every generator is a pure function of its arguments and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ContractError
from .rng import SplitMix64

MIXTURE_MEANS = ((6.0, 3.0, 3.0), (-2.0, -3.0, -2.0), (0.0, 0.0, 5.0))
MIXTURE_SD = 0.6


@dataclass
class Dataset:
    points: np.ndarray
    name: str
    seed: int
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ContractError("dataset needs at least one row")
        if not np.all(np.isfinite(self.points)):
            raise ContractError("dataset contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]


def gen_moons3d(n: int, noise_sd: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved semicircular arcs in the planes z = 0 and z = 1."""
    if n < 1:
        raise ContractError("need n >= 1")
    rng = SplitMix64(seed)
    n_first = n // 2
    n_second = n - n_first
    phi1 = rng.uniform(n_first) * math.pi
    phi2 = rng.uniform(n_second) * math.pi
    first = np.stack([np.cos(phi1), np.sin(phi1), np.zeros(n_first)], axis=1)
    second = np.stack(
        [0.5 - np.cos(phi2), 0.5 - np.sin(phi2), np.ones(n_second)], axis=1
    )
    points = np.concatenate([first, second], axis=0)
    if noise_sd > 0:
        points = points + noise_sd * rng.normal((n, 3))
    return Dataset(points, "moons3d", seed, {"n": n, "noise_sd": noise_sd})


def gen_mixture(n: int, d: int = 3, seed: int = 0) -> Dataset:
    """Three well-separated Gaussian blobs, evenly split and shuffled."""
    if n < 1:
        raise ContractError("need n >= 1")
    if d < 3:
        raise ContractError("mixture needs d >= 3")
    rng = SplitMix64(seed)
    sizes = [n // 3] * 3
    for i in range(n - sum(sizes)):
        sizes[i] += 1
    blocks = []
    for mean3, size in zip(MIXTURE_MEANS, sizes):
        mean = np.zeros(d)
        mean[:3] = mean3
        blocks.append(mean + MIXTURE_SD * rng.normal((size, d)))
    points = np.concatenate(blocks, axis=0)
    points = points[rng.shuffled_indices(n)]
    return Dataset(points, "mixture", seed, {"n": n, "d": d})


def gen_torus3d(n: int, major_radius: float = 3.0, minor_radius: float = 0.75,
                noise_sd: float = 0.07, seed: int = 0) -> Dataset:
    """Points on a torus with angles uniform on (0, 2pi), plus noise."""
    if n < 1:
        raise ContractError("need n >= 1")
    if not major_radius > minor_radius > 0:
        raise ContractError("need major_radius > minor_radius > 0")
    rng = SplitMix64(seed)
    theta = rng.uniform(n) * (2.0 * math.pi)
    phi = rng.uniform(n) * (2.0 * math.pi)
    ring = major_radius + minor_radius * np.cos(phi)
    points = np.stack(
        [ring * np.cos(theta), ring * np.sin(theta), minor_radius * np.sin(phi)],
        axis=1,
    )
    if noise_sd > 0:
        points = points + noise_sd * rng.normal((n, 3))
    return Dataset(
        points, "torus3d", seed,
        {"n": n, "major_radius": major_radius, "minor_radius": minor_radius,
         "noise_sd": noise_sd},
    )


def gen_base_gaussian(n: int, d: int, seed: int = 0) -> Dataset:
    """Standard normal draws."""
    if n < 1 or d < 1:
        raise ContractError("need n >= 1 and d >= 1")
    rng = SplitMix64(seed)
    return Dataset(rng.normal((n, d)), "base_gaussian", seed, {"n": n, "d": d})


GENERATORS = {
    "moons3d": gen_moons3d,
    "mixture": gen_mixture,
    "torus3d": gen_torus3d,
    "base_gaussian": gen_base_gaussian,
}


def generate(name: str, n: int, seed: int, **kwargs) -> Dataset:
    """Dispatch by dataset name; unknown names are contract errors."""
    if name not in GENERATORS:
        raise ContractError(
            f"unknown dataset '{name}' (known: {', '.join(sorted(GENERATORS))})"
        )
    return GENERATORS[name](n, seed=seed, **kwargs)


def torus_surface_distance(points: np.ndarray, major_radius: float = 3.0,
                           minor_radius: float = 0.75) -> np.ndarray:
    """Distance from each point to the ideal torus surface."""
    points = np.asarray(points, dtype=np.float64)
    ring = np.sqrt(points[:, 0] ** 2 + points[:, 1] ** 2)
    tube = np.sqrt((ring - major_radius) ** 2 + points[:, 2] ** 2)
    return np.abs(tube - minor_radius)


# ---------------------------------------------------------------------------
# persistence


def write_points_csv(path: str, points: np.ndarray) -> None:
    """Header x1..xd, one row per point, 17 significant digits."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    header = ",".join(f"x{i + 1}" for i in range(points.shape[1]))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in points:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_points_csv(path: str) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("x1"):
            raise ContractError(f"'{path}' does not look like a points CSV")
        rows = [
            [float(v) for v in line.split(",")]
            for line in fh
            if line.strip()
        ]
    return np.asarray(rows, dtype=np.float64)


def write_sidecar(path: str, dataset: Dataset) -> None:
    """Plain key=value metadata next to a dataset CSV."""
    with open(path, "w") as fh:
        fh.write(f"name={dataset.name}\n")
        fh.write(f"seed={dataset.seed}\n")
        fh.write(f"rows={len(dataset)}\n")
        for key, value in sorted(dataset.args.items()):
            fh.write(f"{key}={value}\n")
