"""Synthetic revisit runs with position-dependent noisy descriptors.

Every run drives the same closed course, so runs revisit the same places.
A keynode's descriptor is a smooth function of its position (random
Fourier features) plus isotropic Gaussian noise, which stands in for the
output of a point-cloud backbone.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .pose_graph import Keynode, Trajectory


@dataclass
class SynthConfig:
    spacing_m: float = 20.0
    num_loops: int = 1
    loop_length_m: float = 2000.0
    num_runs: int = 3
    descriptor_dim: int = 32
    place_feature_count: int = 64
    lengthscale_m: float = 40.0
    descriptor_noise_sigma: float = 0.1
    viewpoint_drift_sigma: float = 1.0
    course_harmonics: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.spacing_m <= 0:
            raise ValueError("spacing_m must be positive")
        if self.descriptor_dim < 4:
            raise ValueError("descriptor_dim must be at least 4")
        if self.descriptor_noise_sigma < 0 or self.viewpoint_drift_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.num_runs < 2 or self.num_loops < 1:
            raise ValueError("need at least two runs (database + query) and one loop")
        if self.lengthscale_m <= 0 or self.place_feature_count < 1:
            raise ValueError("lengthscale_m and place_feature_count must be positive")

    @property
    def nodes_per_loop(self) -> int:
        return int(round(self.loop_length_m / self.spacing_m))

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**values)


def course(config: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Closed smooth 2-D course sampled every ``spacing_m`` of arc length.

    Returns node positions (n, 2) and unit normals (n, 2).
    """
    n = config.nodes_per_loop
    k = np.arange(2, 2 + config.course_harmonics)
    amp = rng.uniform(0.0, 0.12, size=k.size) / np.sqrt(k)
    phase = rng.uniform(0.0, 2 * np.pi, size=k.size)
    theta = np.linspace(0.0, 2 * np.pi, 4096 * 4, endpoint=False)
    radius = 1.0 + (amp[:, None] * np.cos(k[:, None] * theta + phase[:, None])).sum(axis=0)
    dense = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    seg = np.linalg.norm(np.diff(dense, axis=0, append=dense[:1]), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    scale = config.loop_length_m / arc[-1]
    dense *= scale
    arc *= scale
    closed = np.vstack([dense, dense[:1]])
    s = np.arange(n) * (arc[-1] / n)
    xy = np.stack([np.interp(s, arc, closed[:, 0]), np.interp(s, arc, closed[:, 1])], axis=1)
    tangent = np.roll(xy, -1, axis=0) - np.roll(xy, 1, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    return xy, normal


def gen_trajectory(config: SynthConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Positions (n, 3) for each run; runs differ only by lateral jitter."""
    xy, normal = course(config, rng)
    base = np.tile(xy, (config.num_loops, 1))
    nrm = np.tile(normal, (config.num_loops, 1))
    runs = []
    for _ in range(config.num_runs):
        jitter = rng.normal(0.0, 1.0, size=len(base)) * config.viewpoint_drift_sigma
        pts = base + nrm * jitter[:, None]
        runs.append(np.column_stack([pts, np.zeros(len(pts))]))
    return runs


class PlaceField:
    """Unit-norm random Fourier feature embedding of 2-D position."""

    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        f = config.place_feature_count
        self.freq = rng.normal(0.0, 1.0 / config.lengthscale_m, size=(f, 2))
        self.offset = rng.uniform(0.0, 2 * np.pi, size=f)
        if f == config.descriptor_dim:
            self.proj = None
        else:
            self.proj = rng.normal(0.0, 1.0 / np.sqrt(f), size=(config.descriptor_dim, f))

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        phi = np.cos(positions[:, :2] @ self.freq.T + self.offset)
        g = phi if self.proj is None else phi @ self.proj.T
        return g / np.linalg.norm(g, axis=1, keepdims=True)


def gen_descriptors(
    positions: np.ndarray,
    config: SynthConfig,
    rng: np.random.Generator,
    field: PlaceField | None = None,
) -> np.ndarray:
    field = field or PlaceField(config, rng)
    g = field(positions)
    noisy = g + rng.normal(0.0, config.descriptor_noise_sigma, size=g.shape)
    return noisy / np.linalg.norm(noisy, axis=1, keepdims=True)


def generate(config: SynthConfig, first_id: int = 0) -> list[Trajectory]:
    """All runs of one synthetic dataset with dense global ids from ``first_id``."""
    root = np.random.SeedSequence(config.seed)
    course_ss, field_ss, noise_ss = root.spawn(3)
    runs = gen_trajectory(config, np.random.default_rng(course_ss))
    field = PlaceField(config, np.random.default_rng(field_ss))
    noise_rngs = [np.random.default_rng(s) for s in noise_ss.spawn(len(runs))]
    out = []
    gid = first_id
    for run_id, (pos, rng) in enumerate(zip(runs, noise_rngs)):
        desc = gen_descriptors(pos, config, rng, field)
        nodes = [Keynode(gid + i, run_id, pos[i], desc[i]) for i in range(len(pos))]
        gid += len(pos)
        out.append(Trajectory(run_id, nodes))
    return out
