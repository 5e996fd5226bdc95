"""Two-mode crossing benchmark.

Each episode has two pedestrians on perpendicular headings whose paths cross
near the last observed frame. After the crossing each one veers left or right
(a fair coin), bending away from the straight line quadratically so the two
possible endpoints sit ``separation`` apart. Every recorded position carries
i.i.d. Gaussian noise of standard deviation ``noise``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Scene, TrackPoint, build_windows, normalize
from .rng import make_rng

HEADINGS = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])


@dataclass
class ModeInfo:
    """Noise-free endpoints of both futures for one pedestrian (raw coordinates)."""

    endpoints: np.ndarray  # (2, 2)
    chosen: int


@dataclass
class SyntheticSet:
    scene: Scene
    modes: dict[int, ModeInfo]

    def windows(self, t_past: int = 8, t_future: int = 12):
        return [normalize(w) for w in build_windows(self.scene, t_past, t_future)]

    def mode_endpoints(self, window) -> np.ndarray:
        """Both candidate endpoints in the window's (normalized) frame."""
        return self.modes[window.ego_id].endpoints - window.origin


def two_mode_crossing(episodes: int, seed: int, name: str = "crossing", noise: float = 0.02,
                      separation: float = 0.2, speed=(0.1, 0.1), t_past: int = 8, t_future: int = 12,
                      frame_step: int = 10) -> SyntheticSet:
    rng = make_rng(seed, "synthetic", name)
    total = t_past + t_future
    points: list[TrackPoint] = []
    modes: dict[int, ModeInfo] = {}
    k = np.arange(total) - (t_past - 1)  # 0 at the last observed frame
    bend = np.where(k > 0, (np.clip(k, 0, None) / t_future) ** 2, 0.0) * (separation / 2.0)
    for e in range(episodes):
        first = int(rng.integers(0, 2))
        headings = [HEADINGS[first + 2 * int(rng.integers(0, 2))], HEADINGS[1 - first + 2 * int(rng.integers(0, 2))]]
        crossing = rng.uniform(-2.0, 2.0, size=2)
        base_frame = e * (total + 5) * frame_step
        for a, h in enumerate(headings):
            pid = 2 * e + a + 1
            v = rng.uniform(*speed)
            lateral = np.array([-h[1], h[0]])
            offset = rng.uniform(-0.3, 0.3)  # position along the path at the last observed frame
            mode = int(rng.integers(0, 2))
            straight = crossing + np.outer(offset + v * k, h)
            clean = {m: straight + np.outer(s * bend, lateral) for m, s in ((0, 1.0), (1, -1.0))}
            path = clean[mode] + rng.normal(0.0, noise, size=(total, 2))
            for i in range(total):
                points.append(TrackPoint(base_frame + i * frame_step, pid, float(path[i, 0]), float(path[i, 1])))
            modes[pid] = ModeInfo(np.stack([clean[0][-1], clean[1][-1]]), mode)
    points.sort(key=lambda p: (p.frame_id, p.pedestrian_id))
    return SyntheticSet(Scene(name, points, 0.4, name), modes)


def benchmark(train_episodes: int = 100, test_episodes: int = 25, seed: int = 0, **kw):
    """(train, test) synthetic sets; 2 windows per episode."""
    return (two_mode_crossing(train_episodes, seed, "crossing-train", **kw),
            two_mode_crossing(test_episodes, seed, "crossing-test", **kw))
