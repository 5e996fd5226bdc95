"""Trajectory files, scenes, observation/prediction windows and splits."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

T_PAST = 8
T_FUTURE = 12
DEFAULT_COLUMNS = ("frame", "id", "x", "y")
NORMALIZATION = "ego-last-observed translation, no rotation"


class DataError(ValueError):
    """Malformed or inconsistent trajectory data."""


@dataclass(frozen=True)
class TrackPoint:
    frame_id: int
    pedestrian_id: int
    x: float
    y: float


@dataclass
class Scene:
    name: str
    points: list[TrackPoint]
    frame_interval: float = 0.4
    group: str = ""
    malformed_lines: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.group:
            self.group = self.name

    def tracks(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Pedestrian id -> (sorted frames, positions)."""
        by_ped: dict[int, list[TrackPoint]] = {}
        for p in self.points:
            by_ped.setdefault(p.pedestrian_id, []).append(p)
        out = {}
        for pid, pts in by_ped.items():
            pts.sort(key=lambda p: p.frame_id)
            out[pid] = (np.array([p.frame_id for p in pts]), np.array([[p.x, p.y] for p in pts], dtype=float))
        return out

    def frame_step(self) -> int:
        frames = np.unique([p.frame_id for p in self.points])
        if frames.size < 2:
            return 1
        return int(np.gcd.reduce(np.diff(frames)))

    def digest(self) -> str:
        h = hashlib.sha256(self.name.encode())
        for p in self.points:
            h.update(f"{p.frame_id},{p.pedestrian_id},{p.x!r},{p.y!r};".encode())
        return h.hexdigest()


@dataclass
class SceneWindow:
    """One prediction instance.

    Neighbor arrays are padded with the neighbor's nearest observed position
    wherever it was absent; ``neighbor_past_gaps`` / ``neighbor_future_gaps``
    flag those padded entries.
    """

    ego_past: np.ndarray
    ego_future: np.ndarray | None
    neighbor_pasts: np.ndarray
    social_mask: np.ndarray
    neighbor_futures: np.ndarray | None = None
    neighbor_past_gaps: np.ndarray | None = None
    neighbor_future_gaps: np.ndarray | None = None
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scene: str = ""
    ego_id: int = -1
    start_frame: int = -1
    neighbor_ids: tuple = ()

    @property
    def t_past(self) -> int:
        return self.ego_past.shape[0]

    @property
    def t_future(self) -> int:
        return 0 if self.ego_future is None else self.ego_future.shape[0]

    @property
    def num_neighbors(self) -> int:
        return self.neighbor_pasts.shape[0]

    def observation(self) -> "SceneWindow":
        """Copy with every future field removed; what inference is allowed to see."""
        return dataclasses.replace(self, ego_future=None, neighbor_futures=None, neighbor_future_gaps=None)

    def shifted(self, offset: np.ndarray) -> "SceneWindow":
        offset = np.asarray(offset, dtype=float)

        def sh(a):
            return None if a is None else a - offset

        return dataclasses.replace(
            self,
            ego_past=sh(self.ego_past),
            ego_future=sh(self.ego_future),
            neighbor_pasts=sh(self.neighbor_pasts),
            neighbor_futures=sh(self.neighbor_futures),
            origin=self.origin + offset,
        )


def parse_dataset(
    path,
    column_order: Sequence[str] = DEFAULT_COLUMNS,
    name: str | None = None,
    group: str | None = None,
    frame_interval: float = 0.4,
    max_malformed: float = 0.01,
) -> Scene:
    """Read a whitespace/tab separated trajectory file.

    ``column_order`` names the meaning of the first four columns, e.g.
    ``("frame", "id", "y", "x")`` for dumps that store y before x.
    """
    if sorted(column_order) != sorted(DEFAULT_COLUMNS):
        raise ValueError(f"column_order must permute {DEFAULT_COLUMNS}, got {tuple(column_order)}")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    col = {c: i for i, c in enumerate(column_order)}
    points: dict[tuple[int, int], TrackPoint] = {}
    malformed: list[int] = []
    total = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        total += 1
        fields = line.replace(",", " ").split()
        try:
            if len(fields) < 4:
                raise ValueError
            frame = float(fields[col["frame"]])
            pid = float(fields[col["id"]])
            x = float(fields[col["x"]])
            y = float(fields[col["y"]])
            if not (math.isfinite(x) and math.isfinite(y)) or frame != int(frame) or pid != int(pid):
                raise ValueError
        except ValueError:
            malformed.append(lineno)
            continue
        key = (int(frame), int(pid))
        pt = TrackPoint(key[0], key[1], x, y)
        prev = points.get(key)
        if prev is not None and (prev.x, prev.y) != (x, y):
            raise DataError(f"{path}:{lineno}: duplicate (frame={key[0]}, id={key[1]}) with different coordinates")
        points[key] = pt
    if total == 0:
        warnings.warn(f"{path} contains no trajectory points", stacklevel=2)
    if malformed and len(malformed) > max_malformed * total:
        shown = ", ".join(map(str, malformed[:20]))
        raise DataError(f"{path}: {len(malformed)}/{total} malformed lines (lines {shown})")
    if malformed:
        log.warning("%s: skipped %d malformed lines: %s", path, len(malformed), malformed[:20])
    ordered = sorted(points.values(), key=lambda p: (p.frame_id, p.pedestrian_id))
    return Scene(name or path.stem, ordered, frame_interval, group or "", malformed)


def write_dataset(scene: Scene, path) -> None:
    with open(path, "w") as f:
        for p in scene.points:
            f.write(f"{p.frame_id}\t{p.pedestrian_id}\t{p.x!r}\t{p.y!r}\n")


def _fill(frames_needed: np.ndarray, frames: np.ndarray, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions at ``frames_needed``; gaps take the last seen (else first seen) position."""
    idx = np.searchsorted(frames, frames_needed, side="right") - 1
    present = (idx >= 0) & (frames[np.clip(idx, 0, None)] == frames_needed)
    out = pos[np.clip(idx, 0, None)].copy()
    before = idx < 0
    if before.any():
        out[before] = pos[0]
    return out, ~present


def build_windows(scene: Scene, t_past: int = T_PAST, t_future: int = T_FUTURE, stride: int = 1) -> list[SceneWindow]:
    """One window per (pedestrian, start) with ``t_past + t_future`` consecutive frames."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    tracks = scene.tracks()
    step = scene.frame_step()
    total = t_past + t_future
    frame_sets = {pid: set(fr.tolist()) for pid, (fr, _) in tracks.items()}
    windows = []
    for pid in sorted(tracks):
        frames, pos = tracks[pid]
        for s in range(0, len(frames) - total + 1, stride):
            span = frames[s : s + total]
            if span[-1] - span[0] != step * (total - 1) or np.any(np.diff(span) != step):
                continue
            past_frames, fut_frames = span[:t_past], span[t_past:]
            last = past_frames[-1]
            nbr_ids = [q for q in sorted(tracks) if q != pid and frame_sets[q].intersection(past_frames.tolist())]
            n = len(nbr_ids)
            nb_past = np.zeros((n, t_past, 2))
            nb_fut = np.zeros((n, t_future, 2))
            gap_past = np.zeros((n, t_past), dtype=bool)
            gap_fut = np.zeros((n, t_future), dtype=bool)
            mask = np.zeros(n, dtype=bool)
            for j, q in enumerate(nbr_ids):
                qf, qp = tracks[q]
                nb_past[j], gap_past[j] = _fill(past_frames, qf, qp)
                nb_fut[j], gap_fut[j] = _fill(fut_frames, qf, qp)
                mask[j] = last in frame_sets[q]
            windows.append(
                SceneWindow(
                    ego_past=pos[s : s + t_past].copy(),
                    ego_future=pos[s + t_past : s + total].copy(),
                    neighbor_pasts=nb_past,
                    social_mask=mask,
                    neighbor_futures=nb_fut,
                    neighbor_past_gaps=gap_past,
                    neighbor_future_gaps=gap_fut,
                    scene=scene.name,
                    ego_id=int(pid),
                    start_frame=int(span[0]),
                    neighbor_ids=tuple(int(q) for q in nbr_ids),
                )
            )
    return windows


def normalize(window: SceneWindow) -> SceneWindow:
    """Translate so the ego's last observed position is the origin."""
    return window.shifted(window.ego_past[-1].copy())


def denormalize(window: SceneWindow) -> SceneWindow:
    return window.shifted(-window.origin)


def validate_window(w: SceneWindow, normalized: bool = True) -> list[str]:
    """Return a list of invariant violations (empty when the window is valid)."""
    problems = []
    if w.ego_past.ndim != 2 or w.ego_past.shape[1] != 2:
        problems.append(f"ego_past shape {w.ego_past.shape}")
    if w.ego_future is not None and (w.ego_future.ndim != 2 or w.ego_future.shape[1] != 2):
        problems.append(f"ego_future shape {w.ego_future.shape}")
    for label, arr in (("ego_past", w.ego_past), ("ego_future", w.ego_future), ("neighbor_pasts", w.neighbor_pasts)):
        if arr is not None and not np.all(np.isfinite(arr)):
            problems.append(f"{label} not finite")
    if normalized and not np.array_equal(w.ego_past[-1], np.zeros(2)):
        problems.append(f"ego_past[-1] = {w.ego_past[-1]} not at origin")
    n = w.neighbor_pasts.shape[0]
    if w.social_mask.shape != (n,):
        problems.append(f"social_mask shape {w.social_mask.shape} vs {n} neighbors")
    if w.neighbor_past_gaps is not None and np.any(w.social_mask & w.neighbor_past_gaps[:, -1]):
        problems.append("masked-in neighbor absent at final observed frame")
    return problems


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]


def split_leave_one_out(scenes: Iterable[Scene] | dict[str, Sequence[str]], held_out_group: str, train_fraction: float = 0.9) -> SplitPlan:
    """Hold out one scene group for testing; split the rest by scene order."""
    if isinstance(scenes, dict):
        groups = {g: list(names) for g, names in scenes.items()}
    else:
        groups = {}
        for s in scenes:
            groups.setdefault(s.group, []).append(s.name)
    if held_out_group not in groups:
        raise KeyError(f"unknown group {held_out_group!r}; available: {sorted(groups)}")
    if len(groups) < 2:
        raise ValueError("leave-one-out needs at least two scene groups")
    rest = [name for g, names in groups.items() if g != held_out_group for name in names]
    n_train = max(1, int(math.floor(train_fraction * len(rest)))) if len(rest) > 1 else len(rest)
    return SplitPlan(tuple(rest[:n_train]), tuple(rest[n_train:]), tuple(groups[held_out_group]))


@dataclass
class Batch:
    """Windows collated into dense arrays; neighbors padded to a common count."""

    past: np.ndarray  # (B, t_past, 2)
    future: np.ndarray | None  # (B, t_future, 2)
    nbr_past: np.ndarray  # (B, N, t_past, 2)
    nbr_future: np.ndarray | None  # (B, N, t_future, 2)
    mask: np.ndarray  # (B, N) bool

    def __len__(self):
        return self.past.shape[0]

    def select(self, idx) -> "Batch":
        return Batch(
            self.past[idx],
            None if self.future is None else self.future[idx],
            self.nbr_past[idx],
            None if self.nbr_future is None else self.nbr_future[idx],
            self.mask[idx],
        )


def collate(windows: Sequence[SceneWindow], with_future: bool = True) -> Batch:
    b = len(windows)
    if b == 0:
        raise ValueError("cannot collate an empty window list")
    tp = windows[0].t_past
    tf = windows[0].t_future if with_future else 0
    n = max(1, max(w.num_neighbors for w in windows))
    past = np.stack([w.ego_past for w in windows])
    nbr_past = np.zeros((b, n, tp, 2))
    mask = np.zeros((b, n), dtype=bool)
    future = nbr_future = None
    if with_future:
        if any(w.ego_future is None for w in windows):
            raise ValueError("with_future=True but a window has no future")
        future = np.stack([w.ego_future for w in windows])
        nbr_future = np.zeros((b, n, tf, 2))
    for i, w in enumerate(windows):
        k = w.num_neighbors
        if k:
            nbr_past[i, :k] = w.neighbor_pasts
            mask[i, :k] = w.social_mask
            if with_future and w.neighbor_futures is not None:
                nbr_future[i, :k] = w.neighbor_futures
    return Batch(past, future, nbr_past, nbr_future, mask)


def cache_key(scenes: Sequence[Scene], t_past: int, t_future: int, stride: int) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.digest().encode())
    h.update(f"{t_past}/{t_future}/{stride}".encode())
    return h.hexdigest()[:16]


def save_windows(windows: Sequence[SceneWindow], path, meta: dict | None = None) -> None:
    """Write windows to an ``.npz`` cache with a JSON header describing them."""
    arrays = {}
    header = {"normalization": NORMALIZATION, "count": len(windows), "meta": meta or {}, "windows": []}
    for i, w in enumerate(windows):
        for fname in ("ego_past", "ego_future", "neighbor_pasts", "social_mask", "neighbor_futures",
                      "neighbor_past_gaps", "neighbor_future_gaps", "origin"):
            val = getattr(w, fname)
            if val is not None:
                arrays[f"{i}.{fname}"] = val
        header["windows"].append(
            {"scene": w.scene, "ego_id": w.ego_id, "start_frame": w.start_frame, "neighbor_ids": list(w.neighbor_ids)}
        )
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_windows(path) -> tuple[list[SceneWindow], dict]:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        windows = []
        for i, info in enumerate(header["windows"]):
            def get(name):
                key = f"{i}.{name}"
                return z[key] if key in z.files else None

            windows.append(
                SceneWindow(
                    ego_past=get("ego_past"),
                    ego_future=get("ego_future"),
                    neighbor_pasts=get("neighbor_pasts"),
                    social_mask=get("social_mask").astype(bool),
                    neighbor_futures=get("neighbor_futures"),
                    neighbor_past_gaps=get("neighbor_past_gaps"),
                    neighbor_future_gaps=get("neighbor_future_gaps"),
                    origin=get("origin"),
                    scene=info["scene"],
                    ego_id=info["ego_id"],
                    start_frame=info["start_frame"],
                    neighbor_ids=tuple(info["neighbor_ids"]),
                )
            )
    return windows, header
