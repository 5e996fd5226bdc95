"""Resolving a config's data source into train/validation/test windows.

``data.source`` is either ``synthetic`` (the two-mode crossing benchmark) or a
directory. A directory holding ``index.json`` is an ingest cache; any other
directory is scanned for raw trajectory files (``*.txt``, ``*.csv``), with
each file a scene and its parent directory name the scene group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .config import Config
from .data import (
    DataError,
    SceneWindow,
    build_windows,
    cache_key,
    load_windows,
    normalize,
    parse_dataset,
    save_windows,
    split_leave_one_out,
)
from .synthetic import SyntheticSet, benchmark

RAW_PATTERNS = ("*.txt", "*.csv")


@dataclass
class Split:
    name: str
    train: list[SceneWindow]
    validation: list[SceneWindow] = field(default_factory=list)
    test: list[SceneWindow] = field(default_factory=list)
    synthetic: tuple[SyntheticSet, SyntheticSet] | None = None

    def part(self, which: str) -> list[SceneWindow]:
        if which not in ("train", "validation", "test"):
            raise KeyError(f"unknown split part {which!r}")
        return getattr(self, which)


def raw_files(root) -> list[Path]:
    root = Path(root)
    files = sorted({p for pat in RAW_PATTERNS for p in root.rglob(pat)})
    return [p for p in files if p.is_file()]


def ingest(root, out, column_order=("frame", "id", "x", "y"), t_past: int = 8, t_future: int = 12,
           stride: int = 1) -> dict:
    """Parse every raw file under ``root`` and cache its normalized windows in ``out``."""
    root, out = Path(root), Path(out)
    files = raw_files(root)
    if not files:
        raise DataError(f"no trajectory files under {root}")
    out.mkdir(parents=True, exist_ok=True)
    index = {"t_past": t_past, "t_future": t_future, "stride": stride, "column_order": list(column_order),
             "scenes": []}
    for f in files:
        rel = f.relative_to(root)
        group = rel.parts[0] if len(rel.parts) > 1 else f.stem
        name = "__".join(rel.with_suffix("").parts)
        scene = parse_dataset(f, column_order, name=name, group=group)
        windows = [normalize(w) for w in build_windows(scene, t_past, t_future, stride)]
        save_windows(windows, out / f"{name}.npz", {"group": group})
        index["scenes"].append({"name": name, "group": group, "windows": len(windows),
                                "key": cache_key([scene], t_past, t_future, stride),
                                "malformed_lines": scene.malformed_lines})
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


def load_split(config: Config) -> Split:
    d = config.data
    if d.source == "synthetic":
        tr, te = benchmark(d.synthetic_train_episodes, d.synthetic_test_episodes, seed=config.train.seed,
                           noise=d.synthetic_noise, separation=d.synthetic_separation,
                           t_past=d.t_past, t_future=d.t_future)
        return Split("synthetic-crossing", tr.windows(d.t_past, d.t_future), [], te.windows(d.t_past, d.t_future),
                     (tr, te))
    root = Path(d.source)
    if not root.is_dir():
        raise DataError(f"data source {d.source!r} is neither 'synthetic' nor a directory")
    index_path = root / "index.json"
    if index_path.exists():
        index = json.loads(index_path.read_text())
        if (index["t_past"], index["t_future"]) != (d.t_past, d.t_future):
            raise DataError(f"cache {root} was built for t_past/t_future {index['t_past']}/{index['t_future']}")
        groups: dict[str, list[str]] = {}
        for s in index["scenes"]:
            groups.setdefault(s["group"], []).append(s["name"])

        def windows_of(names):
            return [w for n in names for w in load_windows(root / f"{n}.npz")[0]]
    else:
        scenes = {}
        groups = {}
        for f in raw_files(root):
            rel = f.relative_to(root)
            group = rel.parts[0] if len(rel.parts) > 1 else f.stem
            name = "__".join(rel.with_suffix("").parts)
            scenes[name] = parse_dataset(f, d.column_order.split(","), name=name, group=group)
            groups.setdefault(group, []).append(name)
        if not scenes:
            raise DataError(f"no trajectory files under {root}")

        def windows_of(names):
            return [normalize(w) for n in names for w in build_windows(scenes[n], d.t_past, d.t_future, d.stride)]

    held = d.held_out or sorted(groups)[-1]
    plan = split_leave_one_out(groups, held, d.train_fraction)
    return Split(f"{root.name}-heldout-{held}", windows_of(plan.train), windows_of(plan.validation),
                 windows_of(plan.test))
