"""Best-of-K evaluation, the relative-time benchmark and the ablation harness.

Metric CSVs hold only quantities that are a deterministic function of the
checkpoint, data and seed; wall-clock timings go to a separate timing CSV so
repeated runs produce byte-identical metric files.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import Config
from .data import SceneWindow
from .metrics import ade_fde
from .model import EPDModel
from .pipeline import predict, predict_batch, train
from .rng import make_rng

Predictor = Callable[[Sequence[SceneWindow]], list]


@dataclass
class MetricRecord:
    dataset: str
    k: int
    min_ade: float
    min_fde: float
    windows: int
    wall_time: float
    invocations: int
    mode: str = "full"

    def __post_init__(self):
        if self.min_ade < 0 or self.min_fde < 0:
            raise ValueError("displacement errors cannot be negative")

    def metrics_row(self) -> dict:
        row = asdict(self)
        del row["wall_time"]
        return row


METRIC_FIELDS = ["dataset", "mode", "k", "windows", "min_ade", "min_fde", "invocations"]


def write_metrics_csv(records: Sequence[MetricRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            row = r.metrics_row()
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRIC_FIELDS})


def write_timing_csv(records: Sequence[MetricRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dataset", "mode", "k", "windows", "wall_time"])
        for r in records:
            w.writerow([r.dataset, r.mode, r.k, r.windows, f"{r.wall_time:.6f}"])


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)), "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def evaluate(model: EPDModel | Predictor, windows: Sequence[SceneWindow], k: int = 20, seed: int = 0,
             dataset: str = "test", mode: str = "full", joint: bool = False, batch_size: int = 64) -> MetricRecord:
    """Average best-of-``k`` ADE/FDE over ``windows``.

    ``model`` is either a trained :class:`EPDModel` or a callable mapping a
    list of windows to a list of (K, T, 2) sample arrays.
    """
    if not windows:
        raise ValueError("cannot evaluate an empty split")
    ades, fdes = [], []
    invocations = 0
    t0 = time.perf_counter()
    for start in range(0, len(windows), batch_size):
        chunk = list(windows[start : start + batch_size])
        if isinstance(model, EPDModel):
            preds = predict_batch(chunk, model, k, rng=make_rng(seed, "evaluate", start), mode=mode)
            samples = [p.samples for p in preds]
            invocations += sum(p.invocations for p in preds)
        else:
            samples = model(chunk)
        for s, w in zip(samples, chunk):
            a, f = ade_fde(s, w.ego_future, joint=joint)
            ades.append(a)
            fdes.append(f)
    wall = time.perf_counter() - t0
    return MetricRecord(dataset, k, float(np.mean(ades)), float(np.mean(fdes)), len(windows), wall, invocations, mode)


@dataclass
class BenchRow:
    name: str
    mode: str
    seconds_per_window: float
    relative_time: float
    invocations_per_window: float


BENCH_CONFIGS = (("EPD (full)", "full"), ("EPD w/o PD (plan only)", "plan_only"),
                 ("from-noise baseline (T steps x K)", "baseline"))


def bench_relative(model: EPDModel, windows: Sequence[SceneWindow], k: int = 20, seed: int = 0,
                   configs=BENCH_CONFIGS, max_windows: int | None = 20, repeats: int = 1) -> list[BenchRow]:
    """Per-window wall time of each inference path relative to the full model.

    Windows are predicted one at a time (the per-window protocol); each path
    runs ``repeats`` times and the fastest pass counts.
    """
    names = [m for _, m in configs]
    if "full" not in names:
        raise ValueError("the benchmark needs the full model as its reference row")
    subset = list(windows[:max_windows] if max_windows else windows)
    if not subset:
        raise ValueError("no windows to benchmark")
    measured = {}
    for _, mode in configs:
        best = np.inf
        for _ in range(repeats):
            model.denoiser.reset_counter()
            t0 = time.perf_counter()
            for i, w in enumerate(subset):
                predict(w, model, k, rng=make_rng(seed, "bench", i), mode=mode)
            best = min(best, time.perf_counter() - t0)
        measured[mode] = (best / len(subset), model.denoiser.invocations / len(subset))
    ref = measured["full"][0]
    return [BenchRow(name, mode, measured[mode][0], measured[mode][0] / ref, measured[mode][1])
            for name, mode in configs]


@dataclass(frozen=True)
class AblationConfig:
    use_sc: bool
    use_pd: bool

    def __post_init__(self):
        if not (self.use_sc or self.use_pd):
            raise ValueError("ablation with neither SC nor PD leaves nothing to evaluate")

    @property
    def label(self) -> str:
        return f"SC {'w/' if self.use_sc else 'w/o'} + PD {'w/' if self.use_pd else 'w/o'}"


ABLATIONS = (AblationConfig(True, False), AblationConfig(False, True), AblationConfig(True, True))


@dataclass
class AblationResult:
    rows: list[tuple[AblationConfig, MetricRecord]]
    models: dict[AblationConfig, EPDModel]
    train_seconds: dict[AblationConfig, float] = field(default_factory=dict)

    def record(self, use_sc: bool, use_pd: bool) -> MetricRecord:
        for cfg, rec in self.rows:
            if cfg == AblationConfig(use_sc, use_pd):
                return rec
        raise KeyError((use_sc, use_pd))

    def table(self) -> str:
        return format_table(
            [{"config": c.label, "minADE": r.min_ade, "minFDE": r.min_fde, "invocations": r.invocations}
             for c, r in self.rows], ["config", "minADE", "minFDE", "invocations"])


def ablate(config: Config, train_windows: Sequence[SceneWindow], test_windows: Sequence[SceneWindow],
           k: int = 20, seed: int = 0, dataset: str = "test", configs=ABLATIONS) -> AblationResult:
    """Train and evaluate the SC-only, PD-only and full variants.

    SC-only is the stage-2 snapshot of the full run with the plan used as the
    predicted distribution. PD-only shares stage 1 with the full run, trains
    the guidance encoder together with the denoiser in stage 3 and samples
    from a full-length reverse chain started from noise.
    """
    configs = list(configs)
    base = config.updated({"train.stages": "1,2,3,4"})
    model = EPDModel(base)
    clock = {}

    def timed(key, fn):
        t0 = time.perf_counter()
        fn()
        clock[key] = time.perf_counter() - t0

    timed(1, lambda: train(base, train_windows, model, stages=[1]))
    pd_model = copy.deepcopy(model)
    timed(2, lambda: train(base, train_windows, model, stages=[2]))
    sc_model = copy.deepcopy(model)
    timed(34, lambda: train(base, train_windows, model, stages=[3, 4]))
    pd_cfg = base.updated({"train.stages": "1,3", "train.gg_in_stage3": True})
    timed("pd", lambda: train(pd_cfg, train_windows, pd_model, stages=[3]))
    variants = {AblationConfig(True, False): (sc_model, "plan_only"),
                AblationConfig(False, True): (pd_model, "from_noise"),
                AblationConfig(True, True): (model, "full")}
    seconds = {AblationConfig(True, False): clock[1] + clock[2],
               AblationConfig(False, True): clock[1] + clock["pd"],
               AblationConfig(True, True): clock[1] + clock[2] + clock[34]}
    rows = []
    for cfg in configs:
        m, mode = variants[cfg]
        rows.append((cfg, evaluate(m, test_windows, k, seed, dataset, mode)))
    return AblationResult(rows, {cfg: variants[cfg][0] for cfg in configs}, {cfg: seconds[cfg] for cfg in configs})
