"""Staged training and the inference path.

Stages:
  1. trajectory-distribution model on the NLL of true futures;
  2. guidance encoder plus energy model: feature agreement between the
     positive and negative encoders, NLL of the negative encoding, and a
     contrastive energy term; stage 1 frozen;
  3. denoiser on the noise-prediction loss; earlier stages frozen (the
     guidance encoder optionally trainable);
  4. guidance encoder, negative encoder and denoiser jointly on the NLL of
     the truncated-denoised distribution, backpropagating through the chain.

Inference never sees the future: ``predict`` strips it from the window.
"""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Tensor
from .config import Config
from .data import Batch, SceneWindow, collate
from .diffusion import NumericalError, pd_loss, reverse_step, run_reverse
from .distribution import GaussianSeq, from_unconstrained, nll_tensor, sample
from .energy import ChainStats, contrastive_energy_loss, sc_loss
from .model import EPDModel
from .nn import Module
from .optim import Adam, NonFiniteGradient
from .rng import make_rng

log = logging.getLogger(__name__)

MODES = ("full", "plan_only", "from_noise", "baseline")
MODE_STAGES = {"full": {2, 3}, "plan_only": {2}, "from_noise": {3}, "baseline": {3}}


class TrainingDiverged(FloatingPointError):
    def __init__(self, stage: int, step: int, detail: str = ""):
        super().__init__(f"training diverged in stage {stage} at step {step}" + (f": {detail}" if detail else ""))
        self.stage = stage
        self.step = step


@contextlib.contextmanager
def frozen(*modules: Module):
    """Temporarily stop recording gradients for the given modules' parameters."""
    saved = [(t, t.requires_grad) for m in modules for t in m.params.values()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


@dataclass
class TrainResult:
    model: EPDModel
    losses: list[dict] = field(default_factory=list)
    seconds: dict[int, float] = field(default_factory=dict)

    def stage_losses(self, stage: int) -> np.ndarray:
        return np.array([r["loss"] for r in self.losses if r["stage"] == stage])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _epochs(opt: Adam, epochs: int, schedule: str):
    """Yield epoch indices, setting the learning rate for each one."""
    base = opt.state.lr
    for epoch in range(epochs):
        if schedule == "cosine":
            opt.state.lr = base * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))
        yield epoch


def _step(opt: Adam, tape: Tape, loss: Tensor, stage: int, step: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(stage, step, f"loss {value}")
    names = list(opt.params)
    grads = tape.backward(loss, [opt.params[n] for n in names])
    try:
        opt.step(dict(zip(names, grads)))
    except NonFiniteGradient as exc:
        raise TrainingDiverged(stage, step, str(exc)) from exc
    return value


def _prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def _stage1(model: EPDModel, data: Batch, rng, rows: list[dict]) -> None:
    t = model.config.train
    opt = Adam(model.td.params, lr=t.lr_td, clip_norm=t.clip_norm)
    step = 0
    for _ in _epochs(opt, t.epochs_td, t.lr_schedule):
        for idx in _batches(len(data), t.batch_size, rng):
            b = data.select(idx)
            with Tape() as tape:
                loss = nll_tensor(model.td.encode(b.future, b.nbr_future, b.mask), b.future).mean()
            rows.append({"stage": 1, "step": step, "loss": _step(opt, tape, loss, 1, step)})
            step += 1


def _td_params(model: EPDModel, data: Batch) -> np.ndarray:
    with frozen(model.td):
        return model.td.encode(data.future, data.nbr_future, data.mask).data


def _stage2(model: EPDModel, data: Batch, rng, rows: list[dict]) -> None:
    t = model.config.train
    d_pos_all = _td_params(model, data)
    params = {**_prefixed("gg", model.gg.params), **_prefixed("ebm", model.ebm.params)}
    opt = Adam(params, lr=t.lr_sc, clip_norm=t.clip_norm)
    stats = ChainStats()
    step = 0
    for _ in _epochs(opt, t.epochs_sc, t.lr_schedule):
        for idx in _batches(len(data), t.batch_size, rng):
            b = data.select(idx)
            d_pos = d_pos_all[idx]
            with Tape() as tape:
                g = model.gg.forward(b)
                z = model.ebm.langevin_sample(g.data, model.buffer, rng, stats)
                z_pos = model.ebm.encode_positive(d_pos, g)
                z_neg = model.ebm.encode_negative(z, g)
                sc = sc_loss(z_pos, z_neg, z_neg, b.future)
                con = contrastive_energy_loss(model.ebm.energy(d_pos, g), model.ebm.energy(z, g), t.energy_reg)
                loss = sc.total + t.contrastive_weight * con
            value = _step(opt, tape, loss, 2, step)
            rows.append({"stage": 2, "step": step, "loss": value, "mse": sc.mse, "nll": sc.nll,
                         "contrastive": con.item()})
            step += 1
    if stats.restarts:
        log.warning("stage 2: %d Langevin restarts", stats.restarts)


def _stage3(model: EPDModel, data: Batch, rng, rows: list[dict]) -> None:
    t = model.config.train
    d0_all = _td_params(model, data)
    train_gg = t.gg_in_stage3
    params = _prefixed("denoiser", model.denoiser.params)
    g_all = None
    if train_gg:
        params.update(_prefixed("gg", model.gg.params))
    else:
        with frozen(model.gg):
            g_all = model.gg.forward(data).data
    opt = Adam(params, lr=t.lr_pd, clip_norm=t.clip_norm)
    step = 0
    for _ in _epochs(opt, t.epochs_pd, t.lr_schedule):
        for idx in _batches(len(data), t.batch_size, rng):
            with Tape() as tape:
                g = model.gg.forward(data.select(idx)) if train_gg else g_all[idx]
                loss = pd_loss(d0_all[idx], g, model.denoiser, model.schedule, rng)
            rows.append({"stage": 3, "step": step, "loss": _step(opt, tape, loss, 3, step)})
            step += 1


def _stage4(model: EPDModel, data: Batch, rng, rows: list[dict]) -> None:
    t = model.config.train
    steps = model.config.diffusion.truncation
    params = {**_prefixed("ebm", model.ebm.subset("neg.")), **_prefixed("denoiser", model.denoiser.params)}
    if t.gg_in_stage4:
        params.update(_prefixed("gg", model.gg.params))
    opt = Adam(params, lr=t.lr_ft, clip_norm=t.clip_norm)
    stats = ChainStats()
    step = 0
    with frozen(model.td):
        for _ in _epochs(opt, t.epochs_ft, t.lr_schedule):
            for idx in _batches(len(data), t.batch_size, rng):
                b = data.select(idx)
                with Tape() as tape:
                    g = model.gg.forward(b)
                    z = model.ebm.langevin_sample(g.data, model.buffer, rng, stats)
                    d = model.ebm.encode_negative(z, g)
                    if t.ft_through_chain or steps <= 1:
                        d = run_reverse(d, steps, g, model.denoiser, model.schedule, rng)
                    else:
                        with frozen(model.denoiser, model.gg, model.ebm):
                            lead = run_reverse(d.data, steps, g.data, model.denoiser, model.schedule, rng, stop=1)
                        d = reverse_step(lead, 0, g, model.denoiser, model.schedule, rng)
                    loss = nll_tensor(d, b.future).mean()
                rows.append({"stage": 4, "step": step, "loss": _step(opt, tape, loss, 4, step)})
                step += 1


STAGES: dict[int, Callable] = {1: _stage1, 2: _stage2, 3: _stage3, 4: _stage4}


def train(config: Config, windows: Sequence[SceneWindow], model: EPDModel | None = None,
          stages: Sequence[int] | None = None, checkpoint_dir=None) -> TrainResult:
    """Run ``stages`` (default: the config's list) in order, skipping any the
    model already has.

    Passing a partly trained ``model`` continues it; the remaining stages use
    the hyperparameters in ``config``. With ``checkpoint_dir`` the model is
    saved after each stage to ``checkpoint_dir/stage<k>``, so an interrupted
    run resumes by loading the latest one and calling ``train`` again.
    """
    config.validate()
    if not windows:
        raise ValueError("no training windows")
    if model is None:
        model = EPDModel(config)
    else:
        model.config = config
    data = collate(windows, with_future=True)
    result = TrainResult(model)
    seed = config.train.seed
    for stage in stages or config.train.stage_list():
        if stage in model.stages_completed:
            continue
        rng = make_rng(seed, "train", stage)
        t0 = time.perf_counter()
        rows: list[dict] = []
        try:
            STAGES[stage](model, data, rng, rows)
        except NumericalError as exc:
            raise TrainingDiverged(stage, len(rows), str(exc)) from exc
        result.seconds[stage] = time.perf_counter() - t0
        result.losses.extend(rows)
        model.stages_completed = sorted(set(model.stages_completed) | {stage})
        if rows:
            log.info("stage %d: %d steps, loss %.4f -> %.4f (%.1fs)", stage, len(rows), rows[0]["loss"],
                     rows[-1]["loss"], result.seconds[stage])
        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / f"stage{stage}", losses=result.losses)
    return result


@dataclass
class Prediction:
    samples: np.ndarray  # (K, t_future, 2)
    distribution: GaussianSeq  # the distribution the samples were drawn from
    plan: GaussianSeq | None = None
    invocations: int = 0


def _plan(model: EPDModel, g: np.ndarray, buffer, rng) -> np.ndarray:
    with frozen(model.ebm):
        return model.ebm.plan(g, buffer, rng)


def predict_batch(windows: Sequence[SceneWindow], model: EPDModel, k: int = 20, seed: int = 0,
                  mode: str = "full", rng: np.random.Generator | None = None) -> list[Prediction]:
    """Predict a batch of windows; one plan and one truncated chain per window.

    The model's replay buffer is copied, so prediction leaves the model
    unchanged. ``mode`` selects the inference path:

    * ``full``: plan, then ``truncation`` reverse steps;
    * ``plan_only``: the plan itself (no denoiser);
    * ``from_noise``: one ``T``-step reverse chain from pure noise per window;
    * ``baseline``: ``k`` independent ``T``-step chains per window, one
      sample from each.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not windows:
        raise ValueError("no windows to predict")
    model.require_stages(MODE_STAGES[mode], f"mode {mode!r}")
    rng = rng or make_rng(seed, "predict")
    obs = collate([w.observation() for w in windows], with_future=False)
    n, z_dim = len(windows), model.z_dim
    before = model.denoiser.invocations
    with frozen(model.gg, model.denoiser):
        g = model.gg.forward(obs).data
        plans = dists = None
        if mode in ("full", "plan_only"):
            plans = _plan(model, g, model.copy_buffer(), rng)
            dists = plans
            if mode == "full":
                dists = run_reverse(plans, model.config.diffusion.truncation, g, model.denoiser, model.schedule, rng).data
        elif mode == "from_noise":
            dists = run_reverse(rng.standard_normal((n, z_dim)), model.schedule.T, g, model.denoiser,
                                model.schedule, rng).data
        else:
            gk = np.repeat(g, k, axis=0)
            dists = run_reverse(rng.standard_normal((n * k, z_dim)), model.schedule.T, gk, model.denoiser,
                                model.schedule, rng).data.reshape(n, k, z_dim)
    per_window = (model.denoiser.invocations - before) // n
    out = []
    for i in range(n):
        plan = None if plans is None else from_unconstrained(plans[i])
        if mode == "baseline":
            each = [from_unconstrained(dists[i, j]) for j in range(k)]
            samples = np.concatenate([sample(d, 1, rng) for d in each])
            dist = each[0]
        else:
            dist = from_unconstrained(dists[i])
            samples = sample(dist, k, rng)
        out.append(Prediction(samples, dist, plan, per_window))
    return out


def predict(window: SceneWindow, model: EPDModel, k: int = 20, seed: int = 0, mode: str = "full",
            rng: np.random.Generator | None = None) -> Prediction:
    return predict_batch([window], model, k, seed, mode, rng)[0]
