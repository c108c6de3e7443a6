"""Rectified-flow training with structured condition dropout.

Per sample: draw ``t ~ U[0, 1]``, interpolate ``z_t = (1 - t) eps + t x``,
regress the constant velocity ``x - eps``. Cross-modal attention, per-span
timbre tokens and the whole text context are dropped at configured rates so
that the guidance passes used at sampling time are in-distribution.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .context import ContextPlan, drop_plan, encode_timbre, materialize_batch, plan_context
from .data import PromptRecord, generate_reference_utterance
from .model import ModelConfig, Params, forward_batch, init_params, param_schema

log = logging.getLogger(__name__)

T2AV, T2A, T2V, TI2AV = "T2AV", "T2A", "T2V", "TI2AV"
TASKS = (T2AV, T2A, T2V, TI2AV)


class NonFiniteLossError(ArithmeticError):
    def __init__(self, step: int, task: str, t):
        super().__init__(f"non-finite loss at step {step} (task {task}, t={list(np.round(t, 4))})")
        self.step, self.task, self.t = step, task, t


# -- config -------------------------------------------------------------------

@dataclass(frozen=True)
class Stage:
    start: int
    end: int
    ratios: dict

    def __post_init__(self):
        for k, w in self.ratios.items():
            if k not in TASKS:
                raise ValueError(f"unknown task {k!r} in stage ratios")
            if w < 0:
                raise ValueError(f"negative ratio for {k}")
        if not any(w > 0 for w in self.ratios.values()):
            raise ValueError("stage ratios must not all be zero")


def parse_stages(text: str) -> list[Stage]:
    """``"0:300:T2A=3,T2AV=1;300:1000:T2A=1,T2AV=2"`` -> stages."""
    out = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        try:
            a, b, spec = chunk.split(":", 2)
            ratios = {k.strip(): float(v) for k, v in (kv.split("=") for kv in spec.split(","))}
        except ValueError:
            raise ValueError(f"malformed stage {chunk!r}") from None
        out.append(Stage(int(a), int(b), ratios))
    return out


def format_stages(stages: Sequence[Stage]) -> str:
    return ";".join(f"{s.start}:{s.end}:" + ",".join(f"{k}={v:g}" for k, v in s.ratios.items())
                    for s in stages)


def default_stages(steps: int) -> str:
    """Audio-heavy warm-up (3:1 audio-only to paired) then 1:2."""
    cut = max(1, int(round(0.3 * steps))) if steps > 1 else steps
    if cut >= steps:
        return f"0:{steps}:T2A=1,T2AV=2"
    return f"0:{cut}:T2A=3,T2AV=1;{cut}:{steps}:T2A=1,T2AV=2"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    drop_cross_prob: float = 0.2
    drop_timbre_prob: float = 0.2
    drop_text_prob: float = 0.1
    image_cond_prob: float = 0.5
    stages: str = ""
    seed: int = 0

    def stage_list(self) -> list[Stage]:
        return parse_stages(self.stages or default_stages(self.steps))

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        for name in ("drop_cross_prob", "drop_timbre_prob", "drop_text_prob", "image_cond_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        stages = self.stage_list()
        expect = 0
        for s in stages:
            if s.start != expect or s.end <= s.start:
                raise ValueError(f"stage ranges must partition [0, {self.steps}): bad stage {s.start}:{s.end}")
            expect = s.end
        if self.steps and expect != self.steps:
            raise ValueError(f"stage ranges end at {expect}, expected {self.steps}")
        return self

    def to_text(self) -> str:
        return container.format_kv(asdict(self))


def stage_at(stages: Sequence[Stage], step: int) -> tuple[int, Stage]:
    for i, s in enumerate(stages):
        if s.start <= step < s.end:
            return i, s
    raise ValueError(f"step {step} outside every stage")


def sample_task(ratios: dict, rng: np.random.Generator) -> str:
    """Categorical draw over tasks proportional to the stage weights."""
    names = [k for k in TASKS if ratios.get(k, 0) > 0]
    w = np.array([ratios[k] for k in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=w / w.sum()))] if len(names) > 1 else names[0]


# -- flow path ----------------------------------------------------------------

def flow_interpolate(x, eps, t):
    """``z_t = (1 - t) eps + t x`` and the straight-path velocity ``x - eps``."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ad.ShapeError(f"flow_interpolate: {x.shape} vs {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    if (t < 0).any() or (t > 1).any():
        raise ValueError("t must lie in [0, 1]")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x.ndim - t.ndim))
    return (1.0 - t) * eps + t * x, x - eps


# -- state --------------------------------------------------------------------

@dataclass
class TrainState:
    params: Params
    m: dict
    v: dict
    step: int
    rng: np.random.Generator

    @classmethod
    def fresh(cls, cfg: ModelConfig, tcfg: TrainConfig, init_seed: Optional[int] = None) -> "TrainState":
        params = init_params(cfg, tcfg.seed if init_seed is None else init_seed)
        zeros = {n: np.zeros_like(p.data) for n, p in params.items()}
        return cls(params, zeros, {n: z.copy() for n, z in zeros.items()}, 0,
                   np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1])))


def save_state(state: TrainState, path, cfg: ModelConfig, tcfg: Optional[TrainConfig] = None) -> None:
    tensors = {}
    for n in param_schema(cfg):
        tensors[f"param/{n}"] = state.params[n].data
        tensors[f"m/{n}"] = state.m[n]
        tensors[f"v/{n}"] = state.v[n]
    meta = ("kind=train_state\n" + f"step={state.step}\n"
            + f"rng={json.dumps(state.rng.bit_generator.state, sort_keys=True)}\n" + cfg.to_text())
    if tcfg is not None:
        meta += "".join(f"train.{k}={v}\n" for k, v in asdict(tcfg).items())
    container.write(path, tensors, meta)


def load_state(path, cfg: ModelConfig) -> TrainState:
    """Restore a training state; tensor names must match ``cfg`` exactly."""
    meta, tensors = container.read(path)
    items = container.parse_kv(meta)
    if items.get("kind") != "train_state":
        raise container.SchemaError(f"{path} is not a training state")
    schema = {}
    for n, shape in param_schema(cfg).items():
        for group in ("param", "m", "v"):
            schema[f"{group}/{n}"] = shape
    container.check_schema(tensors, schema, "tensor")
    params = {n: Tensor(tensors[f"param/{n}"], requires_grad=True, name=n) for n in param_schema(cfg)}
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(items["rng"])
    return TrainState(params, {n: tensors[f"m/{n}"] for n in params},
                      {n: tensors[f"v/{n}"] for n in params}, int(items["step"]), rng)


# -- batching -----------------------------------------------------------------

@dataclass
class Batch:
    task: str
    clips: list
    records: list

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        durs = {c.duration_units for c in self.clips}
        if len(durs) != 1:
            raise ValueError(f"batch mixes clip durations {sorted(durs)}")


def bucket_by_duration(dataset) -> dict[int, list]:
    buckets: dict[int, list] = {}
    for clip, record in dataset:
        buckets.setdefault(clip.duration_units, []).append((clip, record))
    return dict(sorted(buckets.items()))


def draw_batch(buckets: dict, task: str, batch_size: int, rng: np.random.Generator) -> Batch:
    """Single-task batch of equal-duration clips."""
    keys = list(buckets)
    sizes = np.array([len(buckets[k]) for k in keys], dtype=np.float64)
    key = keys[int(rng.choice(len(keys), p=sizes / sizes.sum()))]
    pool = buckets[key]
    idx = rng.integers(0, len(pool), size=batch_size)
    return Batch(task, [pool[i][0] for i in idx], [pool[i][1] for i in idx])


def reference_plans(records: Sequence[PromptRecord], rng: np.random.Generator):
    """Context plans plus a freshly drawn reference utterance per bound span.

    Returns ``(plans, refs)`` where ``refs[b]`` maps span index to a ``[T_r, D_a]`` tensor.
    """
    plans, refs = [], []
    for rec in records:
        bound = [i for i, s in enumerate(rec.spans) if s.speaker_id is not None]
        plans.append(plan_context(rec, bound))
        refs.append({i: generate_reference_utterance(rec.spans[i].speaker_id, int(rng.integers(2**62)))
                     for i in bound})
    return plans, refs


def embed_plans(plans: Sequence[ContextPlan], refs: Sequence[dict], params: Params):
    """Encode every kept reference in one batched call and materialise the context."""
    chosen = [[refs[b][s] for s in plan.timbre_spans] for b, plan in enumerate(plans)]
    counts = [len(c) for c in chosen]
    flat = [r for c in chosen for r in c]
    pieces: list = [None] * len(plans)
    if flat:
        emb = encode_timbre(Tensor(np.stack([r.data for r in flat])), params)
        nonzero = [i for i, c in enumerate(counts) if c]
        for i, piece in zip(nonzero, ad.split(emb, [counts[i] for i in nonzero], axis=0)):
            pieces[i] = piece
    return materialize_batch(plans, pieces, params)


# -- step ---------------------------------------------------------------------

def grad_norm(params: Params) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None))


def adamw_update(state: TrainState, tcfg: TrainConfig) -> float:
    """Decoupled-weight-decay Adam step with global-norm clipping; returns the pre-clip norm."""
    norm = grad_norm(state.params)
    scale = 1.0
    if tcfg.grad_clip > 0 and norm > tcfg.grad_clip:
        scale = tcfg.grad_clip / norm
    k = state.step + 1
    b1, b2 = tcfg.beta1, tcfg.beta2
    c1, c2 = 1.0 - b1 ** k, 1.0 - b2 ** k
    for name, p in state.params.items():
        if p.grad is None:
            continue
        g = p.grad * scale
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + tcfg.adam_eps)
        p.data = p.data * (1.0 - tcfg.lr * tcfg.weight_decay) - tcfg.lr * update
        p.grad = None
    return norm


def prepare_inputs(batch: Batch, rng: np.random.Generator):
    """Noise, timesteps and flow targets for a batch (numpy only)."""
    b = len(batch.clips)
    t = rng.random(b)
    use_audio = batch.task != T2V
    use_video = batch.task != T2A
    out = {"t": t}
    for key, use, attr in (("audio", use_audio, "audio_tokens"), ("video", use_video, "video_tokens")):
        if not use:
            out[key] = None
            continue
        x = np.stack([getattr(c, attr).data for c in batch.clips])
        eps = rng.standard_normal(x.shape)
        z, target = flow_interpolate(x, eps, t)
        weight = np.ones(x.shape[:2])
        if key == "video" and batch.task == TI2AV:
            n = batch.clips[0].tr_video
            z[:, :n] = x[:, :n]
            weight[:, :n] = 0.0
        out[key] = (z, target, weight)
    return out


def velocity_loss(pred_a, pred_v, inputs) -> Tensor:
    """Per-sample mean squared velocity error over active tokens, averaged over the batch."""
    sq_sum = None
    count = 0.0
    for pred, key in ((pred_a, "audio"), (pred_v, "video")):
        if inputs[key] is None:
            continue
        _, target, weight = inputs[key]
        diff = pred - Tensor(target)
        w = Tensor(weight[:, :, None])
        term = ad.total(diff * diff * w)
        sq_sum = term if sq_sum is None else sq_sum + term
        count = count + weight.sum() * target.shape[2]
    return sq_sum * (1.0 / count)


def train_step(state: TrainState, batch: Batch, cfg: ModelConfig, tcfg: TrainConfig):
    """One optimisation step; returns ``(state, loss, info)``. Mutates ``state``."""
    rng = state.rng
    inputs = prepare_inputs(batch, rng)
    b = len(batch.clips)
    drop_cross = rng.random(b) < tcfg.drop_cross_prob
    drop_text = rng.random(b) < tcfg.drop_text_prob
    plans, refs = reference_plans(batch.records, rng)
    n_bound = sum(len(p.timbre_spans) for p in plans)
    plans = [drop_plan(p, tcfg.drop_timbre_prob, bool(dt), rng) for p, dt in zip(plans, drop_text)]

    tape = ad.Tape()
    try:
        with tape:
            tokens, slots, mask = embed_plans(plans, refs, state.params)
            za = Tensor(inputs["audio"][0]) if inputs["audio"] is not None else None
            zv = Tensor(inputs["video"][0]) if inputs["video"] is not None else None
            pa, pv = forward_batch(za, zv, tokens, slots, mask, inputs["t"], drop_cross, cfg, state.params)
            loss = velocity_loss(pa, pv, inputs)
        ad.backward(loss, tape)
    except ad.NonFiniteError:
        raise NonFiniteLossError(state.step, batch.task, inputs["t"]) from None
    value = float(loss.data)
    tape.reset()
    norm = adamw_update(state, tcfg)
    state.step += 1
    info = {"task": batch.task, "grad_norm": norm, "drop_cross": drop_cross, "drop_text": drop_text,
            "timbre_bound": n_bound, "timbre_kept": sum(len(p.timbre_spans) for p in plans)}
    return state, value, info


# -- loop ---------------------------------------------------------------------

def train(dataset, cfg: ModelConfig, tcfg: TrainConfig, state: Optional[TrainState] = None,
          metrics_path=None, until: Optional[int] = None,
          callback: Optional[Callable[[TrainState, float, dict], None]] = None) -> TrainState:
    """Run steps ``state.step .. until`` (default ``tcfg.steps``).

    ``dataset`` is a sequence of ``(LatentClip, PromptRecord)``. Each step draws
    its task from the active stage, converts half of the paired draws to
    image-conditioned ones, and samples an equal-duration batch. Metrics are
    appended to ``metrics_path`` as JSON lines.
    """
    tcfg.validate()
    cfg.validate()
    if not dataset:
        raise ValueError("empty training set")
    stages = tcfg.stage_list()
    state = state or TrainState.fresh(cfg, tcfg)
    buckets = bucket_by_duration(dataset)
    end = tcfg.steps if until is None else min(until, tcfg.steps)
    fh = open(metrics_path, "a") if metrics_path is not None else None
    t0 = time.perf_counter()
    try:
        while state.step < end:
            idx, stage = stage_at(stages, state.step)
            task = sample_task(stage.ratios, state.rng)
            if task == T2AV and state.rng.random() < tcfg.image_cond_prob:
                task = TI2AV
            batch = draw_batch(buckets, task, tcfg.batch_size, state.rng)
            step = state.step
            state, loss, info = train_step(state, batch, cfg, tcfg)
            if fh is not None:
                fh.write(json.dumps({"step": step, "stage": idx, "task": task, "loss": loss,
                                     "grad_norm": info["grad_norm"],
                                     "wall_time": time.perf_counter() - t0}) + "\n")
            if callback is not None:
                callback(state, loss, info)
    finally:
        if fh is not None:
            fh.close()
    return state
