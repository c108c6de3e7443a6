"""Euler sampling with condition-factorized classifier-free guidance.

Guided velocity::

    v = v_full + s_text (v_full - v_text_null)
               + s_align (v_full - v_align_null)
               + s_timbre (v_full - v_timbre_null)

``text_null`` swaps the whole context for the null-text token, ``align_null``
masks cross-modal attention, ``timbre_null`` replaces every timbre token by
the null-timbre token. Passes with a zero scale are not run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .context import encode_timbre, materialize_batch, null_text_plan, parse_prompt, plan_context, strip_timbre
from .data import D_AUDIO, D_VIDEO, TR_AUDIO, TR_VIDEO, generate_reference_utterance
from .model import ModelConfig, Params, forward_batch
from .training import T2A, T2AV, T2V, TASKS, TI2AV

class SamplingError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GuidanceScales:
    s_text: float = 0.0
    s_align: float = 0.0
    s_timbre: float = 0.0

    def __post_init__(self):
        for name in ("s_text", "s_align", "s_timbre"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name}={v} must be finite and >= 0")

    @classmethod
    def parse(cls, text: str) -> "GuidanceScales":
        parts = [p for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"scales must be 'text,align,timbre', got {text!r}")
        return cls(*(float(p) for p in parts))

    def coefficients(self) -> tuple[float, float, float, float]:
        """Weights of (full, text_null, align_null, timbre_null); they sum to 1."""
        return (1.0 + self.s_text + self.s_align + self.s_timbre, -self.s_text, -self.s_align, -self.s_timbre)

    def __str__(self) -> str:
        return f"{self.s_text:g},{self.s_align:g},{self.s_timbre:g}"


@dataclass
class SampleRequest:
    prompt: str
    task: str = T2AV
    duration_units: int = 6
    steps: int = 50
    seed: int = 0
    scales: GuidanceScales = field(default_factory=GuidanceScales)
    references: Optional[Mapping[int, np.ndarray]] = None
    first_frame: Optional[np.ndarray] = None

    def validate(self) -> "SampleRequest":
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.duration_units < 1:
            raise ValueError("duration_units must be >= 1")
        if self.task == TI2AV:
            if self.first_frame is None:
                raise ValueError("TI2AV needs a first-frame tensor")
            if np.shape(self.first_frame) != (TR_VIDEO, D_VIDEO):
                raise ValueError(f"first_frame must have shape {(TR_VIDEO, D_VIDEO)}")
        return self


@dataclass
class SampleResult:
    audio: Optional[np.ndarray]
    video: Optional[np.ndarray]
    trace: list = field(default_factory=list)


# -- conditioning ---------------------------------------------------------------

@dataclass
class Conditioning:
    """Full-context plans for a batch plus the timbre vectors they reference."""
    plans: list
    timbres: list

    @classmethod
    def build(cls, requests: Sequence[SampleRequest], params: Params) -> "Conditioning":
        plans, timbres = [], []
        for req in requests:
            record = parse_prompt(req.prompt)
            refs = dict(req.references or {})
            for i, span in enumerate(record.spans):
                if i not in refs and span.speaker_id is not None:
                    refs[i] = generate_reference_utterance(span.speaker_id, seed=req.seed * 97 + i + 1).data
            plan = plan_context(record, sorted(refs))
            plans.append(plan)
            if plan.timbre_spans:
                stacked = np.stack([np.asarray(refs[s], dtype=np.float64) for s in plan.timbre_spans])
                timbres.append(encode_timbre(Tensor(stacked), params))
            else:
                timbres.append(None)
        return cls(plans, timbres)

    def variant(self, name: str):
        if name == "text_null":
            return [null_text_plan() for _ in self.plans], [None] * len(self.plans)
        if name == "timbre_null":
            return [strip_timbre(p) for p in self.plans], [None] * len(self.plans)
        return self.plans, self.timbres


PASSES = ("full", "text_null", "align_null", "timbre_null")


def _run_pass(name, z_a, z_v, cond: Conditioning, t, cfg, params):
    plans, timbres = cond.variant(name)
    tokens, slots, mask = materialize_batch(plans, timbres, params)
    b = len(plans)
    drop = np.full(b, name == "align_null")
    try:
        v_a, v_v = forward_batch(z_a, z_v, tokens, slots, mask, t, drop, cfg, params)
    except ad.NonFiniteError as exc:
        raise SamplingError(f"non-finite values in the {name} pass: {exc}") from None
    return (None if v_a is None else v_a.data), (None if v_v is None else v_v.data)


def guided_velocity(z_a, z_v, cond: Conditioning, t, scales: GuidanceScales, cfg: ModelConfig,
                    params: Params):
    """Compose the guided velocity for batched latents (``[B, T, D]`` arrays or ``None``)."""
    za = None if z_a is None else Tensor(np.asarray(z_a, dtype=np.float64))
    zv = None if z_v is None else Tensor(np.asarray(z_v, dtype=np.float64))
    full_a, full_v = _run_pass("full", za, zv, cond, t, cfg, params)
    out_a, out_v = full_a, full_v
    for name, s in zip(PASSES[1:], (scales.s_text, scales.s_align, scales.s_timbre)):
        if s == 0:
            continue
        null_a, null_v = _run_pass(name, za, zv, cond, t, cfg, params)
        if out_a is not None:
            out_a = out_a + s * (full_a - null_a)
        if out_v is not None:
            out_v = out_v + s * (full_v - null_v)
    return out_a, out_v


# -- integration ----------------------------------------------------------------

def euler_integrate(z0, velocity_fn: Callable, steps: int):
    """Explicit Euler from t=0 to t=1 on a uniform grid; returns ``(z_1, norms)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.array(z0, dtype=np.float64, copy=True)
    dt = 1.0 / steps
    norms = []
    for k in range(steps):
        v = velocity_fn(z, k * dt)
        z = z + dt * v
        if not np.isfinite(z).all():
            raise SamplingError(f"non-finite state after Euler step {k}")
        norms.append(float(np.linalg.norm(v)))
    return z, norms


def initial_noise(req: SampleRequest):
    rng = np.random.default_rng(req.seed)
    z_a = rng.standard_normal((req.duration_units * TR_AUDIO, D_AUDIO))
    z_v = rng.standard_normal((req.duration_units * TR_VIDEO, D_VIDEO))
    if req.task == TI2AV:
        z_v[:TR_VIDEO] = req.first_frame
    return (None if req.task == T2V else z_a), (None if req.task == T2A else z_v)


def sample_batch(requests: Sequence[SampleRequest], cfg: ModelConfig, params: Params) -> list[SampleResult]:
    """Sample many requests; those sharing (task, duration, steps, scales) run as one batch.

    Each request's initial noise depends only on its own seed.
    """
    for r in requests:
        r.validate()
    groups: dict = {}
    for i, r in enumerate(requests):
        groups.setdefault((r.task, r.duration_units, r.steps, r.scales), []).append(i)
    results: list = [None] * len(requests)
    for (task, dur, steps, scales), idx in groups.items():
        reqs = [requests[i] for i in idx]
        cond = Conditioning.build(reqs, params)
        noise = [initial_noise(r) for r in reqs]
        z_a = None if task == T2V else np.stack([n[0] for n in noise])
        z_v = None if task == T2A else np.stack([n[1] for n in noise])
        frames = np.stack([r.first_frame for r in reqs]) if task == TI2AV else None
        trace = []
        dt = 1.0 / steps
        for k in range(steps):
            v_a, v_v = guided_velocity(z_a, z_v, cond, k * dt, scales, cfg, params)
            if z_a is not None:
                z_a = z_a + dt * v_a
            if z_v is not None:
                z_v = z_v + dt * v_v
                if frames is not None:
                    z_v[:, :TR_VIDEO] = frames
            for z, name in ((z_a, "audio"), (z_v, "video")):
                if z is not None and not np.isfinite(z).all():
                    raise SamplingError(f"non-finite {name} state after Euler step {k}")
            trace.append((k,
                          None if v_a is None else np.linalg.norm(v_a, axis=(1, 2)),
                          None if v_v is None else np.linalg.norm(v_v, axis=(1, 2))))
        for j, i in enumerate(idx):
            results[i] = SampleResult(
                None if z_a is None else z_a[j], None if z_v is None else z_v[j],
                [(k, None if na is None else float(na[j]), None if nv is None else float(nv[j]))
                 for k, na, nv in trace])
    return results


def sample(request: SampleRequest, cfg: ModelConfig, params: Params) -> SampleResult:
    return sample_batch([request], cfg, params)[0]


# -- output file ----------------------------------------------------------------

def request_meta(req: SampleRequest) -> str:
    return container.format_kv({"kind": "sample", "prompt": req.prompt, "task": req.task,
                                "duration_units": req.duration_units, "steps": req.steps,
                                "seed": req.seed, "scales": str(req.scales)})


def write_sample(path, result: SampleResult, req: SampleRequest) -> None:
    tensors = {}
    if result.audio is not None:
        tensors["audio"] = result.audio
    if result.video is not None:
        tensors["video"] = result.video
    container.write(path, tensors, request_meta(req))


def read_sample(path):
    meta, tensors = container.read(path)
    return container.parse_kv(meta), tensors.get("audio"), tensors.get("video")
