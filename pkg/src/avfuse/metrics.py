"""Toy-domain evaluation metrics that read the generator's known structure.

* ``sync_score``: per-unit agreement between the blob position decoded from
  video and the band decoded from audio, chance-corrected so that independent
  streams score about 0 and perfect agreement scores 1.
* ``timbre_similarity``: cosine between the mean envelope channels of the
  audio and a speaker's envelope.
* ``pattern_accuracy``: whether the decoded band sequence is nearest (in
  Hamming distance) to the requested pattern.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .data import (N_BANDS, N_PATTERNS, N_SPEAKERS, TIMBRE_CHANNELS, TR_AUDIO, TR_VIDEO, ClipSpec,
                   envelope_table, generate_clip, pattern_table, sample_spec, span_units)

CHANCE = 1.0 / N_BANDS


class MetricError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def decode_units(tokens, tr: int) -> np.ndarray:
    """Argmax over the 8 band/position channels of the per-unit mean token."""
    x = _array(tokens)
    if x.ndim != 2 or x.shape[0] % tr:
        raise MetricError(f"token count {x.shape[0]} is not a multiple of rate {tr}")
    means = x[:, :N_BANDS].reshape(x.shape[0] // tr, tr, N_BANDS).mean(axis=1)
    return np.argmax(means, axis=1)


def sync_score(video_tokens, audio_tokens, tr_v: int = TR_VIDEO, tr_a: int = TR_AUDIO) -> float:
    v = _array(video_tokens)
    a = _array(audio_tokens)
    if v.shape[0] * tr_a != a.shape[0] * tr_v:
        raise MetricError(f"durations differ: {v.shape[0]} video tokens at rate {tr_v} vs "
                          f"{a.shape[0]} audio tokens at rate {tr_a}")
    blob = decode_units(v, tr_v)
    band = decode_units(a, tr_a)
    if blob.size == 0:
        raise MetricError("empty clip")
    p = float(np.mean(blob == band))
    return (p - CHANCE) / (1.0 - CHANCE)


def timbre_similarity(audio_tokens, speaker_id: int) -> float:
    if not 0 <= speaker_id < N_SPEAKERS:
        raise MetricError(f"speaker_id {speaker_id} outside [0, {N_SPEAKERS})")
    a = _array(audio_tokens)
    if a.ndim != 2 or a.shape[0] == 0:
        raise MetricError("audio tokens must be a non-empty [T, D] array")
    got = a[:, TIMBRE_CHANNELS].mean(axis=0)
    ref = envelope_table()[speaker_id, TIMBRE_CHANNELS]
    denom = np.linalg.norm(got) * np.linalg.norm(ref)
    if denom == 0.0:
        return 0.0
    return float(np.clip(got @ ref / denom, -1.0, 1.0))


def nearest_pattern(bands: np.ndarray) -> int:
    """Lowest-id pattern at minimum Hamming distance from ``bands``."""
    bands = np.asarray(bands)
    table = pattern_table()
    if bands.size > table.shape[1]:
        raise MetricError(f"{bands.size} units exceed the pattern length {table.shape[1]}")
    dist = (table[:, :bands.size] != bands[None, :]).sum(axis=1)
    return int(np.argmin(dist))


def pattern_accuracy(audio_tokens, pattern_id: int, tr_a: int = TR_AUDIO) -> float:
    if not 0 <= pattern_id < N_PATTERNS:
        raise MetricError(f"pattern_id {pattern_id} outside [0, {N_PATTERNS})")
    return float(nearest_pattern(decode_units(audio_tokens, tr_a)) == pattern_id)


def span_timbre_similarities(audio_tokens, spec: ClipSpec, tr_a: int = TR_AUDIO) -> list[tuple[int, float]]:
    """(speaker, similarity) for every speech span of ``spec``."""
    a = _array(audio_tokens)
    out = []
    for speaker, units in zip(spec.span_speakers, span_units(spec)):
        rows = (units[:, None] * tr_a + np.arange(tr_a)).ravel()
        out.append((speaker, timbre_similarity(a[rows], speaker)))
    return out


# -- reports ------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def _mean(self, key) -> Optional[float]:
        vals = [r[key] for r in self.rows if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def sync_score(self) -> Optional[float]:
        return self._mean("sync")

    @property
    def timbre_similarity(self) -> Optional[float]:
        return self._mean("timbre")

    @property
    def pattern_accuracy(self) -> Optional[float]:
        return self._mean("pattern")

    def summary(self) -> dict:
        return {"kind": "summary", "n_clips": len(self.rows), "sync_score": self.sync_score,
                "timbre_similarity": self.timbre_similarity, "pattern_accuracy": self.pattern_accuracy}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "clip", **r}) for r in self.rows]
        lines.append(json.dumps(self.summary()))
        return "\n".join(lines) + "\n"


def score_clip(spec: ClipSpec, audio, video, tr_v: int = TR_VIDEO, tr_a: int = TR_AUDIO) -> dict:
    """Breakdown row for one generated clip (``None`` where a metric does not apply)."""
    row = {"seed": spec.seed, "pattern_id": spec.pattern_id, "sync": None, "timbre": None, "pattern": None}
    if audio is not None and video is not None:
        row["sync"] = sync_score(video, audio, tr_v, tr_a)
    if audio is not None:
        row["pattern"] = pattern_accuracy(audio, spec.pattern_id, tr_a)
        spans = span_timbre_similarities(audio, spec, tr_a)
        if spans:
            row["timbre"] = float(np.mean([s for _, s in spans]))
            row["span_timbre"] = [s for _, s in spans]
    return row


def evaluate(specs: Sequence[ClipSpec], outputs: Sequence[tuple]) -> EvalReport:
    """``outputs[i]`` is ``(audio, video)`` generated for ``specs[i]``."""
    if len(specs) != len(outputs):
        raise MetricError("one output per spec required")
    return EvalReport([score_clip(s, a, v) for s, (a, v) in zip(specs, outputs)])


def paired_bootstrap(a: Sequence[float], b: Sequence[float], confidence: float = 0.95,
                     n_resamples: int = 9999, seed: int = 0) -> tuple[float, float, float]:
    """Mean of ``b - a`` with its bootstrap confidence interval (pairs resampled together)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise MetricError("paired bootstrap needs two equal-length samples of size >= 2")
    diff = b - a
    if np.all(diff == diff[0]):
        return float(diff[0]), float(diff[0]), float(diff[0])
    res = stats.bootstrap((diff,), np.mean, confidence_level=confidence, n_resamples=n_resamples,
                          method="percentile", random_state=np.random.default_rng(seed))
    return float(diff.mean()), float(res.confidence_interval.low), float(res.confidence_interval.high)


# -- calibration --------------------------------------------------------------

@dataclass
class Calibration:
    matched_sync_min: float
    mismatched_abs_sync: float
    pattern_acc_matched: float
    pattern_acc_noise: float
    timbre_same: float
    timbre_gap: float

    CHECKS = (
        ("matched sync > 0.9", lambda c: c.matched_sync_min > 0.9),
        ("mismatched mean |sync| < 0.2", lambda c: c.mismatched_abs_sync < 0.2),
        ("pattern accuracy on generator clips > 0.98", lambda c: c.pattern_acc_matched > 0.98),
        ("pattern accuracy on noise within 1/16 +- 0.05", lambda c: abs(c.pattern_acc_noise - 1 / 16) <= 0.05),
        ("same-speaker timbre similarity > 0.8", lambda c: c.timbre_same > 0.8),
        ("cross-speaker timbre similarity lower by >= 0.3", lambda c: c.timbre_gap >= 0.3),
    )

    def failures(self) -> list[str]:
        return [name for name, ok in self.CHECKS if not ok(self)]

    @property
    def passed(self) -> bool:
        return not self.failures()


def calibrate(n: int = 100, seed: int = 1_000_000, n_pattern: int = 200, n_noise: int = 2000) -> Calibration:
    """Score the generator against itself; model evaluation is meaningless if this fails."""
    rng = np.random.default_rng(seed)
    specs = [sample_spec(seed + i) for i in range(max(n, n_pattern))]
    clips = [generate_clip(s)[0] for s in specs]
    matched = [sync_score(c.video_tokens, c.audio_tokens) for c in clips[:n]]

    mism = []
    for i in range(n):
        a = specs[i]
        other = (a.pattern_id + int(rng.integers(1, N_PATTERNS))) % N_PATTERNS
        b = ClipSpec(seed + 10 * n + i, int(rng.integers(N_SPEAKERS)), other, a.duration_units, a.has_speech)
        mism.append(abs(sync_score(generate_clip(b)[0].video_tokens, clips[i].audio_tokens)))

    pat = [pattern_accuracy(c.audio_tokens, s.pattern_id) for c, s in zip(clips[:n_pattern], specs)]
    noise = [pattern_accuracy(rng.standard_normal((int(rng.integers(4, 9)) * TR_AUDIO, 12)),
                              int(rng.integers(N_PATTERNS))) for _ in range(n_noise)]

    same, cross = [], []
    for c, s in zip(clips[:n], specs):
        a = _array(c.audio_tokens)
        for speaker, units in zip(s.span_speakers, span_units(s)):
            rows = a[(units[:, None] * TR_AUDIO + np.arange(TR_AUDIO)).ravel()]
            other = (speaker + int(rng.integers(1, N_SPEAKERS))) % N_SPEAKERS
            same.append(timbre_similarity(rows, speaker))
            cross.append(timbre_similarity(rows, other))
    same_m = float(np.mean(same)) if same else math.nan
    cross_m = float(np.mean(cross)) if cross else math.nan
    return Calibration(float(np.min(matched)), float(np.mean(mism)), float(np.mean(pat)),
                       float(np.mean(noise)), same_m, same_m - cross_m)


def require_calibration(**kw) -> Calibration:
    cal = calibrate(**kw)
    if not cal.passed:
        raise CalibrationError("metric calibration failed: " + "; ".join(cal.failures()))
    return cal
