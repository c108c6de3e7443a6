"""Procedural paired audio/video latents with known correspondence.

Each clip is a sequence of abstract time units. In every unit the video shows
a blob at one of 8 positions and the audio carries energy in the matching one
of 8 frequency bands. Pattern ids select the band trajectory from a
Reed-Solomon code over GF(8) (two trajectories agree on at most one unit);
a few units per clip are re-drawn at random ("ad-libs") so that the prompt
does not fully determine the trajectory. Speech clips add the speaker's
timbre envelope to the audio and a speaking flag to the video.

Channel layout::

    video  [T_v x 16]   0..7 blob one-hot, 8 speaking flag, 9..15 idle
    audio  [T_a x 12]   0..7 band energy, 8..11 timbre envelope
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .context import PromptRecord, parse_prompt

N_SPEAKERS = 8
N_PATTERNS = 16
N_BANDS = 8
TR_VIDEO = 4
TR_AUDIO = 8
D_VIDEO = 16
D_AUDIO = 12
TIMBRE_CHANNELS = slice(N_BANDS, D_AUDIO)
SPEAKING_CHANNEL = N_BANDS
REF_LEN = 8
NOISE_STD = 0.05
BAND_AMP = 2.0
TIMBRE_AMP = 2.0
NEUTRAL_BAND = BAND_AMP / N_BANDS
CLAMP = 3.0
ENVELOPE_SEED = 20_240_517
MAX_UNITS = 8

NUMBER_WORDS = ("zero one two three four five six seven eight nine ten eleven "
                "twelve thirteen fourteen fifteen").split()


class DatasetError(ValueError):
    pass


class ChecksumError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


# -- GF(8) pattern code -------------------------------------------------------

def _gf8_mul(a: int, b: int) -> int:
    out = 0
    for _ in range(3):
        if b & 1:
            out ^= a
        b >>= 1
        a <<= 1
        if a & 0b1000:
            a ^= 0b1011  # x^3 + x + 1
    return out


def _gf8_points() -> list[int]:
    pts, x = [0], 1
    for _ in range(7):
        pts.append(x)
        x = _gf8_mul(x, 2)
    return pts


@lru_cache(maxsize=1)
def pattern_table() -> np.ndarray:
    """[N_PATTERNS x MAX_UNITS] band index per time unit."""
    pts = _gf8_points()
    table = np.empty((N_PATTERNS, MAX_UNITS), dtype=np.int64)
    for p in range(N_PATTERNS):
        a, b = p % 8, 1 + p // 8
        table[p] = [a ^ _gf8_mul(b, x) for x in pts]
    table.setflags(write=False)
    return table


def n_adlibs(duration_units: int) -> int:
    """Units re-drawn per clip; stays inside the code's unique-decoding radius."""
    return max(0, (duration_units - 2) // 2)


# -- speaker envelopes --------------------------------------------------------

@lru_cache(maxsize=1)
def envelope_table() -> np.ndarray:
    """[N_SPEAKERS x D_AUDIO] unit envelopes living in the timbre channels.

    Drawn from a seeded unit-sphere sampler, redrawn until every pair of
    speakers has cosine similarity below 0.5, then frozen.
    """
    rng = np.random.default_rng(ENVELOPE_SEED)
    k = D_AUDIO - N_BANDS
    while True:
        v = rng.standard_normal((N_SPEAKERS, k))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        cos = v @ v.T
        if (cos[~np.eye(N_SPEAKERS, dtype=bool)] < 0.5).all():
            break
    table = np.zeros((N_SPEAKERS, D_AUDIO))
    table[:, TIMBRE_CHANNELS] = v
    table.setflags(write=False)
    return table


# -- types --------------------------------------------------------------------

@dataclass(frozen=True)
class ClipSpec:
    seed: int
    speaker_id: int = 0
    pattern_id: int = 0
    duration_units: int = 4
    has_speech: bool = True
    speaker2_id: Optional[int] = None

    def validate(self) -> None:
        if not 0 <= self.speaker_id < N_SPEAKERS:
            raise ValueError(f"speaker_id {self.speaker_id} outside [0, {N_SPEAKERS})")
        if not 0 <= self.pattern_id < N_PATTERNS:
            raise ValueError(f"pattern_id {self.pattern_id} outside [0, {N_PATTERNS})")
        if not 1 <= self.duration_units <= MAX_UNITS:
            raise ValueError(f"duration_units {self.duration_units} outside [1, {MAX_UNITS}]")
        if self.speaker2_id is not None:
            if not self.has_speech:
                raise ValueError("a second speaker needs has_speech")
            if not 0 <= self.speaker2_id < N_SPEAKERS:
                raise ValueError(f"speaker2_id {self.speaker2_id} outside [0, {N_SPEAKERS})")
            if self.duration_units < 2:
                raise ValueError("two speech spans need at least 2 time units")

    @property
    def span_speakers(self) -> list[int]:
        if not self.has_speech:
            return []
        if self.speaker2_id is None:
            return [self.speaker_id]
        return [self.speaker_id, self.speaker2_id]


@dataclass
class CorrespondenceTrace:
    blob: np.ndarray       # per-unit blob position
    band: np.ndarray       # per-unit active band
    speakers: np.ndarray   # per-unit speaker id, -1 when silent
    envelope: Tensor       # primary speaker envelope [D_AUDIO]


@dataclass
class LatentClip:
    video_tokens: Tensor
    audio_tokens: Tensor
    tr_video: int
    tr_audio: int
    truth: CorrespondenceTrace
    spec: ClipSpec

    @property
    def duration_units(self) -> int:
        return len(self.truth.band)


# -- generation ---------------------------------------------------------------

def speech_split(duration_units: int) -> int:
    """First unit of the second span in a two-speaker clip."""
    return duration_units // 2


def prompt_text(spec: ClipSpec) -> str:
    name = NUMBER_WORDS[spec.pattern_id]
    text = f"a blob traces pattern {name}"
    if not spec.has_speech:
        return text + " with no speech"
    text += f" speaker:{spec.speaker_id} says <S>pattern {name}<E>"
    if spec.speaker2_id is not None:
        text += f" then speaker:{spec.speaker2_id} says <S>pattern {name} again<E>"
    return text


def _clip_rng(spec: ClipSpec) -> np.random.Generator:
    s2 = -1 if spec.speaker2_id is None else spec.speaker2_id
    words = [spec.seed & 0xFFFFFFFF, spec.seed >> 32, spec.speaker_id, spec.pattern_id,
             spec.duration_units, int(spec.has_speech), s2 + 1]
    return np.random.default_rng(np.random.SeedSequence(words))


def band_trajectory(spec: ClipSpec) -> np.ndarray:
    """Pattern codeword with ad-lib units re-drawn; independent of the speakers."""
    d = spec.duration_units
    rng = np.random.default_rng(np.random.SeedSequence(
        [spec.seed & 0xFFFFFFFF, spec.seed >> 32, spec.pattern_id, d, 3]))
    bands = pattern_table()[spec.pattern_id, :d].copy()
    for u in rng.choice(d, size=n_adlibs(d), replace=False):
        bands[u] = (bands[u] + rng.integers(1, N_BANDS)) % N_BANDS
    return bands


def span_units(spec: ClipSpec) -> list[np.ndarray]:
    """Unit indices covered by each speech span, in span order."""
    d = spec.duration_units
    if not spec.has_speech:
        return []
    if spec.speaker2_id is None:
        return [np.arange(d)]
    k = speech_split(d)
    return [np.arange(k), np.arange(k, d)]


def unit_speakers(spec: ClipSpec) -> np.ndarray:
    d = spec.duration_units
    out = np.full(d, -1, dtype=np.int64)
    if spec.has_speech:
        out[:] = spec.speaker_id
        if spec.speaker2_id is not None:
            out[speech_split(d):] = spec.speaker2_id
    return out


def generate_clip(spec: ClipSpec) -> tuple[LatentClip, PromptRecord]:
    spec.validate()
    rng = _clip_rng(spec)
    d = spec.duration_units
    bands = band_trajectory(spec)
    speakers = unit_speakers(spec)
    env = envelope_table()

    video = np.zeros((d, TR_VIDEO, D_VIDEO))
    audio = np.zeros((d, TR_AUDIO, D_AUDIO))
    units = np.arange(d)
    video[units, :, bands] = BAND_AMP
    audio[units, :, bands] = BAND_AMP
    for u in units:
        if speakers[u] >= 0:
            video[u, :, SPEAKING_CHANNEL] = 1.0
            audio[u] += TIMBRE_AMP * env[speakers[u]]
    video = video.reshape(d * TR_VIDEO, D_VIDEO)
    audio = audio.reshape(d * TR_AUDIO, D_AUDIO)
    video += rng.normal(0.0, NOISE_STD, video.shape)
    audio += rng.normal(0.0, NOISE_STD, audio.shape)
    np.clip(video, -CLAMP, CLAMP, out=video)
    np.clip(audio, -CLAMP, CLAMP, out=audio)

    trace = CorrespondenceTrace(blob=bands.copy(), band=bands.copy(), speakers=speakers,
                                envelope=Tensor(env[spec.speaker_id].copy()))
    clip = LatentClip(Tensor(video), Tensor(audio), TR_VIDEO, TR_AUDIO, trace, spec)
    return clip, parse_prompt(prompt_text(spec))


def generate_reference_utterance(speaker_id: int, seed: int = 0) -> Tensor:
    """Short audio-token sequence carrying only the speaker's envelope."""
    if not 0 <= speaker_id < N_SPEAKERS:
        raise ValueError(f"speaker_id {speaker_id} outside [0, {N_SPEAKERS})")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, speaker_id, 7]))
    ref = np.zeros((REF_LEN, D_AUDIO))
    ref[:, :N_BANDS] = NEUTRAL_BAND
    ref += TIMBRE_AMP * envelope_table()[speaker_id]
    ref += rng.normal(0.0, NOISE_STD, ref.shape)
    np.clip(ref, -CLAMP, CLAMP, out=ref)
    return Tensor(ref)


def reference_mean(speaker_id: int) -> np.ndarray:
    """Noise-free per-token value of a reference utterance."""
    ref = np.zeros(D_AUDIO)
    ref[:N_BANDS] = NEUTRAL_BAND
    return ref + TIMBRE_AMP * envelope_table()[speaker_id]


def sample_spec(seed: int, speech_prob: float = 0.75, two_speaker_prob: float = 0.35,
                min_units: int = 4, max_units: int = 8) -> ClipSpec:
    """Deterministically derive a clip spec from a seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, 11]))
    speaker = int(rng.integers(N_SPEAKERS))
    pattern = int(rng.integers(N_PATTERNS))
    dur = int(rng.integers(min_units, max_units + 1))
    speech = bool(rng.random() < speech_prob)
    speaker2 = None
    if speech and rng.random() < two_speaker_prob:
        speaker2 = int((speaker + rng.integers(1, N_SPEAKERS)) % N_SPEAKERS)
    return ClipSpec(seed, speaker, pattern, dur, speech, speaker2)


# -- dataset file -------------------------------------------------------------

MAGIC = b"NAVATOY1"


def _pack_block(arr: np.ndarray) -> bytes:
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _pack_ints(arr: np.ndarray) -> bytes:
    return np.asarray(arr, dtype="<i4").tobytes()


def write_dataset(items, path) -> None:
    """Write ``(LatentClip, PromptRecord)`` pairs (or bare clips) to ``path``."""
    parts = [MAGIC, struct.pack("<I", len(items))]
    for item in items:
        clip, record = item if isinstance(item, tuple) else (item, None)
        s = clip.spec
        text = (record.text if record is not None else prompt_text(s)).encode("utf-8")
        tr = clip.truth
        n = len(tr.band)
        parts += [
            struct.pack("<QIIIB", s.seed, s.speaker_id, s.pattern_id, s.duration_units, int(s.has_speech)),
            _pack_block(clip.video_tokens.data),
            _pack_block(clip.audio_tokens.data),
            struct.pack("<III", n, clip.tr_video, clip.tr_audio),
            _pack_ints(tr.blob), _pack_ints(tr.band), _pack_ints(tr.speakers),
            _pack_block(tr.envelope.data),
            struct.pack("<I", len(text)), text,
        ]
    payload = b"".join(parts)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetError("unexpected end of dataset payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> np.ndarray:
        (rank,) = self.unpack("<I")
        shape = self.unpack(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)

    def ints(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<i4").astype(np.int64)


def read_dataset(path) -> list[tuple[LatentClip, PromptRecord]]:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 8:
        raise ChecksumError(f"{path}: file too short to hold a checksum")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if buf[:7] == MAGIC[:7] and buf[:8] != MAGIC:
        raise VersionError(f"{path}: unsupported dataset version {buf[7:8]!r}")
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch (truncated or corrupt)")
    if payload[:8] != MAGIC:
        raise DatasetError(f"{path}: bad magic {payload[:8]!r}")
    r = _Reader(payload)
    r.take(8)
    (count,) = r.unpack("<I")
    out = []
    for _ in range(count):
        seed, speaker, pattern, dur, speech = r.unpack("<QIIIB")
        video = r.block()
        audio = r.block()
        n, trv, tra = r.unpack("<III")
        blob, band, speakers = r.ints(n), r.ints(n), r.ints(n)
        env = r.block()
        (tlen,) = r.unpack("<I")
        record = parse_prompt(r.take(tlen).decode("utf-8"))
        speaker2 = record.spans[1].speaker_id if len(record.spans) > 1 else None
        spec = ClipSpec(seed, speaker, pattern, dur, bool(speech), speaker2)
        trace = CorrespondenceTrace(blob, band, speakers, Tensor(env))
        out.append((LatentClip(Tensor(video), Tensor(audio), trv, tra, trace, spec), record))
    if r.pos != len(payload):
        raise DatasetError(f"{path}: {len(payload) - r.pos} trailing bytes")
    return out
