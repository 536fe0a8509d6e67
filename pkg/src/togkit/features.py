"""Feature pipelines for both encoder modalities.

Speech side: deltas, global normalization, stack-and-skip, plus the three
training augmentations (sequence noise, span masking, speed/tempo
resampling). Text side: textogram rasters (one-hot rows per symbol, optional
occurrence masking). Both end in `assemble_dual_input`, which places the
active modality in its fixed slice and zero-fills the other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

RAW_FRAME_PERIOD_MS = 10

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1

BLANK_SYMBOL = "<b>"


class AlphabetError(ValueError):
    pass


@dataclass(frozen=True)
class SymbolTable:
    """Grapheme alphabet; BLANK is always index 0."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != BLANK_SYMBOL:
            raise AlphabetError(f"symbols[0] must be {BLANK_SYMBOL!r}")
        if len(set(self.symbols)) != len(self.symbols):
            raise AlphabetError("symbols must be unique")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def blank_index(self) -> int:
        return 0

    def index(self, grapheme: str) -> int:
        try:
            return self.symbols.index(grapheme)
        except ValueError:
            raise AlphabetError(f"grapheme {grapheme!r} not in alphabet") from None

    def encode(self, text: str) -> np.ndarray:
        ids = np.empty(len(text), dtype=np.int64)
        for pos, ch in enumerate(text):
            try:
                ids[pos] = self.symbols.index(ch)
            except ValueError:
                raise AlphabetError(
                    f"grapheme {ch!r} at position {pos} not in alphabet"
                ) from None
        return ids

    def decode(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in ids if int(i) != 0)

    @classmethod
    def default_alphabet(cls) -> "SymbolTable":
        letters = tuple("abcdefghijklmnopqrstuvwxyz")
        return cls((BLANK_SYMBOL,) + letters + (" ", "'"))


@dataclass
class FeatureSequence:
    frames: np.ndarray           # [T, D]
    frame_period_ms: int
    modality: str                # "speech" | "text"

    def __post_init__(self):
        if self.modality not in ("speech", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass
class Textogram:
    raster: np.ndarray           # [L, K] one-hot rows, BLANK column all zero
    source_text: str


@dataclass
class AugmentPolicy:
    seq_noise_prob: float = 0.8
    seq_noise_scale: float = 0.4
    time_mask_count: int = 2
    time_mask_max: int = 10
    feature_mask_count: int = 1
    feature_mask_max: int = 4
    speed_tempo_factors: tuple[float, ...] = (0.9, 1.1)
    textogram_mask_rate: float = 0.25
    textogram_duration: int = 4

    def __post_init__(self):
        for name in ("seq_noise_prob", "textogram_mask_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.textogram_duration < 1:
            raise ValueError("textogram_duration must be >= 1")
        for f in self.speed_tempo_factors:
            if f <= 0:
                raise ValueError(f"speed/tempo factor {f} must be positive")


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def build_textogram(text: str, table: SymbolTable, duration: int = 4,
                    mask_rate: float = 0.0, rng_seed=0) -> Textogram:
    """Rasterize ``text``: ``duration`` identical one-hot rows per symbol.

    Each symbol occurrence is dropped (all its rows zeroed) independently with
    probability ``mask_rate``; the draw order is text order, so the result is
    deterministic given the seed.
    """
    if duration < 1:
        raise ValueError("duration must be >= 1")
    ids = table.encode(text)
    if (ids == table.blank_index).any():
        raise AlphabetError("BLANK cannot appear in textogram source text")
    rng = _as_rng(rng_seed)
    raster = np.zeros((duration * len(ids), table.size), dtype=np.float32)
    for occurrence, symbol_id in enumerate(ids):
        if mask_rate > 0.0 and rng.random() < mask_rate:
            continue
        lo = occurrence * duration
        raster[lo:lo + duration, symbol_id] = 1.0
    return Textogram(raster=raster, source_text=text)


def add_deltas(frames: np.ndarray) -> np.ndarray:
    """Append 2-point central differences and their differences: [x|d|dd]."""
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"add_deltas needs a [T, F] matrix with T >= 1, got {frames.shape}")

    def central(x):
        ahead = np.concatenate([x[1:], x[-1:]], axis=0)
        behind = np.concatenate([x[:1], x[:-1]], axis=0)
        return (ahead - behind) / 2.0

    d = central(frames)
    dd = central(d)
    return np.concatenate([frames, d, dd], axis=1)


def stack_and_skip(frames: np.ndarray, stack: int = 2, skip: int = 2) -> np.ndarray:
    """Concatenate ``stack`` consecutive frames, keep every ``skip``-th window.

    The final frame repeats to fill windows that run past the end, so T=5
    yields rows (0,1), (2,3), (4,4).
    """
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"stack_and_skip needs a [T, F] matrix with T >= 1, got {frames.shape}")
    T = frames.shape[0]
    n_out = -(-T // skip)  # ceil
    need = (n_out - 1) * skip + stack
    if need > T:
        pad = np.repeat(frames[-1:], need - T, axis=0)
        frames = np.concatenate([frames, pad], axis=0)
    windows = [frames[i * skip: i * skip + stack].reshape(-1) for i in range(n_out)]
    return np.stack(windows, axis=0)


def unstack(frames: np.ndarray, stack: int = 2) -> np.ndarray:
    """Inverse of stack_and_skip for stack == skip (even-T case is lossless)."""
    n, width = frames.shape
    return frames.reshape(n * stack, width // stack)


def assemble_dual_input(speech: FeatureSequence | None, text: Textogram | None,
                        speech_width: int, text_width: int) -> FeatureSequence:
    """Place the one present modality in its slice, hard zeros in the other.

    ``speech`` must already be delta-expanded and stacked to ``speech_width``;
    the textogram raster is stacked here (K columns -> 2K) and must match
    ``text_width``.
    """
    if (speech is None) == (text is None):
        raise ValueError("exactly one of speech and text must be present")
    if speech is not None:
        if speech.modality != "speech":
            raise ValueError(f"expected speech modality, got {speech.modality!r}")
        if speech.frames.shape[1] != speech_width:
            raise ValueError(
                f"speech width {speech.frames.shape[1]} != configured {speech_width}"
            )
        out = np.zeros((speech.frames.shape[0], speech_width + text_width),
                       dtype=np.float32)
        out[:, :speech_width] = speech.frames
        return FeatureSequence(out, speech.frame_period_ms, "speech")

    stacked = stack_and_skip(text.raster)
    if stacked.shape[1] != text_width:
        raise ValueError(
            f"stacked textogram width {stacked.shape[1]} != configured {text_width}"
        )
    out = np.zeros((stacked.shape[0], speech_width + text_width), dtype=np.float32)
    out[:, speech_width:] = stacked
    return FeatureSequence(out, 2 * RAW_FRAME_PERIOD_MS, "text")


def sequence_noise_inject(batch: list[FeatureSequence], policy: AugmentPolicy,
                          rng: np.random.Generator) -> list[FeatureSequence]:
    """Mix each speech utterance with a scaled same-batch partner.

    Partners are drawn uniformly among the batch's other speech members
    (an utterance may only partner itself in a singleton batch) and looped or
    truncated to the target length. Text members pass through untouched.
    """
    speech_ids = [i for i, f in enumerate(batch) if f.modality == "speech"]
    out: list[FeatureSequence] = []
    for i, seq in enumerate(batch):
        if seq.modality != "speech":
            out.append(seq)
            continue
        if rng.random() >= policy.seq_noise_prob:
            out.append(seq)
            continue
        others = [j for j in speech_ids if j != i]
        partner_id = others[rng.integers(len(others))] if others else i
        partner = batch[partner_id].frames
        T = seq.frames.shape[0]
        reps = -(-T // partner.shape[0])
        looped = np.tile(partner, (reps, 1))[:T]
        mixed = seq.frames + np.float32(policy.seq_noise_scale) * looped
        out.append(FeatureSequence(mixed, seq.frame_period_ms, "speech"))
    return out


def spec_mask(frames: np.ndarray, policy: AugmentPolicy,
              rng: np.random.Generator) -> np.ndarray:
    """Zero random time spans and feature bands (SpecAugment-style).

    Widths draw uniformly from 0..min(max, extent-1); positions uniformly
    among spans that fit. Returns a copy.
    """
    out = frames.copy()
    T, F = frames.shape
    for _ in range(policy.time_mask_count):
        w = int(rng.integers(0, min(policy.time_mask_max, T - 1) + 1))
        start = int(rng.integers(0, T - w + 1))
        out[start:start + w, :] = 0.0
    for _ in range(policy.feature_mask_count):
        w = int(rng.integers(0, min(policy.feature_mask_max, F - 1) + 1))
        start = int(rng.integers(0, F - w + 1))
        out[:, start:start + w] = 0.0
    return out


def speed_tempo_perturb(frames: np.ndarray, factor: float) -> np.ndarray:
    """Linear time resampling to round(T / factor) frames (factor 1 = identity)."""
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    T = frames.shape[0]
    n_out = int(round(T / factor))
    if n_out < 1:
        raise ValueError(f"resampling T={T} by factor {factor} leaves no frames")
    if n_out == T:
        return frames.copy()
    src = np.linspace(0.0, T - 1.0, n_out)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, T - 1)
    frac = (src - lo)[:, None].astype(frames.dtype)
    return frames[lo] * (1.0 - frac) + frames[hi] * frac


@dataclass
class Normalizer:
    """Global per-coordinate mean/std, fitted once on speech training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frame_list: list[np.ndarray]) -> "Normalizer":
        stacked = np.concatenate(frame_list, axis=0).astype(np.float64)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.maximum(std, 1e-5)
        return cls(mean=mean.astype(np.float32), std=std.astype(np.float32))

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.mean) / self.std).astype(np.float32)


# ---------------------------------------------------------------------------
# feature file format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")


def write_feature_file(path, seq: FeatureSequence) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEAT_MAGIC, FEAT_VERSION,
                              frames.shape[0], frames.shape[1],
                              seq.frame_period_ms))
        fh.write(frames.tobytes())


def read_feature_file(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, rows, cols, period = _HEADER.unpack(head)
        if magic != FEAT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != FEAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        body = fh.read()
    expect = rows * cols * 4
    if len(body) != expect:
        raise ValueError(f"{path}: expected {expect} payload bytes, got {len(body)}")
    frames = np.frombuffer(body, dtype="<f4").reshape(rows, cols).copy()
    return FeatureSequence(frames, period, "speech")
