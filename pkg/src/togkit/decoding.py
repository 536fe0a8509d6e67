"""Greedy and beam decoding with optional shallow fusion of an external LM.

Both searches walk the encoder output frame by frame. Within a frame a
hypothesis either closes (consumes the frame with BLANK) or emits a symbol
and stays open for another round; at most EMIT_CAP symbols can be emitted
per frame so decoding terminates on any model. Beam search prunes the union
of closed and still-open hypotheses to the beam width after every round,
which makes a width-1 beam take exactly the greedy path: candidates are
generated BLANK first, then symbols in id order, and the stable sort keeps
that order on score ties just as argmax keeps the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .features import (
    FeatureSequence,
    add_deltas,
    build_textogram,
    assemble_dual_input,
    stack_and_skip,
)
from .tape import constant, no_grad, take_row

EMIT_CAP = 10


class DecodeError(RuntimeError):
    pass


@dataclass
class DecodeConfig:
    beam: int = 1
    fusion_weight: float = 0.0
    textogram_duration: int = 4
    workers: int = 1

    def __post_init__(self):
        if self.beam < 1:
            raise DecodeError("beam width must be at least 1")
        if self.workers < 1:
            raise DecodeError("workers must be at least 1")
        if self.fusion_weight < 0.0:
            raise DecodeError("fusion weight must not be negative")
        if self.textogram_duration < 1:
            raise DecodeError("textogram duration must be at least 1")

    def to_kv(self) -> dict[str, str]:
        return {
            "beam": str(self.beam),
            "fusion_weight": repr(self.fusion_weight),
            "textogram_duration": str(self.textogram_duration),
            "workers": str(self.workers),
        }


# -- encoder input preparation ---------------------------------------------


def speech_input(model, seq: FeatureSequence) -> np.ndarray:
    """Raw speech features -> assembled encoder input (no augmentation)."""
    if model.normalizer is None:
        raise DecodeError("model carries no normalization statistics")
    frames = model.normalizer.apply(seq.frames)
    stacked = stack_and_skip(add_deltas(frames))
    assembled = assemble_dual_input(
        FeatureSequence(stacked, 2 * seq.frame_period_ms, "speech"),
        None, model.config.speech_width, model.config.text_width,
    )
    return assembled.frames


def text_input(model, text: str, duration: int = 4) -> np.ndarray:
    """Unmasked textogram -> assembled encoder input (text columns only)."""
    if model.config.text_width == 0:
        raise DecodeError("model was built without text input columns")
    gram = build_textogram(text, model.config.symbol_table, duration=duration)
    assembled = assemble_dual_input(None, gram, model.config.speech_width,
                                    model.config.text_width)
    return assembled.frames


# -- hypotheses --------------------------------------------------------------


@dataclass(frozen=True)
class Hypothesis:
    """One n-best entry; total = transducer + fusion_weight * lm."""

    symbols: tuple[int, ...]
    total: float
    transducer: float
    lm: float

    def text(self, table) -> str:
        return table.decode(self.symbols)


@dataclass
class _Beam:
    symbols: tuple[int, ...]
    total: float
    transducer: float
    lm: float
    pred_row: object      # prediction output feeding the joint
    state: object         # prediction-net recurrent state (None = empty prefix)
    cursor: object | None  # external LM state
    closed: bool


@dataclass
class _Candidate:
    symbols: tuple[int, ...]
    total: float
    transducer: float
    lm: float
    parent: _Beam
    symbol: int | None   # None closes with BLANK


def greedy_decode(model, frames: np.ndarray) -> np.ndarray:
    """Frame-synchronous argmax decoding; returns emitted symbol ids."""
    with no_grad():
        h_enc = model.encode(np.asarray(frames))
        pred_row = constant(
            np.zeros(model.config.prediction_width, dtype=np.float32))
        state = None
        out: list[int] = []
        for t in range(h_enc.data.shape[0]):
            enc_row = take_row(h_enc, t)
            for _ in range(EMIT_CAP):
                lp = model.joint(enc_row, pred_row).data
                k = int(np.argmax(lp))
                if k == 0:
                    break
                out.append(k)
                pred_row, state = model.prediction_step(k, state)
    return np.asarray(out, dtype=np.int64)


def beam_decode(model, frames: np.ndarray, beam_width: int = 8,
                lm=None, fusion_weight: float | None = None) -> list[Hypothesis]:
    """Length-synchronous beam search; returns hypotheses best first.

    ``fusion_weight`` may only be supplied together with ``lm``. A weight of
    exactly 0 never evaluates the LM, so its results are bit-identical to
    decoding without one.
    """
    if beam_width < 1:
        raise DecodeError("beam width must be at least 1")
    if fusion_weight is not None and lm is None:
        raise DecodeError("fusion weight supplied without an external LM")
    if fusion_weight is not None and fusion_weight < 0.0:
        raise DecodeError("fusion weight must not be negative")
    weight = 0.0 if fusion_weight is None else fusion_weight
    use_lm = lm is not None and weight != 0.0
    if use_lm and not lm.trained:
        raise DecodeError("external LM has not been trained; cannot fuse")

    k_total = model.config.alphabet_size
    with no_grad():
        h_enc = model.encode(np.asarray(frames))
        start = _Beam(
            symbols=(),
            total=0.0,
            transducer=0.0,
            lm=0.0,
            pred_row=constant(
                np.zeros(model.config.prediction_width, dtype=np.float32)),
            state=None,
            cursor=lm.start_cursor() if use_lm else None,
            closed=False,
        )
        beams = [start]
        for t in range(h_enc.data.shape[0]):
            enc_row = take_row(h_enc, t)
            open_set = [replace(b, closed=False) for b in beams]
            closed: list[_Candidate] = []
            round_no = 0
            while open_set:
                force = round_no >= EMIT_CAP
                candidates = list(closed)
                for beam in open_set:
                    lp = model.joint(enc_row, beam.pred_row).data
                    candidates.append(_Candidate(
                        symbols=beam.symbols,
                        total=beam.total + float(lp[0]),
                        transducer=beam.transducer + float(lp[0]),
                        lm=beam.lm,
                        parent=beam,
                        symbol=None,
                    ))
                    if force:
                        continue
                    if use_lm:
                        # LM vocab row v scores symbol v+1; end marker unused here
                        lm_row = beam.cursor.logprobs[:k_total - 1]
                    for k in range(1, k_total):
                        lm_lp = float(lm_row[k - 1]) if use_lm else 0.0
                        candidates.append(_Candidate(
                            symbols=beam.symbols + (k,),
                            total=beam.total + float(lp[k]) + weight * lm_lp,
                            transducer=beam.transducer + float(lp[k]),
                            lm=beam.lm + lm_lp,
                            parent=beam,
                            symbol=k,
                        ))
                candidates.sort(key=lambda c: -c.total)
                kept = candidates[:beam_width]
                closed = [c for c in kept if c.symbol is None]
                open_set = [_materialize(model, lm, c, use_lm)
                            for c in kept if c.symbol is not None]
                round_no += 1
            beams = [_close(c) for c in closed]
    beams.sort(key=lambda b: -b.total)
    return [Hypothesis(symbols=b.symbols, total=b.total,
                       transducer=b.transducer, lm=b.lm) for b in beams]


def _materialize(model, lm, cand: _Candidate, use_lm: bool) -> _Beam:
    pred_row, state = model.prediction_step(cand.symbol, cand.parent.state)
    cursor = lm.advance(cand.parent.cursor, cand.symbol) if use_lm else None
    return _Beam(symbols=cand.symbols, total=cand.total,
                 transducer=cand.transducer, lm=cand.lm,
                 pred_row=pred_row, state=state, cursor=cursor, closed=False)


def _close(cand: _Candidate) -> _Beam:
    return _Beam(symbols=cand.symbols, total=cand.total,
                 transducer=cand.transducer, lm=cand.lm,
                 pred_row=cand.parent.pred_row, state=cand.parent.state,
                 cursor=cand.parent.cursor, closed=True)


def decode_utterance(model, frames: np.ndarray, config: DecodeConfig,
                     lm=None) -> np.ndarray:
    """Decode one assembled input under ``config``; returns symbol ids."""
    if config.fusion_weight != 0.0 and lm is None:
        raise DecodeError("fusion weight supplied without an external LM")
    if lm is not None and config.fusion_weight != 0.0:
        best = beam_decode(model, frames, config.beam, lm=lm,
                           fusion_weight=config.fusion_weight)
        return np.asarray(best[0].symbols, dtype=np.int64)
    if config.beam == 1:
        return greedy_decode(model, frames)
    return np.asarray(beam_decode(model, frames, config.beam)[0].symbols,
                      dtype=np.int64)
