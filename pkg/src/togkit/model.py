"""Transducer network: encoder, prediction network, multiplicative joint.

The encoder consumes the assembled dual-width input, so one set of encoder
weights serves speech features and text rasters alike. The joint combines
encoder and prediction projections by elementwise product, which lets either
side veto a symbol by driving its projection to zero.

An optional next-symbol head on top of the prediction network turns that
network into a standalone language model over the non-blank alphabet plus an
end marker; it starts as an exactly uniform predictor (zero weights) so its
initial cross-entropy is log(vocab) by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .features import BLANK_SYMBOL, Normalizer, SymbolTable
from .recurrent import (
    BiLstmLayerParams,
    LstmParams,
    bidirectional_sequence,
    bidirectional_sequence_batch,
    bilstm_params_list,
    init_bilstm,
    init_lstm,
    lstm_cell,
    lstm_params_list,
    lstm_sequence,
    lstm_sequence_batch,
    zero_state,
)
from .tape import (
    DEFAULT_DTYPE,
    Parameter,
    ShapeError,
    Tensor,
    affine,
    concat,
    constant,
    embed_rows,
    log_softmax,
    multiply,
    reshape,
    slice_rows,
    take_along_last,
    tanh,
    tensor_sum,
)
from .transducer import BLANK_ID


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; every width is in units of one direction."""

    alphabet: tuple[str, ...]
    encoder_layers: int = 2
    encoder_width: int = 64
    prediction_width: int = 96
    joint_width: int = 48
    speech_width: int = 96
    text_width: int = 58

    def __post_init__(self):
        if len(self.alphabet) < 2 or self.alphabet[0] != BLANK_SYMBOL:
            raise ConfigError(
                f"alphabet must start with {BLANK_SYMBOL!r} and have at least one symbol"
            )
        for field_name in ("encoder_layers", "encoder_width", "prediction_width",
                           "joint_width", "speech_width"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be at least 1")
        if self.text_width < 0:
            raise ConfigError("text_width must not be negative")
        if self.prediction_width < 4:
            raise ConfigError("prediction_width must be at least 4 for the embedding")

    @property
    def alphabet_size(self) -> int:
        return len(self.alphabet)

    @property
    def input_width(self) -> int:
        return self.speech_width + self.text_width

    @property
    def embed_width(self) -> int:
        return self.prediction_width // 4

    @property
    def symbol_table(self) -> SymbolTable:
        return SymbolTable(self.alphabet)

    def to_kv(self) -> dict[str, str]:
        return {
            "alphabet": json.dumps(list(self.alphabet), ensure_ascii=False),
            "encoder_layers": str(self.encoder_layers),
            "encoder_width": str(self.encoder_width),
            "prediction_width": str(self.prediction_width),
            "joint_width": str(self.joint_width),
            "speech_width": str(self.speech_width),
            "text_width": str(self.text_width),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        try:
            return cls(
                alphabet=tuple(json.loads(kv["alphabet"])),
                encoder_layers=int(kv["encoder_layers"]),
                encoder_width=int(kv["encoder_width"]),
                prediction_width=int(kv["prediction_width"]),
                joint_width=int(kv["joint_width"]),
                speech_width=int(kv["speech_width"]),
                text_width=int(kv["text_width"]),
            )
        except KeyError as exc:
            raise ConfigError(f"model description is missing key {exc.args[0]!r}")


def desk_config(alphabet: tuple[str, ...] | None = None) -> ModelConfig:
    """Small footprint that still exercises every code path."""
    if alphabet is None:
        alphabet = SymbolTable.default_alphabet().symbols
    k = len(alphabet)
    return ModelConfig(alphabet=alphabet, text_width=2 * k)


class TransducerModel:
    """Parameters plus forward passes; training and decoding live elsewhere."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        self.encoder: list[BiLstmLayerParams] = []
        width = config.input_width
        for i in range(config.encoder_layers):
            self.encoder.append(init_bilstm(f"enc.{i}", width, config.encoder_width, rng))
            width = 2 * config.encoder_width
        self.pred_embed = Parameter(
            "pred.embed",
            rng.uniform(-1.0, 1.0, size=(config.alphabet_size, config.embed_width))
            .astype(DEFAULT_DTYPE) / np.sqrt(config.embed_width).astype(DEFAULT_DTYPE),
        )
        self.pred_lstm: LstmParams = init_lstm(
            "pred.lstm", config.embed_width, config.prediction_width, rng
        )
        two_h = 2 * config.encoder_width
        self.joint_enc_w = _weight("joint.enc.w", (two_h, config.joint_width), two_h, rng)
        self.joint_enc_b = _bias("joint.enc.b", (config.joint_width,))
        self.joint_pred_w = _weight(
            "joint.pred.w", (config.prediction_width, config.joint_width),
            config.prediction_width, rng,
        )
        self.joint_pred_b = _bias("joint.pred.b", (config.joint_width,))
        self.joint_out_w = _weight(
            "joint.out.w", (config.joint_width, config.alphabet_size),
            config.joint_width, rng,
        )
        self.joint_out_b = _bias("joint.out.b", (config.alphabet_size,))
        self.nnlm_hidden_w: Parameter | None = None
        self.nnlm_hidden_b: Parameter | None = None
        self.nnlm_w: Parameter | None = None
        self.nnlm_b: Parameter | None = None
        self.normalizer: Normalizer | None = None
        self._check_unique_names()

    # -- parameter registry ------------------------------------------------

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.encoder:
            out.extend(bilstm_params_list(layer))
        out.append(self.pred_embed)
        out.extend(lstm_params_list(self.pred_lstm))
        out.extend([
            self.joint_enc_w, self.joint_enc_b,
            self.joint_pred_w, self.joint_pred_b,
            self.joint_out_w, self.joint_out_b,
        ])
        if self.nnlm_w is not None:
            out.extend([self.nnlm_hidden_w, self.nnlm_hidden_b,
                        self.nnlm_w, self.nnlm_b])
        return out

    def parameter_map(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def _check_unique_names(self) -> None:
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names in model: {sorted(names)}")

    @property
    def has_nnlm_head(self) -> bool:
        return self.nnlm_w is not None

    def attach_nnlm_head(self) -> None:
        """Next-symbol head over the prediction network: affine, tanh, affine.

        Outputs cover the non-blank symbols plus an end marker, so the width
        equals the alphabet size with blank's slot reused for the end marker.
        The hidden affine is randomly initialized (a zero hidden layer would
        never receive gradient through a zero output layer); the output affine
        starts at zero so the untrained head is exactly uniform.
        """
        if self.has_nnlm_head:
            return
        k = self.config.alphabet_size
        p = self.config.prediction_width
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        self.nnlm_hidden_w = _weight("nnlm.h.w", (p, p), p, rng)
        self.nnlm_hidden_b = _bias("nnlm.h.b", (p,))
        self.nnlm_w = Parameter("nnlm.out.w", np.zeros((p, k), dtype=DEFAULT_DTYPE))
        self.nnlm_b = Parameter("nnlm.out.b", np.zeros(k, dtype=DEFAULT_DTYPE),
                                decay=False)

    # -- forward passes ------------------------------------------------------

    def encode(self, frames: np.ndarray) -> Tensor:
        """[T, speech+text] assembled input -> [T, 2*encoder_width]."""
        frames = np.asarray(frames, dtype=DEFAULT_DTYPE)
        if frames.ndim != 2 or frames.shape[1] != self.config.input_width:
            raise ShapeError(
                f"encoder input must be [T, {self.config.input_width}], got {frames.shape}"
            )
        h = constant(frames)
        for layer in self.encoder:
            h = bidirectional_sequence(h, layer)
        return h

    def encode_batch(self, frame_list: list[np.ndarray]) -> list[Tensor]:
        """Padded batched encoder; returns per-item [T_i, 2H] slices."""
        if not frame_list:
            return []
        lengths = []
        for frames in frame_list:
            if frames.ndim != 2 or frames.shape[1] != self.config.input_width:
                raise ShapeError(
                    f"encoder input must be [T, {self.config.input_width}], "
                    f"got {frames.shape}"
                )
            lengths.append(frames.shape[0])
        t_max = max(lengths)
        block = np.zeros((len(frame_list), t_max, self.config.input_width),
                         dtype=DEFAULT_DTYPE)
        for b, frames in enumerate(frame_list):
            block[b, :lengths[b]] = frames
        h = constant(block)
        for layer in self.encoder:
            h = bidirectional_sequence_batch(h, lengths, layer)
        return [slice_rows(h, b, lengths[b]) for b in range(len(frame_list))]

    def predict(self, labels: np.ndarray) -> Tensor:
        """Label prefix -> [U+1, P]; row u is the state after u labels.

        Row 0 is the all-zero vector: the recurrence starts from a zero state
        rather than a learned start token, and the joint sees that zero state
        directly for the empty prefix.
        """
        labels = np.asarray(labels, dtype=np.int64)
        self._check_labels(labels)
        p = self.config.prediction_width
        zero_row = constant(np.zeros((1, p), dtype=DEFAULT_DTYPE))
        if labels.size == 0:
            return zero_row
        emb = _embed(self.pred_embed, labels)
        xproj = affine(emb, self.pred_lstm.wx, self.pred_lstm.b)
        hs = lstm_sequence(xproj, self.pred_lstm.wh)
        return concat([zero_row, hs], axis=0)

    def predict_batch(self, label_lists: list[np.ndarray]) -> list[Tensor]:
        """Batched ``predict``; returns per-item [U_i+1, P] tensors."""
        arrs = [np.asarray(ls, dtype=np.int64) for ls in label_lists]
        for arr in arrs:
            self._check_labels(arr)
        p = self.config.prediction_width
        zero_row = constant(np.zeros((1, p), dtype=DEFAULT_DTYPE))
        lengths = [arr.size for arr in arrs]
        u_max = max(lengths, default=0)
        if u_max == 0:
            return [zero_row for _ in arrs]
        ids = np.zeros((len(arrs), u_max), dtype=np.int64)
        for b, arr in enumerate(arrs):
            ids[b, :arr.size] = arr
        emb = _embed(self.pred_embed, ids)
        xproj = affine(emb, self.pred_lstm.wx, self.pred_lstm.b)
        hs = lstm_sequence_batch(xproj, self.pred_lstm.wh)
        out = []
        for b, n in enumerate(lengths):
            if n == 0:
                out.append(zero_row)
            else:
                out.append(concat([zero_row, slice_rows(hs, b, n)], axis=0))
        return out

    def prediction_step(self, label: int, state) -> tuple[Tensor, object]:
        """One decoding step: consume ``label``, return (new hidden row, state).

        ``state`` is None for the empty prefix; the returned hidden row is the
        prediction vector to feed the joint for the extended prefix.
        """
        if not (0 < label < self.config.alphabet_size):
            raise ShapeError(f"label {label} out of range or blank")
        if state is None:
            state = zero_state(self.config.prediction_width)
        emb = _embed(self.pred_embed, np.asarray(label, dtype=np.int64))
        new_state = lstm_cell(emb, state, self.pred_lstm)
        return new_state.hidden, new_state

    def joint(self, enc_row: Tensor, pred_row: Tensor) -> Tensor:
        """One (t, u) cell -> [K] log-probabilities."""
        ep = affine(enc_row, self.joint_enc_w, self.joint_enc_b)
        pp = affine(pred_row, self.joint_pred_w, self.joint_pred_b)
        act = tanh(multiply(ep, pp))
        return log_softmax(affine(act, self.joint_out_w, self.joint_out_b))

    def joint_lattice(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        """Full grid: [T, 2H] x [U+1, P] -> [T, U+1, K] log-probabilities."""
        t = h_enc.data.shape[0]
        u1 = h_pred.data.shape[0]
        j = self.config.joint_width
        ep = reshape(affine(h_enc, self.joint_enc_w, self.joint_enc_b), (t, 1, j))
        pp = reshape(affine(h_pred, self.joint_pred_w, self.joint_pred_b), (1, u1, j))
        act = tanh(multiply(ep, pp))
        return log_softmax(affine(act, self.joint_out_w, self.joint_out_b))

    def nnlm_head_forward(self, h_pred: Tensor) -> Tensor:
        """Prediction rows -> log-probabilities over symbols 1..K-1 plus end.

        Output column k-1 is symbol k; the last column is the end marker.
        """
        if not self.has_nnlm_head:
            raise ConfigError("model has no next-symbol head; attach_nnlm_head first")
        hidden = tanh(affine(h_pred, self.nnlm_hidden_w, self.nnlm_hidden_b))
        return log_softmax(affine(hidden, self.nnlm_w, self.nnlm_b))

    def _check_labels(self, labels: np.ndarray) -> None:
        if labels.ndim != 1:
            raise ShapeError(f"label prefix must be 1-D, got shape {labels.shape}")
        if labels.size and (labels.min() <= BLANK_ID or
                            labels.max() >= self.config.alphabet_size):
            raise ShapeError(
                "label prefix must contain symbol ids in "
                f"[1, {self.config.alphabet_size - 1}], got {labels.tolist()}"
            )


def _weight(name: str, shape: tuple[int, ...], fan_in: int,
            rng: np.random.Generator) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(name, rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE))


def _bias(name: str, shape: tuple[int, ...]) -> Parameter:
    return Parameter(name, np.zeros(shape, dtype=DEFAULT_DTYPE), decay=False)


def _embed(table: Parameter, ids: np.ndarray) -> Tensor:
    return embed_rows(table, ids)


# -- external language model -------------------------------------------------


@dataclass(frozen=True)
class LmConfig:
    alphabet: tuple[str, ...]
    width: int = 64
    layers: int = 2

    def __post_init__(self):
        if len(self.alphabet) < 2 or self.alphabet[0] != BLANK_SYMBOL:
            raise ConfigError(
                f"alphabet must start with {BLANK_SYMBOL!r} and have at least one symbol"
            )
        if self.width < 4:
            raise ConfigError("width must be at least 4 for the embedding")
        if self.layers < 1:
            raise ConfigError("layers must be at least 1")

    @property
    def vocab_size(self) -> int:
        # non-blank symbols plus the end marker, which also serves as start
        return len(self.alphabet)

    @property
    def embed_width(self) -> int:
        return self.width // 4

    def to_kv(self) -> dict[str, str]:
        return {
            "alphabet": json.dumps(list(self.alphabet), ensure_ascii=False),
            "width": str(self.width),
            "layers": str(self.layers),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "LmConfig":
        try:
            return cls(
                alphabet=tuple(json.loads(kv["alphabet"])),
                width=int(kv["width"]),
                layers=int(kv["layers"]),
            )
        except KeyError as exc:
            raise ConfigError(f"language model description is missing key {exc.args[0]!r}")


class ExternalLm:
    """Recurrent next-symbol model over the non-blank alphabet plus end marker.

    Vocabulary indices: symbol id k (1..K-1) maps to row/column k-1; the end
    marker occupies the last slot and doubles as the start-of-sequence input.
    """

    def __init__(self, config: LmConfig, seed: int):
        self.config = config
        self.seed = seed
        self.trained = False
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        v = config.vocab_size
        self.embed = Parameter(
            "lm.embed",
            rng.uniform(-1.0, 1.0, size=(v, config.embed_width)).astype(DEFAULT_DTYPE)
            / np.sqrt(config.embed_width).astype(DEFAULT_DTYPE),
        )
        self.layers: list[LstmParams] = []
        width = config.embed_width
        for i in range(config.layers):
            self.layers.append(init_lstm(f"lm.{i}", width, config.width, rng))
            width = config.width
        self.out_w = _weight("lm.out.w", (config.width, v), config.width, rng)
        self.out_b = _bias("lm.out.b", (v,))

    @property
    def end_id(self) -> int:
        return self.config.vocab_size - 1

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = [self.embed]
        for layer in self.layers:
            out.extend(lstm_params_list(layer))
        out.extend([self.out_w, self.out_b])
        return out

    def vocab_id(self, symbol_id: int) -> int:
        if not (0 < symbol_id < self.config.vocab_size):
            raise ShapeError(f"symbol id {symbol_id} out of range or blank")
        return symbol_id - 1

    def step_logprobs(self, input_ids: np.ndarray) -> Tensor:
        """Teacher-forced pass: [L] vocabulary ids -> [L, V] log-probabilities.

        Row i predicts the item after input i; callers prepend the end marker
        to score a sequence from its start.
        """
        input_ids = np.asarray(input_ids, dtype=np.int64)
        if input_ids.ndim != 1 or input_ids.size == 0:
            raise ShapeError(f"input ids must be a non-empty 1-D array, got {input_ids.shape}")
        if input_ids.min() < 0 or input_ids.max() >= self.config.vocab_size:
            raise ShapeError("input ids out of vocabulary range")
        h = _embed(self.embed, input_ids)
        for layer in self.layers:
            xproj = affine(h, layer.wx, layer.b)
            h = lstm_sequence(xproj, layer.wh)
        return log_softmax(affine(h, self.out_w, self.out_b))

    def sequence_logprob(self, symbol_ids: np.ndarray) -> Tensor:
        """log p(symbols, end | start): the full chain including the end marker."""
        symbol_ids = np.asarray(symbol_ids, dtype=np.int64)
        inputs = np.concatenate([[self.end_id],
                                 [self.vocab_id(int(s)) for s in symbol_ids]])
        targets = np.concatenate([[self.vocab_id(int(s)) for s in symbol_ids],
                                  [self.end_id]]).astype(np.int64)
        lp = self.step_logprobs(inputs)
        return tensor_sum(take_along_last(lp, targets))

    # -- incremental interface for shallow fusion -----------------------------

    def start_cursor(self) -> "LmCursor":
        """State after consuming the start marker; exposes first-symbol scores."""
        return self._advance_states(None, self.end_id)

    def advance(self, cursor: "LmCursor", symbol_id: int) -> "LmCursor":
        return self._advance_states(cursor, self.vocab_id(symbol_id))

    def _advance_states(self, cursor: "LmCursor | None", vocab_id: int) -> "LmCursor":
        from .tape import no_grad

        with no_grad():
            h = _embed(self.embed, np.asarray(vocab_id, dtype=np.int64))
            states = []
            for i, layer in enumerate(self.layers):
                prev = cursor.states[i] if cursor is not None else zero_state(self.config.width)
                new = lstm_cell(h, prev, layer)
                states.append(new)
                h = new.hidden
            lp = log_softmax(affine(h, self.out_w, self.out_b))
        return LmCursor(states=states, logprobs=lp.data.copy())

    def symbol_logprob(self, cursor: "LmCursor", symbol_id: int) -> float:
        return float(cursor.logprobs[self.vocab_id(symbol_id)])

    def end_logprob(self, cursor: "LmCursor") -> float:
        return float(cursor.logprobs[self.end_id])


@dataclass
class LmCursor:
    states: list
    logprobs: np.ndarray
