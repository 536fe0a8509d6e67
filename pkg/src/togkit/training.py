"""Training loop: batch planning, schedule, optimizer, and the fit driver.

Reproducibility contract: every random draw in a batch comes from a generator
seeded with (seed, epoch, batch_index) and consumed in a fixed order, so a run
can resume mid-epoch from just (seed, global step) plus optimizer moments.
Batch composition is derived per epoch from (seed, epoch) alone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .features import (
    AugmentPolicy,
    FeatureSequence,
    SymbolTable,
    add_deltas,
    assemble_dual_input,
    build_textogram,
    sequence_noise_inject,
    spec_mask,
    speed_tempo_perturb,
    stack_and_skip,
)
from .features import Normalizer
from .tape import Parameter, Tape, add
from .transducer import transducer_loss


class TrainingError(RuntimeError):
    pass


@dataclass
class Utterance:
    utt_id: str
    text: str
    speech: FeatureSequence | None = None

    @property
    def modality(self) -> str:
        return "speech" if self.speech is not None else "text"


@dataclass
class TrainConfig:
    epochs: int = 20
    warmup_epochs: int = 6
    batch_size: int = 16
    start_lr: float = 2e-5
    max_lr: float = 2e-4
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0
    bucket_frames: int = 32
    use_text_twins: bool = True
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    debug_checks: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise TrainingError("epochs must not be negative")
        if self.epochs > 0 and not (0 < self.warmup_epochs < self.epochs):
            raise TrainingError(
                f"warmup_epochs={self.warmup_epochs} must lie strictly "
                f"inside (0, epochs={self.epochs})"
            )
        if self.batch_size < 1:
            raise TrainingError("batch_size must be at least 1")
        if self.bucket_frames < 1:
            raise TrainingError("bucket_frames must be at least 1")
        for name in ("start_lr", "max_lr", "grad_clip"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"{name} must be positive")

    def to_kv(self) -> dict[str, str]:
        aug = self.augment
        return {
            "epochs": str(self.epochs),
            "warmup_epochs": str(self.warmup_epochs),
            "batch_size": str(self.batch_size),
            "start_lr": repr(self.start_lr),
            "max_lr": repr(self.max_lr),
            "weight_decay": repr(self.weight_decay),
            "adam_beta1": repr(self.adam_beta1),
            "adam_beta2": repr(self.adam_beta2),
            "adam_epsilon": repr(self.adam_epsilon),
            "grad_clip": repr(self.grad_clip),
            "seed": str(self.seed),
            "bucket_frames": str(self.bucket_frames),
            "use_text_twins": "1" if self.use_text_twins else "0",
            "seq_noise_prob": repr(aug.seq_noise_prob),
            "seq_noise_scale": repr(aug.seq_noise_scale),
            "time_mask_count": str(aug.time_mask_count),
            "time_mask_max": str(aug.time_mask_max),
            "feature_mask_count": str(aug.feature_mask_count),
            "feature_mask_max": str(aug.feature_mask_max),
            "speed_tempo_factors": ",".join(repr(f) for f in aug.speed_tempo_factors),
            "textogram_mask_rate": repr(aug.textogram_mask_rate),
            "textogram_duration": str(aug.textogram_duration),
        }


# -- learning-rate schedule ----------------------------------------------------


def one_cycle_lr(step: int, total_steps: int, warmup_steps: int,
                 start_lr: float, max_lr: float) -> float:
    """Linear ramp start->max over the warmup, then linear decay max->0.

    Endpoint values are exact: step 0 gives start_lr, step == warmup_steps
    gives max_lr, step == total_steps gives 0.0, and the decay midpoint gives
    exactly half of max_lr, because each phase is evaluated in the
    one-products form (1 - f) * a + f * b with f a dyadic-friendly ratio.
    """
    if not (0 < warmup_steps < total_steps):
        raise TrainingError(
            f"warmup_steps={warmup_steps} must lie strictly inside "
            f"(0, total_steps={total_steps})"
        )
    if not (0 <= step <= total_steps):
        raise TrainingError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        f = step / warmup_steps
        return (1.0 - f) * start_lr + f * max_lr
    g = (step - warmup_steps) / (total_steps - warmup_steps)
    return (1.0 - g) * max_lr


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most max_norm."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                              for g in grads.values())))
    if total > max_norm:
        factor = np.float32(max_norm / total)
        for g in grads.values():
            g *= factor
    return total


def adamw_step(params: list[Parameter], grads: dict[str, np.ndarray],
               state: AdamState, lr: float, config: TrainConfig) -> None:
    """Adam with decoupled weight decay; decay touches decay-flagged weights only."""
    state.t += 1
    t = state.t
    b1 = config.adam_beta1
    b2 = config.adam_beta2
    eps = config.adam_epsilon
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[p.name] = m
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        if p.decay and config.weight_decay > 0.0:
            p.data -= np.asarray(lr * config.weight_decay * p.data,
                                 dtype=p.data.dtype)


# -- batch planning ------------------------------------------------------------


@dataclass(frozen=True)
class PlannedSample:
    utt_index: int
    kind: str       # "speech" | "text"
    factor: float   # time-scale factor for speech replicas; 1.0 for the original
    est_frames: int


def plan_samples(utterances: list[Utterance], config: TrainConfig,
                 table: SymbolTable) -> list[PlannedSample]:
    """Expand utterances into per-epoch training samples, epoch-independent."""
    samples: list[PlannedSample] = []
    for i, utt in enumerate(utterances):
        if utt.speech is not None:
            t_raw = utt.speech.frames.shape[0]
            factors = [1.0]
            for f in config.augment.speed_tempo_factors:
                factors.extend([f, f])
            for f in factors:
                t_scaled = t_raw if f == 1.0 else int(round(t_raw / f))
                samples.append(PlannedSample(
                    utt_index=i, kind="speech", factor=f,
                    est_frames=-(-t_scaled // 2),
                ))
            if config.use_text_twins and utt.text:
                samples.append(PlannedSample(
                    utt_index=i, kind="text", factor=1.0,
                    est_frames=2 * len(utt.text),
                ))
        else:
            if not utt.text:
                raise TrainingError(f"utterance {utt.utt_id!r} has neither "
                                    "speech nor text")
            samples.append(PlannedSample(
                utt_index=i, kind="text", factor=1.0,
                est_frames=2 * len(utt.text),
            ))
    return samples


def make_batches(samples: list[PlannedSample], config: TrainConfig,
                 epoch: int) -> list[list[PlannedSample]]:
    """Length-bucketed batches, shuffled within buckets and across batches.

    The partition into buckets depends only on the samples, so the number of
    batches is the same every epoch; only ordering varies with (seed, epoch).
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
    buckets: dict[int, list[PlannedSample]] = {}
    for s in samples:
        buckets.setdefault(s.est_frames // config.bucket_frames, []).append(s)
    batches: list[list[PlannedSample]] = []
    for bucket_id in sorted(buckets):
        members = buckets[bucket_id]
        order = rng.permutation(len(members))
        shuffled = [members[int(j)] for j in order]
        for lo in range(0, len(shuffled), config.batch_size):
            batches.append(shuffled[lo:lo + config.batch_size])
    batch_order = rng.permutation(len(batches))
    return [batches[int(j)] for j in batch_order]


# -- the fit driver ------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    mean_train_nll: float
    learning_rate: float
    wall_seconds: float


@dataclass
class FitResult:
    metrics: list[EpochMetrics]
    opt_state: AdamState
    total_steps: int


def build_batch_arrays(batch: list[PlannedSample], utterances: list[Utterance],
                       config: TrainConfig, table: SymbolTable,
                       normalizer: Normalizer, rng: np.random.Generator,
                       speech_width: int, text_width: int) -> list[np.ndarray]:
    """Assemble one batch into encoder-ready arrays, consuming ``rng`` in order.

    Draw order: sequence-noise decisions over the whole batch first, then the
    per-sample masking draws in batch order.
    """
    raws: list[FeatureSequence] = []
    for s in batch:
        if s.kind == "speech":
            utt = utterances[s.utt_index]
            frames = utt.speech.frames
            if s.factor != 1.0:
                frames = speed_tempo_perturb(frames, s.factor)
            raws.append(FeatureSequence(frames, utt.speech.frame_period_ms, "speech"))
        else:
            # placeholder keeps list positions aligned; text never mixes
            raws.append(FeatureSequence(np.zeros((1, 1), np.float32), 10, "text"))
    mixed = sequence_noise_inject(raws, config.augment, rng)

    arrays: list[np.ndarray] = []
    for s, seq in zip(batch, mixed):
        if s.kind == "speech":
            frames = normalizer.apply(seq.frames)
            frames = spec_mask(frames, config.augment, rng)
            stacked = stack_and_skip(add_deltas(frames))
            assembled = assemble_dual_input(
                FeatureSequence(stacked, 2 * seq.frame_period_ms, "speech"),
                None, speech_width, text_width,
            )
        else:
            utt = utterances[s.utt_index]
            gram = build_textogram(
                utt.text, table,
                duration=config.augment.textogram_duration,
                mask_rate=config.augment.textogram_mask_rate,
                rng_seed=rng,
            )
            assembled = assemble_dual_input(None, gram, speech_width, text_width)
        if config.debug_checks:
            _assert_modality_zeroing(assembled.frames, s.kind, speech_width)
        arrays.append(assembled.frames)
    return arrays


def _assert_modality_zeroing(frames: np.ndarray, kind: str, speech_width: int) -> None:
    if kind == "speech":
        if frames[:, speech_width:].any():
            raise TrainingError("speech sample has non-zero text columns")
    else:
        if frames[:, :speech_width].any():
            raise TrainingError("text sample has non-zero speech columns")


def fit_normalizer(utterances: list[Utterance]) -> Normalizer:
    frames = [u.speech.frames for u in utterances if u.speech is not None]
    if not frames:
        raise TrainingError("cannot fit a normalizer without speech utterances")
    return Normalizer.fit(frames)


def fit(model, utterances: list[Utterance], config: TrainConfig, *,
        resume_step: int = 0, opt_state: AdamState | None = None,
        trainable: list[Parameter] | None = None,
        stop_after_steps: int | None = None,
        extra_batch_loss=None,
        status=None, on_epoch=None) -> FitResult:
    """Train ``model`` in place; returns per-epoch metrics and optimizer state.

    ``resume_step`` is the global step to start from (steps already taken);
    passing the saved optimizer state alongside reproduces an uninterrupted
    run bit for bit, because batch plans and random draws depend only on
    (seed, epoch, batch index). ``stop_after_steps`` ends the run once that
    many global steps exist, even mid-epoch; the partial epoch still yields a
    metrics row covering the steps it ran.

    ``extra_batch_loss(batch, h_preds, label_lists)`` may return an extra
    scalar added onto the batch objective (or None for no addition). Passing
    None leaves the step computation byte-for-byte identical to a run without
    the hook. The reported mean_train_nll covers the transducer term only.
    """
    if not utterances:
        raise TrainingError("no utterances to train on")
    table = model.config.symbol_table
    params = model.parameters() if trainable is None else trainable
    if model.normalizer is None:
        model.normalizer = fit_normalizer(utterances)
    samples = plan_samples(utterances, config, table)
    batches_per_epoch = len(make_batches(samples, config, epoch=0))
    total_steps = config.epochs * batches_per_epoch
    if resume_step < 0 or resume_step > total_steps:
        raise TrainingError(f"resume step {resume_step} outside [0, {total_steps}]")
    state = opt_state if opt_state is not None else AdamState()

    if stop_after_steps is not None and not (resume_step < stop_after_steps <= total_steps):
        raise TrainingError(
            f"stop_after_steps {stop_after_steps} outside ({resume_step}, {total_steps}]"
        )

    metrics: list[EpochMetrics] = []
    step = resume_step
    start_epoch = resume_step // batches_per_epoch
    stopped = False
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        batches = make_batches(samples, config, epoch)
        nll_sum = 0.0
        label_count = 0
        lr = 0.0
        for batch_idx in range(step % batches_per_epoch if epoch == start_epoch else 0,
                               len(batches)):
            if stop_after_steps is not None and step == stop_after_steps:
                stopped = True
                break
            batch = batches[batch_idx]
            rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, epoch, batch_idx])
            )
            arrays = build_batch_arrays(
                batch, utterances, config, table, model.normalizer, rng,
                model.config.speech_width, model.config.text_width,
            )
            label_lists = [table.encode(utterances[s.utt_index].text) for s in batch]

            for p in params:
                p.zero_grad()
            with Tape() as tape:
                h_encs = model.encode_batch(arrays)
                h_preds = model.predict_batch(label_lists)
                total = None
                for h_enc, h_pred, labels in zip(h_encs, h_preds, label_lists):
                    lat = model.joint_lattice(h_enc, h_pred)
                    item = transducer_loss(lat, labels)
                    nll_sum += float(item.data)
                    label_count += max(1, labels.size)
                    total = item if total is None else add(total, item)
                if extra_batch_loss is not None:
                    extra = extra_batch_loss(batch, h_preds, label_lists)
                    if extra is not None:
                        total = add(total, extra)
                tape.backward(total)
            grads = {p.name: p.grad for p in params}
            clip_gradients(grads, config.grad_clip)
            lr = one_cycle_lr(step, total_steps, config.warmup_epochs * batches_per_epoch,
                              config.start_lr, config.max_lr)
            adamw_step(params, grads, state, lr, config)
            step += 1

        row = EpochMetrics(
            epoch=epoch,
            mean_train_nll=nll_sum / max(1, label_count),
            learning_rate=lr,
            wall_seconds=time.perf_counter() - t0,
        )
        metrics.append(row)
        if status is not None:
            status(f"epoch {row.epoch}: nll/label {row.mean_train_nll:.4f} "
                   f"lr {row.learning_rate:.2e} ({row.wall_seconds:.1f}s)")
        if on_epoch is not None:
            on_epoch(row, state, step)
        if stopped:
            break
    return FitResult(metrics=metrics, opt_state=state, total_steps=total_steps)


# -- external language model training --------------------------------------------


@dataclass
class LmTrainConfig:
    epochs: int = 40
    warmup_epochs: int = 6
    batch_size: int = 16
    start_lr: float = 1e-4
    max_lr: float = 5e-3
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be at least 1")
        if not (0 < self.warmup_epochs < self.epochs):
            raise TrainingError(
                f"warmup_epochs={self.warmup_epochs} must lie strictly "
                f"inside (0, epochs={self.epochs})"
            )
        if self.batch_size < 1:
            raise TrainingError("batch_size must be at least 1")
        for name in ("start_lr", "max_lr", "grad_clip"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"{name} must be positive")

    def to_kv(self) -> dict[str, str]:
        return {
            "epochs": str(self.epochs),
            "warmup_epochs": str(self.warmup_epochs),
            "batch_size": str(self.batch_size),
            "start_lr": repr(self.start_lr),
            "max_lr": repr(self.max_lr),
            "weight_decay": repr(self.weight_decay),
            "adam_beta1": repr(self.adam_beta1),
            "adam_beta2": repr(self.adam_beta2),
            "adam_epsilon": repr(self.adam_epsilon),
            "grad_clip": repr(self.grad_clip),
            "seed": str(self.seed),
        }


def lm_cross_entropy(lm, texts: list[str]) -> float:
    """Mean per-token negative log-likelihood, counting the end marker."""
    from .tape import no_grad

    if not texts:
        raise TrainingError("no texts to evaluate")
    table = SymbolTable(lm.config.alphabet)
    total = 0.0
    tokens = 0
    with no_grad():
        for text in texts:
            ids = table.encode(text)
            total -= float(lm.sequence_logprob(ids).data)
            tokens += ids.size + 1
    return total / tokens


def train_external_lm(lm, texts: list[str], config: LmTrainConfig | None = None,
                      *, status=None) -> list[EpochMetrics]:
    """Teacher-forced cross-entropy training; marks the model trained on return.

    Shuffle order depends only on (seed, epoch), so reruns with the same
    inputs reproduce the final parameters bit for bit.
    """
    from .tape import scale

    config = config if config is not None else LmTrainConfig()
    if not texts:
        raise TrainingError("no texts to train the language model on")
    table = SymbolTable(lm.config.alphabet)
    encoded = [table.encode(t) for t in texts]
    params = lm.parameters()
    state = AdamState()
    batches_per_epoch = (len(encoded) + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * batches_per_epoch
    step = 0
    metrics: list[EpochMetrics] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(
            np.random.SeedSequence([config.seed, epoch])).permutation(len(encoded))
        nll_sum = 0.0
        tokens = 0
        lr = 0.0
        for batch_idx in range(batches_per_epoch):
            chunk = order[batch_idx * config.batch_size:
                          (batch_idx + 1) * config.batch_size]
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                total = None
                for idx in chunk:
                    item = scale(lm.sequence_logprob(encoded[idx]), -1.0)
                    nll_sum += float(item.data)
                    tokens += encoded[idx].size + 1
                    total = item if total is None else add(total, item)
                tape.backward(total)
            grads = {p.name: p.grad for p in params}
            clip_gradients(grads, config.grad_clip)
            lr = one_cycle_lr(step, total_steps,
                              config.warmup_epochs * batches_per_epoch,
                              config.start_lr, config.max_lr)
            adamw_step(params, grads, state, lr, config)
            step += 1
        row = EpochMetrics(
            epoch=epoch,
            mean_train_nll=nll_sum / max(1, tokens),
            learning_rate=lr,
            wall_seconds=time.perf_counter() - t0,
        )
        metrics.append(row)
        if status is not None:
            status(f"epoch {row.epoch}: nll/token {row.mean_train_nll:.4f} "
                   f"lr {row.learning_rate:.2e} ({row.wall_seconds:.1f}s)")
    lm.trained = True
    return metrics


# -- metrics file --------------------------------------------------------------


METRICS_HEADER = "epoch\tmean_train_nll\tlearning_rate\twall_seconds"


def write_metrics(path: str, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in metrics:
            fh.write(f"{row.epoch}\t{row.mean_train_nll:.6f}\t"
                     f"{row.learning_rate:.8e}\t{row.wall_seconds:.3f}\n")


def read_metrics(path: str) -> list[EpochMetrics]:
    rows: list[EpochMetrics] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise TrainingError(f"unexpected metrics header {header!r}")
        for line in fh:
            epoch, nll, lr, wall = line.rstrip("\n").split("\t")
            rows.append(EpochMetrics(int(epoch), float(nll), float(lr), float(wall)))
    return rows
