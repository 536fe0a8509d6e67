"""Text-only domain adaptation of a trained dual-modality transducer.

Four modes share one contract: the encoder is never updated.

* ``tog-p`` / ``tog-pj`` re-train the prediction network (and for -pj the
  joint) on textogram renderings of new-domain sentences with the ordinary
  transducer loss.
* ``nnlm`` treats the prediction network as a language model through the
  next-symbol head: cross-entropy on the new texts plus a KL pull toward the
  base model's distributions and an L2 pull toward the base weights. The
  head, joint, and encoder stay fixed.
* ``tog-p+nnlm`` runs tog-p and adds ``nnlm_loss_weight`` times the nnlm
  objective on the same texts. A weight of exactly 0 takes the same code
  path as tog-p, so the trajectories match bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .features import AugmentPolicy, SymbolTable
from .tape import (
    Parameter,
    Tape,
    add,
    constant,
    exp,
    multiply,
    no_grad,
    scale,
    take_along_last,
    tensor_sum,
)
from .training import (
    AdamState,
    EpochMetrics,
    TrainConfig,
    Utterance,
    adamw_step,
    clip_gradients,
    fit,
    make_batches,
    one_cycle_lr,
    plan_samples,
)

MODES = ("nnlm", "tog-p", "tog-pj", "tog-p+nnlm")

PARAMETER_GROUPS = {
    "prediction": "pred.",
    "joint": "joint.",
    "nnlm-head": "nnlm.",
}


class AdaptationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FreezePolicy:
    """Which parameter groups adaptation may update; everything else is frozen."""

    trainable_groups: tuple[str, ...]

    def __post_init__(self):
        if not self.trainable_groups:
            raise AdaptationError("freeze policy must leave something trainable")
        for group in self.trainable_groups:
            if group == "encoder":
                raise AdaptationError("the encoder is always frozen during adaptation")
            if group not in PARAMETER_GROUPS:
                raise AdaptationError(
                    f"unknown parameter group {group!r}; "
                    f"choose from {sorted(PARAMETER_GROUPS)}"
                )

    def select(self, model) -> list[Parameter]:
        prefixes = tuple(PARAMETER_GROUPS[g] for g in self.trainable_groups)
        chosen = [p for p in model.parameters() if p.name.startswith(prefixes)]
        if not chosen:
            raise AdaptationError(
                f"no parameters matched groups {self.trainable_groups}"
            )
        return chosen


def policy_for_mode(mode: str) -> FreezePolicy:
    if mode in ("tog-p", "tog-p+nnlm", "nnlm"):
        return FreezePolicy(("prediction",))
    if mode == "tog-pj":
        return FreezePolicy(("prediction", "joint"))
    raise AdaptationError(f"unknown adaptation mode {mode!r}; choose from {MODES}")


@dataclass
class AdaptConfig:
    mode: str = "tog-p"
    epochs: int = 20
    warmup_epochs: int = 6
    batch_size: int = 16
    start_lr: float = 2e-5
    max_lr: float = 2e-4
    weight_decay: float = 1e-2
    grad_clip: float = 5.0
    nnlm_loss_weight: float = 2e2
    kl_weight: float = 1.0
    l2_weight: float = 0.01
    textogram_mask_rate: float = 0.25
    textogram_duration: int = 4
    seed: int = 0
    bucket_frames: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise AdaptationError(
                f"unknown adaptation mode {self.mode!r}; choose from {MODES}"
            )
        for name in ("nnlm_loss_weight", "kl_weight", "l2_weight"):
            if getattr(self, name) < 0:
                raise AdaptationError(f"{name} must not be negative")
        # the remaining fields share the training loop's constraints; building
        # the equivalent TrainConfig validates them once, right here
        self._train_config()

    def _train_config(self, weight_decay: float | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size,
            start_lr=self.start_lr,
            max_lr=self.max_lr,
            weight_decay=self.weight_decay if weight_decay is None else weight_decay,
            grad_clip=self.grad_clip,
            seed=self.seed,
            bucket_frames=self.bucket_frames,
            use_text_twins=False,
            augment=AugmentPolicy(
                textogram_mask_rate=self.textogram_mask_rate,
                textogram_duration=self.textogram_duration,
            ),
        )

    def to_kv(self) -> dict[str, str]:
        return {
            "mode": self.mode,
            "epochs": str(self.epochs),
            "warmup_epochs": str(self.warmup_epochs),
            "batch_size": str(self.batch_size),
            "start_lr": repr(self.start_lr),
            "max_lr": repr(self.max_lr),
            "weight_decay": repr(self.weight_decay),
            "grad_clip": repr(self.grad_clip),
            "nnlm_loss_weight": repr(self.nnlm_loss_weight),
            "kl_weight": repr(self.kl_weight),
            "l2_weight": repr(self.l2_weight),
            "textogram_mask_rate": repr(self.textogram_mask_rate),
            "textogram_duration": str(self.textogram_duration),
            "seed": str(self.seed),
            "bucket_frames": str(self.bucket_frames),
        }


# -- text handling ---------------------------------------------------------


def load_adaptation_texts(path: str) -> list[str]:
    """One sentence per line, lowercased to match the alphabet's case."""
    texts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            stripped = line.strip().lower()
            if stripped:
                texts.append(stripped)
    if not texts:
        raise AdaptationError(f"no adaptation texts in {path}")
    return texts


def validate_texts(texts: list[str], table: SymbolTable) -> None:
    """Reject out-of-alphabet graphemes, listing every offender."""
    if not texts:
        raise AdaptationError("adaptation needs at least one text")
    offenders: set[str] = set()
    first_line = None
    for i, text in enumerate(texts):
        bad = {ch for ch in text if ch not in table.symbols}
        if bad and first_line is None:
            first_line = i + 1
        offenders |= bad
    if offenders:
        shown = ", ".join(repr(ch) for ch in sorted(offenders))
        raise AdaptationError(
            f"adaptation text contains graphemes outside the alphabet: {shown} "
            f"(first offending line {first_line})"
        )


# -- shared language-model-style objective over the prediction network ------


def _head_targets(labels: np.ndarray, alphabet_size: int) -> np.ndarray:
    # head columns: symbol id k sits at k-1; the final column is sentence end
    return np.append(labels - 1, alphabet_size - 1).astype(np.int64)


def head_cross_entropy(model, texts: list[str]) -> float:
    """Per-token cross-entropy of the next-symbol head over ``texts``."""
    table = model.config.symbol_table
    validate_texts(texts, table)
    total = 0.0
    tokens = 0
    with no_grad():
        for text in texts:
            labels = table.encode(text)
            lp = model.nnlm_head_forward(model.predict(labels))
            targets = _head_targets(labels, model.config.alphabet_size)
            total -= float(lp.data[np.arange(targets.size), targets].sum())
            tokens += targets.size
    return total / tokens


def _base_head_logprobs(model, label_cache: list[np.ndarray]) -> list[np.ndarray]:
    anchors = []
    with no_grad():
        for labels in label_cache:
            lp = model.nnlm_head_forward(model.predict(labels))
            anchors.append(lp.data.copy())
    return anchors


def _nnlm_bundle(model, h_preds, label_lists, utt_indices, base_lp,
                 kl_weight: float, l2_weight: float,
                 l2_params: list[Parameter] | None,
                 l2_anchor: dict[str, np.ndarray] | None):
    """CE + kl·KL + l2·L2 for one batch; CE and KL are per-token means."""
    k = model.config.alphabet_size
    ce = None
    kl = None
    tokens = 0
    for h_pred, labels, ui in zip(h_preds, label_lists, utt_indices):
        lp = model.nnlm_head_forward(h_pred)
        targets = _head_targets(labels, k)
        tokens += targets.size
        picked = scale(tensor_sum(take_along_last(lp, targets)), -1.0)
        ce = picked if ce is None else add(ce, picked)
        if kl_weight > 0.0:
            gap = add(lp, constant(-base_lp[ui]))
            term = tensor_sum(multiply(exp(lp), gap))
            kl = term if kl is None else add(kl, term)
    objective = scale(ce, 1.0 / tokens)
    if kl is not None:
        objective = add(objective, scale(kl, kl_weight / tokens))
    if l2_weight > 0.0 and l2_params:
        reg = None
        for p in l2_params:
            diff = add(p, constant(-l2_anchor[p.name]))
            sq = tensor_sum(multiply(diff, diff))
            reg = sq if reg is None else add(reg, sq)
        objective = add(objective, scale(reg, l2_weight))
    return objective, tokens


def _fit_head_objective(model, texts: list[str], params: list[Parameter],
                        config: AdaptConfig, *, kl_weight: float,
                        l2_weight: float, status=None,
                        on_epoch=None) -> list[EpochMetrics]:
    """Shared loop for head training and nnlm adaptation.

    Weight decay is off here: pulling weights toward zero would fight the
    explicit pull toward the base model that the L2 term expresses.
    """
    table = model.config.symbol_table
    validate_texts(texts, table)
    label_cache = [table.encode(t) for t in texts]
    utts = [Utterance(f"text-{i:05d}", t) for i, t in enumerate(texts)]
    bc = config._train_config(weight_decay=0.0)
    samples = plan_samples(utts, bc, table)
    batches_per_epoch = len(make_batches(samples, bc, 0))
    total_steps = config.epochs * batches_per_epoch
    warmup_steps = config.warmup_epochs * batches_per_epoch

    base_lp = _base_head_logprobs(model, label_cache) if kl_weight > 0.0 else None
    l2_anchor = ({p.name: p.data.copy() for p in params}
                 if l2_weight > 0.0 else None)

    state = AdamState()
    metrics: list[EpochMetrics] = []
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        objective_sum = 0.0
        token_count = 0
        lr = 0.0
        for batch in make_batches(samples, bc, epoch):
            label_lists = [label_cache[s.utt_index] for s in batch]
            utt_indices = [s.utt_index for s in batch]
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                h_preds = model.predict_batch(label_lists)
                objective, tokens = _nnlm_bundle(
                    model, h_preds, label_lists, utt_indices, base_lp,
                    kl_weight, l2_weight, params, l2_anchor,
                )
                tape.backward(objective)
            objective_sum += float(objective.data) * tokens
            token_count += tokens
            grads = {p.name: p.grad for p in params}
            clip_gradients(grads, config.grad_clip)
            lr = one_cycle_lr(step, total_steps, warmup_steps,
                              config.start_lr, config.max_lr)
            adamw_step(params, grads, state, lr, bc)
            step += 1
        row = EpochMetrics(
            epoch=epoch,
            mean_train_nll=objective_sum / max(1, token_count),
            learning_rate=lr,
            wall_seconds=time.perf_counter() - t0,
        )
        metrics.append(row)
        if status is not None:
            status(f"epoch {row.epoch}: objective/token {row.mean_train_nll:.4f} "
                   f"lr {row.learning_rate:.2e} ({row.wall_seconds:.1f}s)")
        if on_epoch is not None:
            on_epoch(row)
    return metrics


# -- the four adaptation entry points ----------------------------------------


def train_lm_head(model, transcripts: list[str], *,
                  dev_transcripts: list[str] | None = None,
                  config: AdaptConfig | None = None,
                  status=None, on_epoch=None) -> float:
    """Attach (if needed) and train the next-symbol head; everything else frozen.

    Returns the per-token cross-entropy on ``dev_transcripts`` (the training
    transcripts when no separate dev set is given).
    """
    if not transcripts:
        raise AdaptationError("cannot train the next-symbol head on zero transcripts")
    if config is None:
        config = AdaptConfig(mode="nnlm")
    model.attach_nnlm_head()
    params = FreezePolicy(("nnlm-head",)).select(model)
    _fit_head_objective(model, transcripts, params, config,
                        kl_weight=0.0, l2_weight=0.0,
                        status=status, on_epoch=on_epoch)
    return head_cross_entropy(model, dev_transcripts or transcripts)


def nnlm_adapt(model, texts: list[str], config: AdaptConfig, *,
               status=None, on_epoch=None) -> list[EpochMetrics]:
    """Adapt the prediction network as a language model; head stays fixed."""
    if not model.has_nnlm_head:
        raise AdaptationError(
            "nnlm adaptation needs a trained next-symbol head; "
            "run train_lm_head on base transcripts first"
        )
    params = FreezePolicy(("prediction",)).select(model)
    return _fit_head_objective(model, texts, params, config,
                               kl_weight=config.kl_weight,
                               l2_weight=config.l2_weight,
                               status=status, on_epoch=on_epoch)


def _check_tog_preconditions(model, texts: list[str]) -> None:
    validate_texts(texts, model.config.symbol_table)
    if model.config.text_width == 0:
        raise AdaptationError(
            "model was built without text input columns; "
            "textogram adaptation needs a dual-modality model"
        )
    if model.normalizer is None:
        raise AdaptationError(
            "model carries no normalization statistics; train it on speech first"
        )


def tog_adapt(model, texts: list[str], policy: FreezePolicy,
              config: AdaptConfig, *, extra_batch_loss=None,
              status=None, on_epoch=None) -> list[EpochMetrics]:
    """Transducer-loss adaptation on textogram renderings of ``texts``."""
    _check_tog_preconditions(model, texts)
    utts = [Utterance(f"adapt-{i:05d}", t) for i, t in enumerate(texts)]
    trainable = policy.select(model)
    result = fit(
        model, utts, config._train_config(),
        trainable=trainable,
        extra_batch_loss=extra_batch_loss,
        status=status,
        on_epoch=(lambda row, state, step: on_epoch(row)) if on_epoch else None,
    )
    return result.metrics


def tog_plus_nnlm_adapt(model, texts: list[str], config: AdaptConfig, *,
                        status=None, on_epoch=None) -> list[EpochMetrics]:
    """tog-p plus ``nnlm_loss_weight`` times the nnlm objective per batch."""
    weight = config.nnlm_loss_weight
    hook = None
    if weight > 0.0:
        if not model.has_nnlm_head:
            raise AdaptationError(
                "combined adaptation needs a trained next-symbol head; "
                "run train_lm_head on base transcripts first"
            )
        _check_tog_preconditions(model, texts)
        table = model.config.symbol_table
        label_cache = [table.encode(t) for t in texts]
        base_lp = _base_head_logprobs(model, label_cache)
        params = FreezePolicy(("prediction",)).select(model)
        l2_anchor = {p.name: p.data.copy() for p in params}

        def hook(batch, h_preds, label_lists):
            bundle, _ = _nnlm_bundle(
                model, h_preds, label_lists,
                [s.utt_index for s in batch], base_lp,
                config.kl_weight, config.l2_weight, params, l2_anchor,
            )
            return scale(bundle, weight)

    return tog_adapt(model, texts, FreezePolicy(("prediction",)), config,
                     extra_batch_loss=hook, status=status, on_epoch=on_epoch)


def adapt(model, texts: list[str], config: AdaptConfig, *,
          status=None, on_epoch=None) -> list[EpochMetrics]:
    """Dispatch on ``config.mode``; returns per-epoch metrics."""
    if config.mode == "nnlm":
        return nnlm_adapt(model, texts, config, status=status, on_epoch=on_epoch)
    if config.mode == "tog-p+nnlm":
        return tog_plus_nnlm_adapt(model, texts, config,
                                   status=status, on_epoch=on_epoch)
    return tog_adapt(model, texts, policy_for_mode(config.mode), config,
                     status=status, on_epoch=on_epoch)
