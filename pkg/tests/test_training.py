import numpy as np
import pytest

from togkit.checkpoint import save_model
from togkit.features import AugmentPolicy, FeatureSequence, SymbolTable
from togkit.model import ModelConfig, TransducerModel
from togkit.tape import Parameter
from togkit.training import (
    AdamState,
    EpochMetrics,
    TrainConfig,
    TrainingError,
    Utterance,
    adamw_step,
    build_batch_arrays,
    clip_gradients,
    fit,
    fit_normalizer,
    make_batches,
    one_cycle_lr,
    plan_samples,
    read_metrics,
    write_metrics,
)

TABLE = SymbolTable(("<b>", "a", "b", "c"))

TINY_CFG = ModelConfig(
    alphabet=TABLE.symbols,
    encoder_layers=1,
    encoder_width=4,
    prediction_width=8,
    joint_width=4,
    speech_width=12,   # 2 raw channels -> 6 with deltas -> 12 stacked
    text_width=8,
)


def tiny_utts(n=6, seed=0, text_only=0):
    rng = np.random.default_rng(seed)
    texts = ["abc", "cab", "bca", "aabb", "cc", "bac"]
    utts = []
    for i in range(n):
        frames = rng.normal(size=(int(rng.integers(16, 40)), 2)).astype(np.float32)
        utts.append(Utterance(
            utt_id=f"u{i}", text=texts[i % len(texts)],
            speech=FeatureSequence(frames, 10, "speech"),
        ))
    for j in range(text_only):
        utts.append(Utterance(utt_id=f"t{j}", text=texts[j % len(texts)]))
    return utts


def quick_config(**kw):
    defaults = dict(epochs=2, warmup_epochs=1, batch_size=4, seed=5,
                    augment=AugmentPolicy(time_mask_max=3, feature_mask_max=2))
    defaults.update(kw)
    return TrainConfig(**defaults)


# -- schedule --------------------------------------------------------------


def test_one_cycle_endpoints_are_exact():
    S = 37  # steps per epoch; 20 epochs with warmup 6
    total, warm = 20 * S, 6 * S
    assert one_cycle_lr(0, total, warm, 2e-5, 2e-4) == 2e-5
    assert one_cycle_lr(warm, total, warm, 2e-5, 2e-4) == 2e-4
    assert one_cycle_lr(13 * S, total, warm, 2e-5, 2e-4) == 1e-4
    assert one_cycle_lr(total, total, warm, 2e-5, 2e-4) == 0.0


def test_one_cycle_piecewise_linear_monotone():
    total, warm = 100, 30
    lrs = [one_cycle_lr(s, total, warm, 1e-5, 1e-3) for s in range(total + 1)]
    ramp, decay = lrs[:warm + 1], lrs[warm:]
    assert all(a < b for a, b in zip(ramp, ramp[1:]))
    assert all(a > b for a, b in zip(decay, decay[1:]))


def test_one_cycle_rejects_bad_arguments():
    with pytest.raises(TrainingError, match="outside"):
        one_cycle_lr(101, 100, 30, 1e-5, 1e-3)
    with pytest.raises(TrainingError, match="warmup"):
        one_cycle_lr(0, 100, 100, 1e-5, 1e-3)
    with pytest.raises(TrainingError, match="warmup"):
        one_cycle_lr(0, 100, 0, 1e-5, 1e-3)


# -- optimizer --------------------------------------------------------------


def test_adamw_zero_gradient_applies_pure_decay():
    w = Parameter("w", np.full(3, 2.0, np.float32))
    b = Parameter("b", np.full(3, 2.0, np.float32), decay=False)
    cfg = quick_config(weight_decay=0.01)
    state = AdamState()
    grads = {"w": np.zeros(3, np.float32), "b": np.zeros(3, np.float32)}
    adamw_step([w, b], grads, state, lr=0.5, config=cfg)
    np.testing.assert_array_equal(w.data, np.full(3, np.float32(2.0) - np.float32(0.5 * 0.01 * 2.0)))
    np.testing.assert_array_equal(b.data, np.full(3, 2.0, np.float32))
    assert state.t == 1


def test_adamw_first_step_moves_by_learning_rate():
    # with bias correction, any constant gradient gives a first step of ~lr
    w = Parameter("w", np.zeros(4, np.float32))
    cfg = quick_config(weight_decay=0.0)
    state = AdamState()
    adamw_step([w], {"w": np.full(4, 3.0, np.float32)}, state, lr=0.1, config=cfg)
    np.testing.assert_allclose(w.data, -0.1, rtol=1e-5)


def test_adamw_missing_gradient_treated_as_zero():
    w = Parameter("w", np.ones(2, np.float32))
    cfg = quick_config(weight_decay=0.0)
    adamw_step([w], {}, AdamState(), lr=0.1, config=cfg)
    np.testing.assert_array_equal(w.data, np.ones(2, np.float32))


def test_clip_rescales_only_above_threshold():
    g1 = np.array([3.0, 4.0], np.float32)        # norm 5
    grads = {"a": g1.copy()}
    norm = clip_gradients(grads, 10.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_array_equal(grads["a"], g1)
    norm = clip_gradients(grads, 1.0)
    np.testing.assert_allclose(np.linalg.norm(grads["a"]), 1.0, rtol=1e-6)


def test_clip_rejects_non_finite_naming_the_parameter():
    with pytest.raises(TrainingError, match="enc.0.fwd.wx"):
        clip_gradients({"enc.0.fwd.wx": np.array([np.nan])}, 5.0)
    with pytest.raises(TrainingError, match="joint.out.w"):
        clip_gradients({"joint.out.w": np.array([np.inf])}, 5.0)


# -- batch planning -----------------------------------------------------------


def test_plan_expands_replicas_and_twins():
    utts = tiny_utts(n=2, text_only=1)
    cfg = quick_config()
    samples = plan_samples(utts, cfg, TABLE)
    # per speech utterance: original + two replicas per factor, plus the twin
    per_speech = 1 + 2 * len(cfg.augment.speed_tempo_factors) + 1
    assert len(samples) == 2 * per_speech + 1
    kinds = [s.kind for s in samples if s.utt_index == 0]
    assert kinds.count("speech") == 5 and kinds.count("text") == 1


def test_plan_without_twins_or_factors():
    utts = tiny_utts(n=2)
    cfg = quick_config(use_text_twins=False,
                       augment=AugmentPolicy(speed_tempo_factors=()))
    samples = plan_samples(utts, cfg, TABLE)
    assert len(samples) == 2
    assert all(s.kind == "speech" and s.factor == 1.0 for s in samples)


def test_make_batches_is_deterministic_and_bucketed():
    utts = tiny_utts(n=8)
    cfg = quick_config(bucket_frames=8)
    samples = plan_samples(utts, cfg, TABLE)
    b1 = make_batches(samples, cfg, epoch=3)
    b2 = make_batches(samples, cfg, epoch=3)
    assert b1 == b2
    assert b1 != make_batches(samples, cfg, epoch=4)
    assert len(b1) == len(make_batches(samples, cfg, epoch=9))
    for batch in b1:
        assert 1 <= len(batch) <= cfg.batch_size
        buckets = {s.est_frames // cfg.bucket_frames for s in batch}
        assert len(buckets) == 1, "batch mixes length buckets"
    total = sum(len(b) for b in b1)
    assert total == len(samples)


def test_batch_arrays_keep_unused_modality_at_zero():
    utts = tiny_utts(n=4, text_only=1)
    cfg = quick_config(debug_checks=True)
    samples = plan_samples(utts, cfg, TABLE)
    norm = fit_normalizer(utts)
    batch = [s for s in samples if s.kind == "speech"][:2] + \
            [s for s in samples if s.kind == "text"][:2]
    rng = np.random.default_rng(0)
    arrays = build_batch_arrays(batch, utts, cfg, TABLE, norm, rng, 12, 8)
    assert all(a.shape[1] == 20 for a in arrays)
    assert not arrays[0][:, 12:].any() and not arrays[1][:, 12:].any()
    assert not arrays[2][:, :12].any() and not arrays[3][:, :12].any()
    assert arrays[2][:, 12:].any()


# -- fit ------------------------------------------------------------------------


def test_fit_runs_and_reports_metrics():
    model = TransducerModel(TINY_CFG, seed=1)
    utts = tiny_utts(n=6, text_only=2)
    cfg = quick_config(epochs=3, warmup_epochs=1, debug_checks=True)
    before = {p.name: p.data.copy() for p in model.parameters()}
    result = fit(model, utts, cfg)
    assert [m.epoch for m in result.metrics] == [0, 1, 2]
    assert all(np.isfinite(m.mean_train_nll) for m in result.metrics)
    assert result.opt_state.t == result.total_steps
    moved = sum(not np.array_equal(before[p.name], p.data) for p in model.parameters())
    assert moved == len(before)
    assert model.normalizer is not None


def test_fit_zero_epochs_is_a_no_op():
    model = TransducerModel(TINY_CFG, seed=1)
    before = {p.name: p.data.copy() for p in model.parameters()}
    result = fit(model, tiny_utts(), TrainConfig(epochs=0, seed=9))
    assert result.metrics == [] and result.total_steps == 0
    for p in model.parameters():
        np.testing.assert_array_equal(before[p.name], p.data)


def test_fit_reduces_training_loss():
    model = TransducerModel(TINY_CFG, seed=2)
    utts = tiny_utts(n=10, seed=3)
    cfg = quick_config(epochs=8, warmup_epochs=2, batch_size=8, seed=7,
                       augment=AugmentPolicy(seq_noise_prob=0.0,
                                             time_mask_max=2, feature_mask_max=1,
                                             speed_tempo_factors=()))
    result = fit(model, utts, cfg)
    assert result.metrics[-1].mean_train_nll < result.metrics[0].mean_train_nll


def test_fit_is_deterministic_across_runs(tmp_path):
    files = []
    for run in ("a", "b"):
        model = TransducerModel(TINY_CFG, seed=4)
        result = fit(model, tiny_utts(n=5, text_only=1), quick_config())
        path = tmp_path / f"{run}.togm"
        save_model(str(path), model, extra_arrays=[
            (f"opt.m.{k}", v) for k, v in sorted(result.opt_state.m.items())
        ])
        files.append(path.read_bytes())
        assert [m.mean_train_nll for m in result.metrics] == \
            [m.mean_train_nll for m in result.metrics]
    assert files[0] == files[1]


def test_fit_resume_matches_uninterrupted_run():
    utts = tiny_utts(n=5, text_only=1)
    cfg = quick_config(epochs=3, warmup_epochs=1)

    straight = TransducerModel(TINY_CFG, seed=6)
    full = fit(straight, utts, cfg)

    # halt inside epoch 1, then resume with the saved optimizer moments
    halt = full.total_steps // cfg.epochs + 1
    resumed = TransducerModel(TINY_CFG, seed=6)
    part = fit(resumed, utts, cfg, stop_after_steps=halt)
    rest = fit(resumed, utts, cfg, resume_step=halt, opt_state=part.opt_state)
    assert rest.opt_state.t == full.total_steps
    for p_a, p_b in zip(straight.parameters(), resumed.parameters()):
        assert p_a.data.tobytes() == p_b.data.tobytes(), p_a.name
    for name, moment in rest.opt_state.m.items():
        np.testing.assert_array_equal(moment, full.opt_state.m[name])


def test_fit_trainable_subset_leaves_rest_untouched():
    model = TransducerModel(TINY_CFG, seed=8)
    utts = tiny_utts(n=4)
    frozen = {p.name: p.data.copy() for p in model.parameters()
              if p.name.startswith("enc.")}
    trainable = [p for p in model.parameters() if not p.name.startswith("enc.")]
    fit(model, utts, quick_config(epochs=2), trainable=trainable)
    for p in model.parameters():
        if p.name.startswith("enc."):
            assert p.data.tobytes() == frozen[p.name].tobytes(), p.name
        else:
            assert not np.array_equal(p.data, frozen.get(p.name, p.data + 1))


def test_fit_argument_validation():
    model = TransducerModel(TINY_CFG, seed=1)
    with pytest.raises(TrainingError, match="no utterances"):
        fit(model, [], quick_config())
    with pytest.raises(TrainingError, match="resume step"):
        fit(model, tiny_utts(n=2), quick_config(), resume_step=10_000)
    with pytest.raises(TrainingError, match="stop_after_steps"):
        fit(model, tiny_utts(n=2), quick_config(), stop_after_steps=10_000)
    with pytest.raises(TrainingError, match="neither"):
        plan_samples([Utterance("x", "", None)], quick_config(), TABLE)


def test_train_config_validation():
    with pytest.raises(TrainingError, match="warmup"):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(TrainingError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(TrainingError, match="max_lr"):
        TrainConfig(max_lr=0.0)


def test_metrics_file_round_trip(tmp_path):
    rows = [EpochMetrics(0, 3.25, 2e-5, 1.5), EpochMetrics(1, 2.5, 1.9e-4, 1.25)]
    path = tmp_path / "metrics.tsv"
    write_metrics(str(path), rows)
    back = read_metrics(str(path))
    assert [r.epoch for r in back] == [0, 1]
    assert back[0].mean_train_nll == pytest.approx(3.25)
    assert back[1].learning_rate == pytest.approx(1.9e-4)
    path.write_text("bad header\n")
    with pytest.raises(TrainingError, match="header"):
        read_metrics(str(path))


# -- external language model training ------------------------------------------


def test_lm_train_config_validation():
    from togkit.training import LmTrainConfig

    with pytest.raises(TrainingError, match="warmup"):
        LmTrainConfig(epochs=4, warmup_epochs=4)
    with pytest.raises(TrainingError, match="epochs"):
        LmTrainConfig(epochs=0)
    with pytest.raises(TrainingError, match="max_lr"):
        LmTrainConfig(max_lr=-1.0)


def test_train_external_lm_learns_a_repeated_sentence():
    from togkit.model import ExternalLm, LmConfig
    from togkit.training import LmTrainConfig, lm_cross_entropy, train_external_lm

    lm = ExternalLm(LmConfig(alphabet=TABLE.symbols, width=16, layers=1), seed=0)
    texts = ["abc"] * 8
    before = lm_cross_entropy(lm, ["abc"])
    metrics = train_external_lm(
        lm, texts,
        LmTrainConfig(epochs=60, warmup_epochs=6, batch_size=8, max_lr=2e-2,
                      seed=3),
    )
    after = lm_cross_entropy(lm, ["abc"])
    assert lm.trained
    assert len(metrics) == 60
    assert after < before
    assert after < 0.2


def test_train_external_lm_is_deterministic():
    from togkit.model import ExternalLm, LmConfig
    from togkit.training import LmTrainConfig, train_external_lm

    def run():
        lm = ExternalLm(LmConfig(alphabet=TABLE.symbols, width=8, layers=2),
                        seed=1)
        train_external_lm(lm, ["ab", "cab", "bc"],
                          LmTrainConfig(epochs=3, warmup_epochs=1, seed=5))
        return np.concatenate([p.data.ravel() for p in lm.parameters()])

    assert run().tobytes() == run().tobytes()


def test_train_external_lm_rejects_empty_and_oov_inputs():
    from togkit.features import AlphabetError
    from togkit.model import ExternalLm, LmConfig
    from togkit.training import lm_cross_entropy, train_external_lm

    lm = ExternalLm(LmConfig(alphabet=TABLE.symbols, width=8, layers=1), seed=0)
    with pytest.raises(TrainingError, match="no texts"):
        train_external_lm(lm, [])
    with pytest.raises(AlphabetError):
        train_external_lm(lm, ["xyz"])
    with pytest.raises(TrainingError, match="no texts"):
        lm_cross_entropy(lm, [])
