"""Acceptance checks: one numbered pass/fail line per guaranteed behavior.

Each check prints `[PASS]`/`[FAIL]` directly to the original stdout so the
verdict lines survive pytest's capture; run the file alone for the full list:

    pytest tests/test_acceptance.py -v

Checks 08-10 train small recognizers on the packaged synthetic corpus and
dominate the runtime; everything else finishes in seconds.
"""

import copy
import filecmp
import math
import sys
import time
from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
import pytest

from togkit.adaptation import AdaptConfig, adapt, train_lm_head
from togkit.checkpoint import load_model, save_model
from togkit.corpus import CorpusSpec, build_corpus, read_manifest
from togkit.decoding import (
    DecodeConfig,
    beam_decode,
    decode_utterance,
    speech_input,
    text_input,
)
from togkit.features import (
    FeatureSequence,
    SymbolTable,
    add_deltas,
    assemble_dual_input,
    build_textogram,
    read_feature_file,
    stack_and_skip,
    write_feature_file,
)
from togkit.model import ExternalLm, LmConfig, ModelConfig, TransducerModel
from togkit.scoring import score_corpus, wer
from togkit.tape import Parameter, finite_difference_check, log_softmax
from togkit.training import (
    AdamState,
    AugmentPolicy,
    LmTrainConfig,
    TrainConfig,
    Utterance,
    fit,
    one_cycle_lr,
    train_external_lm,
)
from togkit.transducer import brute_force_nll, rnnt_nll, transducer_loss


@contextmanager
def certify(label):
    """Print one verdict line per check, bypassing pytest's capture."""
    info = {}
    try:
        yield info
    except BaseException:
        print(f"[FAIL] {label}", file=sys.__stdout__, flush=True)
        raise
    detail = f" ({info['detail']})" if "detail" in info else ""
    print(f"[PASS] {label}{detail}", file=sys.__stdout__, flush=True)


def log_softmax_rows(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


TABLE5 = SymbolTable(("<b>", "a", "b", "c", " "))

TINY_CFG = ModelConfig(
    alphabet=TABLE5.symbols,
    encoder_layers=1,
    encoder_width=4,
    prediction_width=8,
    joint_width=4,
    speech_width=12,
    text_width=10,
)


def tiny_utts(rng_seed=3):
    rng = np.random.default_rng(rng_seed)
    return [
        Utterance(f"u{i}", text,
                  FeatureSequence(rng.normal(size=(12 + 4 * i, 2))
                                  .astype(np.float32), 10, "speech"))
        for i, text in enumerate(["ab", "ba c", "cab"])
    ]


def tiny_trained_model(seed=0):
    model = TransducerModel(TINY_CFG, seed=seed)
    fit(model, tiny_utts(), TrainConfig(epochs=2, warmup_epochs=1,
                                        batch_size=4, seed=1))
    return model


def cast64(model):
    for p in model.parameters():
        p.data = p.data.astype(np.float64)
    return model


def param_bytes(model):
    return {p.name: p.data.tobytes() for p in model.parameters()}


# -- check 01: loss equals exhaustive alignment enumeration ----------------------


def test_loss_matches_exhaustive_enumeration():
    with certify("check 01 lattice loss matches alignment enumeration, "
                 "500 seeded cases within 1e-6") as info:
        rng = np.random.default_rng(20240501)
        t0 = time.time()
        worst = 0.0
        for _ in range(500):
            t_len = int(rng.integers(1, 6))
            u_len = int(rng.integers(0, 5))
            k = int(rng.integers(2, 6))
            logp = log_softmax_rows(rng.normal(size=(t_len, u_len + 1, k)))
            labels = rng.integers(1, k, size=u_len)
            fast = rnnt_nll(logp, labels).nll
            slow = brute_force_nll(logp, labels)
            worst = max(worst, abs(fast - slow))
        elapsed = time.time() - t0
        assert worst <= 1e-6
        assert elapsed < 10.0
        info["detail"] = f"max err {worst:.2e}, {elapsed:.1f}s"


# -- check 02: gradients match central finite differences ------------------------


def test_gradients_match_finite_differences():
    with certify("check 02 loss and full-model gradients match central "
                 "differences within 1e-4 at 64-bit") as info:
        t0 = time.time()
        rng = np.random.default_rng(9)
        labels = np.array([1, 2])

        w = Parameter("acc.logits", rng.normal(size=(3, 3, 5)))

        def loss_only():
            return transducer_loss(log_softmax(w), labels)

        err_logits = finite_difference_check(loss_only, [w],
                                             epsilon=1e-5, atol=1e-9)

        model = cast64(TransducerModel(TINY_CFG, seed=7))
        frames = rng.normal(size=(3, TINY_CFG.input_width))

        def end_to_end():
            lat = model.joint_lattice(model.encode(frames),
                                      model.predict(labels))
            return transducer_loss(lat, labels)

        err_model = finite_difference_check(end_to_end, model.parameters(),
                                            epsilon=1e-5, atol=1e-9)
        elapsed = time.time() - t0
        assert err_logits < 1e-4
        assert err_model < 1e-4
        assert elapsed < 30.0
        info["detail"] = (f"logits {err_logits:.2e}, "
                          f"end-to-end {err_model:.2e}, {elapsed:.1f}s")


# -- check 03: analytic loss value ------------------------------------------------


def test_uniform_two_frame_one_label_loss_is_log_four():
    with certify("check 03 uniform T=2 U=1 K=2 loss equals ln 4") as info:
        logp = np.full((2, 2, 2), math.log(0.5))
        nll = rnnt_nll(logp, np.array([1])).nll
        assert abs(nll - math.log(4.0)) <= 1e-6
        info["detail"] = f"nll {nll:.6f}"


# -- check 04: published feature-width arithmetic ---------------------------------


def test_feature_width_arithmetic():
    with certify("check 04 width arithmetic 40->120->240 speech, 42->84 "
                 "text raster, 324 combined") as info:
        rng = np.random.default_rng(4)
        raw = rng.normal(size=(7, 40)).astype(np.float32)
        with_deltas = add_deltas(raw)
        assert with_deltas.shape == (7, 120)
        stacked = stack_and_skip(with_deltas)
        assert stacked.shape == (4, 240)

        symbols = ("<b>",) + tuple("abcdefghijklmnopqrstuvwxyz0123456789 .,'!")
        table42 = SymbolTable(symbols)
        assert table42.size == 42
        raster = build_textogram("the answer is 42!", table42, duration=4)
        assert raster.raster.shape == (17 * 4, 42)

        dual_text = assemble_dual_input(None, raster,
                                        speech_width=240, text_width=84)
        assert dual_text.frames.shape == (17 * 2, 324)
        speech_seq = FeatureSequence(stacked, 10, "speech")
        dual_speech = assemble_dual_input(speech_seq, None,
                                          speech_width=240, text_width=84)
        assert dual_speech.frames.shape == (4, 324)
        info["detail"] = "shapes (7,120) (4,240) (68,42) (34,324) (4,324)"


# -- check 05: label-masking statistics --------------------------------------------


def test_masking_fraction_near_quarter():
    with certify("check 05 mask rate 0.25 over 12000 symbols lands in "
                 "[0.235, 0.265]") as info:
        table = SymbolTable.default_alphabet()
        raster = build_textogram("a" * 12000, table, duration=2,
                                 mask_rate=0.25, rng_seed=11).raster
        assert raster.shape[0] == 24000
        zero_rows = int((raster.sum(axis=1) == 0).sum())
        fraction = zero_rows / raster.shape[0]
        assert 0.235 <= fraction <= 0.265
        info["detail"] = f"masked fraction {fraction:.4f}"


# -- check 06: learning-rate schedule closed form ----------------------------------


def test_one_cycle_schedule_closed_form():
    with certify("check 06 one-cycle lr hits 2e-5, 2e-4, 1e-4, 0 at the "
                 "four marker steps exactly") as info:
        for steps_per_epoch in (50, 7):
            total = 20 * steps_per_epoch
            warm = 6 * steps_per_epoch
            assert one_cycle_lr(0, total, warm, 2e-5, 2e-4) == 2e-5
            assert one_cycle_lr(warm, total, warm, 2e-5, 2e-4) == 2e-4
            assert one_cycle_lr(13 * steps_per_epoch, total, warm,
                                2e-5, 2e-4) == 1e-4
            assert one_cycle_lr(total, total, warm, 2e-5, 2e-4) == 0.0
        info["detail"] = "exact at S=50 and S=7"


# -- check 07: adaptation freeze contracts ------------------------------------------


def test_adaptation_freeze_contracts():
    with certify("check 07 adaptation freezes exactly the promised "
                 "parameter groups, byte-compared") as info:
        quick = dict(epochs=2, warmup_epochs=1, batch_size=4, seed=7)
        texts = ["abc ab", "ca b", "bbc a", "cc ba", "a abc"]

        def frozen_groups(mode, needs_head=False):
            model = tiny_trained_model()
            cfg = AdaptConfig(mode=mode, **quick)
            if needs_head:
                train_lm_head(model, texts, config=cfg)
            before = param_bytes(model)
            adapt(model, texts, cfg)
            after = param_bytes(model)
            changed = {name for name in before if before[name] != after[name]}
            return changed

        changed = frozen_groups("tog-p")
        assert changed and all(n.startswith("pred.") for n in changed)

        changed = frozen_groups("tog-pj")
        assert changed and all(n.startswith(("pred.", "joint."))
                               for n in changed)

        changed = frozen_groups("nnlm", needs_head=True)
        assert changed and all(n.startswith("pred.") for n in changed)
        info["detail"] = "tog-p pred only, tog-pj pred+joint, nnlm pred only"


# -- check 11: determinism and persistence ------------------------------------------


def _opt_arrays(state):
    rows = [(f"opt.m.{k}", v) for k, v in sorted(state.m.items())]
    rows += [(f"opt.v.{k}", v) for k, v in sorted(state.v.items())]
    return rows


def _opt_state_from(kv, extra_arrays):
    state = AdamState(t=int(kv["opt_t"]))
    for name, arr in extra_arrays.items():
        if name.startswith("opt.m."):
            state.m[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            state.v[name[len("opt.v."):]] = arr
    return state


def test_determinism_and_persistence(tmp_path):
    with certify("check 11 seeded runs byte-identical, round-trips "
                 "bit-exact, resume equals uninterrupted") as info:
        rng = np.random.default_rng(21)
        seq = FeatureSequence(rng.normal(size=(9, 4)).astype(np.float32),
                              10, "speech")
        feat_path = str(tmp_path / "roundtrip.feat")
        write_feature_file(feat_path, seq)
        back = read_feature_file(feat_path)
        assert back.frames.tobytes() == seq.frames.tobytes()
        assert (back.frame_period_ms, back.modality) == (seq.frame_period_ms,
                                                         seq.modality)

        cfg = TrainConfig(epochs=3, warmup_epochs=1, batch_size=4, seed=1)
        first = TransducerModel(TINY_CFG, seed=6)
        fit(first, tiny_utts(), cfg)
        second = TransducerModel(TINY_CFG, seed=6)
        fit(second, tiny_utts(), cfg)
        assert param_bytes(first) == param_bytes(second)

        path_a = str(tmp_path / "a.togm")
        path_b = str(tmp_path / "b.togm")
        save_model(path_a, first)
        save_model(path_b, load_model(path_a).model)
        assert filecmp.cmp(path_a, path_b, shallow=False)

        straight = TransducerModel(TINY_CFG, seed=6)
        full = fit(straight, tiny_utts(), cfg)
        halt = full.total_steps // cfg.epochs + 1
        interrupted = TransducerModel(TINY_CFG, seed=6)
        part = fit(interrupted, tiny_utts(), cfg, stop_after_steps=halt)
        ckpt = str(tmp_path / "part.togm")
        save_model(ckpt, interrupted, extra_kv={"opt_t": str(part.opt_state.t)},
                   extra_arrays=_opt_arrays(part.opt_state))
        loaded = load_model(ckpt)
        fit(loaded.model, tiny_utts(), cfg, resume_step=halt,
            opt_state=_opt_state_from(loaded.kv, loaded.extra_arrays))
        assert param_bytes(loaded.model) == param_bytes(straight)
        info["detail"] = "feature+checkpoint round-trips, retrain, resume"


# -- check 12: scorer against an independent dynamic program ------------------------


def _edit_distance(ref, hyp):
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def test_wer_matches_independent_dp_oracle():
    with certify("check 12 scorer equals an independent edit-distance "
                 "program on 100 random pairs") as info:
        rng = np.random.default_rng(100)
        for _ in range(100):
            ref = [f"w{v}" for v in rng.integers(0, 8,
                                                 size=rng.integers(1, 13))]
            hyp = [f"w{v}" for v in rng.integers(0, 8,
                                                 size=rng.integers(0, 13))]
            report = wer(ref, hyp)
            assert report.errors == _edit_distance(ref, hyp)
            assert (report.deletions - report.insertions
                    == len(ref) - len(hyp))
        info["detail"] = "100/100 exact"


# -- checks 08-10: trained behavior on the packaged synthetic corpus ----------------
#
# The corpus and seed are fixed; the training recipe is sized so a model
# leaves the all-blank regime within the runtime bounds on one CPU core.
# Everything below shares one corpus and one dual-input base model.

DESK_TRAIN = dict(epochs=40, warmup_epochs=6, batch_size=16,
                  start_lr=1e-4, max_lr=5e-3, seed=0,
                  augment=AugmentPolicy(speed_tempo_factors=()))

DESK_ADAPT = dict(epochs=80, warmup_epochs=4, batch_size=16,
                  start_lr=1e-4, max_lr=5e-3, seed=0,
                  nnlm_loss_weight=1.0)

GREEDY = DecodeConfig(beam=1)


def desk_arch(table):
    return ModelConfig(alphabet=table.symbols, encoder_layers=1,
                       encoder_width=48, prediction_width=64, joint_width=32,
                       speech_width=96, text_width=58)


def pooled_wer(model, manifest, config=GREEDY, lm=None):
    pooled, _ = score_corpus(model, manifest, config, lm=lm)
    return pooled.wer


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("desk"))
    table = SymbolTable.default_alphabet()
    t0 = time.time()
    manifests = build_corpus(CorpusSpec(), root, table)
    corpus_seconds = time.time() - t0
    train_utts = read_manifest(manifests["train_a"], load_features=True)

    t0 = time.time()
    dual = TransducerModel(desk_arch(table), seed=0)
    fit(dual, train_utts, TrainConfig(**DESK_TRAIN))
    dual_seconds = time.time() - t0

    t0 = time.time()
    solo = TransducerModel(desk_arch(table), seed=0)
    fit(solo, train_utts, TrainConfig(use_text_twins=False, **DESK_TRAIN))
    solo_seconds = time.time() - t0

    return SimpleNamespace(
        table=table, manifests=manifests, train_utts=train_utts,
        adapt_texts=[u.text for u in
                     read_manifest(manifests["adapt_b"], load_features=False)],
        dual=dual, solo=solo, corpus_seconds=corpus_seconds,
        dual_seconds=dual_seconds, solo_seconds=solo_seconds)


def test_dual_input_training_does_not_hurt_in_domain_wer(desk):
    with certify("check 08 dual-input model scores <= speech-only model "
                 "on in-domain dev speech") as info:
        t0 = time.time()
        wer_dual = pooled_wer(desk.dual, desk.manifests["dev_a"])
        wer_solo = pooled_wer(desk.solo, desk.manifests["dev_a"])
        elapsed = (desk.corpus_seconds + desk.dual_seconds
                   + desk.solo_seconds + time.time() - t0)
        assert wer_dual <= wer_solo
        assert elapsed < 1200.0
        info["detail"] = (f"dual {100 * wer_dual:.1f}% <= "
                          f"solo {100 * wer_solo:.1f}%, {elapsed:.0f}s")


def test_text_only_adaptation_recovers_out_of_domain_wer(desk):
    with certify("check 09 text-only adaptation cuts out-of-domain WER by "
                 ">=20% relative, NN-LM objective does not hurt") as info:
        t0 = time.time()
        test_b = desk.manifests["test_b"]
        wer_base = pooled_wer(desk.dual, test_b)

        tog_p = copy.deepcopy(desk.dual)
        adapt(tog_p, desk.adapt_texts, AdaptConfig(mode="tog-p", **DESK_ADAPT))
        wer_tog_p = pooled_wer(tog_p, test_b)

        combo = copy.deepcopy(desk.dual)
        train_lm_head(combo, [u.text for u in desk.train_utts],
                      config=AdaptConfig(mode="nnlm", epochs=20,
                                         warmup_epochs=4, batch_size=16,
                                         start_lr=1e-4, max_lr=5e-3, seed=0))
        adapt(combo, desk.adapt_texts,
              AdaptConfig(mode="tog-p+nnlm", **DESK_ADAPT))
        wer_combo = pooled_wer(combo, test_b)

        elapsed = time.time() - t0
        relative = (wer_base - wer_tog_p) / wer_base
        assert relative >= 0.20
        assert wer_combo <= wer_tog_p
        assert elapsed < 900.0
        info["detail"] = (f"base {100 * wer_base:.1f}%, tog-p "
                          f"{100 * wer_tog_p:.1f}% ({100 * relative:.0f}% rel), "
                          f"+nnlm {100 * wer_combo:.1f}%, {elapsed:.0f}s")


def test_shallow_fusion_improves_out_of_domain_wer(desk):
    with certify("check 10 tuned shallow fusion scores <= the unfused "
                 "baseline, weight 0 is bit-identical to no fusion") as info:
        lm = ExternalLm(LmConfig(alphabet=desk.table.symbols,
                                 width=64, layers=2), seed=0)
        train_external_lm(lm, desk.adapt_texts, LmTrainConfig(epochs=30, seed=0))

        test_utts = read_manifest(desk.manifests["test_b"], load_features=True)
        slice_utts = test_utts[:15]

        def slice_wer(config, lm_arg):
            err = tok = 0
            for utt in slice_utts:
                frames = speech_input(desk.dual, utt.speech)
                ids = decode_utterance(desk.dual, frames, config, lm=lm_arg)
                hyp = desk.table.decode(ids)
                report = wer(utt.text.split(), hyp.split())
                err += report.errors
                tok += report.reference_tokens
            return err / tok

        # the weight is tuned on a held-out slice, then judged on the full set
        best_lam, best = None, None
        for lam in (0.1, 0.2, 0.3, 0.5, 1.0):
            w = slice_wer(DecodeConfig(beam=4, fusion_weight=lam), lm)
            if best is None or w < best:
                best_lam, best = lam, w

        wer_unfused = pooled_wer(desk.dual, desk.manifests["test_b"],
                                 DecodeConfig(beam=4))
        wer_fused = pooled_wer(desk.dual, desk.manifests["test_b"],
                               DecodeConfig(beam=4, fusion_weight=best_lam),
                               lm=lm)
        assert best_lam > 0.0
        assert wer_fused <= wer_unfused

        for utt in test_utts[:5]:
            frames = speech_input(desk.dual, utt.speech)
            plain = beam_decode(desk.dual, frames, beam_width=4)
            zero = beam_decode(desk.dual, frames, beam_width=4,
                               lm=lm, fusion_weight=0.0)
            assert plain == zero
        info["detail"] = (f"lambda {best_lam}, fused {100 * wer_fused:.1f}% "
                          f"<= unfused {100 * wer_unfused:.1f}%, "
                          f"weight-0 n-best identical on 5 utterances")


def test_text_and_speech_routes_decode_alike(desk):
    errors = base = 0
    for utt in desk.train_utts[:25]:
        via_text = desk.table.decode(decode_utterance(
            desk.dual, text_input(desk.dual, utt.text), GREEDY)).split()
        via_speech = desk.table.decode(decode_utterance(
            desk.dual, speech_input(desk.dual, utt.speech), GREEDY)).split()
        if not via_text and not via_speech:
            continue
        if via_text:
            errors += wer(via_text, via_speech).errors
        else:
            errors += len(via_speech)
        base += max(len(via_text), len(via_speech))
    agreement = 1.0 - errors / base
    assert agreement >= 0.90
