import os

import numpy as np
import pytest

from togkit.corpus import CorpusError, write_manifest
from togkit.decoding import DecodeConfig
from togkit.features import FeatureSequence, Normalizer, write_feature_file
from togkit.model import ModelConfig, TransducerModel
from togkit.scoring import (
    ScoringError,
    WerReport,
    score_corpus,
    score_utterance,
    wer,
    write_decode_output,
    write_wer_report,
)

TABLE_SYMBOLS = ("<b>", "a", "b", "c", " ")

TINY_CFG = ModelConfig(
    alphabet=TABLE_SYMBOLS,
    encoder_layers=1,
    encoder_width=4,
    prediction_width=8,
    joint_width=4,
    speech_width=12,
    text_width=10,
)


def scoring_model(seed=0, blank_only=False):
    model = TransducerModel(TINY_CFG, seed=seed)
    model.normalizer = Normalizer(mean=np.zeros(2, np.float32),
                                  std=np.ones(2, np.float32))
    if blank_only:
        model.joint_out_w.data = np.zeros_like(model.joint_out_w.data)
        bias = np.zeros_like(model.joint_out_b.data)
        bias[0] = 10.0
        model.joint_out_b.data = bias
    else:
        rng = np.random.default_rng(seed + 100)
        model.joint_out_w.data = rng.normal(
            scale=2.0, size=model.joint_out_w.data.shape).astype(np.float32)
        model.joint_out_b.data = rng.normal(
            scale=1.0, size=model.joint_out_b.data.shape).astype(np.float32)
    return model


def write_speech_corpus(root, texts, seed=0):
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(root, "features"), exist_ok=True)
    entries = []
    for i, text in enumerate(texts):
        utt_id = f"utt-{i:03d}"
        t = int(rng.integers(6, 14))
        seq = FeatureSequence(rng.normal(size=(t, 2)).astype(np.float32),
                              100, "speech")
        rel = os.path.join("features", f"{utt_id}.feat")
        write_feature_file(os.path.join(root, rel), seq)
        entries.append((utt_id, "speech", text, rel))
    path = os.path.join(root, "test.tsv")
    write_manifest(path, entries)
    return path, entries


# -- edit distance -----------------------------------------------------------


def test_wer_identical_sequences_score_zero():
    report = wer("the cat sat".split(), "the cat sat".split())
    assert report.errors == 0
    assert report.reference_tokens == 3
    assert report.wer == 0.0


def test_wer_hand_counted_examples():
    sub = wer("a b c".split(), "a x c".split())
    assert (sub.substitutions, sub.deletions, sub.insertions) == (1, 0, 0)
    assert sub.wer == pytest.approx(1 / 3)

    dele = wer("a b c".split(), "a c".split())
    assert (dele.substitutions, dele.deletions, dele.insertions) == (0, 1, 0)

    ins = wer("a c".split(), "a b c".split())
    assert (ins.substitutions, ins.deletions, ins.insertions) == (0, 0, 1)

    # delete x, insert q, insert r; w y z align
    mixed = wer("w x y z".split(), "w y q z r".split())
    assert mixed.errors == 3
    assert mixed.deletions - mixed.insertions == -1
    assert mixed.wer == pytest.approx(0.75)


def test_wer_can_exceed_one_hundred_percent():
    report = wer("a".split(), "x y z".split())
    assert report.errors == 3
    assert report.wer > 1.0


def test_wer_empty_reference_rejected():
    with pytest.raises(ScoringError, match="empty reference"):
        wer([], ["a"])


def test_wer_empty_hypothesis_is_all_deletions():
    report = wer("a b c d".split(), [])
    assert (report.substitutions, report.deletions, report.insertions) == \
        (0, 4, 0)
    assert report.wer == 1.0


def _edit_distance(a, b):
    """Two-row Levenshtein, written independently of the scored alignment."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j - 1] + (x != y), prev[j] + 1, cur[-1] + 1))
        prev = cur
    return prev[-1]


def test_wer_counts_match_independent_distance_oracle():
    rng = np.random.default_rng(11)
    vocab = ["red", "green", "blue", "dog", "cat"]
    for _ in range(100):
        ref = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(1, 9))]
        hyp = [vocab[i] for i in rng.integers(0, 5, size=rng.integers(0, 9))]
        report = wer(ref, hyp)
        assert report.errors == _edit_distance(ref, hyp)
        # every alignment must bridge the length gap with dels or inss
        assert report.deletions - report.insertions == len(ref) - len(hyp)


# -- report arithmetic --------------------------------------------------------


def test_report_rejects_negative_counts():
    with pytest.raises(ScoringError, match="negative"):
        WerReport(substitutions=-1, deletions=0, insertions=0,
                  reference_tokens=5)


def test_report_pooling_uses_token_totals_not_mean_of_rates():
    bad_utt = WerReport(substitutions=1, deletions=0, insertions=0,
                        reference_tokens=10)
    clean_utt = WerReport(substitutions=0, deletions=0, insertions=0,
                          reference_tokens=10)
    pooled = bad_utt.merge(clean_utt)
    assert pooled.wer == pytest.approx(0.05)

    # unequal lengths: 1/2 and 0/18 pool to 5%, not to the 25% mean of rates
    short = WerReport(1, 0, 0, reference_tokens=2)
    long = WerReport(0, 0, 0, reference_tokens=18)
    assert short.merge(long).wer == pytest.approx(0.05)


def test_report_wer_undefined_without_reference_tokens():
    empty = WerReport(0, 0, 0, 0)
    with pytest.raises(ScoringError, match="zero reference tokens"):
        _ = empty.wer


def test_report_format_is_tab_delimited_with_two_decimals():
    report = WerReport(substitutions=2, deletions=1, insertions=0,
                       reference_tokens=9)
    assert report.format() == (
        "reference tokens\t9\n"
        "substitutions\t2\n"
        "deletions\t1\n"
        "insertions\t0\n"
        "wer\t33.33%\n"
    )


# -- corpus scoring ------------------------------------------------------------


def test_blank_only_model_scores_total_deletion(tmp_path):
    texts = ["ab c", "ba", "c ab"]
    manifest, _ = write_speech_corpus(str(tmp_path), texts)
    model = scoring_model(blank_only=True)
    pooled, scores = score_corpus(model, manifest, DecodeConfig(beam=1))
    total_tokens = sum(len(t.split()) for t in texts)
    assert pooled.reference_tokens == total_tokens
    assert pooled.deletions == total_tokens
    assert pooled.wer == 1.0
    assert all(s.hypothesis == "" for s in scores)


def test_rescoring_is_deterministic(tmp_path):
    manifest, _ = write_speech_corpus(str(tmp_path), ["ab c", "ba", "c"])
    model = scoring_model(seed=3)
    config = DecodeConfig(beam=4)
    first = score_corpus(model, manifest, config)
    second = score_corpus(model, manifest, config)
    assert first == second


def test_worker_count_never_changes_the_report(tmp_path):
    manifest, _ = write_speech_corpus(str(tmp_path),
                                      ["ab", "c a", "bb", "a c b", "ca"])
    model = scoring_model(seed=5)
    serial = score_corpus(model, manifest, DecodeConfig(beam=2, workers=1))
    threaded = score_corpus(model, manifest, DecodeConfig(beam=2, workers=3))
    assert serial == threaded


def test_corpus_order_does_not_change_pooled_report(tmp_path):
    manifest, entries = write_speech_corpus(str(tmp_path),
                                            ["ab c", "ba", "c ab", "a"])
    reversed_path = os.path.join(str(tmp_path), "reversed.tsv")
    write_manifest(reversed_path, list(reversed(entries)))
    model = scoring_model(seed=2)
    config = DecodeConfig(beam=2)
    forward, _ = score_corpus(model, manifest, config)
    backward, _ = score_corpus(model, reversed_path, config)
    assert forward == backward


def test_single_utterance_corpus_matches_direct_scoring(tmp_path):
    manifest, _ = write_speech_corpus(str(tmp_path), ["b ca"])
    model = scoring_model(seed=4)
    config = DecodeConfig(beam=2)
    pooled, scores = score_corpus(model, manifest, config)
    from togkit.corpus import read_manifest

    direct = score_utterance(model, read_manifest(manifest)[0], config)
    assert pooled == direct.report
    assert scores == [direct]


def test_status_callback_reports_each_utterance(tmp_path):
    manifest, _ = write_speech_corpus(str(tmp_path), ["ab", "c"])
    model = scoring_model(blank_only=True)
    lines = []
    score_corpus(model, manifest, DecodeConfig(beam=1), status=lines.append)
    assert len(lines) == 2
    assert lines[0].startswith("utt-000: 100.0%")


def test_text_only_manifest_rows_are_rejected(tmp_path):
    path = os.path.join(str(tmp_path), "adapt.tsv")
    write_manifest(path, [("utt-000", "text", "ab c", None)])
    model = scoring_model()
    with pytest.raises(ScoringError, match="no speech features"):
        score_corpus(model, path, DecodeConfig())


def test_missing_feature_file_names_the_utterance(tmp_path):
    path = os.path.join(str(tmp_path), "broken.tsv")
    write_manifest(path, [("utt-042", "speech", "ab", "features/gone.feat")])
    model = scoring_model()
    with pytest.raises(CorpusError, match="utt-042"):
        score_corpus(model, path, DecodeConfig())


# -- output files --------------------------------------------------------------


def test_written_outputs_round_trip(tmp_path):
    manifest, _ = write_speech_corpus(str(tmp_path), ["ab c", "ba"])
    model = scoring_model(blank_only=True)
    pooled, scores = score_corpus(model, manifest, DecodeConfig(beam=1))

    hyp_path = os.path.join(str(tmp_path), "decode.tsv")
    write_decode_output(hyp_path, scores)
    with open(hyp_path, encoding="utf-8") as fh:
        assert fh.read() == "utt-000\t\nutt-001\t\n"

    report_path = os.path.join(str(tmp_path), "wer.txt")
    write_wer_report(report_path, pooled, scores)
    with open(report_path, encoding="utf-8") as fh:
        body = fh.read()
    assert body.startswith(pooled.format() + "\n")
    assert "utt-000\t100.00%\tref: ab c\thyp: \n" in body
    assert body.endswith("utt-001\t100.00%\tref: ba\thyp: \n")
