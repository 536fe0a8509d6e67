"""Word-error-rate scoring: edit distance per utterance, pooled per corpus."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import read_manifest
from .decoding import DecodeConfig, decode_utterance, speech_input


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    reference_tokens: int

    def __post_init__(self):
        for name in ("substitutions", "deletions", "insertions",
                     "reference_tokens"):
            if getattr(self, name) < 0:
                raise ScoringError(f"{name} must not be negative")

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.reference_tokens == 0:
            raise ScoringError("WER undefined for zero reference tokens")
        return self.errors / self.reference_tokens

    def merge(self, other: "WerReport") -> "WerReport":
        return WerReport(
            substitutions=self.substitutions + other.substitutions,
            deletions=self.deletions + other.deletions,
            insertions=self.insertions + other.insertions,
            reference_tokens=self.reference_tokens + other.reference_tokens,
        )

    def format(self) -> str:
        return (
            f"reference tokens\t{self.reference_tokens}\n"
            f"substitutions\t{self.substitutions}\n"
            f"deletions\t{self.deletions}\n"
            f"insertions\t{self.insertions}\n"
            f"wer\t{100.0 * self.wer:.2f}%\n"
        )


def wer(reference: list[str], hypothesis: list[str]) -> WerReport:
    """Minimal-edit alignment with unit costs; ties prefer substitution."""
    if not reference:
        raise ScoringError("empty reference; WER is undefined")
    n, m = len(reference), len(hypothesis)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)

    subs = dels = inss = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (
                reference[i - 1] != hypothesis[j - 1]):
            if reference[i - 1] != hypothesis[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1
    return WerReport(substitutions=subs, deletions=dels, insertions=inss,
                     reference_tokens=n)


@dataclass(frozen=True)
class UtteranceScore:
    utt_id: str
    reference: str
    hypothesis: str
    report: WerReport


def score_utterance(model, utt, config: DecodeConfig, lm=None) -> UtteranceScore:
    frames = speech_input(model, utt.speech)
    ids = decode_utterance(model, frames, config, lm=lm)
    hypothesis = model.config.symbol_table.decode(ids)
    report = wer(utt.text.split(), hypothesis.split())
    return UtteranceScore(utt_id=utt.utt_id, reference=utt.text,
                          hypothesis=hypothesis, report=report)


def score_corpus(model, manifest_path: str, config: DecodeConfig,
                 lm=None, status=None) -> tuple[WerReport, list[UtteranceScore]]:
    """Decode every speech utterance in the manifest and pool edit counts.

    Corpus WER divides total errors by total reference tokens; it is not the
    mean of per-utterance rates. Utterances decode independently, so the
    worker count changes wall time but never the report.
    """
    utts = read_manifest(manifest_path)
    for utt in utts:
        if utt.speech is None:
            raise ScoringError(
                f"utterance {utt.utt_id!r} has no speech features; "
                "scoring needs a speech manifest"
            )
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            scores = list(pool.map(
                lambda u: score_utterance(model, u, config, lm=lm), utts))
    else:
        scores = [score_utterance(model, u, config, lm=lm) for u in utts]
    pooled = WerReport(0, 0, 0, 0)
    for s in scores:
        pooled = pooled.merge(s.report)
        if status is not None:
            status(f"{s.utt_id}: {100.0 * s.report.wer:.1f}% "
                   f"({s.report.errors}/{s.report.reference_tokens})")
    return pooled, scores


def decode_corpus(model, manifest_path: str, config: DecodeConfig,
                  lm=None, status=None) -> list[tuple[str, str]]:
    """Hypotheses for every speech utterance, without reference scoring."""
    utts = read_manifest(manifest_path)
    for utt in utts:
        if utt.speech is None:
            raise ScoringError(
                f"utterance {utt.utt_id!r} has no speech features; "
                "decoding needs a speech manifest"
            )
    table = model.config.symbol_table

    def one(utt):
        frames = speech_input(model, utt.speech)
        ids = decode_utterance(model, frames, config, lm=lm)
        return utt.utt_id, table.decode(ids)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            pairs = list(pool.map(one, utts))
    else:
        pairs = [one(u) for u in utts]
    if status is not None:
        for utt_id, hyp in pairs:
            status(f"{utt_id}\t{hyp}")
    return pairs


def write_hypotheses(path: str, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, hyp in pairs:
            fh.write(f"{utt_id}\t{hyp}\n")


def write_decode_output(path: str, scores: list[UtteranceScore]) -> None:
    write_hypotheses(path, [(s.utt_id, s.hypothesis) for s in scores])


def write_wer_report(path: str, pooled: WerReport,
                     scores: list[UtteranceScore]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(pooled.format())
        fh.write("\n")
        for s in scores:
            fh.write(f"{s.utt_id}\t{100.0 * s.report.wer:.2f}%\t"
                     f"ref: {s.reference}\thyp: {s.hypothesis}\n")
