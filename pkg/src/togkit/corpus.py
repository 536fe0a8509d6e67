"""Synthetic two-domain corpora: template grammars and a prototype renderer.

Each domain is a file of sentence templates with ``<slot>`` markers plus
filler word lists; domains share an alphabet but use disjoint vocabularies,
so their word-bigram sets barely overlap. Speech is rendered per grapheme
from fixed channel prototypes: a random duration of noisy copies of the
grapheme's prototype vector plus a per-utterance channel offset. Prototypes
are spread far enough apart that a nearest-prototype classifier recovers
almost every frame, keeping the acoustics learnable at desk scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .features import (
    FeatureSequence,
    SymbolTable,
    read_feature_file,
    write_feature_file,
)
from .training import Utterance


class CorpusError(ValueError):
    pass


# -- grammars -------------------------------------------------------------------


@dataclass
class Grammar:
    templates: list[str]
    fillers: dict[str, list[str]]

    def __post_init__(self):
        if not self.templates:
            raise CorpusError("grammar has no templates")
        for template in self.templates:
            for slot in _slots(template):
                if slot not in self.fillers:
                    raise CorpusError(f"template uses unknown slot <{slot}>")
        for name, words in self.fillers.items():
            if not words:
                raise CorpusError(f"filler {name!r} has no words")


def _slots(template: str) -> list[str]:
    out = []
    rest = template
    while "<" in rest:
        _, _, rest = rest.partition("<")
        slot, sep, rest = rest.partition(">")
        if not sep:
            raise CorpusError(f"unclosed slot in template {template!r}")
        out.append(slot)
    return out


def parse_grammar(text: str) -> Grammar:
    """Lines with a colon are filler blocks (``name: w1 w2``); the rest are
    templates. ``#`` starts a comment; blank lines are skipped."""
    templates: list[str] = []
    fillers: dict[str, list[str]] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" in line:
            name, _, words = line.partition(":")
            name = name.strip()
            if name in fillers:
                raise CorpusError(f"filler {name!r} defined twice")
            fillers[name] = words.split()
        else:
            templates.append(line)
    return Grammar(templates=templates, fillers=fillers)


def load_grammar(path: str) -> Grammar:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_grammar(fh.read())


def generate_texts(grammar: Grammar, count: int,
                   rng: np.random.Generator) -> list[str]:
    """``count`` distinct sentences, uniform over templates and filler words."""
    seen: set[str] = set()
    out: list[str] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 200 * count:
            raise CorpusError(
                f"could not draw {count} distinct sentences; grammar too small "
                f"(got {len(out)})"
            )
        template = grammar.templates[int(rng.integers(len(grammar.templates)))]
        sentence = template
        for slot in _slots(template):
            words = grammar.fillers[slot]
            sentence = sentence.replace(
                f"<{slot}>", words[int(rng.integers(len(words)))], 1
            )
        if sentence not in seen:
            seen.add(sentence)
            out.append(sentence)
    return out


def bigram_overlap(texts_a: list[str], texts_b: list[str]) -> float:
    """Share of B's word bigrams that also occur in A (0 when B has none)."""
    def bigrams(texts):
        grams = set()
        for t in texts:
            words = t.split()
            grams.update(zip(words, words[1:]))
        return grams

    a, b = bigrams(texts_a), bigrams(texts_b)
    if not b:
        return 0.0
    return len(a & b) / len(b)


# -- renderer -------------------------------------------------------------------


@dataclass
class RendererParams:
    channels: int = 16
    noise_sigma: float = 0.4
    offset_sigma: float = 0.05
    duration_min: int = 3
    duration_max: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.channels < 1:
            raise CorpusError("channels must be at least 1")
        if self.noise_sigma <= 0 or self.offset_sigma < 0:
            raise CorpusError("noise_sigma must be positive, offset_sigma non-negative")
        if not (1 <= self.duration_min <= self.duration_max):
            raise CorpusError(
                f"bad duration range [{self.duration_min}, {self.duration_max}]"
            )


class Renderer:
    """Grapheme prototypes plus per-frame noise and per-utterance offset."""

    def __init__(self, params: RendererParams, table: SymbolTable):
        self.params = params
        self.table = table
        rng = np.random.default_rng(np.random.SeedSequence([params.seed]))
        protos = rng.normal(size=(table.size - 1, params.channels))
        floor = 6.0 * params.noise_sigma
        d_min = _min_pairwise_distance(protos)
        if d_min < floor:
            protos *= floor / d_min
        self.prototypes = protos.astype(np.float32)
        if _min_pairwise_distance(self.prototypes) <= 4.0 * params.noise_sigma:
            raise CorpusError("prototypes ended up closer than four noise sigmas")

    def render(self, text: str, utt_seed: int) -> FeatureSequence:
        """One utterance; every random draw comes from (renderer seed, utt_seed)."""
        if not text:
            raise CorpusError("cannot render empty text")
        ids = self.table.encode(text)
        if (ids == 0).any():
            raise CorpusError("text contains the blank symbol")
        p = self.params
        rng = np.random.default_rng(np.random.SeedSequence([p.seed, utt_seed]))
        offset = rng.normal(0.0, p.offset_sigma, p.channels)
        rows = []
        for symbol_id in ids:
            duration = int(rng.integers(p.duration_min, p.duration_max + 1))
            proto = self.prototypes[symbol_id - 1]
            noise = rng.normal(0.0, p.noise_sigma, (duration, p.channels))
            rows.append(proto + noise + offset)
        frames = np.concatenate(rows, axis=0).astype(np.float32)
        return FeatureSequence(frames, 10, "speech")

    def nearest_prototype_accuracy(self, text: str, utt_seed: int) -> float:
        """Fraction of rendered frames whose nearest prototype is their grapheme."""
        seq = self.render(text, utt_seed)
        ids = self.table.encode(text)
        rng = np.random.default_rng(np.random.SeedSequence([self.params.seed, utt_seed]))
        rng.normal(0.0, self.params.offset_sigma, self.params.channels)
        expected = []
        for symbol_id in ids:
            duration = int(rng.integers(self.params.duration_min,
                                        self.params.duration_max + 1))
            rng.normal(0.0, self.params.noise_sigma, (duration, self.params.channels))
            expected.extend([symbol_id - 1] * duration)
        d2 = ((seq.frames[:, None, :] - self.prototypes[None, :, :]) ** 2).sum(axis=-1)
        return float(np.mean(np.argmin(d2, axis=1) == np.asarray(expected)))


def _min_pairwise_distance(points: np.ndarray) -> float:
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    d2[np.diag_indices(len(points))] = np.inf
    return float(np.sqrt(d2.min()))


# -- corpus assembly ------------------------------------------------------------


@dataclass
class CorpusSpec:
    train_a: int = 400
    dev_a: int = 50
    adapt_b: int = 300
    test_b: int = 50
    seed: int = 0
    renderer: RendererParams = field(default_factory=RendererParams)
    grammar_a: str = ""   # empty means the packaged domain grammars
    grammar_b: str = ""

    def __post_init__(self):
        for name in ("train_a", "dev_a", "adapt_b", "test_b"):
            if getattr(self, name) < 1:
                raise CorpusError(f"{name} must be at least 1")


def packaged_grammar_path(name: str) -> str:
    return os.path.join(os.path.dirname(__file__), "data", name)


def parse_corpus_spec(kv: dict[str, str]) -> CorpusSpec:
    known = {
        "train_a", "dev_a", "adapt_b", "test_b", "seed", "channels",
        "noise_sigma", "offset_sigma", "duration_min", "duration_max",
        "grammar_a", "grammar_b",
    }
    for key in kv:
        if key not in known:
            raise CorpusError(f"unknown corpus key {key!r}")

    def num(key, default, cast):
        return cast(kv[key]) if key in kv else default

    renderer = RendererParams(
        channels=num("channels", 16, int),
        noise_sigma=num("noise_sigma", 0.4, float),
        offset_sigma=num("offset_sigma", 0.05, float),
        duration_min=num("duration_min", 3, int),
        duration_max=num("duration_max", 6, int),
        seed=num("seed", 0, int),
    )
    return CorpusSpec(
        train_a=num("train_a", 400, int),
        dev_a=num("dev_a", 50, int),
        adapt_b=num("adapt_b", 300, int),
        test_b=num("test_b", 50, int),
        seed=num("seed", 0, int),
        renderer=renderer,
        grammar_a=kv.get("grammar_a", ""),
        grammar_b=kv.get("grammar_b", ""),
    )


def corpus_spec_kv(spec: CorpusSpec) -> dict[str, str]:
    return {
        "train_a": str(spec.train_a),
        "dev_a": str(spec.dev_a),
        "adapt_b": str(spec.adapt_b),
        "test_b": str(spec.test_b),
        "seed": str(spec.seed),
        "channels": str(spec.renderer.channels),
        "noise_sigma": repr(spec.renderer.noise_sigma),
        "offset_sigma": repr(spec.renderer.offset_sigma),
        "duration_min": str(spec.renderer.duration_min),
        "duration_max": str(spec.renderer.duration_max),
        "grammar_a": spec.grammar_a,
        "grammar_b": spec.grammar_b,
    }


def build_corpus(spec: CorpusSpec, out_dir: str, table: SymbolTable,
                 status=None) -> dict[str, str]:
    """Write feature files and manifests; returns manifest paths by split.

    Domain A sentences are split disjointly into train/dev; domain B into
    adapt (text only) and test, so the adaptation texts never contain a test
    sentence verbatim.
    """
    grammar_a = load_grammar(spec.grammar_a or packaged_grammar_path("domain_a.grammar"))
    grammar_b = load_grammar(spec.grammar_b or packaged_grammar_path("domain_b.grammar"))
    rng_a = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xA]))
    rng_b = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB]))
    texts_a = generate_texts(grammar_a, spec.train_a + spec.dev_a, rng_a)
    texts_b = generate_texts(grammar_b, spec.adapt_b + spec.test_b, rng_b)

    renderer = Renderer(spec.renderer, table)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)

    splits = {
        "train_a": [("a-train", i, t, True)
                    for i, t in enumerate(texts_a[:spec.train_a])],
        "dev_a": [("a-dev", spec.train_a + i, t, True)
                  for i, t in enumerate(texts_a[spec.train_a:])],
        "adapt_b": [("b-adapt", 1_000_000 + i, t, False)
                    for i, t in enumerate(texts_b[:spec.adapt_b])],
        "test_b": [("b-test", 1_000_000 + spec.adapt_b + i, t, True)
                   for i, t in enumerate(texts_b[spec.adapt_b:])],
    }
    manifests: dict[str, str] = {}
    for split, rows in splits.items():
        entries = []
        for prefix, utt_seed, text, with_speech in rows:
            utt_id = f"{prefix}-{utt_seed % 1_000_000:05d}"
            if with_speech:
                seq = renderer.render(text, utt_seed)
                rel = os.path.join("features", f"{utt_id}.feat")
                write_feature_file(os.path.join(out_dir, rel), seq)
                entries.append((utt_id, "speech", text, rel))
            else:
                entries.append((utt_id, "text", text, None))
        path = os.path.join(out_dir, f"{split}.tsv")
        write_manifest(path, entries)
        manifests[split] = path
        if status is not None:
            status(f"{split}: {len(entries)} utterances")
    return manifests


# -- manifests --------------------------------------------------------------------


def write_manifest(path: str, entries: list[tuple]) -> None:
    """Rows of (utt_id, modality, text, feature_path or None)."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, modality, text, rel in entries:
            if "\t" in text:
                raise CorpusError(f"text of {utt_id!r} contains a tab")
            if rel is None:
                fh.write(f"{utt_id}\t{modality}\t{text}\n")
            else:
                fh.write(f"{utt_id}\t{modality}\t{text}\t{rel}\n")


def read_manifest(path: str, load_features: bool = True) -> list[Utterance]:
    """Manifest rows -> Utterances; feature paths resolve against the manifest dir."""
    base = os.path.dirname(os.path.abspath(path))
    utts: list[Utterance] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise CorpusError(
                    f"{path}:{line_no}: expected 3 or 4 tab-separated fields, "
                    f"got {len(parts)}"
                )
            utt_id, modality, text = parts[:3]
            if modality == "speech":
                if len(parts) != 4:
                    raise CorpusError(
                        f"{path}:{line_no}: speech row is missing its feature path"
                    )
                speech = None
                if load_features:
                    feat_path = os.path.join(base, parts[3])
                    try:
                        speech = read_feature_file(feat_path)
                    except OSError as err:
                        raise CorpusError(
                            f"{path}:{line_no}: utterance {utt_id!r}: "
                            f"cannot read features: {err}"
                        ) from err
                utts.append(Utterance(utt_id=utt_id, text=text, speech=speech))
            elif modality == "text":
                if len(parts) == 4 and parts[3]:
                    raise CorpusError(
                        f"{path}:{line_no}: text row must not carry a feature path"
                    )
                utts.append(Utterance(utt_id=utt_id, text=text))
            else:
                raise CorpusError(f"{path}:{line_no}: unknown modality {modality!r}")
    if not utts:
        raise CorpusError(f"manifest {path} is empty")
    return utts
