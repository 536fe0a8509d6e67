"""Command-line pipeline: one executable, subcommands over a shared config format.

Config files hold `key=value` lines ('#' starts a comment). Precedence is
defaults, then the file, then command-line flags; later sources win. Every
artifact-producing subcommand writes the resolved configuration next to its
outputs, so a run can be reproduced bit for bit from that file at workers=1.

Exit statuses: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from .adaptation import AdaptConfig, MODES, adapt, train_lm_head
from .checkpoint import config_fingerprint, load_lm, load_model, save_lm, save_model
from .corpus import (
    CorpusSpec,
    build_corpus,
    corpus_spec_kv,
    parse_corpus_spec,
    read_manifest,
)
from .decoding import DecodeConfig
from .features import AugmentPolicy, SymbolTable
from .figures import plot_training_curves, plot_wer_summary
from .model import ExternalLm, LmConfig, ModelConfig, TransducerModel
from .scoring import (
    decode_corpus,
    score_corpus,
    write_decode_output,
    write_hypotheses,
    write_wer_report,
)
from .tape import Parameter, constant, finite_difference_check, log_softmax, reshape
from .training import (
    AdamState,
    LmTrainConfig,
    TrainConfig,
    Utterance,
    fit,
    read_metrics,
    train_external_lm,
    write_metrics,
)
from .transducer import transducer_loss

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(ValueError):
    """Bad invocation or configuration; maps to exit status 1."""


# -- shared config format ------------------------------------------------------


def read_config_file(path: str, warn=None) -> dict[str, str]:
    if not os.path.isfile(path):
        raise UsageError(f"config file {path!r} does not exist")
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(
                    f"{path}:{line_no}: expected key=value, got {line!r}"
                )
            key, value = (part.strip() for part in line.split("=", 1))
            if key in values and warn is not None:
                warn(f"{path}:{line_no}: duplicate key {key!r}; last value wins")
            values[key] = value
    return values


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, str]

    def fingerprint(self) -> str:
        return config_fingerprint(self.values)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self.values):
                fh.write(f"{key}={self.values[key]}\n")


def parse_config(defaults: dict[str, str], path: str | None,
                 overrides: dict[str, str], warn=None) -> RunConfig:
    """Merge defaults <- config file <- overrides; unknown keys are rejected."""
    merged = dict(defaults)
    sources = []
    if path is not None:
        sources.append((path, read_config_file(path, warn)))
    sources.append(("command line", overrides))
    for origin, kv in sources:
        for key, value in kv.items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} (from {origin})")
            merged[key] = value
    return RunConfig(values=merged)


def _typed(cfg: RunConfig, key: str, cast):
    raw = cfg.values[key]
    try:
        return cast(raw)
    except (ValueError, TypeError):
        raise UsageError(f"cannot parse config key {key}={raw!r}") from None


def _bool(raw: str) -> bool:
    if raw not in ("0", "1"):
        raise ValueError(raw)
    return raw == "1"


def _float_tuple(raw: str) -> tuple[float, ...]:
    return tuple(float(part) for part in raw.split(",") if part.strip())


# -- per-subcommand defaults -----------------------------------------------------


CORPUS_DEFAULTS = corpus_spec_kv(CorpusSpec())

_ARCH_KEYS = ("encoder_layers", "encoder_width", "prediction_width",
              "joint_width", "speech_width", "text_width")

TRAIN_DEFAULTS = {
    **TrainConfig().to_kv(),
    **{k: v
       for k, v in ModelConfig(SymbolTable.default_alphabet().symbols).to_kv().items()
       if k in _ARCH_KEYS},
}

ADAPT_DEFAULTS = AdaptConfig().to_kv()

LM_DEFAULTS = {**LmTrainConfig().to_kv(), "width": "64", "layers": "2"}

DECODE_DEFAULTS = DecodeConfig().to_kv()


def build_train_config(cfg: RunConfig) -> TrainConfig:
    augment = AugmentPolicy(
        seq_noise_prob=_typed(cfg, "seq_noise_prob", float),
        seq_noise_scale=_typed(cfg, "seq_noise_scale", float),
        time_mask_count=_typed(cfg, "time_mask_count", int),
        time_mask_max=_typed(cfg, "time_mask_max", int),
        feature_mask_count=_typed(cfg, "feature_mask_count", int),
        feature_mask_max=_typed(cfg, "feature_mask_max", int),
        speed_tempo_factors=_typed(cfg, "speed_tempo_factors", _float_tuple),
        textogram_mask_rate=_typed(cfg, "textogram_mask_rate", float),
        textogram_duration=_typed(cfg, "textogram_duration", int),
    )
    return TrainConfig(
        epochs=_typed(cfg, "epochs", int),
        warmup_epochs=_typed(cfg, "warmup_epochs", int),
        batch_size=_typed(cfg, "batch_size", int),
        start_lr=_typed(cfg, "start_lr", float),
        max_lr=_typed(cfg, "max_lr", float),
        weight_decay=_typed(cfg, "weight_decay", float),
        adam_beta1=_typed(cfg, "adam_beta1", float),
        adam_beta2=_typed(cfg, "adam_beta2", float),
        adam_epsilon=_typed(cfg, "adam_epsilon", float),
        grad_clip=_typed(cfg, "grad_clip", float),
        seed=_typed(cfg, "seed", int),
        bucket_frames=_typed(cfg, "bucket_frames", int),
        use_text_twins=_typed(cfg, "use_text_twins", _bool),
        augment=augment,
    )


def build_model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        alphabet=SymbolTable.default_alphabet().symbols,
        encoder_layers=_typed(cfg, "encoder_layers", int),
        encoder_width=_typed(cfg, "encoder_width", int),
        prediction_width=_typed(cfg, "prediction_width", int),
        joint_width=_typed(cfg, "joint_width", int),
        speech_width=_typed(cfg, "speech_width", int),
        text_width=_typed(cfg, "text_width", int),
    )


def build_adapt_config(cfg: RunConfig) -> AdaptConfig:
    return AdaptConfig(
        mode=cfg.values["mode"],
        epochs=_typed(cfg, "epochs", int),
        warmup_epochs=_typed(cfg, "warmup_epochs", int),
        batch_size=_typed(cfg, "batch_size", int),
        start_lr=_typed(cfg, "start_lr", float),
        max_lr=_typed(cfg, "max_lr", float),
        weight_decay=_typed(cfg, "weight_decay", float),
        grad_clip=_typed(cfg, "grad_clip", float),
        nnlm_loss_weight=_typed(cfg, "nnlm_loss_weight", float),
        kl_weight=_typed(cfg, "kl_weight", float),
        l2_weight=_typed(cfg, "l2_weight", float),
        textogram_mask_rate=_typed(cfg, "textogram_mask_rate", float),
        textogram_duration=_typed(cfg, "textogram_duration", int),
        seed=_typed(cfg, "seed", int),
        bucket_frames=_typed(cfg, "bucket_frames", int),
    )


def build_lm_train_config(cfg: RunConfig) -> LmTrainConfig:
    return LmTrainConfig(
        epochs=_typed(cfg, "epochs", int),
        warmup_epochs=_typed(cfg, "warmup_epochs", int),
        batch_size=_typed(cfg, "batch_size", int),
        start_lr=_typed(cfg, "start_lr", float),
        max_lr=_typed(cfg, "max_lr", float),
        weight_decay=_typed(cfg, "weight_decay", float),
        adam_beta1=_typed(cfg, "adam_beta1", float),
        adam_beta2=_typed(cfg, "adam_beta2", float),
        adam_epsilon=_typed(cfg, "adam_epsilon", float),
        grad_clip=_typed(cfg, "grad_clip", float),
        seed=_typed(cfg, "seed", int),
    )


def build_decode_config(cfg: RunConfig) -> DecodeConfig:
    return DecodeConfig(
        beam=_typed(cfg, "beam", int),
        fusion_weight=_typed(cfg, "fusion_weight", float),
        textogram_duration=_typed(cfg, "textogram_duration", int),
        workers=_typed(cfg, "workers", int),
    )


# -- handler helpers ------------------------------------------------------------


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _seed_override(args) -> dict[str, str]:
    return {} if args.seed is None else {"seed": str(args.seed)}


def _manifest_texts(path: str) -> list[str]:
    return [u.text for u in read_manifest(path, load_features=False)]


def _opt_arrays(state: AdamState) -> list[tuple[str, np.ndarray]]:
    arrays = [(f"opt.m.{name}", arr) for name, arr in sorted(state.m.items())]
    arrays += [(f"opt.v.{name}", arr) for name, arr in sorted(state.v.items())]
    return arrays


def _wrap_config_error(build, cfg):
    try:
        return build(cfg)
    except UsageError:
        raise
    except Exception as err:
        raise UsageError(str(err)) from err


# -- subcommands ------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg = parse_config(CORPUS_DEFAULTS, args.config, _seed_override(args), _warn)
    for key in ("train_a", "dev_a", "adapt_b", "test_b", "seed", "channels",
                "duration_min", "duration_max"):
        _typed(cfg, key, int)
    for key in ("noise_sigma", "offset_sigma"):
        _typed(cfg, key, float)
    spec = _wrap_config_error(lambda c: parse_corpus_spec(c.values), cfg)
    out = _out_dir(args.out)
    cfg.write(os.path.join(out, "gen-corpus.config"))
    manifests = build_corpus(spec, out, SymbolTable.default_alphabet(),
                             status=print)
    print(f"corpus written to {out}: {', '.join(sorted(manifests))}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config(TRAIN_DEFAULTS, args.config, _seed_override(args), _warn)
    tcfg = _wrap_config_error(build_train_config, cfg)
    mcfg = _wrap_config_error(build_model_config, cfg)
    fingerprint = cfg.fingerprint()
    out = _out_dir(args.out)
    cfg.write(os.path.join(out, "train.config"))
    utts = read_manifest(args.manifest)

    resume_step = 0
    opt_state = None
    if args.resume is not None:
        loaded = load_model(args.resume)
        if loaded.kv.get("train_fingerprint") != fingerprint:
            raise RuntimeError(
                f"checkpoint {args.resume!r} was produced by a different "
                "training configuration; refusing to resume"
            )
        model = loaded.model
        resume_step = int(loaded.kv["train_step"])
        opt_state = AdamState(t=int(loaded.kv["opt_t"]))
        for name, arr in loaded.extra_arrays.items():
            if name.startswith("opt.m."):
                opt_state.m[name[len("opt.m."):]] = arr
            elif name.startswith("opt.v."):
                opt_state.v[name[len("opt.v."):]] = arr
        print(f"resuming from {args.resume} at step {resume_step}")
    else:
        model = TransducerModel(mcfg, seed=tcfg.seed)

    model_path = os.path.join(out, "model.togm")

    def save_state(state: AdamState, step: int) -> None:
        save_model(model_path, model,
                   extra_kv={"train_fingerprint": fingerprint,
                             "train_step": str(step),
                             "opt_t": str(state.t)},
                   extra_arrays=_opt_arrays(state))

    result = fit(model, utts, tcfg, resume_step=resume_step,
                 opt_state=opt_state, stop_after_steps=args.stop_after_steps,
                 status=print,
                 on_epoch=lambda row, state, step: save_state(state, step))
    final_step = (result.total_steps if args.stop_after_steps is None
                  else args.stop_after_steps)
    save_state(result.opt_state, final_step)

    rows = result.metrics
    metrics_path = os.path.join(out, "metrics.tsv")
    if args.resume is not None and os.path.exists(metrics_path) and rows:
        prior = [r for r in read_metrics(metrics_path) if r.epoch < rows[0].epoch]
        rows = prior + rows
    write_metrics(metrics_path, rows)
    if rows:
        plot_training_curves(rows, os.path.join(out, "training_curves.png"))
    print(f"model written to {model_path}")
    return EXIT_OK


def cmd_lm_head_train(args) -> int:
    cfg = parse_config(ADAPT_DEFAULTS, args.config, _seed_override(args), _warn)
    acfg = _wrap_config_error(build_adapt_config, cfg)
    out = _out_dir(args.out)
    cfg.write(os.path.join(out, "lm-head-train.config"))
    loaded = load_model(args.model)
    texts = _manifest_texts(args.manifest)
    rows = []
    ce = train_lm_head(loaded.model, texts, config=acfg, status=print,
                       on_epoch=rows.append)
    model_path = os.path.join(out, "model.togm")
    save_model(model_path, loaded.model,
               extra_kv={"head_fingerprint": cfg.fingerprint(),
                         "head_cross_entropy": repr(ce)})
    write_metrics(os.path.join(out, "metrics.tsv"), rows)
    if rows:
        plot_training_curves(rows, os.path.join(out, "training_curves.png"),
                             ylabel="head cross-entropy per token")
    print(f"head cross-entropy {ce:.4f} nats/token; model written to {model_path}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    overrides = _seed_override(args)
    if args.mode is not None:
        overrides["mode"] = args.mode
    cfg = parse_config(ADAPT_DEFAULTS, args.config, overrides, _warn)
    acfg = _wrap_config_error(build_adapt_config, cfg)
    out = _out_dir(args.out)
    cfg.write(os.path.join(out, "adapt.config"))
    loaded = load_model(args.model)
    texts = _manifest_texts(args.manifest)
    rows = adapt(loaded.model, texts, acfg, status=print)
    model_path = os.path.join(out, "model.togm")
    save_model(model_path, loaded.model,
               extra_kv={"adapt_fingerprint": cfg.fingerprint(),
                         "adapt_mode": acfg.mode})
    write_metrics(os.path.join(out, "metrics.tsv"), rows)
    if rows:
        plot_training_curves(rows, os.path.join(out, "training_curves.png"))
    print(f"adapted model ({acfg.mode}) written to {model_path}")
    return EXIT_OK


def cmd_lm_train(args) -> int:
    cfg = parse_config(LM_DEFAULTS, args.config, _seed_override(args), _warn)
    lcfg = _wrap_config_error(build_lm_train_config, cfg)
    lm_config = _wrap_config_error(
        lambda c: LmConfig(alphabet=SymbolTable.default_alphabet().symbols,
                           width=_typed(c, "width", int),
                           layers=_typed(c, "layers", int)),
        cfg,
    )
    out = _out_dir(args.out)
    cfg.write(os.path.join(out, "lm-train.config"))
    texts = _manifest_texts(args.manifest)
    lm = ExternalLm(lm_config, seed=lcfg.seed)
    rows = train_external_lm(lm, texts, lcfg, status=print)
    lm_path = os.path.join(out, "lm.togm")
    save_lm(lm_path, lm, extra_kv={"lm_fingerprint": cfg.fingerprint()})
    write_metrics(os.path.join(out, "metrics.tsv"), rows)
    plot_training_curves(rows, os.path.join(out, "training_curves.png"),
                         ylabel="lm cross-entropy per token")
    print(f"language model written to {lm_path}")
    return EXIT_OK


def _decode_setup(args) -> tuple[RunConfig, DecodeConfig, object, object]:
    overrides = {}
    if args.beam is not None:
        overrides["beam"] = str(args.beam)
    if args.fusion_weight is not None:
        overrides["fusion_weight"] = repr(args.fusion_weight)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    cfg = parse_config(DECODE_DEFAULTS, args.config, overrides, _warn)
    dcfg = _wrap_config_error(build_decode_config, cfg)
    lm = load_lm(args.lm)[0] if args.lm is not None else None
    if dcfg.fusion_weight != 0.0 and lm is None:
        raise UsageError("--fusion-weight needs --lm pointing at a trained "
                         "language model checkpoint")
    loaded = load_model(args.model)
    return cfg, dcfg, loaded.model, lm


def cmd_decode(args) -> int:
    cfg, dcfg, model, lm = _decode_setup(args)
    out = _out_dir(args.out)
    cfg.write(os.path.join(out, "decode.config"))
    pairs = decode_corpus(model, args.manifest, dcfg, lm=lm, status=print)
    hyp_path = os.path.join(out, "decode.tsv")
    write_hypotheses(hyp_path, pairs)
    print(f"{len(pairs)} hypotheses written to {hyp_path}")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg, dcfg, model, lm = _decode_setup(args)
    out = _out_dir(args.out)
    cfg.write(os.path.join(out, "score.config"))
    pooled, scores = score_corpus(model, args.manifest, dcfg, lm=lm, status=print)
    write_decode_output(os.path.join(out, "decode.tsv"), scores)
    report_path = os.path.join(out, "wer.txt")
    write_wer_report(report_path, pooled, scores)
    plot_wer_summary(pooled, scores, os.path.join(out, "wer_summary.png"))
    print(f"corpus wer {100.0 * pooled.wer:.2f}% "
          f"({pooled.errors} errors / {pooled.reference_tokens} tokens); "
          f"report written to {report_path}")
    return EXIT_OK


# -- self-test --------------------------------------------------------------------


def _path_sum_loss(lat: np.ndarray, labels: np.ndarray) -> float:
    """Transducer nll by explicit path enumeration; exponential, tiny inputs only."""
    t_max, u_max = lat.shape[0] - 1, lat.shape[1] - 1

    def from_cell(t: int, u: int) -> float:
        total = 0.0
        if t == t_max and u == u_max:
            total += math.exp(lat[t, u, 0])
        elif t < t_max:
            total += math.exp(lat[t, u, 0]) * from_cell(t + 1, u)
        if u < u_max:
            total += math.exp(lat[t, u, labels[u]]) * from_cell(t, u + 1)
        return total

    return -math.log(from_cell(0, 0))


def cmd_check(args) -> int:
    rng = np.random.default_rng(0 if args.seed is None else args.seed)

    loss_err = 0.0
    for _ in range(50):
        t = int(rng.integers(2, 5))
        u = int(rng.integers(0, 4))
        k = int(rng.integers(2, 6))
        raw = rng.normal(size=(t, u + 1, k))
        lat = raw - np.log(np.exp(raw).sum(axis=-1, keepdims=True))
        labels = rng.integers(1, k, size=u).astype(np.int64)
        ours = float(transducer_loss(constant(lat), labels).data)
        ref = _path_sum_loss(lat, labels)
        loss_err = max(loss_err, abs(ours - ref))
    print(f"transducer loss oracle max error: {loss_err:.3e}")

    t, u, k = 3, 2, 4
    w = Parameter("check.w", rng.normal(size=(t * (u + 1), k)))
    labels = np.asarray([1, 2], dtype=np.int64)

    def loss():
        return transducer_loss(reshape(log_softmax(w), (t, u + 1, k)), labels)

    grad_err = finite_difference_check(loss, [w], epsilon=1e-6, atol=1e-9)
    print(f"gradient check max relative error: {grad_err:.3e}")

    if loss_err < 1e-6 and grad_err < 1e-4:
        print("self-test passed")
        return EXIT_OK
    print("self-test FAILED", file=sys.stderr)
    return EXIT_RUNTIME


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="togkit",
        description="Train, adapt, decode, and score dual-modality "
                    "speech/text transducer models.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)

    def common(p, *, config=True, seed=True):
        if config:
            p.add_argument("--config", metavar="PATH",
                           help="key=value config file; flags override it")
        if seed:
            p.add_argument("--seed", type=int, metavar="U64",
                           help="override the config seed")

    gen = sub.add_parser("gen-corpus", help="render a synthetic corpus")
    gen.add_argument("--out", required=True, metavar="DIR")
    common(gen)

    train = sub.add_parser("train", help="train a transducer on a manifest")
    train.add_argument("--manifest", required=True, metavar="PATH")
    train.add_argument("--out", required=True, metavar="DIR")
    train.add_argument("--resume", metavar="PATH",
                       help="continue an interrupted run from its checkpoint")
    train.add_argument("--stop-after-steps", type=int, metavar="N",
                       help="stop once N optimizer steps exist, even mid-epoch")
    common(train)

    head = sub.add_parser("lm-head-train",
                          help="train the next-symbol head on base transcripts")
    head.add_argument("--model", required=True, metavar="PATH")
    head.add_argument("--manifest", required=True, metavar="PATH")
    head.add_argument("--out", required=True, metavar="DIR")
    common(head)

    ad = sub.add_parser("adapt", help="adapt a trained model to new-domain text")
    ad.add_argument("--model", required=True, metavar="PATH")
    ad.add_argument("--manifest", required=True, metavar="PATH")
    ad.add_argument("--out", required=True, metavar="DIR")
    ad.add_argument("--mode", choices=MODES)
    common(ad)

    lmt = sub.add_parser("lm-train", help="train the external language model")
    lmt.add_argument("--manifest", required=True, metavar="PATH")
    lmt.add_argument("--out", required=True, metavar="DIR")
    common(lmt)

    def decode_flags(p):
        p.add_argument("--model", required=True, metavar="PATH")
        p.add_argument("--manifest", required=True, metavar="PATH")
        p.add_argument("--out", required=True, metavar="DIR")
        p.add_argument("--beam", type=int, metavar="N")
        p.add_argument("--lm", metavar="PATH",
                       help="external language model checkpoint")
        p.add_argument("--fusion-weight", type=float, metavar="F")
        p.add_argument("--workers", type=int, metavar="N")
        common(p, seed=False)

    dec = sub.add_parser("decode", help="write hypotheses for a speech manifest")
    decode_flags(dec)

    score = sub.add_parser("score", help="decode and report word error rate")
    decode_flags(score)

    check = sub.add_parser("check", help="run the oracle/gradient self-test")
    common(check, config=False)

    return parser


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "lm-head-train": cmd_lm_head_train,
    "adapt": cmd_adapt,
    "lm-train": cmd_lm_train,
    "decode": cmd_decode,
    "score": cmd_score,
    "check": cmd_check,
}


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return HANDLERS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
