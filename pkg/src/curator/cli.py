"""Command-line pipeline for curating reasoning-trace datasets.

Subcommands cover the whole flow:

  generate    queries -> bundles, via an OpenAI-compatible endpoint
  score       bundles -> scored bundles (uncertainty values)
  filter      scored -> retained subset under a strategy and fraction
  evaluate    scored/subset -> accuracy and per-class metrics with bootstrap
  stratify    scored -> decile report CSV
  sweep       scored -> subset-quality CSV across retention fractions
  export-sft  subset -> chat-format fine-tuning examples
  simulate    nothing -> synthetic bundles with controllable difficulty

Every command that writes a dataset also writes `<output>.manifest.json`
with counts and the resolved-config hash (skipped when writing to stdout).
Exit codes: 0 success, 1 fatal error, 2 partial failure, 64 usage error.
Dataset paths accept '-' for stdin/stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone

from . import config as cfgmod
from . import storage
from .errors import CuratorError, JsonlFormatError, UsageError
from .filtering import (
    RANDOM_FILTER_PRNG,
    FilterStrategy,
    apply_filter,
    decile_stratify,
)
from .llm_client import UsageCounters, generate_dataset, sft_record
from .metrics import (
    evaluate,
    pairs_from_scored,
    subset_quality_sweep,
    sweep_csv_lines,
)
from .model import LABEL_ORDER, DatasetManifest, ParseStatus
from .similarity import get_provider
from .simulate import SIM_PRNG, simulate_dataset
from .uncertainty import ScoreStats, score_dataset

log = logging.getLogger("curator")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as UsageError (exit 64)."""

    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(
    out_path: str,
    source_path: str,
    cfg_hash: str,
    class_counts: dict,
    n_examples: int,
    rejected: int = 0,
    seed: int | None = None,
    prng: str | None = None,
) -> None:
    if out_path == "-":
        return
    manifest = DatasetManifest(
        source_path=source_path,
        n_examples=n_examples,
        class_counts=class_counts,
        rejected=rejected,
        created_at=_now(),
        pipeline_config_hash=cfg_hash,
        seed=seed,
        prng=prng,
    )
    storage.write_manifest(out_path + ".manifest.json", manifest)


def _check_fraction(fraction: float) -> float:
    if not 0 < fraction <= 1:
        raise UsageError(f"--fraction must be in (0, 1], got {fraction}")
    return fraction


def _count_by_predicted(items) -> dict:
    counts: dict = {}
    for ex in items:
        counts[ex.predicted_label] = counts.get(ex.predicted_label, 0) + 1
    return counts


def cmd_generate(config: dict, args) -> int:
    gen_cfg = cfgmod.generation_config(config)
    cfg_hash = cfgmod.config_hash(config)
    counters = UsageCounters()
    failures: list[dict] = []
    class_counts: dict = {}
    n_parsed = 0
    rejected = 0
    queries = storage.read_queries(args.queries)
    with storage.open_output(args.out) as fh:
        for query, bundle, error in generate_dataset(gen_cfg, queries, counters):
            if bundle is None:
                failures.append({"id": query.id, "error": error})
                continue
            fh.write(storage.dumps(storage.bundle_to_record(bundle)) + "\n")
            if bundle.greedy.parse_status is ParseStatus.OK:
                n_parsed += 1
                label = bundle.greedy.answer
                class_counts[label] = class_counts.get(label, 0) + 1
            else:
                rejected += 1
    usage = counters.snapshot()
    usage["failures"] = failures
    if args.out != "-":
        with open(args.out + ".usage.json", "w", encoding="utf-8") as fh:
            json.dump(usage, fh, ensure_ascii=False, indent=2)
            fh.write("\n")
    _write_manifest(
        args.out, args.queries, cfg_hash, class_counts, n_parsed, rejected=rejected
    )
    log.info(
        "generated %d bundles (%d unparsed answers, %d failed queries, %d requests)",
        n_parsed + rejected, rejected, len(failures), usage["requests"],
    )
    if failures:
        log.warning("%d queries failed permanently", len(failures))
        return 2
    return 0


def cmd_score(config: dict, args) -> int:
    cfg_hash = cfgmod.config_hash(config)
    provider_name = config["score"]["provider"]
    scorer_cfg = cfgmod.scorer_config(config) if provider_name == "remote" else None
    provider = get_provider(provider_name, scorer_cfg)
    variant = cfgmod._parse_variant(config["score"]["variant"])
    workers = int(config["score"]["workers"])
    if workers < 1:
        raise UsageError(f"--workers must be >= 1, got {workers}")
    stats = ScoreStats()
    bundles = storage.read_bundles(args.bundles)
    try:
        with storage.open_output(args.out) as fh:
            for ex in score_dataset(bundles, provider, variant, workers=workers, stats=stats):
                fh.write(storage.dumps(storage.scored_to_record(ex)) + "\n")
    except CuratorError:
        # do not leave a half-written dataset behind
        if args.out != "-":
            import os

            try:
                os.unlink(args.out)
            except OSError:
                pass
        raise
    _write_manifest(
        args.out,
        args.bundles,
        cfg_hash,
        stats.counts_by_label(),
        stats.n_scored,
        rejected=stats.rejected,
    )
    log.info("scored %d bundles (%d rejected) with %s/%s",
             stats.n_scored, stats.rejected, provider.name, variant.value)
    return 0


def cmd_filter(config: dict, args) -> int:
    cfg_hash = cfgmod.config_hash(config)
    spec = cfgmod.filter_spec(config)
    _check_fraction(spec.fraction)
    scored = list(storage.read_scored(args.scored))
    subset = apply_filter(scored, spec)
    storage.write_scored(args.out, subset)
    random_strategies = (FilterStrategy.RANDOM_UNIFORM, FilterStrategy.RANDOM_STRATIFIED)
    _write_manifest(
        args.out,
        args.scored,
        cfg_hash,
        _count_by_predicted(subset),
        len(subset),
        seed=spec.seed if spec.strategy in random_strategies else None,
        prng=RANDOM_FILTER_PRNG if spec.strategy in random_strategies else None,
    )
    log.info(
        "retained %d of %d examples (%s, fraction %s, key %s)",
        len(subset), len(scored), spec.strategy.value, spec.fraction, spec.ranking_key.value,
    )
    return 0


def cmd_evaluate(config: dict, args) -> int:
    n_resamples = int(config["bootstrap"]["n_resamples"])
    seed = int(config["bootstrap"]["seed"])
    if n_resamples < 1:
        raise UsageError(f"--resamples must be >= 1, got {n_resamples}")
    pairs = pairs_from_scored(storage.read_scored(args.scored))
    report = evaluate(pairs, n_resamples=n_resamples, seed=seed)
    with storage.open_output(args.out) as fh:
        json.dump(report.to_dict(), fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    acc = report.accuracy
    print(f"n={report.n} resamples={report.n_resamples} seed={report.seed}")
    print(f"accuracy {acc.point:.4f} +/- {acc.se:.4f} (95% CI {acc.ci_low:.4f}..{acc.ci_high:.4f})")
    print(f"{'class':<32}{'precision':>18}{'recall':>18}{'f1':>18}")
    for label in LABEL_ORDER:
        row = report.per_class[label]
        cells = "".join(
            f"{row[m].point:>11.4f} +/-{row[m].se:.4f}" for m in ("precision", "recall", "f1")
        )
        print(f"{label.value:<32}{cells}")
    return 0


def cmd_stratify(config: dict, args) -> int:
    key = cfgmod._parse_variant(config["filter"]["key"])
    scored = list(storage.read_scored(args.scored))
    report = decile_stratify(scored, key=key)
    with storage.open_output(args.out) as fh:
        fh.write("\n".join(report.csv_lines()) + "\n")
    log.info("wrote %d decile rows (key %s)", len(report.bins), key.value)
    return 0


def cmd_sweep(config: dict, args) -> int:
    try:
        fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    except ValueError:
        raise UsageError(f"bad --fractions list: {args.fractions!r}") from None
    if not fractions:
        raise UsageError("--fractions must name at least one fraction")
    for f in fractions:
        _check_fraction(f)
    spec = cfgmod.filter_spec(config)
    scored = list(storage.read_scored(args.scored))
    rows = subset_quality_sweep(
        scored, fractions, strategy=spec.strategy, key=spec.ranking_key, seed=spec.seed
    )
    with storage.open_output(args.out) as fh:
        fh.write("\n".join(sweep_csv_lines(rows)) + "\n")
    log.info("swept %d fractions (%s, key %s)",
             len(rows), spec.strategy.value, spec.ranking_key.value)
    return 0


def cmd_export_sft(config: dict, args) -> int:
    cfg_hash = cfgmod.config_hash(config)
    n_written = 0
    rejected = 0
    class_counts: dict = {}
    with storage.open_output(args.out) as fh:
        for bundle, _ in storage.read_records(args.subset):
            if bundle.greedy.parse_status is not ParseStatus.OK:
                log.warning("skipping %s: greedy trace has no parsed answer", bundle.query.id)
                rejected += 1
                continue
            fh.write(storage.dumps(sft_record(bundle)) + "\n")
            n_written += 1
            label = bundle.greedy.answer
            class_counts[label] = class_counts.get(label, 0) + 1
    _write_manifest(
        args.out, args.subset, cfg_hash, class_counts, n_written, rejected=rejected
    )
    log.info("exported %d fine-tuning examples (%d skipped)", n_written, rejected)
    return 0


def cmd_simulate(config: dict, args) -> int:
    cfg_hash = cfgmod.config_hash(config)
    sim_cfg = cfgmod.sim_config(config)
    class_counts: dict = {}
    n = 0
    with storage.open_output(args.out) as fh:
        for bundle in simulate_dataset(sim_cfg):
            fh.write(storage.dumps(storage.bundle_to_record(bundle)) + "\n")
            label = bundle.greedy.answer
            class_counts[label] = class_counts.get(label, 0) + 1
            n += 1
    _write_manifest(
        args.out, "simulated", cfg_hash, class_counts, n,
        seed=sim_cfg.seed, prng=SIM_PRNG,
    )
    log.info("simulated %d bundles (seed %d)", n, sim_cfg.seed)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="curator", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="path to a JSON config file")
    parser.add_argument("--log-level", help="logging level (overrides config)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate trace bundles for a queries file")
    p.add_argument("queries", help="queries JSONL ('-' for stdin)")
    p.add_argument("out", help="output bundles JSONL ('-' for stdout)")
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model")
    p.add_argument("--k", type=int)
    p.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    p.add_argument("--max-retries", dest="max_retries", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="attach uncertainty scores to bundles")
    p.add_argument("bundles", help="bundles JSONL ('-' for stdin)")
    p.add_argument("out", help="output scored JSONL ('-' for stdout)")
    p.add_argument("--provider", choices=["lexical", "answer", "remote"])
    p.add_argument("--variant", choices=["cocoa", "ppl", "consistency"])
    p.add_argument("--workers", type=int)
    p.add_argument("--scorer-url", dest="scorer_url")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("filter", help="retain the lowest-uncertainty subset")
    p.add_argument("scored", help="scored JSONL ('-' for stdin)")
    p.add_argument("out", help="output subset JSONL ('-' for stdout)")
    p.add_argument("--strategy", choices=[s.value for s in FilterStrategy])
    p.add_argument("--fraction", type=float)
    p.add_argument("--key", choices=["cocoa", "ppl", "consistency"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("evaluate", help="accuracy and per-class metrics with bootstrap")
    p.add_argument("scored", help="scored/subset JSONL with gold labels")
    p.add_argument("out", help="output report JSON ('-' for stdout)")
    p.add_argument("--resamples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stratify", help="decile report over uncertainty bins")
    p.add_argument("scored", help="scored JSONL with gold labels")
    p.add_argument("out", help="output CSV ('-' for stdout)")
    p.add_argument("--key", choices=["cocoa", "ppl", "consistency"])
    p.set_defaults(func=cmd_stratify)

    p = sub.add_parser("sweep", help="subset quality across retention fractions")
    p.add_argument("scored", help="scored JSONL with gold labels")
    p.add_argument("out", help="output CSV ('-' for stdout)")
    p.add_argument("--fractions", required=True, help="comma-separated, e.g. 0.01,0.1,1.0")
    p.add_argument("--strategy", choices=[s.value for s in FilterStrategy])
    p.add_argument("--key", choices=["cocoa", "ppl", "consistency"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-sft", help="render a subset as fine-tuning messages")
    p.add_argument("subset", help="bundles/scored JSONL ('-' for stdin)")
    p.add_argument("out", help="output SFT JSONL ('-' for stdout)")
    p.set_defaults(func=cmd_export_sft)

    p = sub.add_parser("simulate", help="produce a synthetic bundle dataset")
    p.add_argument("out", help="output bundles JSONL ('-' for stdout)")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--calibration", type=float)
    p.add_argument("--independent-noise", action="store_true", default=None)
    p.add_argument("--class-scale", dest="class_scale",
                   help='per-class perplexity scale, e.g. "up=3,down=3,nonreg=1"')
    p.set_defaults(func=cmd_simulate)

    return parser


_SCALE_ALIASES = {"up": "upregulated", "down": "downregulated", "nonreg": "not differentially expressed"}


def _parse_scale_flag(raw: str) -> dict:
    scale = {label.value: 1.0 for label in LABEL_ORDER}
    for part in raw.split(","):
        if not part.strip():
            continue
        name, _, value = part.partition("=")
        key = _SCALE_ALIASES.get(name.strip().lower())
        if key is None or not value:
            raise UsageError(f"bad --class-scale entry {part!r}; use up=,down=,nonreg=")
        try:
            scale[key] = float(value)
        except ValueError:
            raise UsageError(f"bad --class-scale value {value!r}") from None
    return scale


def _apply_flag_overrides(config: dict, args) -> None:
    flag_map = {
        "generate": [
            ("base_url", "llm", "base_url"), ("model", "llm", "model"),
            ("k", "llm", "k"), ("max_in_flight", "llm", "max_in_flight"),
            ("max_retries", "llm", "max_retries"),
        ],
        "score": [
            ("provider", "score", "provider"), ("variant", "score", "variant"),
            ("workers", "score", "workers"), ("scorer_url", "scorer", "base_url"),
        ],
        "filter": [
            ("strategy", "filter", "strategy"), ("fraction", "filter", "fraction"),
            ("key", "filter", "key"), ("seed", "filter", "seed"),
        ],
        "evaluate": [
            ("resamples", "bootstrap", "n_resamples"), ("seed", "bootstrap", "seed"),
        ],
        "stratify": [("key", "filter", "key")],
        "sweep": [
            ("strategy", "filter", "strategy"), ("key", "filter", "key"),
            ("seed", "filter", "seed"),
        ],
        "simulate": [
            ("n", "sim", "n"), ("k", "sim", "k"), ("seed", "sim", "seed"),
            ("calibration", "sim", "calibration"),
            ("independent_noise", "sim", "independent_noise"),
        ],
    }
    for attr, section, key in flag_map.get(args.command, []):
        cfgmod.set_option(config, section, key, getattr(args, attr, None))
    if args.command == "simulate" and getattr(args, "class_scale", None):
        config["sim"]["class_scale"] = _parse_scale_flag(args.class_scale)
    if args.log_level is not None:
        config["log_level"] = args.log_level


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = cfgmod.load_config(args.config)
        _apply_flag_overrides(config, args)
        logging.basicConfig(
            level=getattr(logging, str(config["log_level"]).upper(), logging.INFO),
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        return args.func(config, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 64
    except JsonlFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CuratorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
