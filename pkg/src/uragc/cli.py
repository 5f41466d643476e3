"""Command-line entry point: run, depth-sweep, calibrate, forge, synth, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .conformal import METHODS, ScoredInstance, calibrate, save_models
from .config import ProviderConfig, RunConfig, resolve
from .core import OptionDistribution, load_corpus, load_dataset, split, split_by_count
from .errors import CapabilityError, ConfigError, ReportError, UragcError
from .evaluation import DEPTH_SWEEP, EvalConfig, ProtocolSpec, config_hash, depth_sweep, run_protocol
from .forge import forge_dataset, forge_report, load_seeds, write_provenance
from .prompts import PromptLibrary
from .providers import ChatClient, Embedder, HttpBackend, MockBackend, NliClient
from .report import (
    load_report,
    load_summary,
    render_csv,
    render_deltas,
    render_deltas_csv,
    render_panels,
    summaries_to_entries,
    write_report,
)
from .retrieval import build_index
from .strategies import NEEDS_INDEX, StrategyEnv, build_raptor_tree
from .synth import SynthParams, write_world

log = logging.getLogger("uragc")

EXIT_OK, EXIT_ERROR, EXIT_INVARIANT = 0, 1, 2


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # exit code 2 is reserved for failed run invariants, so usage errors raise instead
    def error(self, message):
        raise UsageError("usage", message)


class _Unconfigured:
    def __init__(self, role: str):
        self.name = f"unconfigured-{role}"
        self.role = role

    def _fail(self, *_a, **_k):
        raise CapabilityError(f"no {self.role} provider configured (set providers.{self.role}, an env url, or --mock)")

    chat_raw = embed_raw = nli_raw = _fail


def build_backends(cfg: RunConfig) -> dict:
    cache: dict = {}
    out = {}
    for role in ("chat", "embed", "nli"):
        p: ProviderConfig | None = cfg.providers.get(role)
        if p is None or not (p.url or p.mock):
            out[role] = None
        elif p.mock:
            if p.mock not in cache:
                try:
                    cache[p.mock] = MockBackend.from_file(p.mock)
                except (OSError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"providers.{role}.mock", f"cannot load {p.mock}: {exc}") from exc
            out[role] = cache[p.mock]
        else:
            kwargs = {f"{role}_url": p.url, "api_key": p.api_key}
            if role in ("chat", "embed"):
                kwargs[f"{role}_model"] = p.model
            out[role] = HttpBackend(**kwargs)
    return out


def build_env(cfg: RunConfig, need_index: bool, need_tree: bool, corpus=None) -> StrategyEnv:
    b = build_backends(cfg)
    model = cfg.providers["chat"].model if "chat" in cfg.providers else ""
    chat = ChatClient(b["chat"] or _Unconfigured("chat"), model=model, temperature=cfg.temperature,
                      max_in_flight=cfg.concurrency, one_hot_fallback=cfg.one_hot_fallback)
    embedder = Embedder(b["embed"] or _Unconfigured("embed"), max_in_flight=cfg.concurrency)
    env = StrategyEnv(chat, embedder, prompts=PromptLibrary(cfg.prompts_dir))
    if corpus is not None:
        env.corpus = {d.id: d for d in corpus}
        if need_index:
            env.index = build_index(corpus, embedder, corpus_ref=_corpus_ref(cfg))
        if need_tree:
            env.raptor_tree = build_raptor_tree(corpus, cfg.strategy_settings(), embedder, chat, env.prompts)
    return env


def build_nli(cfg: RunConfig, chat: ChatClient) -> NliClient:
    b = build_backends(cfg)
    if b["nli"] is not None:
        return NliClient(backend=b["nli"], max_in_flight=cfg.concurrency)
    return NliClient(chat=chat, max_in_flight=cfg.concurrency)


def _corpus_ref(cfg: RunConfig) -> str:
    return cfg.strategy_config.get("corpus_ref", "") if isinstance(cfg.strategy_config, dict) else ""


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out", "an explicit output root is required")
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ------------------------------------------------------------------- commands


def _protocol_overrides(args) -> dict | None:
    proto = {}
    if getattr(args, "protocol", None):
        proto["kind"] = args.protocol
    if getattr(args, "injected", None) is not None:
        proto["injected_count"] = args.injected
    if getattr(args, "injection_mode", None):
        proto["injection_mode"] = args.injection_mode
    if getattr(args, "swap_mode", None):
        proto["swap_mode"] = args.swap_mode
    if getattr(args, "k_list", None):
        proto["k_list"] = [int(k) for k in args.k_list.split(",")]
    return proto or None


def _resolve_run(args, kind: str | None = None) -> RunConfig:
    overrides = {
        "dataset": args.dataset,
        "corpus": args.corpus,
        "strategy": args.strategy,
        "alpha": args.alpha,
        "seed": args.seed,
        "calibration_fraction": args.calibration_fraction,
        "calibration_size": args.calibration_size,
        "concurrency": args.concurrency,
        "cr_floor": args.cr_floor,
        "baseline": getattr(args, "baseline", None),
        "out": args.out,
    }
    cfg = resolve(args.config, {}, None)  # file + env only, to merge protocol dicts below
    proto = dict(cfg.protocol)
    proto.update(_protocol_overrides(args) or {})
    if kind:
        proto["kind"] = kind
    overrides["protocol"] = proto
    if args.retrieval_depth is not None:
        overrides["strategy_config"] = {**cfg.strategy_config, "retrieval_depth": args.retrieval_depth}
    return resolve(args.config, overrides, args.mock)


def _prepare(cfg: RunConfig):
    if not cfg.dataset:
        raise ConfigError("dataset", "no dataset path given")
    dataset = load_dataset(cfg.dataset)
    if cfg.calibration_size is not None:
        sp = split_by_count(dataset, cfg.calibration_size, cfg.seed)
    else:
        sp = split(dataset, cfg.calibration_fraction, cfg.seed)
    spec = ProtocolSpec(**cfg.protocol)
    need_index = cfg.strategy in NEEDS_INDEX or spec.kind == "irrelevant_context"
    need_tree = cfg.strategy == "raptor"
    corpus = None
    if need_index or need_tree:
        if not cfg.corpus:
            raise ConfigError("corpus", f"strategy {cfg.strategy!r} needs a corpus")
        corpus = load_corpus(cfg.corpus)
    env = build_env(cfg, need_index, need_tree, corpus)
    evcfg = EvalConfig(alpha=cfg.alpha, seed=cfg.seed, concurrency=cfg.concurrency,
                       exclude_flagged=cfg.exclude_flagged, force_nonempty=cfg.force_nonempty)
    meta = {"dataset": Path(cfg.dataset).stem, "run_config_hash": config_hash(cfg.to_record())}
    return dataset, sp, spec, env, evcfg, meta


def _check_floor(cfg: RunConfig, reports) -> int:
    if cfg.cr_floor is None:
        return EXIT_OK
    status = EXIT_OK
    for rep in reports:
        for a in rep.aggregates:
            if a.subset == "all" and a.method in METHODS and a.cr < cfg.cr_floor:
                print(f"invariant failed: CR[{a.method}] = {a.cr:.4f} < floor {cfg.cr_floor}", file=sys.stderr)
                status = EXIT_INVARIANT
    return status


def cmd_run(args) -> int:
    cfg = _resolve_run(args)
    out = _out(args)
    dataset, sp, spec, env, evcfg, meta = _prepare(cfg)
    if spec.kind == DEPTH_SWEEP:
        return _sweep(cfg, out, dataset, sp, spec, env, evcfg, meta)
    baseline = load_report(cfg.baseline) if cfg.baseline else None
    report = run_protocol(dataset, sp, cfg.strategy, spec, env, cfg.strategy_settings(), evcfg,
                          baseline=baseline, metadata=meta)
    write_report(report, out)
    save_models(report.calibration, out / "calibration.json")
    print((out / "summary.txt").read_text(encoding="utf-8"), end="")
    if report.quality.get("failed"):
        print(f"{len(report.quality['failed'])} instance(s) failed; see report.json", file=sys.stderr)
    return _check_floor(cfg, [report])


def _sweep(cfg, out, dataset, sp, spec, env, evcfg, meta) -> int:
    reports = depth_sweep(dataset, sp, cfg.strategy, spec.k_list, env, cfg.strategy_settings(), evcfg)
    for k, rep in reports.items():
        rep.metadata.update(meta)
        write_report(rep, out / f"k{k}")
        head = rep.aggregates[-1] if rep.aggregates else None
        print(f"k={k}: " + (f"Acc={head.acc:.4f} CR={head.cr:.4f} SS={head.ss:.4f}" if head else
                            f"failed ({rep.metadata.get('error')})"))
    status = _check_floor(cfg, reports.values())
    if any("error" in r.metadata for r in reports.values()) and status == EXIT_OK:
        status = EXIT_ERROR
    return status


def cmd_depth_sweep(args) -> int:
    if not args.k_list:
        raise UsageError("--k-list", "required for depth-sweep")
    cfg = _resolve_run(args, kind=DEPTH_SWEEP)
    out = _out(args)
    dataset, sp, spec, env, evcfg, meta = _prepare(cfg)
    return _sweep(cfg, out, dataset, sp, spec, env, evcfg, meta)


def cmd_calibrate(args) -> int:
    """Re-derive and persist calibration models from an existing run's records."""
    if not 0.0 < args.alpha < 1.0:
        raise UsageError("alpha", f"must lie in (0, 1), got {args.alpha}")
    report = load_report(args.report)
    scored = [
        ScoredInstance(r.instance_id, OptionDistribution(r.probs, r.flags), r.gold)
        for r in report.records
        if r.split == "calibration" and r.ok and not r.flags
    ]
    if not scored:
        raise UsageError("report", "no usable calibration records")
    models = [calibrate(scored, m, args.alpha) for m in METHODS]
    out = _out(args)
    save_models(models, out / "calibration.json")
    for m in models:
        print(f"{m.method}: q_hat = {m.q_hat!r} (n = {m.n}, alpha = {m.alpha})")
    return EXIT_OK


def cmd_forge(args) -> int:
    seeds = load_seeds(args.seeds)
    cfg = resolve(args.config, {"seed": args.seed, "out": args.out}, args.mock)
    out = _out(args)
    b = build_backends(cfg)
    chat = ChatClient(b["chat"] or _Unconfigured("chat"), temperature=cfg.temperature,
                      max_in_flight=cfg.concurrency)
    nli = build_nli(cfg, chat)
    results = forge_dataset(
        seeds, chat, nli, concurrency=cfg.concurrency, max_iterations=args.max_iterations, count=args.count,
        first_mode=args.first_mode, threshold=args.threshold, rng_seed=cfg.seed, prompts=PromptLibrary(cfg.prompts_dir),
    )
    from .core import save_dataset

    save_dataset([r.instance for r in results], out / "dataset.jsonl")
    write_provenance(results, out)
    row = forge_report([r.verdict for r in results], args.max_iterations)
    with open(out / "forge_table.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([repr(v) for v in row.values()])
    print("  ".join(f"{k}: {v:.1f}%" for k, v in row.items()))
    print(f"{len(results)} instance(s) written to {out / 'dataset.jsonl'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        params = SynthParams(n=args.n, k=args.k, concentration=args.concentration,
                             seed=args.seed if args.seed is not None else 0)
    except UragcError as exc:
        raise UsageError("synth", str(exc)) from exc
    data, mock = write_world(params, _out(args))
    print(f"wrote {data} and {mock}")
    return EXIT_OK


def cmd_report(args) -> int:
    summaries = [load_summary(p) for p in args.reports]
    entries = summaries_to_entries(summaries)
    text = render_panels(entries)
    table = render_csv(entries)
    if len(summaries) == 2:
        from .report import delta_rows

        rows = delta_rows(entries[:1], entries[1:])
        text += "\nDeltas (second minus first)\n" + render_deltas(rows)
    print(text, end="")
    if args.out:
        out = _out(args)
        (out / "tables.csv").write_text(table, encoding="utf-8")
        (out / "tables.txt").write_text(text, encoding="utf-8")
        if len(summaries) == 2:
            (out / "deltas.csv").write_text(render_deltas_csv(rows), encoding="utf-8")
    return EXIT_OK


# --------------------------------------------------------------------- parser


def _common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output root; every artifact is written beneath it")
    p.add_argument("--mock", help="mock script used for every provider")
    p.add_argument("-v", "--verbose", action="store_true")


def _run_args(p):
    p.add_argument("--dataset")
    p.add_argument("--corpus")
    p.add_argument("--strategy")
    p.add_argument("--protocol", choices=["normal", "self_aware", "wrong_aware", "irrelevant_context",
                                          "knowledge_isolation", "depth_sweep"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--retrieval-depth", type=int)
    p.add_argument("--k-list", help="comma-separated retrieval depths")
    p.add_argument("--injected", type=int, help="irrelevant documents per retrieval")
    p.add_argument("--injection-mode", choices=["fresh", "fixed"])
    p.add_argument("--swap-mode", choices=["max_min", "max_second"])
    p.add_argument("--calibration-fraction", type=float)
    p.add_argument("--calibration-size", type=int)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--cr-floor", type=float, help="exit 2 when either method's test CR falls below this")
    p.add_argument("--baseline", help="no-retrieve run directory for knowledge isolation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uragc", description="Conformal uncertainty evaluation for RAG strategies.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one strategy under one protocol")
    _common(p)
    _run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("depth-sweep", help="one run per retrieval depth")
    _common(p)
    _run_args(p)
    p.set_defaults(func=cmd_depth_sweep)

    p = sub.add_parser("calibrate", help="persist calibration models from a run's records")
    _common(p)
    p.add_argument("--report", required=True, help="run directory")
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("forge", help="build an MCQA dataset from seed QA pairs")
    _common(p)
    p.add_argument("--seeds", required=True, help="JSONL of {id, question, answer, document?}")
    p.add_argument("--max-iterations", type=int, default=3)
    p.add_argument("--count", type=int, default=3, help="distractors per question")
    p.add_argument("--first-mode", choices=["naive", "full"], default="naive")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("synth", help="synthetic dataset plus the mock script that replays it")
    _common(p)
    p.add_argument("--n", type=int, default=11000)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--concentration", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="render Acc, CR and SS tables from run reports")
    _common(p)
    p.add_argument("reports", nargs="+", help="run directories or report.json files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"uragc: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"uragc: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ReportError as exc:
        print(f"uragc: report error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except UragcError as exc:
        print(f"uragc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
