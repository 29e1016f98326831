"""Command-line entry point.

    toolmem build  --config run.json
    toolmem ask    --config run.json --question "When did Caroline go hiking?"
    toolmem eval   --config run.json --out-dir runs/full
    toolmem sweep  --config run.json --budgets 1,2,3,4,5,6,7
    toolmem stats  --log runs/full/questions.jsonl

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .agent import answer_question
from .config import BACKENDS, EMBEDDERS, RunConfig
from .embeddings import HashingEmbedder, RemoteEmbedder
from .errors import ConfigError, ToolmemError
from .evalkit import (
    EvalConfig,
    budget_sweep,
    format_table,
    ingest_locomo,
    run_evaluation,
    sweep_csv,
    tool_stats_from_log,
)
from .extractor import ExtractionConfig
from .llm import BackendConfig, ChatCompletionsBackend, ScriptedBackend
from .memory import EXTRACTOR_MODES, build_or_load

logger = logging.getLogger("toolmem")


def _budgets(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"budgets must be comma-separated integers: {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("budgets must be positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--dataset", help="LoCoMo-format dataset JSON")
    common.add_argument("--store-dir", help="directory for persisted memory stores")
    common.add_argument("--out-dir", help="directory for reports and the resolved config")
    common.add_argument("--backend", choices=BACKENDS)
    common.add_argument("--model", help="chat model name for the remote backend")
    common.add_argument("--fixture", help="scripted backend fixture (JSON)")
    common.add_argument("--embedder", choices=EMBEDDERS)
    common.add_argument("--extractor", choices=EXTRACTOR_MODES)
    common.add_argument("--budget", type=int, help="iteration budget (assistant turns)")
    common.add_argument("--k", type=int, help="top-k for similarity tools")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="toolmem", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build", parents=[common], help="ingest the dataset and build memory stores")
    ask = sub.add_parser("ask", parents=[common], help="answer one question")
    ask.add_argument("--question", required=True)
    ask.add_argument("--conversation", help="conversation id (default: first in dataset)")
    sub.add_parser("eval", parents=[common], help="run the full evaluation")
    sweep = sub.add_parser("sweep", parents=[common], help="evaluate across iteration budgets")
    sweep.add_argument("--budgets", type=_budgets, required=True, help="e.g. 1,2,3,4,5,6,7")
    stats = sub.add_parser("stats", parents=[common], help="tool distribution from a questions.jsonl log")
    stats.add_argument("--log", required=True, help="per-question JSON-lines log")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override(
        dataset_path=args.dataset,
        store_dir=args.store_dir,
        out_dir=args.out_dir,
        backend=args.backend,
        model_name=args.model,
        fixture_path=args.fixture,
        embedder=args.embedder,
        extractor=args.extractor,
        budget=args.budget,
        k=args.k,
    )


def make_backend(cfg: RunConfig):
    if cfg.backend == "scripted":
        if not cfg.fixture_path:
            raise ConfigError("scripted backend needs fixture_path (or --fixture)")
        if not Path(cfg.fixture_path).is_file():
            raise ConfigError(f"fixture file not found: {cfg.fixture_path}")
        return ScriptedBackend.from_file(cfg.fixture_path)
    return ChatCompletionsBackend(BackendConfig(
        endpoint_url=cfg.endpoint_url,
        model_name=cfg.model_name,
        temperature=cfg.temperature,
        max_retries=cfg.max_retries,
        request_timeout_s=cfg.request_timeout_s,
        api_key_env=cfg.api_key_env,
        max_concurrency=cfg.concurrency,
    ))


def make_embedder(cfg: RunConfig):
    if cfg.embedder == "local":
        return HashingEmbedder()
    if not cfg.embedding_endpoint_url:
        raise ConfigError("remote embedder needs embedding_endpoint_url")
    return RemoteEmbedder(cfg.embedding_endpoint_url, cfg.embedding_model, cfg.api_key_env)


def _store_builder(cfg: RunConfig, backend, embedder):
    # baseline chunkers only consult the model when a real endpoint is configured
    llm = backend if cfg.extractor == "llm" or cfg.backend == "remote" else None
    ext_cfg = ExtractionConfig(overlap_msgs=cfg.overlap_msgs)

    def builder(conversation):
        return build_or_load(conversation, cfg.store_dir, embedder, cfg.extractor, llm, ext_cfg)

    return builder


def _load_dataset(cfg: RunConfig):
    if not cfg.dataset_path:
        raise ConfigError("no dataset given (dataset_path or --dataset)")
    if not Path(cfg.dataset_path).is_file():
        raise ConfigError(f"dataset file not found: {cfg.dataset_path}")
    return ingest_locomo(cfg.dataset_path, cfg.category_mapping)


def _eval_config(cfg: RunConfig) -> EvalConfig:
    return EvalConfig(budget=cfg.budget, k=cfg.k, concurrency=cfg.concurrency,
                      token_ceiling=cfg.token_ceiling)


def cmd_build(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    if not cfg.store_dir:
        raise ConfigError("build needs store_dir (or --store-dir)")
    builder = _store_builder(cfg, make_backend(cfg), make_embedder(cfg))
    cfg.write(cfg.store_dir)
    for sample in samples:
        store = builder(sample.conversation)
        print(f"{sample.conversation.conversation_id}: {len(store)} pages")
    return 0


def cmd_ask(cfg: RunConfig, question: str, conversation_id: str | None) -> int:
    samples = _load_dataset(cfg)
    if conversation_id is None:
        sample = samples[0]
    else:
        matches = [s for s in samples if s.conversation.conversation_id == conversation_id]
        if not matches:
            raise ConfigError(f"conversation {conversation_id!r} not in dataset")
        sample = matches[0]
    backend = make_backend(cfg)
    store = _store_builder(cfg, backend, make_embedder(cfg))(sample.conversation)
    if cfg.out_dir:
        cfg.write(cfg.out_dir)
    rec = answer_question(question, store, backend, cfg.budget, k=cfg.k, token_ceiling=cfg.token_ceiling)
    print(f"answer: {rec.answer}")
    for i, t in enumerate(rec.tool_trace, 1):
        args = ", ".join(f"{k}={v!r}" for k, v in sorted(t.arguments.items()))
        status = "cached" if t.cache_hit else ("skipped" if not t.dispatched else f"{t.result_size} results")
        print(f"  [{i}] {t.tool_name}({args}) -> {status}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    backend = make_backend(cfg)
    cfg.write(cfg.out_dir)
    report = run_evaluation(samples, _store_builder(cfg, backend, make_embedder(cfg)), backend,
                            _eval_config(cfg), cfg.out_dir)
    print(format_table(report))
    return 0


def cmd_sweep(cfg: RunConfig, budgets: list[int]) -> int:
    samples = _load_dataset(cfg)
    backend = make_backend(cfg)
    cfg.write(cfg.out_dir)
    table = budget_sweep(samples, budgets, _store_builder(cfg, backend, make_embedder(cfg)), backend,
                         _eval_config(cfg), cfg.out_dir)
    sys.stdout.write(sweep_csv(table))
    return 0


def cmd_stats(log: str, out_dir: str | None) -> int:
    if not Path(log).is_file():
        raise ConfigError(f"log file not found: {log}")
    text = tool_stats_from_log(log)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "tool_stats.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "stats":
            return cmd_stats(args.log, args.out_dir)
        cfg = resolve_config(args)
        if args.command == "build":
            return cmd_build(cfg)
        if args.command == "ask":
            return cmd_ask(cfg, args.question, args.conversation)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_sweep(cfg, args.budgets)
    except ConfigError as exc:
        print(f"toolmem: error: {exc}", file=sys.stderr)
        return 2
    except (ToolmemError, OSError) as exc:
        print(f"toolmem: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
