"""LoCoMo ingestion, batch evaluation, reporting, and the iteration-budget sweep."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Any, Callable, Iterable

from .agent import DEFAULT_BUDGET, DEFAULT_TOKEN_CEILING, TOOL_NAMES, TraceEntry, answer_question
from .errors import BackendFailure, ParseError, UnknownCategory
from .llm import Backend
from .metrics import bleu1, token_f1
from .model import Conversation, ConversationSession, Message
from .store import DEFAULT_K, MemoryStore

logger = logging.getLogger(__name__)

CATEGORIES = ("multi_hop", "temporal", "open_domain", "single_hop", "adversarial")
QUALITY_CATEGORIES = CATEGORIES[:4]
DEFAULT_CATEGORY_MAPPING: dict[int, str] = {
    1: "multi_hop",
    2: "temporal",
    3: "open_domain",
    4: "single_hop",
    5: "adversarial",
}
REPORT_COLUMNS = ["category", "count", "f1", "bleu1", "mean_tokens", "mean_turns"]
SWEEP_COLUMNS = ["budget", "success_rate", "f1", "bleu1", "mean_tokens"]

_SESSION_KEY = re.compile(r"^session_(\d+)$")


@dataclass(frozen=True)
class QAItem:
    question: str
    gold_answer: str | None
    category: str
    evidence_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class Sample:
    conversation: Conversation
    qa: tuple[QAItem, ...]


# -- ingestion --

def _parse_mapping(mapping: dict[Any, str] | None) -> dict[int, str]:
    if mapping is None:
        return dict(DEFAULT_CATEGORY_MAPPING)
    out = {}
    for key, value in mapping.items():
        if value not in CATEGORIES:
            raise UnknownCategory(f"mapping target {value!r} is not one of {CATEGORIES}")
        out[int(key)] = value
    return out


def _parse_conversation(conv: Any, sample_id: str, path: str) -> Conversation:
    if not isinstance(conv, dict):
        raise ParseError(path, "conversation must be an object")
    numbers = sorted(int(m.group(1)) for k in conv if (m := _SESSION_KEY.match(k)))
    sessions = []
    for n in numbers:
        turns = conv[f"session_{n}"]
        spath = f"{path}.session_{n}"
        if not isinstance(turns, list):
            raise ParseError(spath, "session must be a list of turns")
        if not turns:
            logger.warning("%s: empty session skipped", spath)
            continue
        messages = []
        for i, turn in enumerate(turns):
            try:
                messages.append(Message(i, str(turn["speaker"]), str(turn["text"]), turn.get("dia_id")))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{spath}[{i}]", f"bad turn ({exc})") from None
        timestamp = str(conv.get(f"session_{n}_date_time", ""))
        sessions.append(ConversationSession(f"session_{n}", timestamp, tuple(messages)))
    if not sessions:
        raise ParseError(path, "conversation has no non-empty sessions")
    speakers = tuple(str(conv[k]) for k in ("speaker_a", "speaker_b") if k in conv)
    return Conversation(sample_id, tuple(sessions), speakers)


def _parse_qa(entry: Any, path: str, mapping: dict[int, str]) -> QAItem:
    if not isinstance(entry, dict):
        raise ParseError(path, "qa entry must be an object")
    if "question" not in entry:
        raise ParseError(path, "qa entry is missing 'question'")
    if "category" not in entry:
        raise ParseError(path, "qa entry is missing 'category'")
    try:
        code = int(entry["category"])
    except (TypeError, ValueError):
        raise ParseError(path, f"category {entry['category']!r} is not an integer") from None
    if code not in mapping:
        raise UnknownCategory(f"{path}: category {code} is not in the category mapping")
    answer = entry.get("answer")
    evidence = entry.get("evidence") or []
    return QAItem(
        question=str(entry["question"]),
        gold_answer=None if answer is None else str(answer),
        category=mapping[code],
        evidence_ids=tuple(str(e) for e in evidence),
    )


def ingest_locomo(path: str | Path, mapping: dict[Any, str] | None = None) -> list[Sample]:
    """Read a LoCoMo-layout JSON file into conversations and questions."""
    cmap = _parse_mapping(mapping)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ParseError("$", f"invalid JSON: {exc}") from exc
    if isinstance(raw, dict):
        raw = [raw]
    if not isinstance(raw, list):
        raise ParseError("$", "top level must be a list of samples")
    samples = []
    for si, entry in enumerate(raw):
        spath = f"$[{si}]"
        if not isinstance(entry, dict) or "conversation" not in entry:
            raise ParseError(spath, "sample must be an object with a 'conversation'")
        sample_id = str(entry.get("sample_id", f"conv-{si}"))
        conv = _parse_conversation(entry["conversation"], sample_id, f"{spath}.conversation")
        qa_raw = entry.get("qa", [])
        if not isinstance(qa_raw, list):
            raise ParseError(f"{spath}.qa", "qa must be a list")
        qa = tuple(_parse_qa(q, f"{spath}.qa[{qi}]", cmap) for qi, q in enumerate(qa_raw))
        samples.append(Sample(conv, qa))
    report = dataset_report(samples)
    logger.info("ingested %s: %s", path, json.dumps(report, sort_keys=True))
    return samples


def dataset_report(samples: Iterable[Sample]) -> dict[str, Any]:
    counts: Counter[str] = Counter()
    missing = 0
    n_conv = 0
    for sample in samples:
        n_conv += 1
        for item in sample.qa:
            counts[item.category] += 1
            if item.gold_answer is None:
                missing += 1
    return {
        "conversations": n_conv,
        "questions": sum(counts.values()),
        "per_category": {c: counts.get(c, 0) for c in CATEGORIES},
        "missing_answers": missing,
    }


# -- evaluation --

@dataclass
class EvalConfig:
    budget: int = DEFAULT_BUDGET
    k: int = DEFAULT_K
    concurrency: int = 4
    token_ceiling: int = DEFAULT_TOKEN_CEILING
    system_prompt: str | None = None


@dataclass
class CategoryRow:
    category: str
    count: int
    f1: float | None
    bleu1: float | None
    mean_tokens: float
    mean_turns: float

    def to_dict(self) -> dict[str, Any]:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


@dataclass
class EvalReport:
    rows: list[CategoryRow]
    n_questions: int
    overall_f1: float | None
    overall_bleu1: float | None
    mean_tokens: float | None
    mean_turns: float | None
    success_rate: float | None
    n_failed: int
    tool_distribution: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def quality_rows(self) -> list[CategoryRow]:
        return [r for r in self.rows if r.f1 is not None]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "n_questions": self.n_questions,
            "overall_f1": self.overall_f1,
            "overall_bleu1": self.overall_bleu1,
            "mean_tokens": self.mean_tokens,
            "mean_turns": self.mean_turns,
            "success_rate": self.success_rate,
            "n_failed": self.n_failed,
            "tool_distribution": self.tool_distribution,
        }


StoreBuilder = Callable[[Conversation], MemoryStore]


def _question_row(sample_id: str, qi: int, item: QAItem, store: MemoryStore,
                  llm: Backend, cfg: EvalConfig) -> dict[str, Any]:
    row: dict[str, Any] = {
        "conversation_id": sample_id,
        "question_index": qi,
        "category": item.category,
        "question": item.question,
        "gold_answer": item.gold_answer,
        "evidence_ids": list(item.evidence_ids),
    }
    try:
        rec = answer_question(
            item.question, store, llm, cfg.budget, k=cfg.k, category=item.category,
            system_prompt=cfg.system_prompt, token_ceiling=cfg.token_ceiling,
        )
    except BackendFailure as exc:
        logger.error("question %s/%d failed: %s", sample_id, qi, exc)
        row.update(answer="", turns=0, tokens=0, success=False, forced_final=False,
                   failed=True, error=f"{type(exc).__name__}: {exc}", tool_trace=[])
        rec = None
    else:
        row.update(answer=rec.answer, turns=rec.turns_used, tokens=rec.usage.total_tokens,
                   success=rec.success, forced_final=rec.forced_final, failed=False,
                   error=None, tool_trace=[t.to_dict() for t in rec.tool_trace])
    scored = item.category in QUALITY_CATEGORIES and item.gold_answer is not None
    row["f1"] = token_f1(row["answer"], item.gold_answer) if scored else None
    row["bleu1"] = bleu1(row["answer"], item.gold_answer) if scored else None
    return row


def evaluate(samples: list[Sample], store_builder: StoreBuilder, llm: Backend,
             cfg: EvalConfig | None = None, log_path: str | Path | None = None,
             stores: dict[str, MemoryStore] | None = None) -> list[dict[str, Any]]:
    """Answer every question; returns per-question rows in dataset order.

    Rows are appended to ``log_path`` (JSON lines) as they complete, in order,
    so a crashed run leaves a usable prefix.
    """
    cfg = cfg or EvalConfig()
    if not samples or not any(s.qa for s in samples):
        raise ValueError("dataset has no questions")
    stores = stores if stores is not None else {}
    rows: list[dict[str, Any]] = []
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        with ThreadPoolExecutor(max_workers=max(1, cfg.concurrency)) as pool:
            for sample in samples:
                cid = sample.conversation.conversation_id
                if cid not in stores:
                    stores[cid] = store_builder(sample.conversation)
                store = stores[cid]
                futures = [
                    pool.submit(_question_row, cid, qi, item, store, llm, cfg)
                    for qi, item in enumerate(sample.qa)
                ]
                for fut in futures:
                    row = fut.result()
                    rows.append(row)
                    if log:
                        log.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
                        log.flush()
    finally:
        if log:
            log.close()
    return rows


def _mean(values: list[float]) -> float | None:
    return fmean(values) if values else None


def tool_distribution(rows: Iterable[dict[str, Any]]) -> dict[str, dict[str, int]]:
    """category -> tool name -> number of dispatched calls."""
    counts: dict[str, Counter[str]] = {}
    for row in rows:
        per_cat = counts.setdefault(row["category"], Counter())
        for entry in row.get("tool_trace", []):
            t = entry if isinstance(entry, TraceEntry) else TraceEntry.from_dict(entry)
            if t.dispatched:
                per_cat[t.tool_name] += 1
    ordered = [c for c in CATEGORIES if c in counts] + sorted(c for c in counts if c not in CATEGORIES)
    return {c: {name: counts[c].get(name, 0) for name in TOOL_NAMES} for c in ordered}


def build_report(rows: list[dict[str, Any]]) -> EvalReport:
    by_cat: dict[str, list[dict[str, Any]]] = {}
    for row in rows:
        by_cat.setdefault(row["category"], []).append(row)
    report_rows = []
    for cat in CATEGORIES:
        items = by_cat.get(cat)
        if not items:
            continue
        scored = [r for r in items if r["f1"] is not None]
        report_rows.append(CategoryRow(
            category=cat,
            count=len(items),
            f1=_mean([r["f1"] for r in scored]),
            bleu1=_mean([r["bleu1"] for r in scored]),
            mean_tokens=fmean(r["tokens"] for r in items),
            mean_turns=fmean(r["turns"] for r in items),
        ))
    quality = [r for r in rows if r["category"] in QUALITY_CATEGORIES]
    scored = [r for r in quality if r["f1"] is not None]
    return EvalReport(
        rows=report_rows,
        n_questions=len(rows),
        overall_f1=_mean([r["f1"] for r in scored]),
        overall_bleu1=_mean([r["bleu1"] for r in scored]),
        mean_tokens=_mean([r["tokens"] for r in quality]),
        mean_turns=_mean([r["turns"] for r in rows]),
        success_rate=_mean([1.0 if r["success"] else 0.0 for r in rows]),
        n_failed=sum(1 for r in rows if r["failed"]),
        tool_distribution=tool_distribution(rows),
    )


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _csv_text(header: list[str], rows: Iterable[list[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def report_csv(report: EvalReport) -> str:
    lines = [[getattr(r, c) for c in REPORT_COLUMNS] for r in report.rows]
    lines.append(["overall", report.n_questions, report.overall_f1, report.overall_bleu1,
                  report.mean_tokens, report.mean_turns])
    return _csv_text(REPORT_COLUMNS, lines)


def tool_stats_csv(distribution: dict[str, dict[str, int]]) -> str:
    rows = [[cat, *(counts[name] for name in TOOL_NAMES)] for cat, counts in distribution.items()]
    totals = [sum(counts[name] for counts in distribution.values()) for name in TOOL_NAMES]
    rows.append(["all", *totals])
    return _csv_text(["category", *TOOL_NAMES], rows)


def read_log(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def tool_stats_from_log(path: str | Path) -> str:
    return tool_stats_csv(tool_distribution(read_log(path)))


def format_table(report: EvalReport) -> str:
    """Human-readable table with scores as percentages."""
    def pct(v):
        return "-" if v is None else f"{100 * v:.2f}"

    lines = [f"{'category':<12} {'n':>5} {'F1':>7} {'BLEU-1':>7} {'tokens':>8} {'turns':>6}"]
    for r in report.rows:
        lines.append(f"{r.category:<12} {r.count:>5} {pct(r.f1):>7} {pct(r.bleu1):>7} "
                     f"{r.mean_tokens:>8.1f} {r.mean_turns:>6.2f}")
    tok = "-" if report.mean_tokens is None else f"{report.mean_tokens:.1f}"
    turns = "-" if report.mean_turns is None else f"{report.mean_turns:.2f}"
    lines.append(f"{'overall':<12} {report.n_questions:>5} {pct(report.overall_f1):>7} "
                 f"{pct(report.overall_bleu1):>7} {tok:>8} {turns:>6}")
    lines.append(f"success rate {pct(report.success_rate)}%, failed {report.n_failed}")
    return "\n".join(lines)


def write_outputs(report: EvalReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "tool_stats.csv").write_text(tool_stats_csv(report.tool_distribution), encoding="utf-8")


def run_evaluation(samples: list[Sample], store_builder: StoreBuilder, llm: Backend,
                   cfg: EvalConfig | None = None, out_dir: str | Path | None = None,
                   stores: dict[str, MemoryStore] | None = None) -> EvalReport:
    """Evaluate every question and assemble the report.

    With ``out_dir`` set, writes ``questions.jsonl``, ``report.csv``,
    ``report.json`` and ``tool_stats.csv`` there.
    """
    log_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "questions.jsonl"
    rows = evaluate(samples, store_builder, llm, cfg, log_path, stores)
    report = build_report(rows)
    if out_dir is not None:
        write_outputs(report, out_dir)
    return report


# -- iteration-budget sweep --

@dataclass
class SweepRow:
    budget: int
    success_rate: float
    f1: float | None
    bleu1: float | None
    mean_tokens: float | None


def budget_sweep(samples: list[Sample], budgets: list[int], store_builder: StoreBuilder,
                 llm: Backend, cfg: EvalConfig | None = None,
                 out_dir: str | Path | None = None) -> list[SweepRow]:
    """Re-run the evaluation once per budget with stores built only once."""
    if not budgets or any(b < 1 for b in budgets):
        raise ValueError(f"budgets must be a non-empty list of integers >= 1, got {budgets}")
    base = cfg or EvalConfig()
    stores: dict[str, MemoryStore] = {}
    table = []
    for b in budgets:
        run_cfg = EvalConfig(b, base.k, base.concurrency, base.token_ceiling, base.system_prompt)
        sub = None if out_dir is None else Path(out_dir) / f"budget_{b}"
        rep = run_evaluation(samples, store_builder, llm, run_cfg, sub, stores)
        table.append(SweepRow(b, rep.success_rate or 0.0, rep.overall_f1, rep.overall_bleu1, rep.mean_tokens))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.csv").write_text(sweep_csv(table), encoding="utf-8")
    return table


def sweep_csv(table: list[SweepRow]) -> str:
    return _csv_text(SWEEP_COLUMNS, ([getattr(r, c) for c in SWEEP_COLUMNS] for r in table))
