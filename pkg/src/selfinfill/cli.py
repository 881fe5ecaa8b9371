"""Command-line driver: batch decoding runs and report aggregation.

Record schema (one JSON object per line of the --out file)::

    {
      "schema": 1,
      "config_hash": "...",          sha256 of the resolved settings
      "problem_id": "p000",
      "prompt_index": 0,
      "sample_index": 0,
      "prompt": "...",
      "mode": "l2r" | "self_infill" | "loop",
      "pieces": {"prefix": ..., "middle": ..., "suffix_prompt": ..., "suffix_completion": ...},
      "linear_output": "...",        full linear text including the prompt
      "completion": "...",           linear text minus the prompt
      "history": [                   one entry per loop iteration
        {"iteration": n, "pieces": {...}, "output": "...",
         "fallbacks": [...], "split": {...} | null, "events": [...]}
      ],
      "events": [...],               {kind, step, detail} entries
      "mean_logprob": -0.1,          mean over non-forced steps of the session
      "wall_time_ms": null | float,  measured only with --timing
      "error": null | "message"
    }

Trace records (--traces file) add raw token ids and per-step annotations::

    {"problem_id": ..., "sample_index": ..., "calls": [
        {"call": "self_infill" | "l2r", "iteration": n, "raw_tokens": [...],
         "steps": [[phase, max_probability, forced, token, logprob], ...],
         "events": [...]}]}
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .backends import Backend, load_backend
from .decoding import DecodeTrace, SelfInfillConfig, left_to_right, self_infill
from .errors import SelfInfillError
from .evalkit import Checker, classify_degenerate, pass_at_k, regex_checker
from .looping import LoopConfig, run_loop
from .sampling import GREEDY, SAMPLE, SamplerConfig, rng_stream
from .textops import SuffixPromptRule, resolve_stop, suffix_prompt_text

SCHEMA_VERSION = 1

MODES = ("l2r", "self_infill", "loop")

DEFAULTS: dict = {
    "mode": "loop",
    "tau": 0.25,
    "loops": 2,
    "strategy": "extended",
    "suffix_prompt": None,
    "suffix_prompt_rule": None,
    "stop": None,
    "stop_preset": None,
    "sample_mode": GREEDY,
    "temperature": 0.8,
    "top_p": 0.95,
    "seed": 0,
    "samples": 1,
    "max_new_tokens": 512,
}


def resolve_settings(cli_values: dict, config_path: Optional[str]) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    settings = dict(DEFAULTS)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            file_values = json.load(fh)
        unknown = set(file_values) - set(DEFAULTS)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        settings.update(file_values)
    settings.update({k: v for k, v in cli_values.items() if k in DEFAULTS and v is not None})
    return settings


def config_hash(settings: dict, backend_descriptor: dict) -> str:
    payload = json.dumps(
        {"settings": settings, "backend": backend_descriptor}, sort_keys=True, ensure_ascii=False
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _parse_rule(settings: dict) -> Optional[SuffixPromptRule]:
    spec = settings.get("suffix_prompt_rule")
    if spec:
        kind, _, payload = str(spec).partition(":")
        return SuffixPromptRule(kind=kind, payload=payload or None)
    if settings.get("suffix_prompt") is not None:
        text = settings["suffix_prompt"]
        return SuffixPromptRule(kind="fixed_text", payload=text) if text else None
    return None


def _event_obj(event) -> dict:
    return {"kind": event.kind, "step": event.step, "detail": event.detail}


def _trace_obj(call: str, iteration: int, trace: DecodeTrace) -> dict:
    return {
        "call": call,
        "iteration": iteration,
        "raw_tokens": list(trace.raw_tokens),
        "steps": [
            [s.phase, s.max_probability, s.forced, s.token, s.logprob] for s in trace.steps
        ],
        "events": [_event_obj(e) for e in trace.events],
    }


def _session_mean_logprob(traces: Iterable[DecodeTrace]) -> float:
    vals = [s.logprob for t in traces for s in t.steps if s.logprob is not None]
    return float(sum(vals) / len(vals)) if vals else 0.0


def run_batch(
    prompts: list[tuple[str, str]],
    settings: dict,
    backend: Backend,
    backend_descriptor: dict,
    timing: bool = False,
    collect_traces: bool = False,
) -> Iterator[tuple[dict, Optional[dict]]]:
    """Run every prompt x sample index; yields (record, trace_record or None).

    A backend failure aborts the affected record (its ``error`` field is
    set) and the batch continues.
    """
    digest = config_hash(settings, backend_descriptor)
    vocab = backend.vocab
    mode = settings["mode"]
    stop = resolve_stop(settings.get("stop"), settings.get("stop_preset"))
    sampler = SamplerConfig(
        mode=settings["sample_mode"],
        temperature=settings["temperature"],
        top_p=settings["top_p"],
        seed=settings["seed"],
    )
    rule = _parse_rule(settings)

    for prompt_index, (problem_id, prompt_text) in enumerate(prompts):
        for sample_index in range(settings["samples"]):
            record = {
                "schema": SCHEMA_VERSION,
                "config_hash": digest,
                "problem_id": problem_id,
                "prompt_index": prompt_index,
                "sample_index": sample_index,
                "prompt": prompt_text,
                "mode": mode,
                "pieces": None,
                "linear_output": None,
                "completion": None,
                "history": [],
                "events": [],
                "mean_logprob": None,
                "wall_time_ms": None,
                "error": None,
            }
            trace_record: Optional[dict] = None
            started = time.perf_counter()
            try:
                rng = rng_stream(settings["seed"], sample_index)
                prompt_tokens = vocab.tokenize(prompt_text)
                sp_tokens = (
                    vocab.tokenize(suffix_prompt_text(prompt_text, rule)) if rule else ()
                )
                si_cfg = SelfInfillConfig(
                    tau=settings["tau"],
                    suffix_prompt=sp_tokens,
                    stop=stop,
                    max_new_tokens=settings["max_new_tokens"],
                )
                calls: list[dict] = []
                if mode == "l2r":
                    generated, trace = left_to_right(
                        prompt_tokens, backend, sampler, stop, settings["max_new_tokens"], rng
                    )
                    linear = prompt_tokens + generated
                    record["pieces"] = {
                        "prefix": vocab.detokenize(linear),
                        "middle": "",
                        "suffix_prompt": "",
                        "suffix_completion": "",
                    }
                    record["events"] = [_event_obj(e) for e in trace.events]
                    record["mean_logprob"] = _session_mean_logprob([trace])
                    record["linear_output"] = vocab.detokenize(linear)
                    calls.append(_trace_obj("l2r", 0, trace))
                elif mode == "self_infill":
                    x = (vocab.pre,) + prompt_tokens
                    quad, trace = self_infill(x, backend, sampler, si_cfg, rng)
                    record["pieces"] = quad.texts(vocab)
                    record["events"] = [_event_obj(e) for e in trace.events]
                    record["mean_logprob"] = _session_mean_logprob([trace])
                    record["linear_output"] = vocab.detokenize(quad.linear())
                    calls.append(_trace_obj("self_infill", 0, trace))
                else:
                    loop_cfg = LoopConfig(
                        n_iterations=settings["loops"],
                        split_strategy=settings["strategy"],
                        default_suffix_prompt=sp_tokens,
                        si=si_cfg,
                        sampler=sampler,
                    )
                    final, state = run_loop(prompt_tokens, backend, loop_cfg, rng)
                    traces = []
                    events = []
                    for item in state.history:
                        traces.append(item.si_trace)
                        calls.append(_trace_obj("self_infill", item.iteration, item.si_trace))
                        if item.l2r_trace is not None:
                            traces.append(item.l2r_trace)
                            calls.append(_trace_obj("l2r", item.iteration, item.l2r_trace))
                        entry_events = [_event_obj(e) for e in item.si_trace.events]
                        if item.l2r_trace is not None:
                            entry_events += [_event_obj(e) for e in item.l2r_trace.events]
                        record["history"].append(
                            {
                                "iteration": item.iteration,
                                "pieces": item.quadruple.texts(vocab),
                                "output": vocab.detokenize(item.output),
                                "fallbacks": list(item.fallbacks),
                                "split": item.split,
                                "events": entry_events,
                            }
                        )
                        events += [
                            dict(_event_obj(e), iteration=item.iteration)
                            for e in item.si_trace.events
                        ]
                        if item.l2r_trace is not None:
                            events += [
                                dict(_event_obj(e), iteration=item.iteration)
                                for e in item.l2r_trace.events
                            ]
                        events += [
                            {"kind": "fallback", "step": None, "detail": dict(f),
                             "iteration": item.iteration}
                            for f in item.fallbacks
                        ]
                    record["events"] = events
                    record["mean_logprob"] = _session_mean_logprob(traces)
                    record["pieces"] = final.texts(vocab)
                    record["linear_output"] = vocab.detokenize(final.linear())
                record["completion"] = record["linear_output"][len(prompt_text):]
                if collect_traces:
                    trace_record = {
                        "problem_id": problem_id,
                        "sample_index": sample_index,
                        "calls": calls,
                    }
            except SelfInfillError as exc:
                record["error"] = f"{type(exc).__name__}: {exc}"
            if timing:
                record["wall_time_ms"] = (time.perf_counter() - started) * 1000.0
            yield record, trace_record


def report(records_path: str, ks: list[int], checker: Optional[Checker] = None) -> dict:
    """Aggregate a records file: pass@k, degeneracy fraction, loop-change proportions."""
    by_problem: dict[str, list[dict]] = {}
    malformed = 0
    with open(records_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                if record.get("error"):
                    continue
                by_problem.setdefault(record["problem_id"], []).append(record)
            except (ValueError, KeyError, TypeError):
                malformed += 1
    summary: dict = {
        "problems": len(by_problem),
        "records": sum(len(v) for v in by_problem.values()),
        "malformed": malformed,
        "pass_at_k": {},
        "degenerate_fraction": None,
        "loop_changes": {},
    }
    all_records = [r for records in by_problem.values() for r in records]
    if not all_records:
        return summary

    if checker is not None:
        for k in ks:
            values = []
            for problem_id, records in by_problem.items():
                n = len(records)
                if k > n:
                    continue
                c = sum(1 for r in records if checker(problem_id, r.get("completion") or ""))
                values.append(pass_at_k(n, c, k))
            if values:
                summary["pass_at_k"][k] = sum(values) / len(values)

    flags = [bool(classify_degenerate(r.get("completion") or "")) for r in all_records]
    summary["degenerate_fraction"] = sum(flags) / len(flags)

    changes: dict[str, int] = {}
    compared = 0
    for problem_id, records in by_problem.items():
        for record in records:
            history = record.get("history") or []
            if len(history) < 2:
                continue
            prev, curr = history[-2]["output"], history[-1]["output"]
            prompt = record.get("prompt") or ""
            prev_c = checker(problem_id, prev[len(prompt):]) if checker else False
            curr_c = checker(problem_id, curr[len(prompt):]) if checker else False
            if prev == curr:
                category = "unchanged"
            elif prev_c and curr_c:
                category = "changed_remained_correct"
            elif prev_c and not curr_c:
                category = "correct_to_incorrect"
            elif not prev_c and curr_c:
                category = "incorrect_to_correct"
            else:
                category = "changed_remained_incorrect"
            changes[category] = changes.get(category, 0) + 1
            compared += 1
    if compared:
        summary["loop_changes"] = {k: v / compared for k, v in sorted(changes.items())}
    return summary


# -- argument parsing ---------------------------------------------------------


def _load_prompts(args) -> list[tuple[str, str]]:
    prompts: list[tuple[str, str]] = []
    if args.prompts:
        path = Path(args.prompts)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".jsonl":
            for line in text.splitlines():
                if line.strip():
                    obj = json.loads(line)
                    prompts.append((str(obj["problem_id"]), obj["prompt"]))
        else:
            for i, line in enumerate(text.splitlines()):
                if line:
                    prompts.append((f"p{i:03d}", line))
    for i, text in enumerate(args.prompt or []):
        prompts.append((f"cli{i:03d}", text))
    if not prompts:
        raise SystemExit("no prompts given: use --prompts FILE or --prompt TEXT")
    return prompts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfinfill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="decode a batch of prompts and emit JSONL records")
    run.add_argument("--backend", required=True, help="backend descriptor JSON file")
    run.add_argument("--config", help="JSON config file mirroring the run settings")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--tau", type=float)
    run.add_argument("--loops", type=int)
    run.add_argument("--strategy", choices=("vanilla", "extended", "half"))
    run.add_argument("--suffix-prompt", dest="suffix_prompt")
    run.add_argument(
        "--suffix-prompt-rule",
        dest="suffix_prompt_rule",
        help="KIND[:PAYLOAD], e.g. fixed_text:return, first_argument_name, target_variable:result, end_marker:</code>",
    )
    run.add_argument("--stop", action="append", help="stop sequence (repeatable)")
    run.add_argument("--stop-preset", dest="stop_preset")
    run.add_argument("--sample", dest="sample_mode", action="store_const", const=SAMPLE,
                     help="nucleus sampling instead of greedy decoding")
    run.add_argument("--temperature", type=float)
    run.add_argument("--top-p", dest="top_p", type=float)
    run.add_argument("--seed", type=int)
    run.add_argument("--samples", type=int)
    run.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    run.add_argument("--out", required=True, help="output JSONL path")
    run.add_argument("--traces", help="also write full decode traces to this JSONL path")
    run.add_argument("--timing", action="store_true", help="record wall time per sample")
    run.add_argument("--prompts", help="prompts file (.jsonl with problem_id/prompt, or plain lines)")
    run.add_argument("--prompt", action="append", help="inline prompt (repeatable)")

    rep = sub.add_parser("report", help="aggregate a records file")
    rep.add_argument("--records", required=True)
    rep.add_argument("--k", type=int, action="append", help="pass@k value (repeatable)")
    rep.add_argument("--checker", help="JSON file mapping problem_id to a regex of correctness")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        cli_values = {k: getattr(args, k, None) for k in DEFAULTS}
        settings = resolve_settings(cli_values, args.config)
        with open(args.backend, encoding="utf-8") as fh:
            backend_descriptor = json.load(fh)
        backend = load_backend(args.backend)
        prompts = _load_prompts(args)
        trace_fh = open(args.traces, "w", encoding="utf-8") if args.traces else None
        written = errors = 0
        try:
            with open(args.out, "w", encoding="utf-8") as out:
                for record, trace_record in run_batch(
                    prompts,
                    settings,
                    backend,
                    backend_descriptor,
                    timing=args.timing,
                    collect_traces=trace_fh is not None,
                ):
                    out.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
                    written += 1
                    if record["error"]:
                        errors += 1
                    if trace_fh is not None and trace_record is not None:
                        trace_fh.write(
                            json.dumps(trace_record, sort_keys=True, ensure_ascii=False) + "\n"
                        )
        finally:
            if trace_fh is not None:
                trace_fh.close()
        print(f"wrote {written} records to {args.out}" + (f" ({errors} errored)" if errors else ""))
        return 0

    # report
    checker = None
    if args.checker:
        with open(args.checker, encoding="utf-8") as fh:
            checker = regex_checker(json.load(fh))
    summary = report(args.records, ks=args.k or [1], checker=checker)
    print(f"records: {summary['records']} over {summary['problems']} problems"
          + (f", {summary['malformed']} malformed lines skipped" if summary["malformed"] else ""))
    for k, value in sorted(summary["pass_at_k"].items()):
        print(f"pass@{k}: {value:.4f}")
    if summary["degenerate_fraction"] is not None:
        print(f"degenerate fraction: {summary['degenerate_fraction']:.4f}")
    for category, fraction in summary["loop_changes"].items():
        print(f"loop change {category}: {fraction:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
