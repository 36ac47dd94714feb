"""Command-line entry point: ``longssm <subcommand> [flags]``.

Settings resolve as subcommand defaults < ``--config`` JSON < explicit flags,
and every run writes ``resolved_config.json`` into its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

log = logging.getLogger("longssm")


class CliError(Exception):
    pass


DEFAULTS = {
    "gen-corpus": {"profile": None, "kind": "pretrain", "n_visits": None, "shots": 5, "n_dev": 13,
                   "n_test": 39},
    "prepare": {"notes": None, "tokenizer": "bytes", "max_tokens": 16384, "heldout": None,
                "single_space": False},
    "pretrain": {"data": None, "steps": 5000, "peak_lr": 1e-3, "min_lr": 1e-5, "warmup_steps": 0,
                 "batch_size": 1, "seq_len": 2048, "weight_decay": 0.1, "grad_clip_norm": 1.0,
                 "carry_state": True, "checkpoint_every": 0, "log_every": 100, "num_layer": 4,
                 "d_model": 128, "d_state": 8, "expand": 2, "d_conv": 4, "context_len": 16384,
                 "heldout": None, "init": None},
    "finetune": {"checkpoint": None, "corpus": None, "tasks": None, "steps": 100, "lr": 3e-4,
                 "weight_decay": 0.0, "docs_per_step": 0, "shots": 5, "threshold": 0.5,
                 "scoring": "sequence", "truncation": "head", "split": "test"},
    "eval-ppl": {"checkpoint": None, "data": None, "lengths": "1024,4096,16384", "max_context": None,
                 "final_span": None, "limit": None, "plot": False},
    "bench": {"checkpoint": None, "lengths": "4096,16384", "batch": 1, "reps": 3, "warmup": 1,
              "mode": "forward"},
    "score": {"pred": None, "gold": None},
}
REQUIRED = {
    "prepare": ("notes",), "pretrain": ("data",), "finetune": ("checkpoint", "corpus"),
    "eval-ppl": ("checkpoint", "data"), "bench": ("checkpoint",), "score": ("pred", "gold"),
}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with settings (flat, or keyed by subcommand)")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("--out", default=None, help="output directory (default: current directory)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="longssm", description="Selective SSM long-document toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", parents=[common], help="generate a synthetic visit corpus")
    g.add_argument("--profile", help="GenProfile JSON")
    g.add_argument("--kind", choices=["pretrain", "cohort"], help="pretraining corpus or labeled cohort")
    g.add_argument("--n-visits", dest="n_visits", type=int, help="visits to generate (pretrain kind)")
    g.add_argument("--shots", type=int, help="positive training visits per criterion (cohort kind)")
    g.add_argument("--n-dev", dest="n_dev", type=int, help="dev visits (cohort kind)")
    g.add_argument("--n-test", dest="n_test", type=int, help="test visits (cohort kind)")

    g = sub.add_parser("prepare", parents=[common], help="aggregate notes into packed documents")
    g.add_argument("--notes", help="newline-delimited note records")
    g.add_argument("--tokenizer", help="'bytes' or a tokenizer.json path")
    g.add_argument("--max-tokens", dest="max_tokens", type=int, help="document cap")
    g.add_argument("--heldout", help="file of visit ids to exclude, one per line")
    g.add_argument("--single-space", dest="single_space", type=_bool, help="single-space separator")

    g = sub.add_parser("pretrain", parents=[common], help="causal LM pretraining")
    g.add_argument("--data", help="packed data directory from 'prepare'")
    g.add_argument("--steps", type=int, help="optimizer steps")
    g.add_argument("--peak-lr", dest="peak_lr", type=float)
    g.add_argument("--min-lr", dest="min_lr", type=float)
    g.add_argument("--warmup-steps", dest="warmup_steps", type=int, help="0 means 1%% of steps")
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--seq-len", dest="seq_len", type=int)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--grad-clip-norm", dest="grad_clip_norm", type=float)
    g.add_argument("--carry-state", dest="carry_state", type=_bool, help="carry state across chunks")
    g.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    g.add_argument("--log-every", dest="log_every", type=int)
    g.add_argument("--num-layer", dest="num_layer", type=int)
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--d-state", dest="d_state", type=int)
    g.add_argument("--expand", type=int)
    g.add_argument("--d-conv", dest="d_conv", type=int)
    g.add_argument("--context-len", dest="context_len", type=int)
    g.add_argument("--heldout", help="file of visit ids to exclude")
    g.add_argument("--init", help="checkpoint to start from")

    g = sub.add_parser("finetune", parents=[common], help="prompt-based fine-tuning and prediction")
    g.add_argument("--checkpoint", help="pretrained checkpoint")
    g.add_argument("--corpus", help="cohort directory from 'gen-corpus --kind cohort'")
    g.add_argument("--tasks", help="task definitions (JSONL); default one task per criterion")
    g.add_argument("--steps", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--docs-per-step", dest="docs_per_step", type=int,
                   help="training documents per optimizer step (0: all)")
    g.add_argument("--shots", type=int, help="required positives per task in train (0 skips check)")
    g.add_argument("--threshold", type=float)
    g.add_argument("--scoring", choices=["sequence", "first"])
    g.add_argument("--truncation", choices=["head", "tail"])
    g.add_argument("--split", choices=["dev", "test"], help="split to predict")

    g = sub.add_parser("eval-ppl", parents=[common], help="perplexity at context lengths")
    g.add_argument("--checkpoint")
    g.add_argument("--data", help="packed data directory")
    g.add_argument("--lengths", help="comma-separated context lengths")
    g.add_argument("--max-context", dest="max_context", type=int, help="reset state every N tokens")
    g.add_argument("--final-span", dest="final_span", type=int, help="score only the last N per window")
    g.add_argument("--limit", type=int, help="evaluate the first N documents")
    g.add_argument("--plot", type=_bool, help="also write ppl.svg")

    g = sub.add_parser("bench", parents=[common], help="inference throughput")
    g.add_argument("--checkpoint")
    g.add_argument("--lengths")
    g.add_argument("--batch", type=int)
    g.add_argument("--reps", type=int)
    g.add_argument("--warmup", type=int)
    g.add_argument("--mode", choices=["forward", "decode"])

    g = sub.add_parser("score", parents=[common], help="micro P/R/F1 and ROCAUC")
    g.add_argument("--pred", help="predictions CSV (doc_id, task_id, score, label)")
    g.add_argument("--gold", help="gold CSV (doc_id, task_id, gold)")
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    cfg.update({"seed": 0, "threads": None, "out": "."})
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        section = loaded.get(args.command, loaded) if isinstance(loaded, dict) else None
        if not isinstance(section, dict):
            raise CliError("config must be a JSON object")
        unknown = set(section) - set(cfg) - set(DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in section.items() if k in cfg})
    for k, v in vars(args).items():
        if k in cfg and v is not None:
            cfg[k] = v
    for k in REQUIRED.get(args.command, ()):
        if cfg.get(k) in (None, ""):
            raise CliError(f"missing required setting --{k.replace('_', '-')}")
    return cfg


def _lengths(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(f"bad length list {text!r}") from exc


def _ids_file(path) -> set:
    if not path:
        return set()
    return {line.strip() for line in Path(path).read_text().splitlines() if line.strip()}


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(cfg: dict, out: Path) -> dict:
    from longssm.synth import GenProfile, cohort_profile, write_corpus

    overrides = json.loads(_need(cfg["profile"], "profile").read_text()) if cfg["profile"] else {}
    overrides["seed"] = cfg["seed"]
    if cfg["kind"] == "cohort":
        profile = cohort_profile(shots=cfg["shots"], n_dev=cfg["n_dev"], n_test=cfg["n_test"],
                                 **{k: v for k, v in overrides.items() if k not in ("n_visits",)})
    else:
        if cfg["n_visits"] is not None:
            overrides["n_visits"] = cfg["n_visits"]
        profile = GenProfile.from_dict(overrides)
    notes, meta = write_corpus(profile, out)
    return {"notes": str(notes), "metadata": str(meta), "visits": profile.n_visits}


def cmd_prepare(cfg: dict, out: Path) -> dict:
    from longssm.data import aggregate_visit, corpus_stats, read_notes, split_heldout, truncate, write_packed
    from longssm.tokenizer import get_tokenizer

    tok = get_tokenizer(cfg["tokenizer"])
    visits = read_notes(_need(cfg["notes"], "notes file"))
    if not visits:
        raise CliError("notes file contains no visits")
    docs = [truncate(aggregate_visit(v, tok, double_space=not cfg["single_space"]), cfg["max_tokens"], tok)
            for v in visits]
    train, held = split_heldout(docs, _ids_file(cfg["heldout"]))
    stats = corpus_stats(docs, visits)
    stats.write_csv(out / "stats.csv")
    write_packed(train, out / "train", tok.vocab_size, tok.eot_id, tok.pad_id)
    if held:
        write_packed(held, out / "heldout", tok.vocab_size, tok.eot_id, tok.pad_id)
    return {"documents": stats.count, "train": len(train), "heldout": len(held),
            "tokens_mean": stats.mean, "truncation_rate": stats.truncation_rate}


def _packed_dir(path) -> Path:
    p = _need(path, "data directory")
    return p / "train" if (p / "train" / "meta.json").exists() else p


def cmd_pretrain(cfg: dict, out: Path) -> dict:
    import torch

    from longssm.checkpoint import load_checkpoint
    from longssm.data import read_packed
    from longssm.model import LmModel, ModelConfig, count_parameters
    from longssm.ssm import BlockConfig
    from longssm.training import TrainConfig, TokenStreams, train_loop

    ids, seqs, meta = read_packed(_packed_dir(cfg["data"]))
    if cfg["init"]:
        model = load_checkpoint(_need(cfg["init"], "checkpoint"))
    else:
        block = BlockConfig.from_width(cfg["d_model"], expand=cfg["expand"], d_state=cfg["d_state"],
                                       d_conv=cfg["d_conv"])
        mcfg = ModelConfig(num_layer=cfg["num_layer"], d_model=cfg["d_model"], vocab_size=meta["vocab_size"],
                           context_len=cfg["context_len"], block=block, eot_id=meta["eot_id"])
        model = LmModel(mcfg, seed=cfg["seed"])
    tcfg = TrainConfig(peak_lr=cfg["peak_lr"], min_lr=cfg["min_lr"], warmup_steps=cfg["warmup_steps"],
                       total_steps=cfg["steps"], batch_size=cfg["batch_size"], seq_len=cfg["seq_len"],
                       weight_decay=cfg["weight_decay"], grad_clip_norm=cfg["grad_clip_norm"],
                       seed=cfg["seed"], carry_state=cfg["carry_state"],
                       checkpoint_every=cfg["checkpoint_every"], log_every=cfg["log_every"])
    pad = meta["pad_id"] if meta.get("pad_id") is not None else meta["vocab_size"] - 1
    streams = TokenStreams(seqs, tcfg.batch_size, tcfg.seq_len, pad, seed=cfg["seed"],
                           exclude_ids=_ids_file(cfg["heldout"]), doc_ids=ids)
    torch.manual_seed(cfg["seed"])
    records = train_loop(model, streams, tcfg, out_dir=out, curve_path=out / "curve.csv")
    return {"parameters": count_parameters(model), "steps": len(records),
            "final_loss": records[-1]["loss"] if records else None, "checkpoint": str(out / "final.ckpt"),
            "train_config": tcfg.to_dict()}


def cmd_finetune(cfg: dict, out: Path) -> dict:
    from longssm.checkpoint import load_checkpoint, save_checkpoint
    from longssm.data import read_notes
    from longssm.metrics import metric_report
    from longssm.prompting import (FinetuneConfig, criterion_tasks, few_shot_split, finetune,
                                   predict_rows, read_tasks, write_gold, write_predictions, write_tasks)
    from longssm.synth import label_tasks, read_metadata

    corpus = _need(cfg["corpus"], "cohort directory")
    visits = {v.visit_id: v for v in read_notes(_need(corpus / "notes.jsonl", "notes file"))}
    metas = read_metadata(_need(corpus / "metadata.jsonl", "metadata file"))
    tasks = read_tasks(_need(cfg["tasks"], "tasks file")) if cfg["tasks"] else criterion_tasks()
    write_tasks(tasks, out / "tasks.jsonl")
    labeled = label_tasks([(visits[m.visit_id], m) for m in metas], k_criteria=len(tasks),
                          shots=cfg["shots"] or None)
    split = few_shot_split(labeled)
    model = load_checkpoint(_need(cfg["checkpoint"], "checkpoint"))
    fcfg = FinetuneConfig(steps=cfg["steps"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                          docs_per_step=cfg["docs_per_step"], seed=cfg["seed"],
                          truncation=cfg["truncation"])
    finetune(model, tasks, split, fcfg)
    save_checkpoint(model, out / "finetuned.ckpt", extra={"finetune": fcfg.to_dict()})
    items = split.test if cfg["split"] == "test" else split.dev
    rows = predict_rows(model, items, tasks, cfg["threshold"], scoring=cfg["scoring"],
                        truncation=cfg["truncation"])
    write_predictions(rows, out / "predictions.csv")
    write_gold(items, out / "gold.csv")
    scores = {(d, t): s for d, t, s, _ in rows}
    labels = {(d, t): y for d, t, _, y in rows}
    gold = {(i.doc.visit_id, k): v for i in items for k, v in i.labels.items()}
    report = metric_report(scores, labels, gold)
    report.write_csv(out / "metrics.csv")
    return {"train_docs": len(split.train), "predicted_docs": len(items), "f1": report.f1,
            "rocauc": report.rocauc}


def cmd_eval_ppl(cfg: dict, out: Path) -> dict:
    from longssm.checkpoint import load_checkpoint
    from longssm.data import read_packed
    from longssm.evaluation import perplexity_report

    model = load_checkpoint(_need(cfg["checkpoint"], "checkpoint"))
    data = _need(cfg["data"], "data directory")
    if (data / "heldout" / "meta.json").exists():
        data = data / "heldout"
    elif (data / "train" / "meta.json").exists():
        data = data / "train"
    _, seqs, _ = read_packed(data)
    if cfg["limit"]:
        seqs = seqs[: cfg["limit"]]
    seqs = [s.tolist() for s in seqs]
    report = perplexity_report(model, seqs, _lengths(cfg["lengths"]), final_span=cfg["final_span"],
                               max_context=cfg["max_context"])
    report.write_csv(out / "ppl.csv")
    if cfg["plot"]:
        report.plot_svg(out / "ppl.svg")
    return {"perplexity": {r.ctx_len: r.perplexity for r in report.results}}


def cmd_bench(cfg: dict, out: Path) -> dict:
    from longssm.checkpoint import load_checkpoint
    from longssm.evaluation import throughput, write_throughput_csv

    model = load_checkpoint(_need(cfg["checkpoint"], "checkpoint"))
    results = [throughput(model, L, batch=cfg["batch"], reps=cfg["reps"], warmup=cfg["warmup"],
                          mode=cfg["mode"], seed=cfg["seed"]) for L in _lengths(cfg["lengths"])]
    write_throughput_csv(results, out / "throughput.csv")
    return {"tokens_per_s": {r.ctx_len: r.tokens_per_s for r in results}}


def cmd_score(cfg: dict, out: Path) -> dict:
    from longssm.metrics import metric_report
    from longssm.prompting import read_table

    pred = _need(cfg["pred"], "predictions file")
    scores = read_table(pred, "score")
    labels = {k: int(v) for k, v in read_table(pred, "label").items()}
    gold = {k: int(v) for k, v in read_table(_need(cfg["gold"], "gold file"), "gold").items()}
    try:
        report = metric_report(scores, labels, gold)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    report.write_csv(out / "metrics.csv")
    return {"precision": report.precision, "recall": report.recall, "f1": report.f1,
            "rocauc": report.rocauc}


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "prepare": cmd_prepare, "pretrain": cmd_pretrain,
    "finetune": cmd_finetune, "eval-ppl": cmd_eval_ppl, "bench": cmd_bench, "score": cmd_score,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if cfg["threads"]:
            import torch

            torch.set_num_threads(cfg["threads"])
            os.environ.setdefault("NUMBA_NUM_THREADS", str(cfg["threads"]))
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(
            json.dumps({"command": args.command, **cfg}, indent=2, sort_keys=True) + "\n")
        summary = COMMANDS[args.command](cfg, out)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
