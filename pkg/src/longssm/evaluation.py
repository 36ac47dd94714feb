"""Perplexity at sliced context lengths and inference throughput."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from longssm.model import LmModel


@dataclass
class PplResult:
    ctx_len: int
    perplexity: float
    nll: float
    tokens: int
    windows: int


def _windows(n: int, size: int) -> list[tuple[int, int]]:
    return [(s, min(s + size, n)) for s in range(0, n, size)]


LOGIT_CHUNK = 1024  # positions projected to the vocabulary at once


@torch.no_grad()
def window_nll(model: LmModel, tokens: Sequence[int], final_span: Optional[int] = None,
               max_context: Optional[int] = None) -> tuple[float, int]:
    """(summed NLL, predicted count) for one window evaluated from an empty state.

    ``max_context`` resets the state every that many tokens (hard truncation);
    predictions never cross a reset. ``final_span`` counts only the last
    that many predictions of the window.
    """
    x = torch.as_tensor(list(tokens), dtype=torch.long)
    n = len(x)
    if n < 2:
        return 0.0, 0
    chunks = _windows(n, max_context) if max_context else [(0, n)]
    nll = torch.zeros(n - 1, dtype=torch.float64)
    valid = torch.zeros(n - 1, dtype=torch.bool)
    head = model.head_weight
    for s, e in chunks:
        if e - s < 2:
            continue
        h, _ = model.hidden(x[s:e - 1].unsqueeze(0), check_length=False)
        for a in range(0, e - 1 - s, LOGIT_CHUNK):
            b = min(a + LOGIT_CHUNK, e - 1 - s)
            lp = F.log_softmax((h[0, a:b] @ head.t()).double(), -1)
            nll[s + a:s + b] = -lp.gather(1, x[s + a + 1:s + b + 1].view(-1, 1)).squeeze(1)
        valid[s:e - 1] = True
    if final_span is not None:
        cut = max(0, n - 1 - final_span)
        valid[:cut] = False
    return float(nll[valid].sum()), int(valid.sum())


def perplexity_at(model: LmModel, docs: Sequence[Sequence[int]], ctx_len: int,
                  final_span: Optional[int] = None, max_context: Optional[int] = None) -> PplResult:
    """exp(total NLL / predicted tokens) over non-overlapping ``ctx_len`` windows.

    Each document is cut into consecutive windows (the last may be shorter);
    every window starts from an empty state and predicts its tokens 2..n.
    """
    if not docs:
        raise ValueError("empty corpus")
    if ctx_len < 2:
        raise ValueError("ctx_len must be at least 2")
    model.eval()
    total, count, nwin = 0.0, 0, 0
    for doc in docs:
        for s, e in _windows(len(doc), ctx_len):
            nll, k = window_nll(model, doc[s:e], final_span, max_context)
            total += nll
            count += k
            nwin += 1
    if count == 0:
        raise ValueError("no predicted positions (documents shorter than 2 tokens)")
    return PplResult(ctx_len, math.exp(total / count), total, count, nwin)


@dataclass
class PplReport:
    results: list

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["ctx_len", "perplexity", "nll", "tokens", "windows"])
            for r in self.results:
                w.writerow([r.ctx_len, repr(r.perplexity), repr(r.nll), r.tokens, r.windows])

    def plot_svg(self, path, label: str = "model") -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        # fixed metadata keeps the SVG byte-stable across runs
        matplotlib.rcParams["svg.hashsalt"] = "longssm"
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r.ctx_len for r in self.results], [r.perplexity for r in self.results],
                marker="o", label=label)
        ax.set_xscale("log")
        ax.set_xlabel("context length (tokens)")
        ax.set_ylabel("perplexity")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def perplexity_report(model: LmModel, docs, lengths: Sequence[int], **kw) -> PplReport:
    return PplReport([perplexity_at(model, docs, L, **kw) for L in lengths])


# ---------------------------------------------------------------------------
# throughput


@dataclass
class ThroughputResult:
    ctx_len: int
    batch: int
    mode: str
    tokens_per_s: float
    seconds: float
    reps: int
    warmup: int
    threads: int

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def throughput(model: LmModel, ctx_len: int, batch: int = 1, reps: int = 3, warmup: int = 1,
               mode: str = "forward", seed: int = 0) -> ThroughputResult:
    """Median tokens/s over ``reps`` timed runs after ``warmup`` untimed ones.

    ``forward`` times one teacher-forced pass over [batch, ctx_len] tokens;
    ``decode`` feeds the same tokens one step at a time through the state.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if mode not in ("forward", "decode"):
        raise ValueError("mode must be 'forward' or 'decode'")
    g = torch.Generator().manual_seed(seed)
    x = torch.randint(0, min(256, model.cfg.vocab_size), (batch, ctx_len), generator=g)
    model.eval()

    def run():
        if mode == "forward":
            model(x, check_length=False)
        else:
            state = model.empty_state(batch)
            for t in range(ctx_len):
                _, state = model.step(x[:, t], state)

    times = []
    for i in range(warmup + reps):
        t0 = time.perf_counter()
        run()
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
    sec = statistics.median(times)
    return ThroughputResult(ctx_len, batch, mode, batch * ctx_len / sec, sec, reps, warmup,
                            torch.get_num_threads())


def write_throughput_csv(results: Sequence[ThroughputResult], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ctx_len", "batch", "mode", "tokens_per_s", "seconds", "reps", "warmup", "threads"])
        for r in results:
            w.writerow([r.ctx_len, r.batch, r.mode, f"{r.tokens_per_s:.1f}", f"{r.seconds:.6f}",
                        r.reps, r.warmup, r.threads])
