"""Prompt-based fine-tuning with Yes/No verbalizers.

A criterion prompt is appended to each document and the LM is trained to
emit the label word at the end. At inference the document is run once and
every task's prompt branches from the document's final recurrent state.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from longssm.data import Document
from longssm.model import LmModel
from longssm.ssm import BlockState
from longssm.tokenizer import ByteTokenizer
from longssm.training import AdamState, TrainConfig, adam_step, clip_gradients, decay_mask_for

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "\n- - General note  - -\nCase review question.\n{criterion}: "


@dataclass(frozen=True)
class PromptTask:
    task_id: str
    template: str
    criterion: str = ""
    positive: str = "Yes"
    negative: str = "No"
    label_id: int = 0

    def __post_init__(self):
        if not self.positive or not self.negative:
            raise ValueError(f"task {self.task_id}: verbalizer strings must be non-empty")
        if self.positive == self.negative:
            raise ValueError(f"task {self.task_id}: verbalizer strings must differ")

    def render(self) -> str:
        return self.template.format(criterion=self.criterion) if self.template else ""

    def prompt_tokens(self, tokenizer=None) -> list[int]:
        return (tokenizer or ByteTokenizer()).encode(self.render())

    def verbalizer_tokens(self, tokenizer=None) -> tuple[list[int], list[int]]:
        tok = tokenizer or ByteTokenizer()
        yes, no = tok.encode(self.positive), tok.encode(self.negative)
        if not yes or not no or yes == no:
            raise ValueError(f"task {self.task_id}: verbalizer token sequences must be non-empty and distinct")
        return yes, no


@dataclass
class LabeledDocument:
    doc: Document
    labels: dict  # task_id -> 0/1


@dataclass
class FewShotSplit:
    train: list
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)
    shots: Optional[int] = None

    def __post_init__(self):
        if self.shots is not None:
            counts = self.shot_counts()
            bad = {k: n for k, n in counts.items() if n != self.shots}
            if bad:
                raise ValueError(f"train shot counts differ from {self.shots}: {bad}")

    def shot_counts(self) -> dict:
        counts: dict = {}
        for item in self.train:
            for k, y in item.labels.items():
                counts[k] = counts.get(k, 0) + int(y)
        return counts


def build_input(doc: Document, task: PromptTask, context_len: int, tokenizer=None,
                preamble: str = "", delimiter: Optional[int] = None,
                truncation: str = "head") -> list[int]:
    """``[delimiter] + preamble + doc + prompt``, cut to ``context_len``.

    Only document tokens are dropped when the total exceeds the context:
    ``head`` truncation drops the oldest ones, ``tail`` the newest.
    """
    ctx, prompt = split_input(doc, task.prompt_tokens(tokenizer), context_len, tokenizer,
                              preamble, delimiter, truncation)
    return ctx + prompt


def split_input(doc: Document, prompt: Sequence[int], context_len: int, tokenizer=None,
                preamble: str = "", delimiter: Optional[int] = None,
                truncation: str = "head", reserve: int = 0) -> tuple[list[int], list[int]]:
    """(context tokens, prompt tokens) where the context fits beside the prompt.

    ``reserve`` keeps room for tokens appended after the prompt (verbalizers).
    """
    if truncation not in ("head", "tail"):
        raise ValueError("truncation must be 'head' or 'tail'")
    tok = tokenizer or ByteTokenizer()
    fixed = ([delimiter] if delimiter is not None else []) + (tok.encode(preamble) if preamble else [])
    room = context_len - len(prompt) - len(fixed) - reserve
    if room < 0:
        raise ValueError(f"prompt of {len(prompt)} tokens does not fit in context_len {context_len}")
    body = list(doc.tokens)
    if len(body) > room:
        body = body[len(body) - room:] if truncation == "head" else body[:room]
    return fixed + body, list(prompt)


def verbalizer_score(logits: torch.Tensor, task: PromptTask, tokenizer=None) -> float:
    """p(positive) from a softmax restricted to the verbalizers' first tokens."""
    yes, no = task.verbalizer_tokens(tokenizer)
    if yes[0] == no[0]:
        raise ValueError(f"task {task.task_id}: verbalizers share their first token; use sequence scoring")
    pair = torch.stack([logits[yes[0]], logits[no[0]]]).double()
    return float(torch.softmax(pair, 0)[0])


def _state_rows(state: list[BlockState], rows: int) -> list[BlockState]:
    return [BlockState(s.conv.expand(rows, -1, -1).contiguous(), s.ssm.expand(rows, -1, -1).contiguous())
            for s in state]


def _pad_rows(rows: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    width = max(len(r) for r in rows)
    return torch.tensor([list(r) + [pad_id] * (width - len(r)) for r in rows], dtype=torch.long)


def branch_logprobs(model: LmModel, context: Sequence[int], prompts: Sequence[Sequence[int]],
                    continuations: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    """Summed log-prob of ``continuations[i]`` after ``context + prompts[i]``.

    The context is run once; all rows branch from its final state. Teacher
    forcing scores every continuation token. Returns a [R] tensor that
    carries gradients when grad mode is on.
    """
    if len(prompts) != len(continuations) or not prompts:
        raise ValueError("need one continuation per prompt")
    state = None
    if context:
        _, state = model.hidden(torch.tensor([list(context)], dtype=torch.long), check_length=False)
        state = _state_rows(state, len(prompts))
    rows = [list(p) + list(c[:-1]) for p, c in zip(prompts, continuations)]
    if any(not r for r in rows):
        raise ValueError("each row needs at least one input token")
    x = _pad_rows(rows, pad_id)
    h, _ = model.hidden(x, state, check_length=False)
    out = []
    for i, (p, c) in enumerate(zip(prompts, continuations)):
        start = len(p) - 1
        pos = torch.arange(start, start + len(c))
        logits = h[i, pos] @ model.head_weight.t()
        lp = F.log_softmax(logits, -1)
        out.append(lp.gather(1, torch.tensor(list(c)).view(-1, 1)).sum())
    return torch.stack(out)


def score_document(model: LmModel, doc: Document, tasks: Sequence[PromptTask], tokenizer=None,
                   preamble: str = "", scoring: str = "sequence",
                   truncation: str = "head") -> dict:
    """task_id -> p(positive) for one document."""
    tok = tokenizer or ByteTokenizer()
    prompts = [t.prompt_tokens(tok) for t in tasks]
    verbs = [t.verbalizer_tokens(tok) for t in tasks]
    reserve = max(max(len(y), len(n)) for y, n in verbs)
    longest = max(prompts, key=len)
    context, _ = split_input(doc, longest, model.cfg.context_len, tok, preamble,
                             model.cfg.eot_id, truncation, reserve)
    with torch.no_grad():
        if scoring == "first":
            state = None
            if context:
                _, state = model.hidden(torch.tensor([context]), check_length=False)
                state = _state_rows(state, len(prompts))
            h, _ = model.hidden(_pad_rows(prompts, tok.pad_id), state, check_length=False)
            return {t.task_id: verbalizer_score(h[i, len(p) - 1] @ model.head_weight.t(), t, tok)
                    for i, (t, p) in enumerate(zip(tasks, prompts))}
        if scoring != "sequence":
            raise ValueError("scoring must be 'sequence' or 'first'")
        rows_p = [p for p in prompts for _ in (0, 1)]
        rows_c = [v for y, n in verbs for v in (y, n)]
        lp = branch_logprobs(model, context, rows_p, rows_c, tok.pad_id).view(-1, 2).double()
        probs = torch.sigmoid(lp[:, 0] - lp[:, 1])
    return {t.task_id: float(p) for t, p in zip(tasks, probs)}


def predict_multilabel(model: LmModel, doc: Document, tasks: Sequence[PromptTask],
                       threshold: float = 0.5, thresholds: Optional[dict] = None, **kw):
    """(set of task ids with p >= threshold, task_id -> score)."""
    scores = score_document(model, doc, tasks, **kw)
    labels = {k for k, p in scores.items()
              if p >= (thresholds.get(k, threshold) if thresholds else threshold)}
    return labels, scores


@dataclass
class FinetuneConfig:
    steps: int = 100
    lr: float = 3e-4
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-5
    seed: int = 0
    docs_per_step: int = 0  # 0 -> every training document each step
    truncation: str = "head"

    def to_dict(self) -> dict:
        return asdict(self)


def label_loss(model: LmModel, item: LabeledDocument, tasks: Sequence[PromptTask], tokenizer=None,
               truncation: str = "head", preamble: str = "") -> torch.Tensor:
    """Mean cross-entropy over the gold verbalizer tokens of every task."""
    tok = tokenizer or ByteTokenizer()
    tasks = [t for t in tasks if t.task_id in item.labels]
    prompts = [t.prompt_tokens(tok) for t in tasks]
    verbs = [t.verbalizer_tokens(tok) for t in tasks]
    gold = [y if item.labels[t.task_id] else n for t, (y, n) in zip(tasks, verbs)]
    reserve = max(max(len(y), len(n)) for y, n in verbs)
    context, _ = split_input(item.doc, max(prompts, key=len), model.cfg.context_len, tok,
                             preamble, model.cfg.eot_id, truncation, reserve)
    lp = branch_logprobs(model, context, prompts, gold, tok.pad_id)
    return -lp.sum() / sum(len(g) for g in gold)


def finetune(model: LmModel, tasks: Sequence[PromptTask], split: FewShotSplit,
             cfg: Optional[FinetuneConfig] = None, tokenizer=None, on_step=None) -> LmModel:
    """Full-parameter prompt fine-tuning on ``split.train``; returns ``model``."""
    cfg = cfg or FinetuneConfig()
    if not split.train:
        raise ValueError("no training shots")
    if cfg.steps == 0:
        return model
    if not tasks:
        raise ValueError("no tasks")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    params = list(model.parameters())
    opt_cfg = TrainConfig(peak_lr=cfg.lr, min_lr=0.0, total_steps=max(2, cfg.steps), beta1=cfg.beta1,
                          beta2=cfg.beta2, epsilon=cfg.epsilon, weight_decay=cfg.weight_decay)
    state = AdamState(params)
    mask = decay_mask_for(model)
    if cfg.docs_per_step < 0:
        raise ValueError("docs_per_step must be non-negative")
    per_step = cfg.docs_per_step or len(split.train)
    order: list[int] = []
    model.train()
    for step in range(cfg.steps):
        for p in params:
            p.grad = None
        total = 0.0
        for _ in range(per_step):
            if not order:
                order = list(range(len(split.train)))
                rng.shuffle(order)
            item = split.train[order.pop()]
            loss = label_loss(model, item, tasks, tokenizer, cfg.truncation) / per_step
            loss.backward()
            total += loss.item()
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
        _, norm = clip_gradients(grads, cfg.grad_clip_norm, step=step)
        adam_step(params, grads, state, opt_cfg, cfg.lr, decay_mask=mask)
        if on_step is not None:
            on_step({"step": step, "loss": total, "grad_norm": norm})
    model.eval()
    return model


def tune_thresholds(scores: Sequence[dict], gold: Sequence[dict]) -> dict:
    """Per-task threshold maximizing F1 on a dev set (ties keep the lowest)."""
    out = {}
    for k in scores[0] if scores else []:
        pairs = sorted((s[k], g[k]) for s, g in zip(scores, gold))
        best, best_f1 = 0.5, -1.0
        for thr, _ in pairs:
            tp = sum(1 for s, y in pairs if s >= thr and y)
            fp = sum(1 for s, y in pairs if s >= thr and not y)
            fn = sum(1 for s, y in pairs if s < thr and y)
            f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
            if f1 > best_f1:
                best, best_f1 = thr, f1
        out[k] = best
    return out


# ---------------------------------------------------------------------------
# file formats


def write_tasks(tasks: Sequence[PromptTask], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps(asdict(t), sort_keys=True) + "\n")


def read_tasks(path) -> list[PromptTask]:
    tasks = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    tasks.append(PromptTask(**json.loads(line)))
                except (TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad task record ({exc})") from exc
    if not tasks:
        raise ValueError(f"{path} defines no tasks")
    return tasks


def write_predictions(rows: Sequence[tuple], path) -> None:
    """rows of (doc_id, task_id, score, label)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["doc_id", "task_id", "score", "label"])
        for doc_id, task_id, score, label in rows:
            w.writerow([doc_id, task_id, repr(float(score)), int(label)])


def write_gold(items: Sequence[LabeledDocument], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["doc_id", "task_id", "gold"])
        for item in items:
            for k in sorted(item.labels):
                w.writerow([item.doc.visit_id, k, int(item.labels[k])])


def read_table(path, value: str) -> dict:
    """(doc_id, task_id) -> column ``value`` from a predictions or gold CSV."""
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[(row["doc_id"], row["task_id"])] = float(row[value])
    return out


def criterion_tasks(k_criteria: int = 13, template: str = DEFAULT_TEMPLATE) -> list[PromptTask]:
    """One Yes/No task per synthetic eligibility criterion."""
    from longssm.synth import CRITERIA

    return [PromptTask(c.key, template, c.display, label_id=i) for i, c in enumerate(CRITERIA[:k_criteria])]


def few_shot_split(labeled, tokenizer=None, max_tokens: Optional[int] = None,
                   shots: Optional[int] = None) -> FewShotSplit:
    """Aggregate labeled visits (objects with ``train``/``dev``/``test`` lists of
    items carrying ``visit`` and ``labels``) into documents."""
    from longssm.data import MAX_TOKENS, aggregate_visit, truncate

    tok = tokenizer or ByteTokenizer()
    cap = MAX_TOKENS if max_tokens is None else max_tokens

    def docs(items):
        return [LabeledDocument(truncate(aggregate_visit(x.visit, tok), cap, tok), dict(x.labels))
                for x in items]

    return FewShotSplit(docs(labeled.train), docs(labeled.dev), docs(labeled.test), shots=shots)


def predict_rows(model: LmModel, items: Sequence[LabeledDocument], tasks: Sequence[PromptTask],
                 threshold: float = 0.5, **kw) -> list[tuple]:
    """(doc_id, task_id, score, label) for every document and task."""
    rows = []
    for item in items:
        labels, scores = predict_multilabel(model, item.doc, tasks, threshold, **kw)
        for t in tasks:
            rows.append((item.doc.visit_id, t.task_id, scores[t.task_id], int(t.task_id in labels)))
    return rows
