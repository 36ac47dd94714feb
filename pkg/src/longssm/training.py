"""Pretraining recipe: Adam (beta1 0.9, beta2 0.95, eps 1e-5), decoupled weight
decay 0.1, global-norm clipping at 1.0, linear warmup then cosine decay to
1e-5, over packed document streams."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import torch

from longssm.model import LmModel, lm_loss
from longssm.ssm import BlockState, NonFiniteInputError

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float = 6e-4
    min_lr: float = 1e-5
    warmup_steps: int = 0  # 0 -> 1% of total_steps
    total_steps: int = 7000
    batch_size: int = 32
    seq_len: int = 2048
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-5
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    seed: int = 0
    carry_state: bool = True
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.warmup_steps == 0:
            self.warmup_steps = max(1, round(0.01 * self.total_steps))
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")
        if self.min_lr > self.peak_lr:
            raise ValueError("min_lr must not exceed peak_lr")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate at ``step``; steps past ``total_steps`` stay at ``min_lr``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= cfg.total_steps:
        return cfg.min_lr
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: Sequence[torch.Tensor]) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(g.detach().double().pow(2).sum())
    return math.sqrt(total)


def clip_gradients(grads: Sequence[torch.Tensor], max_norm: float, step: Optional[int] = None):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Clipped gradients land within 1e-6 (relative) below ``max_norm``.
    Returns ``(grads, norm_before_clipping)``.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        where = "" if step is None else f" at step {step}"
        raise TrainingAborted(f"non-finite gradient norm{where}")
    if norm > max_norm:
        # a 1e-6 relative margin exceeds float32 rounding, so the result never overshoots
        scale = max_norm / norm * (1.0 - 1e-6)
        for g in grads:
            if g is not None:
                g.mul_(scale)
    return grads, norm


class AdamState:
    """First/second moments and step count, one pair per parameter."""

    def __init__(self, params: Sequence[torch.Tensor]):
        self.step = 0
        self.exp_avg = [torch.zeros_like(p) for p in params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in params]

    def state_dict(self) -> dict:
        return {"step": self.step, "exp_avg": self.exp_avg, "exp_avg_sq": self.exp_avg_sq}


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              cfg: TrainConfig, lr: float, decay_mask: Optional[Sequence[bool]] = None):
    """One bias-corrected Adam update in place.

    Weight decay is decoupled and applied first, p <- p - lr * wd * p, only to
    entries with ``decay_mask`` true. Epsilon is added outside the square root.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if cfg.weight_decay and (decay_mask is None or decay_mask[i]):
            p.mul_(1.0 - lr * cfg.weight_decay)
        m, v = state.exp_avg[i], state.exp_avg_sq[i]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(cfg.epsilon)
        p.addcdiv_(m, denom, value=-lr / bc1)


def decay_mask_for(model: torch.nn.Module) -> list[bool]:
    """Matrices decay; norm scales, biases, skip terms and state-matrix logs do not."""
    mask = []
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        mask.append(p.dim() >= 2 and leaf not in ("a_log",))
    return mask


# ---------------------------------------------------------------------------
# data streams


def pack_documents(docs: Iterable[Sequence[int]], seq_len: int, pad_id: int) -> list[np.ndarray]:
    """Greedy order-preserving packing into rows of ``seq_len + 1`` tokens.

    Whole documents are kept together when they fit; a document longer than a
    row is split across consecutive rows. Unused tail positions hold ``pad_id``.
    """
    width = seq_len + 1
    rows: list[np.ndarray] = []
    cur: list[int] = []
    for doc in docs:
        doc = list(doc)
        if cur and len(cur) + len(doc) > width:
            rows.append(np.array(cur + [pad_id] * (width - len(cur)), dtype=np.int64))
            cur = []
        while len(doc) > width:
            rows.append(np.array(doc[:width], dtype=np.int64))
            doc = doc[width:]
        cur.extend(doc)
    if cur:
        rows.append(np.array(cur + [pad_id] * (width - len(cur)), dtype=np.int64))
    return rows


class TokenStreams:
    """``batch_size`` parallel token streams cut into consecutive chunks.

    Documents are shuffled once per epoch with the run seed and dealt
    round-robin into streams; chunk k of stream b directly continues chunk
    k - 1, so recurrent state can be carried between steps. Each chunk holds
    ``seq_len + 1`` tokens with a one-token overlap, giving next-token targets
    for every position.
    """

    def __init__(self, docs: Sequence[Sequence[int]], batch_size: int, seq_len: int,
                 pad_id: int, seed: int = 0, exclude_ids: Optional[set] = None,
                 doc_ids: Optional[Sequence] = None):
        if exclude_ids and doc_ids is None:
            raise ValueError("doc_ids are required to exclude documents")
        self.docs = list(docs)
        self.doc_ids = list(doc_ids) if doc_ids is not None else list(range(len(self.docs)))
        exclude_ids = exclude_ids or set()
        self.keep = [i for i, d in enumerate(self.doc_ids) if d not in exclude_ids]
        if not self.keep:
            raise ValueError("no training documents left after exclusion")
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.pad_id = pad_id
        self.rng = random.Random(seed)
        self.epoch = 0
        self._buffers = [np.zeros(0, dtype=np.int64) for _ in range(batch_size)]
        self._ids: list[list] = [[] for _ in range(batch_size)]
        self._spans: list[list] = [[] for _ in range(batch_size)]
        self.seen_ids: set = set()

    def _refill(self):
        order = list(self.keep)
        self.rng.shuffle(order)
        self.epoch += 1
        for j, i in enumerate(order):
            b = j % self.batch_size
            base = len(self._buffers[b])
            self._buffers[b] = np.concatenate([self._buffers[b], np.asarray(self.docs[i], np.int64)])
            self._spans[b].append((base, base + len(self.docs[i]), self.doc_ids[i]))

    def next_chunk(self):
        """(tokens [B, seq_len + 1], mask [B, seq_len + 1], doc ids per row)."""
        need = self.seq_len + 1
        while any(len(buf) < need for buf in self._buffers):
            self._refill()
        rows, ids = [], []
        for b in range(self.batch_size):
            buf = self._buffers[b]
            rows.append(buf[:need])
            ids.append({d for s, e, d in self._spans[b] if s < need and e > 0})
            shift = self.seq_len
            self._buffers[b] = buf[shift:]
            self._spans[b] = [(s - shift, e - shift, d) for s, e, d in self._spans[b] if e - shift > 0]
        tokens = torch.from_numpy(np.stack(rows))
        mask = tokens != self.pad_id
        for s in ids:
            self.seen_ids |= s
        return tokens, mask, ids


def _detach_state(state: list[BlockState]) -> list[BlockState]:
    return [BlockState(s.conv.detach(), s.ssm.detach()) for s in state]


def train_loop(model: LmModel, streams: TokenStreams, cfg: TrainConfig,
               out_dir: Optional[Path] = None, curve_path: Optional[Path] = None,
               on_step=None) -> list[dict]:
    """Run ``cfg.total_steps`` optimizer steps; return per-step records.

    With ``carry_state`` the recurrent state from one chunk seeds the next
    (detached, so gradients stay within a chunk). Records carry step, loss,
    lr and pre-clip grad norm; they are written as CSV to ``curve_path``.
    """
    from longssm.checkpoint import save_checkpoint

    torch.manual_seed(cfg.seed)
    params = [p for p in model.parameters()]
    mask = decay_mask_for(model)
    state = AdamState(params)
    records = []
    carried = None
    model.train()
    curve_file = None
    writer = None
    if curve_path is not None:
        curve_path = Path(curve_path)
        curve_path.parent.mkdir(parents=True, exist_ok=True)
        curve_file = open(curve_path, "w", newline="")
        writer = csv.writer(curve_file)
        writer.writerow(["step", "loss", "lr", "grad_norm"])
    try:
        for step in range(cfg.total_steps):
            lr = lr_at(step, cfg)
            tokens, tmask, _ = streams.next_chunk()
            try:
                loss, new_state = lm_loss(model, tokens, tmask, state=carried, return_state=True)
            except NonFiniteInputError as exc:
                raise TrainingAborted(f"non-finite activations at step {step}: {exc}") from exc
            if not torch.isfinite(loss):
                raise TrainingAborted(f"loss became {loss.item()} at step {step}")
            for p in params:
                p.grad = None
            loss.backward()
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
            _, norm = clip_gradients(grads, cfg.grad_clip_norm, step=step)
            adam_step(params, grads, state, cfg, lr, decay_mask=mask)
            carried = _detach_state(new_state) if cfg.carry_state else None
            rec = {"step": step, "loss": loss.item(), "lr": lr, "grad_norm": norm}
            records.append(rec)
            if writer is not None:
                writer.writerow([step, repr(rec["loss"]), repr(lr), repr(norm)])
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.4f lr %.2e gnorm %.3f", step, rec["loss"], lr, norm)
            if on_step is not None:
                on_step(rec)
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, Path(out_dir) / f"step{step + 1:06d}.ckpt")
    finally:
        if curve_file is not None:
            curve_file.close()
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / "final.ckpt")
    model.eval()
    return records
