"""Causal language model: embedding, residual stack of RMS-normalized selective
SSM blocks, final norm, tied (by default) LM head. There are no positional
parameters; order enters only through the recurrence and the causal conv."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from longssm.ssm import BlockConfig, BlockState, ConfigError, MambaBlock

IGNORE_INDEX = -100


@dataclass(frozen=True)
class ModelConfig:
    num_layer: int = 4
    d_model: int = 128
    vocab_size: int = 258
    context_len: int = 16384
    block: Optional[BlockConfig] = None
    tie_embeddings: bool = True
    eot_id: Optional[int] = 256  # state resets where this token appears; None disables
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.block is None:
            object.__setattr__(self, "block", BlockConfig.from_width(self.d_model))
        elif isinstance(self.block, dict):
            object.__setattr__(self, "block", BlockConfig(**self.block))
        if self.context_len < 1:
            raise ConfigError("context_len must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.num_layer < 1:
            raise ConfigError("num_layer must be >= 1")
        if self.block.d_model != self.d_model:
            raise ConfigError("block d_model differs from model d_model")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Layer(nn.Module):
    def __init__(self, cfg: ModelConfig, generator=None):
        super().__init__()
        self.norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.mixer = MambaBlock(cfg.block, generator=generator)


class LmModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.d_model)
        with torch.no_grad():
            self.embedding.weight.normal_(0.0, 0.02, generator=g)
        self.layers = nn.ModuleList(Layer(cfg, generator=g) for _ in range(cfg.num_layer))
        self.norm_f = RMSNorm(cfg.d_model, cfg.norm_eps)
        if cfg.tie_embeddings:
            self.lm_head = None
        else:
            self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
            with torch.no_grad():
                self.lm_head.weight.normal_(0.0, 0.02, generator=g)
        # rescale residual branch outputs by depth, as in GPT-2 style inits
        with torch.no_grad():
            for layer in self.layers:
                layer.mixer.out_proj.weight /= math.sqrt(cfg.num_layer)

    @property
    def head_weight(self) -> torch.Tensor:
        return self.embedding.weight if self.lm_head is None else self.lm_head.weight

    def empty_state(self, batch: int = 1) -> list[BlockState]:
        return [layer.mixer.empty_state(batch) for layer in self.layers]

    def _check_tokens(self, tokens: torch.Tensor):
        if tokens.numel() == 0 or tokens.shape[-1] == 0:
            raise ValueError("empty token sequence")
        if tokens.shape[-1] > self.cfg.context_len:
            raise ValueError(
                f"sequence length {tokens.shape[-1]} exceeds context_len {self.cfg.context_len}")
        lo, hi = int(tokens.min()), int(tokens.max())
        if lo < 0 or hi >= self.cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size}): {lo if lo < 0 else hi}")

    def hidden(self, tokens: torch.Tensor, state: Optional[list[BlockState]] = None,
               scan: Optional[str] = None, check_length: bool = True):
        """Final normalized hidden states [B, L, d_model] and the carried state."""
        if check_length:
            self._check_tokens(tokens)
        x = self.embedding(tokens)
        reset = None
        if self.cfg.eot_id is not None:
            reset = tokens == self.cfg.eot_id
            if not bool(reset.any()):
                reset = None
        new_state = []
        for i, layer in enumerate(self.layers):
            out, st = layer.mixer(layer.norm(x), None if state is None else state[i],
                                  reset=reset, scan=scan)
            x = x + out
            new_state.append(st)
        return self.norm_f(x), new_state

    def forward(self, tokens: torch.Tensor, state: Optional[list[BlockState]] = None,
                scan: Optional[str] = None, return_state: bool = False,
                check_length: bool = True):
        """tokens [L] or [B, L] -> logits [L, V] or [B, L, V]."""
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        h, new_state = self.hidden(tokens, state, scan=scan, check_length=check_length)
        logits = h @ self.head_weight.t()
        if squeeze:
            logits = logits[0]
        return (logits, new_state) if return_state else logits

    def step(self, token: torch.Tensor, state: list[BlockState]):
        """One recurrent step. token [B] -> (logits [B, V], new state)."""
        if self.cfg.eot_id is not None:
            hit = (token == self.cfg.eot_id).view(-1, 1, 1)
            state = [BlockState(s.conv.masked_fill(hit, 0.0), s.ssm.masked_fill(hit, 0.0))
                     for s in state]
        x = self.embedding(token)
        new_state = []
        for layer, st in zip(self.layers, state):
            out, st = layer.mixer.step(layer.norm(x), st)
            x = x + out
            new_state.append(st)
        return self.norm_f(x) @ self.head_weight.t(), new_state


def cross_entropy_loss(logits: torch.Tensor, targets: torch.Tensor,
                       ignore_index: int = IGNORE_INDEX, reduction: str = "mean") -> torch.Tensor:
    """Mean natural-log NLL over positions whose target is not ``ignore_index``.

    ``targets`` are already aligned with ``logits`` (i.e. next-token shifted).
    """
    flat_t = targets.reshape(-1)
    keep = flat_t != ignore_index
    if not bool(keep.any()):
        raise ValueError("every target position is masked")
    flat_l = logits.reshape(-1, logits.shape[-1])
    return F.cross_entropy(flat_l, flat_t, ignore_index=ignore_index, reduction=reduction)


def lm_loss(model: LmModel, tokens: torch.Tensor, mask: Optional[torch.Tensor] = None,
            state=None, return_state: bool = False):
    """Next-token loss for tokens [B, L]; ``mask`` [B, L] marks valid targets."""
    logits, new_state = model(tokens[:, :-1], state=state, return_state=True)
    targets = tokens[:, 1:].clone()
    if mask is not None:
        targets[~mask[:, 1:]] = IGNORE_INDEX
    loss = cross_entropy_loss(logits, targets)
    return (loss, new_state) if return_state else loss


def next_token_logits(model: LmModel, tokens: torch.Tensor, recurrent: bool = False) -> torch.Tensor:
    """Logits for the token following ``tokens`` [L].

    The default evaluates a full forward and returns its last row.
    ``recurrent=True`` feeds tokens one at a time through carried state.
    """
    if tokens.dim() != 1 or tokens.numel() == 0:
        raise ValueError("expected a non-empty 1-D token sequence")
    if not recurrent:
        return model(tokens)[-1]
    model._check_tokens(tokens)
    state = model.empty_state(1)
    for tok in tokens:
        logits, state = model.step(tok.view(1), state)
    return logits[0]


def zero_head_(model: LmModel) -> LmModel:
    """Zero the LM head so every position predicts the uniform distribution.

    Tied models are untied first so the embedding survives.
    """
    with torch.no_grad():
        if model.lm_head is None:
            model.lm_head = nn.Linear(model.cfg.d_model, model.cfg.vocab_size, bias=False,
                                      dtype=model.embedding.weight.dtype)
            model.cfg = replace(model.cfg, tie_embeddings=False)
        model.lm_head.weight.zero_()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
