"""Selective diagonal state space core.

The normative algebra, per channel ``c`` and state index ``n``::

    delta_t = softplus(delta_up(proj(u_t)[:rank]))          (> 0)
    B_t, C_t = proj(u_t)[rank:rank + N], proj(u_t)[rank + N:]
    abar_t = exp(delta_t[c] * A[c, n]),  bbar_t = delta_t[c] * B_t[n]
    h_t = abar_t * h_{t-1} + bbar_t * u_t[c]                 (h_0 = 0)
    y_t[c] = sum_n C_t[n] * h_t[c, n] + D[c] * u_t[c]

with ``A = -exp(a_log)`` strictly negative. Two evaluation routes share this
contract: a compiled sequential recurrence and a work-efficient associative
(Blelloch-style) prefix scan over ``(decay, shift)`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from longssm import _kernels


class ConfigError(ValueError):
    """Shapes or hyperparameters that do not fit together."""


class NonFiniteInputError(ValueError):
    """A NaN or Inf reached the scan."""


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    d_inner: int
    d_state: int = 16
    d_conv: int = 4
    delta_rank: int = 0
    delta_min: float = 1e-3
    delta_max: float = 1e-1
    scan: str = "sequential"

    def __post_init__(self):
        if self.delta_rank == 0:
            object.__setattr__(self, "delta_rank", math.ceil(self.d_model / 16))
        for name in ("d_model", "d_inner", "d_state", "d_conv", "delta_rank"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.scan not in ("sequential", "parallel"):
            raise ConfigError(f"unknown scan route {self.scan!r}")

    @classmethod
    def from_width(cls, d_model: int, expand: int = 2, **kw) -> "BlockConfig":
        return cls(d_model=d_model, d_inner=expand * d_model, **kw)


# ---------------------------------------------------------------------------
# scalar pieces


def softplus(x):
    """log(1 + exp(x)), stable at both tails. Accepts floats, arrays, tensors."""
    if isinstance(x, torch.Tensor):
        return F.softplus(x, beta=1.0, threshold=20.0)
    if isinstance(x, np.ndarray):
        return np.logaddexp(0.0, x)
    x = float(x)
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def discretize(delta: float, a: float, b: float) -> tuple[float, float]:
    """Zero-order hold for the state matrix, Euler step for the input matrix."""
    if not delta > 0:
        raise ValueError(f"step size must be positive, got {delta}")
    return math.exp(delta * a), delta * b


class ScanElement(NamedTuple):
    """Affine map h -> decay * h + shift."""

    decay: float
    shift: float


SCAN_IDENTITY = ScanElement(1.0, 0.0)


def scan_combine(first, second):
    """Compose ``first`` then ``second``; associative with identity (1, 0).

    Works elementwise on floats, arrays or tensors.
    """
    return ScanElement(second.decay * first.decay, second.decay * first.shift + second.shift)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class SsmParams:
    """Tensors of one selective SSM. Linear maps use torch (out, in) layout."""

    a_log: torch.Tensor         # [d_inner, d_state]
    d_skip: torch.Tensor        # [d_inner]
    proj_bcdelta: torch.Tensor  # [delta_rank + 2 * d_state, d_inner]
    delta_up: torch.Tensor      # [d_inner, delta_rank]
    delta_bias: torch.Tensor    # [d_inner]

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @property
    def delta_rank(self) -> int:
        return self.delta_up.shape[1]

    def state_matrix(self) -> torch.Tensor:
        return -torch.exp(self.a_log)

    def check(self):
        d, n, r = self.d_inner, self.d_state, self.delta_rank
        expect = {
            "d_skip": (d,),
            "proj_bcdelta": (r + 2 * n, d),
            "delta_up": (d, r),
            "delta_bias": (d,),
        }
        for name, shape in expect.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise ConfigError(f"{name} has shape {got}, expected {shape}")

    def project(self, u: torch.Tensor):
        """Input-dependent (delta, B, C) for ``u`` [..., L, d_inner]."""
        r, n = self.delta_rank, self.d_state
        x = u @ self.proj_bcdelta.t()
        low, Bm, Cm = torch.split(x, [r, n, n], dim=-1)
        delta = softplus(low @ self.delta_up.t() + self.delta_bias)
        return delta, Bm, Cm

    @classmethod
    def init(cls, d_inner: int, d_state: int, delta_rank: int, *,
             delta_min: float = 1e-3, delta_max: float = 1e-1,
             generator: Optional[torch.Generator] = None,
             dtype: torch.dtype = torch.float32) -> "SsmParams":
        """-A = 1..d_state on every channel; softplus(delta_bias) log-uniform in
        [delta_min, delta_max]."""
        a = torch.arange(1, d_state + 1, dtype=dtype).repeat(d_inner, 1)
        proj = torch.randn(delta_rank + 2 * d_state, d_inner, generator=generator, dtype=dtype)
        proj /= math.sqrt(d_inner)
        up = (torch.rand(d_inner, delta_rank, generator=generator, dtype=dtype) * 2 - 1)
        up *= delta_rank ** -0.5
        lo, hi = math.log(delta_min), math.log(delta_max)
        dt = torch.exp(torch.rand(d_inner, generator=generator, dtype=dtype) * (hi - lo) + lo)
        bias = dt + torch.log(-torch.expm1(-dt))  # inverse softplus
        return cls(a_log=torch.log(a), d_skip=torch.ones(d_inner, dtype=dtype),
                   proj_bcdelta=proj, delta_up=up, delta_bias=bias)


# ---------------------------------------------------------------------------
# scan routes


def _check_finite(name: str, x: torch.Tensor):
    # any nan or inf makes the sum non-finite; the exact test only runs then, since sums can overflow
    if not x.dtype.is_floating_point or math.isfinite(float(x.detach().sum())):
        return
    if not bool(torch.isfinite(x).all()):
        bad = (~torch.isfinite(x)).nonzero()[0].tolist()
        raise NonFiniteInputError(f"non-finite value in {name} at index {tuple(bad)}")


def _prep(u, delta, A, Bm, Cm, D, h0, reset):
    if u.dim() != 3:
        raise ConfigError(f"expected u of shape [batch, length, channels], got {tuple(u.shape)}")
    nb_, L, d = u.shape
    if L == 0:
        raise ValueError("cannot scan an empty sequence")
    n = A.shape[1]
    if delta.shape != u.shape or A.shape != (d, n) or Bm.shape != (nb_, L, n) \
            or Cm.shape != (nb_, L, n) or D.shape != (d,):
        raise ConfigError("inconsistent scan operand shapes")
    if h0 is None:
        h0 = u.new_zeros(nb_, d, n)
    if reset is None:
        reset = torch.zeros(nb_, L, dtype=torch.bool)
    return h0, reset


def _np(x: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(x.detach().cpu().numpy())


class _SequentialScan(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, delta, A, Bm, Cm, D, h0, reset, grad_mode):
        save = grad_mode and any(ctx.needs_input_grad)
        un, dn, An, Bn, Cn, Dn, h0n = map(_np, (u, delta, A, Bm, Cm, D, h0))
        rn = _np(reset.to(torch.uint8))
        decay = np.empty(dn.shape + An.shape[1:], dtype=dn.dtype)
        _kernels.log_decay(dn, An, decay)
        torch.from_numpy(decay).exp_()
        y = np.empty_like(un)
        hlast = np.empty_like(h0n)
        states = _kernels.empty_states(decay.shape, un.dtype, save)
        _kernels.scan_forward(decay, un, dn, Bn, Cn, Dn, h0n, rn, y, hlast, states, save)
        if save:
            ctx.arrays = (decay, un, dn, An, Bn, Cn, Dn, h0n, rn, states)
        return torch.from_numpy(y), torch.from_numpy(hlast)

    @staticmethod
    def backward(ctx, gy, ghlast):
        decay, un, dn, An, Bn, Cn, Dn, h0n, rn, states = ctx.arrays
        du = np.empty_like(un)
        gdelta = np.empty_like(dn)
        gA = np.zeros_like(An)
        gB = np.empty_like(Bn)
        gC = np.empty_like(Cn)
        gD = np.zeros_like(Dn)
        gh0 = np.empty_like(h0n)
        gy = gy.numpy().astype(un.dtype, copy=False)
        ghlast = ghlast.numpy().astype(un.dtype, copy=False)
        _kernels.scan_backward(decay, un, dn, An, Bn, Cn, Dn, h0n, rn, states,
                               np.ascontiguousarray(gy), np.ascontiguousarray(ghlast),
                               du, gdelta, gA, gB, gC, gD, gh0)
        out = tuple(torch.from_numpy(g) for g in (du, gdelta, gA, gB, gC, gD, gh0))
        return (*out, None, None)


INFERENCE_CHUNK = 1024  # positions per kernel call when no gradient is needed


def scan_sequential(u, delta, A, Bm, Cm, D, h0=None, reset=None):
    """Compiled sequential recurrence. Returns ``(y, h_last)``.

    Shapes: u, delta [B, L, D]; A [D, N]; Bm, Cm [B, L, N]; D [D];
    h0 [B, D, N]; reset bool [B, L] (zero the carried state before step t).
    Differentiable in every float operand.
    """
    h0, reset = _prep(u, delta, A, Bm, Cm, D, h0, reset)
    for name, x in (("u", u), ("delta", delta), ("B", Bm), ("C", Cm)):
        _check_finite(name, x)
    grad = torch.is_grad_enabled() and any(t.requires_grad for t in (u, delta, A, Bm, Cm, D, h0))
    L = u.shape[1]
    if grad or L <= INFERENCE_CHUNK:
        return _SequentialScan.apply(u, delta, A, Bm, Cm, D, h0, reset, grad)
    # without autograd, chain fixed-size chunks so the decay buffer stays cache sized
    ys, h = [], h0
    for s in range(0, L, INFERENCE_CHUNK):
        sl = slice(s, s + INFERENCE_CHUNK)
        y, h = _SequentialScan.apply(u[:, sl], delta[:, sl], A, Bm[:, sl], Cm[:, sl], D, h, reset[:, sl], False)
        ys.append(y)
    return torch.cat(ys, dim=1), h


def prefix_scan(decay: torch.Tensor, shift: torch.Tensor, dim: int = 1):
    """Inclusive scan of affine maps along ``dim``; work-efficient, O(log L) depth.

    Element t of the result composes elements 0..t, so its ``shift`` is the
    recurrence state h_t for h_{-1} = 0. Pure tensor ops, so autograd flows.
    """
    L = decay.shape[dim]
    if L == 1:
        return decay, shift
    if L % 2:
        pad_shape = list(decay.shape)
        pad_shape[dim] = 1
        decay = torch.cat([decay, decay.new_ones(pad_shape)], dim=dim)
        shift = torch.cat([shift, shift.new_zeros(pad_shape)], dim=dim)
    a_even, a_odd = decay.unflatten(dim, (-1, 2)).unbind(dim + 1)
    b_even, b_odd = shift.unflatten(dim, (-1, 2)).unbind(dim + 1)
    # reduce pairs (2k, 2k+1), recurse, then fill in even slots
    pa, pb = prefix_scan(a_odd * a_even, a_odd * b_even + b_odd, dim)
    first_a = a_even.narrow(dim, 0, 1)
    first_b = b_even.narrow(dim, 0, 1)
    ea = a_even.narrow(dim, 1, a_even.shape[dim] - 1)
    eb = b_even.narrow(dim, 1, b_even.shape[dim] - 1)
    prev_a = pa.narrow(dim, 0, pa.shape[dim] - 1)
    prev_b = pb.narrow(dim, 0, pb.shape[dim] - 1)
    even_a = torch.cat([first_a, ea * prev_a], dim=dim)
    even_b = torch.cat([first_b, ea * prev_b + eb], dim=dim)
    out_a = torch.stack([even_a, pa], dim=dim + 1).flatten(dim, dim + 1)
    out_b = torch.stack([even_b, pb], dim=dim + 1).flatten(dim, dim + 1)
    return out_a.narrow(dim, 0, L), out_b.narrow(dim, 0, L)


def scan_parallel(u, delta, A, Bm, Cm, D, h0=None, reset=None, block_size: Optional[int] = None):
    """Associative-scan route with the same contract as :func:`scan_sequential`.

    ``block_size`` bounds the length scanned at once; blocks are chained by
    carrying the state, which caps memory at O(block_size * D * N).
    """
    h0, reset = _prep(u, delta, A, Bm, Cm, D, h0, reset)
    for name, x in (("u", u), ("delta", delta), ("B", Bm), ("C", Cm)):
        _check_finite(name, x)
    L = u.shape[1]
    step = L if block_size is None else block_size
    ys = []
    h = h0
    for s in range(0, L, step):
        sl = slice(s, min(L, s + step))
        dl, uu = delta[:, sl], u[:, sl]
        decay = torch.exp(dl.unsqueeze(-1) * A)
        decay = decay.masked_fill(reset[:, sl, None, None], 0.0)
        shift = (dl * uu).unsqueeze(-1) * Bm[:, sl].unsqueeze(-2)
        shift = torch.cat([decay[:, :1] * h.unsqueeze(1) + shift[:, :1], shift[:, 1:]], dim=1)
        _, states = prefix_scan(decay, shift, dim=1)
        # sum over the state axis in index order, as the compiled kernel does
        acc = torch.zeros_like(uu)
        for n in range(states.shape[-1]):
            acc = acc + Cm[:, sl, n].unsqueeze(-1) * states[..., n]
        ys.append(acc + D * uu)
        h = states[:, -1]
    return torch.cat(ys, dim=1), h


SCANS = {"sequential": scan_sequential, "parallel": scan_parallel}


def _as_batch(u: torch.Tensor):
    if u.dim() == 2:
        return u.unsqueeze(0), True
    return u, False


def selective_scan_sequential(u: torch.Tensor, params: SsmParams) -> torch.Tensor:
    """y for input ``u`` [L, d_inner] (or batched [B, L, d_inner])."""
    params.check()
    _check_finite("u", u)
    ub, squeeze = _as_batch(u)
    delta, Bm, Cm = params.project(ub)
    y, _ = scan_sequential(ub, delta, params.state_matrix(), Bm, Cm, params.d_skip)
    return y[0] if squeeze else y


def selective_scan_parallel(u: torch.Tensor, params: SsmParams,
                            block_size: Optional[int] = None) -> torch.Tensor:
    params.check()
    _check_finite("u", u)
    ub, squeeze = _as_batch(u)
    delta, Bm, Cm = params.project(ub)
    y, _ = scan_parallel(ub, delta, params.state_matrix(), Bm, Cm, params.d_skip,
                         block_size=block_size)
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# convolution


def causal_conv1d(u: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None,
                  prefix: Optional[torch.Tensor] = None,
                  reset: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Depthwise causal convolution.

    ``kernel`` is [d_conv, D] with the last row applied to the current input:
    out_t = bias + sum_j kernel[j] * u_{t - (d_conv - 1) + j}. A unit impulse at
    t = 0 therefore produces kernel[d_conv - 1], kernel[d_conv - 2], ... at
    t = 0, 1, .... ``prefix`` [B, d_conv - 1, D] supplies inputs before t = 0
    (zeros by default); ``reset`` [B, L] masks out everything before a reset.
    """
    squeeze = u.dim() == 2
    if squeeze:
        u = u.unsqueeze(0)
        if reset is not None:
            reset = reset.unsqueeze(0)
    K = kernel.shape[0]
    if K < 1:
        raise ConfigError("d_conv must be >= 1")
    nb_, L, d = u.shape
    if prefix is None:
        prefix = u.new_zeros(nb_, K - 1, d)
    full = torch.cat([prefix, u], dim=1)
    if reset is not None:
        # segment id per position; prefix positions belong to segment 0
        seg = torch.cumsum(reset.to(torch.int64), dim=1)
        seg = torch.cat([seg.new_zeros(nb_, K - 1), seg], dim=1)
    out = u.new_zeros(nb_, L, d) if bias is None else bias.expand(nb_, L, d).clone()
    for j in range(K):
        lag = K - 1 - j
        term = full[:, j:j + L] * kernel[j]
        if reset is not None and lag > 0:
            same = (seg[:, j:j + L] == seg[:, K - 1:]).unsqueeze(-1)
            term = term * same
        out = out + term
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# the gated block


class BlockState(NamedTuple):
    conv: torch.Tensor  # [B, d_conv - 1, d_inner] most recent conv inputs
    ssm: torch.Tensor   # [B, d_inner, d_state]


class MambaBlock(nn.Module):
    """in_proj -> (u, gate); u -> causal conv -> SiLU -> selective scan;
    times SiLU(gate); out_proj."""

    def __init__(self, cfg: BlockConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        d, di = cfg.d_model, cfg.d_inner
        self.in_proj = nn.Linear(d, 2 * di, bias=False)
        self.conv_weight = nn.Parameter(torch.empty(cfg.d_conv, di))
        self.conv_bias = nn.Parameter(torch.zeros(di))
        p = SsmParams.init(di, cfg.d_state, cfg.delta_rank, delta_min=cfg.delta_min,
                           delta_max=cfg.delta_max, generator=generator)
        self.x_proj = nn.Parameter(p.proj_bcdelta)
        self.dt_proj = nn.Parameter(p.delta_up)
        self.dt_bias = nn.Parameter(p.delta_bias)
        self.a_log = nn.Parameter(p.a_log)
        self.d_skip = nn.Parameter(p.d_skip)
        self.out_proj = nn.Linear(di, d, bias=False)
        with torch.no_grad():
            bound = 1 / math.sqrt(d)
            self.in_proj.weight.uniform_(-bound, bound, generator=generator)
            self.conv_weight.uniform_(-1 / math.sqrt(cfg.d_conv), 1 / math.sqrt(cfg.d_conv),
                                      generator=generator)
            bound = 1 / math.sqrt(di)
            self.out_proj.weight.uniform_(-bound, bound, generator=generator)

    # exposed so the scan functions can be called on a block's own weights
    def ssm_params(self) -> SsmParams:
        return SsmParams(a_log=self.a_log, d_skip=self.d_skip, proj_bcdelta=self.x_proj,
                         delta_up=self.dt_proj, delta_bias=self.dt_bias)

    def empty_state(self, batch: int, dtype=None) -> BlockState:
        dtype = dtype or self.in_proj.weight.dtype
        c = self.cfg
        return BlockState(torch.zeros(batch, c.d_conv - 1, c.d_inner, dtype=dtype),
                          torch.zeros(batch, c.d_inner, c.d_state, dtype=dtype))

    def forward(self, x: torch.Tensor, state: Optional[BlockState] = None,
                reset: Optional[torch.Tensor] = None, scan: Optional[str] = None):
        """x [B, L, d_model] -> (out [B, L, d_model], final BlockState)."""
        if x.dim() != 3 or x.shape[-1] != self.cfg.d_model:
            raise ConfigError(f"expected [batch, length, {self.cfg.d_model}], got {tuple(x.shape)}")
        nb_, L, _ = x.shape
        if state is None:
            state = self.empty_state(nb_, x.dtype)
        u, gate = self.in_proj(x).chunk(2, dim=-1)
        K = self.cfg.d_conv
        conv_in = torch.cat([state.conv, u], dim=1)
        if reset is not None:
            # prefix is history from before the window, dropped if a reset precedes it
            u = causal_conv1d(u, self.conv_weight, self.conv_bias, prefix=state.conv, reset=reset)
        else:
            u = causal_conv1d(u, self.conv_weight, self.conv_bias, prefix=state.conv)
        u = F.silu(u)
        params = self.ssm_params()
        delta, Bm, Cm = params.project(u)
        route = SCANS[scan or self.cfg.scan]
        y, h = route(u, delta, params.state_matrix(), Bm, Cm, self.d_skip, state.ssm, reset)
        y = y * F.silu(gate)
        new_conv = conv_in[:, conv_in.shape[1] - (K - 1):] if K > 1 else conv_in[:, :0]
        if reset is not None and K > 1:
            # a reset inside the last K-1 inputs blanks conv history before it
            tail = reset[:, L - (K - 1):] if L >= K - 1 else torch.cat(
                [torch.zeros(nb_, K - 1 - L, dtype=torch.bool), reset], dim=1)
            seen = torch.flip(torch.cumsum(torch.flip(tail.long(), [1]), 1), [1])
            keep = (seen - tail.long()) == 0
            new_conv = new_conv * keep.unsqueeze(-1)
        return self.out_proj(y), BlockState(new_conv, h)

    def step(self, x: torch.Tensor, state: BlockState):
        """Single recurrent step: x [B, d_model] -> (out [B, d_model], new state)."""
        u, gate = self.in_proj(x).chunk(2, dim=-1)
        window = torch.cat([state.conv, u.unsqueeze(1)], dim=1)  # [B, K, di]
        conv = (window * self.conv_weight).sum(1) + self.conv_bias
        u = F.silu(conv)
        params = self.ssm_params()
        delta, Bm, Cm = params.project(u)
        A = params.state_matrix()
        decay = torch.exp(delta.unsqueeze(-1) * A)
        h = decay * state.ssm + (delta * u).unsqueeze(-1) * Bm.unsqueeze(1)
        y = torch.einsum("bdn,bn->bd", h, Cm) + self.d_skip * u
        y = y * F.silu(gate)
        return self.out_proj(y), BlockState(window[:, 1:], h)


def mamba_block_forward(x: torch.Tensor, block: MambaBlock) -> torch.Tensor:
    """[L, d_model] or [B, L, d_model] through one block (no residual)."""
    squeeze = x.dim() == 2
    out, _ = block(x.unsqueeze(0) if squeeze else x)
    return out[0] if squeeze else out
