"""Directional unfolding and the selective state-space scan.

The recurrence implemented by :func:`selective_scan` is::

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t,    h_0 = 0
    y_t = <C_t, h_t> + D * u_t

It is evaluated as a plain sequential recurrence. Discretised decays and
drives are materialised one chunk of ``chunk_size`` steps at a time so memory
stays bounded on long sequences; work grows linearly in sequence length.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..exceptions import ContractError, NumericError

DIRECTIONS = ("row", "row-rev", "col", "col-rev")


def ss2d_unfold(x: torch.Tensor, direction: str) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, C, H*W)`` traversed in ``direction``."""
    if direction == "row":
        return x.flatten(2)
    if direction == "row-rev":
        return x.flatten(2).flip(-1)
    if direction == "col":
        return x.transpose(2, 3).flatten(2)
    if direction == "col-rev":
        return x.transpose(2, 3).flatten(2).flip(-1)
    raise ContractError(f"unknown scan direction {direction!r}; expected one of {DIRECTIONS}")


def ss2d_fold(seq: torch.Tensor, direction: str, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`ss2d_unfold`."""
    b, c, n = seq.shape
    if n != height * width:
        raise ContractError(f"sequence length {n} != {height}x{width}")
    if direction == "row":
        return seq.reshape(b, c, height, width)
    if direction == "row-rev":
        return seq.flip(-1).reshape(b, c, height, width)
    if direction == "col":
        return seq.reshape(b, c, width, height).transpose(2, 3)
    if direction == "col-rev":
        return seq.flip(-1).reshape(b, c, width, height).transpose(2, 3)
    raise ContractError(f"unknown scan direction {direction!r}; expected one of {DIRECTIONS}")


def _grouped(m: torch.Tensor, d: int) -> torch.Tensor:
    # (b, n, l) -> (b, 1, n, l); (b, g, n, l) checked against d
    if m.ndim == 3:
        return m[:, None]
    if d % m.shape[1]:
        raise ContractError(f"{d} channels cannot be split into {m.shape[1]} groups")
    return m


def selective_scan(u, delta, A, B, C, D=None, chunk_size: int = 256) -> torch.Tensor:
    """Run the input-dependent state-space recurrence.

    Args:
        u: ``(b, d, l)`` input sequence.
        delta: ``(b, d, l)`` positive step sizes.
        A: ``(d, n)`` state transition (negative for stability).
        B, C: ``(b, n, l)`` shared across channels, or ``(b, g, n, l)`` with
            ``g`` groups of consecutive channels.
        D: optional ``(d,)`` skip gain.

    Returns:
        ``(b, d, l)`` output sequence.
    """
    b, d, length = u.shape
    n = A.shape[1]
    for name, t in (("u", u), ("delta", delta), ("A", A), ("B", B), ("C", C)):
        if not torch.isfinite(t).all():
            raise NumericError(f"selective_scan: non-finite values in {name}")
    B = _grouped(B, d)
    C = _grouped(C, d)
    g = B.shape[1]
    e = d // g

    pad = (-length) % chunk_size
    du = delta * u
    if pad:
        # zero step size keeps the state untouched through padding
        du, delta = F.pad(du, (0, pad)), F.pad(delta, (0, pad))
        B, C = F.pad(B, (0, pad)), F.pad(C, (0, pad))
    chunks = (length + pad) // chunk_size

    # per-chunk views; unbind keeps the backward pass linear in the chunk count
    delta_c = delta.reshape(b, g, e, chunks, chunk_size).unbind(3)
    du_c = du.reshape(b, g, e, chunks, chunk_size).unbind(3)
    B_c = B.reshape(b, g, n, chunks, chunk_size).unbind(3)
    C_c = C.reshape(b, g, n, chunks, chunk_size).unbind(3)
    A_ = A.reshape(1, g, e, n, 1)

    h = u.new_zeros(b, g, e, n)
    ys = []
    for dt_k, du_k, b_k, c_k in zip(delta_c, du_c, B_c, C_c):
        decay = torch.exp(A_ * dt_k[:, :, :, None, :]).unbind(-1)  # (b, g, e, n) per step
        drive = (du_k[:, :, :, None, :] * b_k[:, :, None]).unbind(-1)
        states = []
        for a_t, x_t in zip(decay, drive):
            h = a_t * h + x_t
            states.append(h)
        ys.append(torch.einsum("bgent,bgnt->bget", torch.stack(states, -1), c_k))
    y = torch.cat(ys, dim=-1).reshape(b, d, -1)[..., :length]
    if D is not None:
        y = y + D[None, :, None] * u
    return y


class SelectiveScan2D(nn.Module):
    """Four-direction 2D selective scan with per-direction input-dependent projections.

    For each direction the unfolded sequence is projected to a low-rank step
    size and to ``B``/``C`` (``d_state`` each); ``delta = softplus(dt_proj(.))``
    and ``A = -exp(A_log)``. Outputs of the four directions are folded back and
    summed.
    """

    def __init__(self, channels: int, d_state: int = 16, dt_rank: int | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, chunk_size: int = 256):
        super().__init__()
        k = len(DIRECTIONS)
        self.channels = channels
        self.d_state = d_state
        self.dt_rank = dt_rank or max(1, math.ceil(channels / 16))
        self.chunk_size = chunk_size

        bound = channels**-0.5
        self.x_proj_weight = nn.Parameter(
            torch.empty(k, self.dt_rank + 2 * d_state, channels).uniform_(-bound, bound)
        )
        dt_bound = self.dt_rank**-0.5
        self.dt_proj_weight = nn.Parameter(torch.empty(k, channels, self.dt_rank).uniform_(-dt_bound, dt_bound))
        dt = torch.exp(torch.rand(k, channels) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.dt_proj_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
        a = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(k * channels, 1)
        self.A_log = nn.Parameter(torch.log(a))
        self.D = nn.Parameter(torch.ones(k * channels))

    def b_rows(self) -> slice:
        """Rows of ``x_proj_weight`` that produce ``B``."""
        return slice(self.dt_rank, self.dt_rank + self.d_state)

    def c_rows(self) -> slice:
        return slice(self.dt_rank + self.d_state, self.dt_rank + 2 * self.d_state)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        k = len(DIRECTIONS)
        seqs = torch.stack([ss2d_unfold(x, d) for d in DIRECTIONS], dim=1)  # (b, k, c, l)
        proj = torch.einsum("bkcl,kec->bkel", seqs, self.x_proj_weight)
        dt, Bm, Cm = torch.split(proj, [self.dt_rank, self.d_state, self.d_state], dim=2)
        dt = torch.einsum("bkrl,kcr->bkcl", dt, self.dt_proj_weight)
        delta = F.softplus(dt + self.dt_proj_bias[None, :, :, None])
        A = -torch.exp(self.A_log)
        y = selective_scan(
            seqs.reshape(b, k * c, -1),
            delta.reshape(b, k * c, -1),
            A,
            Bm,
            Cm,
            self.D,
            chunk_size=self.chunk_size,
        ).reshape(b, k, c, -1)
        return sum(ss2d_fold(y[:, i], d, h, w) for i, d in enumerate(DIRECTIONS))
