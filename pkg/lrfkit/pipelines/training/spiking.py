"""Differentiable torch versions of the mechanisms, used for surrogate-gradient training.

Everything runs in float64 so gradients can be checked against finite differences.
"""
from typing import Sequence

import numpy as np
import torch
from torch import nn

from lrfkit.data import tensor
from lrfkit.mechanisms import attention
from lrfkit.mechanisms import dyn
from lrfkit.mechanisms import neuron


DTYPE = torch.float64

MODEL_KINDS = ('ssa', 'causal_ssa', 'lrf_ssa', 'lrf_dyn')


def surrogate(x: torch.Tensor, spec: neuron.SurrogateSpec) -> torch.Tensor:
    """Torch twin of `neuron.surrogate_grad` for x = u - v_th."""
    if spec.kind is neuron.SurrogateKind.RECTANGULAR:
        return (x.abs() <= spec.width / 2).to(x.dtype) / spec.width
    sig = torch.sigmoid(x / spec.width)
    return sig * (1. - sig) / spec.width


class SpikeFunction(torch.autograd.Function):
    """Θ(u - v_th) with Θ(0) = 1 forward, surrogate derivative backward."""

    @staticmethod
    def forward(ctx, u, v_th, spec):  # pylint: disable=arguments-differ
        ctx.save_for_backward(u)
        ctx.v_th = v_th
        ctx.spec = spec
        return (u >= v_th).to(u.dtype)

    @staticmethod
    def backward(ctx, grad_output):  # pylint: disable=arguments-differ
        (u,) = ctx.saved_tensors
        return grad_output * surrogate(u - ctx.v_th, ctx.spec), None, None


class LifNode(nn.Module):
    """SN layer over the leading time axis. `smooth=True` makes it the identity."""

    def __init__(self, lif: neuron.LifParams, spec: neuron.SurrogateSpec):
        super().__init__()
        self.lif = lif
        self.spec = spec

    def forward(self, x: torch.Tensor, smooth: bool = False) -> torch.Tensor:
        if smooth:
            return x
        h = torch.zeros_like(x[0])
        spikes = []
        for t in range(x.shape[0]):
            u = h + x[t]
            s = SpikeFunction.apply(u, self.lif.v_th, self.spec)
            h = self.lif.v_reset * s + self.lif.tau * u * (1. - s)
            spikes.append(s)
        return torch.stack(spikes)


class LocalReceptiveField(nn.Module):
    """Depth-wise dilated 3x3 kernels over the token grid, zero padded at the borders.

    Tokens are laid out in raster order, so (..., n, d) reshapes to (batch, d, rows, cols) and
    every dilation is one grouped conv2d with padding equal to the dilation.
    """

    def __init__(self, grid: tensor.TokenGrid, d: int, dilations: Sequence[int],
                 init_high: float = .2):
        super().__init__()
        self.grid = grid
        self.dilations = tuple(dilations)
        self.weight = nn.Parameter(
            torch.rand(len(self.dilations), 3, 3, d, dtype=DTYPE) * init_high)

    def as_config(self) -> attention.LrfConfig:
        return attention.LrfConfig(self.dilations, self.weight.detach().cpu().numpy())

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if not self.dilations:
            return torch.zeros_like(v)
        lead, (n, d) = v.shape[:-2], v.shape[-2:]
        images = v.reshape(-1, self.grid.rows, self.grid.cols, d).permute(0, 3, 1, 2)
        out = torch.zeros_like(images)
        for m, dilation in enumerate(self.dilations):
            # (3, 3, d) -> (d, 1, 3, 3): one 3x3 filter per channel.
            kernel = self.weight[m].permute(2, 0, 1).unsqueeze(1)
            out = out + nn.functional.conv2d(images, kernel, padding=dilation,
                                             dilation=dilation, groups=d)
        return out.permute(0, 2, 3, 1).reshape(*lead, n, d)


class DynScanFunction(torch.autograd.Function):
    """Dendritic scan over (batch, n, d) tokens with the adjoint recurrence as backward.

    s_n = M s_{n-1} + γ ⊗ x_n, y_n = Γ ⊙ (Cᵀ s_n). Backward runs
    a_n = C ⊗ (Γ ⊙ g_n) + Mᵀ a_{n+1} from the last token to the first.
    """

    @staticmethod
    def forward(ctx, x, m_trans, c_read, gamma_in, big_gamma):  # pylint: disable=arguments-differ
        batch, n, d = x.shape
        k = m_trans.shape[0]
        states = x.new_zeros(batch, n, k, d)
        s = x.new_zeros(batch, k, d)
        for i in range(n):
            s = m_trans @ s + gamma_in[:, None] * x[:, i, None, :]
            states[:, i] = s
        y = big_gamma * torch.einsum('k,bnkd->bnd', c_read, states)
        ctx.save_for_backward(x, m_trans, c_read, gamma_in, big_gamma, states)
        return y

    @staticmethod
    def backward(ctx, grad_y):  # pylint: disable=arguments-differ
        x, m_trans, c_read, gamma_in, big_gamma, states = ctx.saved_tensors
        batch, n, d = x.shape
        k = m_trans.shape[0]
        gated = grad_y * big_gamma
        adjoints = x.new_zeros(batch, n, k, d)
        a = x.new_zeros(batch, k, d)
        for i in reversed(range(n)):
            a = c_read[:, None] * gated[:, i, None, :] + m_trans.T @ a
            adjoints[:, i] = a
        previous = torch.cat([states.new_zeros(batch, 1, k, d), states[:, :-1]], dim=1)
        read_out = torch.einsum('k,bnkd->bnd', c_read, states)
        return (torch.einsum('k,bnkd->bnd', gamma_in, adjoints),
                torch.einsum('bnkd,bnjd->kj', adjoints, previous),
                torch.einsum('bnkd,bnd->k', states, gated),
                torch.einsum('bnkd,bnd->k', adjoints, x),
                (grad_y * read_out).sum(dim=(0, 1)))


class DendriticScan(nn.Module):
    """Learnable tridiagonal dendritic dynamics, stable by construction.

    Diagonal 0.9·σ(a_i) and couplings 0.05·tanh(b_i) keep every Gershgorin row sum below 1.
    """

    def __init__(self, d: int, k: int = dyn.DEFAULT_DENDRITES):
        super().__init__()
        self.diag_raw = nn.Parameter(torch.randn(k, dtype=DTYPE))
        self.upper_raw = nn.Parameter(torch.randn(k - 1, dtype=DTYPE))
        self.lower_raw = nn.Parameter(torch.randn(k - 1, dtype=DTYPE))
        self.c_read = nn.Parameter(torch.randn(k, dtype=DTYPE) / np.sqrt(k))
        self.gamma_in = nn.Parameter(torch.rand(k, dtype=DTYPE) + .5)
        self.big_gamma = nn.Parameter(torch.rand(d, dtype=DTYPE) + .5)

    def m_trans(self) -> torch.Tensor:
        return (torch.diag(.9 * torch.sigmoid(self.diag_raw))
                + torch.diag(.05 * torch.tanh(self.upper_raw), 1)
                + torch.diag(.05 * torch.tanh(self.lower_raw), -1))

    def as_params(self) -> dyn.DendriticParams:
        return dyn.DendriticParams(
            m_trans=self.m_trans().detach().cpu().numpy(),
            c_read=self.c_read.detach().cpu().numpy(),
            gamma_in=self.gamma_in.detach().cpu().numpy(),
            big_gamma=self.big_gamma.detach().cpu().numpy())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-2]
        flat = x.reshape(-1, *x.shape[-2:])
        y = DynScanFunction.apply(flat, self.m_trans(), self.c_read, self.gamma_in,
                                  self.big_gamma)
        return y.reshape(*lead, *y.shape[-2:])


class AttentionBlock(nn.Module):
    """One attention mechanism over (t, b, n, d) spikes followed by SN."""

    def __init__(self, kind: str, grid: tensor.TokenGrid, d: int,
                 lif: neuron.LifParams, spec: neuron.SurrogateSpec,
                 dilations: Sequence[int] = attention.DEFAULT_DILATIONS,
                 k: int = dyn.DEFAULT_DENDRITES):
        super().__init__()
        if kind not in MODEL_KINDS:
            raise ValueError(f'Unknown model kind `{kind}`. Options: {", ".join(MODEL_KINDS)}.')
        self.kind = kind
        self.scale = 1. / np.sqrt(d)
        self.sn = LifNode(lif, spec)
        if kind == 'lrf_dyn':
            self.scan = DendriticScan(d, k)
        else:
            self.w_q, self.w_k, self.w_v = (nn.Linear(d, d, bias=False, dtype=DTYPE)
                                            for _ in range(3))
        self.local = (LocalReceptiveField(grid, d, dilations)
                      if kind in ('lrf_ssa', 'lrf_dyn') else None)

    def pre_sn(self, s: torch.Tensor, smooth: bool = False) -> torch.Tensor:
        if self.kind == 'lrf_dyn':
            h = self.scan(s)
            return h + self.local(h)
        q, k, v = (self.sn(w(s), smooth) for w in (self.w_q, self.w_k, self.w_v))
        if self.kind == 'causal_ssa':
            kv = torch.cumsum(k[..., :, None] * v[..., None, :], dim=-3)
            out = self.scale * torch.einsum('...nc,...nce->...ne', q, kv)
        else:
            out = self.scale * q @ (k.transpose(-1, -2) @ v)
        if self.local is not None:
            out = out + self.local(v)
        return out

    def forward(self, s: torch.Tensor, smooth: bool = False) -> torch.Tensor:
        return self.sn(self.pre_sn(s, smooth), smooth)


class ToyModel(nn.Module):
    """Patch embedding, SN, one attention block with a residual path, mean-pool and a head.

    Logits are averaged over the T timesteps.
    """

    def __init__(self, kind: str, grid: tensor.TokenGrid, patch_size: int, d: int,
                 classes: int, timesteps: int = 2,
                 lif: neuron.LifParams = neuron.LifParams(),
                 spec: neuron.SurrogateSpec = neuron.SurrogateSpec(),
                 dilations: Sequence[int] = attention.DEFAULT_DILATIONS,
                 k: int = dyn.DEFAULT_DENDRITES, seed: int = 0):
        super().__init__()
        if timesteps < 1:
            raise ValueError(f'timesteps must be positive, got {timesteps}.')
        self.kind = kind
        self.timesteps = timesteps
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Linear(patch_size, d, dtype=DTYPE)
            self.sn = LifNode(lif, spec)
            self.block = AttentionBlock(kind, grid, d, lif, spec, dilations, k)
            self.head = nn.Linear(d, classes, dtype=DTYPE)
            nn.init.normal_(self.head.weight, std=.01)
            nn.init.zeros_(self.head.bias)

    def forward(self, patches: torch.Tensor, smooth: bool = False) -> torch.Tensor:
        x = self.embed(patches).expand(self.timesteps, *patches.shape[:-1], -1)
        s = self.sn(x, smooth)
        z = s + self.block(s, smooth)
        return self.head(z.mean(dim=-2)).mean(dim=0)
