"""Spatial and temporal operators over hidden tensors of shape [B, N, T, D].

Every operator is shape preserving.  The searchable set holds six members;
``CHEBY_GCN`` and the two dense transformer variants exist only for the
operator comparison harness.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SEARCHABLE = ("GDCC", "INF_T", "DGCN", "INF_S", "ZERO", "IDENTITY")
REFERENCE = ("CHEBY_GCN", "TRANSFORMER_T", "TRANSFORMER_S")
ALL_KINDS = SEARCHABLE + REFERENCE
NON_PARAMETRIC = ("ZERO", "IDENTITY")


@dataclass
class OpConfig:
    kernel_size: int = 2
    dilation: int = 1
    order: int = 2  # diffusion hops / Chebyshev polynomial degree
    heads: int = 1
    factor: float = 1.0  # Informer sampling factor c
    bn_affine: bool = False


class Zero(nn.Module):
    def forward(self, z):
        return z.mul(0.0)


class Identity(nn.Module):
    def forward(self, z):
        return z


class GDCC(nn.Module):
    """Gated dilated causal convolution along T: (Z*W1) * sigmoid(Z*W2)."""

    def __init__(self, d: int, kernel_size: int = 2, dilation: int = 1):
        super().__init__()
        if kernel_size < 1 or dilation < 1:
            raise ValueError("kernel_size and dilation must be >= 1")
        self.pad = (kernel_size - 1) * dilation
        self.filter_conv = nn.Conv2d(d, d, (1, kernel_size), dilation=(1, dilation))
        self.gate_conv = nn.Conv2d(d, d, (1, kernel_size), dilation=(1, dilation))

    def forward(self, z):
        x = z.permute(0, 3, 1, 2)  # [B, D, N, T]
        x = F.pad(x, (self.pad, 0))
        out = self.filter_conv(x) * torch.sigmoid(self.gate_conv(x))
        return out.permute(0, 2, 3, 1)


def sampling_count(length: int, factor: float) -> int:
    """u = max(1, ceil(c ln L)), capped at L."""
    return min(length, max(1, math.ceil(factor * math.log(length)))) if length > 1 else 1


class _Attention(nn.Module):
    def __init__(self, d: int, axis: str, heads: int = 1):
        super().__init__()
        if axis not in ("time", "space"):
            raise ValueError(f"axis must be 'time' or 'space', got {axis!r}")
        if d % heads:
            raise ValueError(f"hidden width {d} not divisible by {heads} heads")
        self.axis = axis
        self.heads = heads
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)

    def _split(self, x):
        # [B, A, L, D] -> [B, A, H, L, Dh]
        *lead, L, D = x.shape
        return x.reshape(*lead, L, self.heads, D // self.heads).transpose(-3, -2)

    def _merge(self, x):
        *lead, H, L, Dh = x.shape
        return x.transpose(-3, -2).reshape(*lead, L, H * Dh)

    def _qkv(self, z):
        x = z if self.axis == "time" else z.transpose(1, 2)
        return self._split(self.w_q(x)), self._split(self.w_k(x)), self._split(self.w_v(x))

    def _out(self, h):
        h = self._merge(h)
        return h if self.axis == "time" else h.transpose(1, 2)


class DenseAttention(_Attention):
    """Full scaled dot-product self-attention over T ("time") or N ("space")."""

    def attention_weights(self, z):
        q, k, _ = self._qkv(z)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)

    def forward(self, z):
        q, k, v = self._qkv(z)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        return self._out(att @ v)


class InformerAttention(_Attention):
    """ProbSparse attention: only the u most "active" queries attend.

    Activity of a query is max - mean of its scores against a random subset
    of u keys.  Unselected positions output the mean of the values.  The key
    subset is drawn from a generator seeded by (seed, call count); the count
    advances only in training mode and lives in a buffer, so checkpoints
    restore the sampling stream.
    """

    def __init__(self, d: int, axis: str, heads: int = 1, factor: float = 1.0, seed: int = 0):
        super().__init__(d, axis, heads)
        self.factor = factor
        self.seed = int(seed)
        self.register_buffer("calls", torch.zeros((), dtype=torch.long))

    def _generator(self):
        g = torch.Generator()
        g.manual_seed(self.seed * 1_000_003 + int(self.calls))
        if self.training:
            self.calls += 1
        return g

    def forward(self, z):
        q, k, v = self._qkv(z)
        L, dh = q.shape[-2], q.shape[-1]
        u = sampling_count(L, self.factor)
        gen = self._generator()
        scale = 1.0 / math.sqrt(dh)
        if u >= L:
            att = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
            return self._out(att @ v)
        key_idx = torch.randperm(L, generator=gen)[:u].to(q.device)
        with torch.no_grad():
            sampled = q @ k[..., key_idx, :].transpose(-1, -2)
            activity = sampled.max(-1).values - sampled.mean(-1)
            top = activity.topk(u, dim=-1).indices  # [..., u]
        idx = top.unsqueeze(-1).expand(*top.shape, dh)
        q_sel = torch.gather(q, -2, idx)
        att = torch.softmax(q_sel @ k.transpose(-1, -2) * scale, dim=-1)
        ctx = att @ v
        base = v.mean(-2, keepdim=True).expand_as(v).contiguous()
        return self._out(base.scatter(-2, idx, ctx))


class DiffusionGCN(nn.Module):
    """sum_k (D_O^-1 A)^k Z_t W1_k + (D_I^-1 A^T)^k Z_t W2_k for k = 0..order."""

    def __init__(self, d: int, supports, order: int = 2):
        super().__init__()
        if order < 0:
            raise ValueError("diffusion order must be >= 0")
        self.order = order
        fwd, bwd = (torch.as_tensor(np.asarray(s), dtype=torch.get_default_dtype()) for s in supports)
        if fwd.shape != bwd.shape or fwd.shape[0] != fwd.shape[1]:
            raise ValueError("supports must be two square matrices of equal size")
        self.register_buffer("support_fwd", fwd)
        self.register_buffer("support_bwd", bwd)
        self.w_fwd = nn.ModuleList(nn.Linear(d, d, bias=False) for _ in range(order + 1))
        self.w_bwd = nn.ModuleList(nn.Linear(d, d, bias=False) for _ in range(order + 1))

    def forward(self, z):
        n = z.shape[1]
        if self.support_fwd.shape[0] != n:
            raise ValueError(f"supports side {self.support_fwd.shape[0]} != N={n}")
        out = 0
        for support, weights in ((self.support_fwd, self.w_fwd), (self.support_bwd, self.w_bwd)):
            x = z
            for k, lin in enumerate(weights):
                if k:
                    x = torch.einsum("nm,bmtd->bntd", support, x)
                out = out + lin(x)
        return out


def scaled_laplacian(adjacency, tol: float = 1e-4, max_iter: int = 100) -> np.ndarray:
    """2L/lambda_max - I for the symmetric normalised Laplacian.

    Zero-degree nodes get zero rows in D^-1/2 A D^-1/2.  lambda_max comes from
    power iteration.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    a = 0.5 * (a + a.T)
    deg = a.sum(axis=1)
    inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    n = a.shape[0]
    lap = np.eye(n) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    lam = power_iteration(lap, tol=tol, max_iter=max_iter)
    return 2.0 * lap / lam - np.eye(n)


def power_iteration(m: np.ndarray, tol: float = 1e-4, max_iter: int = 100) -> float:
    vec = np.random.default_rng(0).uniform(0.5, 1.5, size=m.shape[0])
    vec /= np.linalg.norm(vec)
    lam = 0.0
    for _ in range(max_iter):
        nxt = m @ vec
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return 1.0
        new_lam = float(vec @ nxt)
        vec = nxt / norm
        if abs(new_lam - lam) < tol:
            lam = new_lam
            break
        lam = new_lam
    return lam if lam > 0 else 1.0


def chebyshev_polynomials(l_tilde: np.ndarray, n_terms: int) -> list[np.ndarray]:
    polys = [np.eye(l_tilde.shape[0])]
    if n_terms > 1:
        polys.append(l_tilde)
    for _ in range(2, n_terms):
        polys.append(2 * l_tilde @ polys[-1] - polys[-2])
    return polys


class ChebyGCN(nn.Module):
    """sum_{k<K} T_k(L~) Z_t W_k with the Chebyshev recursion applied to Z."""

    def __init__(self, d: int, adjacency, n_terms: int = 3):
        super().__init__()
        if n_terms < 1:
            raise ValueError("Chebyshev GCN needs at least one term")
        self.register_buffer("l_tilde", torch.as_tensor(scaled_laplacian(adjacency), dtype=torch.get_default_dtype()))
        self.weights = nn.ModuleList(nn.Linear(d, d, bias=False) for _ in range(n_terms))

    def forward(self, z):
        lt = self.l_tilde
        t_prev, t_cur = z, None
        out = self.weights[0](z)
        for k in range(1, len(self.weights)):
            if k == 1:
                t_cur = torch.einsum("nm,bmtd->bntd", lt, z)
            else:
                t_prev, t_cur = t_cur, 2 * torch.einsum("nm,bmtd->bntd", lt, t_cur) - t_prev
            out = out + self.weights[k](t_cur)
        return out


class ReluOpBN(nn.Module):
    """ReLU -> operator -> BatchNorm over (batch, N, T) per feature."""

    def __init__(self, op: nn.Module, d: int, affine: bool = False):
        super().__init__()
        self.op = op
        self.bn = nn.BatchNorm2d(d, affine=affine)

    def forward(self, z):
        h = self.op(torch.relu(z))
        return self.bn(h.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


def make_raw_operator(kind: str, d: int, cfg: OpConfig | None = None, supports=None,
                      adjacency=None, seed: int = 0) -> nn.Module:
    cfg = cfg or OpConfig()
    if kind == "ZERO":
        return Zero()
    if kind == "IDENTITY":
        return Identity()
    if kind == "GDCC":
        return GDCC(d, cfg.kernel_size, cfg.dilation)
    if kind == "INF_T":
        return InformerAttention(d, "time", cfg.heads, cfg.factor, seed)
    if kind == "INF_S":
        return InformerAttention(d, "space", cfg.heads, cfg.factor, seed)
    if kind == "TRANSFORMER_T":
        return DenseAttention(d, "time", cfg.heads)
    if kind == "TRANSFORMER_S":
        return DenseAttention(d, "space", cfg.heads)
    if kind == "DGCN":
        if supports is None:
            raise ValueError("DGCN needs supports")
        return DiffusionGCN(d, supports, cfg.order)
    if kind == "CHEBY_GCN":
        if adjacency is None:
            raise ValueError("CHEBY_GCN needs an adjacency matrix")
        return ChebyGCN(d, adjacency, cfg.order + 1)
    raise ValueError(f"unknown operator {kind!r}")


def make_operator(kind: str, d: int, cfg: OpConfig | None = None, supports=None,
                  adjacency=None, seed: int = 0) -> nn.Module:
    """Operator ready for a cell: parametric kinds get the ReLU-op-BN wrapping."""
    cfg = cfg or OpConfig()
    op = make_raw_operator(kind, d, cfg, supports, adjacency, seed)
    if kind in NON_PARAMETRIC:
        return op
    return ReluOpBN(op, d, cfg.bn_affine)
