"""Continuous relaxation of the joint micro/macro search space."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .model import ForecastHead
from .operators import SEARCHABLE, OpConfig, make_operator


def mixture_weights(alpha: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """softmax(alpha / tau) over the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return torch.softmax(alpha / tau, dim=-1)


def anneal_temperature(tau: float, factor: float = 0.9, floor: float = 1e-3) -> float:
    if not 0.0 < factor < 1.0:
        raise ValueError("annealing factor must lie in (0, 1)")
    if not floor > 0:
        raise ValueError("temperature floor must be positive")
    return max(tau * factor, floor)


def temperature_at(epoch: int, init: float = 5.0, factor: float = 0.9, floor: float = 1e-3) -> float:
    """Closed form of ``epoch`` annealing steps from ``init``: max(init * factor**epoch, floor)."""
    return max(init * factor ** epoch, floor)


def count_micro_space(M: int, n_ops: int = len(SEARCHABLE)) -> int:
    return n_ops ** (M * (M - 1) // 2)


def edge_list(M: int) -> list[tuple[int, int]]:
    """Node pairs (i, j), i < j, ordered by target node then source."""
    return [(i, j) for j in range(1, M) for i in range(j)]


def shuffle_permutation(d: int, groups: int) -> torch.Tensor:
    """Channel shuffle as a fixed permutation; the usual reshape-transpose when groups | d."""
    if groups <= 1:
        return torch.arange(d)
    return torch.cat([torch.arange(g, d, groups) for g in range(groups)])


class MixedEdge(nn.Module):
    """Weighted sum of every candidate operator, applied to a channel slice.

    With partial channels only the first ceil(fraction * D) channels pass
    through the operators; the remainder bypass them, and the concatenation is
    channel-shuffled.
    """

    def __init__(self, d: int, fraction: float, op_cfg: OpConfig, supports, adjacency, seed: int = 0):
        super().__init__()
        if not 0.0 < fraction <= 1.0:
            raise ValueError("partial channel fraction must lie in (0, 1]")
        self.d = d
        self.d_sub = max(1, math.ceil(fraction * d))
        self.ops = nn.ModuleList(
            make_operator(kind, self.d_sub, op_cfg, supports, adjacency, seed=seed + k)
            for k, kind in enumerate(SEARCHABLE)
        )
        groups = max(1, round(1.0 / fraction)) if self.d_sub < d else 1
        self.register_buffer("perm", shuffle_permutation(d, groups), persistent=False)

    def forward(self, h, weights):
        if self.d_sub == self.d:
            return sum(w * op(h) for w, op in zip(weights, self.ops))
        sub = h[..., : self.d_sub]
        mixed = sum(w * op(sub) for w, op in zip(weights, self.ops))
        out = torch.cat([mixed, h[..., self.d_sub:]], dim=-1)
        return out.index_select(-1, self.perm)


def node_aggregate(transforms, beta: torch.Tensor) -> torch.Tensor:
    """h_j = sum_i softmax(beta)_i f_ij (no temperature)."""
    if len(transforms) != beta.shape[-1]:
        raise ValueError(f"{len(transforms)} transforms but beta has length {beta.shape[-1]}")
    w = torch.softmax(beta, dim=-1)
    return sum(wi * f for wi, f in zip(w, transforms))


class SearchCell(nn.Module):
    """Micro-DAG with M nodes; architecture parameters are passed in."""

    def __init__(self, M: int, d: int, fraction: float, op_cfg: OpConfig, supports, adjacency,
                 residual: bool = True, seed: int = 0):
        super().__init__()
        if M < 2:
            raise ValueError("a cell needs at least 2 nodes")
        self.M = M
        self.residual = residual
        self.edges = edge_list(M)
        self.mixed = nn.ModuleList(
            MixedEdge(d, fraction, op_cfg, supports, adjacency, seed=seed + 10 * e)
            for e in range(len(self.edges))
        )

    def forward(self, h0, alpha, betas, tau):
        states = [h0]
        e = 0
        for j in range(1, self.M):
            transforms = []
            for i in range(j):
                transforms.append(self.mixed[e](states[i], mixture_weights(alpha[e], tau)))
                e += 1
            states.append(node_aggregate(transforms, betas[j - 1]))
        out = states[-1]
        return out + h0 if self.residual else out


class SuperNet(nn.Module):
    """Embedding -> B search cells wired by the macro-DAG -> merged sum -> head.

    Architecture parameters (alphas, betas, gammas) are kept apart from the
    network weights; see :meth:`arch_parameters` and :meth:`weight_parameters`.
    ``share_micro`` ties one {alpha, beta} set across all blocks and
    ``macro_search=False`` fixes a chain backbone (no gammas).
    """

    def __init__(self, n_features: int, horizon: int, mode: str, supports, adjacency, M: int = 5,
                 B: int = 4, d: int = 32, fraction: float = 0.25, residual: bool = True,
                 share_micro: bool = False, macro_search: bool = True, op_cfg: OpConfig | None = None,
                 tau: float = 5.0, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        op_cfg = op_cfg or OpConfig()
        self.M, self.B, self.d = M, B, d
        self.share_micro = share_micro
        self.macro_search = macro_search
        self.tau = tau
        self.embedding = nn.Linear(n_features, d)
        self.cells = nn.ModuleList(
            SearchCell(M, d, fraction, op_cfg, supports, adjacency, residual, seed=seed + 1000 * b)
            for b in range(B)
        )
        self.head = ForecastHead(d, horizon, mode)

        n_edges, n_ops = len(edge_list(M)), len(SEARCHABLE)
        n_sets = 1 if share_micro else B
        self.alphas = nn.ParameterList(nn.Parameter(1e-3 * torch.randn(n_edges, n_ops)) for _ in range(n_sets))
        self.betas = nn.ParameterList(
            nn.Parameter(1e-3 * torch.randn(j)) for _ in range(n_sets) for j in range(1, M)
        )
        # gammas[j - 2] weighs the predecessors (embedding, b_1, ..., b_{j-1}) of block b_j
        self.gammas = nn.ParameterList(
            nn.Parameter(1e-3 * torch.randn(j)) for j in range(2, B + 1)
        ) if macro_search else nn.ParameterList()

    def micro_params(self, block: int):
        s = 0 if self.share_micro else block
        return self.alphas[s], list(self.betas[s * (self.M - 1):(s + 1) * (self.M - 1)])

    def arch_parameters(self) -> list[nn.Parameter]:
        return [*self.alphas, *self.betas, *self.gammas]

    def weight_parameters(self) -> list[nn.Parameter]:
        arch = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch]

    def block_outputs(self, x):
        outs = [self.embedding(x)]
        for b, cell in enumerate(self.cells):
            if b == 0:
                e_in = outs[0]
            elif self.macro_search:
                w = torch.softmax(self.gammas[b - 1], dim=-1)
                e_in = sum(wi * o for wi, o in zip(w, outs))
            else:
                e_in = outs[b]
            alpha, betas = self.micro_params(b)
            outs.append(cell(e_in, alpha, betas, self.tau))
        return outs

    def features(self, x):
        return sum(self.block_outputs(x)[1:])

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def sharpness(self) -> float:
        """Mean over edges of the largest tempered operator weight."""
        vals = [mixture_weights(a, self.tau).max(-1).values for a in self.alphas]
        return float(torch.cat(vals).mean())
