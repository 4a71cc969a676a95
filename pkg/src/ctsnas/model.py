"""Discrete forecasting models built from a genotype, plus the shared input/output layers."""
from __future__ import annotations

import torch
import torch.nn as nn

from .operators import ALL_KINDS, SEARCHABLE, OpConfig, make_operator


class ForecastHead(nn.Module):
    """ReLU, keep the last timestamp, then a per-node linear map D -> Q."""

    def __init__(self, d: int, horizon: int, mode: str = "multi_step"):
        super().__init__()
        self.mode = mode
        self.horizon = horizon if mode == "multi_step" else 1
        self.proj = nn.Linear(d, self.horizon)

    def forward(self, h):
        out = self.proj(torch.relu(h[:, :, -1, :]))  # [B, N, Q]
        if self.mode == "multi_step":
            return out.unsqueeze(-1)
        return out


class DiscreteBlock(nn.Module):
    """ST-block with fixed wiring; each node sums its retained edges."""

    def __init__(self, nodes, d: int, op_cfg: OpConfig, supports, adjacency, residual: bool = True,
                 seed: int = 0):
        super().__init__()
        self.nodes = [[(int(src), op) for src, op in edges] for edges in nodes]
        self.residual = residual
        self.ops = nn.ModuleList()
        for j, edges in enumerate(self.nodes, start=1):
            for k, (src, op) in enumerate(edges):
                self.ops.append(make_operator(op, d, op_cfg, supports, adjacency, seed=seed + 17 * j + k))

    def forward(self, h0):
        states = [h0]
        it = iter(self.ops)
        for edges in self.nodes:
            states.append(sum(next(it)(states[src]) for src, _ in edges))
        out = states[-1]
        return out + h0 if self.residual else out


class DiscreteNet(nn.Module):
    def __init__(self, genotype, n_features: int, horizon: int, mode: str, supports, adjacency,
                 d: int | None = None, residual: bool = True, op_cfg: OpConfig | None = None,
                 allow_reference: bool = False, seed: int = 0):
        super().__init__()
        allowed = ALL_KINDS if allow_reference else SEARCHABLE
        for b, block in enumerate(genotype.blocks):
            for j, edges in enumerate(block.nodes, start=1):
                for src, op in edges:
                    if op not in allowed:
                        raise ValueError(f"blocks[{b}].nodes[{j - 1}]: unknown operator tag {op!r}")
        d = d or genotype.D
        op_cfg = op_cfg or OpConfig(bn_affine=True)
        self.genotype = genotype
        self.embedding = nn.Linear(n_features, d)
        self.blocks = nn.ModuleList(
            DiscreteBlock(block.nodes, d, op_cfg, supports, adjacency, residual, seed=seed + 1000 * b)
            for b, block in enumerate(genotype.blocks)
        )
        # block b (1-based) reads from source index; 0 = embedding
        self.sources = [0] * len(genotype.blocks)
        for src, dst in genotype.backbone:
            self.sources[dst - 1] = 0 if src == "EMBED" else int(src)
        self.head = ForecastHead(d, horizon, mode)

    def features(self, x):
        outs = [self.embedding(x)]
        for block, src in zip(self.blocks, self.sources):
            outs.append(block(outs[src]))
        return sum(outs[1:])

    def forward(self, x):
        return self.head(self.features(x))


def build_discrete_model(genotype, n_features: int, horizon: int, mode: str, supports, adjacency,
                         residual: bool = True, op_cfg: OpConfig | None = None,
                         allow_reference: bool = False, seed: int = 0) -> DiscreteNet:
    """Fresh-weight model from a genotype (full channel width)."""
    torch.manual_seed(seed)
    return DiscreteNet(genotype, n_features, horizon, mode, supports, adjacency,
                       residual=residual, op_cfg=op_cfg, allow_reference=allow_reference, seed=seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
