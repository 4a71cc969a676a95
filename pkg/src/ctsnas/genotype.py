"""Discrete architectures: derivation from continuous parameters and JSON I/O."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .operators import SEARCHABLE

log = logging.getLogger(__name__)

OPSET = "ctsnas-v1"
EMBED = "EMBED"


class GenotypeError(ValueError):
    pass


@dataclass
class BlockGenotype:
    # nodes[j - 1] lists the (source, operator) pairs feeding node j
    nodes: list[list[tuple[int, str]]]


@dataclass
class Genotype:
    blocks: list[BlockGenotype]
    backbone: list[tuple[object, int]]
    M: int
    D: int = 32
    opset: str = OPSET
    dataset: str = ""

    @property
    def B(self) -> int:
        return len(self.blocks)

    def to_dict(self) -> dict:
        return {
            "meta": {"M": self.M, "B": self.B, "D": self.D, "opset": self.opset, "dataset": self.dataset},
            "blocks": [
                {"nodes": [[{"src": s, "op": o} for s, o in edges] for edges in blk.nodes]}
                for blk in self.blocks
            ],
            "backbone": [{"src": s, "dst": d} for s, d in self.backbone],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def hash(self) -> str:
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def op_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(SEARCHABLE, 0)
        for blk in self.blocks:
            for edges in blk.nodes:
                for _, op in edges:
                    counts[op] = counts.get(op, 0) + 1
        return counts


# ------------------------------------------------------------------ parsing


def _check_keys(obj, expected: tuple[str, ...], where: str):
    if not isinstance(obj, dict):
        raise GenotypeError(f"{where}: expected an object")
    keys = tuple(obj.keys())
    unknown = [k for k in keys if k not in expected]
    if unknown:
        raise GenotypeError(f"{where}: unknown key {unknown[0]!r}")
    missing = [k for k in expected if k not in obj]
    if missing:
        raise GenotypeError(f"{where}: missing key {missing[0]!r}")
    if keys != expected:
        raise GenotypeError(f"{where}: keys out of order, expected {list(expected)}")


def _int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise GenotypeError(f"{where}: expected an integer, got {value!r}")
    return value


def genotype_from_dict(obj, allowed_ops=SEARCHABLE) -> Genotype:
    _check_keys(obj, ("meta", "blocks", "backbone"), "genotype")
    meta = obj["meta"]
    _check_keys(meta, ("M", "B", "D", "opset", "dataset"), "meta")
    M, B, D = _int(meta["M"], "meta.M"), _int(meta["B"], "meta.B"), _int(meta["D"], "meta.D")
    if M < 2:
        raise GenotypeError("meta.M: must be >= 2")
    if not isinstance(obj["blocks"], list) or len(obj["blocks"]) != B:
        raise GenotypeError(f"blocks: expected {B} blocks")
    blocks = []
    for b, blk in enumerate(obj["blocks"]):
        _check_keys(blk, ("nodes",), f"blocks[{b}]")
        nodes = blk["nodes"]
        if not isinstance(nodes, list) or len(nodes) != M - 1:
            raise GenotypeError(f"blocks[{b}].nodes: expected {M - 1} nodes")
        parsed = []
        for j, edges in enumerate(nodes, start=1):
            where = f"blocks[{b}].nodes[{j - 1}]"
            if not isinstance(edges, list) or len(edges) != min(j, 2):
                raise GenotypeError(f"{where}: node {j} must have exactly {min(j, 2)} incoming edges")
            pairs = []
            for k, e in enumerate(edges):
                _check_keys(e, ("src", "op"), f"{where}[{k}]")
                src = _int(e["src"], f"{where}[{k}].src")
                if not 0 <= src < j:
                    raise GenotypeError(f"{where}[{k}].src: source {src} not in [0, {j})")
                if e["op"] not in allowed_ops:
                    raise GenotypeError(f"{where}[{k}].op: unknown operator tag {e['op']!r}")
                pairs.append((src, e["op"]))
            if pairs[0][0] != j - 1:
                raise GenotypeError(f"{where}[0].src: first edge must come from node {j - 1}")
            if len(pairs) == 2 and pairs[1][0] == j - 1:
                raise GenotypeError(f"{where}[1].src: second edge must come from a node before {j - 1}")
            parsed.append(pairs)
        blocks.append(BlockGenotype(parsed))
    backbone = obj["backbone"]
    if not isinstance(backbone, list) or len(backbone) != B:
        raise GenotypeError(f"backbone: expected {B} edges, one per block")
    edges = []
    for k, e in enumerate(backbone):
        _check_keys(e, ("src", "dst"), f"backbone[{k}]")
        dst = _int(e["dst"], f"backbone[{k}].dst")
        if dst != k + 1:
            raise GenotypeError(f"backbone[{k}].dst: expected block {k + 1}")
        src = e["src"]
        if src != EMBED:
            src = _int(src, f"backbone[{k}].src")
            if not 1 <= src < dst:
                raise GenotypeError(f"backbone[{k}].src: block {src} cannot feed block {dst}")
        if dst == 1 and src != EMBED:
            raise GenotypeError("backbone[0].src: block 1 must be fed by EMBED")
        edges.append((src, dst))
    return Genotype(blocks, edges, M=M, D=D, opset=str(meta["opset"]), dataset=str(meta["dataset"]))


def genotype_from_json(text: str, allowed_ops=SEARCHABLE) -> Genotype:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"genotype: invalid JSON ({exc})") from None
    return genotype_from_dict(obj, allowed_ops)


def load_genotype(path) -> Genotype:
    with open(path, encoding="utf-8") as fh:
        return genotype_from_json(fh.read())


# --------------------------------------------------------------- derivation


def _softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def edge_weight(alpha_ij, beta_j, i: int, o: int) -> float:
    """w_o^(i,j) = softmax(beta_j)_i * softmax(alpha_ij)_o."""
    beta_j, alpha_ij = np.asarray(beta_j), np.asarray(alpha_ij)
    if not 0 <= i < beta_j.shape[0] or not 0 <= o < alpha_ij.shape[0]:
        raise IndexError(f"edge index (i={i}, o={o}) out of range")
    return float(_softmax(beta_j)[i] * _softmax(alpha_ij)[o])


def node_weights(alpha, betas, j: int, tau: float = 1.0) -> np.ndarray:
    """Matrix W[i, o] = w_o^(i,j) for all predecessors i of node j."""
    alpha = np.asarray(alpha, dtype=np.float64)
    first = j * (j - 1) // 2  # edges are ordered by target, then source
    a = np.stack([_softmax(alpha[first + i] / tau) for i in range(j)])
    return _softmax(betas[j - 1])[:, None] * a


def _argmax_first(w: np.ndarray, allowed) -> int:
    best, best_o = -np.inf, -1
    for o in allowed:
        if w[o] > best:
            best, best_o = w[o], o
    return best_o


def derive_st_block(alpha, betas, forbid_zero_on_mandatory_edge: bool = False, tau: float = 1.0) -> BlockGenotype:
    """Keep the edge from h_{j-1} plus the strongest edge from h_0..h_{j-2}.

    Ties go to the lowest operator index, then the lowest source index.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    M = len(betas) + 1
    n_ops = alpha.shape[1]
    zero = SEARCHABLE.index("ZERO")
    nodes = []
    for j in range(1, M):
        w = node_weights(alpha, betas, j, tau)
        mandatory_ops = [o for o in range(n_ops) if not (forbid_zero_on_mandatory_edge and o == zero)]
        edges = [(j - 1, SEARCHABLE[_argmax_first(w[j - 1], mandatory_ops)])]
        if j >= 2:
            best, best_edge = -np.inf, None
            for o in range(n_ops):
                for i in range(j - 1):
                    if w[i, o] > best:
                        best, best_edge = w[i, o], (i, SEARCHABLE[o])
            edges.append(best_edge)
        nodes.append(edges)
    return BlockGenotype(nodes)


def derive_backbone(gammas, B: int) -> list[tuple[object, int]]:
    """b_1 <- EMBED; every later block keeps its argmax-gamma predecessor (0 = EMBED)."""
    edges = [(EMBED, 1)]
    for j in range(2, B + 1):
        g = np.asarray(gammas[j - 2], dtype=np.float64)
        i = int(np.argmax(g))  # first maximum on ties
        edges.append((EMBED if i == 0 else i, j))
    return edges


def chain_backbone(B: int) -> list[tuple[object, int]]:
    return [(EMBED, 1)] + [(j - 1, j) for j in range(2, B + 1)]


def derive_genotype(supernet, dataset: str = "", forbid_zero_on_mandatory_edge: bool = False) -> Genotype:
    M, B = supernet.M, supernet.B
    blocks = []
    for b in range(B):
        alpha, betas = supernet.micro_params(b)
        a = alpha.detach().cpu().double().numpy()
        bs = [x.detach().cpu().double().numpy() for x in betas]
        block = derive_st_block(a, bs, forbid_zero_on_mandatory_edge)
        tempered = derive_st_block(a, bs, forbid_zero_on_mandatory_edge, tau=supernet.tau)
        if tempered != block:
            log.warning("block %d: tempered and untempered derivation disagree", b + 1)
        blocks.append(block)
    if supernet.macro_search:
        backbone = derive_backbone([g.detach().cpu().numpy() for g in supernet.gammas], B)
    else:
        backbone = chain_backbone(B)
    return Genotype(blocks, backbone, M=M, D=supernet.d, dataset=dataset)


# -------------------------------------------------------------- fixed genotypes


def uniform_genotype(M: int, B: int, op: str = "IDENTITY", D: int = 32, dataset: str = "") -> Genotype:
    nodes = [[(j - 1, op)] + ([(0, op)] if j >= 2 else []) for j in range(1, M)]
    return Genotype([BlockGenotype([list(e) for e in nodes]) for _ in range(B)], chain_backbone(B),
                    M=M, D=D, dataset=dataset)


def random_genotype(M: int, B: int, rng: np.random.Generator, D: int = 32, dataset: str = "") -> Genotype:
    """Uniform over operators, second-edge sources and backbone predecessors."""
    blocks = []
    for _ in range(B):
        nodes = []
        for j in range(1, M):
            edges = [(j - 1, SEARCHABLE[rng.integers(len(SEARCHABLE))])]
            if j >= 2:
                edges.append((int(rng.integers(j - 1)), SEARCHABLE[rng.integers(len(SEARCHABLE))]))
            nodes.append(edges)
        blocks.append(BlockGenotype(nodes))
    backbone = [(EMBED, 1)]
    for j in range(2, B + 1):
        i = int(rng.integers(j))
        backbone.append((EMBED if i == 0 else i, j))
    return Genotype(blocks, backbone, M=M, D=D, dataset=dataset)
