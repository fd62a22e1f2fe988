"""Causal graph over latent user dimensions.

The graph has 2k nodes: indices 0..k-1 are latent-attribute dimensions,
k..2k-1 are preference dimensions. Entry (i, j) of the weighted adjacency
is the causal effect of node i on node j. A linear structural model
reconstructs each sample H = u_att || u_shared from its parents as A^T H;
the training objective adds an acyclicity penalty, a directional penalty
on the preference-to-attribute block, a not-a-root penalty on preference
columns, and global L1 sparsity.

The diagonal of the adjacency is structurally zero: a node is never its
own parent, and a plain (non-annealed) acyclicity penalty cannot drive
self-loops all the way to zero on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node

LOG_EPS = 1e-8  # guard inside the not-a-root logarithm


@dataclass
class PenaltyWeights:
    """Multipliers for the structural penalties of the causal loss."""

    dag: float = 1.0         # acyclicity
    direction: float = 1.0   # preference -> attribute block L1
    not_root: float = 0.1    # -log of preference-column L1 mass
    sparsity: float = 0.01   # global L1


@dataclass
class CausalLossTerms:
    reconstruction: float
    dag: float
    direction: float
    not_root: float
    sparsity: float

    def weighted_total(self, w: PenaltyWeights) -> float:
        return (self.reconstruction + w.dag * self.dag + w.direction * self.direction
                + w.not_root * self.not_root + w.sparsity * self.sparsity)


def adjacency_mask(k: int, strict: bool = False) -> np.ndarray:
    """Trainable-entry mask: zero diagonal always; with strict=True only
    the attribute->preference block stays free (the prose-level reading of
    the directionality constraint, off by default)."""
    d = 2 * k
    if strict:
        mask = np.zeros((d, d))
        mask[:k, k:] = 1.0
    else:
        mask = np.ones((d, d))
    np.fill_diagonal(mask, 0.0)
    return mask


def effective_matrix(a: np.ndarray, k: int, strict: bool = False) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) * adjacency_mask(k, strict)


def effective_adjacency(a: Node, k: int, strict: bool = False) -> Node:
    """Masked adjacency node used by every loss term and inference path."""
    if a.shape != (2 * k, 2 * k):
        raise dc.ShapeError(f"adjacency must be {2 * k}x{2 * k}, got {a.shape}")
    mask = a.tape.constant(adjacency_mask(k, strict))
    return dc.mul(a, mask)


def scm_reconstruct(a: np.ndarray, h: np.ndarray) -> np.ndarray:
    """A^T H: every node rebuilt from its parents (pure numpy path)."""
    a = np.asarray(a, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != h.shape[0]:
        raise dc.ShapeError(f"scm_reconstruct: shapes {a.shape} and {h.shape} incompatible")
    return a.T @ h


def causal_loss(a_eff: Node, h: Node, k: int,
                weights: PenaltyWeights) -> tuple[Node, CausalLossTerms]:
    """Total causal loss over a column batch of samples h (2k x N).

    a_eff must already be the masked adjacency (effective_adjacency).
    Returns the weighted-total node and the unweighted per-term values.
    """
    if h.value.ndim != 2 or h.shape[0] != 2 * k:
        raise dc.ShapeError(f"causal_loss: samples must be {2 * k} x N, got {h.shape}")
    n = h.shape[1]
    if n == 0:
        raise ValueError("causal_loss: empty batch")

    rec = dc.scale(dc.sq_l2(dc.sub(h, dc.matmul_t(a_eff, h))), 1.0 / n)
    dag = dc.acyclicity_term(a_eff)
    direction = dc.l1(dc.slice_cols(dc.slice_rows(a_eff, k, 2 * k), 0, k))
    col_terms = []
    for i in range(k, 2 * k):
        col_mass = dc.l1(dc.slice_cols(a_eff, i, i + 1))
        col_terms.append(dc.scale(dc.log_scalar(dc.add_scalar(col_mass, LOG_EPS)), -1.0))
    not_root = dc.add_n(col_terms)
    sparsity = dc.l1(a_eff)

    terms = CausalLossTerms(
        reconstruction=float(rec.value),
        dag=float(dag.value),
        direction=float(direction.value),
        not_root=float(not_root.value),
        sparsity=float(sparsity.value),
    )
    total = dc.add_n([
        rec,
        dc.scale(dag, weights.dag),
        dc.scale(direction, weights.direction),
        dc.scale(not_root, weights.not_root),
        dc.scale(sparsity, weights.sparsity),
    ])
    return total, terms


def infer_causal_preference_node(a_eff: Node, u_att: Node, k: int) -> Node:
    """Preference block of A^T (u_att || 0): run only the attributes through
    the learned structure, zeroing the shared input, and keep the posterior
    k rows. Accepts a single k-vector or a k x B column batch.
    """
    if u_att.shape[0] != k:
        raise dc.ShapeError(f"attribute input must have {k} rows, got {u_att.shape}")
    tape = u_att.tape
    if u_att.value.ndim == 1:
        h0 = dc.vconcat(u_att, tape.constant(np.zeros(k)))
        return dc.slice_rows(dc.matvec_t(a_eff, h0), k, 2 * k)
    zeros = tape.constant(np.zeros((k, u_att.shape[1])))
    h0 = dc.vconcat(u_att, zeros)
    return dc.slice_rows(dc.matmul_t(a_eff, h0), k, 2 * k)


def infer_causal_preference(a: np.ndarray, u_att: np.ndarray) -> np.ndarray:
    """Numpy twin of infer_causal_preference_node for scoring paths.

    Equivalent to the attribute->preference block applied to u_att.
    """
    a = np.asarray(a, dtype=np.float64)
    u_att = np.asarray(u_att, dtype=np.float64)
    k = u_att.shape[0]
    if a.shape != (2 * k, 2 * k):
        raise dc.ShapeError(f"adjacency {a.shape} incompatible with attributes of dim {k}")
    return a[:k, k:].T @ u_att


@dataclass
class GraphExtraction:
    edges: set = field(default_factory=set)
    threshold: float = 0.0
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None


def extract_graph(a: np.ndarray, threshold: float,
                  reference_edges: set | None = None) -> GraphExtraction:
    """Edges with |weight| >= threshold, plus precision/recall/F1 over
    directed edges when a reference edge set is supplied."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    a = np.asarray(a, dtype=np.float64)
    rows, cols = np.nonzero(np.abs(a) >= threshold)
    edges = {(int(i), int(j)) for i, j in zip(rows, cols)}
    out = GraphExtraction(edges=edges, threshold=threshold)
    if reference_edges is not None:
        ref = {(int(i), int(j)) for i, j in reference_edges}
        hits = len(edges & ref)
        out.precision = hits / len(edges) if edges else 0.0
        out.recall = hits / len(ref) if ref else 0.0
        if out.precision + out.recall > 0:
            out.f1 = 2 * out.precision * out.recall / (out.precision + out.recall)
        else:
            out.f1 = 0.0
    return out


def export_edge_list(a: np.ndarray, threshold: float, path,
                     extra_meta: str = "") -> None:
    """Edge-list text file `i,j,weight` sorted by |weight| descending,
    with the acyclicity value and threshold recorded in the header."""
    a = np.asarray(a, dtype=np.float64)
    extraction = extract_graph(a, threshold)
    ranked = sorted(extraction.edges, key=lambda e: (-abs(a[e[0], e[1]]), e))
    header = f"# acyclicity={dc.acyclicity(a):.12g} threshold={threshold:.12g}"
    if extra_meta:
        header += f" {extra_meta}"
    lines = [header, "i,j,weight"]
    for i, j in ranked:
        lines.append(f"{i},{j},{a[i, j]:.12g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
