"""The recommendation network and its loss terms.

Per domain: an item embedding table, a user latent-attribute table, and a
linear map from attributes to the domain-specific preference. Shared
across domains: a ReLU encoder producing the domain-shared preference, a
discriminator (two ReLU hidden layers, two sigmoid outputs) fed through a
gradient-reversal node, and the causal adjacency. Prediction fuses the
domain-specific and causal-invariant preferences, gates them with the
item embedding, and reads an interaction probability off a two-way
softmax head.

Forward paths run on column batches: a batch of n examples is a k x n
matrix, one column per example.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import causal, diffcore as dc, matrixio
from .diffcore import Node

DOMAIN_LABEL_UNIT = {"source": 0, "target": 1}  # output unit per domain


@dataclass
class ModelDims:
    k: int
    n_users: int
    n_source_items: int
    n_target_items: int


PARAM_SHAPES = {
    "item_emb_s": lambda d: (d.k, d.n_source_items),
    "item_emb_t": lambda d: (d.k, d.n_target_items),
    "user_att_s": lambda d: (d.k, d.n_users),
    "user_att_t": lambda d: (d.k, d.n_users),
    "user_map_s": lambda d: (d.k, d.k),
    "user_map_t": lambda d: (d.k, d.k),
    "shared_encoder": lambda d: (d.k, d.k),
    "disc_h1": lambda d: (d.k, d.k),
    "disc_h2": lambda d: (d.k, d.k),
    "disc_out": lambda d: (2, d.k),
    "fusion_s": lambda d: (d.k, 2 * d.k),
    "fusion_t": lambda d: (d.k, 2 * d.k),
    "predictor_s": lambda d: (2, d.k),
    "predictor_t": lambda d: (2, d.k),
    "adjacency": lambda d: (2 * d.k, 2 * d.k),
}


@dataclass
class ModelParams:
    dims: ModelDims
    matrices: dict
    strict_causal_mask: bool = False

    @classmethod
    def init(cls, dims: ModelDims, seed: int, init_scale: float = 0.1,
             strict_causal_mask: bool = False) -> "ModelParams":
        """Uniform [-init_scale, init_scale] everywhere except the
        adjacency, which starts at zero (acyclic and penalty-finite)."""
        rng = np.random.default_rng(seed)
        matrices = {}
        for name, shape_fn in PARAM_SHAPES.items():
            shape = shape_fn(dims)
            if name == "adjacency":
                matrices[name] = np.zeros(shape)
            else:
                matrices[name] = rng.uniform(-init_scale, init_scale, size=shape)
        return cls(dims=dims, matrices=matrices,
                   strict_causal_mask=strict_causal_mask)

    def register(self, tape: dc.Tape) -> dict:
        return {name: tape.param(name, value)
                for name, value in self.matrices.items()}

    def copy(self) -> "ModelParams":
        return replace(self, matrices={k: v.copy() for k, v in self.matrices.items()})

    def effective_adjacency_matrix(self) -> np.ndarray:
        return causal.effective_matrix(self.matrices["adjacency"], self.dims.k,
                                       self.strict_causal_mask)

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["strict_causal_mask"] = str(int(self.strict_causal_mask))
        matrixio.write_container(path, self.matrices, meta)

    @classmethod
    def load(cls, path) -> "ModelParams":
        matrices, meta = matrixio.read_container(path)
        k = matrices["user_map_t"].shape[0]
        dims = ModelDims(k=k,
                         n_users=matrices["user_att_t"].shape[1],
                         n_source_items=matrices["item_emb_s"].shape[1],
                         n_target_items=matrices["item_emb_t"].shape[1])
        return cls(dims=dims, matrices=matrices,
                   strict_causal_mask=bool(int(meta.get("strict_causal_mask", "0"))))


@dataclass
class LossConfig:
    """Term weights of the joint objective plus the ablation switch."""

    lambda_source: float = 1.0
    lambda_domain: float = 0.5
    lambda_causal: float = 1.0
    lambda_reg: float = 1e-5
    penalty: causal.PenaltyWeights = field(default_factory=causal.PenaltyWeights)
    grl_scale: float = 1.0
    ablation: str = "full"  # full | no_causal | no_source

    def __post_init__(self):
        if self.ablation not in ("full", "no_causal", "no_source"):
            raise ValueError(f"unknown ablation mode {self.ablation!r}")


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.users)


@dataclass
class ForwardArtifacts:
    u_att: Node
    u_specific: Node
    u_shared: Node
    u_causal: Node
    fused: Node
    item_emb: Node
    probs: Node  # 1 x n interaction probabilities


@dataclass
class LossBreakdown:
    total: float
    interaction_target: float
    interaction_source: float
    domain: float
    causal: float
    regularizer: float
    causal_terms: causal.CausalLossTerms | None = None


def _suffix(domain: str) -> str:
    if domain not in DOMAIN_LABEL_UNIT:
        raise ValueError(f"unknown domain {domain!r}")
    return "_s" if domain == "source" else "_t"


# ---------------------------------------------------------------------------
# single-purpose encoders (column-batch nodes throughout)

def embed_item(nodes: dict, domain: str, items) -> Node:
    return dc.gather_cols(nodes["item_emb" + _suffix(domain)],
                          np.atleast_1d(items))


def embed_user_attributes(nodes: dict, domain: str, users) -> Node:
    return dc.gather_cols(nodes["user_att" + _suffix(domain)],
                          np.atleast_1d(users))


def encode_domain_specific(nodes: dict, domain: str, u_att: Node) -> Node:
    return dc.matmul(nodes["user_map" + _suffix(domain)], u_att)


def encode_domain_shared(nodes: dict, u_att: Node) -> Node:
    return dc.relu(dc.matmul(nodes["shared_encoder"], u_att))


def discriminate(nodes: dict, u_shared: Node, grl_scale: float) -> Node:
    """Domain probabilities from the shared preference, behind the
    gradient-reversal node; unit 0 is source, unit 1 is target."""
    reversed_in = dc.grad_reverse(u_shared, grl_scale)
    hidden1 = dc.relu(dc.matmul(nodes["disc_h1"], reversed_in))
    hidden2 = dc.relu(dc.matmul(nodes["disc_h2"], hidden1))
    return dc.sigmoid(dc.matmul(nodes["disc_out"], hidden2))


def predict(nodes: dict, domain: str, u_specific: Node, u_causal: Node,
            item_emb: Node) -> Node:
    """Interaction probability: fuse the two preferences, gate by the item
    embedding, softmax the two logits, keep the interacted unit."""
    suffix = _suffix(domain)
    fused = dc.matmul(nodes["fusion" + suffix], dc.vconcat(u_specific, u_causal))
    logits = dc.matmul(nodes["predictor" + suffix], dc.mul(fused, item_emb))
    return dc.slice_rows(dc.softmax_pair(logits), 1, 2)


def domain_loss(lhat: Node, domains) -> Node:
    """Summed binary cross-entropy of discriminator outputs against one-hot
    domain labels (one example per column)."""
    labels = np.zeros(lhat.shape)
    for col, domain in enumerate(domains):
        labels[DOMAIN_LABEL_UNIT[domain], col] = 1.0
    return dc.bce_sum(lhat, labels)


def interaction_loss(probs: Node, labels) -> Node:
    return dc.bce_sum(probs, np.asarray(labels, dtype=np.float64).reshape(probs.shape))


def forward_batch(nodes: dict, domain: str, batch: Batch, k: int,
                  a_eff: Node | None) -> ForwardArtifacts:
    """Full prediction path for one domain; a_eff None replaces the
    causal-invariant preference with zeros (the no-causal ablation)."""
    tape = nodes["shared_encoder"].tape
    u_att = embed_user_attributes(nodes, domain, batch.users)
    u_specific = encode_domain_specific(nodes, domain, u_att)
    u_shared = encode_domain_shared(nodes, u_att)
    if a_eff is not None:
        u_causal = causal.infer_causal_preference_node(a_eff, u_att, k)
    else:
        u_causal = tape.constant(np.zeros((k, len(batch))))
    item_emb = embed_item(nodes, domain, batch.items)
    suffix = _suffix(domain)
    fused = dc.matmul(nodes["fusion" + suffix], dc.vconcat(u_specific, u_causal))
    logits = dc.matmul(nodes["predictor" + suffix], dc.mul(fused, item_emb))
    probs = dc.slice_rows(dc.softmax_pair(logits), 1, 2)
    return ForwardArtifacts(u_att=u_att, u_specific=u_specific, u_shared=u_shared,
                            u_causal=u_causal, fused=fused, item_emb=item_emb,
                            probs=probs)



def total_loss(tape: dc.Tape, params: ModelParams, target_batch: Batch,
               source_batch: Batch | None, config: LossConfig,
               nodes: dict | None = None) -> tuple[Node, LossBreakdown]:
    """Joint objective over one step's batches.

    Target interaction loss, weighted source interaction loss, weighted
    adversarial domain loss over both domains' shared preferences, the
    weighted causal loss over attribute||shared samples from both domains,
    and the unsquared L2 norm of every registered parameter.
    """
    if len(target_batch) == 0:
        raise ValueError("target batch must be nonempty")
    if config.ablation != "no_source" and (source_batch is None or len(source_batch) == 0):
        raise ValueError("source batch must be nonempty outside the no-source ablation")
    if config.ablation == "no_source":
        source_batch = None

    k = params.dims.k
    nodes = nodes if nodes is not None else params.register(tape)
    use_causal = config.ablation != "no_causal"
    a_eff = (causal.effective_adjacency(nodes["adjacency"], k,
                                        params.strict_causal_mask)
             if use_causal else None)

    target_art = forward_batch(nodes, "target", target_batch, k, a_eff)
    loss_target = interaction_loss(target_art.probs, target_batch.labels)

    zero = tape.constant(0.0)
    loss_source = zero
    loss_domain = zero
    source_art = None
    if source_batch is not None:
        source_art = forward_batch(nodes, "source", source_batch, k, a_eff)
        loss_source = interaction_loss(source_art.probs, source_batch.labels)
        shared_all = dc.hconcat(source_art.u_shared, target_art.u_shared)
        lhat = discriminate(nodes, shared_all, config.grl_scale)
        loss_domain = domain_loss(
            lhat, ["source"] * len(source_batch) + ["target"] * len(target_batch))

    loss_causal = zero
    causal_terms = None
    if use_causal:
        h = dc.vconcat(target_art.u_att, target_art.u_shared)
        if source_art is not None:
            h_source = dc.vconcat(source_art.u_att, source_art.u_shared)
            h = dc.hconcat(h, h_source)
        loss_causal, causal_terms = causal.causal_loss(a_eff, h, k, config.penalty)

    reg = dc.l2_norm(*nodes.values())

    total = dc.add_n([
        loss_target,
        dc.scale(loss_source, config.lambda_source),
        dc.scale(loss_domain, config.lambda_domain),
        dc.scale(loss_causal, config.lambda_causal),
        dc.scale(reg, config.lambda_reg),
    ])
    breakdown = LossBreakdown(
        total=float(total.value),
        interaction_target=float(loss_target.value),
        interaction_source=float(loss_source.value),
        domain=float(loss_domain.value),
        causal=float(loss_causal.value),
        regularizer=float(reg.value),
        causal_terms=causal_terms,
    )
    for term, value in (("target interaction", breakdown.interaction_target),
                        ("source interaction", breakdown.interaction_source),
                        ("domain", breakdown.domain),
                        ("causal", breakdown.causal),
                        ("regularizer", breakdown.regularizer)):
        if not np.isfinite(value):
            raise dc.NonFiniteError(f"loss term {term!r} is non-finite")
    return total, breakdown


# ---------------------------------------------------------------------------
# inference without a tape (scoring and probes)

def _relu(x):
    return np.maximum(x, 0.0)


def score_candidates(params: ModelParams, user: int, item_indices,
                     adjacency: np.ndarray | None) -> np.ndarray:
    """Interaction probabilities for one target user against a candidate
    item array; adjacency None scores the no-causal variant."""
    m = params.matrices
    k = params.dims.k
    u_att = m["user_att_t"][:, user]
    u_specific = m["user_map_t"] @ u_att
    if adjacency is not None:
        u_causal = causal.infer_causal_preference(adjacency, u_att)
    else:
        u_causal = np.zeros(k)
    fused = m["fusion_t"] @ np.concatenate([u_specific, u_causal])
    items = m["item_emb_t"][:, np.asarray(item_indices, dtype=np.intp)]
    logits = m["predictor_t"] @ (fused[:, None] * items)
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e[1] / e.sum(axis=0)


def shared_preferences(params: ModelParams, domain: str,
                       users) -> np.ndarray:
    """k x n matrix of domain-shared preferences for the given users."""
    m = params.matrices
    u_att = m["user_att" + _suffix(domain)][:, np.asarray(users, dtype=np.intp)]
    return _relu(m["shared_encoder"] @ u_att)


def discriminator_output(params: ModelParams, shared: np.ndarray) -> np.ndarray:
    m = params.matrices
    hidden1 = _relu(m["disc_h1"] @ shared)
    hidden2 = _relu(m["disc_h2"] @ hidden1)
    return 1.0 / (1.0 + np.exp(-(m["disc_out"] @ hidden2)))
