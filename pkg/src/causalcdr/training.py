"""Joint minibatch optimization of the full objective, ablation runners,
an adjacency-only fitter for structure-recovery experiments, and the
adversarial-convergence probe.

Determinism contract: everything random derives from the config seed, so
identical (config, data) reproduce identical parameter trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import causal, data, diffcore as dc, evaluation, model
from .data import SOURCE, TARGET

HISTORY_HEADER = "epoch,L_t,L_s,L_c,L_cau,reg,acyclicity,disc_acc,val_hr10,val_ndcg10"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k: int = 16
    learning_rate: float = 0.01
    lambda_source: float = 1.0
    lambda_domain: float = 0.5
    lambda_causal: float = 1.0
    lambda_reg: float = 1e-5
    gamma_dag: float = 1.0
    gamma_direction: float = 1.0
    gamma_not_root: float = 0.1
    gamma_sparsity: float = 0.01
    epochs: int = 30
    batch_size: int = 64
    n_neg_per_positive: int = 4
    grl_scale: float = 1.0
    optimizer: str = "adam"
    seed: int = 0
    patience: int = 10
    ablation: str = "full"          # full | no_causal | no_source
    init_scale: float = 0.1
    strict_causal_mask: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def loss_config(self) -> model.LossConfig:
        return model.LossConfig(
            lambda_source=self.lambda_source,
            lambda_domain=self.lambda_domain,
            lambda_causal=self.lambda_causal,
            lambda_reg=self.lambda_reg,
            penalty=causal.PenaltyWeights(
                dag=self.gamma_dag, direction=self.gamma_direction,
                not_root=self.gamma_not_root, sparsity=self.gamma_sparsity),
            grl_scale=self.grl_scale,
            ablation=self.ablation,
        )


@dataclass
class EpochRecord:
    epoch: int
    loss_target: float
    loss_source: float
    loss_domain: float
    loss_causal: float
    regularizer: float
    acyclicity: float
    disc_accuracy: float
    val_hr10: float
    val_ndcg10: float

    def csv_row(self) -> str:
        values = (self.loss_target, self.loss_source, self.loss_domain,
                  self.loss_causal, self.regularizer, self.acyclicity,
                  self.disc_accuracy, self.val_hr10, self.val_ndcg10)
        return ",".join([str(self.epoch)] + [f"{v:.10g}" for v in values])


@dataclass
class TrainResult:
    params: model.ModelParams
    adjacency: np.ndarray | None
    history: list
    best_epoch: int
    config: TrainConfig


def history_to_csv(history, path, header_meta: str | None = None) -> None:
    lines = []
    if header_meta:
        lines.append(f"# {header_meta}")
    lines.append(HISTORY_HEADER)
    lines.extend(record.csv_row() for record in history)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# optimizers

class Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: dict, grads: dict) -> None:
        for name, matrix in params.items():
            matrix -= self.learning_rate * grads[name]


class Adam:
    """Per-parameter moment estimation with the usual decay pair and a
    small denominator guard."""

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for name, matrix in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(matrix)
                self.v[name] = np.zeros_like(matrix)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            matrix -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    if config.optimizer == "sgd":
        return Sgd(config.learning_rate)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


# ---------------------------------------------------------------------------
# probes

@dataclass
class ProbeResult:
    accuracy: float
    tie_fraction: float


def discriminator_probe(params: model.ModelParams,
                        users=None) -> ProbeResult:
    """Classify the shared preference of every probe user from each domain
    by discriminator argmax (ties to the source unit) and score against
    the true domain labels; the set is balanced by construction."""
    if users is None:
        users = np.arange(params.dims.n_users)
    shared = np.concatenate([model.shared_preferences(params, SOURCE, users),
                             model.shared_preferences(params, TARGET, users)],
                            axis=1)
    lhat = model.discriminator_output(params, shared)
    predicted = (lhat[1] > lhat[0]).astype(int)
    truth = np.concatenate([np.zeros(len(users), dtype=int),
                            np.ones(len(users), dtype=int)])
    return ProbeResult(accuracy=float(np.mean(predicted == truth)),
                       tie_fraction=float(np.mean(lhat[0] == lhat[1])))


# ---------------------------------------------------------------------------
# joint training

def _epoch_seed(config_seed: int, epoch: int, stream: int) -> int:
    ss = np.random.SeedSequence([config_seed, epoch, stream])
    return int(ss.generate_state(1)[0])


def _example_batches(examples: data.TrainingExamples, batch_size: int, rng):
    order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield model.Batch(users=examples.users[idx], items=examples.items[idx],
                          labels=examples.labels[idx])


def train(dataset: data.CrossDomainDataset, split: data.SplitResult,
          config: TrainConfig) -> TrainResult:
    """Minibatch descent on the joint loss with per-epoch negative
    resampling, balanced source batches, validation-based early stopping,
    and a best-validation snapshot as the result."""
    if not split.train[TARGET]:
        raise TrainingError("target training set is empty")
    use_source = config.ablation != "no_source"
    if use_source and not split.train[SOURCE]:
        raise TrainingError("source training set is empty outside no_source")

    dims = model.ModelDims(k=config.k, n_users=dataset.n_users,
                           n_source_items=dataset.n_source_items,
                           n_target_items=dataset.n_target_items)
    params = model.ModelParams.init(dims, seed=config.seed,
                                    init_scale=config.init_scale,
                                    strict_causal_mask=config.strict_causal_mask)
    loss_config = config.loss_config()
    optimizer = make_optimizer(config)
    use_causal = config.ablation != "no_causal"
    has_validation = bool(split.val_candidates)

    history: list = []
    best = params.copy()
    best_epoch = 0
    best_hr = -1.0
    stale = 0

    for epoch in range(1, config.epochs + 1):
        target_examples = data.sample_train_negatives(
            dataset, split, TARGET, config.n_neg_per_positive,
            seed=_epoch_seed(config.seed, epoch, 0))
        source_examples = None
        if use_source:
            source_examples = data.sample_train_negatives(
                dataset, split, SOURCE, config.n_neg_per_positive,
                seed=_epoch_seed(config.seed, epoch, 1))
        rng = np.random.default_rng(_epoch_seed(config.seed, epoch, 2))

        sums = {"t": 0.0, "s": 0.0, "c": 0.0, "cau": 0.0, "reg": 0.0}
        n_seen = 0
        steps = 0
        for target_batch in _example_batches(target_examples,
                                             config.batch_size, rng):
            source_batch = None
            if use_source:
                # equal example counts per step, resampled with replacement
                picks = rng.integers(0, len(source_examples), len(target_batch))
                source_batch = model.Batch(users=source_examples.users[picks],
                                           items=source_examples.items[picks],
                                           labels=source_examples.labels[picks])
            tape = dc.Tape()
            try:
                total, breakdown = model.total_loss(tape, params, target_batch,
                                                    source_batch, loss_config)
            except dc.NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {steps}: {exc}") from exc
            tape.backward(total)
            optimizer.step(params.matrices, tape.grads())
            sums["t"] += breakdown.interaction_target
            sums["s"] += breakdown.interaction_source
            sums["c"] += breakdown.domain
            sums["cau"] += breakdown.causal * len(target_batch)
            sums["reg"] += breakdown.regularizer * len(target_batch)
            n_seen += len(target_batch)
            steps += 1

        adjacency = params.effective_adjacency_matrix() if use_causal else None
        val_hr10 = math.nan
        val_ndcg10 = math.nan
        if has_validation:
            val = evaluation.evaluate(params, adjacency, split,
                                      ks=(10,), part="validation")
            val_hr10 = val["HR@10"]
            val_ndcg10 = val["NDCG@10"]
        record = EpochRecord(
            epoch=epoch,
            loss_target=sums["t"] / n_seen,
            loss_source=sums["s"] / n_seen,
            loss_domain=sums["c"] / n_seen,
            loss_causal=sums["cau"] / n_seen,
            regularizer=sums["reg"] / n_seen,
            acyclicity=dc.acyclicity(adjacency) if adjacency is not None else 0.0,
            disc_accuracy=discriminator_probe(params).accuracy,
            val_hr10=val_hr10,
            val_ndcg10=val_ndcg10,
        )
        history.append(record)

        if has_validation:
            if val_hr10 > best_hr:
                best_hr = val_hr10
                best = params.copy()
                best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        else:
            best = params.copy()
            best_epoch = epoch

    adjacency = best.effective_adjacency_matrix() if use_causal else None
    return TrainResult(params=best, adjacency=adjacency, history=history,
                       best_epoch=best_epoch, config=config)


# ---------------------------------------------------------------------------
# adjacency-only structure fitting

def _structure_fit_penalty() -> causal.PenaltyWeights:
    """Recovery-oriented weighting for adjacency-only fitting: a heavy
    acyclicity weight suppresses mutually-canceling cycle networks and a
    moderate L1 keeps preference-to-preference shortcut edges under the
    extraction threshold without shrinking true edges out of it. The
    joint-model penalty defaults are unchanged."""
    return causal.PenaltyWeights(dag=500.0, direction=1.0, not_root=0.1,
                                 sparsity=0.05)


@dataclass
class AdjacencyFitConfig:
    learning_rate: float = 0.02
    steps: int = 3000
    penalty: causal.PenaltyWeights = field(default_factory=_structure_fit_penalty)
    optimizer: str = "adam"
    strict_mask: bool = False
    seed: int = 0


def fit_adjacency(samples: np.ndarray, k: int,
                  config: AdjacencyFitConfig | None = None) -> tuple:
    """Gradient descent of the causal loss over a fixed 2k x N sample
    batch, starting from the zero matrix. Returns the masked adjacency and
    a per-step (loss, acyclicity) history."""
    config = config or AdjacencyFitConfig()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] != 2 * k:
        raise ValueError(f"samples must be {2 * k} x N, got {samples.shape}")
    adjacency = {"adjacency": np.zeros((2 * k, 2 * k))}
    if config.optimizer == "adam":
        optimizer = Adam(config.learning_rate)
    else:
        optimizer = Sgd(config.learning_rate)
    history = []
    for _ in range(config.steps):
        tape = dc.Tape()
        a = tape.param("adjacency", adjacency["adjacency"])
        a_eff = causal.effective_adjacency(a, k, config.strict_mask)
        total, terms = causal.causal_loss(a_eff, tape.constant(samples), k,
                                          config.penalty)
        tape.backward(total)
        optimizer.step(adjacency, tape.grads())
        history.append((float(total.value), terms.dag))
    final = causal.effective_matrix(adjacency["adjacency"], k, config.strict_mask)
    return final, history
