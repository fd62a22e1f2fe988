"""Finite-difference validation of the full joint loss on a toy instance.

Blocks feeding the discriminator through the gradient-reversal node are
checked against a compensated loss value: the reversal keeps the forward
value intact but replaces the domain-loss contribution of those blocks by
-grl_scale times itself, so their finite-difference target is

    L_eff = L - (1 + grl_scale) * lambda_domain * L_domain.

Everything downstream of the reversal (and every other path) is checked
against the plain loss value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc, model

# blocks whose only route into the domain loss passes the reversal node
REVERSED_BLOCKS = ("shared_encoder", "user_att_s", "user_att_t")

DEFAULT_THRESHOLD = 1e-4


@dataclass
class GradCheckReport:
    per_block: dict
    threshold: float
    grl_scale: float

    @property
    def max_relative_error(self) -> float:
        return max(self.per_block.values())

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.threshold

    def failing_blocks(self) -> list:
        return sorted(name for name, err in self.per_block.items()
                      if err >= self.threshold)


KINK_MARGIN = 1e-3  # ReLU pre-activations must clear this distance from 0

# the reg weight is raised for the check so entries reachable only through
# the parameter-norm term (dead hidden units) carry gradients well above
# the finite-difference noise floor; the loss form is unchanged
CHECK_LAMBDA_REG = 1e-3


def _min_relu_preactivation(params: model.ModelParams, batches) -> float:
    """Smallest |pre-activation| over every ReLU site the toy loss hits;
    a central difference that crosses a kink would corrupt the check."""
    m = params.matrices
    closest = np.inf
    shared = []
    for domain, batch in batches:
        suffix = "_s" if domain == "source" else "_t"
        u_att = m["user_att" + suffix][:, batch.users]
        pre = m["shared_encoder"] @ u_att
        closest = min(closest, np.abs(pre).min())
        shared.append(np.maximum(pre, 0.0))
    both = np.concatenate(shared, axis=1)
    h1_pre = m["disc_h1"] @ both
    nonzero = np.abs(h1_pre[h1_pre != 0])
    if nonzero.size:
        closest = min(closest, nonzero.min())
    h2_pre = m["disc_h2"] @ np.maximum(h1_pre, 0.0)
    nonzero = np.abs(h2_pre[h2_pre != 0])
    if nonzero.size:
        closest = min(closest, nonzero.min())
    return float(closest)


def toy_instance(seed: int = 0, k: int = 4, n_users: int = 6, n_items: int = 8,
                 batch_size: int = 8):
    """A tiny model whose batches touch every embedding column, so no
    parameter is left with a noise-level regularizer-only gradient, and
    whose ReLU pre-activations all clear KINK_MARGIN (resampling the
    initialization deterministically until they do)."""
    dims = model.ModelDims(k=k, n_users=n_users, n_source_items=n_items,
                           n_target_items=n_items)

    def batch(n_items_domain):
        users = np.arange(batch_size) % n_users
        items = np.arange(batch_size) % n_items_domain
        labels = (np.arange(batch_size) % 2).astype(float)
        return model.Batch(users=users, items=items, labels=labels)

    target = batch(dims.n_target_items)
    source = batch(dims.n_source_items)

    for attempt in range(1000):
        sub_seed = seed * 1000 + attempt
        params = model.ModelParams.init(dims, seed=sub_seed, init_scale=0.5)
        rng = np.random.default_rng(sub_seed)
        params.matrices["adjacency"] = (
            rng.uniform(0.05, 0.2, size=(2 * k, 2 * k))
            * rng.choice([-1.0, 1.0], size=(2 * k, 2 * k)))
        margin = _min_relu_preactivation(params, [("target", target),
                                                  ("source", source)])
        if margin > KINK_MARGIN:
            return params, target, source
    raise RuntimeError("could not find a kink-free toy initialization")


def run_gradient_check(seed: int = 0, grl_scale: float = 1.0,
                       step: float = 1e-4,
                       threshold: float = DEFAULT_THRESHOLD,
                       corrupt_block: str | None = None) -> GradCheckReport:
    """Check every parameter block of the full loss on the toy instance.

    corrupt_block deliberately shifts one block's analytic gradient; the
    report then fails naming that block (test hook for the fail path).
    """
    params, target, source = toy_instance(seed=seed)
    config = model.LossConfig(grl_scale=grl_scale, lambda_reg=CHECK_LAMBDA_REG)

    def evaluate(values):
        p = params.copy()
        for name, v in values.items():
            p.matrices[name] = np.asarray(v, dtype=np.float64).copy()
        tape = dc.Tape()
        total, breakdown = model.total_loss(tape, p, target, source, config)
        tape.backward(total)
        grads = tape.grads()
        if corrupt_block is not None and corrupt_block in grads:
            grads[corrupt_block] = grads[corrupt_block] + 0.1
        return float(total.value), breakdown, grads

    def loss_plain(values):
        value, _, grads = evaluate(values)
        return value, grads

    def loss_compensated(values):
        value, breakdown, grads = evaluate(values)
        value -= (1.0 + grl_scale) * config.lambda_domain * breakdown.domain
        return value, grads

    plain_blocks = {name: matrix for name, matrix in params.matrices.items()
                    if name not in REVERSED_BLOCKS}
    reversed_blocks = {name: params.matrices[name] for name in REVERSED_BLOCKS}

    per_block = {}
    per_block.update(dc.finite_diff_details(loss_plain, plain_blocks, step=step))
    per_block.update(dc.finite_diff_details(loss_compensated, reversed_blocks,
                                            step=step))
    return GradCheckReport(per_block=per_block, threshold=threshold,
                           grl_scale=grl_scale)
