"""Multi-task training loop over both domains.

Each step draws one batch per domain, runs a single forward pass over the
union of the batch users, and optimizes the summed objective (prediction
losses plus the weighted disentanglement losses). Every random decision is
keyed to (seed, stream, epoch, step, ...) so reruns are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

from . import autodiff as ad
from . import disentangle as dis
from . import fusion as fu
from . import graph as gr
from .autodiff import Value
from .config import RunConfig
from .data import SplitDataset, sample_train_negatives
from .mixup import sample_lambda
from .model import (
    BRANCHES,
    ModelState,
    build_model,
    forward,
    score_pairs,
    variant_components,
)
from .optim import Adam

LOG_HEADER = "epoch\tloss_total\tloss_prd_A\tloss_prd_B\tloss_cls1\tloss_cls2\tlambda_mean"

# RNG stream tags; each keyed draw is default_rng([seed, tag, ...])
_STREAM_NEGATIVES = 1
_STREAM_LAMBDA = 2
_STREAM_NOISE = 3
_STREAM_SHUFFLE = 4


class NumericalAbortError(RuntimeError):
    """Training produced a non-finite loss; carries step diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainResult:
    model: ModelState
    log_lines: list[str]
    history: list[dict]


def _epoch_arrays(
    train, epoch: int, domain_id: int, config: RunConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positives plus freshly drawn negatives for one domain's epoch."""
    rng = np.random.default_rng([config.seed, _STREAM_NEGATIVES, epoch, domain_id])
    negatives = sample_train_negatives(train, config.neg_ratio, rng)
    positives = sorted(train.interactions)
    users = np.array([u for u, _ in positives] + [u for u, _, _ in negatives], dtype=np.int64)
    items = np.array([i for _, i in positives] + [i for _, i, _ in negatives], dtype=np.int64)
    labels = np.concatenate(
        [np.ones(len(positives)), np.zeros(len(negatives))]
    )
    return users, items, labels


class _BatchStream:
    """Shuffled batches over one domain's epoch samples, recycling on demand.

    When the stream runs out before the paired (larger) domain finishes its
    epoch, it reshuffles the same samples under a new cycle key and keeps
    serving batches.
    """

    def __init__(
        self,
        users: np.ndarray,
        items: np.ndarray,
        labels: np.ndarray,
        config: RunConfig,
        epoch: int,
        domain_id: int,
    ):
        self._users = users
        self._items = items
        self._labels = labels
        self._batch = config.batch_size
        self._seed = config.seed
        self._epoch = epoch
        self._domain_id = domain_id
        self._cycle = -1
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0
        self._advance_cycle()

    @property
    def batches_per_cycle(self) -> int:
        return max(1, math.ceil(self._users.size / self._batch))

    def _advance_cycle(self) -> None:
        self._cycle += 1
        rng = np.random.default_rng(
            [self._seed, _STREAM_SHUFFLE, self._epoch, self._domain_id, self._cycle]
        )
        self._order = rng.permutation(self._users.size)
        self._pos = 0

    def next_batch(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._pos >= self._order.size:
            self._advance_cycle()
        sel = self._order[self._pos : self._pos + self._batch]
        self._pos += self._batch
        return self._users[sel], self._items[sel], self._labels[sel]


def _noise_rngs(config: RunConfig, epoch: int, step: int, offset: int = 0):
    return {
        branch: np.random.default_rng(
            [config.seed, _STREAM_NOISE, epoch, step, offset + idx]
        )
        for idx, branch in enumerate(BRANCHES)
    }


def _step_lambda(config: RunConfig, epoch: int, step: int) -> float:
    if config.variant == "fixed_lambda":
        return 0.5
    if config.fixed_lambda is not None:
        return config.fixed_lambda
    if not variant_components(config.variant):
        return 0.5  # base variant never mixes; value is only logged
    rng = np.random.default_rng([config.seed, _STREAM_LAMBDA, epoch, step])
    return sample_lambda(config.mixup_alpha, rng)


def _elbo_terms(model: ModelState, fwd) -> tuple[Value, Value]:
    """KL-to-prior and reconstruction means over all branch/head pairs."""
    k = model.config.k
    kl_parts: list[Value] = []
    recon_parts: list[Value] = []
    for branch in BRANCHES:
        res = fwd.enc_results[branch]
        target = fwd.enc_inputs[branch].data  # constant: no gradient to the target
        heads = (
            ("h1", res.mu1, res.log_sigma1, res.z1),
            ("h2", res.mu2, res.log_sigma2, res.z2),
        )
        for name, mu, log_sigma, z in heads:
            var = ad.exp(ad.mul_const(log_sigma, 2.0))
            inner = ad.sub(
                ad.affine_const(ad.add(ad.square(mu), var), 1.0, -1.0),
                ad.mul_const(log_sigma, 2.0),
            )
            kl_parts.append(ad.mul_const(ad.mean_all(inner), 0.5 * k))
            dec = model.decoders[f"{branch}.{name}"]
            recon_parts.append(ad.mse(ad.affine(z, dec.w, dec.b), target))
    scale = 1.0 / len(kl_parts)
    kl = ad.mul_const(reduce(ad.add, kl_parts), scale)
    recon = ad.mul_const(reduce(ad.add, recon_parts), scale)
    return kl, recon


def step_losses(
    model: ModelState,
    fwd,
    batch_a: tuple[np.ndarray, np.ndarray, np.ndarray],
    batch_b: tuple[np.ndarray, np.ndarray, np.ndarray],
    domains: tuple[str, ...] = ("a", "b"),
) -> tuple[Value, dict[str, float]]:
    """Total loss Value for one step plus float copies of each component."""
    cfg = model.config
    weighted: list[Value] = []
    parts: dict[str, float] = {}

    if "a" in domains:
        y, s, t = score_pairs(fwd, model, "a", batch_a[0], batch_a[1])
        prd_a = fu.loss_prd(y, batch_a[2], s, t, cfg.gamma)
        weighted.append(prd_a)
        parts["prd_a"] = prd_a.data.item()
    if "b" in domains:
        y, s, t = score_pairs(fwd, model, "b", batch_b[0], batch_b[1])
        prd_b = fu.loss_prd(y, batch_b[2], s, t, cfg.gamma)
        weighted.append(prd_b)
        parts["prd_b"] = prd_b.data.item()

    if variant_components(cfg.variant):
        if cfg.variant == "elbo":
            kl, recon = _elbo_terms(model, fwd)
            weighted.extend([kl, recon])
            parts["cls1"] = kl.data.item()
            parts["cls2"] = recon.data.item()
        else:
            cls1 = dis.loss_cls1(
                fwd.codes["spe_a"],
                fwd.codes["spe_b"],
                fwd.codes["spe_aug"],
                fwd.lam,
                model.classifier,
            )
            cls2 = dis.loss_cls2(
                fwd.codes["ind_a"], fwd.codes["ind_b"], fwd.codes["sha"], model.classifier
            )
            weighted.append(ad.mul_const(cls1, cfg.mu1))
            weighted.append(ad.mul_const(cls2, cfg.mu2))
            parts["cls1"] = cls1.data.item()
            parts["cls2"] = cls2.data.item()

    total = reduce(ad.add, weighted)
    parts["total"] = total.data.item()
    return total, parts


def _max_abs_grad(model: ModelState) -> float:
    worst = 0.0
    for value in model.params.values():
        if value.grad is not None and value.grad.size:
            worst = max(worst, float(np.abs(value.grad).max()))
    return worst


def _abort(epoch: int, step: int, lam: float, batch_a, batch_b, last_grad: float):
    diagnostics = {
        "epoch": epoch,
        "step": step,
        "lambda": lam,
        "batch_users_a": batch_a[0].tolist(),
        "batch_items_a": batch_a[1].tolist(),
        "batch_users_b": batch_b[0].tolist(),
        "batch_items_b": batch_b[1].tolist(),
        "last_max_abs_grad": last_grad,
    }
    raise NumericalAbortError(
        "non-finite training loss at epoch %d step %d "
        "(lambda=%.6f, batch sizes a=%d b=%d, last max|grad|=%.3e)"
        % (epoch, step, lam, batch_a[0].size, batch_b[0].size, last_grad),
        diagnostics,
    )


def _optimize(model: ModelState, optimizer: Adam, total: Value) -> float:
    optimizer.zero_grad()
    ad.backward(total)
    grad_max = _max_abs_grad(model)
    optimizer.step()
    return grad_max


def fit(
    model: ModelState,
    split_a: SplitDataset,
    split_b: SplitDataset,
    log_sink=None,
) -> TrainResult:
    """Run the configured number of epochs on an already-built model."""
    cfg = model.config
    optimizer = Adam(model.params, lr=cfg.lr)
    log_lines = [LOG_HEADER]
    if log_sink is not None:
        log_sink.write(LOG_HEADER + "\n")
    history: list[dict] = []
    stochastic = bool(variant_components(cfg.variant))
    last_grad = 0.0

    for epoch in range(cfg.epochs):
        arrays_a = _epoch_arrays(split_a.train, epoch, 0, cfg)
        arrays_b = _epoch_arrays(split_b.train, epoch, 1, cfg)
        stream_a = _BatchStream(*arrays_a, cfg, epoch, 0)
        stream_b = _BatchStream(*arrays_b, cfg, epoch, 1)
        steps = max(stream_a.batches_per_cycle, stream_b.batches_per_cycle)
        sums = {"total": 0.0, "prd_a": 0.0, "prd_b": 0.0, "cls1": 0.0, "cls2": 0.0}
        lam_sum = 0.0

        for step in range(steps):
            batch_a = stream_a.next_batch()
            batch_b = stream_b.next_batch()
            lam = _step_lambda(cfg, epoch, step)
            lam_sum += lam
            union = np.union1d(batch_a[0], batch_b[0])

            if cfg.alternating:
                parts: dict[str, float] = {}
                for offset, domain in ((0, "a"), (3, "b")):
                    fwd = forward(
                        model, union, lam, stochastic, _noise_rngs(cfg, epoch, step, offset)
                    )
                    total, sub = step_losses(model, fwd, batch_a, batch_b, domains=(domain,))
                    if not math.isfinite(sub["total"]):
                        _abort(epoch, step, lam, batch_a, batch_b, last_grad)
                    last_grad = _optimize(model, optimizer, total)
                    for key, val in sub.items():
                        parts[key] = parts.get(key, 0.0) + val
                # aux losses appear in both half-steps; average them back
                for key in ("cls1", "cls2"):
                    if key in parts:
                        parts[key] *= 0.5
            else:
                fwd = forward(model, union, lam, stochastic, _noise_rngs(cfg, epoch, step))
                total, parts = step_losses(model, fwd, batch_a, batch_b)
                if not math.isfinite(parts["total"]):
                    _abort(epoch, step, lam, batch_a, batch_b, last_grad)
                last_grad = _optimize(model, optimizer, total)

            for key in sums:
                sums[key] += parts.get(key, 0.0)

        row = {key: val / steps for key, val in sums.items()}
        row["epoch"] = epoch
        row["lambda_mean"] = lam_sum / steps
        row["cosine_clamp_events"] = ad.cosine_clamp_events()
        history.append(row)
        line = "%d\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f" % (
            epoch,
            row["total"],
            row["prd_a"],
            row["prd_b"],
            row["cls1"],
            row["cls2"],
            row["lambda_mean"],
        )
        log_lines.append(line)
        if log_sink is not None:
            log_sink.write(line + "\n")

    return TrainResult(model=model, log_lines=log_lines, history=history)


def train_model(
    split_a: SplitDataset,
    split_b: SplitDataset,
    config: RunConfig,
    log_sink=None,
) -> TrainResult:
    """Build adjacencies and a fresh model, then fit it."""
    config.validate()
    ad.reset_cosine_clamp_events()
    adjacency_a = gr.build_bipartite_adjacency(split_a.train)
    adjacency_b = gr.build_bipartite_adjacency(split_b.train)
    model = build_model(adjacency_a, adjacency_b, config)
    return fit(model, split_a, split_b, log_sink=log_sink)
