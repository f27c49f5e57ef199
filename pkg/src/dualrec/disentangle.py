"""Disentanglement encoder, domain classifier, and the two supervision losses.

Each input branch passes through an FC+ReLU trunk and two reparameterized
heads. Head 1 yields the domain-independent (or, on the augmented branch,
domain-shared) code; head 2 yields the domain-specific code. A single
classifier is shared across branches: the specific codes are trained to be
identifiable, the independent and shared codes to be indistinguishable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value

LABEL_A = (1.0, 0.0)
LABEL_B = (0.0, 1.0)
LABEL_UNIFORM = (0.5, 0.5)

# Centers log sigma so sampling starts near-deterministic; training widens it
# where the data supports it.
SIGMA_BIAS_INIT = -2.0


@dataclass
class HeadWeights:
    w_mu: Value
    b_mu: Value
    w_sigma: Value
    b_sigma: Value


@dataclass
class DisentangleWeights:
    w0: Value
    b0: Value
    head1: HeadWeights
    head2: HeadWeights


@dataclass
class DomainClassifier:
    w: Value
    b: Value


@dataclass
class EncodeResult:
    """Codes plus the distribution parameters behind them (needed by the
    ELBO objective)."""

    z1: Value
    z2: Value
    mu1: Value
    log_sigma1: Value
    mu2: Value
    log_sigma2: Value


def init_disentangle_weights(
    in_width: int, k: int, rng: np.random.Generator, std: float = 0.01
) -> DisentangleWeights:
    hidden = 2 * k

    def head() -> HeadWeights:
        return HeadWeights(
            w_mu=Value(rng.normal(0.0, std, size=(hidden, k))),
            b_mu=Value(rng.normal(0.0, std, size=(1, k))),
            w_sigma=Value(rng.normal(0.0, std, size=(hidden, k))),
            b_sigma=Value(rng.normal(SIGMA_BIAS_INIT, std, size=(1, k))),
        )

    return DisentangleWeights(
        w0=Value(rng.normal(0.0, std, size=(in_width, hidden))),
        b0=Value(rng.normal(0.0, std, size=(1, hidden))),
        head1=head(),
        head2=head(),
    )


def init_domain_classifier(k: int, rng: np.random.Generator, std: float = 0.01) -> DomainClassifier:
    return DomainClassifier(
        w=Value(rng.normal(0.0, std, size=(k, 2))),
        b=Value(rng.normal(0.0, std, size=(1, 2))),
    )


def encode(
    e: Value,
    weights: DisentangleWeights,
    rng: np.random.Generator | None = None,
    stochastic: bool = False,
) -> EncodeResult:
    """Two reparameterized codes from one branch input."""
    if stochastic and rng is None:
        raise ValueError("stochastic encoding requires an rng")
    h = ad.relu(ad.affine(e, weights.w0, weights.b0))

    def run_head(head: HeadWeights) -> tuple[Value, Value, Value]:
        mu = ad.affine(h, head.w_mu, head.b_mu)
        log_sigma = ad.clamp(
            ad.affine(h, head.w_sigma, head.b_sigma),
            -ad.LOG_SIGMA_BOUND,
            ad.LOG_SIGMA_BOUND,
        )
        if stochastic:
            eps = rng.standard_normal(mu.shape)
            z = ad.add(mu, ad.mul_const(ad.exp(log_sigma), eps))
        else:
            z = mu
        return z, mu, log_sigma

    z1, mu1, ls1 = run_head(weights.head1)
    z2, mu2, ls2 = run_head(weights.head2)
    return EncodeResult(z1=z1, z2=z2, mu1=mu1, log_sigma1=ls1, mu2=mu2, log_sigma2=ls2)


def classify_domain(z: Value, classifier: DomainClassifier) -> Value:
    return ad.softmax_rows(ad.affine(z, classifier.w, classifier.b))


def _label_rows(m: int, label: tuple[float, float]) -> np.ndarray:
    return np.tile(np.asarray(label, dtype=np.float64), (m, 1))


def loss_cls1(
    z_spe_a: Value,
    z_spe_b: Value,
    z_spe_aug: Value,
    lam: float,
    classifier: DomainClassifier,
) -> Value:
    """Domain-classification loss over the specific codes.

    The augmented branch is supervised with both domain labels, weighted by
    the mixing coefficient and its complement.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    p_a = classify_domain(z_spe_a, classifier)
    p_b = classify_domain(z_spe_b, classifier)
    p_aug = classify_domain(z_spe_aug, classifier)
    term_a = ad.cross_entropy(p_a, _label_rows(z_spe_a.shape[0], LABEL_A))
    term_b = ad.cross_entropy(p_b, _label_rows(z_spe_b.shape[0], LABEL_B))
    term_aug_a = ad.cross_entropy(p_aug, _label_rows(z_spe_aug.shape[0], LABEL_A))
    term_aug_b = ad.cross_entropy(p_aug, _label_rows(z_spe_aug.shape[0], LABEL_B))
    total = ad.add(
        ad.add(term_a, term_b),
        ad.add(ad.mul_const(term_aug_a, lam), ad.mul_const(term_aug_b, 1.0 - lam)),
    )
    return ad.mul_const(total, 1.0 / 3.0)


def loss_cls2(
    z_ind_a: Value,
    z_ind_b: Value,
    z_sha_aug: Value,
    classifier: DomainClassifier,
) -> Value:
    """KL pressure toward domain indistinguishability on independent/shared codes."""
    total = None
    for z in (z_ind_a, z_ind_b, z_sha_aug):
        p = classify_domain(z, classifier)
        term = ad.kl_div(_label_rows(z.shape[0], LABEL_UNIFORM), p)
        total = term if total is None else ad.add(total, term)
    return ad.mul_const(total, 1.0 / 3.0)
