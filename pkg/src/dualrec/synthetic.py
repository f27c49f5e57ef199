"""Synthetic two-domain interaction generator with planted latent factors.

Each user carries three kinds of preference signal: a shared factor that
drives items in both domains through aligned projections, a per-domain
specific factor, and an independent factor that reaches both domains only
through a different random orthogonal projection per domain. Interaction
probabilities are sigmoids of the summed affinities, with the bias per
domain calibrated by bisection so the expected interaction rate matches the
requested one. The generated data then goes through the same binarization,
filtering, and alignment as real data.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit

from .data import (
    AlignmentError,
    DatasetError,
    EmptyDatasetError,
    InteractionSet,
    RawRating,
    align_common_users,
    binarize_and_filter,
)


class GenerationError(DatasetError):
    pass


@dataclass
class SyntheticSpec:
    num_users: int = 500
    num_items_a: int = 800
    num_items_b: int = 600
    latent_dim: int = 8
    shared_strength: float = 3.0
    specific_strength: float = 0.8
    independent_strength: float = 0.8
    rate_a: float = 0.025
    rate_b: float = 0.018
    min_count: int = 5
    seed: int = 0

    def validate(self) -> None:
        if min(self.num_users, self.num_items_a, self.num_items_b, self.latent_dim) <= 0:
            raise ValueError("counts and latent_dim must be positive")
        if min(self.shared_strength, self.specific_strength, self.independent_strength) < 0:
            raise ValueError("strengths must be >= 0")
        for rate in (self.rate_a, self.rate_b):
            if not 0.0 < rate < 1.0:
                raise ValueError("interaction rates must lie in (0, 1)")


_INT_FIELDS = ("num_users", "num_items_a", "num_items_b", "latent_dim", "min_count", "seed")


def parse_spec_text(text: str) -> SyntheticSpec:
    """Parse ``key = value`` lines into a SyntheticSpec; unknown keys error."""
    from .config import ConfigError

    values = {f.name: getattr(SyntheticSpec(), f.name) for f in fields(SyntheticSpec)}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in values:
            raise ConfigError(f"line {line_no}: unknown spec key {key!r}")
        try:
            values[key] = int(raw) if key in _INT_FIELDS else float(raw)
        except ValueError as exc:
            raise ConfigError(f"line {line_no}: {exc}") from exc
    spec = SyntheticSpec(**values)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def _random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _unit_rows(m: np.ndarray) -> np.ndarray:
    # User factors are directions only: unit rows keep the expected degree
    # uniform across users, so min-count filtering does not select a dense
    # core whose sparse domain is no longer sparse.
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _calibrate_bias(logits: np.ndarray, rate: float) -> float:
    """Bisection on b such that mean(sigmoid(logits + b)) == rate."""
    lo, hi = -30.0, 30.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        p = expit(logits + mid)
        if p.mean() < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _domain_logits(
    spec: SyntheticSpec,
    rng: np.random.Generator,
    shared: np.ndarray,
    specific: np.ndarray,
    independent: np.ndarray,
    num_items: int,
) -> np.ndarray:
    d = spec.latent_dim
    q_sha = rng.standard_normal((num_items, d)) / np.sqrt(d)
    q_spe = rng.standard_normal((num_items, d)) / np.sqrt(d)
    q_ind = rng.standard_normal((num_items, d)) / np.sqrt(d)
    proj = _random_orthogonal(d, rng)
    logits = spec.shared_strength * (shared @ q_sha.T)
    logits += spec.specific_strength * (specific @ q_spe.T)
    logits += spec.independent_strength * ((independent @ proj) @ q_ind.T)
    return logits


def generate_synthetic(spec: SyntheticSpec, rng=None) -> tuple[InteractionSet, InteractionSet]:
    """Generate aligned, filtered two-domain interaction sets."""
    spec.validate()
    if rng is None:
        rng = np.random.default_rng([spec.seed, 100])
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    d = spec.latent_dim
    shared = _unit_rows(rng.standard_normal((spec.num_users, d)))
    independent = _unit_rows(rng.standard_normal((spec.num_users, d)))
    specific_a = _unit_rows(rng.standard_normal((spec.num_users, d)))
    specific_b = _unit_rows(rng.standard_normal((spec.num_users, d)))

    raw: dict[str, list[RawRating]] = {}
    for domain, specific, num_items, rate in (
        ("a", specific_a, spec.num_items_a, spec.rate_a),
        ("b", specific_b, spec.num_items_b, spec.rate_b),
    ):
        logits = _domain_logits(spec, rng, shared, specific, independent, num_items)
        bias = _calibrate_bias(logits, rate)
        prob = expit(logits + bias)
        hits = rng.random(prob.shape) < prob
        users, items = np.nonzero(hits)
        raw[domain] = [
            RawRating(f"u{u}", f"{domain}{i}", 1.0) for u, i in zip(users, items)
        ]

    try:
        set_a = binarize_and_filter(raw["a"], spec.min_count)
        set_b = binarize_and_filter(raw["b"], spec.min_count)
        return align_common_users(set_a, set_b)
    except (EmptyDatasetError, AlignmentError) as exc:
        raise GenerationError(f"synthetic spec produced unusable data: {exc}") from exc
