"""Leave-one-out ranking evaluation with pessimistic tie handling.

One deterministic forward pass freezes every user and item representation,
after which each test user is scored against their frozen candidate set in
plain numpy. Ties rank the held-out item last within its tie class, so a
degenerate model that scores everything equally earns rank 1000, not rank 1.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import NORM_EPS
from .config import RunConfig, config_lines
from .data import ProtocolError, SplitDataset
from .model import ModelState, forward, item_representations

EVAL_LAMBDA = 0.5  # midpoint interpolation for the deterministic eval path


def rank_with_ties(neg_scores: np.ndarray, pos_score: float) -> int:
    """1-based rank of the held-out item, placed last among equal scores."""
    neg = np.asarray(neg_scores, dtype=np.float64)
    return int(1 + (neg > pos_score).sum() + (neg == pos_score).sum())


def metrics_at_k(rank: int, k: int) -> tuple[float, float]:
    if rank <= k:
        return 1.0, float(1.0 / np.log2(rank + 1))
    return 0.0, 0.0


@dataclass
class DomainMetrics:
    hr: float
    ndcg: float
    num_test: int
    ranks: dict[int, int]


@dataclass
class EvalReport:
    domain_a: DomainMetrics
    domain_b: DomainMetrics
    seed: int
    wallclock_s: float
    config: RunConfig

    def to_text(self) -> str:
        lines = [
            f"hr_a = {self.domain_a.hr:.6f}",
            f"ndcg_a = {self.domain_a.ndcg:.6f}",
            f"hr_b = {self.domain_b.hr:.6f}",
            f"ndcg_b = {self.domain_b.ndcg:.6f}",
            f"num_test_a = {self.domain_a.num_test}",
            f"num_test_b = {self.domain_b.num_test}",
            f"seed = {self.seed}",
            f"wallclock_s = {self.wallclock_s:.3f}",
        ]
        lines.extend(f"config.{line}" for line in config_lines(self.config))
        for tag, dm in (("a", self.domain_a), ("b", self.domain_b)):
            body = ",".join(f"{u}:{r}" for u, r in sorted(dm.ranks.items()))
            lines.append(f"ranks_{tag} = {body}")
        return "\n".join(lines) + "\n"


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, NORM_EPS)


def _rank_users(
    s_hat: np.ndarray,
    t_hat: np.ndarray,
    entries: list[tuple[int, int]],
    candidates: dict[int, list[int]],
) -> list[tuple[int, int]]:
    out = []
    for u, held in entries:
        cand = np.asarray(candidates[u], dtype=np.int64)
        user_vec = s_hat[u]
        neg_scores = t_hat[cand] @ user_vec
        pos_score = float(t_hat[held] @ user_vec)
        out.append((u, rank_with_ties(neg_scores, pos_score)))
    return out


def evaluate_domain(
    s: np.ndarray,
    t: np.ndarray,
    split: SplitDataset,
    top_k: int,
    threads: int = 1,
) -> DomainMetrics:
    if split.eval_candidates is None:
        raise ProtocolError("evaluation requires frozen candidate lists")
    s_hat = _normalize_rows(s)
    t_hat = _normalize_rows(t)
    entries = list(split.test)
    if threads <= 1 or len(entries) <= 1:
        ranked = _rank_users(s_hat, t_hat, entries, split.eval_candidates)
    else:
        chunks = [list(c) for c in np.array_split(np.arange(len(entries)), threads) if c.size]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(
                    _rank_users,
                    s_hat,
                    t_hat,
                    [entries[i] for i in chunk],
                    split.eval_candidates,
                )
                for chunk in chunks
            ]
            ranked = [pair for future in futures for pair in future.result()]
    ranks = dict(ranked)
    hr_sum = 0.0
    ndcg_sum = 0.0
    for _, rank in ranked:
        hr, ndcg = metrics_at_k(rank, top_k)
        hr_sum += hr
        ndcg_sum += ndcg
    n = max(1, len(ranked))
    return DomainMetrics(hr=hr_sum / n, ndcg=ndcg_sum / n, num_test=len(ranked), ranks=ranks)


def model_representations(
    model: ModelState,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic user/item representations (s_a, t_a, s_b, t_b)."""
    num_users = model.adjacency_a.num_users
    fwd = forward(model, np.arange(num_users), EVAL_LAMBDA, stochastic=False)
    t_a = item_representations(fwd, model, "a")
    t_b = item_representations(fwd, model, "b")
    return fwd.s_a.data, t_a.data, fwd.s_b.data, t_b.data


def evaluate_model(
    model: ModelState,
    split_a: SplitDataset,
    split_b: SplitDataset,
) -> EvalReport:
    start = time.perf_counter()
    cfg = model.config
    s_a, t_a, s_b, t_b = model_representations(model)
    dm_a = evaluate_domain(s_a, t_a, split_a, cfg.top_k, cfg.eval_threads)
    dm_b = evaluate_domain(s_b, t_b, split_b, cfg.top_k, cfg.eval_threads)
    return EvalReport(
        domain_a=dm_a,
        domain_b=dm_b,
        seed=cfg.seed,
        wallclock_s=time.perf_counter() - start,
        config=cfg,
    )
