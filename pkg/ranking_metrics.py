# ranking_metrics.py
"""Leave-one-out ranking metrics over the full item vocabulary."""
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from data_loader import batches_from_examples, build_examples
from errors import DataFormatError

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 1024


@dataclass(frozen=True)
class MetricsReport:
    recall_at_k: float
    mrr_at_k: float
    ndcg_at_k: float
    k: int
    count: int

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def rank_items(logits, excluded=()):
    """Item ids (1-based) by descending logit, ties by ascending id; padding never ranked."""
    logits = np.asarray(logits, dtype=float)
    ids = np.arange(1, len(logits) + 1)
    order = np.lexsort((ids, -logits))
    ranked = ids[order]
    excluded = set(int(i) for i in excluded) | {0}
    return [int(i) for i in ranked if int(i) not in excluded]


def metrics_at_k(rank, k):
    """(recall, mrr, ndcg) contribution of one target at 1-based ``rank``."""
    if rank < 1:
        raise DataFormatError(f"rank must be at least 1, got {rank}")
    if rank > k:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / rank, math.log(2) / math.log(rank + 1)


def target_ranks(logits, targets):
    """
    Rank of each row's target: 1 + #(higher logit) + #(equal logit, smaller id).

    Args:
        logits: B x |V| array, column v-1 scores item v
        targets: B item ids
    """
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    target_logits = logits[rows, targets - 1][:, None]
    ids = np.arange(1, logits.shape[1] + 1)[None, :]
    higher = np.sum(logits > target_logits, axis=1)
    tied_before = np.sum((logits == target_logits) & (ids < targets[:, None]), axis=1)
    return 1 + higher + tied_before


def report_from_ranks(ranks, k):
    contributions = np.array([metrics_at_k(int(r), k) for r in ranks]).reshape(-1, 3)
    count = len(contributions)
    if count == 0:
        return MetricsReport(0.0, 0.0, 0.0, k, 0)
    recall, mrr, ndcg = (float(v) for v in contributions.sum(axis=0) / count)
    return MetricsReport(recall, mrr, ndcg, k, count)


def evaluate_model(model, split, k=10, purpose='test', max_seq_len=200, batch_size=EVAL_BATCH_SIZE,
                   exclude_history=False):
    """
    Score every user's held-out item and average the ranking metrics.

    ``model`` needs ``score(item_ids) -> B x |V| array``. With
    ``exclude_history`` the user's earlier items (other than the target
    itself) are removed from the ranking.
    """
    if purpose not in ('val', 'test'):
        raise DataFormatError(f"evaluation purpose must be 'val' or 'test', got '{purpose}'")
    examples = build_examples(split, max_seq_len, purpose)
    ranks = []
    for batch in batches_from_examples(examples, batch_size):
        logits = np.array(model.score(batch.item_ids), dtype=float)
        if logits.shape != (len(batch), split.num_items):
            raise DataFormatError(
                f"model returned scores of shape {logits.shape}, expected {(len(batch), split.num_items)}"
            )
        if exclude_history:
            for row, user in enumerate(batch.users):
                seen = np.unique(split.history(user, purpose))
                seen = seen[(seen != batch.targets[row]) & (seen > 0)]
                logits[row, seen - 1] = -np.inf
        ranks.append(target_ranks(logits, batch.targets))
    ranks = np.concatenate(ranks) if ranks else np.array([], dtype=np.int64)
    return report_from_ranks(ranks, k)


class PopularityModel:
    """Ranks every item by its training frequency, whatever the input window."""

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=float)

    def score(self, item_ids):
        return np.tile(self.counts, (len(item_ids), 1))


def popularity_baseline(split):
    """Count item occurrences in the training prefixes."""
    counts = np.zeros(split.num_items + 1)
    for prefix in split.train_prefixes:
        np.add.at(counts, prefix, 1.0)
    if counts.sum() == 0:
        raise DataFormatError("popularity baseline needs at least one training interaction")
    return PopularityModel(counts[1:])
