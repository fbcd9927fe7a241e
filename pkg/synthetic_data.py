# synthetic_data.py
"""First-order Markov interaction logs for toy-scale experiments."""
import logging

import numpy as np
import pandas as pd

from errors import ConfigError

logger = logging.getLogger(__name__)

SUCCESSORS_PER_ITEM = 3
SUCCESSOR_WEIGHTS = np.array([0.5, 0.3, 0.2])
FOLLOW_PROBABILITY = 0.9


def generate_markov_interactions(n_users, n_items, min_len, max_len, seed,
                                 follow_probability=FOLLOW_PROBABILITY):
    """
    Simulate users walking a sparse item transition graph.

    Each item gets a fixed set of successors holding most of the transition
    mass; with probability ``1 - follow_probability`` the next item is drawn
    uniformly instead. Items are labelled 1..n_items and users 1..n_users,
    timestamps increase by one per step.

    Returns:
        DataFrame with columns user, item, timestamp.
    """
    if n_users < 1 or n_items < 2:
        raise ConfigError(f"synthetic data needs at least 1 user and 2 items, got {n_users} and {n_items}")
    if not 3 <= min_len <= max_len:
        raise ConfigError(f"synthetic sequence lengths must satisfy 3 <= min_len <= max_len, got {min_len}, {max_len}")
    if not 0.0 <= follow_probability <= 1.0:
        raise ConfigError(f"follow_probability must lie in [0, 1], got {follow_probability}")

    rng = np.random.default_rng(seed)
    n_successors = min(SUCCESSORS_PER_ITEM, n_items - 1)
    weights = SUCCESSOR_WEIGHTS[:n_successors] / SUCCESSOR_WEIGHTS[:n_successors].sum()
    successors = np.empty((n_items, n_successors), dtype=np.int64)
    for item in range(n_items):
        others = np.delete(np.arange(n_items), item)
        successors[item] = rng.choice(others, size=n_successors, replace=False)

    users, items, stamps = [], [], []
    for user in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        current = int(rng.integers(n_items))
        start = int(rng.integers(0, 1_000_000))
        for step in range(length):
            users.append(user + 1)
            items.append(current + 1)
            stamps.append(start + step)
            if rng.random() < follow_probability:
                current = int(successors[current, rng.choice(n_successors, p=weights)])
            else:
                current = int(rng.integers(n_items))

    df = pd.DataFrame({'user': users, 'item': items, 'timestamp': stamps})
    logger.info(f"Generated {len(df)} synthetic interactions for {n_users} users over {n_items} items")
    return df


def write_interactions(df, path):
    """Write a user/item/timestamp frame as a header-less TSV file."""
    df[['user', 'item', 'timestamp']].to_csv(path, sep='\t', header=False, index=False)
