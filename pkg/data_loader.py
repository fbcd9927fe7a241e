# data_loader.py
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import DataFormatError, InvariantError

logger = logging.getLogger(__name__)

# Define constants
PAD_ID = 0
MIN_SEQUENCE_LENGTH = 3  # one training step + validation + test
REQUIRED_COLUMNS = ['user', 'item', 'timestamp']
FORMAT_SEPARATORS = {'tsv': '\t', 'csv': ',', 'ml1m': '::'}
HEADER_WORD = re.compile(r'[A-Za-z_][A-Za-z_ ]*')
BATCH_PURPOSES = ('train', 'val', 'test')


def _sniff_format(path):
    """Guess the column separator from the first non-blank line."""
    with open(path, encoding='utf-8') as handle:
        for line in handle:
            if not line.strip():
                continue
            if '::' in line:
                return 'ml1m'
            if '\t' in line:
                return 'tsv'
            return 'csv'
    return 'csv'


def _is_number(text):
    try:
        float(text)
        return True
    except (TypeError, ValueError):
        return False


def _is_header(row):
    """A first row is a header only when no field is numeric and the timestamp field is a plain word."""
    if any(_is_number(row[col]) for col in REQUIRED_COLUMNS):
        return False
    return HEADER_WORD.fullmatch(row['timestamp']) is not None


def read_interaction_frame(path, data_format='auto'):
    """
    Read a raw interaction log into a DataFrame with columns user, item, timestamp.

    The third column (the fourth for ML-1M style ``::`` files, which carry a
    rating in between) is the timestamp. A first row with no numeric field and
    a plain word as its timestamp (e.g. ``timestamp``) is a header and skipped;
    any other malformed first row is reported as a line-1 error.

    Returns tuple: (DataFrame or None, error message or None)
    """
    path = Path(path)
    if not path.exists():
        return None, f"Interaction file not found: {path}"
    if data_format == 'auto':
        data_format = _sniff_format(path)
    if data_format not in FORMAT_SEPARATORS:
        return None, f"Unknown data format '{data_format}'. Use one of: auto, {', '.join(FORMAT_SEPARATORS)}"

    try:
        raw = pd.read_csv(
            path,
            sep=FORMAT_SEPARATORS[data_format],
            header=None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
            engine='python' if data_format == 'ml1m' else 'c',
            encoding='utf-8',
        )
    except pd.errors.EmptyDataError:
        return None, "No interactions found in the input file"
    except pd.errors.ParserError as e:
        return None, f"Malformed interaction file: {str(e)}"
    except UnicodeDecodeError as e:
        return None, f"Interaction file is not valid UTF-8: {str(e)}"

    # Row index i corresponds to line i + 1 because blank lines are kept.
    raw.index = raw.index + 1
    raw = raw.fillna('')
    raw = raw[~(raw == '').all(axis=1)]
    if raw.empty:
        return None, "No interactions found in the input file"

    timestamp_col = 3 if data_format == 'ml1m' else 2
    if raw.shape[1] <= timestamp_col:
        return None, (f"Line {raw.index[0]}: expected at least {timestamp_col + 1} "
                      f"columns (user, item, timestamp), found {raw.shape[1]}")

    df = pd.DataFrame({
        'user': raw[0].str.strip(),
        'item': raw[1].str.strip(),
        'timestamp': raw[timestamp_col].str.strip(),
    })

    if _is_header(df.iloc[0]):
        df = df.iloc[1:]
        if df.empty:
            return None, "No interactions found after the header row"

    missing = df[(df[REQUIRED_COLUMNS] == '').any(axis=1)]
    if not missing.empty:
        line = missing.index[0]
        return None, f"Line {line}: missing user, item or timestamp field"

    timestamps = pd.to_numeric(df['timestamp'], errors='coerce')
    invalid = timestamps[~np.isfinite(timestamps.astype(float))]
    if not invalid.empty:
        line = invalid.index[0]
        return None, f"Line {line}: timestamp '{df.loc[line, 'timestamp']}' is not a number"
    df['timestamp'] = timestamps
    df['line'] = df.index
    return df.reset_index(drop=True), None


@dataclass(frozen=True)
class InteractionDataset:
    """Chronological item sequences per user with dense ids.

    Items are numbered 1..num_items (0 is padding); users 0..num_users-1.
    ``user_labels`` and ``item_labels`` keep the raw ids in index order
    (``item_labels[i - 1]`` is item ``i``).
    """
    num_users: int
    num_items: int
    sequences: Tuple[np.ndarray, ...]
    user_labels: Tuple[str, ...]
    item_labels: Tuple[str, ...]

    @property
    def num_interactions(self):
        return int(sum(len(s) for s in self.sequences))


def dataset_from_frame(df):
    """Build an InteractionDataset from a user/item/timestamp frame.

    Rows keep their frame order as the tie-break for equal timestamps.
    """
    missing_columns = [col for col in REQUIRED_COLUMNS if col not in df.columns]
    if missing_columns:
        raise DataFormatError(f"Missing required columns: {', '.join(missing_columns)}")
    if df.empty:
        raise DataFormatError("No interactions found")

    df = df[REQUIRED_COLUMNS].copy()
    df['user'] = df['user'].astype(str)
    df['item'] = df['item'].astype(str)
    df['order'] = np.arange(len(df))

    counts = df.groupby('user', sort=False)['item'].transform('size')
    short = df.loc[counts < MIN_SEQUENCE_LENGTH, 'user'].unique()
    if len(short) > 0:
        logger.warning(
            f"Found {len(short)} users with fewer than {MIN_SEQUENCE_LENGTH} interactions. "
            "These users will be excluded."
        )
        df = df[counts >= MIN_SEQUENCE_LENGTH]
    if df.empty:
        raise DataFormatError(
            f"No users with at least {MIN_SEQUENCE_LENGTH} interactions remain after filtering"
        )

    user_labels = tuple(pd.unique(df['user']))
    item_labels = tuple(pd.unique(df['item']))
    user_index = {label: idx for idx, label in enumerate(user_labels)}
    item_index = {label: idx + 1 for idx, label in enumerate(item_labels)}
    df['user_idx'] = df['user'].map(user_index)
    df['item_idx'] = df['item'].map(item_index)

    df = df.sort_values(['user_idx', 'timestamp', 'order'], kind='mergesort')
    grouped = df.groupby('user_idx', sort=True)['item_idx']
    sequences = tuple(np.asarray(items, dtype=np.int64) for _, items in grouped)

    return InteractionDataset(
        num_users=len(user_labels),
        num_items=len(item_labels),
        sequences=sequences,
        user_labels=user_labels,
        item_labels=item_labels,
    )


def load_interactions(path, data_format='auto'):
    """Load an interaction file, sort each user's items by time and remap ids."""
    df, error = read_interaction_frame(path, data_format)
    if error:
        raise DataFormatError(error)
    ds = dataset_from_frame(df)
    logger.info(f"Loaded {ds.num_interactions} interactions for {ds.num_users} users over {ds.num_items} items")
    return ds


def save_id_map(ds, path):
    """Write the raw -> dense id mapping as a JSON sidecar."""
    payload = {
        'users': {label: idx for idx, label in enumerate(ds.user_labels)},
        'items': {label: idx + 1 for idx, label in enumerate(ds.item_labels)},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding='utf-8')


def load_id_map(path):
    """Read a sidecar written by save_id_map. Returns (users, items) dicts."""
    try:
        payload = json.loads(Path(path).read_text(encoding='utf-8'))
        return dict(payload['users']), dict(payload['items'])
    except (OSError, ValueError, KeyError) as e:
        raise DataFormatError(f"Error loading id map {path}: {str(e)}") from e


def dataset_statistics(ds):
    """Counts plus average actions per user (UA) and per item (IA)."""
    interactions = ds.num_interactions
    return {
        'users': ds.num_users,
        'items': ds.num_items,
        'interactions': interactions,
        'avg_actions_per_user': interactions / ds.num_users if ds.num_users else 0.0,
        'avg_actions_per_item': interactions / ds.num_items if ds.num_items else 0.0,
        'density': interactions / (ds.num_users * ds.num_items) if ds.num_users and ds.num_items else 0.0,
    }


@dataclass(frozen=True)
class SplitSpec:
    """Leave-one-out split; index u holds user u's prefix and targets."""
    num_items: int
    train_prefixes: Tuple[np.ndarray, ...]
    val_targets: np.ndarray
    test_targets: np.ndarray

    @property
    def num_users(self):
        return len(self.train_prefixes)

    def history(self, user, purpose):
        """Items the model may see before predicting the given target."""
        if purpose == 'test':
            return np.append(self.train_prefixes[user], self.val_targets[user])
        return self.train_prefixes[user]


def leave_one_out_split(ds):
    """Hold out the penultimate item for validation and the last for test."""
    prefixes = []
    for user, seq in enumerate(ds.sequences):
        if len(seq) < MIN_SEQUENCE_LENGTH:
            raise InvariantError(
                f"user {user} has {len(seq)} interactions; leave-one-out needs at least {MIN_SEQUENCE_LENGTH}"
            )
        prefixes.append(seq[:-2].copy())
    return SplitSpec(
        num_items=ds.num_items,
        train_prefixes=tuple(prefixes),
        val_targets=np.array([seq[-2] for seq in ds.sequences], dtype=np.int64),
        test_targets=np.array([seq[-1] for seq in ds.sequences], dtype=np.int64),
    )


@dataclass(frozen=True)
class SequenceBatch:
    """Left-padded input windows with one next-item target per row."""
    item_ids: np.ndarray   # B x N, 0 = padding
    positions: np.ndarray  # N, values 1..N
    targets: np.ndarray    # B
    lengths: np.ndarray    # B, real items per row
    users: np.ndarray      # B

    def __len__(self):
        return len(self.targets)


@dataclass(frozen=True)
class ExampleSet:
    """All (window, target) rows for one purpose before batching."""
    item_ids: np.ndarray
    targets: np.ndarray
    lengths: np.ndarray
    users: np.ndarray

    def __len__(self):
        return len(self.targets)


def _left_pad(items, max_seq_len):
    row = np.zeros(max_seq_len, dtype=np.int64)
    window = items[-max_seq_len:]
    if len(window):
        row[max_seq_len - len(window):] = window
    return row, len(window)


def build_examples(split, max_seq_len, purpose, sliding_windows=False):
    """
    Turn a split into padded (window, target) rows.

    train: the window before the last prefix item predicts that item (every
    position predicts its successor when ``sliding_windows`` is on).
    val: the full prefix predicts the validation target.
    test: prefix plus validation target predicts the test target.
    """
    if max_seq_len < 1:
        raise DataFormatError(f"max_seq_len must be at least 1, got {max_seq_len}")
    if purpose not in BATCH_PURPOSES:
        raise DataFormatError(f"purpose must be one of {BATCH_PURPOSES}, got '{purpose}'")

    rows, targets, lengths, users = [], [], [], []

    def _emit(user, history, target):
        row, length = _left_pad(history, max_seq_len)
        rows.append(row)
        targets.append(target)
        lengths.append(length)
        users.append(user)

    skipped = 0
    for user, prefix in enumerate(split.train_prefixes):
        if purpose == 'train':
            if len(prefix) < 2:
                skipped += 1
                continue
            cuts = range(1, len(prefix)) if sliding_windows else (len(prefix) - 1,)
            for cut in cuts:
                _emit(user, prefix[:cut], prefix[cut])
        elif purpose == 'val':
            _emit(user, prefix, split.val_targets[user])
        else:
            _emit(user, split.history(user, 'test'), split.test_targets[user])

    if skipped:
        logger.warning(
            f"Found {skipped} users whose training prefix has a single item. "
            "These users will not contribute training pairs."
        )

    width = (len(rows), max_seq_len)
    return ExampleSet(
        item_ids=np.array(rows, dtype=np.int64).reshape(width),
        targets=np.array(targets, dtype=np.int64),
        lengths=np.array(lengths, dtype=np.int64),
        users=np.array(users, dtype=np.int64),
    )


def batches_from_examples(examples, batch_size, rng=None):
    """Cut an ExampleSet into batches; ``rng`` shuffles row order when given."""
    if batch_size < 1:
        raise DataFormatError(f"batch_size must be at least 1, got {batch_size}")
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    max_seq_len = examples.item_ids.shape[1]
    positions = np.arange(1, max_seq_len + 1, dtype=np.int64)
    batches: List[SequenceBatch] = []
    for start in range(0, len(order), batch_size):
        rows = order[start:start + batch_size]
        batches.append(SequenceBatch(
            item_ids=examples.item_ids[rows],
            positions=positions,
            targets=examples.targets[rows],
            lengths=examples.lengths[rows],
            users=examples.users[rows],
        ))
    return batches


def make_batches(split, max_seq_len, batch_size, purpose, rng: Optional[np.random.Generator] = None,
                 sliding_windows=False):
    """Padded batches for one pass; training order is a seeded permutation."""
    examples = build_examples(split, max_seq_len, purpose, sliding_windows)
    return batches_from_examples(examples, batch_size, rng if purpose == 'train' else None)
