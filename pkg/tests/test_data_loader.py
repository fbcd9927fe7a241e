# test_data_loader.py
import logging

import numpy as np
import pandas as pd
import pytest

from data_loader import (
    InteractionDataset,
    build_examples,
    dataset_from_frame,
    dataset_statistics,
    leave_one_out_split,
    load_id_map,
    load_interactions,
    make_batches,
    read_interaction_frame,
    save_id_map,
)
from errors import DataFormatError, InvariantError


def _dataset(*sequences):
    num_items = int(max(max(s) for s in sequences))
    return InteractionDataset(
        num_users=len(sequences),
        num_items=num_items,
        sequences=tuple(np.asarray(s, dtype=np.int64) for s in sequences),
        user_labels=tuple(str(u) for u in range(len(sequences))),
        item_labels=tuple(str(i) for i in range(1, num_items + 1)),
    )


class TestReadInteractionFrame:
    def test_sorts_each_user_by_timestamp(self, tmp_path):
        path = tmp_path / 'log.tsv'
        path.write_text('u1\ta\t3\nu1\tb\t1\nu1\tc\t2\n')
        ds = load_interactions(path)
        assert ds.num_users == 1
        assert ds.item_labels == ('a', 'b', 'c')
        np.testing.assert_array_equal(ds.sequences[0], [2, 3, 1])

    def test_equal_timestamps_keep_file_order(self, tmp_path):
        path = tmp_path / 'log.tsv'
        path.write_text('u\tx\t5\nu\ty\t5\nu\tz\t4\n')
        ds = load_interactions(path)
        np.testing.assert_array_equal(ds.sequences[0], [3, 1, 2])

    def test_drops_short_users_with_warning(self, tmp_path, caplog):
        path = tmp_path / 'log.csv'
        path.write_text('1,10,1\n1,11,2\n1,12,3\n2,10,1\n2,11,2\n')
        with caplog.at_level(logging.WARNING):
            ds = load_interactions(path, 'csv')
        assert ds.num_users == 1
        assert ds.user_labels == ('1',)
        assert 'Found 1 users with fewer than 3 interactions' in caplog.text

    def test_header_row_is_skipped(self, tmp_path):
        path = tmp_path / 'log.csv'
        path.write_text('user,item,timestamp\n7,1,1\n7,2,2\n7,3,3\n')
        df, error = read_interaction_frame(path)
        assert error is None
        assert len(df) == 3
        assert list(df['line']) == [2, 3, 4]

    @pytest.mark.parametrize('first', ['7,1,12x', '7,1,abc', 'u7,i1,2021-01-01'])
    def test_malformed_first_row_is_not_a_header(self, tmp_path, first):
        path = tmp_path / 'log.csv'
        path.write_text(f'{first}\n7,2,2\n7,3,3\n')
        df, error = read_interaction_frame(path)
        assert df is None
        assert error.startswith('Line 1: timestamp')

    def test_named_string_header_is_skipped(self, tmp_path):
        path = tmp_path / 'log.tsv'
        path.write_text('user_id\titem_id\tunix time\nu7\ti1\t1\nu7\ti2\t2\n')
        df, error = read_interaction_frame(path)
        assert error is None
        assert list(df['line']) == [2, 3]

    def test_ml1m_layout(self, tmp_path):
        path = tmp_path / 'ratings.dat'
        path.write_text('1::1193::5::978300760\n1::661::3::978302109\n1::914::3::978301968\n')
        ds = load_interactions(path)
        assert ds.item_labels == ('1193', '661', '914')
        np.testing.assert_array_equal(ds.sequences[0], [1, 3, 2])

    def test_bad_timestamp_reports_line(self, tmp_path):
        path = tmp_path / 'log.tsv'
        path.write_text('1\t10\t100\n1\t11\t101\n1\t12\tabc\n')
        df, error = read_interaction_frame(path)
        assert df is None
        assert error.startswith('Line 3:')
        with pytest.raises(DataFormatError, match='Line 3'):
            load_interactions(path)

    def test_missing_field_reports_line(self, tmp_path):
        path = tmp_path / 'log.tsv'
        path.write_text('1\t10\t100\n1\t11\n1\t12\t102\n')
        _, error = read_interaction_frame(path)
        assert error.startswith('Line 2:')

    def test_empty_file(self, tmp_path):
        path = tmp_path / 'empty.tsv'
        path.write_text('')
        with pytest.raises(DataFormatError):
            load_interactions(path)

    def test_missing_file(self, tmp_path):
        df, error = read_interaction_frame(tmp_path / 'nope.tsv')
        assert df is None
        assert 'not found' in error

    def test_unknown_format(self, tmp_path):
        path = tmp_path / 'log.tsv'
        path.write_text('1\t1\t1\n')
        _, error = read_interaction_frame(path, 'parquet')
        assert 'Unknown data format' in error

    def test_all_users_too_short(self):
        frame = pd.DataFrame({'user': [1, 1], 'item': [1, 2], 'timestamp': [1, 2]})
        with pytest.raises(DataFormatError):
            dataset_from_frame(frame)


class TestIdMapAndStatistics:
    def test_id_map_sidecar(self, tmp_path, toy_dataset):
        save_id_map(toy_dataset, tmp_path / 'id_map.json')
        users, items = load_id_map(tmp_path / 'id_map.json')
        assert len(users) == toy_dataset.num_users
        assert sorted(items.values()) == list(range(1, toy_dataset.num_items + 1))
        assert items[toy_dataset.item_labels[0]] == 1

    def test_statistics(self):
        stats = dataset_statistics(_dataset([1, 2, 3, 4], [2, 3, 1]))
        assert stats['users'] == 2
        assert stats['items'] == 4
        assert stats['interactions'] == 7
        assert stats['avg_actions_per_user'] == 3.5
        assert stats['avg_actions_per_item'] == 1.75
        assert stats['density'] == 7 / 8


class TestLeaveOneOutSplit:
    def test_five_items(self):
        split = leave_one_out_split(_dataset([1, 2, 3, 4, 5]))
        np.testing.assert_array_equal(split.train_prefixes[0], [1, 2, 3])
        assert split.val_targets[0] == 4
        assert split.test_targets[0] == 5

    def test_minimal_sequence(self):
        split = leave_one_out_split(_dataset([1, 2, 3]))
        np.testing.assert_array_equal(split.train_prefixes[0], [1])
        assert (split.val_targets[0], split.test_targets[0]) == (2, 3)

    def test_one_val_and_one_test_target_per_user(self, toy_dataset, toy_split):
        assert len(toy_split.val_targets) == len(toy_split.test_targets) == toy_dataset.num_users

    def test_reconstruction(self, toy_dataset, toy_split):
        for user, seq in enumerate(toy_dataset.sequences):
            rebuilt = np.concatenate([toy_split.train_prefixes[user],
                                      [toy_split.val_targets[user], toy_split.test_targets[user]]])
            np.testing.assert_array_equal(rebuilt, seq)

    def test_short_sequence_is_an_invariant_violation(self):
        with pytest.raises(InvariantError):
            leave_one_out_split(_dataset([1, 2, 3], [1, 2]))


class TestBatches:
    def test_recency_truncation(self):
        split = leave_one_out_split(_dataset([1, 2, 3, 4, 5, 6, 7]))
        (val,) = make_batches(split, 3, 8, 'val')
        np.testing.assert_array_equal(val.item_ids[0], [3, 4, 5])
        assert val.targets[0] == 6
        (train,) = make_batches(split, 3, 8, 'train', np.random.default_rng(0))
        np.testing.assert_array_equal(train.item_ids[0], [2, 3, 4])
        assert train.targets[0] == 5

    def test_left_padding(self):
        split = leave_one_out_split(_dataset([1, 2, 3, 4]))
        (val,) = make_batches(split, 4, 8, 'val')
        np.testing.assert_array_equal(val.item_ids[0], [0, 0, 1, 2])
        assert val.lengths[0] == 2
        np.testing.assert_array_equal(val.positions, [1, 2, 3, 4])

    def test_test_rows_include_validation_target(self):
        split = leave_one_out_split(_dataset([1, 2, 3, 4]))
        (test,) = make_batches(split, 4, 8, 'test')
        np.testing.assert_array_equal(test.item_ids[0], [0, 1, 2, 3])
        assert test.targets[0] == 4

    def test_same_seed_same_order(self, toy_split):
        first = make_batches(toy_split, 5, 7, 'train', np.random.default_rng(3))
        second = make_batches(toy_split, 5, 7, 'train', np.random.default_rng(3))
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.users, b.users)
            np.testing.assert_array_equal(a.item_ids, b.item_ids)

    def test_eval_order_is_fixed(self, toy_split):
        batches = make_batches(toy_split, 5, 7, 'val', np.random.default_rng(3))
        users = np.concatenate([b.users for b in batches])
        np.testing.assert_array_equal(users, np.arange(toy_split.num_users))

    def test_single_item_prefix_gives_no_training_pair(self, caplog):
        split = leave_one_out_split(_dataset([1, 2, 3], [1, 2, 3, 4]))
        with caplog.at_level(logging.WARNING):
            examples = build_examples(split, 4, 'train')
        assert len(examples) == 1
        assert 'Found 1 users whose training prefix has a single item' in caplog.text

    @pytest.mark.parametrize('sliding', [False, True])
    def test_no_target_leakage(self, sliding):
        sequences = ([1, 2, 3, 4, 5, 6], [7, 8, 9, 10, 11])
        ds = _dataset(*sequences)
        split = leave_one_out_split(ds)
        examples = build_examples(split, 3, 'train', sliding_windows=sliding)
        for row, target, user in zip(examples.item_ids, examples.targets, examples.users):
            seq = list(ds.sequences[user])
            target_pos = seq.index(target)
            inputs = [seq.index(i) for i in row if i != 0]
            assert all(pos < target_pos for pos in inputs)
            assert inputs == list(range(target_pos - len(inputs), target_pos))

    def test_sliding_windows_emit_every_prefix_position(self):
        split = leave_one_out_split(_dataset([1, 2, 3, 4, 5, 6]))
        assert len(build_examples(split, 3, 'train', sliding_windows=True)) == 3
        assert len(build_examples(split, 3, 'train')) == 1

    def test_batch_size_splits_rows(self, toy_split):
        batches = make_batches(toy_split, 5, 16, 'val')
        assert [len(b) for b in batches] == [16, 16, toy_split.num_users - 32]

    def test_invalid_purpose(self, toy_split):
        with pytest.raises(DataFormatError):
            make_batches(toy_split, 5, 16, 'holdout')
