import os

import pytest

from alive.datamodel import RecordValidationError, Review, RewardRecord, StepMetrics
from alive.store import RecordStore, StoreWriteError, append_record, iter_envelopes, read_records


class TestRecordStore:
    def test_offsets_increase_and_roundtrip(self, tmp_path):
        path = tmp_path / 'rewards.jsonl'
        review = Review('r1', 'analysis', 'Check step two.', 0.7, reviewer_kind='self')
        reward = RewardRecord('r1', 'solver_soft', 0.7)
        with RecordStore(path) as store:
            o1 = append_record(store, review)
            o2 = append_record(store, reward)
        assert (o1, o2) == (0, 1)
        assert read_records(path) == [(0, review), (1, reward)]

    def test_invalid_record_rejected_before_write(self, tmp_path):
        path = tmp_path / 'trajectories.jsonl'
        with RecordStore(path) as store:
            with pytest.raises(RecordValidationError) as e:
                store.append(Review('r1', 'a', 'c', 1.2))
            assert e.value.field == 'soft_score'
        assert read_records(path) == []

    def test_reopen_continues_offsets(self, tmp_path):
        path = tmp_path / 'metrics.jsonl'
        with RecordStore(path) as store:
            store.append(StepMetrics(1, 0.5, 1.0))
        with RecordStore(path) as store:
            assert store.append(StepMetrics(2, 0.5, 1.0)) == 1

    def test_torn_trailing_line_ignored(self, tmp_path):
        path = tmp_path / 'metrics.jsonl'
        with RecordStore(path) as store:
            store.append(StepMetrics(1, 0.5, 1.0))
        with open(path, 'a') as f:
            f.write('{"kind": "step_metrics", "schema_ver')
        records = read_records(path)
        assert len(records) == 1
        assert records[0][1].step == 1

    def test_append_after_torn_line(self, tmp_path):
        path = tmp_path / 'metrics.jsonl'
        with RecordStore(path) as store:
            store.append(StepMetrics(1, 0.5, 1.0))
        with open(path, 'a') as f:
            f.write('{"kind": "step_metrics", "schema_ver')
        with RecordStore(path) as store:
            assert store.append(StepMetrics(2, 0.25, 1.0)) == 1
        records = read_records(path)
        assert [offset for offset, _ in records] == [0, 1]
        assert [record.step for _, record in records] == [1, 2]
        assert path.read_text(encoding='utf-8').endswith('\n')

    def test_torn_only_line_truncated_to_empty(self, tmp_path):
        path = tmp_path / 'metrics.jsonl'
        path.write_text('{"kind": "step', encoding='utf-8')
        with RecordStore(path) as store:
            assert store.append(StepMetrics(1, 0.5, 1.0)) == 0
        assert [record.step for _, record in read_records(path)] == [1]

    def test_corrupt_line_names_offset(self, tmp_path):
        path = tmp_path / 'metrics.jsonl'
        with RecordStore(path) as store:
            store.append(StepMetrics(1, 0.5, 1.0))
        with open(path, 'a') as f:
            f.write('not json\n')
        with pytest.raises(RecordValidationError, match='offset 1'):
            list(iter_envelopes(path))

    def test_fsync_each_record(self, tmp_path, monkeypatch):
        calls = []
        real_fsync = os.fsync
        monkeypatch.setattr(os, 'fsync', lambda fd: calls.append(fd) or real_fsync(fd))
        with RecordStore(tmp_path / 'b.jsonl', fsync_each_record=True) as store:
            store.append(StepMetrics(1, 0.5, 1.0))
            store.append(StepMetrics(2, 0.5, 1.0))
        # two appends plus the close
        assert len(calls) == 3

    def test_write_failure_carries_offset(self, tmp_path):
        class FullDisk:
            closed = False

            def write(self, line):
                raise OSError(28, 'No space left on device')

        store = RecordStore(tmp_path / 'b.jsonl')
        store.append(StepMetrics(1, 0.5, 1.0))
        real_file, store._file = store._file, FullDisk()
        with pytest.raises(StoreWriteError) as e:
            store.append(StepMetrics(2, 0.5, 1.0))
        assert e.value.offset == 1
        store._file = real_file
        store.close()

    def test_close_is_idempotent(self, tmp_path):
        store = RecordStore(tmp_path / 'b.jsonl')
        store.close()
        store.close()
        assert store.closed

    def test_missing_stream_reads_empty(self, tmp_path):
        assert read_records(tmp_path / 'absent.jsonl') == []
