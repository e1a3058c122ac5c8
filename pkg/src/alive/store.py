# ALIVE Record Store Module
# Append-only line-delimited JSON streams for trajectories, rewards, batches and metrics
# Single writer per file; readers skip a torn trailing line, writers cut it on reopen

import json
import logging
import os
from pathlib import Path
from typing import Any, Iterator, List, Tuple, Union

from .datamodel import RecordValidationError, check_record, from_envelope, to_envelope

TRAJECTORIES = 'trajectories.jsonl'
REWARDS = 'rewards.jsonl'
BATCHES = 'batches.jsonl'
METRICS = 'metrics.jsonl'
STREAMS = (TRAJECTORIES, REWARDS, BATCHES, METRICS)

logger = logging.getLogger(__name__)


class StoreWriteError(OSError):
    """A record could not be durably appended; ``offset`` is the slot it was meant for."""

    def __init__(self, path: Path, offset: int, cause: Exception):
        super().__init__(f"Failed to append record at offset {offset} of {path}: {cause}")
        self.path = path
        self.offset = offset


def _truncate_torn_tail(path: Path) -> None:
    """Cut a stream back to its last newline so the next append starts a fresh line."""
    with open(path, 'rb+') as f:
        data = f.read()
        if not data or data.endswith(b'\n'):
            return
        keep = data.rfind(b'\n') + 1
        logger.warning(f"Dropping torn trailing record ({len(data) - keep} bytes) from {path}")
        f.truncate(keep)


class RecordStore:
    """Append-only writer for one ``.jsonl`` record stream."""

    def __init__(self, path: Union[str, Path], fsync_each_record: bool = False):
        """
        Open (or create) a record stream for appending.

        Args:
            path (Union[str, Path]): Stream file path.
            fsync_each_record (bool): fsync after every append instead of only on close.
        """
        self.path = Path(path)
        self.fsync_each_record = fsync_each_record
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            _truncate_torn_tail(self.path)
        self._next_offset = sum(1 for _ in iter_envelopes(self.path)) if self.path.exists() else 0
        self._file = open(self.path, 'a', encoding='utf-8')

    def __enter__(self) -> 'RecordStore':
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    @property
    def closed(self) -> bool:
        return self._file.closed

    def append(self, record: Any) -> int:
        """
        Validate and append a record.

        Args:
            record (Any): Any persistable datamodel record.

        Returns:
            int: Offset (0-based record index) of the appended record.
        """
        check_record(record)
        line = json.dumps(to_envelope(record), ensure_ascii=False, allow_nan=False, sort_keys=True) + '\n'
        offset = self._next_offset
        try:
            self._file.write(line)
            self._file.flush()
            if self.fsync_each_record:
                os.fsync(self._file.fileno())
        except OSError as e:
            logger.error(f"Append to {self.path} failed at offset {offset}: {e}")
            raise StoreWriteError(self.path, offset, e) from e
        self._next_offset += 1
        return offset

    def close(self) -> None:
        if self._file.closed:
            return
        self._file.flush()
        os.fsync(self._file.fileno())
        self._file.close()


def append_record(store: RecordStore, record: Any) -> int:
    """Append ``record`` to an open store and return its offset."""
    return store.append(record)


def iter_envelopes(path: Union[str, Path]) -> Iterator[Tuple[int, dict]]:
    """
    Yield ``(offset, envelope)`` pairs of complete records in file order.

    A final line without its newline is a torn write and is not yielded.
    """
    offset = 0
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.endswith('\n'):
                logger.warning(f"Ignoring torn trailing record in {path}")
                break
            if not line.strip():
                continue
            try:
                envelope = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordValidationError('record', f"unparseable line at offset {offset}: {e.msg}") from e
            yield offset, envelope
            offset += 1


def read_records(path: Union[str, Path]) -> List[Tuple[int, Any]]:
    """Read every complete record of a stream as ``(offset, record)`` pairs."""
    path = Path(path)
    if not path.exists():
        return []
    return [(offset, from_envelope(env)) for offset, env in iter_envelopes(path)]
