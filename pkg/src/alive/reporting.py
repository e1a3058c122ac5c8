# ALIVE Reporting Module
# Exports a run's training batches as a Parquet archive for an external trainer
# Summarizes the metrics stream into per-window tables

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import pandas as pd
import pyarrow as pa
import pyarrow.parquet as pq

from .datamodel import NoDataError, RecordValidationError, StepMetrics, check_record, from_envelope, to_envelope
from .engine import STEP_MANIFEST, STEPS_DIR, committed_steps, read_run_metrics, step_dir_name
from .store import BATCHES, REWARDS, iter_envelopes

FORMAT_VERSION = 1
MANIFEST_KEY = b'alive_manifest'

# Batch item kind -> exported signal family
ITEM_FAMILIES = {
    'document': 'document',
    'constructor_task': 'task_difficulty',
    'fcp_sample': 'verbal_diagnostic',
    'distill_sample': 'reviewer_distillation',
}
# Solver reward kind -> exported signal family
REWARD_FAMILIES = {
    'solver_hard': 'hard_verification',
    'solver_soft': 'soft_introspective',
}
FAMILIES = ('document', 'task_difficulty', 'hard_verification', 'soft_introspective',
            'verbal_diagnostic', 'reviewer_distillation')

STATS_COLUMNS = ('constructor_reward_mean', 'solver_acc_mean', 'fcp_loss', 'entropy_estimate',
                 'valid_task_fraction')

ARCHIVE_SCHEMA = pa.schema([
    ('step', pa.int64()),
    ('family', pa.string()),
    ('kind', pa.string()),
    ('offset', pa.int64()),
    ('record', pa.string()),
])


class ExportError(RuntimeError):
    """A run directory cannot be exported (gaps, tampered or inconsistent records)."""


def _validated(path: Path) -> List[tuple]:
    """(offset, record) pairs of a stream; any invalid record raises ExportError with its offset."""
    out = []
    try:
        for offset, envelope in iter_envelopes(path):
            try:
                record = from_envelope(envelope)
                check_record(record)
            except (RecordValidationError, TypeError) as e:
                raise ExportError(f"{path}: invalid record at offset {offset}: {e}") from e
            out.append((offset, record))
    except RecordValidationError as e:
        raise ExportError(f"{path}: {e}") from e
    return out


class RunReporter:
    """Reads a committed run directory for export and statistics."""

    def __init__(self, run_dir: Union[str, Path]):
        """
        Initialize run reporter.

        Args:
            run_dir (Union[str, Path]): Run directory written by the engine.
        """
        self.run_dir = Path(run_dir)
        self.logger = logging.getLogger(__name__)
        if not self.run_dir.is_dir():
            raise FileNotFoundError(f"Run directory not found: {self.run_dir}")

    def _steps(self) -> List[int]:
        steps = committed_steps(self.run_dir)
        gaps = sorted(set(range(1, max(steps, default=0) + 1)) - set(steps))
        steps_root = self.run_dir / STEPS_DIR
        stale = sorted(p.name for p in steps_root.glob('*.tmp')) if steps_root.is_dir() else []
        if gaps:
            raise ExportError(f"Missing step directories: {', '.join(str(g) for g in gaps)}")
        if stale:
            self.logger.warning(f"Ignoring uncommitted step directories: {', '.join(stale)}")
        return steps

    def _step_rows(self, step: int) -> tuple:
        directory = self.run_dir / STEPS_DIR / step_dir_name(step)
        try:
            with open(directory / STEP_MANIFEST, 'r') as f:
                manifest = json.load(f)
        except (OSError, ValueError) as e:
            raise ExportError(f"Step {step}: manifest unreadable ({e})") from e

        rows: List[Dict[str, Any]] = []
        counts = {family: 0 for family in FAMILIES}
        realized = 0
        for offset, item in _validated(directory / BATCHES):
            if item.step != step:
                raise ExportError(f"{directory / BATCHES}: record at offset {offset} names step {item.step}")
            family = ITEM_FAMILIES[item.kind]
            if item.kind != 'distill_sample' or item.payload.get('status') == 'ok':
                realized += 1
            counts[family] += 1
            rows.append({'step': step, 'family': family, 'kind': item.kind, 'offset': offset,
                         'record': json.dumps(to_envelope(item), sort_keys=True)})
        for offset, reward in _validated(directory / REWARDS):
            family = REWARD_FAMILIES.get(reward.kind)
            if family is None:
                continue
            counts[family] += 1
            rows.append({'step': step, 'family': family, 'kind': reward.kind, 'offset': offset,
                         'record': json.dumps(to_envelope(reward), sort_keys=True)})

        if realized != manifest.get('expected_items'):
            raise ExportError(f"Step {step}: {realized} batch items, manifest expects {manifest.get('expected_items')}")
        return rows, {'families': counts, 'items': realized, 'warmup': manifest.get('warmup', False)}

    def export_batches(self, out: Union[str, Path], format_version: int = FORMAT_VERSION) -> Dict[str, Any]:
        """
        Write every committed step's batch items as one Parquet archive.

        Args:
            out (Union[str, Path]): Archive path.
            format_version (int): Archive format version (only 1 is defined).

        Returns:
            Dict[str, Any]: Manifest stored in the archive's schema metadata.
        """
        if format_version != FORMAT_VERSION:
            raise ExportError(f"Unsupported format version {format_version}")
        rows: List[Dict[str, Any]] = []
        steps_manifest: Dict[str, Any] = {}
        for step in self._steps():
            step_rows, summary = self._step_rows(step)
            rows.extend(step_rows)
            steps_manifest[str(step)] = summary

        manifest = {
            'format_version': format_version,
            'run_dir': str(self.run_dir),
            'steps': steps_manifest,
            'total_items': sum(s['items'] for s in steps_manifest.values()),
        }
        table = pa.Table.from_pylist(rows, schema=ARCHIVE_SCHEMA)
        table = table.replace_schema_metadata({MANIFEST_KEY: json.dumps(manifest, sort_keys=True).encode()})
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        pq.write_table(table, out)
        written, stored = load_archive(out)
        if len(written) != len(rows) or stored != manifest:
            raise ExportError(f"{out}: archive read back {len(written)} of {len(rows)} rows")
        self.logger.info(f"Exported {len(rows)} rows over {len(steps_manifest)} steps to {out}")
        return manifest

    def metrics_frame(self) -> pd.DataFrame:
        records = [r for r in read_run_metrics(self.run_dir) if isinstance(r, StepMetrics)]
        if not records:
            raise NoDataError("no data")
        return pd.DataFrame([vars(r) for r in records])

    def stats(self, window: int = 50) -> pd.DataFrame:
        """
        Per-window means of the training-dynamics metrics.

        Args:
            window (int): Steps per window.

        Returns:
            pd.DataFrame: One row per window; columns with no values are omitted.
        """
        if window < 1:
            raise ValueError("window must be ≥ 1")
        df = self.metrics_frame()
        df['window'] = (df['step'] - 1) // window
        columns = [c for c in STATS_COLUMNS if df[c].notna().any()]
        grouped = df.groupby('window')
        summary = grouped[columns].mean().astype(float)
        summary.insert(0, 'first_step', grouped['step'].min())
        summary.insert(1, 'last_step', grouped['step'].max())
        return summary.reset_index(drop=True)


def load_archive(path: Union[str, Path]) -> tuple:
    """Read an exported archive as (DataFrame, manifest)."""
    table = pq.read_table(path)
    metadata = table.schema.metadata or {}
    manifest = json.loads(metadata[MANIFEST_KEY]) if MANIFEST_KEY in metadata else None
    return table.to_pandas(), manifest


def format_stats(summary: pd.DataFrame, output_format: str = 'text') -> str:
    """Render a stats table as plain text, JSON records or CSV."""
    if output_format == 'json':
        return summary.to_json(orient='records')
    if output_format == 'csv':
        return summary.to_csv(index=False)
    if output_format == 'text':
        return summary.to_string(index=False, float_format=lambda v: f"{v:.4f}")
    raise ValueError(f"Unsupported format: {output_format}")
