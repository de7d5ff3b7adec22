"""
Artifact emission: CSV, JSON, SVG plots and the per-directory manifest
"""
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import threading
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from services.errors import ConfigurationError  # noqa: E402

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'

# column set -> (x column, y column, series column)
PLOT_SCHEMAS = {
    ('alpha', 'beta', 'loss'): ('alpha', 'loss', None),
    ('epoch', 'train_loss', 'test_loss', 'penalty'): ('epoch', 'test_loss', None),
    ('t', 'loss', 'd'): ('t', 'loss', None),
    ('bit_width', 'variant', 'stressor_param', 'mean_loss', 'std_loss', 'n_seeds'): ('bit_width', 'mean_loss', 'variant'),
    ('series', 'alpha', 'loss'): ('alpha', 'loss', 'series'),
    ('delta', 'clean_loss', 'noisy_loss'): ('delta', 'noisy_loss', None),
    ('setting', 'value', 'mean_cka'): ('value', 'mean_cka', 'setting'),
    ('bends', 'epochs', 'mc', 'classification'): ('epochs', 'mc', 'bends'),
}


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write to a temporary sibling and rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _json_safe(value):
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if hasattr(value, 'tolist'):
        return _json_safe(value.tolist())
    return value


def dumps_json(payload) -> bytes:
    """Canonical JSON; NaN and infinities become null"""
    return (json.dumps(_json_safe(payload), sort_keys=True, indent=2, allow_nan=False) + '\n').encode('utf-8')


def dumps_csv(rows: Sequence[Dict[str, object]], columns: Sequence[str]) -> bytes:
    frame = pd.DataFrame(list(rows), columns=list(columns))
    return frame.to_csv(index=False, lineterminator='\n').encode('utf-8')


def read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise ConfigurationError(f"CSV {path} is empty") from e


def config_hash(config: Optional[Dict[str, object]]) -> str:
    return sha256_bytes(dumps_json(config or {}))


def _schema_for(frame: pd.DataFrame):
    key = tuple(frame.columns)
    if key not in PLOT_SCHEMAS:
        raise ConfigurationError(f"CSV columns {list(key)} match no known report kind")
    return PLOT_SCHEMAS[key]


def render_plot(frame: pd.DataFrame, kind: str = 'line', title: Optional[str] = None) -> bytes:
    """Standalone SVG: one polyline for ``line``, one per series for ``multi-line``"""
    if kind not in ('line', 'multi-line'):
        raise ConfigurationError(f"Unknown plot kind '{kind}'")
    x, y, series = _schema_for(frame)
    if frame.empty:
        raise ConfigurationError("CSV has no data rows")
    if x == 'alpha' and 'beta' in frame.columns:
        frame = frame[frame['beta'] == 0]
    if kind == 'multi-line' and series is None:
        raise ConfigurationError(f"Report kind with x={x}, y={y} has no series column")

    plt.rcParams['svg.hashsalt'] = 'llab'
    plt.rcParams['svg.fonttype'] = 'none'
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        if kind == 'line':
            ax.plot(frame[x].to_numpy(), frame[y].to_numpy(), marker='o', label=y)
        else:
            for name, group in frame.groupby(series, sort=True):
                ax.plot(group[x].to_numpy(), group[y].to_numpy(), marker='o', label=f'{series}={name}')
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        if title:
            ax.set_title(title)
        ax.legend()
        buffer = io.BytesIO()
        fig.savefig(buffer, format='svg', metadata={'Date': None})
    finally:
        plt.close(fig)
    return buffer.getvalue()


def emit_plot(csv_path, kind: str = 'line', out_path=None, title: Optional[str] = None) -> Path:
    """Render a report CSV to an SVG next to it (or at ``out_path``)"""
    csv_path = Path(csv_path)
    out_path = Path(out_path) if out_path is not None else csv_path.with_suffix('.svg')
    atomic_write_bytes(out_path, render_plot(read_csv(csv_path), kind, title))
    logger.info(f"Rendered {out_path}")
    return out_path


class Manifest:
    """Tracks every artifact written into one output directory"""

    def __init__(self, out_dir, command: Sequence[str], config: Optional[Dict[str, object]] = None):
        self.out_dir = Path(out_dir)
        self.command = ' '.join(command)
        self.config_hash = config_hash(config)
        self.files: Dict[str, str] = {}
        self._lock = threading.Lock()
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _record(self, path: Path, data: bytes) -> Path:
        atomic_write_bytes(path, data)
        with self._lock:
            self.files[path.resolve().relative_to(self.out_dir.resolve()).as_posix()] = sha256_bytes(data)
        logger.debug(f"Wrote {path}")
        return path

    def write_bytes(self, name: str, data: bytes) -> Path:
        return self._record(self.out_dir / name, data)

    def write_json(self, name: str, payload) -> Path:
        return self._record(self.out_dir / name, dumps_json(payload))

    def write_csv(self, name: str, rows: Sequence[Dict[str, object]], columns: Sequence[str]) -> Path:
        return self._record(self.out_dir / name, dumps_csv(rows, columns))

    def write_plot(self, name: str, csv_name: str, kind: str = 'line', title: Optional[str] = None) -> Path:
        return self._record(self.out_dir / name, render_plot(read_csv(self.out_dir / csv_name), kind, title))

    def register(self, path) -> None:
        """Record a file written by another writer (e.g. a checkpoint)"""
        path = Path(path)
        self.files[path.resolve().relative_to(self.out_dir.resolve()).as_posix()] = sha256_file(path)

    def save(self) -> Path:
        """Merge with any existing manifest in the directory and write it

        Each file entry names the command that wrote it; the top-level
        ``command`` and ``config_hash`` belong to the latest writer.
        """
        target = self.out_dir / MANIFEST_NAME
        entries: Dict[str, Dict[str, str]] = {}
        if target.exists():
            try:
                previous = json.loads(target.read_text())
                for f in previous.get('files', []):
                    entries[f['path']] = {
                        'sha256': f['sha256'],
                        'command': f.get('command', previous.get('command', '')),
                        'config_hash': f.get('config_hash', previous.get('config_hash', '')),
                    }
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError):
                logger.warning(f"Ignoring unreadable manifest {target}")
                entries = {}
        for path, digest in self.files.items():
            entries[path] = {'sha256': digest, 'command': self.command, 'config_hash': self.config_hash}
        payload = {
            'command': self.command,
            'config_hash': self.config_hash,
            'files': [{'path': p, **entries[p]} for p in sorted(entries)],
        }
        atomic_write_bytes(target, dumps_json(payload))
        logger.info(f"Manifest lists {len(entries)} files in {self.out_dir}")
        return target


def history_rows(history) -> List[Dict[str, object]]:
    return [{'epoch': r.epoch, 'train_loss': r.train_loss, 'test_loss': r.test_loss, 'penalty': r.penalty}
            for r in history]
