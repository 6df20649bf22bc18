"""
Artifact writing and driver file reading for loewner-lab
"""
import csv
import io
import json
import logging
import re
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.models import jsonable

logger = logging.getLogger(__name__)


class FileError(Exception):
    """Custom exception for artifact file errors"""
    pass


ARTIFACT_SUFFIXES = (".csv", ".json", ".svg")


def artifact_filename(name: str) -> str:
    """
    Flat artifact name `<experiment>-<hash>[-<driver>[-<seed>]].<ext>`.

    The stem is lower-cased and anything outside [a-z0-9._-] becomes `_`, so a
    driver name taken from a file path cannot leave the output directory.
    """
    stem, dot, ext = name.rpartition(".")
    ext = f".{ext.lower()}"
    if not dot or ext not in ARTIFACT_SUFFIXES:
        raise FileError(f"artifact {name!r} must end in one of {', '.join(ARTIFACT_SUFFIXES)}")
    stem = re.sub(r"[^a-z0-9_.\-]+", "_", stem.lower()).strip("._-")
    if not stem:
        raise FileError(f"artifact {name!r} has an empty stem")
    return stem + ext


def format_cell(value: Any) -> str:
    """CSV cell text: repr for floats (shortest round trip), lower-case booleans"""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    return buf.getvalue()


def render_json(data: Any) -> str:
    return json.dumps(jsonable(data), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


class ArtifactSink:
    """Serialized writer: one lock per output path"""

    def __init__(self, out_dir: str):
        self.out_dir = Path(out_dir)
        self._locks: Dict[Path, threading.Lock] = {}
        self._guard = threading.Lock()
        self.written: List[str] = []

    def _lock_for(self, path: Path) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(path, threading.Lock())

    def path_for(self, filename: str) -> Path:
        return self.out_dir / artifact_filename(filename)

    def write_text(self, filename: str, text: str) -> Path:
        path = self.path_for(filename)
        with self._lock_for(path):
            path.parent.mkdir(parents=True, exist_ok=True)
            # newline="" keeps LF line ends on every platform
            with open(path, "w", encoding="utf-8", newline="") as f:
                f.write(text)
        with self._guard:
            self.written.append(str(path))
        logger.debug(f"Wrote {path}")
        return path

    def write_csv(self, filename: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        return self.write_text(filename, render_csv(header, rows))

    def write_json(self, filename: str, data: Any) -> Path:
        return self.write_text(filename, render_json(data))


class FileService:
    """Service for driver files and experiment configs"""

    def read_driver_csv(self, path: str) -> Tuple[List[float], List[float]]:
        """Read a `t,u` driver file; returns (times, values)"""
        file_path = Path(path)
        if not file_path.exists():
            raise FileError(f"driver file not found: {path}")
        times, values = [], []
        with open(file_path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["t", "u"]:
                raise FileError(f"driver file {path} must start with the header 't,u'")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    times.append(float(row[0]))
                    values.append(float(row[1]))
                except (ValueError, IndexError) as e:
                    raise FileError(f"{path}:{lineno}: bad row {row}") from e
        if len(values) < 2:
            raise FileError(f"driver file {path} needs at least two rows")
        return times, values

    def read_json(self, path: str) -> Any:
        """Parsed JSON; JSONDecodeError propagates to the caller"""
        file_path = Path(path)
        if not file_path.exists():
            raise FileError(f"file not found: {path}")
        with open(file_path, encoding="utf-8") as f:
            return json.load(f)

    def resolve_out_dir(self, flag: Optional[str], configured: Optional[str], fallback: str) -> str:
        """--out flag, then config out_dir, then the environment default"""
        return flag or configured or fallback


# Global service instance
file_service = FileService()
