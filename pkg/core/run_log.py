"""
Text GAN Toolkit - Run Log

Records a training session to an append-only JSONL file, one object per
line, and writes temperature sweeps as CSV tables.

Record kinds: header, D, G, eval, checkpoint, abort.
"""

import csv
import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

logger = logging.getLogger("RunLog")

RECORD_KINDS = ("header", "D", "G", "eval", "checkpoint", "abort")


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings"""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value)
    return value


class RunLogger:
    """
    Manages one run directory: <output_dir>/<run_name>/run.jsonl plus checkpoints.
    """

    def __init__(self, output_dir: str = "./runs"):
        """
        Args:
            output_dir: parent directory of all run directories
        """
        self.output_dir = output_dir
        self.run_dir: Optional[str] = None
        self.session_id: Optional[str] = None
        self.is_recording = False
        self.log_file = None
        self.record_count = 0
        self._last_step: Dict[str, int] = {}

        os.makedirs(self.output_dir, exist_ok=True)

    @property
    def log_path(self) -> Optional[str]:
        return os.path.join(self.run_dir, "run.jsonl") if self.run_dir else None

    def start_session(self, run_name: str, header: Dict[str, Any]) -> str:
        """
        Create the run directory and write the header record.

        Args:
            run_name: directory name under output_dir
            header: RunConfig dictionary, stored verbatim

        Returns:
            run directory path
        """
        if self.is_recording:
            raise RuntimeError("Session already in progress")
        self.session_id = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
        self.run_dir = os.path.join(self.output_dir, run_name)
        os.makedirs(self.run_dir, exist_ok=True)
        self.log_file = open(self.log_path, "w", encoding="utf-8")
        self.record_count = 0
        self._last_step = {}
        self.is_recording = True
        self.write("header", 0, session=self.session_id, config=header)
        logger.info(f"Started run {run_name} in {self.run_dir}")
        return self.run_dir

    def write(self, kind: str, step: int, **fields):
        """
        Append one record.

        Steps must not decrease within a kind.
        """
        if not self.is_recording:
            return
        if kind not in RECORD_KINDS:
            raise ValueError(f"unknown record kind '{kind}'")
        if step < self._last_step.get(kind, step):
            raise ValueError(f"{kind} record for step {step} after step {self._last_step[kind]}")
        self._last_step[kind] = step
        record = {"kind": kind, "step": int(step)}
        record.update(_clean(fields))
        self.log_file.write(json.dumps(record, sort_keys=True) + "\n")
        self.record_count += 1
        if self.record_count % 10 == 0:
            self.log_file.flush()

    def abort(self, step: int, reason: str, **diagnostics):
        """Write the diagnostic record of a diverged run and flush it"""
        self.write("abort", step, reason=reason, **diagnostics)
        if self.log_file:
            self.log_file.flush()

    def stop_session(self):
        if not self.is_recording:
            return
        self.log_file.close()
        self.log_file = None
        self.is_recording = False
        logger.info(f"Stopped run {self.run_dir} ({self.record_count} records)")

    def run_file(self, name: str) -> str:
        if not self.run_dir:
            raise RuntimeError("No run in progress")
        return os.path.join(self.run_dir, name)


def read_run_log(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def append_records(path: str, records: Iterable[Dict[str, Any]]):
    """Append metric records to an existing (or new) JSONL file"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(_clean(record), sort_keys=True) + "\n")


def write_sweep_csv(path: str, rows: List[Dict[str, Any]]) -> str:
    """One row per temperature; columns are the union of row keys, temperature first"""
    if not rows:
        raise ValueError("no sweep rows to write")
    fieldnames = ["temperature"] + sorted({k for row in rows for k in row} - {"temperature"})
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(_clean(row))
    logger.info(f"Wrote sweep table ({len(rows)} rows): {path}")
    return path
