"""Phase timer for CLI runs.

Each command is split into named phases (load, train, attack, ...). Phase
timings and the latest counters end up in the run's summary.json.
"""

from __future__ import annotations

import logging
import time
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class PipelineLogger:
    def __init__(self, pipeline: str, run_id: Optional[str] = None) -> None:
        self.pipeline = pipeline
        self.run_id = run_id
        self.total_start = time.perf_counter()
        self.current_phase: Optional[str] = None
        self.current_phase_start: Optional[float] = None
        self.phase_totals: Dict[str, float] = {}
        self.latest_counters: Dict[str, Any] = {}

    def header(self) -> None:
        if self.run_id:
            logger.info("==== %s (%s) ====", self.pipeline, self.run_id)
        else:
            logger.info("==== %s ====", self.pipeline)

    def start(self, phase: str, **counters: Any) -> None:
        self.current_phase = phase
        self.current_phase_start = time.perf_counter()
        logger.info("[%s] start%s", phase, _format_counters(counters))

    def end(self, phase: Optional[str] = None, **counters: Any) -> float:
        phase_name = phase or self.current_phase or "unknown"
        elapsed = (
            time.perf_counter() - self.current_phase_start
            if self.current_phase_start is not None
            else 0.0
        )
        self.phase_totals[phase_name] = self.phase_totals.get(phase_name, 0.0) + elapsed
        self.latest_counters.update(counters)
        logger.info("[%s] done in %.3f s%s", phase_name, elapsed, _format_counters(counters))
        if phase is None or phase == self.current_phase:
            self.current_phase = None
            self.current_phase_start = None
        return elapsed

    def fail(self, exc: BaseException, phase: Optional[str] = None) -> None:
        phase_name = phase or self.current_phase or "unknown"
        elapsed = (
            time.perf_counter() - self.current_phase_start
            if self.current_phase_start is not None
            else time.perf_counter() - self.total_start
        )
        logger.error("[%s] failed after %.3f s: %r", phase_name, elapsed, exc)
        logger.debug("traceback for %s", phase_name, exc_info=exc)

    def total(self, **counters: Any) -> float:
        elapsed = time.perf_counter() - self.total_start
        self.latest_counters.update(counters)
        logger.info("%s finished in %.3f s%s", self.pipeline, elapsed, _format_counters(counters))
        return elapsed

    def snapshot(self, **counters: Any) -> Dict[str, Any]:
        return {
            "pipeline": self.pipeline,
            "run_id": self.run_id,
            "phase_totals": dict(self.phase_totals),
            "counters": {**self.latest_counters, **counters},
            "total_elapsed": time.perf_counter() - self.total_start,
        }


def _format_counters(counters: Dict[str, Any]) -> str:
    if not counters:
        return ""
    return " (" + ", ".join(f"{key}={value}" for key, value in counters.items()) + ")"
