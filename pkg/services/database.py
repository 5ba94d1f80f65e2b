import logging
import os
import sqlite3
from datetime import datetime, timezone
from pathlib import Path

from models.report import Command, RunReport

logger = logging.getLogger(__name__)

DB_PATH = Path(__file__).parent.parent / "cache.db"


def _db_path() -> Path:
    return Path(os.getenv("FRACPHI4_CACHE_DB", DB_PATH))


def _get_connection() -> sqlite3.Connection:
    """Get a database connection, creating tables if needed."""
    path = _db_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(path)
    conn.row_factory = sqlite3.Row
    conn.execute("""
        CREATE TABLE IF NOT EXISTS run_cache (
            config_hash TEXT NOT NULL,
            seed TEXT NOT NULL,
            command TEXT NOT NULL,
            report TEXT NOT NULL,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
            PRIMARY KEY (config_hash, seed, command)
        )
    """)
    conn.commit()
    return conn


def get_cached_report(config_hash: str, seed: int, command: Command) -> RunReport | None:
    """Retrieve a previous report for the same (config, seed, command).

    Returns:
        RunReport if found, None otherwise
    """
    conn = _get_connection()
    try:
        row = conn.execute(
            "SELECT report FROM run_cache WHERE config_hash = ? AND seed = ? AND command = ?",
            (config_hash, str(seed), command),
        ).fetchone()
        if not row:
            return None
        report = RunReport.model_validate_json(row["report"])
        # artifacts deleted since the run make the entry stale
        if not all(Path(p).exists() for p in report.artifacts):
            logger.info("cached %s report references missing artifacts; recomputing", command)
            return None
        return report
    finally:
        conn.close()


def cache_report(report: RunReport) -> None:
    """Store a report, replacing any earlier one for the same key."""
    conn = _get_connection()
    try:
        conn.execute(
            """
            INSERT OR REPLACE INTO run_cache (config_hash, seed, command, report, created_at)
            VALUES (?, ?, ?, ?, ?)
            """,
            (
                report.config_hash,
                str(report.seed),
                report.command,
                report.model_dump_json(),
                datetime.now(timezone.utc).isoformat(),
            ),
        )
        conn.commit()
    finally:
        conn.close()
