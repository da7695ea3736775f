import aiosqlite
import logging
from datetime import datetime
from pathlib import Path
from db.models import RunRecord, SCHEMA_SQL
from config import settings

logger = logging.getLogger(__name__)


class Database:
    """SQLite registry of experiment runs, their epoch losses and metrics."""

    def __init__(self, db_path=settings.DB_PATH):
        self.db_path = Path(db_path)

    async def init_db(self):
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        async with aiosqlite.connect(self.db_path) as db:
            await db.executescript(SCHEMA_SQL)
            await db.commit()
            logger.info(f"Run registry initialized at {self.db_path}")

    async def start_run(self, run: RunRecord) -> int:
        async with aiosqlite.connect(self.db_path) as db:
            cursor = await db.execute(
                """
                INSERT INTO runs (config_hash, seed, kind, status, report_path, started_at)
                VALUES (?, ?, ?, ?, ?, ?)
                """,
                (run.config_hash, run.seed, run.kind, run.status, run.report_path, run.started_at),
            )
            await db.commit()
            return cursor.lastrowid

    async def finish_run(self, run_id: int, status: str, report_path: str | None = None):
        async with aiosqlite.connect(self.db_path) as db:
            await db.execute(
                "UPDATE runs SET status = ?, report_path = ?, finished_at = ? WHERE id = ?",
                (status, report_path, datetime.now(), run_id),
            )
            await db.commit()

    async def log_epoch_losses(self, run_id: int, label: str, losses: list[tuple[int, float]]):
        if not losses:
            return
        async with aiosqlite.connect(self.db_path) as db:
            await db.executemany(
                "INSERT INTO epoch_losses (run_id, label, epoch, query_loss) VALUES (?, ?, ?, ?)",
                [(run_id, label, epoch, loss) for epoch, loss in losses],
            )
            await db.commit()

    async def log_metrics(self, run_id: int, entries: list[dict]):
        """entries: dicts with name, value and optional alpha / k."""
        async with aiosqlite.connect(self.db_path) as db:
            await db.executemany(
                "INSERT INTO metrics (run_id, name, alpha, k, value) VALUES (?, ?, ?, ?, ?)",
                [(run_id, e["name"], e.get("alpha"), e.get("k"), e["value"]) for e in entries],
            )
            await db.commit()

    async def get_run(self, run_id: int):
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute("SELECT * FROM runs WHERE id = ?", (run_id,)) as cursor:
                row = await cursor.fetchone()
                return dict(row) if row else None

    async def get_recent_runs(self, limit: int = 20):
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,)) as cursor:
                rows = await cursor.fetchall()
                return [dict(row) for row in rows]

    async def get_epoch_losses(self, run_id: int, label: str | None = None):
        query = "SELECT label, epoch, query_loss FROM epoch_losses WHERE run_id = ?"
        params = [run_id]
        if label is not None:
            query += " AND label = ?"
            params.append(label)
        query += " ORDER BY rowid"
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute(query, tuple(params)) as cursor:
                rows = await cursor.fetchall()
                return [dict(row) for row in rows]

    async def get_metrics(self, run_id: int):
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute("SELECT name, alpha, k, value FROM metrics WHERE run_id = ? ORDER BY id",
                                  (run_id,)) as cursor:
                rows = await cursor.fetchall()
                return [dict(row) for row in rows]
