import logging

import pandas as pd

from db.database import Database

logger = logging.getLogger(__name__)
# Dedicated register of per-epoch losses (losses.log), configured in main.py
loss_register_logger = logging.getLogger("loss_register")


class EpochLogger:
    """
    Epoch callback for meta-training. Every loss goes to the loss register
    immediately and is buffered for the loss CSV and the run registry.
    """

    def __init__(self, label: str):
        self.label = label
        self.rows: list[tuple[int, float]] = []

    def __call__(self, epoch: int, loss: float):
        self.rows.append((epoch, loss))
        loss_register_logger.info(f"{self.label},{epoch},{loss:.17g}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"label": self.label, "epoch": [e for e, _ in self.rows], "query_loss": [v for _, v in self.rows]},
            columns=["label", "epoch", "query_loss"],
        )

    async def flush(self, db: Database | None, run_id: int | None):
        """Write buffered losses to the registry; failures are logged, never raised."""
        if db is None or run_id is None:
            return
        try:
            await db.log_epoch_losses(run_id, self.label, self.rows)
            logger.info(f"Stored {len(self.rows)} epoch losses for {self.label} (run {run_id})")
        except Exception as e:
            logger.error(f"Error storing epoch losses for {self.label}: {e}")


def loss_table(loggers: list[EpochLogger]) -> pd.DataFrame:
    frames = [lg.to_frame() for lg in loggers if lg.rows]
    if not frames:
        return pd.DataFrame(columns=["label", "epoch", "query_loss"])
    return pd.concat(frames, ignore_index=True)
