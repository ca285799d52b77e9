from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

PRETRAIN_COLUMNS = ["step", "mlm", "tacl", "total"]
FINETUNE_COLUMNS = ["step", "epoch", "train_loss"]


class LossLogger:
    """
    Appends one CSV row per optimisation step and keeps the session in memory.
    Without a log file it only keeps the in-memory history.
    """

    def __init__(self, log_file: Optional[str] = None, columns: Sequence[str] = PRETRAIN_COLUMNS):
        self.columns = list(columns)
        self.log_file = Path(log_file) if log_file else None
        if self.log_file is not None:
            self.log_file.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(columns=self.columns).to_csv(self.log_file, index=False)
        self.session_rows: List[Dict] = []
        self.epoch_summaries: List[Dict] = []
        self.started = datetime.now()

    def log_step(self, **values) -> None:
        row = {column: values[column] for column in self.columns}
        if self.log_file is not None:
            pd.DataFrame([row], columns=self.columns).to_csv(self.log_file, mode="a", header=False, index=False)
        self.session_rows.append(row)

    def log_epoch(self, epoch: int, **values) -> None:
        """Per-epoch summary such as val_loss, written next to the step log."""
        entry = {"epoch": epoch, **values}
        self.epoch_summaries.append(entry)
        if self.log_file is not None:
            summary_file = self.log_file.with_name(self.log_file.stem + "_epochs.csv")
            pd.DataFrame(self.epoch_summaries).to_csv(summary_file, index=False)

    def column(self, name: str) -> np.ndarray:
        return np.asarray([row[name] for row in self.session_rows], dtype=np.float64)

    def get_session_summary(self) -> Dict:
        if not self.session_rows:
            return {"steps": 0, "elapsed_s": 0.0}
        loss_key = "total" if "total" in self.columns else "train_loss"
        losses = self.column(loss_key)
        summary = {
            "steps": len(self.session_rows),
            "first_loss": float(losses[0]),
            "last_loss": float(losses[-1]),
            "min_loss": float(losses.min()),
            "elapsed_s": (datetime.now() - self.started).total_seconds(),
        }
        if self.epoch_summaries and "val_loss" in self.epoch_summaries[0]:
            summary["best_val_loss"] = min(e["val_loss"] for e in self.epoch_summaries)
        return summary

    def print_session_summary(self) -> None:
        summary = self.get_session_summary()
        print("\nSESSION LOSS SUMMARY")
        print(f"Steps:          {summary['steps']}")
        if summary["steps"]:
            print(f"First loss:     {summary['first_loss']:.4f}")
            print(f"Last loss:      {summary['last_loss']:.4f}")
            print(f"Min loss:       {summary['min_loss']:.4f}")
        if "best_val_loss" in summary:
            print(f"Best val loss:  {summary['best_val_loss']:.4f}")
        print(f"Elapsed:        {summary['elapsed_s']:.1f}s")

    @staticmethod
    def load_log(log_file: str) -> pd.DataFrame:
        path = Path(log_file)
        if not path.exists():
            return pd.DataFrame()
        return pd.read_csv(path)
