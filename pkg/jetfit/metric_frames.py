from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from termcolor import colored

from tools.helper_tools import s_print

pd.set_option('display.max_rows', 500)
pd.set_option('display.max_columns', 500)
pd.set_option('display.width', 1000)


class RecordFrame:
    """Rows accumulated in memory and appended to a CSV file chunk by chunk."""

    def __init__(self, frame_type: str, columns: tuple, *args, **kwargs):
        self.frame_type = frame_type
        self.columns = columns
        self.df = pd.DataFrame(columns=self.columns)
        self.output_folder = kwargs.get("output_folder", "data")
        self.filename = kwargs.get("filename", f"{frame_type}.csv")

    def clear(self) -> None:  # clear dataframe in-place
        self.df = self.df.iloc[0:0]

    def append_tuple(self, data: tuple) -> None:
        _, col = self.df.shape
        if col == len(data):
            self.df.loc[len(self.df)] = data
        else:
            raise ValueError(f"Length mismatch. There are {col} columns, but {len(data)} elements to append.")

    def append_dict(self, data: dict) -> None:
        self.append_tuple(tuple(data.get(column) for column in self.columns))

    @property
    def path(self) -> Path:
        return Path(self.output_folder) / self.filename

    def save_chunk(self, csv: bool = True) -> None:
        """Append the in-memory rows to the CSV (header only when the file is new), then clear them."""
        if not csv:
            return

        if self.is_empty:
            logger.debug(f"{self.frame_type} frame is empty. Skipping save...")
            return

        header = not self.path.is_file()
        if header:
            logger.debug(f"{self.filename} doesn't exist. Creating new one...")
            self.path.parent.mkdir(parents=True, exist_ok=True)

        self.df.to_csv(self.path, index=False, mode='a', header=header)
        logger.debug(f"Saved {len(self.df)} {self.frame_type} rows into {self.filename}.")
        self.clear()

    @property
    def is_empty(self) -> bool:
        return self.df.empty


class EpochLogFrame(RecordFrame):
    """Per-epoch training metrics: loss terms, mean predicted weight and validation RMSE."""

    def __init__(self, *args, **kwargs):
        super(EpochLogFrame, self).__init__(
            "epochs",
            ("epoch", "step", "loss", "sin_loss", "consistency_loss", "reg_loss", "mean_weight", "val_rmse_deg",
             "elapsed_s"),
            *args, filename=kwargs.pop("filename", "metrics.csv"), **kwargs
        )
        self.best_rmse = np.inf

    def log_epoch(self, record: dict, display: bool = True) -> bool:
        """Store one epoch; returns True when validation RMSE improved."""
        self.append_dict(record)
        improved = record["val_rmse_deg"] < self.best_rmse
        if improved:
            self.best_rmse = record["val_rmse_deg"]
        if display:
            self.display_epoch(record, improved)
        return improved

    @staticmethod
    def display_epoch(record: dict, improved: bool) -> None:
        line_output_left = (f"epoch {record['epoch']:>4} --- step {record['step']:>7} | loss {record['loss']:.5f} "
                            f"(sin {record['sin_loss']:.5f}, con {record['consistency_loss']:.5f}, "
                            f"reg {record['reg_loss']:.5f}) | mean w {record['mean_weight']:.3f}")
        line_output_right = f"val {record['val_rmse_deg']:.3f} deg"
        line_output_right = colored(line_output_right, "green" if improved else "yellow")
        s_print(f"{line_output_left:<100}{line_output_right:>25}")


class BenchmarkFrame(RecordFrame):
    """One row per (method, category) of a benchmark run."""

    def __init__(self, *args, **kwargs):
        super(BenchmarkFrame, self).__init__(
            "benchmark",
            ("method", "category", "points", "rmse_deg", "pgp_5", "pgp_10", "d_k1", "d_k2", "ms_per_point"),
            *args, filename=kwargs.pop("filename", "benchmark.csv"), **kwargs
        )

    def table(self) -> pd.DataFrame:
        """RMSE pivot: methods as rows, categories as columns, plus their mean."""
        pivot = self.df.pivot(index="method", columns="category", values="rmse_deg").astype(float)
        pivot["average"] = pivot.mean(axis=1)
        return pivot

    def display_table(self) -> None:
        pivot = self.table()
        best = pivot.idxmin(axis=0)
        header = f"{'method':<14}" + "".join(f"{column:>13}" for column in pivot.columns)
        s_print(header)
        s_print("-" * len(header))
        for method, row in pivot.iterrows():
            cells = []
            for column, value in row.items():
                cell = f"{value:>13.3f}"
                if best[column] == method:
                    cell = colored(cell, "green")
                cells.append(cell)
            s_print(f"{method:<14}" + "".join(cells))
