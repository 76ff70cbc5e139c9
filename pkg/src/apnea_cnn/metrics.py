"""Confusion counts with apnea as the positive class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "Metrics":
        y_true = np.asarray(y_true)
        y_pred = np.asarray(y_pred)
        if y_true.shape != y_pred.shape:
            raise ValueError("label and prediction vectors differ in length")
        return cls(
            tp=int(((y_true == 1) & (y_pred == 1)).sum()),
            fp=int(((y_true == 0) & (y_pred == 1)).sum()),
            tn=int(((y_true == 0) & (y_pred == 0)).sum()),
            fn=int(((y_true == 1) & (y_pred == 0)).sum()),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @staticmethod
    def _pct(num: int, den: int) -> float | None:
        return 100.0 * num / den if den else None

    @property
    def accuracy(self) -> float | None:
        return self._pct(self.tp + self.tn, self.total)

    @property
    def sensitivity(self) -> float | None:
        return self._pct(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float | None:
        return self._pct(self.tn, self.tn + self.fp)

    @property
    def flagged(self) -> bool:
        """True when the ground truth holds no apnea windows, so sensitivity is undefined."""
        return self.tp + self.fn == 0

    def as_row(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": fmt_pct(self.accuracy),
            "sensitivity": fmt_pct(self.sensitivity),
            "specificity": fmt_pct(self.specificity),
        }


def fmt_pct(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def unweighted_mean(values) -> float | None:
    """Mean over the defined entries (``None`` skipped); ``None`` if nothing is defined."""
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None
