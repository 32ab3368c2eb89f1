"""Dataset handling, episodic K-way N-shot sampling, and the evaluation
protocol (mean accuracy with a 95% confidence interval).

Episodes draw K classes uniformly without replacement from the target
split, then N support and Q query items per class without replacement, and
relabel the sampled classes 0..K-1 in sampled order (novel classes carry no
global index). Reports serialize to JSON plus a one-line CSV summary
(External interface).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, ProtocolError

__all__ = ["Dataset", "Episode", "EvalReport", "sample_episode", "evaluate"]


@dataclass
class Dataset:
    """Items as parallel arrays: inputs (n, d) or (n, C, H, W) and integer
    labels (n,). ``role`` records which side of the domain gap this is."""

    inputs: np.ndarray
    labels: np.ndarray
    role: str = "source"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim not in (2, 4):
            raise DataError(
                f"dataset inputs must be (n, d) or (n, C, H, W), got {self.inputs.shape}"
            )
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise DataError(
                f"labels ({self.labels.shape}) do not match inputs "
                f"({self.inputs.shape[0]} items)"
            )
        if self.inputs.shape[0] == 0:
            raise DataError("empty dataset")
        if not np.all(np.isfinite(self.inputs)):
            raise DataError("dataset contains non-finite values")

    @property
    def n_items(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def class_indices(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in self.classes}


@dataclass
class Episode:
    """One K-way N-shot task: disjoint support and query sets with labels
    relabeled 0..K-1, plus the original-class map."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: dict[int, int]

    @property
    def n_way(self) -> int:
        return len(self.class_map)


def sample_episode(
    target: Dataset, n_way: int, n_shot: int, n_query: int, rng: np.random.Generator
) -> Episode:
    """Draw one episode from the target split.

    Classes are chosen uniformly without replacement; per class, n_shot +
    n_query distinct items are drawn, the first n_shot going to the support
    set. Raises ProtocolError naming the deficit when the split is too small.
    """
    if n_way < 2 or n_shot < 1 or n_query < 1:
        raise ContractError(
            f"need n_way >= 2, n_shot >= 1, n_query >= 1; got {n_way}/{n_shot}/{n_query}"
        )
    classes = target.classes
    if classes.size < n_way:
        raise ProtocolError(
            f"{n_way}-way episode needs {n_way} classes, target has {classes.size}"
        )
    per_class = target.class_indices()
    chosen = rng.choice(classes, size=n_way, replace=False)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    class_map: dict[int, int] = {}
    for new_label, original in enumerate(chosen):
        idxs = per_class[int(original)]
        need = n_shot + n_query
        if idxs.size < need:
            raise ProtocolError(
                f"class {int(original)} has {idxs.size} items, "
                f"{need} needed for {n_shot}-shot with {n_query} queries"
            )
        picked = idxs[rng.permutation(idxs.size)[:need]]
        sup_x.append(target.inputs[picked[:n_shot]])
        qry_x.append(target.inputs[picked[n_shot:]])
        sup_y.append(np.full(n_shot, new_label, dtype=np.int64))
        qry_y.append(np.full(n_query, new_label, dtype=np.int64))
        class_map[int(original)] = new_label
    return Episode(
        support_x=np.concatenate(sup_x),
        support_y=np.concatenate(sup_y),
        query_x=np.concatenate(qry_x),
        query_y=np.concatenate(qry_y),
        class_map=class_map,
    )


def evaluate(accuracies) -> tuple[float, float]:
    """Mean episode accuracy and the 95% interval 1.96 * s / sqrt(n), with s
    the sample standard deviation (n-1 denominator; 0 for a single episode)."""
    accs = np.asarray(list(accuracies), dtype=np.float64)
    if accs.size == 0:
        raise ContractError("no episode accuracies to evaluate")
    # constant lists have exactly zero spread; don't let summation rounding
    # manufacture a tiny ci95
    if accs.size == 1 or np.all(accs == accs[0]):
        return float(accs[0]), 0.0
    mean = float(accs.mean())
    std = float(accs.std(ddof=1))
    return mean, 1.96 * std / math.sqrt(accs.size)


@dataclass
class EvalReport:
    """Per-episode accuracies and flags, their mean and ci95, and the exact
    configuration echo; serializable as JSON and a one-line CSV summary."""

    accuracies: list[float]
    flags: list[list[str]]
    mean: float
    ci95: float
    config: dict
    config_hash: str
    seed: int
    backend: str
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "backend": self.backend,
            "notes": self.notes,
            "per_episode": [
                {"index": i, "accuracy": acc, "flags": fl}
                for i, (acc, fl) in enumerate(zip(self.accuracies, self.flags))
            ],
            "mean": self.mean,
            "ci95": self.ci95,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            accuracies=[e["accuracy"] for e in d["per_episode"]],
            flags=[e["flags"] for e in d["per_episode"]],
            mean=d["mean"],
            ci95=d["ci95"],
            config=d["config"],
            config_hash=d["config_hash"],
            seed=d["seed"],
            backend=d["backend"],
            notes=d.get("notes", []),
        )

    def csv_summary(self) -> str:
        """Header plus a single data line, for result tabulation."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        cfg = self.config
        writer.writerow(
            ["method", "ensemble", "n_way", "n_shot", "n_query",
             "episodes", "mean", "ci95", "seed", "config_hash"]
        )
        method = "+".join(
            name.upper() for name in ("bsr", "lp", "ent", "da") if cfg.get(name)
        ) or "baseline"
        writer.writerow(
            [method, cfg.get("ensemble", False), cfg.get("n_way"), cfg.get("n_shot"),
             cfg.get("n_query"), len(self.accuracies),
             f"{self.mean:.6f}", f"{self.ci95:.6f}", self.seed, self.config_hash]
        )
        return buf.getvalue()
