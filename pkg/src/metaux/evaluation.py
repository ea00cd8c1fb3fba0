"""Metrics (accuracy, macro-F1, unweighted average recall), multi-round
confidence intervals, robustness sweeps over corruption groups, and the
branch-weight sensitivity sweep."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .episodes import (CORRUPTION_OPERATORS, Pool, build_corruption_group, sample_episode,
                       episode_arrays)
from .graph import Tensor
from .losses import LossWeights
from .meta import (EpisodeShape, TAG_EVAL_EPISODE, TrainConfig, derive_seed, meta_train,
                   test_adapt)
from .model import ModelConfig, forward


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1 or len(preds) == 0:
        raise ValueError(f"need equal-length non-empty 1-d preds/labels, "
                         f"got {preds.shape} and {labels.shape}")
    if preds.min() < 0 or labels.min() < 0 or max(preds.max(), labels.max()) >= num_classes:
        raise ValueError(f"class indices must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    uar: float
    rounds: int = 1
    accuracy_ci95: float = 0.0
    macro_f1_ci95: float = 0.0
    uar_ci95: float = 0.0

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "macro_f1": self.macro_f1, "uar": self.uar,
            "rounds": self.rounds, "accuracy_ci95": self.accuracy_ci95,
            "macro_f1_ci95": self.macro_f1_ci95, "uar_ci95": self.uar_ci95,
        }


def compute_metrics(preds, labels, num_classes: int) -> MetricsReport:
    """Single-round metrics from predictions.

    Classes absent from ``labels`` are excluded from the UAR and macro-F1
    averages; a per-class F1 with an undefined precision counts as 0.
    """
    cm = confusion_matrix(preds, labels, num_classes)
    total = cm.sum()
    accuracy = float(np.trace(cm) / total)

    recalls, f1s = [], []
    for c in range(num_classes):
        support = cm[c, :].sum()
        if support == 0:
            continue
        tp = cm[c, c]
        recall = tp / support
        recalls.append(recall)
        predicted = cm[:, c].sum()
        if predicted == 0 or tp == 0:
            f1s.append(0.0)
        else:
            precision = tp / predicted
            f1s.append(2.0 * precision * recall / (precision + recall))
    return MetricsReport(accuracy=accuracy, macro_f1=float(np.mean(f1s)),
                         uar=float(np.mean(recalls)))


def _ci95(values: Sequence[float]) -> float:
    if len(values) <= 1:
        return 0.0
    return float(1.96 * np.std(values, ddof=1) / np.sqrt(len(values)))


def aggregate_rounds(rounds: Sequence[MetricsReport]) -> MetricsReport:
    accs = [r.accuracy for r in rounds]
    f1s = [r.macro_f1 for r in rounds]
    uars = [r.uar for r in rounds]
    return MetricsReport(
        accuracy=float(np.mean(accs)), macro_f1=float(np.mean(f1s)), uar=float(np.mean(uars)),
        rounds=len(rounds), accuracy_ci95=_ci95(accs), macro_f1_ci95=_ci95(f1s),
        uar_ci95=_ci95(uars),
    )


def _score_episode(params: Mapping[str, Tensor], pool: Pool, shape: EpisodeShape,
                   cfg: TrainConfig, model_cfg: ModelConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    task = sample_episode(pool, shape.way, shape.shots, shape.queries,
                          shape.aux_per_class, seed)
    adapted = test_adapt(params, task, cfg, model_cfg, steps=cfg.eval_adapt_steps)
    _, _, qx, qy, _ = episode_arrays(task)
    logits = forward(adapted.params, qx, model_cfg).logits.data
    return logits.argmax(axis=1), qy


def evaluate(params: Mapping[str, Tensor], pool: Pool, shape: EpisodeShape,
             num_episodes: int, rounds: int, cfg: TrainConfig, model_cfg: ModelConfig,
             seed: int | None = None, threads: int = 1) -> MetricsReport:
    """Adapt-then-score over fresh test episodes; metrics aggregated per
    round, 95% CI half-width = 1.96 * sd / sqrt(rounds) over rounds."""
    if rounds < 1 or num_episodes < 1:
        raise ValueError("rounds and num_episodes must be >= 1")
    base_seed = cfg.seed if seed is None else seed
    per_round = []
    for r in range(rounds):
        ep_seeds = [int(derive_seed(base_seed, TAG_EVAL_EPISODE, r, e).generate_state(1)[0])
                    for e in range(num_episodes)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as tp:
                scored = list(tp.map(
                    lambda s: _score_episode(params, pool, shape, cfg, model_cfg, s), ep_seeds))
        else:
            scored = [_score_episode(params, pool, shape, cfg, model_cfg, s) for s in ep_seeds]
        preds = np.concatenate([p for p, _ in scored])
        labels = np.concatenate([l for _, l in scored])
        per_round.append(compute_metrics(preds, labels, shape.way))
    return aggregate_rounds(per_round)


def robustness_sweep(params: Mapping[str, Tensor], pool: Pool, shape: EpisodeShape,
                     cfg: TrainConfig, model_cfg: ModelConfig,
                     proportions: Sequence[float] = (0.0, 0.1, 0.3, 0.5),
                     num_episodes: int = 50, rounds: int = 5, seed: int | None = None,
                     threads: int = 1) -> list[dict]:
    """Accuracy per corruption operator and proportion.

    The proportion-0 row is the clean baseline (every operator column holds
    the clean accuracy).  Group mean = arithmetic mean over operators.
    """
    rows = []
    for p in proportions:
        row: dict = {"proportion": p}
        if p == 0.0:
            rep = evaluate(params, pool, shape, num_episodes, rounds, cfg, model_cfg,
                           seed=seed, threads=threads)
            for op in CORRUPTION_OPERATORS:
                row[f"{op}_accuracy"] = rep.accuracy
                row[f"{op}_ci95"] = rep.accuracy_ci95
            row["mean_accuracy"] = rep.accuracy
            row["mean_ci95"] = rep.accuracy_ci95
        else:
            group = build_corruption_group(pool, p, seed=(cfg.seed if seed is None else seed))
            accs, cis = [], []
            for op in CORRUPTION_OPERATORS:
                rep = evaluate(params, group[op], shape, num_episodes, rounds, cfg,
                               model_cfg, seed=seed, threads=threads)
                row[f"{op}_accuracy"] = rep.accuracy
                row[f"{op}_ci95"] = rep.accuracy_ci95
                accs.append(rep.accuracy)
                cis.append(rep.accuracy_ci95)
            row["mean_accuracy"] = float(np.mean(accs))
            row["mean_ci95"] = float(np.mean(cis))
        rows.append(row)
    return rows


def lambda_sweep(pool: Pool, grid: Sequence[float], cfg: TrainConfig,
                 model_cfg: ModelConfig, shape: EpisodeShape, num_episodes: int = 50,
                 rounds: int = 5, threads: int = 1,
                 log_every: int = 0) -> list[dict]:
    """Retrain and evaluate per branch-weight grid point with shared seeds."""
    if not grid:
        raise ValueError("lambda grid must be non-empty")
    rows = []
    for lam in grid:
        run_cfg = replace(cfg, weights=LossWeights(lambda1=float(lam),
                                                   lambda2=float(1.0 - lam)))
        run_cfg.validate()
        params, _ = meta_train(pool, run_cfg, model_cfg, shape, threads=threads,
                               log_every=log_every)
        rep = evaluate(params, pool, shape, num_episodes, rounds, run_cfg, model_cfg,
                       threads=threads)
        rows.append({"lambda1": float(lam), "accuracy": rep.accuracy,
                     "accuracy_ci95": rep.accuracy_ci95, "macro_f1": rep.macro_f1,
                     "uar": rep.uar})
    return rows


# ---------------------------------------------------------------------------
# table output: CSV (header row, "." decimal, UTF-8) and JSON

def write_table_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    if not rows:
        raise ValueError("cannot write an empty table")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def write_table_json(rows: Sequence[Mapping], path: str | Path) -> None:
    Path(path).write_text(json.dumps(list(rows), indent=1), encoding="utf-8")
