"""
Batch prediction and evaluation with a fine-tuned checkpoint.
Writes JSONL predictions, EvalReport JSON + ROC CSV, optional provenance
split (clean / adversarial) and the list of misclassified rows.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.errors import CheckpointError
from data_processing.ip_featurizer import IpEmbeddingTable
from data_processing.tokenizer import Vocab
from data_processing.url_corpus import Dataset, Origin, UrlRecord
from evaluation.metrics import EvalReport, evaluate_probs
from neural.state import ModelState
from url_detection.model import class_names, class_targets, make_batch, predict_proba, run_config_of, vocab_of

logger = logging.getLogger(__name__)


@dataclass
class EvaluationResult:
    report: EvalReport
    probs: np.ndarray
    targets: np.ndarray
    by_origin: Dict[str, EvalReport] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        data = self.report.to_dict()
        if self.by_origin:
            data["by_origin"] = {name: r.to_dict(include_roc=False) for name, r in self.by_origin.items()}
        return data


class UrlPredictor:
    """Scores URL records with a full-model checkpoint, batch by batch, keeping run counters."""

    def __init__(self, state: ModelState, vocab: Optional[Vocab] = None,
                 ip_table: Optional[IpEmbeddingTable] = None, zero_ip: Optional[bool] = None,
                 batch_size: Optional[int] = None, progress: bool = True):
        self.state = state
        self.cfg = run_config_of(state)
        self.vocab = vocab if vocab is not None else vocab_of(state)
        if self.vocab is None:
            raise CheckpointError("checkpoint carries no vocabulary; pass one explicitly")
        if "bmmc.head.weight" not in state:
            raise CheckpointError("checkpoint holds an encoder only; fine-tune it before predicting")
        self.ip_table = ip_table
        # None follows the checkpoint: a model fine-tuned without f_ip is scored without it
        trained_zero_ip = bool(state.meta.get("zero_ip", False))
        if zero_ip is None:
            zero_ip = trained_zero_ip
        elif zero_ip != trained_zero_ip:
            logger.warning("zero_ip=%s but the checkpoint was fine-tuned with zero_ip=%s", zero_ip, trained_zero_ip)
        self.zero_ip = zero_ip
        self.batch_size = batch_size or self.cfg.train.batch_size
        self.progress = progress
        self.class_names = class_names(self.cfg.bmmc.n_classes)

        self.completed_count = 0
        self.missing_ip_count = 0
        self.total_count = 0

    def predict_records(self, records: Sequence[UrlRecord]) -> np.ndarray:
        """(N, K) class probabilities."""
        self.total_count += len(records)
        self.missing_ip_count += sum(1 for r in records if r.ip is None)
        out = np.zeros((len(records), self.cfg.bmmc.n_classes), dtype=np.float64)
        starts = range(0, len(records), self.batch_size)
        for start in tqdm(starts, desc="predict", disable=not self.progress, leave=False):
            chunk = records[start:start + self.batch_size]
            batch = make_batch(chunk, self.vocab, self.cfg, self.ip_table, with_targets=False)
            out[start:start + len(chunk)] = predict_proba(self.state, batch, self.cfg, zero_ip=self.zero_ip)
            self.completed_count += len(chunk)
        return out

    def prediction_rows(self, records: Sequence[UrlRecord], probs: np.ndarray) -> pd.DataFrame:
        rows = {"url": [r.raw for r in records]}
        for k, name in enumerate(self.class_names):
            rows[f"p_{name}"] = probs[:, k]
        rows["pred"] = [self.class_names[k] for k in probs.argmax(axis=1)]
        return pd.DataFrame(rows)

    def predict_dataset(self, ds: Dataset, output_path: Optional[str] = None) -> pd.DataFrame:
        """Predict every record; with output_path, write one JSON object per line."""
        start_time = datetime.now()
        df = self.prediction_rows(ds.records, self.predict_records(list(ds.records)))
        if output_path is not None:
            out = Path(output_path)
            out.parent.mkdir(parents=True, exist_ok=True)
            df.to_json(out, orient="records", lines=True)
            logger.info("Wrote %d predictions to %s", len(df), out)
        elapsed = (datetime.now() - start_time).total_seconds()
        logger.info("Predicted %d URLs in %.1fs", len(df), elapsed)
        return df

    def evaluate(self, ds: Dataset, threshold: Optional[float] = None, by_origin: bool = True) -> EvaluationResult:
        ecfg = self.cfg.eval
        threshold = ecfg.threshold if threshold is None else threshold
        records = list(ds.records)
        probs = self.predict_records(records)
        targets = class_targets(records, self.cfg.bmmc.n_classes)
        report = evaluate_probs(probs, targets, self.class_names, threshold, ecfg.fpr_levels, ecfg.roc_grid_points)

        splits: Dict[str, EvalReport] = {}
        origins = np.asarray([r.origin.value for r in records])
        if by_origin and (origins == Origin.ADVERSARIAL.value).any():
            for origin in Origin:
                idx = np.flatnonzero(origins == origin.value)
                if len(idx) == 0:
                    continue
                splits[origin.value] = evaluate_probs(probs[idx], targets[idx], self.class_names, threshold,
                                                      ecfg.fpr_levels, ecfg.roc_grid_points, allow_degenerate=True)
        return EvaluationResult(report, probs, targets, splits)

    @staticmethod
    def misclassified(ds: Dataset, result: EvaluationResult) -> pd.DataFrame:
        """Rows whose thresholded benign/malicious decision disagrees with the label."""
        p_malicious = 1.0 - result.probs[:, 0]
        predicted = p_malicious >= result.report.threshold
        wrong = np.flatnonzero(predicted != (result.targets != 0))
        return pd.DataFrame({
            "url": [ds.records[i].raw for i in wrong],
            "label": [ds.records[i].label.value for i in wrong],
            "p_malicious": p_malicious[wrong],
        })

    def get_session_summary(self) -> Dict:
        return {
            "total": self.total_count,
            "completed": self.completed_count,
            "missing_ip": self.missing_ip_count,
            "ip_table_misses": self.ip_table.misses if self.ip_table is not None else 0,
            "zero_ip": self.zero_ip,
        }

    def print_session_summary(self) -> None:
        summary = self.get_session_summary()
        print("\nPREDICTION SUMMARY")
        print(f"URLs scored: {summary['completed']}/{summary['total']} | without IP: {summary['missing_ip']}")
        if self.ip_table is not None:
            print(f"IP embedding table misses: {summary['ip_table_misses']}")
        if self.zero_ip:
            print("IP branch zeroed (ablation)")


def print_report(report: EvalReport, title: str = "EVALUATION") -> None:
    print(f"\n{title}")
    print(f"n={report.n} | tp={report.tp} fp={report.fp} tn={report.tn} fn={report.fn}")
    print(f"accuracy {report.accuracy:.4f} | precision {report.precision:.4f} | "
          f"recall {report.recall:.4f} | f1 {report.f1:.4f}")
    if report.auc is not None:
        print(f"AUC {report.auc:.4f}")
        for level, tpr in report.tpr_at_fpr.items():
            print(f"  TPR @ FPR {level:>7s}: {tpr:.4f}")
    if report.macro:
        print(f"macro-AUC {report.macro['auc']:.4f}")
        for name, metrics in report.per_class.items():
            print(f"  {name:10s} acc {metrics['accuracy']:.4f}  f1 {metrics['f1']:.4f}  auc {metrics['auc']:.4f}")
    if report.undefined:
        print(f"undefined: {', '.join(report.undefined)}")


def write_errors(df: pd.DataFrame, path: str) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out, index=False)
    logger.info("Wrote %d misclassified rows to %s", len(df), out)

