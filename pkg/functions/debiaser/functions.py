import hashlib
import json
import logging
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import wraps
from typing import Dict, List, Tuple

import numpy as np
import regex as re
from scipy.stats import spearmanr

from .config import RunConfig
from .data import Dataset, filter_attributes, load_dataset, save_dataset, synth_generate
from .images import save_reconstruction_grid, svg_to_png
from .metrics import (
    CategorySummary,
    MetricsReport,
    SpilloverRow,
    category_summary,
    evaluate,
    spillover_report,
    transform_images,
)
from .networks import ClassifierParams, UNetParams, load_checkpoint, save_checkpoint
from .plots import Series, emit_svg_line_chart
from .reports import (
    CATEGORY_COLUMNS,
    METRICS_COLUMNS,
    SPILLOVER_COLUMNS,
    SWEEP_COLUMNS,
    SweepRow,
    atomic_write,
    category_rows,
    metrics_rows,
    spillover_rows,
    write_csv,
)
from .training import TrainLog, pretrain_classifier, train_debiaser

logger = logging.getLogger(__name__)


def error_logger(func):
    @wraps(func)
    def inner(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception:
            logger.error(f"ERROR :: {func.__name__}(args={args[1:]}, kwargs={kwargs}):\n{traceback.format_exc()}")
            raise

    return inner


@dataclass
class SweepResult:
    rows: List[SweepRow]
    spearman_dp: float
    spearman_ap: float


@dataclass
class SpilloverResult:
    rows: List[SpilloverRow]
    pearson_r: float
    categories: List[CategorySummary]


class DebiasPipeline:
    """Each method is one CLI subcommand; all inputs and outputs live under
    the directories named in the run config."""

    def __init__(self, config: RunConfig):
        self.config = config

    @property
    def commands(self):
        return {
            "gen": self.gen,
            "pretrain": self.pretrain,
            "train": self.train,
            "eval": self.evaluate,
            "sweep": self.sweep,
            "spillover": self.spillover,
        }

    # paths

    def _data(self, *parts: str) -> str:
        return os.path.join(self.config.paths.data_dir, *parts)

    def _checkpoint(self, *parts: str) -> str:
        return os.path.join(self.config.paths.checkpoint_dir, *parts)

    def _report(self, *parts: str) -> str:
        return os.path.join(self.config.paths.report_dir, *parts)

    def _attribute_checkpoint(self, name: str) -> str:
        return self._checkpoint("attributes", re.sub(r"[^\w-]", "_", name) + ".ckpt")

    def _require(self, path: str, hint: str) -> str:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Missing {path}; run `{hint}` first.")
        return path

    def _load_split(self, split: str) -> Dataset:
        gen = self.config.gen
        directory = self._require(self._data(split), "gen")
        dataset = load_dataset(directory, gen.target_name, gen.protected_name)
        if dataset.aux_names == gen.attribute_names:
            dataset = replace(dataset, aux_categories=gen.attribute_categories)
        return dataset

    def _load_classifier(self) -> ClassifierParams:
        return load_checkpoint(self._require(self._checkpoint("classifier.ckpt"), "pretrain"), ClassifierParams)

    def _load_unet(self) -> UNetParams:
        return load_checkpoint(self._require(self._checkpoint("unet.ckpt"), "train"), UNetParams)

    def _evaluate_pair(self, classifier: ClassifierParams, unet: UNetParams, test: Dataset) -> List[MetricsReport]:
        ev = self.config.evaluation
        return [
            evaluate(classifier, None, test, ev.threshold, ev.batch_size, name="original"),
            evaluate(classifier, unet, test, ev.threshold, ev.batch_size, name="reconstructed"),
        ]

    def _emit_chart(self, series: List[Series], path: str, title: str, x_label: str, y_label: str):
        emit_svg_line_chart(series, path, title, x_label, y_label)
        if self.config.plots.png:
            svg_to_png(path)

    # commands

    @error_logger
    def gen(self) -> Tuple[Dataset, Dataset]:
        "Generate the synthetic train/test sets and write the fully-defaulted config."
        train, test = synth_generate(self.config.gen, threads=self.config.threads)
        save_dataset(train, self._data("train"))
        save_dataset(test, self._data("test"))
        atomic_write(self._data("config.json"), self.config.dumps())
        return train, test

    @error_logger
    def pretrain(self) -> ClassifierParams:
        "Train the two-headed (target, protected) classifier on the original images."
        classifier = pretrain_classifier(self._load_split("train"), self.config.pretrain)
        save_checkpoint(classifier, self._checkpoint("classifier.ckpt"))
        return classifier

    @error_logger
    def train(self) -> Tuple[UNetParams, TrainLog]:
        "Train the de-biasing U-net, then evaluate it on the test set."
        classifier = self._load_classifier()
        unet, log = train_debiaser(self._load_split("train"), classifier, self.config.debias)
        save_checkpoint(unet, self._checkpoint("unet.ckpt"))
        atomic_write(self._report("train_log.csv"), log.to_csv())

        reports = self._evaluate_pair(classifier, unet, self._load_split("test"))
        log.final_metrics = reports[-1]
        write_csv(self._report("metrics.csv"), METRICS_COLUMNS, metrics_rows(reports))
        return unet, log

    @error_logger
    def evaluate(self) -> List[MetricsReport]:
        "Metrics through the frozen classifier on original vs reconstructed test images."
        classifier, unet = self._load_classifier(), self._load_unet()
        test = self._load_split("test")
        reports = self._evaluate_pair(classifier, unet, test)
        write_csv(self._report("metrics.csv"), METRICS_COLUMNS, metrics_rows(reports))

        sample = test.images[:8]
        save_reconstruction_grid(sample, transform_images(unet, sample), self._report("reconstructions.png"))
        return reports

    def _sweep_point(self, lam: float, train: Dataset, test: Dataset, classifier: ClassifierParams) -> SweepRow:
        grid, ev = self.config.sweep, self.config.evaluation
        reports = []
        for repeat in range(grid.repeats):
            hyper = replace(self.config.debias, lam=lam, epochs=grid.epochs, seed=self.config.debias.seed + repeat)
            unet, _ = train_debiaser(train, classifier, hyper)
            reports.append(evaluate(classifier, unet, test, ev.threshold, ev.batch_size))

        def stats(column: str) -> Tuple[float, float]:
            values = np.array([getattr(r, column) for r in reports])
            return float(values.mean()), float(values.std())

        (ap_mean, ap_sd), (dp_mean, dp_sd), (deo_mean, deo_sd) = stats("ap"), stats("dp"), stats("deo")
        logger.info(f"Sweep lambda={lam:g}: AP={ap_mean:.4f} DP={dp_mean:.4f} DEO={deo_mean:.4f}")
        return SweepRow(
            {
                "lambda": lam,
                "ap_mean": ap_mean,
                "ap_sd": ap_sd,
                "dp_mean": dp_mean,
                "dp_sd": dp_sd,
                "deo_mean": deo_mean,
                "deo_sd": deo_sd,
            }
        )

    @error_logger
    def sweep(self) -> SweepResult:
        """Train `repeats` one-epoch U-nets per lambda on the grid and record
        mean and sd of AP, DP and DEO. Grid points may run on a thread pool;
        rows are assembled in grid order."""
        classifier = self._load_classifier()
        train, test = self._load_split("train"), self._load_split("test")
        lambdas = self.config.sweep.values()

        def point(lam: float) -> SweepRow:
            return self._sweep_point(lam, train, test, classifier)

        if self.config.threads > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
                rows = list(pool.map(point, lambdas))
        else:
            rows = [point(lam) for lam in lambdas]

        write_csv(self._report("sweep.csv"), SWEEP_COLUMNS, rows)
        for metric, title in (("ap", "Average precision"), ("dp", "Demographic parity gap"), ("deo", "DEO")):
            series = Series(
                metric.upper(),
                [r["lambda"] for r in rows],
                [r[f"{metric}_mean"] for r in rows],
                [r[f"{metric}_sd"] for r in rows],
            )
            self._emit_chart([series], self._report(f"sweep_{metric}.svg"), f"{title} vs lambda", "lambda", metric.upper())

        result = SweepResult(
            rows,
            self._spearman(lambdas, [r["dp_mean"] for r in rows]),
            self._spearman(lambdas, [r["ap_mean"] for r in rows]),
        )
        logger.info(f"Spearman(lambda, DP)={result.spearman_dp:.3f}, Spearman(lambda, AP)={result.spearman_ap:.3f}")
        return result

    @staticmethod
    def _spearman(x: List[float], y: List[float]) -> float:
        if len(x) < 2 or len(set(y)) < 2:
            return float("nan")
        return float(spearmanr(x, y).correlation)

    def _training_key(self, train: Dataset, name: str) -> str:
        "Identifies the images, labels and hyperparameters an attribute classifier is fitted on."
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(train.images).tobytes())
        digest.update(np.ascontiguousarray(train.label(name)).tobytes())
        digest.update(json.dumps(asdict(self.config.pretrain), sort_keys=True).encode("utf-8"))
        return digest.hexdigest()

    def _attribute_classifiers(self, train: Dataset) -> Dict[str, ClassifierParams]:
        """Single-head classifiers per auxiliary attribute, cached as checkpoints.

        A cached checkpoint is reused only when its `.key` sidecar matches the
        current training data and pretrain settings."""
        classifiers = {}
        for name in train.aux_names:
            path = self._attribute_checkpoint(name)
            key_path = path + ".key"
            key = self._training_key(train, name)
            if os.path.exists(path) and os.path.exists(key_path):
                with open(key_path, "r", encoding="utf-8") as f:
                    if f.read().strip() == key:
                        classifiers[name] = load_checkpoint(path, ClassifierParams)
                        continue
            if os.path.exists(path):
                logger.info(f"Cached classifier for {name} was fitted on other data or settings; retraining")
            classifiers[name] = pretrain_classifier(train, self.config.pretrain, targets=[name])
            save_checkpoint(classifiers[name], path)
            atomic_write(key_path, key + "\n")
        return classifiers

    @error_logger
    def spillover(self) -> SpilloverResult:
        """Per-attribute HSIC with the target against the change in that
        attribute's demographic parity after reconstruction."""
        ev = self.config.evaluation
        unet = self._load_unet()
        train = filter_attributes(self._load_split("train"), ev.min_positive_rate)
        test = self._load_split("test")
        classifiers = self._attribute_classifiers(train)

        rows, r = spillover_report(
            train, classifiers, unet, test, ev.threshold, ev.hsic_samples, self.config.seed, ev.batch_size
        )
        categories = category_summary(rows)
        write_csv(self._report("spillover.csv"), SPILLOVER_COLUMNS, spillover_rows(rows))
        write_csv(self._report("categories.csv"), CATEGORY_COLUMNS, category_rows(categories))

        if len(rows) >= 2:
            index = list(range(1, len(rows) + 1))
            self._emit_chart(
                [
                    Series("HSIC with target", index, [row.hsic_with_target for row in rows]),
                    Series("|dDP|", index, [row.dp_delta_abs for row in rows]),
                ],
                self._report("spillover.svg"),
                f"Attribute spillover (Pearson r = {r:.3f})",
                "attribute",
                "value",
            )
        return SpilloverResult(rows, r, categories)
