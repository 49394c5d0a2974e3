"""Experiment protocols: main noise sweep, pre-train duration sweep, extended fine-tuning.

Every protocol takes an :class:`ExperimentConfig` and returns a list of
:class:`RunRecord`, sorted by (eta, method, pretrain epochs, seed). Work is
split into per-seed units; pre-training inside a unit happens once per method
and is shared by every noise rate, which is sound because pre-training never
reads labels.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import LabeledDataset, derive_seed, inject_noise, load_dataset
from .detection import find_label_errors, score_detection
from .encoders import Encoder, EncoderConfig, load_checkpoint
from .ssl import PretrainResult, SslConfig, pretrain
from .training import FinetuneConfig, accuracy, finetune, predict_probs

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunRecord",
    "Runner",
    "run_main_sweep",
    "run_duration_sweep",
    "run_extended_training",
    "aggregate",
    "post_peak_decline",
    "write_runs_csv",
    "read_runs_csv",
    "write_summary_csv",
    "RUNS_HEADER",
    "SUMMARY_HEADER",
]

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _join(values) -> str:
    return ",".join(repr(v) for v in values)


@dataclass(frozen=True)
class ExperimentConfig:
    train_dataset: str = "synthetic:K=4,n=800,H=16"
    test_dataset: str = "synthetic:K=4,n=400,H=16"
    data_seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    methods: tuple[str, ...] = ("simclr",)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    noise_grid: tuple[float, ...] = (0.0, 0.4, 0.8)
    test_eta: float | None = None  # None: corrupt the test split at the train eta
    seeds: tuple[int, ...] = (0, 1, 2)
    milestones: tuple[int, ...] = (0, 5, 25)
    duration_eta: float = 0.4
    extended_eta: float = 0.6
    extended_epochs: int = 40
    out_dir: str = "runs"
    workers: int = 1
    reuse_checkpoints: bool = True

    def validate(self) -> "ExperimentConfig":
        etas = list(self.noise_grid) + [self.duration_eta, self.extended_eta]
        if self.test_eta is not None:
            etas.append(self.test_eta)
        if any(not 0.0 <= e <= 1.0 for e in etas):
            raise ConfigError(f"noise rates must lie in [0, 1], got {etas}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if list(self.milestones) != sorted(self.milestones) or len(set(self.milestones)) != len(self.milestones):
            raise ConfigError(f"milestones must be strictly ascending, got {list(self.milestones)}")
        if any(m < 0 for m in self.milestones):
            raise ConfigError("milestones must be non-negative")
        for m in self.methods:
            if m not in ("simclr", "barlow_twins"):
                raise ConfigError(f"unknown SSL method {m!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    # ---------------------------------------------------------- text format

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["dataset"] = {"train": self.train_dataset, "test": self.test_dataset,
                         "data_seed": str(self.data_seed)}
        cp["encoder"] = {"stem_width": str(self.encoder.stem_width),
                         "widths": _join(self.encoder.widths),
                         "blocks_per_stage": str(self.encoder.blocks_per_stage)}
        s = self.ssl
        cp["ssl"] = {"methods": ",".join(self.methods), "temperature": repr(s.temperature),
                     "lambda": repr(s.lam), "epochs": str(s.epochs),
                     "batch_size": str(s.batch_size), "lr": repr(s.lr),
                     "proj_dim": str(s.proj_dim)}
        f = self.finetune
        cp["finetune"] = {"epochs": str(f.epochs), "batch_size": str(f.batch_size), "lr": repr(f.lr)}
        cp["experiment"] = {
            "noise_grid": _join(self.noise_grid),
            "test_eta": "same" if self.test_eta is None else repr(self.test_eta),
            "seeds": _join(self.seeds),
            "milestones": _join(self.milestones),
            "duration_eta": repr(self.duration_eta),
            "extended_eta": repr(self.extended_eta),
            "extended_epochs": str(self.extended_epochs),
            "out": self.out_dir,
            "workers": str(self.workers),
            "reuse_checkpoints": "true" if self.reuse_checkpoints else "false",
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        d = cls()
        try:
            ds = cp["dataset"] if cp.has_section("dataset") else {}
            en = cp["encoder"] if cp.has_section("encoder") else {}
            ss = cp["ssl"] if cp.has_section("ssl") else {}
            ft = cp["finetune"] if cp.has_section("finetune") else {}
            ex = cp["experiment"] if cp.has_section("experiment") else {}
            encoder = EncoderConfig(
                stem_width=int(en.get("stem_width", d.encoder.stem_width)),
                widths=_ints(en["widths"]) if "widths" in en else d.encoder.widths,
                blocks_per_stage=int(en.get("blocks_per_stage", d.encoder.blocks_per_stage)),
            )
            methods = tuple(m.strip() for m in ss.get("methods", ",".join(d.methods)).split(",") if m.strip())
            ssl = replace(
                d.ssl,
                method=methods[0] if methods else d.ssl.method,
                temperature=float(ss.get("temperature", d.ssl.temperature)),
                lam=float(ss.get("lambda", d.ssl.lam)),
                epochs=int(ss.get("epochs", d.ssl.epochs)),
                batch_size=int(ss.get("batch_size", d.ssl.batch_size)),
                lr=float(ss.get("lr", d.ssl.lr)),
                proj_dim=int(ss.get("proj_dim", d.ssl.proj_dim)),
            )
            fcfg = replace(d.finetune, epochs=int(ft.get("epochs", d.finetune.epochs)),
                           batch_size=int(ft.get("batch_size", d.finetune.batch_size)),
                           lr=float(ft.get("lr", d.finetune.lr)))
            test_eta = ex.get("test_eta", "same")
            cfg = cls(
                train_dataset=ds.get("train", d.train_dataset),
                test_dataset=ds.get("test", d.test_dataset),
                data_seed=int(ds.get("data_seed", d.data_seed)),
                encoder=encoder,
                ssl=ssl,
                methods=methods,
                finetune=fcfg,
                noise_grid=_floats(ex["noise_grid"]) if "noise_grid" in ex else d.noise_grid,
                test_eta=None if test_eta.strip() == "same" else float(test_eta),
                seeds=_ints(ex["seeds"]) if "seeds" in ex else d.seeds,
                milestones=_ints(ex["milestones"]) if "milestones" in ex else d.milestones,
                duration_eta=float(ex.get("duration_eta", d.duration_eta)),
                extended_eta=float(ex.get("extended_eta", d.extended_eta)),
                extended_epochs=int(ex.get("extended_epochs", d.extended_epochs)),
                out_dir=ex.get("out", d.out_dir),
                workers=int(ex.get("workers", d.workers)),
                reuse_checkpoints=ex.get("reuse_checkpoints", "true").strip().lower() in ("1", "true", "yes"),
            )
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())


# --------------------------------------------------------------- run records

RUNS_HEADER = (
    "run_id", "experiment", "method", "eta", "pretrain_epochs", "seed", "finetune_epochs",
    "accuracy", "f1", "balanced_accuracy", "tp", "fp", "tn", "fn",
    "train_loss", "test_accuracy", "status",
)


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    experiment: str
    method: str
    eta: float
    pretrain_epochs: int
    seed: int
    finetune_epochs: int
    accuracy: float
    f1: float
    balanced_accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    train_loss: tuple[float, ...]
    test_accuracy: tuple[float, ...]
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def sort_key(self):
        return (self.experiment, self.eta, self.method, self.pretrain_epochs, self.seed)

    def to_row(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out.append(";".join(repr(float(x)) for x in v))
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_row(cls, row) -> "RunRecord":
        vals = dict(zip(RUNS_HEADER, row))
        kw = {}
        for f in fields(cls):
            raw = vals[f.name]
            if f.name in ("train_loss", "test_accuracy"):
                kw[f.name] = tuple(float(x) for x in raw.split(";") if x)
            elif f.name in ("eta", "accuracy", "f1", "balanced_accuracy"):
                kw[f.name] = float(raw)
            elif f.name in ("pretrain_epochs", "seed", "finetune_epochs", "tp", "fp", "tn", "fn"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


def _run_id(experiment, method, eta, pe, seed) -> str:
    return f"{experiment}-{method}-eta{eta:g}-pe{pe}-s{seed}"


def write_runs_csv(records, path) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUNS_HEADER)
    for r in records:
        w.writerow(r.to_row())
    text = buf.getvalue()
    Path(path).write_text(text)
    return text


def read_runs_csv(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RUNS_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
    return [RunRecord.from_row(r) for r in rows[1:]]


def post_peak_decline(trace) -> float:
    """Peak accuracy minus final accuracy (0 for an empty trace)."""
    if not trace:
        return 0.0
    return float(max(trace) - trace[-1])


# -------------------------------------------------------------------- runner


def _pretrain_fingerprint(cfg: ExperimentConfig, method: str) -> str:
    s = cfg.ssl
    payload = {
        "train": cfg.train_dataset, "data_seed": cfg.data_seed,
        "encoder": cfg.encoder.to_dict(), "method": method,
        "temperature": s.temperature, "lam": s.lam, "batch_size": s.batch_size,
        "lr": s.lr, "proj_dim": s.proj_dim, "augmentation": repr(s.augmentation),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


class Runner:
    """Holds the datasets and the per-(method, seed) pre-training cache for one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        self._train: LabeledDataset | None = None
        self._test: LabeledDataset | None = None
        self._pretrained: dict[tuple[str, int], PretrainResult | dict] = {}
        self.loss_rows: list[tuple[str, int, float]] = []

    @property
    def out(self) -> Path:
        return Path(self.cfg.out_dir)

    @property
    def train(self) -> LabeledDataset:
        if self._train is None:
            self._train = load_dataset(self.cfg.train_dataset, self.cfg.data_seed)
        return self._train

    @property
    def test(self) -> LabeledDataset:
        if self._test is None:
            self._test = load_dataset(self.cfg.test_dataset, self.cfg.data_seed + 1)
        return self._test

    # -- pre-training with an on-disk checkpoint cache

    def _ckpt_path(self, method, seed, epoch) -> Path:
        fp = _pretrain_fingerprint(self.cfg, method)
        return self.out / "checkpoints" / f"{method}-s{seed}-e{epoch}-{fp}.ckpt"

    def pretrained(self, method: str, seed: int, epochs_needed) -> dict[int, bytes]:
        """Checkpoint bytes for every epoch in ``epochs_needed`` (0 = initialization)."""
        epochs_needed = sorted(set(epochs_needed))
        key = (method, seed)
        cached = self._pretrained.get(key, {})
        if all(e in cached for e in epochs_needed):
            return cached
        paths = {e: self._ckpt_path(method, seed, e) for e in epochs_needed}
        if self.cfg.reuse_checkpoints and all(p.exists() for p in paths.values()):
            found = {e: p.read_bytes() for e, p in paths.items()}
            self._pretrained[key] = {**cached, **found}
            self._record_loss_trace(method, seed, found[max(found)])
            return self._pretrained[key]
        top = max(epochs_needed)
        # keep every configured milestone on the way so later sweeps can reuse them
        epochs_needed = sorted(set(epochs_needed) | {m for m in self.cfg.milestones if m <= top})
        paths = {e: self._ckpt_path(method, seed, e) for e in epochs_needed}
        scfg = replace(self.cfg.ssl, method=method, epochs=top,
                       milestones=tuple(e for e in epochs_needed if e > 0))
        log.info("pretraining %s seed %d for %d epochs", method, seed, top)
        res = pretrain(Encoder(self.cfg.encoder, seed), None, self.train, scfg, seed)
        ckpts = {}
        for e in epochs_needed:
            raw = _with_trace(res.checkpoints[e], res.loss_trace[:e])
            ckpts[e] = raw
            paths[e].parent.mkdir(parents=True, exist_ok=True)
            paths[e].write_bytes(raw)
        self._pretrained[key] = {**cached, **ckpts}
        self._record_loss_trace(method, seed, ckpts[top])
        return self._pretrained[key]

    def _record_loss_trace(self, method, seed, raw):
        _, config = load_checkpoint(raw)
        run_id = f"pretrain-{method}-s{seed}"
        self.loss_rows = [r for r in self.loss_rows if r[0] != run_id]
        self.loss_rows += [(run_id, i + 1, v) for i, v in enumerate(config.get("loss_trace", []))]

    # -- one supervised run

    def fit_and_evaluate(self, experiment: str, method: str, eta: float, pretrain_epochs: int,
                         seed: int, finetune_epochs: int, checkpoint: bytes | None = None,
                         predictions: dict | None = None) -> RunRecord:
        """Fine-tune one arm and score it. ``checkpoint`` overrides the encoder init.

        If ``predictions`` is a dict it receives the test probabilities, the
        corrupted test labels and the corruption mask.
        """
        run_id = _run_id(experiment, method, eta, pretrain_epochs, seed)
        try:
            if checkpoint is not None:
                encoder, _ = load_checkpoint(checkpoint)
            elif method == "baseline":
                encoder = Encoder(self.cfg.encoder, seed)
            else:
                raw = self.pretrained(method, seed, [pretrain_epochs])[pretrain_epochs]
                encoder, _ = load_checkpoint(raw)
            train_split = inject_noise(self.train, eta, seed)
            test_eta = eta if self.cfg.test_eta is None else self.cfg.test_eta
            test_split = inject_noise(self.test, test_eta, derive_seed(seed, "test-noise"))
            fcfg = replace(self.cfg.finetune, epochs=finetune_epochs)
            res = finetune(encoder, train_split, fcfg, seed, self.test)
            probs = predict_probs(res.encoder, res.head, self.test.images, res.norm)
            flagged = find_label_errors(probs, test_split.noisy_labels)
            rep = score_detection(flagged, test_split.corrupted_mask)
            if predictions is not None:
                predictions.update(probs=probs, given_labels=test_split.noisy_labels,
                                   mask=test_split.corrupted_mask, labels=self.test.labels)
            return RunRecord(
                run_id, experiment, method, float(eta), int(pretrain_epochs), int(seed),
                int(finetune_epochs), accuracy(probs, self.test.labels), rep.f1,
                rep.balanced_accuracy, rep.tp, rep.fp, rep.tn, rep.fn,
                tuple(res.train_loss), tuple(res.test_accuracy),
            )
        except Exception as exc:  # recorded, the sweep carries on
            log.error("run %s failed: %s", run_id, exc)
            nan = float("nan")
            return RunRecord(run_id, experiment, method, float(eta), int(pretrain_epochs),
                             int(seed), int(finetune_epochs), nan, nan, nan, 0, 0, 0, 0, (), (),
                             f"error: {type(exc).__name__}: {exc}".replace("\n", " "))

    def write_loss_csv(self) -> None:
        if not self.loss_rows:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("run_id", "epoch", "mean_loss"))
        for run_id, epoch, v in sorted(self.loss_rows):
            w.writerow((run_id, epoch, repr(v)))
        (self.out / "pretrain_loss.csv").write_text(buf.getvalue())


def _with_trace(raw: bytes, trace) -> bytes:
    from .encoders import checkpoint_bytes, parse_checkpoint

    arrays, config = parse_checkpoint(raw)
    config["loss_trace"] = [float(v) for v in trace]
    return checkpoint_bytes(arrays, config)


# ------------------------------------------------------------------ protocols


def _main_unit(cfg: ExperimentConfig, seed: int):
    runner = Runner(cfg)
    recs = []
    for eta in cfg.noise_grid:
        recs.append(runner.fit_and_evaluate("main", "baseline", eta, 0, seed, cfg.finetune.epochs))
        for m in cfg.methods:
            recs.append(runner.fit_and_evaluate("main", m, eta, cfg.ssl.epochs, seed,
                                                cfg.finetune.epochs))
    return recs, runner.loss_rows


def _duration_unit(cfg: ExperimentConfig, seed: int):
    runner = Runner(cfg)
    recs = []
    for m in cfg.methods:
        runner.pretrained(m, seed, cfg.milestones)
        for pe in cfg.milestones:
            recs.append(runner.fit_and_evaluate("duration", m, cfg.duration_eta, pe, seed,
                                                cfg.finetune.epochs))
    return recs, runner.loss_rows


def _extended_unit(cfg: ExperimentConfig, seed: int):
    runner = Runner(cfg)
    method = cfg.methods[0]
    recs = [
        runner.fit_and_evaluate("extended", "baseline", cfg.extended_eta, 0, seed, cfg.extended_epochs),
        runner.fit_and_evaluate("extended", method, cfg.extended_eta, cfg.ssl.epochs, seed,
                                cfg.extended_epochs),
    ]
    return recs, runner.loss_rows


def _dispatch(unit, cfg: ExperimentConfig) -> list[RunRecord]:
    seeds = sorted(cfg.seeds)
    if cfg.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(seeds))) as pool:
            results = list(pool.map(unit, [cfg] * len(seeds), seeds))
    else:
        results = [unit(cfg, s) for s in seeds]
    records = sorted((r for recs, _ in results for r in recs), key=lambda r: r.sort_key)
    loss_rows = sorted({row for _, rows in results for row in rows})
    if loss_rows:
        runner = Runner(cfg)
        runner.loss_rows = list(loss_rows)
        runner.write_loss_csv()
    return records


def run_main_sweep(cfg: ExperimentConfig) -> list[RunRecord]:
    """Baseline and each SSL arm at every (eta, seed)."""
    return _dispatch(_main_unit, cfg.validate())


def run_duration_sweep(cfg: ExperimentConfig) -> list[RunRecord]:
    """Fine-tune from each pre-training milestone at ``duration_eta``."""
    return _dispatch(_duration_unit, cfg.validate())


def run_extended_training(cfg: ExperimentConfig) -> list[RunRecord]:
    """Long fine-tuning at ``extended_eta``: baseline vs the first SSL method."""
    cfg = cfg.validate()
    if cfg.extended_epochs < 20:
        raise ConfigError(f"extended training needs >= 20 fine-tune epochs, got {cfg.extended_epochs}")
    return _dispatch(_extended_unit, cfg)


# ----------------------------------------------------------------- aggregate

SUMMARY_HEADER = (
    "experiment", "method", "eta", "pretrain_epochs", "n_seeds", "single_seed",
    "accuracy_mean", "accuracy_se", "f1_mean", "f1_se",
    "balanced_accuracy_mean", "balanced_accuracy_se",
    "peak_accuracy_mean", "peak_accuracy_se", "decline_mean", "decline_se", "note",
)


def _mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 1:
        return float(v[0]), 0.0
    return float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(v.size))


def aggregate(records) -> list[dict]:
    """Mean and standard error (sample std / sqrt(seeds)) per condition.

    A condition is (experiment, method, eta, pretrain epochs). Conditions whose
    runs all failed produce a row with empty statistics and a note. Record
    order does not matter: values are pooled in seed order.
    """
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.experiment, r.method, r.eta, r.pretrain_epochs), []).append(r)
    rows = []
    for key in sorted(groups):
        good = sorted((r for r in groups[key] if r.ok), key=lambda r: r.seed)
        row = dict(zip(SUMMARY_HEADER[:4], key))
        row["n_seeds"] = len(good)
        row["single_seed"] = len(good) == 1
        if not good:
            for name in SUMMARY_HEADER[6:-1]:
                row[name] = float("nan")
            row["note"] = "warning: no successful runs"
            log.warning("condition %s has no successful runs", key)
            rows.append(row)
            continue
        metrics = {
            "accuracy": [r.accuracy for r in good],
            "f1": [r.f1 for r in good],
            "balanced_accuracy": [r.balanced_accuracy for r in good],
            "peak_accuracy": [max(r.test_accuracy) if r.test_accuracy else r.accuracy for r in good],
            "decline": [post_peak_decline(r.test_accuracy) for r in good],
        }
        for name, vals in metrics.items():
            row[f"{name}_mean"], row[f"{name}_se"] = _mean_se(vals)
        row["note"] = "single seed: standard error reported as 0" if len(good) == 1 else ""
        rows.append(row)
    return rows


def write_summary_csv(rows, path) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else str(v) for v in (row[k] for k in SUMMARY_HEADER)])
    text = buf.getvalue()
    Path(path).write_text(text)
    return text


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k in ("experiment", "method", "note"):
                    row[k] = v
                elif k in ("pretrain_epochs", "n_seeds"):
                    row[k] = int(v)
                elif k == "single_seed":
                    row[k] = v == "True"
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows
