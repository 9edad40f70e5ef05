"""Pretraining, per-speaker adaptation sessions, evaluation and experiment grids."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import standardize
from .dataset import SessionSpec, get_vocabulary, make_session
from .model import KwsModel, apply_policy, load_checkpoint
from .optim import Adam, EarlyStopping, PlateauScheduler
from .tensor import Tensor, softmax_cross_entropy

log = logging.getLogger(__name__)
EVAL_BATCH = 256


class TrainingDiverged(FloatingPointError):
    pass


class DataLeakError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    patience: int = 10
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-6
    seed: int = 0

    @classmethod
    def pretraining(cls, **kw):
        return cls(**kw)

    @classmethod
    def online(cls, **kw):
        return cls(**{"batch_size": 10, "lr": 1e-5, "patience": 5, **kw})


@dataclass
class LabeledSet:
    features: np.ndarray  # (N, frames, coefficients, 1), standardized
    labels: np.ndarray
    speakers: list
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledSet(self.features[idx], self.labels[idx], [self.speakers[i] for i in idx],
                          [self.paths[i] for i in idx] if self.paths else [])


def build_set(records, vocabulary, featurize, stats, root=None) -> LabeledSet:
    """Featurize ``records`` (paths relative to ``root``) into a LabeledSet."""
    if not records:
        return LabeledSet(np.zeros((0, 49, 10, 1), np.float32), np.zeros(0, np.int64), [], [])
    feats = [standardize(featurize(Path(root, r.path) if root else r.path), stats) for r in records]
    return LabeledSet(np.stack(feats)[..., None], np.array([vocabulary.index(r.word) for r in records]),
                      [r.speaker for r in records], [r.path for r in records])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class _Runner:
    """Forward passes for one model; with a frozen backbone the pooled
    activations of each set are computed once and reused."""

    def __init__(self, model: KwsModel, cache_sets=()):
        self.model = model
        self.cached = {}
        if model.backbone_frozen:
            for s in cache_sets:
                self.cached[id(s)] = self._pooled(s)

    def _pooled(self, data):
        out = [self.model.backbone(data.features[i : i + EVAL_BATCH]).data for i in range(0, len(data), EVAL_BATCH)]
        return np.concatenate(out) if out else np.zeros((0, self.model.config.pooled_width), np.float32)

    def logits(self, data, idx, training=False):
        speakers = [data.speakers[i] for i in idx]
        pooled = self.cached.get(id(data))
        if pooled is not None:
            return self.model.head(Tensor(pooled[idx]), speakers)
        return self.model.forward(data.features[idx], speakers, training=training)

    def loss_and_error(self, data):
        if len(data) == 0:
            raise ValueError("evaluation over an empty record list")
        total, wrong = 0.0, 0
        for start in range(0, len(data), EVAL_BATCH):
            idx = np.arange(start, min(start + EVAL_BATCH, len(data)))
            logits = self.logits(data, idx)
            total += float(softmax_cross_entropy(logits, data.labels[idx]).data) * len(idx)
            wrong += int((logits.data.argmax(axis=1) != data.labels[idx]).sum())
        return total / len(data), 100.0 * wrong / len(data)

    def train_epoch(self, data, optimizer, batch_size, rng):
        total = 0.0
        for idx in _batches(len(data), batch_size, rng):
            optimizer.zero_grad()
            loss = softmax_cross_entropy(self.logits(data, idx, training=True), data.labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite training loss {float(loss.data)}")
            loss.backward()
            optimizer.step()
            total += float(loss.data) * len(idx)
        return total / len(data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    val_loss: float
    val_error: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list
    best_epoch: int
    best_val_loss: float

    def to_dict(self):
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val_loss}


def _fit(model, runner, train, val, config, initial=None):
    """Shared loop: Adam on the trainable parameters, plateau scheduling and
    early stopping on validation loss, best weights restored at the end."""
    optimizer = Adam([p for p in model.parameters() if p.trainable], lr=config.lr)
    scheduler = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience, config.min_lr)
    stopper = EarlyStopping(config.patience)
    epochs, best_state = [], None
    if initial is not None:
        stopper.update(0, initial[0])
        scheduler.best = initial[0]
        epochs.append(EpochRecord(0, None, initial[0], initial[1], config.lr))
        best_state = model.state_dict()
    batch_size = max(1, min(config.batch_size, len(train)))
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        train_loss = runner.train_epoch(train, optimizer, batch_size, rng)
        val_loss, val_error = runner.loss_and_error(val)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        epochs.append(EpochRecord(epoch, train_loss, val_loss, val_error, optimizer.lr))
        log.debug("epoch %d train %.4f val %.4f err %.2f%%", epoch, train_loss, val_loss, val_error)
        if stopper.update(epoch, val_loss):
            best_state = model.state_dict()
        optimizer.lr = scheduler.step(val_loss)
        if stopper.should_stop:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainHistory(epochs, max(stopper.best_epoch, 0), stopper.best)


def pretrain(model: KwsModel, train: LabeledSet, val: LabeledSet, config: TrainConfig = None) -> TrainHistory:
    """Jointly train backbone, embedding table and classifier; leaves the model
    at its best-validation-loss weights."""
    config = config or TrainConfig.pretraining()
    if len(train) == 0 or len(val) == 0:
        raise ValueError("pretraining needs non-empty train and validation sets")
    missing = sorted({s for s in train.speakers + val.speakers if s not in model.embedding})
    if missing and model.config.fusion != "none":
        raise ValueError(f"{len(missing)} speakers not registered, e.g. {missing[:3]}")
    apply_policy(model, "full")
    return _fit(model, _Runner(model), train, val, config)


@dataclass
class SessionResult:
    speaker: str
    seed: int
    policy: str
    samples_per_class: int | None
    classes_per_speaker: int | None
    train_loss: list
    val_loss: list
    val_error: list
    test_error: float
    baseline_test_error: float
    epochs_to_best: int
    epochs_run: int

    def to_dict(self):
        return asdict(self)


def evaluate(model: KwsModel, data: LabeledSet, allow_unregistered=False) -> float:
    """Top-1 error percentage. With ``allow_unregistered``, unknown speakers are
    evaluated with the identity row of a freshly added speaker."""
    if len(data) == 0:
        raise ValueError("evaluation over an empty record list")
    if allow_unregistered and model.config.fusion != "none":
        unknown = sorted({s for s in data.speakers if s not in model.embedding})
        if unknown:
            model = model.copy()
            for s in unknown:
                model.add_speaker(s)
    return _Runner(model).loss_and_error(data)[1]


def adapt_speaker(model: KwsModel, speaker, train: LabeledSet, val: LabeledSet, test: LabeledSet,
                  policy="embedding-only", config: TrainConfig = None, spec: SessionSpec = None) -> SessionResult:
    """One online-learning session, adapting ``model`` in place.

    The speaker is registered with the fusion-identity row if needed. Epoch 0 is
    the unadapted model; the best-validation-loss state (possibly epoch 0) is
    restored before the test set is scored, exactly once.
    """
    config = config or TrainConfig.online()
    if len(train) == 0:
        raise ValueError("adaptation needs a non-empty training set")
    seen = set(train.paths) | set(val.paths)
    if seen & set(test.paths):
        raise DataLeakError(f"test utterances in the training/validation data: {sorted(seen & set(test.paths))[:3]}")
    if set(train.paths) & set(val.paths):
        raise DataLeakError("validation utterances in the training data")
    if model.config.fusion != "none" and speaker not in model.embedding:
        model.add_speaker(speaker)
    apply_policy(model, policy, speaker if model.config.fusion != "none" else None)
    runner = _Runner(model, cache_sets=(train, val, test))
    baseline_test = runner.loss_and_error(test)[1]
    initial = runner.loss_and_error(val)
    history = _fit(model, runner, train, val, config, initial=initial)
    test_error = runner.loss_and_error(test)[1]
    recs = history.epochs
    return SessionResult(
        speaker=speaker, seed=config.seed, policy=policy,
        samples_per_class=spec.samples_per_class if spec else None,
        classes_per_speaker=spec.classes_per_speaker if spec else None,
        train_loss=[r.train_loss for r in recs], val_loss=[r.val_loss for r in recs],
        val_error=[r.val_error for r in recs], test_error=test_error, baseline_test_error=baseline_test,
        epochs_to_best=history.best_epoch, epochs_run=len(recs) - 1,
    )


def write_learning_curve(path, epochs):
    """CSV of (epoch, train_loss, val_loss, val_error); accepts EpochRecords or a SessionResult."""
    if isinstance(epochs, SessionResult):
        r = epochs
        rows = [(i, t, v, e) for i, (t, v, e) in enumerate(zip(r.train_loss, r.val_loss, r.val_error))]
    else:
        rows = [(e.epoch, e.train_loss, e.val_loss, e.val_error) for e in epochs]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_error"])
        for epoch, t, v, e in rows:
            w.writerow([epoch, "" if t is None else f"{t:.6f}", f"{v:.6f}", f"{e:.4f}"])


# grids --------------------------------------------------------------------
@dataclass
class ExperimentGrid:
    checkpoint: str
    vocabulary: str = "GSC10"
    samples_per_class: list = field(default_factory=lambda: [4, None])
    classes_per_speaker: list = field(default_factory=lambda: [10])
    policies: list = field(default_factory=lambda: ["embedding-only"])
    speakers: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train_config: TrainConfig = field(default_factory=TrainConfig.online)

    def tasks(self):
        for k in self.samples_per_class:
            for c in self.classes_per_speaker:
                for policy in self.policies:
                    for speaker in self.speakers:
                        for seed in self.seeds:
                            yield k, c, policy, speaker, seed


@dataclass
class GridRow:
    vocabulary: str
    samples_per_class: str
    classes_per_speaker: int
    policy: str
    runs: int
    baseline_mean: float
    baseline_std: float
    error_mean: float
    error_std: float


def run_session(checkpoint, records, vocabulary, featurize, root, spec: SessionSpec, policy,
                config: TrainConfig) -> SessionResult:
    """Load a fresh copy of ``checkpoint`` and run one seeded session."""
    model = load_checkpoint(checkpoint)
    vocab = get_vocabulary(vocabulary)
    session = make_session(records, vocab, spec)
    sets = [build_set(s, vocab, featurize, model.stats, root) for s in (session.train, session.val, session.test)]
    return adapt_speaker(model, spec.speaker, *sets, policy=policy, config=replace(config, seed=spec.seed), spec=spec)


def _run_task(args):
    grid, records, featurize, root, (k, c, policy, speaker, seed) = args
    spec = SessionSpec(speaker, k, c, seed)
    return run_session(grid.checkpoint, records, grid.vocabulary, featurize, root, spec, policy, grid.train_config)


def _std(values):
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def run_grid(grid: ExperimentGrid, records, featurize, root=None, out_dir=None, jobs=1):
    """Run every (cell, policy, speaker, seed) session and aggregate mean/std per
    cell alongside the unadapted baseline. Writes ``grid.csv`` and per-run JSON
    under ``out_dir`` when given."""
    if not Path(grid.checkpoint).is_file():
        raise FileNotFoundError(f"missing checkpoint: {grid.checkpoint}")
    tasks = list(grid.tasks())
    payload = [(grid, records, featurize, root, t) for t in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, payload))
    else:
        results = [_run_task(p) for p in payload]

    cells = {}
    for (k, c, policy, _, _), res in zip(tasks, results):
        cells.setdefault((k, c, policy), []).append(res)
    rows = []
    for (k, c, policy), res in cells.items():
        errs = [r.test_error for r in res]
        base = [r.baseline_test_error for r in res]
        rows.append(GridRow(grid.vocabulary, "all" if k is None else str(k),
                            c or len(get_vocabulary(grid.vocabulary)), policy, len(res),
                            float(np.mean(base)), _std(base), float(np.mean(errs)), _std(errs)))
    if out_dir is not None:
        out = Path(out_dir)
        for (k, c, policy, speaker, seed), res in zip(tasks, results):
            name = f"{policy}_k{k or 'all'}_c{c or 'all'}_{speaker}_s{seed}.json"
            (out / "runs").mkdir(parents=True, exist_ok=True)
            (out / "runs" / name).write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True))
        write_grid_csv(out / "grid.csv", rows)
    return rows


def write_grid_csv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(GridRow.__dataclass_fields__))
        for r in rows:
            d = asdict(r)
            w.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in d.values()])
