"""Adam, unweighted accuracy, early stopping and leave-one-session-out CV."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import collate
from .diffcore import cross_entropy
from .errors import ConfigError, ContractError, DataError, MetricError, NumericalError
from .models import FusionModel, ModelSpec, Prediction, build_model, posterior_of

log = logging.getLogger(__name__)


# -- optimiser -----------------------------------------------------------------
class Adam:
    """Bias-corrected Adam over a fixed list of parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads=None) -> None:
        """Apply one update using ``grads`` (defaults to each ``param.grad``)."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ContractError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- metric --------------------------------------------------------------------
def unweighted_accuracy(predictions, labels, n_classes: int = 4, strict: bool = True) -> float:
    """Mean per-class recall.

    With ``strict`` every class must occur in ``labels``; otherwise absent
    classes are skipped with a warning.
    """
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape:
        raise MetricError(f"{pred.shape[0]} predictions for {true.shape[0]} labels")
    recalls = []
    for c in range(n_classes):
        sel = true == c
        if not sel.any():
            if strict:
                raise MetricError(f"class {c} does not occur in the labels")
            log.warning("class %d absent from labels; UA averages present classes only", c)
            continue
        recalls.append(float(np.mean(pred[sel] == c)))
    if not recalls:
        raise MetricError("no labels to score")
    return float(np.mean(recalls))


# -- early stopping ------------------------------------------------------------
@dataclass
class EarlyStopping:
    patience: int = 10
    best: float = -math.inf
    best_epoch: int = 0
    bad_epochs: int = 0

    def update(self, metric: float, epoch: int) -> bool:
        """Record ``metric`` for ``epoch``; False means stop. Ties do not count as gains."""
        if metric > self.best:
            self.best, self.best_epoch, self.bad_epochs = metric, epoch, 0
            return True
        self.bad_epochs += 1
        return self.bad_epochs < self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


# -- training ------------------------------------------------------------------
@dataclass
class TrainConfig:
    lr: float | None = None
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.10
    repeats: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1 or self.repeats < 1:
            raise ConfigError("batch_size, max_epochs, patience and repeats must be >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    def lr_for(self, spec: ModelSpec) -> float:
        return spec.default_lr if self.lr is None else self.lr


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_ua: float
    val_loss: float
    val_ua: float


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "epochs": [asdict(e) for e in self.epochs]}


def batches(utterances, keys, size):
    for i in range(0, len(utterances), size):
        yield collate(utterances[i:i + size], keys)


def evaluate(model: FusionModel, utterances, batch_size: int = 32) -> tuple[Prediction, float]:
    """Eval-mode predictions and mean cross-entropy over ``utterances``."""
    keys = model.spec.inputs
    logits, ids, total = [], [], 0.0
    for b in batches(utterances, keys, batch_size):
        out = model(b)
        total += float(cross_entropy(out, b.labels).data) * len(b)
        logits.append(out.data)
        ids.extend(b.ids)
    stacked = np.concatenate(logits, axis=0)
    return Prediction(stacked, posterior_of(stacked), ids), total / len(utterances)


def train_model(spec: ModelSpec, train, val, config: TrainConfig) -> tuple[FusionModel, History]:
    """Mini-batch Adam on cross-entropy, early-stopped on validation UA.

    The returned model carries the weights of the best validation epoch.
    """
    if not train or not val:
        raise DataError("training and validation sets must both be non-empty")
    present = {u.label for u in train}
    missing = set(range(spec.n_classes)) - present
    if missing:
        raise DataError(f"training set lacks classes {sorted(missing)}")
    model = build_model(spec)
    params = model.parameters()
    opt = Adam(params, lr=config.lr_for(spec))
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    history = History()
    best_state = model.state_dict()
    keys = spec.inputs
    val_labels = np.array([u.label for u in val])
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        shuffled = [train[i] for i in order]
        loss_sum, preds, labels = 0.0, [], []
        for b in batches(shuffled, keys, config.batch_size):
            opt.zero_grad()
            logits = model(b, rng=rng)
            loss = cross_entropy(logits, b.labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite training loss {value} at epoch {epoch}")
            loss.backward()
            opt.step()
            loss_sum += value * len(b)
            preds.append(logits.data.argmax(axis=-1))
            labels.append(b.labels)
        train_ua = unweighted_accuracy(np.concatenate(preds), np.concatenate(labels),
                                       spec.n_classes, strict=False)
        pred, val_loss = evaluate(model, val, config.batch_size)
        val_ua = unweighted_accuracy(pred.labels, val_labels, spec.n_classes, strict=False)
        history.epochs.append(EpochRecord(epoch, loss_sum / len(train), train_ua, val_loss, val_ua))
        keep_going = stopper.update(val_ua, epoch)
        if stopper.improved:
            best_state = model.state_dict()
        if not keep_going:
            break
    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    return model, history


# -- cross-validation ----------------------------------------------------------
@dataclass
class FoldReport:
    repeat: int
    fold: int
    test_session: str
    seed: int
    n_train: int
    n_val: int
    n_test: int
    best_epoch: int
    test_ua: float
    history: History
    val_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "history"}
        d["history"] = self.history.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FoldReport":
        d = dict(d)
        h = d.pop("history")
        history = History([EpochRecord(**e) for e in h["epochs"]], h["best_epoch"])
        return cls(history=history, **d)

    @property
    def name(self) -> str:
        return f"fold_r{self.repeat}_{self.test_session}"


@dataclass
class CVResult:
    spec: ModelSpec
    folds: list[FoldReport]

    @property
    def mean_ua(self) -> float:
        return float(np.mean([f.test_ua for f in self.folds]))

    def summary(self) -> dict:
        return {
            "spec": json.loads(self.spec.to_json()),
            "n_runs": len(self.folds),
            "fold_test_ua": [f.test_ua for f in self.folds],
            "mean_test_ua": self.mean_ua,
            "std_test_ua": float(np.std([f.test_ua for f in self.folds])),
        }


def fold_seed(base: int, repeat: int, fold: int) -> int:
    """Repeat r uses seed base + r; folds inside it are offset deterministically."""
    return (base + repeat) * 1000 + fold


def split_folds(utterances, config: TrainConfig):
    """Yield ``(repeat, fold, session, train, val, test)`` for every CV run."""
    sessions = sorted({u.session for u in utterances})
    if len(sessions) < 2:
        raise DataError(f"cross-validation needs at least 2 sessions, found {sessions}")
    for r in range(config.repeats):
        for f, sess in enumerate(sessions):
            test = [u for u in utterances if u.session == sess]
            rest = [u for u in utterances if u.session != sess]
            rng = np.random.default_rng([config.seed + r, f])
            n_val = max(1, int(math.floor(config.val_fraction * len(rest))))
            val_idx = set(rng.choice(len(rest), size=n_val, replace=False).tolist())
            val = [u for i, u in enumerate(rest) if i in val_idx]
            train = [u for i, u in enumerate(rest) if i not in val_idx]
            yield r, f, sess, train, val, test


def run_fold(spec, config, r, f, sess, train, val, test) -> FoldReport:
    """Train and test one ``split_folds`` entry with its derived seed."""
    seed = fold_seed(config.seed, r, f)
    fold_spec = replace(spec, seed=seed)
    model, history = train_model(fold_spec, train, val, replace(config, seed=seed))
    pred, _ = evaluate(model, test, config.batch_size)
    labels = np.array([u.label for u in test])
    if len(set(labels.tolist())) < spec.n_classes:
        log.warning("test session %s lacks some classes; UA over present classes", sess)
    ua = unweighted_accuracy(pred.labels, labels, spec.n_classes, strict=False)
    log.info("repeat %d fold %d (%s): test UA %.4f, best epoch %d",
             r, f, sess, ua, history.best_epoch)
    return FoldReport(r, f, sess, seed, len(train), len(val), len(test), history.best_epoch,
                      ua, history, [u.utterance_id for u in val], [u.utterance_id for u in test])


def run_cv(utterances, spec: ModelSpec, config: TrainConfig, jobs: int = 1) -> CVResult:
    """Leave-one-session-out CV, repeated ``config.repeats`` times."""
    tasks = list(split_folds(utterances, config))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_fold, spec, config, *t) for t in tasks]
            folds = [fut.result() for fut in futures]
    else:
        folds = [run_fold(spec, config, *t) for t in tasks]
    return CVResult(spec, folds)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_cv_reports(result: CVResult, out_dir) -> Path:
    """One JSON file per fold plus ``summary.json``; returns the summary path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f in result.folds:
        (out / f"{f.name}.json").write_text(_dump(f.to_dict()), encoding="utf-8")
    path = out / "summary.json"
    path.write_text(_dump(result.summary()), encoding="utf-8")
    return path


def read_fold_reports(out_dir) -> list[FoldReport]:
    files = sorted(Path(out_dir).glob("fold_r*.json"))
    reports = [FoldReport.from_dict(json.loads(p.read_text())) for p in files]
    return sorted(reports, key=lambda f: (f.repeat, f.fold))
