"""Training and evaluation: ADAM, Dice metric, epoch loops, seed aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .unet import UnetModel


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    loss: str = "soft_dice"
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.loss not in ("soft_dice", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class EvalPoint:
    epoch: int
    train_loss: float
    test_dice: float


@dataclass
class RunResult:
    history: list = field(default_factory=list)
    max_test_dice: float | None = None
    final_dice: float | None = None
    n_params: int = 0
    aborted: bool = False

    def finalize(self) -> "RunResult":
        if self.history:
            self.max_test_dice = max(p.test_dice for p in self.history)
            self.final_dice = self.history[-1].test_dice
        return self


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected ADAM update, in place.

    Parameters with a None gradient are treated as zero-gradient (unchanged
    except through the moment decay, which keeps them at zero).
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


class Adam:
    """Thin stateful wrapper binding an AdamState to a fixed parameter list."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Dice metric

def dice(pred_labels: np.ndarray, target_labels: np.ndarray, num_labels: int):
    """Per-foreground-label Dice overlap and its mean.

    Labels are integers in [0, num_labels) with 0 = background.  A label
    absent from both maps scores 1; absent from exactly one scores 0.
    Returns (per_label, mean) where per_label[i] is the Dice of label i+1.
    """
    if pred_labels.shape != target_labels.shape:
        raise ValueError(f"label maps differ in shape: {pred_labels.shape} vs {target_labels.shape}")
    per_label = np.empty(num_labels - 1, dtype=np.float64)
    for lab in range(1, num_labels):
        p = pred_labels == lab
        t = target_labels == lab
        np_, nt = int(p.sum()), int(t.sum())
        if np_ == 0 and nt == 0:
            per_label[lab - 1] = 1.0
        elif np_ == 0 or nt == 0:
            per_label[lab - 1] = 0.0
        else:
            per_label[lab - 1] = 2.0 * int((p & t).sum()) / (np_ + nt)
    return per_label, float(per_label.mean())


def target_label_map(targets: np.ndarray) -> np.ndarray:
    """Collapse one-hot (or binary single-channel) targets to an integer label map."""
    if targets.shape[1] == 1:
        return (targets[:, 0] > 0.5).astype(np.int64)
    return targets.argmax(axis=1)


def evaluate(model: UnetModel, images: np.ndarray, targets: np.ndarray,
             batch_size: int = 16) -> float:
    """Mean per-sample foreground Dice of the model over a labelled set."""
    num_classes = 2 if targets.shape[1] == 1 else targets.shape[1]
    tgt_labels = target_label_map(targets)
    scores = []
    for lo in range(0, images.shape[0], batch_size):
        batch = images[lo:lo + batch_size]
        pred = model.predict_labels(batch)
        for s in range(batch.shape[0]):
            scores.append(dice(pred[s], tgt_labels[lo + s], num_classes)[1])
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# epoch engine

def sample_dropout_factors(plan, widths, batch: int, rng, dtype=np.float64) -> dict:
    """Draw per-(sample, channel) keep factors from a ChannelId->probability plan."""
    probs: dict = {}
    for cid, p in plan.items():
        probs.setdefault((cid.block, cid.conv), {})[cid.channel] = p
    factors = {}
    for key in sorted(probs):
        b, j = key
        width = widths[b][j]
        pvec = np.zeros(width)
        for c, p in probs[key].items():
            pvec[c] = p
        keep = rng.random((batch, width)) >= pvec
        factors[key] = (keep / (1.0 - pvec)).astype(dtype)
    return factors


def run_epochs(model: UnetModel, images: np.ndarray, targets: np.ndarray,
               cfg: TrainConfig, epochs: int, rng, adam: Adam | None = None,
               dropout_plan=None):
    """Run minibatch-ADAM epochs; returns (mean losses per epoch, ok flag).

    ok is False when a non-finite loss appeared; the epoch list then ends at
    the offending epoch.
    """
    if adam is None:
        adam = Adam(model.parameters(), cfg)
    n = images.shape[0]
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb = images[idx]
            tb = targets[idx]
            factors = None
            if dropout_plan is not None:
                factors = sample_dropout_factors(dropout_plan, model.widths, xb.shape[0], rng,
                                                 dtype=model.dtype)
            out = model.forward(xb, training=True, dropout=factors)
            lv = T.loss(out, T.Tensor(tb, dtype=model.dtype), cfg.loss)
            if not np.isfinite(lv.data):
                epoch_losses.append(float(lv.data))
                return epoch_losses, False
            adam.zero_grad()
            lv.backward()
            adam.step()
            losses.append(float(lv.data))
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses, True


def train(model: UnetModel, dataset, cfg: TrainConfig, dropout_plan=None) -> RunResult:
    """Full training run with one test-Dice evaluation per epoch."""
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(model.parameters(), cfg)
    result = RunResult(n_params=model.param_count())
    for epoch in range(cfg.epochs):
        losses, ok = run_epochs(model, dataset.train.images, dataset.train.targets,
                                cfg, 1, rng, adam=adam, dropout_plan=dropout_plan)
        if not ok:
            result.aborted = True
            break
        d = evaluate(model, dataset.test.images, dataset.test.targets, cfg.batch_size)
        result.history.append(EvalPoint(epoch=epoch, train_loss=losses[-1], test_dice=d))
    return result.finalize()


# ---------------------------------------------------------------------------
# multi-seed aggregation

def median_mad(values) -> tuple[float, float]:
    """Median and median absolute deviation of a nonempty sample."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("median_mad of an empty sample")
    med = float(np.median(vals))
    return med, float(np.median(np.abs(vals - med)))


def aggregate(results) -> dict:
    """Median and MAD of final and maximum test Dice across repeated runs."""
    results = list(results)
    if not results:
        raise ValueError("aggregate requires at least one result")
    out = {}
    for metric in ("final_dice", "max_test_dice"):
        vals = [getattr(r, metric) for r in results if getattr(r, metric) is not None]
        if vals:
            out[metric] = median_mad(vals)
    out["n_params"] = median_mad([r.n_params for r in results])
    return out


# ---------------------------------------------------------------------------
# CSV export

def write_runresult_csv(path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "dice"])
        for p in result.history:
            w.writerow([p.epoch, repr(p.train_loss), repr(p.test_dice)])


def read_runresult_csv(path) -> RunResult:
    result = RunResult()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            result.history.append(EvalPoint(epoch=int(row["epoch"]),
                                            train_loss=float(row["loss"]),
                                            test_dice=float(row["dice"])))
    return result.finalize()
