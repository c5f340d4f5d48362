"""Gradual structured channel pruning.

Three strategies share one loop: ``stamp`` removes the channel with the
lowest normalized activation magnitude, ``stamp_layer_random`` removes a
random channel from the layer that strategy would have targeted, and
``widest_block`` ignores the data entirely and always removes a random
channel from the currently widest convolution.  Between removals the model
trains for a fixed number of recovery epochs with targeted channel-wise
dropout biased toward likely victims.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import training
from .tensor import Tensor
from .unet import ChannelId, UnetModel, count


class Exhausted(Exception):
    """No convolution has more than one channel left."""


class LastChannel(ValueError):
    """Refusing to remove the sole remaining channel of a convolution."""


@dataclass
class CriterionReport:
    """Normalized activation magnitude per prunable channel."""
    values: dict  # ChannelId -> float
    batch_id: str = ""


@dataclass
class PruneEvent:
    step: int
    channel: ChannelId
    strategy: str
    pct_remaining: float
    widths: tuple
    n_params: int
    dice: float | None = None


@dataclass
class PruneLog:
    """Append-only record of prune events plus snapshot telemetry."""
    initial_widths: tuple = ()
    initial_channels: int = 0
    initial_params: int = 0
    strategy: str = ""
    events: list = field(default_factory=list)
    width_snapshots: dict = field(default_factory=dict)  # pct mark -> widths tuple
    criterion_snapshots: dict = field(default_factory=dict)  # pct mark -> {ChannelId: value}
    terminal: str | None = None

    def channels_remaining(self) -> int:
        return self.initial_channels - len(self.events)

    def max_test_dice(self) -> float | None:
        vals = [e.dice for e in self.events if e.dice is not None]
        return max(vals) if vals else None


@dataclass
class PruneConfig:
    strategy: str = "stamp"
    recovery_epochs: int = 1
    base_p: float = 0.05
    criterion_batches: int = 4
    snapshot_marks: tuple = (75, 50, 25)
    stop_pct: float | None = None
    max_steps: int | None = None
    eval_test: bool = True
    seed: int = 0
    train: training.TrainConfig = field(default_factory=training.TrainConfig)

    def __post_init__(self):
        if self.strategy not in ("stamp", "stamp_layer_random", "widest_block"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.base_p < 0.5:
            raise ValueError(f"base_p must be in [0, 0.5), got {self.base_p}")
        if self.recovery_epochs < 0:
            raise ValueError(f"recovery_epochs must be >= 0, got {self.recovery_epochs}")
        if self.criterion_batches < 1:
            raise ValueError(f"criterion_batches must be >= 1, got {self.criterion_batches}")


# ---------------------------------------------------------------------------
# criterion

def compute_criterion(model: UnetModel, batches) -> CriterionReport:
    """RMS magnitude of each channel's post-activation map over the given batches.

    The L2 norm is divided by the square root of the element count so that
    channels at different resolutions are comparable.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("compute_criterion needs at least one batch")
    ssq: dict = {}
    cnt: dict = {}
    with T.no_grad():
        for xb in batches:
            _, acts = model.forward(xb, record=True)
            for key, a in acts.items():
                if not np.isfinite(a).all():
                    raise ValueError(f"NaN activations in conv {key}")
                per_chan = (a * a).sum(axis=(0,) + tuple(range(2, a.ndim)))
                n_elem = a.shape[0] * int(np.prod(a.shape[2:]))
                if key not in ssq:
                    ssq[key] = per_chan
                    cnt[key] = n_elem
                else:
                    ssq[key] += per_chan
                    cnt[key] += n_elem
    values = {}
    for (b, j), s in ssq.items():
        vals = np.sqrt(s / cnt[(b, j)])
        for c, v in enumerate(vals):
            values[ChannelId(b, j, c)] = float(v)
    return CriterionReport(values=values, batch_id=f"{len(batches)} batches")


def update_dropout(report: CriterionReport, base_p: float) -> dict:
    """Targeted dropout plan: bottom quartile of the ranking gets 3x the base rate.

    Ties break in deterministic ChannelId order; probabilities are capped at
    0.5.  Returns a ChannelId -> probability mapping.
    """
    if not 0.0 <= base_p < 0.5:
        raise ValueError(f"base_p must be in [0, 0.5), got {base_p}")
    ranked = sorted(report.values.items(), key=lambda kv: (kv[1], kv[0]))
    n_low = -(-len(ranked) // 4)  # ceil(N/4)
    elevated = min(3.0 * base_p, 0.5)
    plan = {}
    for rank, (cid, _) in enumerate(ranked):
        plan[cid] = elevated if rank < n_low else base_p
    return plan


# ---------------------------------------------------------------------------
# surgery

def remap_after_removal(values: dict, victim: ChannelId) -> dict:
    """Shift a ChannelId-keyed mapping to the indexing that holds after a removal."""
    out = {}
    for cid, v in values.items():
        if cid.block == victim.block and cid.conv == victim.conv:
            if cid.channel == victim.channel:
                continue
            if cid.channel > victim.channel:
                cid = ChannelId(cid.block, cid.conv, cid.channel - 1)
        out[cid] = v
    return out


def remove_channel(model: UnetModel, cid: ChannelId) -> int:
    """Physically delete one output channel and every weight slice consuming it.

    Returns the number of parameters removed.  Raises LastChannel when the
    target convolution has only one channel left.
    """
    b, j, c = cid
    width = model.widths[b][j]
    if not 0 <= c < width:
        raise ValueError(f"channel {c} out of range for conv ({b}, {j}) of width {width}")
    if width < 2:
        raise LastChannel(f"conv ({b}, {j}) has a single channel")

    entry = model.params[(b, j)]
    removed = entry["w"].data.shape[1] * model.kernel ** model.dim + 1
    entry["w"] = Tensor(np.delete(entry["w"].data, c, axis=0), requires_grad=True, dtype=model.dtype)
    entry["b"] = Tensor(np.delete(entry["b"].data, c), requires_grad=True, dtype=model.dtype)
    if model.norm_enabled:
        removed += 2
        entry["gamma"] = Tensor(np.delete(entry["gamma"].data, c), requires_grad=True, dtype=model.dtype)
        entry["beta"] = Tensor(np.delete(entry["beta"].data, c), requires_grad=True, dtype=model.dtype)

    for consumer, offset in model.consumers(b, j):
        idx = offset + c
        if consumer == "head":
            removed += model.head_w.data.shape[0]  # 1^dim kernel
            model.head_w = Tensor(np.delete(model.head_w.data, idx, axis=1),
                                  requires_grad=True, dtype=model.dtype)
        else:
            cw = model.params[consumer]["w"]
            removed += cw.data.shape[0] * model.kernel ** model.dim
            model.params[consumer]["w"] = Tensor(np.delete(cw.data, idx, axis=1),
                                                 requires_grad=True, dtype=model.dtype)
    model.widths[b][j] -= 1
    return removed


# ---------------------------------------------------------------------------
# victim selection

def _widest_key(model_or_spec_widths, levels: int):
    def key(bj):
        b, j = bj
        level = b if b < levels else 2 * levels - 2 - b
        is_decoder = b >= levels
        return (-model_or_spec_widths[b][j], -level, is_decoder, b, j)
    return key


def select_victim(strategy: str, report: CriterionReport | None, model: UnetModel, rng) -> ChannelId:
    """Pick the next channel to remove under the given strategy.

    stamp: argmin criterion over convs that still have >= 2 channels.
    stamp_layer_random: a uniformly random channel of the stamp argmin's layer.
    widest_block: a uniformly random channel of the widest conv
    (ties: deepest level, encoder before decoder, lower conv index).
    """
    eligible = [(b, j) for b, j in model.conv_keys() if model.widths[b][j] >= 2]
    if not eligible:
        raise Exhausted("every convolution is down to one channel")

    if strategy == "widest_block":
        b, j = min(eligible, key=_widest_key(model.widths, model.levels))
        return ChannelId(b, j, int(rng.integers(model.widths[b][j])))

    if report is None:
        raise ValueError(f"strategy {strategy!r} requires a criterion report")
    eligible_set = set(eligible)
    candidates = [(v, cid) for cid, v in report.values.items()
                  if (cid.block, cid.conv) in eligible_set]
    if not candidates:
        raise Exhausted("criterion report covers no prunable conv")
    _, argmin = min(candidates)
    if strategy == "stamp":
        return argmin
    if strategy == "stamp_layer_random":
        width = model.widths[argmin.block][argmin.conv]
        return ChannelId(argmin.block, argmin.conv, int(rng.integers(width)))
    raise ValueError(f"unknown strategy {strategy!r}")


def widest_schedule(spec, total_removals: int) -> list:
    """Data-independent width table for widest-block pruning.

    Entry i holds the per-conv widths (in conv_keys order) after i removals;
    entry 0 is the starting architecture.  Pure function of its arguments.
    """
    keys = list(spec.conv_keys())
    widths = [list(ws) for ws in spec.widths]
    counted = count(spec)
    max_removals = counted.n_channels - len(keys)
    if total_removals > max_removals:
        raise ValueError(f"cannot remove {total_removals} channels; only {max_removals} available")
    table = [tuple(widths[b][j] for b, j in keys)]
    key_fn = _widest_key(widths, spec.levels)
    for _ in range(total_removals):
        candidates = [(b, j) for b, j in keys if widths[b][j] >= 2]
        b, j = min(candidates, key=key_fn)
        widths[b][j] -= 1
        table.append(tuple(widths[b][j] for b, j in keys))
    return table


# ---------------------------------------------------------------------------
# the pruning loop

def stamp_loop(model: UnetModel, dataset, cfg: PruneConfig, callbacks=None) -> PruneLog:
    """Alternate recovery training, criterion ranking, removal, dropout update.

    Terminates when every prunable conv has one channel, when a configured
    stop fires (stop_pct / max_steps), or on a non-finite training loss
    (recorded as the log's terminal state).  Test Dice is evaluated after
    every removal when eval_test is set.
    """
    train_ss, victim_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(victim_ss)
    train_rng = np.random.default_rng(train_ss)
    train_cfg = cfg.train
    log = PruneLog(initial_widths=tuple(tuple(ws) for ws in model.widths),
                   initial_channels=sum(sum(ws) for ws in model.widths),
                   initial_params=count(model.spec()).n_params,
                   strategy=cfg.strategy)

    n_crit = cfg.criterion_batches * train_cfg.batch_size
    crit_images = dataset.train.images[:n_crit]
    crit_batches = [crit_images[lo:lo + train_cfg.batch_size]
                    for lo in range(0, crit_images.shape[0], train_cfg.batch_size)]

    plan = {cid: cfg.base_p for cid in model.channel_ids()} if cfg.base_p > 0 else None
    step = 0
    while True:
        if not any(model.widths[b][j] >= 2 for b, j in model.conv_keys()):
            log.terminal = "exhausted"
            break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            log.terminal = "stopped"
            break

        if cfg.recovery_epochs > 0:
            _, ok = training.run_epochs(model, dataset.train.images, dataset.train.targets,
                                        train_cfg, cfg.recovery_epochs, train_rng,
                                        dropout_plan=plan)
            if not ok:
                log.terminal = "nan_loss"
                break

        pct_after = 100.0 * (log.initial_channels - step - 1) / log.initial_channels
        will_snapshot = any(pct_after <= mark and mark not in log.width_snapshots
                            for mark in cfg.snapshot_marks)
        needs_report = cfg.strategy in ("stamp", "stamp_layer_random") or will_snapshot
        report = compute_criterion(model, crit_batches) if needs_report else None
        try:
            victim = select_victim(cfg.strategy, report, model, rng)
        except Exhausted:
            log.terminal = "exhausted"
            break
        n_params_before = count(model.spec()).n_params
        removed = remove_channel(model, victim)
        remapped = remap_after_removal(report.values, victim) if report is not None else None

        step += 1
        pct = 100.0 * (log.initial_channels - step) / log.initial_channels
        test_dice = None
        if cfg.eval_test:
            test_dice = training.evaluate(model, dataset.test.images, dataset.test.targets,
                                          train_cfg.batch_size)
        event = PruneEvent(step=step, channel=victim, strategy=cfg.strategy,
                           pct_remaining=pct,
                           widths=tuple(tuple(ws) for ws in model.widths),
                           n_params=n_params_before - removed, dice=test_dice)
        log.events.append(event)
        for mark in cfg.snapshot_marks:
            if pct <= mark and mark not in log.width_snapshots:
                log.width_snapshots[mark] = event.widths
                if remapped is not None:
                    log.criterion_snapshots[mark] = remapped
        if callbacks:
            for cb in callbacks:
                cb(event, model)

        if remapped is not None and plan is not None:
            plan = update_dropout(CriterionReport(values=remapped, batch_id=report.batch_id),
                                  cfg.base_p)
        elif plan is not None:
            plan = remap_after_removal(plan, victim)
        if cfg.stop_pct is not None and pct <= cfg.stop_pct:
            log.terminal = "stopped"
            break
    return log


# ---------------------------------------------------------------------------
# CSV export

def write_prunelog_csv(path, log: PruneLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "block", "conv", "channel", "strategy",
                    "pct_channels_remaining", "n_params", "dice"])
        for e in log.events:
            w.writerow([e.step, e.channel.block, e.channel.conv, e.channel.channel,
                        e.strategy, repr(e.pct_remaining), e.n_params,
                        "" if e.dice is None else repr(e.dice)])


def write_evolution_csv(path, log: PruneLog, conv_keys) -> None:
    """Per-step per-conv width table (one row per prune event, step 0 = initial)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"block{b}_conv{j}" for b, j in conv_keys])
        w.writerow([0] + [log.initial_widths[b][j] for b, j in conv_keys])
        for e in log.events:
            w.writerow([e.step] + [e.widths[b][j] for b, j in conv_keys])


def write_snapshot_csv(path, log: PruneLog, conv_keys) -> None:
    """Per-block width snapshots at each captured channels-remaining mark."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pct_mark", "block", "conv", "width"])
        for mark in sorted(log.width_snapshots, reverse=True):
            widths = log.width_snapshots[mark]
            for b, j in conv_keys:
                w.writerow([mark, b, j, widths[b][j]])
