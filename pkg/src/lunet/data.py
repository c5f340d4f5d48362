"""Deterministic synthetic segmentation datasets.

Two context-dependent modes stand in for volumetric medical data at desk
scale.  ``positional`` scatters visually identical blobs but labels only the
one inside a fixed spatial region, so per-voxel intensity alone cannot solve
the task.  ``multi_organ`` lays out ``num_labels`` adjacent structures in a
fixed topology with jittered positions and sizes.  Generation is a pure
function of the spec: every sample derives its own RNG from
(seed, split, index).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T


class DatasetError(IOError):
    """Missing or inconsistent dataset files."""


@dataclass(frozen=True)
class SynthSpec:
    dim: int = 2
    side: int = 64
    num_labels: int = 1
    n_train: int = 200
    n_test: int = 70
    seed: int = 0
    context_mode: str = "positional"
    noise: float = 0.05

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.side < 8 or self.side & (self.side - 1):
            raise ValueError(f"side must be a power of two >= 8, got {self.side}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if self.context_mode not in ("positional", "multi_organ"):
            raise ValueError(f"unknown context_mode {self.context_mode!r}")
        if self.context_mode == "positional" and self.num_labels != 1:
            raise ValueError("positional mode is single-label")
        if self.num_labels < 1:
            raise ValueError(f"num_labels must be >= 1, got {self.num_labels}")

    @property
    def target_channels(self) -> int:
        """One-hot channels including background."""
        return self.num_labels + 1


@dataclass
class Split:
    images: np.ndarray  # (N, 1, S...)
    targets: np.ndarray  # (N, num_labels+1, S...), one-hot with background first


@dataclass
class Dataset:
    spec: SynthSpec
    train: Split
    test: Split


_BG_INTENSITY = 0.15
_BLOB_INTENSITY = 0.8


def _ball_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def _positional_sample(spec: SynthSpec, rng):
    s = spec.side
    half = s // 2
    shape = (s,) * spec.dim
    img = np.full(shape, _BG_INTENSITY)

    def place(orthant):
        r = rng.uniform(s / 10.0, s / 6.0)
        lo = [half * o + r + 1 for o in orthant]
        hi = [half * o + half - r - 1 for o in orthant]
        center = [rng.uniform(a, b) for a, b in zip(lo, hi)]
        return _ball_mask(shape, center, (r,) * spec.dim)

    anchor = place((0,) * spec.dim)
    img[anchor] = _BLOB_INTENSITY
    others = [o for o in np.ndindex(*(2,) * spec.dim) if any(o)]
    for _ in range(int(rng.integers(2, 4))):
        orthant = others[int(rng.integers(len(others)))]
        img[place(orthant)] = _BLOB_INTENSITY

    img = np.clip(img + rng.normal(0.0, spec.noise, shape), 0.0, 1.0)
    fg = anchor.astype(np.float64)
    target = np.stack([1.0 - fg, fg])
    return img[None], target


def _multi_organ_sample(spec: SynthSpec, rng):
    s = spec.side
    shape = (s,) * spec.dim
    img = np.full(shape, _BG_INTENSITY)
    labels = np.zeros(shape, dtype=np.int64)
    slot = s / (spec.num_labels + 1)
    for i in range(spec.num_labels):
        center = [slot * (i + 1) + rng.uniform(-slot / 5, slot / 5)]
        center += [s / 2 + rng.uniform(-s / 10, s / 10) for _ in range(spec.dim - 1)]
        radii = [max(1.5, 0.45 * slot * rng.uniform(0.8, 1.2))]
        radii += [max(1.5, s / 8 * rng.uniform(0.8, 1.2)) for _ in range(spec.dim - 1)]
        mask = _ball_mask(shape, center, radii)
        img[mask] = _BLOB_INTENSITY
        labels[mask] = i + 1
    img = np.clip(img + rng.normal(0.0, spec.noise, shape), 0.0, 1.0)
    target = np.stack([(labels == lab).astype(np.float64)
                       for lab in range(spec.num_labels + 1)])
    return img[None], target


def _make_split(spec: SynthSpec, split_id: int, n: int) -> Split:
    images = np.empty((n, 1) + (spec.side,) * spec.dim)
    targets = np.empty((n, spec.target_channels) + (spec.side,) * spec.dim)
    sampler = _positional_sample if spec.context_mode == "positional" else _multi_organ_sample
    for i in range(n):
        rng = np.random.default_rng([spec.seed, split_id, i])
        images[i], targets[i] = sampler(spec, rng)
    return Split(images=images, targets=targets)


def generate(spec: SynthSpec) -> Dataset:
    """Build the train and test splits; bitwise deterministic in the spec."""
    return Dataset(spec=spec,
                   train=_make_split(spec, 0, spec.n_train),
                   test=_make_split(spec, 1, spec.n_test))


# ---------------------------------------------------------------------------
# on-disk layout: manifest plus one tensor file per sample/target

_MANIFEST_HEADER = "lunet-dataset v1"


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = dataset.spec
    lines = [_MANIFEST_HEADER]
    for key in ("dim", "side", "num_labels", "n_train", "n_test", "seed"):
        lines.append(f"{key} = {getattr(spec, key)}")
    lines.append(f"context_mode = {spec.context_mode}")
    lines.append(f"noise = {spec.noise!r}")
    for split_name, split in (("train", dataset.train), ("test", dataset.test)):
        for i in range(split.images.shape[0]):
            img = f"{split_name}_img_{i:04d}.lutn"
            tgt = f"{split_name}_tgt_{i:04d}.lutn"
            T.save_tensor(directory / img, split.images[i])
            T.save_tensor(directory / tgt, split.targets[i])
            lines.append(f"sample {split_name} {i} {img} {tgt}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise DatasetError(f"no manifest.txt in {directory}")
    lines = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise DatasetError(f"{manifest}: not a dataset manifest")
    fields: dict = {}
    samples: dict = {"train": [], "test": []}
    for ln in lines[1:]:
        if ln.startswith("sample "):
            _, split_name, idx, img, tgt = ln.split()
            samples[split_name].append((int(idx), img, tgt))
        else:
            key, _, value = ln.partition("=")
            fields[key.strip()] = value.strip()
    spec = SynthSpec(dim=int(fields["dim"]), side=int(fields["side"]),
                     num_labels=int(fields["num_labels"]), n_train=int(fields["n_train"]),
                     n_test=int(fields["n_test"]), seed=int(fields["seed"]),
                     context_mode=fields["context_mode"], noise=float(fields.get("noise", 0.05)))

    def load_split(name: str, expected: int) -> Split:
        entries = sorted(samples[name])
        if len(entries) != expected:
            raise DatasetError(f"{manifest}: {name} split lists {len(entries)} samples, header says {expected}")
        images, targets = [], []
        for _, img, tgt in entries:
            for fname in (img, tgt):
                if not (directory / fname).exists():
                    raise DatasetError(f"manifest references missing file {fname}")
            images.append(T.load_tensor(directory / img))
            targets.append(T.load_tensor(directory / tgt))
        return Split(images=np.stack(images), targets=np.stack(targets))

    return Dataset(spec=spec,
                   train=load_split("train", spec.n_train),
                   test=load_split("test", spec.n_test))
