"""Unet-family architectures: declarative specs, instantiation, accounting.

A network is described by an ``ArchSpec``: ``2*levels - 1`` blocks (encoder
blocks, one bottleneck, decoder blocks) of ``convs_per_block`` convolutions
each, plus a final 1x..x1 convolution mapping to ``num_labels``.  Decoder
blocks consume the same-level encoder skip concatenated with the upsampled
deeper feature map (skip first).  The ``unet`` family doubles widths with
depth, ``lunet`` keeps them constant, ``scaled`` shrinks the doubling
schedule linearly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ChannelId(NamedTuple):
    """One output channel of one convolution: the unit removed by pruning."""
    block: int
    conv: int
    channel: int


class CountResult(NamedTuple):
    n_params: int
    n_channels: int


@dataclass(frozen=True)
class ArchSpec:
    """Declarative architecture; immutable value object."""
    levels: int
    convs_per_block: int
    dim: int
    in_channels: int
    num_labels: int
    kernel: int
    widths: tuple  # per-block tuple of per-conv output widths
    norm_enabled: bool = False

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.convs_per_block < 1:
            raise ValueError(f"convs_per_block must be >= 1, got {self.convs_per_block}")
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.in_channels < 1 or self.num_labels < 1:
            raise ValueError("in_channels and num_labels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if len(self.widths) != self.n_blocks:
            raise ValueError(f"expected {self.n_blocks} width groups, got {len(self.widths)}")
        for b, ws in enumerate(self.widths):
            if len(ws) != self.convs_per_block:
                raise ValueError(f"block {b}: expected {self.convs_per_block} widths, got {len(ws)}")
            if any(w < 1 for w in ws):
                raise ValueError(f"block {b}: widths must be >= 1, got {ws}")
        object.__setattr__(self, "widths", tuple(tuple(int(w) for w in ws) for ws in self.widths))

    @property
    def n_blocks(self) -> int:
        return 2 * self.levels - 1

    def block_level(self, b: int) -> int:
        """Resolution level of block b (0 = full resolution, levels-1 = bottleneck)."""
        return b if b < self.levels else 2 * self.levels - 2 - b

    def is_decoder(self, b: int) -> bool:
        return b >= self.levels

    def conv_in_channels(self, b: int, j: int) -> int:
        """Input width of conv (b, j) under the block wiring."""
        if j > 0:
            return self.widths[b][j - 1]
        if b == 0:
            return self.in_channels
        if b < self.levels:  # deeper encoder block or bottleneck: pooled predecessor
            return self.widths[b - 1][-1]
        skip = 2 * self.levels - 2 - b  # encoder block at the same level
        return self.widths[skip][-1] + self.widths[b - 1][-1]

    def conv_keys(self):
        for b in range(self.n_blocks):
            for j in range(self.convs_per_block):
                yield b, j


def make_spec(family: str, n_f: int, levels: int, convs_per_block: int = 2,
              dim: int = 2, in_channels: int = 1, num_labels: int = 1,
              scale_percent: float | None = None, kernel: int = 3,
              norm_enabled: bool = False) -> ArchSpec:
    """Construct a spec of the given family.

    ``unet`` doubles the width at each level (level l gets n_f * 2**l, mirrored
    in the decoder), ``lunet`` uses n_f everywhere, ``scaled`` multiplies the
    unet widths by scale_percent/100 (rounded, floor 1).
    """
    if n_f < 1:
        raise ValueError(f"n_f must be >= 1, got {n_f}")
    if family not in ("unet", "lunet", "scaled"):
        raise ValueError(f"unknown family {family!r}")
    if family == "scaled":
        if scale_percent is None or not 0 < scale_percent <= 100:
            raise ValueError("scaled family requires scale_percent in (0, 100]")
    elif scale_percent is not None:
        raise ValueError(f"scale_percent is only valid for the scaled family, not {family!r}")

    def width_at(level: int) -> int:
        if family == "lunet":
            return n_f
        w = n_f * 2 ** level
        if family == "scaled":
            w = max(1, round(w * scale_percent / 100.0))
        return w

    widths = []
    for b in range(2 * levels - 1):
        level = b if b < levels else 2 * levels - 2 - b
        widths.append((width_at(level),) * convs_per_block)
    return ArchSpec(levels=levels, convs_per_block=convs_per_block, dim=dim,
                    in_channels=in_channels, num_labels=num_labels, kernel=kernel,
                    widths=tuple(widths), norm_enabled=norm_enabled)


def count(spec: ArchSpec) -> CountResult:
    """Parameter and prunable-channel totals.

    The final output conv contributes parameters but not channels; per-channel
    norm parameters are counted when the spec enables them.
    """
    k_d = spec.kernel ** spec.dim
    n_params = 0
    n_channels = 0
    for b, j in spec.conv_keys():
        cin = spec.conv_in_channels(b, j)
        cout = spec.widths[b][j]
        n_params += cin * cout * k_d + cout
        if spec.norm_enabled:
            n_params += 2 * cout
        n_channels += cout
    head_in = spec.widths[-1][-1]
    n_params += head_in * spec.num_labels + spec.num_labels
    return CountResult(n_params=n_params, n_channels=n_channels)


class UnetModel:
    """An instantiated network: parameter tensors plus the block wiring.

    Mutable and single-owner; channel surgery edits ``widths`` and the
    parameter arrays in place.
    """

    def __init__(self, spec: ArchSpec, dtype=np.float64):
        self.levels = spec.levels
        self.convs_per_block = spec.convs_per_block
        self.dim = spec.dim
        self.in_channels = spec.in_channels
        self.num_labels = spec.num_labels
        self.kernel = spec.kernel
        self.norm_enabled = spec.norm_enabled
        self.dtype = np.dtype(dtype).type
        self.widths = [list(ws) for ws in spec.widths]
        self.params: dict = {}
        self.head_w: Tensor | None = None
        self.head_b: Tensor | None = None

    @property
    def n_blocks(self) -> int:
        return 2 * self.levels - 1

    def spec(self) -> ArchSpec:
        """Current architecture as an immutable spec (valid after surgery)."""
        return ArchSpec(levels=self.levels, convs_per_block=self.convs_per_block,
                        dim=self.dim, in_channels=self.in_channels,
                        num_labels=self.num_labels, kernel=self.kernel,
                        widths=tuple(tuple(ws) for ws in self.widths),
                        norm_enabled=self.norm_enabled)

    def conv_keys(self):
        for b in range(self.n_blocks):
            for j in range(self.convs_per_block):
                yield b, j

    def parameters(self) -> list[Tensor]:
        out = []
        for key in self.conv_keys():
            p = self.params[key]
            out.append(p["w"])
            out.append(p["b"])
            if self.norm_enabled:
                out.append(p["gamma"])
                out.append(p["beta"])
        out.append(self.head_w)
        out.append(self.head_b)
        return out

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def channel_ids(self):
        """Every prunable channel, in deterministic lexicographic order."""
        for b, j in self.conv_keys():
            for c in range(self.widths[b][j]):
                yield ChannelId(b, j, c)

    def consumers(self, b: int, j: int) -> list:
        """Convs consuming (b, j)'s output as ``(key_or_'head', slice_offset)``.

        Offsets are computed from current widths: a skip tensor occupies the
        leading channels of a decoder concat, the upsampled tensor follows.
        """
        cpb = self.convs_per_block
        last_block = 2 * self.levels - 2
        if j < cpb - 1:
            return [((b, j + 1), 0)]
        if b < self.levels - 1:
            dec = 2 * self.levels - 2 - b
            return [((b + 1, 0), 0), ((dec, 0), 0)]
        if b < last_block:
            dec = b + 1
            skip = 2 * self.levels - 2 - dec
            return [((dec, 0), self.widths[skip][cpb - 1])]
        return [("head", 0)]

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != self.dim + 2:
            raise ShapeError(f"input rank {x.ndim}, expected {self.dim + 2}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"input channels: got {x.shape[1]}, spec has {self.in_channels}")
        div = 2 ** (self.levels - 1)
        for i, s in enumerate(x.shape[2:]):
            if s % div:
                raise ShapeError(f"spatial axis {i}: extent {s} not divisible by {div}")

    def forward(self, x, training: bool = False, dropout: dict | None = None,
                record: bool = False, zero_mask=None):
        """Run the network on x of shape (B, in_channels, S...).

        Returns the post-head probabilities; with ``record=True`` returns
        ``(output, activations)`` where activations maps (block, conv) to the
        post-activation numpy array.  ``dropout`` maps (block, conv) to a
        (B, C) multiplier array (training only).  ``zero_mask`` is a set of
        ChannelIds whose post-activation output is forced to zero.
        """
        xt = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        self._check_input(xt.data)
        batch = xt.data.shape[0]
        acts: dict | None = {} if record else None
        masked: dict = {}
        if zero_mask:
            for cid in zero_mask:
                masked.setdefault((cid.block, cid.conv), []).append(cid.channel)

        pad = (self.kernel - 1) // 2

        def run_block(b: int, h: Tensor) -> Tensor:
            for j in range(self.convs_per_block):
                p = self.params[(b, j)]
                h = T.conv(h, p["w"], p["b"], stride=1, padding=pad)
                if self.norm_enabled:
                    h = T.instance_norm(h, p["gamma"], p["beta"])
                h = T.relu(h)
                if (b, j) in masked:
                    factor = np.ones((batch, h.data.shape[1]), dtype=h.data.dtype)
                    factor[:, masked[(b, j)]] = 0.0
                    h = T.channel_dropout(h, factor)
                if acts is not None:
                    acts[(b, j)] = h.data.copy()
                if training and dropout is not None and (b, j) in dropout:
                    h = T.channel_dropout(h, dropout[(b, j)])
            return h

        skips = []
        h = xt
        for b in range(self.levels - 1):
            h = run_block(b, h)
            skips.append(h)
            h = T.maxpool2(h)
        h = run_block(self.levels - 1, h)
        for b in range(self.levels, self.n_blocks):
            level = 2 * self.levels - 2 - b
            h = T.concat_channels([skips[level], T.upsample_nearest2(h)])
            h = run_block(b, h)
        y = T.conv(h, self.head_w, self.head_b, stride=1, padding=0)
        out = T.sigmoid(y) if self.num_labels == 1 else T.softmax_channels(y)
        if record:
            return out, acts
        return out

    def predict_labels(self, x) -> np.ndarray:
        """Hard label map: channel argmax (multi-label) or 0.5 threshold (single)."""
        with T.no_grad():
            out = self.forward(x)
        if self.num_labels == 1:
            return (out.data[:, 0] > 0.5).astype(np.int64)
        return out.data.argmax(axis=1)


def build(spec: ArchSpec, seed: int, dtype=np.float64) -> UnetModel:
    """Instantiate a spec with He-style weights (std sqrt(2/(Cin*k^d))), zero bias.

    Deterministic: the same (spec, seed) yields bitwise-identical parameters.
    """
    rng = np.random.default_rng(seed)
    model = UnetModel(spec, dtype=dtype)
    k = spec.kernel
    kshape = (k,) * spec.dim
    for b, j in spec.conv_keys():
        cin = spec.conv_in_channels(b, j)
        cout = spec.widths[b][j]
        std = math.sqrt(2.0 / (cin * k ** spec.dim))
        w = rng.normal(0.0, std, size=(cout, cin) + kshape)
        entry = {
            "w": Tensor(w, requires_grad=True, dtype=dtype),
            "b": Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
        }
        if spec.norm_enabled:
            entry["gamma"] = Tensor(np.ones(cout), requires_grad=True, dtype=dtype)
            entry["beta"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        model.params[(b, j)] = entry
    head_in = spec.widths[-1][-1]
    std = math.sqrt(2.0 / head_in)
    hw = rng.normal(0.0, std, size=(spec.num_labels, head_in) + (1,) * spec.dim)
    model.head_w = Tensor(hw, requires_grad=True, dtype=dtype)
    model.head_b = Tensor(np.zeros(spec.num_labels), requires_grad=True, dtype=dtype)
    return model


def extract_spec(model: UnetModel) -> ArchSpec:
    """Spec matching the model's current per-conv widths (round-trips with build)."""
    return model.spec()


# ---------------------------------------------------------------------------
# spec file format: human-readable key/value lines plus width arrays

_SPEC_HEADER = "lunet-archspec v1"


def save_spec(path, spec: ArchSpec) -> None:
    lines = [_SPEC_HEADER]
    lines.append(f"levels = {spec.levels}")
    lines.append(f"convs_per_block = {spec.convs_per_block}")
    lines.append(f"dim = {spec.dim}")
    lines.append(f"in_channels = {spec.in_channels}")
    lines.append(f"num_labels = {spec.num_labels}")
    lines.append(f"kernel = {spec.kernel}")
    lines.append(f"norm_enabled = {'true' if spec.norm_enabled else 'false'}")
    for b, ws in enumerate(spec.widths):
        lines.append(f"widths[{b}] = {' '.join(str(w) for w in ws)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_spec(path) -> ArchSpec:
    text = Path(path).read_text()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _SPEC_HEADER:
        raise ValueError(f"{path}: not a spec file (missing '{_SPEC_HEADER}' header)")
    fields: dict = {}
    widths: dict = {}
    for ln in lines[1:]:
        key, _, value = ln.partition("=")
        key = key.strip()
        value = value.strip()
        if key.startswith("widths[") and key.endswith("]"):
            widths[int(key[7:-1])] = tuple(int(t) for t in value.split())
        elif key == "norm_enabled":
            fields[key] = value.lower() == "true"
        else:
            fields[key] = int(value)
    try:
        wlist = tuple(widths[b] for b in range(len(widths)))
    except KeyError as exc:
        raise ValueError(f"{path}: missing width group {exc}") from None
    return ArchSpec(levels=fields["levels"], convs_per_block=fields["convs_per_block"],
                    dim=fields["dim"], in_channels=fields["in_channels"],
                    num_labels=fields["num_labels"], kernel=fields["kernel"],
                    widths=wlist, norm_enabled=fields.get("norm_enabled", False))


# ---------------------------------------------------------------------------
# checkpoints: spec file + one tensor file per parameter

def _param_files(spec: ArchSpec):
    for b, j in spec.conv_keys():
        yield (b, j, "w"), f"conv{b}_{j}_w.lutn"
        yield (b, j, "b"), f"conv{b}_{j}_b.lutn"
        if spec.norm_enabled:
            yield (b, j, "gamma"), f"conv{b}_{j}_gamma.lutn"
            yield (b, j, "beta"), f"conv{b}_{j}_beta.lutn"
    yield ("head", None, "w"), "head_w.lutn"
    yield ("head", None, "b"), "head_b.lutn"


def save_checkpoint(model: UnetModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = model.spec()
    save_spec(directory / "arch.spec", spec)
    for (b, j, name), fname in _param_files(spec):
        if b == "head":
            arr = model.head_w.data if name == "w" else model.head_b.data
        else:
            arr = model.params[(b, j)][name].data
        T.save_tensor(directory / fname, arr)


def load_checkpoint(directory, dtype=np.float64) -> UnetModel:
    directory = Path(directory)
    spec = load_spec(directory / "arch.spec")
    model = UnetModel(spec, dtype=dtype)
    for b, j in spec.conv_keys():
        model.params[(b, j)] = {}
    for (b, j, name), fname in _param_files(spec):
        arr = T.load_tensor(directory / fname)
        t = Tensor(arr, requires_grad=True, dtype=dtype)
        if b == "head":
            if name == "w":
                model.head_w = t
            else:
                model.head_b = t
        else:
            model.params[(b, j)][name] = t
    return model
