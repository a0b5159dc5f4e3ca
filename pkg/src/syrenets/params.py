"""Named parameter blocks with a stable flat index, and the text checkpoint format."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Tape, TapeValue, getitem, reshape

CKPT_VERSION = "syrenets-ckpt-v1"


class ParamSet:
    """Ordered mapping of block name -> float array.

    Flat index ``i`` addresses blocks in insertion order, each block in C
    order, so ``flatten()[i]`` and ``locate(i)`` agree for the life of the set.
    """

    def __init__(self, blocks: dict[str, np.ndarray] | None = None):
        self.blocks: dict[str, np.ndarray] = {}
        for name, arr in (blocks or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> None:
        if name in self.blocks:
            raise KeyError(f"duplicate block {name!r}")
        self.blocks[name] = np.array(arr, dtype=float)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def items(self):
        return self.blocks.items()

    @property
    def size(self) -> int:
        return sum(a.size for a in self.blocks.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.blocks.items()})

    def flatten(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.blocks.values()])

    def unflatten(self, flat) -> "ParamSet":
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} values, got {flat.size}")
        out = ParamSet()
        pos = 0
        for name, arr in self.blocks.items():
            out.add(name, flat[pos:pos + arr.size].reshape(arr.shape))
            pos += arr.size
        return out

    def offsets(self) -> dict[str, tuple[int, int]]:
        out = {}
        pos = 0
        for name, arr in self.blocks.items():
            out[name] = (pos, pos + arr.size)
            pos += arr.size
        return out

    def locate(self, index: int) -> tuple[str, tuple[int, ...]]:
        for name, (lo, hi) in self.offsets().items():
            if lo <= index < hi:
                return name, np.unravel_index(index - lo, self.blocks[name].shape)
        raise IndexError(f"flat index {index} out of range ({self.size})")

    def on_tape(self, tape: Tape) -> dict[str, TapeValue]:
        """One leaf per block."""
        return {name: tape.leaf(arr) for name, arr in self.blocks.items()}

    def from_flat_leaf(self, flat: TapeValue) -> dict[str, TapeValue]:
        """Views of a single flat leaf shaped like the blocks (for gradient checks)."""
        out = {}
        for name, (lo, hi) in self.offsets().items():
            out[name] = reshape(getitem(flat, slice(lo, hi)), self.blocks[name].shape)
        return out

    def allclose(self, other: "ParamSet") -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamSet, header: dict[str, object]) -> None:
    """Write a self-describing text checkpoint.

    Layout: version line, ``key=value`` header lines, then for every block a
    ``block <name> shape=<d1,d2,...> size=<n>`` line followed by one line of
    space-separated 17-significant-digit values.
    """
    lines = [CKPT_VERSION]
    for key in sorted(header):
        value = header[key]
        text = str(value)
        if "\n" in text:
            raise ValueError(f"header value for {key!r} spans lines")
        lines.append(f"{key}={text}")
    for name, arr in params.items():
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"block {name} shape={shape} size={arr.size}")
        lines.append(" ".join(f"{v:.17g}" for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ParamSet, dict[str, str]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not lines or lines[0] != CKPT_VERSION:
        raise CheckpointError(f"{path}: missing version tag {CKPT_VERSION!r}")
    header: dict[str, str] = {}
    params = ParamSet()
    i = 1
    while i < len(lines) and not lines[i].startswith("block "):
        key, sep, value = lines[i].partition("=")
        if not sep:
            raise CheckpointError(f"{path}: line {i + 1}: malformed header line")
        header[key] = value
        i += 1
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 4 or parts[0] != "block":
            raise CheckpointError(f"{path}: line {i + 1}: expected a block declaration")
        name = parts[1]
        try:
            shape_text = parts[2].removeprefix("shape=")
            shape = tuple(int(s) for s in shape_text.split(",")) if shape_text else ()
            size = int(parts[3].removeprefix("size="))
        except ValueError:
            raise CheckpointError(f"{path}: block {name}: malformed shape/size") from None
        if i + 1 >= len(lines):
            raise CheckpointError(f"{path}: block {name}: values missing")
        try:
            values = np.array([float(v) for v in lines[i + 1].split()], dtype=float)
        except ValueError:
            raise CheckpointError(f"{path}: block {name}: non-numeric value") from None
        if values.size != size or int(np.prod(shape)) != size:
            raise CheckpointError(f"{path}: block {name}: expected {size} values, found {values.size}")
        params.add(name, values.reshape(shape))
        i += 2
    return params, header
