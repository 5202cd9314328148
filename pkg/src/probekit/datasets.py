"""Dataset roles, the binary activation format, manifests and synthetic data.

The synthetic generator plants a rank-1 "attack" signal in a short
contiguous window of otherwise isotropic Gaussian token activations. In long
contexts the window is a tiny fraction of the sequence, which is exactly the
regime where mean pooling dilutes the signal.
"""

from __future__ import annotations

import csv
import enum
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class DatasetRole(str, enum.Enum):
    """Roles in on-disk code order (0-8)."""

    SC_OT = "SC_OT"
    SC_HN = "SC_HN"
    MT_HN = "MT_HN"
    LC_RT = "LC_RT"
    SC_A = "SC_A"
    MT_A = "MT_A"
    LC_A = "LC_A"
    SC_J = "SC_J"
    SC_ART = "SC_ART"

    @property
    def code(self) -> int:
        return _ROLE_ORDER.index(self)

    @classmethod
    def from_code(cls, code: int) -> "DatasetRole":
        return _ROLE_ORDER[code]

    @property
    def is_attack(self) -> bool:
        return self in _ATTACK_ROLES

    @property
    def label(self) -> int:
        return 1 if self.is_attack else 0

    @property
    def error_kind(self) -> str:
        """'fnr', 'hard_negative_fpr' or 'overtrigger_fpr'."""
        if self.is_attack:
            return "fnr"
        if self in (DatasetRole.SC_HN, DatasetRole.MT_HN):
            return "hard_negative_fpr"
        return "overtrigger_fpr"


_ROLE_ORDER = list(DatasetRole)
_ATTACK_ROLES = frozenset(
    {DatasetRole.SC_A, DatasetRole.MT_A, DatasetRole.LC_A, DatasetRole.SC_J, DatasetRole.SC_ART}
)

SPLITS = ("train", "val", "test")

# Which roles may appear in which split.
SPLIT_GRID: dict[str, frozenset[DatasetRole]] = {
    "train": frozenset(
        {DatasetRole.SC_OT, DatasetRole.SC_HN, DatasetRole.MT_HN, DatasetRole.SC_A, DatasetRole.MT_A}
    ),
    "val": frozenset({DatasetRole.SC_OT, DatasetRole.SC_A}),
    "test": frozenset(DatasetRole),
}


class FormatError(ValueError):
    """Malformed activation file. ``field`` names the offending header field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# activation files

MAGIC = b"ACTV"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIBB2s")
HEADER_SIZE = _HEADER.size  # 20 bytes


def encode_activation(X, label: int, role: DatasetRole | str) -> bytes:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"activations must have shape (n, d) with n, d >= 1, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("activations must be finite")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    role = DatasetRole(role)
    n, d = X.shape
    header = _HEADER.pack(MAGIC, VERSION, 0, d, n, label, role.code, b"\x00\x00")
    return header + np.ascontiguousarray(X, dtype="<f4").tobytes()


def decode_activation(data: bytes) -> tuple[np.ndarray, int, DatasetRole]:
    if len(data) < HEADER_SIZE:
        raise FormatError("header", f"truncated: {len(data)} bytes, need {HEADER_SIZE}")
    magic, version, flags, d, n, label, role, _ = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if flags != 0:
        raise FormatError("flags", f"expected 0, got {flags}")
    if d < 1 or n < 1:
        raise FormatError("shape", f"d={d}, n={n} must both be >= 1")
    if label not in (0, 1):
        raise FormatError("label", f"expected 0 or 1, got {label}")
    if role >= len(_ROLE_ORDER):
        raise FormatError("role", f"unknown role code {role}")
    expected = n * d * 4
    payload = len(data) - HEADER_SIZE
    if payload != expected:
        kind = "truncated" if payload < expected else "trailing bytes"
        raise FormatError("payload", f"{kind}: {payload} bytes, expected {expected}")
    X = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE).reshape(n, d).astype(np.float32)
    return X, int(label), DatasetRole.from_code(role)


def write_activation_file(path, X, label: int, role: DatasetRole | str) -> None:
    Path(path).write_bytes(encode_activation(X, label, role))


def read_activation_file(path) -> tuple[np.ndarray, int, DatasetRole]:
    """Returns (X as float32 of shape (n, d), label, role)."""
    return decode_activation(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    role: DatasetRole
    split: str
    label: int


@dataclass
class SplitManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None  # directory relative paths resolve against

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def roles(self) -> set[DatasetRole]:
        return {e.role for e in self.entries}

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"{e.path}: unknown split {e.split!r}")
            if e.role not in SPLIT_GRID[e.split]:
                raise ManifestError(f"{e.path}: role {e.role.value} is not used in the {e.split} split")
            if e.label != e.role.label:
                raise ManifestError(f"{e.path}: label {e.label} contradicts role {e.role.value}")
            prev = seen.get(e.path)
            if prev is not None:
                if prev != e.split:
                    raise ManifestError(
                        f"{e.path}: listed in both {prev} and {e.split}; "
                        "no example may be shared between train, validation and test"
                    )
                raise ManifestError(f"{e.path}: duplicate entry in {e.split}")
            seen[e.path] = e.split

    def write(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["path", "role", "split", "label"])
            for e in self.entries:
                w.writerow([e.path, e.role.value, e.split, e.label])


def load_manifest(path) -> SplitManifest:
    """Read and validate a tab-separated manifest (path, role, split, label)."""
    path = Path(path)
    entries = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is not None and header != ["path", "role", "split", "label"]:
            raise ManifestError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            p, role, split, label = row
            try:
                role_v = DatasetRole(role)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: unknown role {role!r}") from None
            if label not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            entries.append(ManifestEntry(p, role_v, split, int(label)))
    manifest = SplitManifest(entries, root=path.parent)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# in-memory examples


@dataclass
class Example:
    id: str
    X: np.ndarray  # (n, d) float32
    label: int
    role: DatasetRole
    split: str
    signal_span: tuple[int, int] | None = None  # [start, stop) of planted tokens


def load_examples(manifest: SplitManifest, split: str | None = None) -> list[Example]:
    out = []
    for e in manifest.entries:
        if split is not None and e.split != split:
            continue
        X, label, role = read_activation_file(manifest.resolve(e))
        if role != e.role or label != e.label:
            raise ManifestError(f"{e.path}: file header disagrees with manifest ({role.value}, {label})")
        out.append(Example(Path(e.path).stem, X, label, role, e.split))
    return out


# ---------------------------------------------------------------------------
# synthetic generation

DEFAULT_COUNTS: dict[str, dict[str, int]] = {
    "train": {"SC_OT": 700, "SC_HN": 250, "MT_HN": 100, "SC_A": 850, "MT_A": 100},
    "val": {"SC_OT": 300, "SC_A": 200},
    "test": {
        "SC_OT": 400, "SC_HN": 150, "MT_HN": 100, "LC_RT": 150,
        "SC_A": 250, "MT_A": 100, "LC_A": 150, "SC_J": 100, "SC_ART": 100,
    },
}


@dataclass(frozen=True)
class SyntheticConfig:
    activation_dim: int = 64
    short_len: tuple[int, int] = (16, 64)
    long_len: tuple[int, int] = (1024, 2048)
    signal_window: int = 16
    class_separation: float = 4.0
    background_scale: float = 1.0
    hardneg_overlap: float = 0.5
    jailbreak_angle: float = 30.0  # degrees, SC_J
    red_team_angle: float = 50.0  # degrees, SC_ART
    multiturn_segments: tuple[int, int] = (2, 6)
    counts: Mapping[str, Mapping[str, int]] = field(default_factory=lambda: DEFAULT_COUNTS)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.short_len
        llo, lhi = self.long_len
        if not (1 <= lo <= hi and llo <= lhi):
            raise ValueError("length ranges must be ordered (min, max)")
        if llo <= hi:
            raise ValueError("long_len minimum must exceed short_len maximum")
        if not 1 <= self.signal_window <= lo:
            raise ValueError("signal_window must lie in [1, short_len min]")
        if not 0.0 <= self.hardneg_overlap <= 1.0:
            raise ValueError("hardneg_overlap must lie in [0, 1]")
        if self.activation_dim < 2:
            raise ValueError("activation_dim must be >= 2")
        for split, roles in self.counts.items():
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            for role, count in roles.items():
                if DatasetRole(role) not in SPLIT_GRID[split]:
                    raise ValueError(f"role {role} is not used in the {split} split")
                if count < 0:
                    raise ValueError("counts must be non-negative")

    def scaled(self, factor: float) -> "SyntheticConfig":
        """Same config with every count multiplied by ``factor`` (at least 1)."""
        counts = {
            s: {r: max(1, int(round(c * factor))) for r, c in roles.items()}
            for s, roles in self.counts.items()
        }
        return replace(self, counts=counts)


def _unit(v):
    return v / np.linalg.norm(v)


def _rotated(base, angle_deg, rng):
    """Unit vector at ``angle_deg`` from ``base`` in a random plane."""
    perp = rng.standard_normal(base.shape)
    perp = _unit(perp - (perp @ base) * base)
    a = np.deg2rad(angle_deg)
    return np.cos(a) * base + np.sin(a) * perp


class _Generator:
    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        d = cfg.activation_dim
        self.signal = _unit(self.rng.standard_normal(d))
        # hard negatives: cosine similarity hardneg_overlap with the signal
        angle = np.rad2deg(np.arccos(np.clip(cfg.hardneg_overlap, 0.0, 1.0)))
        self.hardneg = _rotated(self.signal, angle, self.rng)
        self.jailbreak = _rotated(self.signal, cfg.jailbreak_angle, self.rng)
        self.red_team = _rotated(self.signal, cfg.red_team_angle, self.rng)

    def _background(self, n):
        return self.rng.standard_normal((n, self.cfg.activation_dim)) * self.cfg.background_scale

    def _short_len(self):
        lo, hi = self.cfg.short_len
        return int(self.rng.integers(lo, hi + 1))

    def _plant(self, X, direction, start):
        w = self.cfg.signal_window
        X[start : start + w] += self.cfg.class_separation * direction
        return (start, start + w)

    def _short(self, direction):
        n = self._short_len()
        X = self._background(n)
        span = None
        if direction is not None:
            start = int(self.rng.integers(0, n - self.cfg.signal_window + 1))
            span = self._plant(X, direction, start)
        return X, span

    def _multiturn(self, direction):
        lo, hi = self.cfg.multiturn_segments
        k = int(self.rng.integers(lo, hi + 1))
        parts = [self._background(self._short_len()) for _ in range(k - 1)]
        last, span = self._short(direction)
        offset = sum(p.shape[0] for p in parts)
        X = np.concatenate(parts + [last])
        if span is not None:
            span = (span[0] + offset, span[1] + offset)
        return X, span

    def _long(self, direction):
        lo, hi = self.cfg.long_len
        n = int(self.rng.integers(lo, hi + 1))
        X = self._background(n)
        span = None
        if direction is not None:
            w = self.cfg.signal_window
            placement = int(self.rng.integers(0, 3))
            if placement == 0:  # request before the context
                start = 0
            elif placement == 1:  # request after the context
                start = n - w
            else:  # request interleaved with the context
                start = int(self.rng.integers(w, n - 2 * w))
            span = self._plant(X, direction, start)
        return X, span

    def sample(self, role: DatasetRole):
        R = DatasetRole
        if role is R.SC_OT:
            return self._short(None)
        if role is R.SC_HN:
            return self._short(self.hardneg)
        if role is R.MT_HN:
            return self._multiturn(self.hardneg)
        if role is R.LC_RT:
            return self._long(None)
        if role is R.SC_A:
            return self._short(self.signal)
        if role is R.MT_A:
            return self._multiturn(self.signal)
        if role is R.LC_A:
            return self._long(self.signal)
        if role is R.SC_J:
            return self._short(self.jailbreak)
        return self._short(self.red_team)


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    examples: list[Example]
    signal_direction: np.ndarray

    def split(self, name: str) -> list[Example]:
        return [e for e in self.examples if e.split == name]


def generate_dataset(config: SyntheticConfig) -> SyntheticDataset:
    """Deterministic in-memory synthetic dataset (float32 activations)."""
    gen = _Generator(config)
    examples = []
    for split in SPLITS:
        for role in DatasetRole:
            count = config.counts.get(split, {}).get(role.value, 0)
            for i in range(count):
                X, span = gen.sample(role)
                examples.append(
                    Example(
                        f"{split}_{role.value}_{i:05d}",
                        X.astype(np.float32),
                        role.label,
                        role,
                        split,
                        span,
                    )
                )
    return SyntheticDataset(config, examples, gen.signal)


def gen_synthetic(config: SyntheticConfig, out_dir, workers: int = 1) -> SplitManifest:
    """Generate a dataset, write one activation file per example plus ``manifest.tsv``."""
    out_dir = Path(out_dir)
    ds = generate_dataset(config)
    entries = []
    jobs = []
    for ex in ds.examples:
        rel = Path(ex.split) / f"{ex.id}.actv"
        entries.append(ManifestEntry(rel.as_posix(), ex.role, ex.split, ex.label))
        jobs.append((out_dir / rel, ex))
    for split in SPLITS:
        (out_dir / split).mkdir(parents=True, exist_ok=True)

    def write(job):
        path, ex = job
        write_activation_file(path, ex.X, ex.label, ex.role)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(write, jobs))
    else:
        for job in jobs:
            write(job)
    manifest = SplitManifest(entries, root=out_dir)
    manifest.validate()
    manifest.write(out_dir / "manifest.tsv")
    return manifest


def sequences(examples: Sequence[Example]) -> list[np.ndarray]:
    return [e.X for e in examples]


def labels_of(examples: Iterable[Example]) -> np.ndarray:
    return np.array([e.label for e in examples], dtype=np.int64)


def roles_of(examples: Iterable[Example]) -> list[DatasetRole]:
    return [e.role for e in examples]
