"""Property tables, train/validation/test splitting and dataset diagnostics."""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


class DatasetError(ValueError):
    pass


@dataclass
class PropertyRow:
    smiles: str
    y: float
    id: str | None = None


@dataclass
class PropertyTable:
    rows: list[PropertyRow]
    property_name: str
    units: str = ""
    skipped: int = 0

    def __len__(self):
        return len(self.rows)

    @property
    def smiles(self) -> list[str]:
        return [r.smiles for r in self.rows]

    @property
    def y(self) -> np.ndarray:
        return np.array([r.y for r in self.rows], dtype=float)

    @property
    def ids(self) -> list[str]:
        return [r.id if r.id is not None else str(i) for i, r in enumerate(self.rows)]


DEFAULT_UNITS = {"tb": "K", "tc": "K", "pc": "bar", "lmv": "cc/mol"}


def load_csv(path, smiles_column: str, target_column: str | None,
             id_column: str | None = None, units: str | None = None) -> PropertyTable:
    """Read a headed CSV. Rows whose target cell is blank are skipped and counted.

    ``target_column=None`` loads SMILES only (targets set to NaN), for prediction.
    """
    rows: list[PropertyRow] = []
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [c for c in (smiles_column, target_column, id_column) if c]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DatasetError(
                f"{path}: missing column(s) {missing}; available: {header}"
            )
        for rec in reader:
            line = reader.line_num
            smi = (rec[smiles_column] or "").strip()
            if target_column is None:
                y = math.nan
            else:
                cell = (rec[target_column] or "").strip()
                if not cell:
                    skipped += 1
                    continue
                try:
                    y = float(cell)
                except ValueError:
                    raise DatasetError(
                        f"{path}:{line}: cannot parse {target_column}={cell!r} as a number"
                    ) from None
            if not smi:
                raise DatasetError(f"{path}:{line}: empty SMILES")
            rows.append(PropertyRow(smi, y, rec[id_column] if id_column else None))
    name = target_column or ""
    if units is None:
        units = DEFAULT_UNITS.get(name.lower(), "")
    return PropertyTable(rows, name, units, skipped)


@dataclass
class SplitPlan:
    test_indices: np.ndarray
    fold_assignment: dict[int, int]
    seed: int
    n_folds: int

    @property
    def trainval_indices(self) -> np.ndarray:
        return np.array(sorted(self.fold_assignment), dtype=int)

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.array(sorted(i for i, f in self.fold_assignment.items() if f == fold), dtype=int)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.array(sorted(i for i, f in self.fold_assignment.items() if f != fold), dtype=int)

    def dumps(self) -> str:
        lines = [f"cmprop-split v1 seed={self.seed} folds={self.n_folds}", "row,fold"]
        test = set(int(i) for i in self.test_indices)
        n = len(test) + len(self.fold_assignment)
        for i in range(n):
            lines.append(f"{i},{'test' if i in test else self.fold_assignment[i]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SplitPlan":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("cmprop-split v1"):
            raise DatasetError("not a cmprop split file")
        meta = dict(tok.split("=") for tok in lines[0].split()[2:])
        test, folds = [], {}
        for line in lines[2:]:
            if not line:
                continue
            i, f = line.split(",")
            if f == "test":
                test.append(int(i))
            else:
                folds[int(i)] = int(f)
        return cls(np.array(test, dtype=int), folds, int(meta["seed"]), int(meta["folds"]))


def make_split(n_rows: int, test_frac: float = 0.05, folds: int = 6, seed: int = 0) -> SplitPlan:
    """Hold out ``round(n_rows * test_frac)`` rows, deal the rest round-robin into folds."""
    if not 0 < test_frac < 1:
        raise DatasetError(f"test_frac must be in (0, 1), got {test_frac}")
    if folds < 2:
        raise DatasetError("need at least 2 folds")
    if n_rows < folds + 1:
        raise DatasetError(f"n_rows={n_rows} too small for {folds} folds plus a test set")
    n_test = max(1, int(round(n_rows * test_frac)))
    if n_rows - n_test < folds:
        raise DatasetError(f"n_rows={n_rows} leaves fewer than {folds} rows for the folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_rows)
    test = np.sort(perm[:n_test])
    assignment = {int(i): k % folds + 1 for k, i in enumerate(perm[n_test:])}
    return SplitPlan(test, assignment, seed, folds)


def kfold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Shuffled round-robin fold membership for ``n`` rows."""
    if folds < 2 or folds > n:
        raise DatasetError(f"cannot make {folds} folds from {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[k::folds]) for k in range(folds)]


@dataclass
class EntropyReport:
    h_bits: float
    collision_molecule_count: int
    shared_label_molecule_count: int
    n_groups: int
    n_samples: int
    groups: dict = field(default_factory=dict, repr=False)

    def to_text(self) -> str:
        return (
            f"h_bits={self.h_bits:.6f}\n"
            f"collision_molecule_count={self.collision_molecule_count}\n"
            f"shared_label_molecule_count={self.shared_label_molecule_count}\n"
            f"n_groups={self.n_groups}\n"
            f"n_samples={self.n_samples}\n"
        )


def _row_keys(features) -> list[tuple]:
    if sparse.issparse(features):
        m = sparse.csr_matrix(features)
        m.sum_duplicates()
        m.sort_indices()
        keys = []
        for i in range(m.shape[0]):
            lo, hi = m.indptr[i], m.indptr[i + 1]
            nz = m.data[lo:hi] != 0
            keys.append((tuple(m.indices[lo:hi][nz].tolist()), tuple(m.data[lo:hi][nz].tolist())))
        return keys
    arr = np.asarray(features)
    return [tuple(row.tolist()) for row in arr]


def conditional_entropy(features, y, y_decimals: int = 6) -> EntropyReport:
    """H(Y|X) in bits with X the exact feature vector and Y rounded to ``y_decimals``.

    Also counts molecules sitting in feature groups with more than one distinct
    target (``collision_molecule_count``) and molecules whose target value is
    shared by two or more distinct feature vectors
    (``shared_label_molecule_count``).
    """
    y = np.asarray(y, dtype=float)
    n = features.shape[0]
    if n != len(y):
        raise DatasetError(f"feature rows ({n}) and targets ({len(y)}) differ in length")
    ys = [round(float(v), y_decimals) + 0.0 for v in y]
    groups: dict[tuple, Counter] = defaultdict(Counter)
    keys = _row_keys(features)
    for key, v in zip(keys, ys):
        groups[key][v] += 1

    h = 0.0
    collided = 0
    for counts in groups.values():
        size = sum(counts.values())
        if len(counts) > 1:
            collided += size
            p = np.array(list(counts.values()), dtype=float) / size
            h += size / n * float(-(p * np.log2(p)).sum())

    label_keys: dict[float, set] = defaultdict(set)
    for key, v in zip(keys, ys):
        label_keys[v].add(key)
    shared = sum(1 for v in ys if len(label_keys[v]) > 1)
    return EntropyReport(h, collided, shared, len(groups), n, dict(groups))


@dataclass
class DistributionSummary:
    n: int
    min: float
    max: float
    mean: float
    median: float
    stddev: float
    bandwidth: float
    degenerate: bool
    kde_x: np.ndarray = field(repr=False)
    kde_density: np.ndarray = field(repr=False)

    def to_text(self) -> str:
        keys = ("n", "min", "max", "mean", "median", "stddev", "bandwidth", "degenerate")
        return "".join(f"{k}={getattr(self, k)}\n" for k in keys)


def silverman_bandwidth(y: np.ndarray) -> float:
    n = len(y)
    sd = float(np.std(y, ddof=1))
    q75, q25 = np.percentile(y, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-0.2)


def distribution_summary(y, kde_points: int = 256) -> DistributionSummary:
    """Summary statistics plus a Gaussian KDE on an evenly spaced grid.

    Zero-variance samples are flagged ``degenerate``; their KDE is reported
    as a single spike at the common value.
    """
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise DatasetError("distribution_summary needs at least 2 samples")
    sd = float(np.std(y, ddof=1))
    lo, hi = float(y.min()), float(y.max())
    h = silverman_bandwidth(y) if sd > 0 else 0.0
    if h <= 0:
        xs = np.full(kde_points, lo)
        dens = np.zeros(kde_points)
        dens[kde_points // 2] = np.inf
        return DistributionSummary(len(y), lo, hi, float(y.mean()), float(np.median(y)),
                                   sd, 0.0, True, xs, dens)
    xs = np.linspace(lo - 3 * h, hi + 3 * h, kde_points)
    z = (xs[:, None] - y[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(y) * h * math.sqrt(2 * math.pi))
    return DistributionSummary(len(y), lo, hi, float(y.mean()), float(np.median(y)),
                               sd, h, False, xs, dens)
