"""Connectivity-matrix submatrix fingerprints.

Each atom (order 1) and each simple path of ``k`` heavy atoms (orders 2-4)
defines an environment: the core plus every directly bonded atom. The
induced principal submatrix of the connectivity matrix on that environment
is fingerprinted by its determinant (a readable label) and its rounded
eigenvalue spectrum (the category identity). A molecule's feature vector
counts how many environments fall into each category.
"""

from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .linalg import determinant, jacobi_eigenvalues
from .smiles import MolecularGraph, add_explicit_hydrogens

ORDINALS = {1: "1st", 2: "2nd", 3: "3rd", 4: "4th"}
K_MAX = 4
EIG_DECIMALS = 6
DET_DECIMALS = 4

VOCAB_HEADER = "cmprop-vocab v1"
FEATS_HEADER = "cmprop-feats v1"


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class EnvironmentSubmatrix:
    order: int
    core_atoms: tuple[int, ...]
    member_atoms: tuple[int, ...]
    matrix: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class FeatureCategory:
    order: int
    det_value: float
    det_label: str
    eig_signature: tuple[float, ...]
    label: str

    @property
    def key(self) -> tuple:
        return (self.order, self.det_label, self.eig_signature)


@dataclass
class FeatureVector:
    counts: dict[int, int]
    dropped: int = 0
    n_environments: int = 0

    def dense(self, n_features: int) -> np.ndarray:
        out = np.zeros(n_features)
        for j, c in self.counts.items():
            out[j] = c
        return out


def build_connectivity_matrix(g: MolecularGraph) -> np.ndarray:
    """Atomic numbers on the diagonal, bond orders off the diagonal."""
    m = np.zeros((g.n_atoms, g.n_atoms))
    for atom in g.atoms:
        m[atom.index, atom.index] = atom.atomic_number
    for bond in g.bonds:
        m[bond.a, bond.b] = m[bond.b, bond.a] = bond.order
    return m


def _heavy_paths(g: MolecularGraph, k: int) -> list[tuple[int, ...]]:
    """Simple paths of ``k`` heavy atoms, one per unordered path."""
    heavy = set(g.heavy_atoms)
    paths = []

    def extend(path):
        if len(path) == k:
            if path[0] < path[-1]:
                paths.append(tuple(path))
            return
        for j in g.neighbors(path[-1]):
            if j in heavy and j not in path:
                path.append(j)
                extend(path)
                path.pop()

    for start in sorted(heavy):
        extend([start])
    return paths


def enumerate_environments(g: MolecularGraph, k_max: int = K_MAX) -> list[EnvironmentSubmatrix]:
    if not 1 <= k_max <= K_MAX:
        raise ValueError(f"k_max must be in 1..{K_MAX}, got {k_max}")
    if not g.has_explicit_hydrogens:
        g = add_explicit_hydrogens(g)
    m = build_connectivity_matrix(g)
    envs = []
    cores: list[tuple[int, ...]] = [(a.index,) for a in g.atoms]
    for k in range(2, k_max + 1):
        cores.extend(_heavy_paths(g, k))
    for core in cores:
        members = set(core)
        for i in core:
            members.update(g.neighbors(i))
        idx = tuple(sorted(members))
        envs.append(EnvironmentSubmatrix(len(core), core, idx, m[np.ix_(idx, idx)]))
    return envs


def det_label(value: float) -> str:
    text = f"{value:.{DET_DECIMALS}f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    if text in ("-0", ""):
        text = "0"
    return text


@lru_cache(maxsize=65536)
def _fingerprint_cached(n: int, raw: bytes) -> tuple[float, tuple[float, ...]]:
    mat = np.frombuffer(raw, dtype=np.float64).reshape(n, n)
    det = determinant(mat)
    eig = np.round(jacobi_eigenvalues(mat), EIG_DECIMALS) + 0.0  # drop -0.0
    return det, tuple(float(x) for x in eig)


def fingerprint(matrix: np.ndarray) -> tuple[float, str, tuple[float, ...]]:
    """Return ``(determinant, det_label, eigenvalue signature)``."""
    mat = np.ascontiguousarray(matrix, dtype=np.float64)
    det, sig = _fingerprint_cached(mat.shape[0], mat.tobytes())
    return det, det_label(det), sig


def _category_key(env: EnvironmentSubmatrix):
    det, label, sig = fingerprint(env.matrix)
    return (env.order, label, sig), det


class FeatureVocabulary:
    """Ordered registry of feature categories.

    A frozen vocabulary never changes; :meth:`extended` returns an unfrozen
    copy that :func:`featurize_molecule` may append to in ``extend`` mode.
    """

    def __init__(self, categories: Sequence[FeatureCategory] = (), k_max: int = K_MAX,
                 frozen: bool = True):
        self.categories = list(categories)
        self.k_max = k_max
        self.frozen = frozen
        self._index = {c.key: i for i, c in enumerate(self.categories)}
        self._labels = {c.label for c in self.categories}
        if len(self._index) != len(self.categories) or len(self._labels) != len(self.categories):
            raise ValueError("duplicate categories or labels in vocabulary")

    def __len__(self):
        return len(self.categories)

    def __iter__(self):
        return iter(self.categories)

    def __eq__(self, other):
        return (isinstance(other, FeatureVocabulary) and self.k_max == other.k_max
                and self.categories == other.categories)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.categories]

    def index_of(self, key) -> int | None:
        return self._index.get(key)

    def label_index(self) -> dict[str, int]:
        return {c.label: i for i, c in enumerate(self.categories)}

    @property
    def first_order(self) -> list[int]:
        return [i for i, c in enumerate(self.categories) if c.order == 1]

    @property
    def higher_order(self) -> list[int]:
        return [i for i, c in enumerate(self.categories) if c.order >= 2]

    def extended(self) -> "FeatureVocabulary":
        return FeatureVocabulary(self.categories, self.k_max, frozen=False)

    def freeze(self) -> "FeatureVocabulary":
        return FeatureVocabulary(self.categories, self.k_max, frozen=True)

    def _append(self, key, det_value: float) -> int:
        order, dlabel, sig = key
        base = f"{ORDINALS[order]}_{dlabel}"
        label, n = base, 1
        while label in self._labels:
            n += 1
            label = f"{base}_{n}"
        self.categories.append(FeatureCategory(order, float(dlabel), dlabel, sig, label))
        self._index[key] = len(self.categories) - 1
        self._labels.add(label)
        return len(self.categories) - 1

    # -- text format -----------------------------------------------------
    def dumps(self) -> str:
        lines = [f"{VOCAB_HEADER} kmax={self.k_max}"]
        for c in self.categories:
            sig = ",".join(repr(x) for x in c.eig_signature)
            lines.append(f"{c.label}\t{c.order}\t{c.det_label}\t{sig}\t{c.det_value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "FeatureVocabulary":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(VOCAB_HEADER + " kmax="):
            raise FormatError("not a cmprop vocabulary file")
        k_max = int(lines[0].split("kmax=")[1])
        cats = []
        for n, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5):
                raise FormatError(f"line {n}: expected 4 or 5 tab-separated fields")
            label, order, dlabel, sig = parts[:4]
            det_value = float(parts[4]) if len(parts) == 5 else float(dlabel)
            sig_t = tuple(float(x) for x in sig.split(",")) if sig else ()
            cats.append(FeatureCategory(int(order), det_value, dlabel, sig_t, label))
        return cls(cats, k_max)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "FeatureVocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def _finalize(found: dict[tuple, float], k_max: int) -> FeatureVocabulary:
    groups: dict[tuple[int, str], list[tuple]] = defaultdict(list)
    for key in found:
        groups[(key[0], key[1])].append(key)
    cats = []
    for (order, dlabel), keys in groups.items():
        for n, key in enumerate(sorted(keys, key=lambda k: k[2]), start=1):
            label = f"{ORDINALS[order]}_{dlabel}" + ("" if n == 1 else f"_{n}")
            cats.append(FeatureCategory(order, float(dlabel), dlabel, key[2], label))
    cats.sort(key=lambda c: (c.order, c.det_value, c.det_label, c.eig_signature))
    return FeatureVocabulary(cats, k_max)


def build_vocabulary(graphs: Iterable[MolecularGraph], k_max: int = K_MAX) -> FeatureVocabulary:
    """Scan every environment of every graph and register its category.

    Categories are ordered by (order, determinant, signature). Within one
    (order, det_label) group, the lexicographically smallest signature keeps
    the bare label and the rest get ``_2``, ``_3``, ... suffixes.
    """
    found: dict[tuple, float] = {}
    n = 0
    for g in graphs:
        n += 1
        for env in enumerate_environments(g, k_max):
            key, det = _category_key(env)
            found.setdefault(key, det)
    if n == 0:
        raise ValueError("build_vocabulary needs at least one molecule")
    return _finalize(found, k_max)


def featurize_molecule(g: MolecularGraph, vocab: FeatureVocabulary,
                       mode: str = "frozen") -> FeatureVector:
    """Count category occurrences for one molecule.

    In ``frozen`` mode unknown categories are dropped and tallied in
    ``FeatureVector.dropped``; in ``extend`` mode (unfrozen vocabulary only)
    they are appended to ``vocab``.
    """
    if mode not in ("frozen", "extend"):
        raise ValueError(f"mode must be 'frozen' or 'extend', got {mode!r}")
    if mode == "extend" and vocab.frozen:
        raise ValueError("extend mode needs an unfrozen vocabulary (use vocab.extended())")
    counts: Counter[int] = Counter()
    dropped = 0
    envs = enumerate_environments(g, vocab.k_max)
    for env in envs:
        key, det = _category_key(env)
        j = vocab.index_of(key)
        if j is None:
            if mode == "frozen":
                dropped += 1
                continue
            j = vocab._append(key, det)
        counts[j] += 1
    return FeatureVector(dict(sorted(counts.items())), dropped, len(envs))


def build_feature_matrix(graphs: Sequence[MolecularGraph], vocab: FeatureVocabulary
                         ) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Stack frozen-mode feature vectors; returns ``(matrix, dropped_per_row)``."""
    rows, cols, vals = [], [], []
    dropped = np.zeros(len(graphs), dtype=np.int64)
    for i, g in enumerate(graphs):
        fv = featurize_molecule(g, vocab, "frozen")
        dropped[i] = fv.dropped
        for j, c in fv.counts.items():
            rows.append(i)
            cols.append(j)
            vals.append(c)
    mat = sparse.csr_matrix(
        (np.asarray(vals, dtype=np.int64), (rows, cols)),
        shape=(len(graphs), len(vocab)),
    )
    mat.sort_indices()
    return mat, dropped


def dumps_feature_matrix(mat: sparse.spmatrix) -> str:
    mat = sparse.csr_matrix(mat)
    mat.sort_indices()
    lines = [f"{FEATS_HEADER} rows={mat.shape[0]} cols={mat.shape[1]}"]
    for i in range(mat.shape[0]):
        lo, hi = mat.indptr[i], mat.indptr[i + 1]
        for j, v in zip(mat.indices[lo:hi], mat.data[lo:hi]):
            lines.append(f"{i},{j},{int(v)}")
    return "\n".join(lines) + "\n"


def loads_feature_matrix(text: str) -> sparse.csr_matrix:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(FEATS_HEADER):
        raise FormatError("not a cmprop feature-matrix file")
    fields = dict(tok.split("=") for tok in lines[0].split()[2:])
    shape = (int(fields["rows"]), int(fields["cols"]))
    rows, cols, vals = [], [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        try:
            i, j, v = (int(x) for x in line.split(","))
        except ValueError as exc:
            raise FormatError(f"line {n}: bad triplet {line!r}") from exc
        rows.append(i)
        cols.append(j)
        vals.append(v)
    return sparse.csr_matrix((np.asarray(vals, dtype=np.int64), (rows, cols)), shape=shape)


def save_feature_matrix(mat, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_feature_matrix(mat))


def load_feature_matrix(path) -> sparse.csr_matrix:
    with open(path, encoding="utf-8") as fh:
        return loads_feature_matrix(fh.read())
