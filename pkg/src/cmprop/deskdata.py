"""Small bundled molecule set with a synthetic boiling-point-like target.

The target is ``120 + 30 * heavy_atoms + 50 * hydroxyl_groups`` (kelvin-like
units): strictly increasing in heavy-atom count, plus a fixed bonus per O-H
group. It exists to exercise the full pipeline at desk scale; it is not
experimental data.
"""

from __future__ import annotations

import csv
from importlib import resources

from .smiles import molecule_from_smiles

SMILES = [
    # n-alkanes C1-C12
    "C", "CC", "CCC", "CCCC", "CCCCC", "CCCCCC", "CCCCCCC", "CCCCCCCC",
    "CCCCCCCCC", "CCCCCCCCCC", "CCCCCCCCCCC", "CCCCCCCCCCCC",
    # branched alkanes
    "CC(C)C", "CC(C)CC", "CC(C)(C)C", "CCC(C)CC", "CC(C)CCC", "CC(C)C(C)C",
    "CC(C)(C)CC", "CCC(C)CCC", "CC(C)CCCC", "CC(C)CC(C)C",
    # primary alcohols C1-C10
    "CO", "CCO", "CCCO", "CCCCO", "CCCCCO", "CCCCCCO", "CCCCCCCO",
    "CCCCCCCCO", "CCCCCCCCCO", "CCCCCCCCCCO",
    # secondary / branched alcohols and diols
    "CC(O)C", "CCC(O)C", "CCCC(O)C", "CCC(O)CC", "CC(C)CO", "CC(C)(C)O",
    "CCCCC(O)C", "OCCO", "OCCCO", "OCCCCO",
    # aromatics
    "c1ccccc1", "Cc1ccccc1", "CCc1ccccc1", "CCCc1ccccc1", "CCCCc1ccccc1",
    "Cc1ccccc1C", "Cc1cccc(C)c1", "Cc1ccc(C)cc1", "CC(C)c1ccccc1",
    "Cc1cc(C)cc(C)c1", "Oc1ccccc1", "OCc1ccccc1", "OCCc1ccccc1",
    "Cc1ccccc1O", "Cc1ccc(O)cc1", "CCCCCc1ccccc1", "c1ccc(cc1)CCCO",
    "Cc1ccc(CC)cc1",
]


def count_hydroxyls(smiles: str) -> int:
    g = molecule_from_smiles(smiles)
    n = 0
    for atom in g.atoms:
        if atom.element != "O":
            continue
        nbrs = g.neighbors(atom.index)
        if sum(1 for j in nbrs if g.atoms[j].element == "H") == 1 and len(nbrs) == 2:
            n += 1
    return n


def synthetic_target(smiles: str) -> float:
    g = molecule_from_smiles(smiles)
    return 120.0 + 30.0 * len(g.heavy_atoms) + 50.0 * count_hydroxyls(smiles)


def rows() -> list[dict]:
    return [
        {"id": f"m{i:03d}", "smiles": s, "tb_synth": f"{synthetic_target(s):.1f}"}
        for i, s in enumerate(SMILES)
    ]


def write_csv(path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "smiles", "tb_synth"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows())


def bundled_csv_path():
    """Path to the shipped copy of :func:`rows` as CSV."""
    return resources.files("cmprop") / "data" / "desk_set.csv"
