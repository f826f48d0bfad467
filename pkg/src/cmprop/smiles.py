"""Parse a practical subset of SMILES into a molecular graph.

Supported: organic-subset atoms (B C N O P S F Cl Br I), aromatic lowercase
atoms (b c n o p s), bracket atoms with isotope/charge/H-count, ring closures
1-9 and %nn, branches, and the bond symbols ``- = # :``. Stereo markers
(``/ \\ @ @@``) and isotopes are read and discarded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

ATOMIC_NUMBERS = {
    "H": 1, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9,
    "P": 15, "S": 16, "Cl": 17, "Br": 35, "I": 53,
}
DEFAULT_VALENCE = {
    "B": 3, "C": 4, "N": 3, "O": 2, "P": 3, "S": 2,
    "F": 1, "Cl": 1, "Br": 1, "I": 1, "H": 1,
}
AROMATIC_ELEMENTS = frozenset({"B", "C", "N", "O", "P", "S"})
BOND_SYMBOLS = {"-": 1.0, "=": 2.0, "#": 3.0, ":": 1.5}
BOND_ORDERS = (1.0, 1.5, 2.0, 3.0)


class SmilesError(ValueError):
    """Malformed or unsupported SMILES input.

    Attributes
    ----------
    position : int or None
        Byte offset into the input where the problem was detected.
    """

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at offset {position})"
        super().__init__(message)


class ValenceError(ValueError):
    def __init__(self, atom_index: int, message: str):
        self.atom_index = atom_index
        super().__init__(f"atom {atom_index}: {message}")


@dataclass(frozen=True)
class Atom:
    index: int
    element: str
    atomic_number: int
    aromatic: bool = False
    formal_charge: int = 0
    bracket_h_count: int | None = None


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: float


@dataclass(frozen=True)
class MolecularGraph:
    """Immutable atom/bond graph; ``adjacency[i]`` lists ``(neighbor, order)``."""

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    adjacency: tuple[tuple[tuple[int, float], ...], ...] = field(repr=False)
    has_explicit_hydrogens: bool = False

    @classmethod
    def from_parts(cls, atoms, bonds, has_explicit_hydrogens=False):
        nbrs: list[list[tuple[int, float]]] = [[] for _ in atoms]
        for bond in bonds:
            nbrs[bond.a].append((bond.b, bond.order))
            nbrs[bond.b].append((bond.a, bond.order))
        adjacency = tuple(tuple(sorted(n)) for n in nbrs)
        return cls(tuple(atoms), tuple(bonds), adjacency, has_explicit_hydrogens)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def heavy_atoms(self) -> list[int]:
        return [a.index for a in self.atoms if a.atomic_number > 1]

    def neighbors(self, i: int) -> list[int]:
        return [j for j, _ in self.adjacency[i]]

    def bond_order(self, i: int, j: int) -> float:
        for k, order in self.adjacency[i]:
            if k == j:
                return order
        return 0.0

    def is_connected(self) -> bool:
        if not self.atoms:
            return False
        seen = {0}
        stack = [0]
        while stack:
            for j in self.neighbors(stack.pop()):
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == len(self.atoms)

    def atom_signature(self) -> list[tuple]:
        """Sorted per-atom (atomic number, incident bond orders) multiset.

        Equal signatures are a cheap necessary condition for isomorphism.
        """
        return sorted(
            (a.atomic_number, tuple(sorted(o for _, o in self.adjacency[a.index])))
            for a in self.atoms
        )


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.atoms: list[Atom] = []
        self.bonds: dict[tuple[int, int], Bond] = {}
        # ring digit -> (atom index, bond symbol order or None, offset)
        self.rings: dict[int, tuple[int, float | None, int]] = {}

    def error(self, message, pos=None):
        raise SmilesError(message, self.pos if pos is None else pos)

    def parse(self) -> MolecularGraph:
        text = self.text
        prev: int | None = None
        pending_bond: float | None = None
        branch_stack: list[tuple[int, int]] = []

        while self.pos < len(text):
            ch = text[self.pos]
            if ch == ".":
                self.error("multi-fragment SMILES ('.') not supported")
            if ch == "(":
                if prev is None:
                    self.error("branch opened before any atom")
                branch_stack.append((prev, self.pos))
                self.pos += 1
                continue
            if ch == ")":
                if not branch_stack:
                    self.error("unmatched ')'")
                if pending_bond is not None:
                    self.error("bond symbol before ')'")
                prev = branch_stack.pop()[0]
                self.pos += 1
                continue
            if ch in BOND_SYMBOLS:
                if pending_bond is not None:
                    self.error("two consecutive bond symbols")
                pending_bond = BOND_SYMBOLS[ch]
                self.pos += 1
                continue
            if ch in "/\\":
                self.pos += 1
                continue
            if ch.isdigit() or ch == "%":
                if prev is None:
                    self.error("ring-closure digit before any atom")
                start = self.pos
                if ch == "%":
                    digits = text[self.pos + 1:self.pos + 3]
                    if len(digits) != 2 or not digits.isdigit():
                        self.error("'%' must be followed by two digits")
                    ring = int(digits)
                    self.pos += 3
                else:
                    ring = int(ch)
                    self.pos += 1
                self._ring_closure(prev, ring, pending_bond, start)
                pending_bond = None
                continue

            start = self.pos
            if ch == "[":
                atom = self._bracket_atom()
            else:
                atom = self._organic_atom()
            if prev is not None:
                self._add_bond(prev, atom.index, pending_bond, start)
            elif pending_bond is not None:
                self.error("bond symbol before first atom", start)
            pending_bond = None
            prev = atom.index

        if branch_stack:
            self.error("unmatched '('", branch_stack[-1][1])
        if self.rings:
            ring, (_, _, offset) = min(self.rings.items(), key=lambda kv: kv[1][2])
            self.error(f"unmatched ring-closure digit {ring}", offset)
        if pending_bond is not None:
            self.error("dangling bond symbol at end of input")
        if not self.atoms:
            self.error("no atoms in input", 0)

        g = MolecularGraph.from_parts(self.atoms, list(self.bonds.values()))
        if not g.is_connected():
            raise SmilesError("graph is not connected")
        return g

    def _new_atom(self, element, aromatic, charge=0, hcount=None) -> Atom:
        atom = Atom(
            index=len(self.atoms),
            element=element,
            atomic_number=ATOMIC_NUMBERS[element],
            aromatic=aromatic,
            formal_charge=charge,
            bracket_h_count=hcount,
        )
        self.atoms.append(atom)
        return atom

    def _organic_atom(self) -> Atom:
        text = self.text
        two = text[self.pos:self.pos + 2]
        if two in ("Cl", "Br"):
            self.pos += 2
            return self._new_atom(two, False)
        ch = text[self.pos]
        if ch in "BCNOPSFI":
            self.pos += 1
            return self._new_atom(ch, False)
        if ch in "bcnops":
            self.pos += 1
            return self._new_atom(ch.upper(), True)
        self.error(f"unknown element or character {ch!r}")

    def _bracket_atom(self) -> Atom:
        text = self.text
        open_pos = self.pos
        close = text.find("]", open_pos)
        if close < 0:
            self.error("unterminated bracket atom")
        body = text[open_pos + 1:close]
        if not body:
            self.error("empty bracket atom")
        i = 0
        while i < len(body) and body[i].isdigit():  # isotope, ignored
            i += 1
        rest = body[i:]
        if rest[:2] in ("Cl", "Br"):
            element, aromatic, i = rest[:2], False, i + 2
        elif rest[:1] and rest[0] in "HBCNOPSFI":
            element, aromatic, i = rest[0], False, i + 1
        elif rest[:1] and rest[0] in "bcnops":
            element, aromatic, i = rest[0].upper(), True, i + 1
        else:
            self.error(f"unknown element in bracket atom [{body}]", open_pos + 1 + i)
        while i < len(body) and body[i] == "@":  # chirality, ignored
            i += 1
        hcount = 0
        if i < len(body) and body[i] == "H":
            i += 1
            hcount = 1
            if i < len(body) and body[i].isdigit():
                hcount = int(body[i])
                i += 1
        charge = 0
        if i < len(body) and body[i] in "+-":
            sign = 1 if body[i] == "+" else -1
            j = i + 1
            if j < len(body) and body[j].isdigit():
                k = j
                while k < len(body) and body[k].isdigit():
                    k += 1
                charge = sign * int(body[j:k])
                i = k
            else:
                n = 1
                while j < len(body) and body[j] == body[i]:
                    n += 1
                    j += 1
                charge = sign * n
                i = j
        if i < len(body) and body[i] == ":":  # atom class, ignored
            i = len(body) if body[i + 1:].isdigit() else i
        if i != len(body):
            self.error(f"cannot parse bracket atom [{body}]", open_pos + 1 + i)
        self.pos = close + 1
        return self._new_atom(element, aromatic, charge, hcount)

    def _add_bond(self, a: int, b: int, order: float | None, pos: int):
        if a == b:
            self.error("atom bonded to itself", pos)
        if order is None:
            both_aromatic = self.atoms[a].aromatic and self.atoms[b].aromatic
            order = 1.5 if both_aromatic else 1.0
        key = (min(a, b), max(a, b))
        if key in self.bonds:
            self.error(f"duplicate bond between atoms {a} and {b}", pos)
        self.bonds[key] = Bond(key[0], key[1], order)

    def _ring_closure(self, atom: int, ring: int, order: float | None, pos: int):
        if ring not in self.rings:
            self.rings[ring] = (atom, order, pos)
            return
        other, other_order, _ = self.rings.pop(ring)
        if order is not None and other_order is not None and order != other_order:
            self.error(f"conflicting bond orders on ring closure {ring}", pos)
        self._add_bond(other, atom, order if order is not None else other_order, pos)


def parse_smiles(text: str) -> MolecularGraph:
    """Parse ``text`` into a heavy-atom graph (no implicit hydrogens yet).

    Raises
    ------
    SmilesError
        On any syntax problem; the message carries the byte offset.
    """
    if not isinstance(text, str) or not text.strip():
        raise SmilesError("empty SMILES", 0)
    return _Parser(text.strip()).parse()


def implicit_hydrogens(g: MolecularGraph, i: int) -> int:
    atom = g.atoms[i]
    if atom.bracket_h_count is not None:
        return atom.bracket_h_count
    total = sum(order for _, order in g.adjacency[i])
    allowance = DEFAULT_VALENCE[atom.element] + atom.formal_charge
    # tolerance guards 1.5 * k sums against float noise before ceil
    used = math.ceil(total - 1e-9)
    if used > allowance:
        raise ValenceError(
            i, f"bond-order sum {total:g} exceeds valence {allowance} of {atom.element}"
        )
    return max(0, allowance - used)


def add_explicit_hydrogens(g: MolecularGraph) -> MolecularGraph:
    """Return a new graph with hydrogens appended after the original atoms."""
    if g.has_explicit_hydrogens:
        return g
    atoms = list(g.atoms)
    bonds = list(g.bonds)
    for atom in g.atoms:
        if atom.atomic_number == 1:
            continue
        for _ in range(implicit_hydrogens(g, atom.index)):
            h = Atom(index=len(atoms), element="H", atomic_number=1)
            atoms.append(h)
            bonds.append(Bond(atom.index, h.index, 1.0))
    return MolecularGraph.from_parts(atoms, bonds, has_explicit_hydrogens=True)


def molecule_from_smiles(text: str) -> MolecularGraph:
    return add_explicit_hydrogens(parse_smiles(text))
