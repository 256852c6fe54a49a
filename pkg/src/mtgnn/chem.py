"""SMILES parsing into undirected molecular graphs.

Supported subset: organic-subset atoms (aliphatic and aromatic), bracket atoms
(isotope and chirality are read and dropped), branches, ring closures
(digits and ``%nn``), bond symbols ``- = # : / \\`` and ``.`` separators.
Aromaticity is taken from lowercase notation; nothing is kekulized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

SINGLE, DOUBLE, TRIPLE, AROMATIC = "single", "double", "triple", "aromatic"
BOND_VALUE = {SINGLE: 1.0, DOUBLE: 2.0, TRIPLE: 3.0, AROMATIC: 1.5}
_BOND_SYMBOLS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC, "/": SINGLE, "\\": SINGLE}

ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
# allowed valences, smallest first
DEFAULT_VALENCE = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}

ELEMENTS = frozenset("""
H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn
Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce
Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn
Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr
""".split())
# lowercase forms legal inside brackets
_BRACKET_AROMATIC = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S",
                     "se": "Se", "as": "As", "te": "Te"}


class SmilesSyntaxError(ValueError):
    """Malformed SMILES (brackets, branches, ring closures, unknown element)."""

    def __init__(self, message: str, smiles: str = "", position: int | None = None):
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where} in {smiles!r}" if smiles else message)
        self.smiles = smiles
        self.position = position


class ValenceError(ValueError):
    """Explicit bonds exceed the allowed valence of an atom."""


@dataclass
class Atom:
    element: str
    formal_charge: int = 0
    explicit_h: int | None = None
    aromatic: bool = False
    ring_member: bool = False
    degree: int = 0
    implicit_h: int = 0
    bracket: bool = False

    @property
    def total_h(self) -> int:
        return (self.explicit_h or 0) + self.implicit_h


@dataclass
class Bond:
    begin: int
    end: int
    order: str = SINGLE

    @property
    def endpoints(self) -> frozenset[int]:
        return frozenset((self.begin, self.end))


@dataclass
class MolGraph:
    atoms: list[Atom]
    bonds: list[Bond]
    source_smiles: str = ""
    _adjacency: list[list[tuple[int, int]]] | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def heavy_atom_count(self) -> int:
        return sum(a.element != "H" for a in self.atoms)

    def neighbors(self, i: int) -> list[tuple[int, int]]:
        """(neighbor index, bond index) pairs of atom ``i``."""
        if self._adjacency is None:
            adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
            for k, b in enumerate(self.bonds):
                adj[b.begin].append((b.end, k))
                adj[b.end].append((b.begin, k))
            self._adjacency = adj
        return self._adjacency[i]

    def bond_order_sum(self, i: int) -> float:
        return sum(BOND_VALUE[self.bonds[k].order] for _, k in self.neighbors(i))


# ---------------------------------------------------------------------------
# tokenizer / parser


def _parse_bracket(s: str, pos: int) -> tuple[Atom, int]:
    """Parse ``[...]`` starting at ``s[pos] == '['``; returns atom and next position."""
    end = s.find("]", pos)
    if end < 0:
        raise SmilesSyntaxError("unclosed bracket atom", s, pos)
    body = s[pos + 1:end]
    i = 0
    while i < len(body) and body[i].isdigit():  # isotope, ignored
        i += 1
    if i >= len(body):
        raise SmilesSyntaxError("bracket atom without element", s, pos)
    aromatic = False
    element = None
    two = body[i:i + 2]
    if two in _BRACKET_AROMATIC:
        element, aromatic = _BRACKET_AROMATIC[two], True
        i += 2
    elif len(two) == 2 and two[0].isupper() and two in ELEMENTS:
        element = two
        i += 2
    elif body[i] in _BRACKET_AROMATIC:
        element, aromatic = _BRACKET_AROMATIC[body[i]], True
        i += 1
    elif body[i] in ELEMENTS:
        element = body[i]
        i += 1
    else:
        raise SmilesSyntaxError(f"unknown element in [{body}]", s, pos)
    # chirality, ignored
    while i < len(body) and body[i] == "@":
        i += 1
    if body[i:i + 2] in ("TH", "AL", "SP", "TB", "OH"):
        i += 2
        while i < len(body) and body[i].isdigit():
            i += 1
    hcount = 0
    if i < len(body) and body[i] == "H":
        i += 1
        digits = ""
        while i < len(body) and body[i].isdigit():
            digits += body[i]
            i += 1
        hcount = int(digits) if digits else 1
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        ch = body[i]
        i += 1
        digits = ""
        while i < len(body) and body[i].isdigit():
            digits += body[i]
            i += 1
        if digits:
            charge = sign * int(digits)
        else:
            count = 1
            while i < len(body) and body[i] == ch:
                count += 1
                i += 1
            charge = sign * count
    if i < len(body) and body[i] == ":":  # atom class, ignored
        i += 1
        while i < len(body) and body[i].isdigit():
            i += 1
    if i != len(body):
        raise SmilesSyntaxError(f"unexpected {body[i:]!r} in bracket atom [{body}]", s, pos)
    atom = Atom(element=element, formal_charge=charge, explicit_h=hcount,
                aromatic=aromatic, bracket=True)
    return atom, end + 1


def _read_raw(s: str) -> tuple[list[Atom], list[Bond]]:
    atoms: list[Atom] = []
    bonds: list[Bond] = []
    implied: set[int] = set()  # bonds whose order was implied between two aromatic atoms
    seen_pairs: set[frozenset[int]] = set()
    branch_stack: list[int] = []
    rings: dict[int, tuple[int, str | None, int]] = {}
    prev: int | None = None
    pending: str | None = None
    pending_pos = 0
    i = 0

    def connect(a: int, b: int, order: str | None, where: int) -> None:
        if a == b:
            raise SmilesSyntaxError("atom bonded to itself", s, where)
        pair = frozenset((a, b))
        if pair in seen_pairs:
            raise SmilesSyntaxError("duplicate bond between the same atoms", s, where)
        seen_pairs.add(pair)
        if order is None:
            if atoms[a].aromatic and atoms[b].aromatic:
                order = AROMATIC
                implied.add(len(bonds))
            else:
                order = SINGLE
        bonds.append(Bond(a, b, order))

    while i < len(s):
        c = s[i]
        if c == "[":
            atom, j = _parse_bracket(s, i)
        elif s[i:i + 2] in ("Cl", "Br"):
            atom, j = Atom(element=s[i:i + 2]), i + 2
        elif c in "BCNOPSFI":
            atom, j = Atom(element=c), i + 1
        elif c in AROMATIC_ORGANIC:
            atom, j = Atom(element=c.upper(), aromatic=True), i + 1
        elif c == "(":
            if prev is None:
                raise SmilesSyntaxError("branch opened before any atom", s, i)
            branch_stack.append(prev)
            i += 1
            continue
        elif c == ")":
            if not branch_stack:
                raise SmilesSyntaxError("unbalanced ')'", s, i)
            if pending is not None:
                raise SmilesSyntaxError("bond symbol before ')'", s, i)
            prev = branch_stack.pop()
            i += 1
            continue
        elif c in _BOND_SYMBOLS:
            if pending is not None:
                raise SmilesSyntaxError("two consecutive bond symbols", s, i)
            pending, pending_pos = _BOND_SYMBOLS[c], i
            i += 1
            continue
        elif c == ".":
            if pending is not None:
                raise SmilesSyntaxError("bond symbol before '.'", s, i)
            prev = None
            i += 1
            continue
        elif c.isdigit() or c == "%":
            if prev is None:
                raise SmilesSyntaxError("ring closure before any atom", s, i)
            if c == "%":
                digits = s[i + 1:i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesSyntaxError("'%' must be followed by two digits", s, i)
                label, j = int(digits), i + 3
            else:
                label, j = int(c), i + 1
            if label in rings:
                other, order, where = rings.pop(label)
                if order is not None and pending is not None and order != pending:
                    raise SmilesSyntaxError(f"conflicting bond orders on ring closure {label}", s, i)
                connect(other, prev, pending or order, i)
            else:
                rings[label] = (prev, pending, i)
            pending = None
            i = j
            continue
        else:
            raise SmilesSyntaxError(f"unexpected character {c!r}", s, i)
        atoms.append(atom)
        idx = len(atoms) - 1
        if prev is not None:
            connect(prev, idx, pending, i)
        elif pending is not None:
            raise SmilesSyntaxError("bond symbol without a preceding atom", s, pending_pos)
        pending = None
        prev = idx
        i = j

    if branch_stack:
        raise SmilesSyntaxError("unbalanced '('", s)
    if rings:
        label = next(iter(rings))
        raise SmilesSyntaxError(f"unclosed ring bond {label}", s, rings[label][2])
    if pending is not None:
        raise SmilesSyntaxError("dangling bond symbol", s, pending_pos)
    if not atoms:
        raise SmilesSyntaxError("no atoms", s)

    g = MolGraph(atoms, bonds, s)
    ring_bonds = _ring_bonds(g)
    for k in implied:
        # an implied aromatic bond outside any ring (biphenyl-type link) is single
        if k not in ring_bonds:
            bonds[k].order = SINGLE
    for a, b in ((bd.begin, bd.end) for k, bd in enumerate(bonds) if k in ring_bonds):
        atoms[a].ring_member = atoms[b].ring_member = True
    return atoms, bonds


def _ring_bonds(g: MolGraph) -> set[int]:
    """Indices of bonds lying on a cycle (i.e. every bond that is not a bridge)."""
    n = len(g.atoms)
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    t = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = t
        t += 1
        stack = [(root, -1, iter(g.neighbors(root)))]
        while stack:
            v, via, it = stack[-1]
            advanced = False
            for u, k in it:
                if k == via:
                    continue
                if disc[u] < 0:
                    disc[u] = low[u] = t
                    t += 1
                    stack.append((u, k, iter(g.neighbors(u))))
                    advanced = True
                    break
                low[v] = min(low[v], disc[u])
            if not advanced:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[v])
                    if low[v] > disc[parent]:
                        bridges.add(via)
    return set(range(len(g.bonds))) - bridges


def _assign_hydrogens(g: MolGraph) -> None:
    for i, atom in enumerate(g.atoms):
        atom.degree = len(g.neighbors(i))
        if atom.bracket:
            atom.implicit_h = 0
            continue
        total = int(g.bond_order_sum(i))  # floor after summing
        allowed = DEFAULT_VALENCE[atom.element]
        if atom.aromatic:
            # lowercase atoms use their lowest valence and never raise
            atom.implicit_h = max(0, allowed[0] - total)
            continue
        for v in allowed:
            if v >= total:
                atom.implicit_h = v - total
                break
        else:
            raise ValenceError(
                f"atom {i} ({atom.element}) has bond order sum {total} > max valence "
                f"{allowed[-1]} in {g.source_smiles!r}")


def _subgraph(g: MolGraph, keep: list[int]) -> MolGraph:
    remap = {old: new for new, old in enumerate(keep)}
    atoms = [Atom(**vars(g.atoms[i])) for i in keep]
    bonds = [Bond(remap[b.begin], remap[b.end], b.order) for b in g.bonds
             if b.begin in remap and b.end in remap]
    return MolGraph(atoms, bonds, g.source_smiles)


def connected_components(g: MolGraph) -> list[MolGraph]:
    """Split ``g`` into components, largest heavy-atom count first.

    Ties keep the order of each component's first atom.
    """
    n = len(g.atoms)
    label = [-1] * n
    groups: list[list[int]] = []
    for start in range(n):
        if label[start] >= 0:
            continue
        label[start] = len(groups)
        members, frontier = [start], [start]
        while frontier:
            v = frontier.pop()
            for u, _ in g.neighbors(v):
                if label[u] < 0:
                    label[u] = label[start]
                    members.append(u)
                    frontier.append(u)
        groups.append(sorted(members))
    heavy = [sum(g.atoms[i].element != "H" for i in grp) for grp in groups]
    order = sorted(range(len(groups)), key=lambda k: (-heavy[k], groups[k][0]))
    return [_subgraph(g, groups[k]) for k in order]


def parse_raw(smiles: str) -> MolGraph:
    """Parse without salt stripping; may return a disconnected graph."""
    if not smiles or not smiles.isascii():
        raise SmilesSyntaxError("SMILES must be a non-empty ASCII string", smiles)
    atoms, bonds = _read_raw(smiles.strip())
    g = MolGraph(atoms, bonds, smiles)
    _assign_hydrogens(g)
    return g


def parse_smiles(smiles: str) -> MolGraph:
    """Parse ``smiles`` and keep only the largest connected component."""
    g = parse_raw(smiles)
    parts = connected_components(g)
    if len(parts) > 1:
        log.warning("kept largest of %d components in %r", len(parts), smiles)
    return parts[0]


def permute_atoms(g: MolGraph, perm) -> MolGraph:
    """Relabel atoms so that new atom ``i`` is old atom ``perm[i]``."""
    perm = list(perm)
    if sorted(perm) != list(range(len(g.atoms))):
        raise ValueError("perm must be a permutation of atom indices")
    inverse = {old: new for new, old in enumerate(perm)}
    atoms = [Atom(**vars(g.atoms[old])) for old in perm]
    bonds = [Bond(inverse[b.begin], inverse[b.end], b.order) for b in g.bonds]
    return MolGraph(atoms, bonds, g.source_smiles)
