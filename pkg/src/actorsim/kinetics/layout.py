"""State layout, reaction list and stoichiometry of the iPSC network.

The state is ``(X, u)`` where ``X`` is cell density and ``u`` holds 33
metabolite concentrations (mM).  Reversible reaction pairs enter the
stoichiometry once, as a net (forward minus reverse) flux.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from ..exceptions import InvalidArgumentError

METABOLITES = (
    "GLC", "G6P", "F6P", "GAP", "PEP", "PYR", "LAC", "ELAC", "EPYR", "Ru5P",
    "AcCoA", "CIT", "AKG", "SUC", "FUM", "MAL", "OAA", "GLN", "EGLN", "GLU",
    "EGLU", "ALA", "EALA", "ASP", "EASP", "SER", "ESER", "GLY", "EGLY", "NH4",
    "CO2", "LIPID", "BIOM",
)
SPECIES = ("X",) + METABOLITES
STATE_DIM = len(SPECIES)
INDEX = {name: i for i, name in enumerate(SPECIES)}
METABOLITE_INDEX = {name: i for i, name in enumerate(METABOLITES)}

# (name, {metabolite: coefficient}); substrates negative, products positive.
# Reversible pairs are written in the forward direction.
REACTIONS = (
    ("HK", {"GLC": -1, "G6P": 1}),
    ("PGI", {"G6P": -1, "F6P": 1}),
    ("PFK/ALD", {"F6P": -1, "GAP": 2}),
    ("PGK", {"GAP": -1, "PEP": 1}),
    ("PK", {"PEP": -1, "PYR": 1}),
    ("LDH", {"PYR": -1, "LAC": 1}),
    ("PyrT", {"EPYR": -1, "PYR": 1}),
    ("LacT", {"LAC": -1, "ELAC": 1}),
    ("OP", {"G6P": -1, "Ru5P": 1, "CO2": 1}),
    ("NOP", {"Ru5P": -3, "F6P": 2, "GAP": 1}),
    ("PDH", {"PYR": -1, "AcCoA": 1, "CO2": 1}),
    ("CS", {"AcCoA": -1, "OAA": -1, "CIT": 1}),
    ("CITS/ISOD", {"CIT": -1, "AKG": 1, "CO2": 1}),
    ("AKGDH", {"AKG": -1, "SUC": 1, "CO2": 1}),
    ("SDH", {"SUC": -1, "FUM": 1}),
    ("FUM", {"FUM": -1, "MAL": 1}),
    ("MDH", {"MAL": -1, "OAA": 1}),
    ("ME", {"MAL": -1, "PYR": 1, "CO2": 1}),
    ("PC", {"PYR": -1, "CO2": -1, "OAA": 1}),
    ("GLNS", {"GLN": -1, "GLU": 1, "NH4": 1}),
    ("GLDH", {"GLU": -1, "AKG": 1, "NH4": 1}),
    ("AlaTA", {"GLU": -1, "PYR": -1, "ALA": 1, "AKG": 1}),
    ("AlaT", {"ALA": -1, "EALA": 1}),
    ("GluT", {"GLU": -1, "EGLU": 1}),
    ("GlnT", {"EGLN": -1, "GLN": 1}),
    ("SAL", {"SER": -1, "PYR": 1, "NH4": 1}),
    ("ASTA", {"ASP": -1, "AKG": -1, "GLU": 1, "OAA": 1}),
    ("AspT", {"EASP": -1, "ASP": 1}),
    ("ACL", {"CIT": -1, "OAA": 1, "LIPID": 1}),
    # provisional biomass column; the source only gives the rate law
    ("growth", {"GLC": -1, "GLN": -1, "GLU": -1, "ALA": -1, "ASP": -1, "SER": -1, "GLY": -1, "BIOM": 1}),
)
REACTION_NAMES = tuple(name for name, _ in REACTIONS)
N_REACTIONS = len(REACTIONS)
REVERSIBLE = ("LDH", "LacT", "CITS/ISOD", "FUM", "MDH", "GLNS", "GLDH", "AlaTA", "ASTA")


def default_stoichiometry() -> np.ndarray:
    """33 x 30 integer matrix built from :data:`REACTIONS`."""
    n = np.zeros((len(METABOLITES), N_REACTIONS))
    for r, (_, coeffs) in enumerate(REACTIONS):
        for met, c in coeffs.items():
            n[METABOLITE_INDEX[met], r] = c
    return n


def write_stoichiometry(path, matrix=None):
    """Matrix-market style coordinate file: ``reaction metabolite coefficient``."""
    matrix = default_stoichiometry() if matrix is None else np.asarray(matrix)
    rows = [(r, m, matrix[m, r]) for r in range(matrix.shape[1]) for m in range(matrix.shape[0]) if matrix[m, r]]
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write("% rows: reactions (1-based, order of REACTION_NAMES); cols: metabolites (1-based)\n")
        for r, name in enumerate(REACTION_NAMES):
            fh.write(f"% reaction {r + 1} {name}\n")
        fh.write(f"{matrix.shape[1]} {matrix.shape[0]} {len(rows)}\n")
        for r, m, c in rows:
            fh.write(f"{r + 1} {m + 1} {c:g}\n")


def read_stoichiometry(path=None) -> np.ndarray:
    """Load a coordinate file written by :func:`write_stoichiometry`.

    With no path, the copy shipped with the package is read.
    """
    if path is None:
        text = resources.files("actorsim.kinetics.data").joinpath("stoichiometry.mtx").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("%")]
    n_r, n_m, nnz = (int(x) for x in lines[0].split())
    if len(lines) - 1 != nnz:
        raise InvalidArgumentError(f"stoichiometry file declares {nnz} entries, found {len(lines) - 1}")
    matrix = np.zeros((n_m, n_r))
    for ln in lines[1:]:
        r, m, c = ln.split()
        matrix[int(m) - 1, int(r) - 1] = float(c)
    return matrix
