"""Nucleotide alignment parsing, validation, one-hot encoding, FASTA output.

The alphabet order (A, G, C, T) is a hard contract shared with the rate
matrix layout; every module indexes nucleotides through ALPHABET.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALPHABET = "AGCT"
_CHAR_INDEX = {c: i for i, c in enumerate(ALPHABET)}

FASTA_LINE_WIDTH = 60


class AlignmentError(ValueError):
    """Malformed alignment text or an invariant violation."""


@dataclass(frozen=True)
class Alignment:
    """Equal-length nucleotide sequences over {A,G,C,T}; no gaps, no
    ambiguity codes. Single-row alignments are representable (FASTA i/o,
    per-sequence likelihoods); estimation entry points require >= 2 rows.
    """

    names: list[str]
    rows: list[str]

    def __post_init__(self):
        if len(self.names) != len(self.rows):
            raise AlignmentError("names and rows differ in count")
        if not self.rows:
            raise AlignmentError("alignment has no sequences")
        if len(set(self.names)) != len(self.names):
            raise AlignmentError("duplicate sequence identifiers")
        for name in self.names:
            if not name:
                raise AlignmentError("empty sequence identifier")
        n = len(self.rows[0])
        if n < 1:
            raise AlignmentError("sequences must have length >= 1")
        for name, row in zip(self.names, self.rows):
            if len(row) != n:
                raise AlignmentError(
                    f"unequal sequence lengths: '{name}' has {len(row)}, expected {n}"
                )
            bad = set(row) - set(ALPHABET)
            if bad:
                raise AlignmentError(
                    f"invalid character(s) {sorted(bad)} in sequence '{name}'"
                )

    @property
    def n_sequences(self) -> int:
        return len(self.rows)

    @property
    def n_sites(self) -> int:
        return len(self.rows[0])


@dataclass(frozen=True)
class EncodedAlignment:
    """Per-site one-hot view of an alignment: sites[n] is M x 4 with column
    order (A, G, C, T)."""

    sites: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        sites = np.asarray(self.sites, dtype=np.float64)
        if sites.ndim != 3 or sites.shape[2] != 4:
            raise AlignmentError("sites must have shape (N, M, 4)")
        if sites.shape[0] < 1 or sites.shape[1] < 1:
            raise AlignmentError("encoded alignment must be non-empty")
        if not np.array_equal(sites, sites.astype(bool).astype(np.float64)):
            raise AlignmentError("one-hot entries must be 0 or 1")
        if not np.all(sites.sum(axis=2) == 1.0):
            raise AlignmentError("each one-hot row must sum to exactly 1")
        object.__setattr__(self, "sites", sites)

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]

    @property
    def n_sequences(self) -> int:
        return self.sites.shape[1]


def parse_fasta(text: str) -> Alignment:
    """Parse FASTA text into a validated alignment.

    Sequence lines are concatenated and upper-cased; ';' comment lines are
    skipped. Raises AlignmentError on empty input, duplicate identifiers,
    unequal lengths, or characters outside {A,G,C,T}.
    """
    names: list[str] = []
    chunks: list[list[str]] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            name = line[1:].strip()
            if not name:
                raise AlignmentError("FASTA header with empty identifier")
            names.append(name)
            chunks.append([])
        else:
            if not names:
                raise AlignmentError("sequence data before any FASTA header")
            chunks[-1].append(line.upper())
    if not names:
        raise AlignmentError("empty FASTA input")
    return Alignment(names=names, rows=["".join(c) for c in chunks])


def write_fasta(a: Alignment, width: int = FASTA_LINE_WIDTH) -> str:
    """Render an alignment as FASTA, wrapping sequences at ``width``."""
    out = []
    for name, row in zip(a.names, a.rows):
        out.append(f">{name}\n")
        for start in range(0, len(row), width):
            out.append(row[start : start + width] + "\n")
    return "".join(out)


def encode(a: Alignment) -> EncodedAlignment:
    """One-hot encode per site: sites[n][m] is the indicator of x_n^m in
    (A, G, C, T) order."""
    n, m = a.n_sites, a.n_sequences
    sites = np.zeros((n, m, 4), dtype=np.float64)
    for j, row in enumerate(a.rows):
        idx = np.fromiter((_CHAR_INDEX[c] for c in row), dtype=np.intp, count=n)
        sites[np.arange(n), j, idx] = 1.0
    return EncodedAlignment(sites=sites, names=list(a.names))


def decode(e: EncodedAlignment) -> Alignment:
    """Inverse of :func:`encode` for valid one-hot input."""
    idx = e.sites.argmax(axis=2)
    rows = ["".join(ALPHABET[i] for i in idx[:, j]) for j in range(e.n_sequences)]
    names = list(e.names) if e.names else [f"seq{j + 1}" for j in range(e.n_sequences)]
    return Alignment(names=names, rows=rows)
