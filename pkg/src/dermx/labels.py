"""Canonical HAM10000 diagnosis labels.

The seven classes follow a fixed alphabetical index order (AKIEC=0 ... VASC=6)
used consistently for label vectors, confusion matrices and reports.
"""

from __future__ import annotations

import enum

from .errors import MetadataError


class ClassLabel(enum.IntEnum):
    """Diagnosis class with its canonical integer index."""

    AKIEC = 0
    BCC = 1
    BKL = 2
    DF = 3
    MEL = 4
    NV = 5
    VASC = 6

    @property
    def dx(self) -> str:
        """Lowercase diagnosis code as it appears in the metadata `dx` column."""
        return self.name.lower()

    @classmethod
    def from_dx(cls, dx: str) -> "ClassLabel":
        try:
            return _DX_TO_LABEL[dx.strip().lower()]
        except KeyError:
            raise MetadataError(f"unknown diagnosis code {dx!r}") from None

    @classmethod
    def from_index(cls, index: int) -> "ClassLabel":
        return cls(index)


_DX_TO_LABEL = {label.name.lower(): label for label in ClassLabel}

#: Labels in canonical index order.
CLASS_ORDER: tuple[ClassLabel, ...] = tuple(sorted(ClassLabel, key=int))

#: Class names in canonical index order.
CLASS_NAMES: tuple[str, ...] = tuple(label.name for label in CLASS_ORDER)

NUM_CLASSES = len(ClassLabel)
