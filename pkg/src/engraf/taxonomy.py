"""Fine-to-coarse label taxonomies.

A taxonomy maps each fine class id to exactly one coarse superclass id and
is the supervised signal behind the coarse heads. Ids are dense in
``[0, num_fine)`` / ``[0, num_coarse)`` so label values double as head
column indices.

File format: UTF-8 TSV, one row per fine class::

    fine_id<TAB>fine_name<TAB>coarse_id<TAB>coarse_name

Lines starting with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import (
    DuplicateFineError,
    InvalidShapeError,
    NonSurjectiveError,
    ParseError,
    SparseIdsError,
    UnknownLabelError,
)

__all__ = [
    "Taxonomy",
    "LabelPair",
    "Violation",
    "load_taxonomy",
    "save_taxonomy",
    "validate_taxonomy",
    "derive_coarse",
    "generate_synthetic_taxonomy",
]


@dataclass(frozen=True)
class Taxonomy:
    """Immutable fine-to-coarse mapping with class names.

    Construction does not enforce invariants; run :func:`validate_taxonomy`
    to get a report, or rely on :func:`load_taxonomy` which rejects invalid
    files outright.
    """

    num_fine: int
    num_coarse: int
    parent: tuple[int, ...]
    fine_names: tuple[str, ...] = field(default=())
    coarse_names: tuple[str, ...] = field(default=())

    def children(self, coarse: int) -> list[int]:
        return [f for f, c in enumerate(self.parent) if c == coarse]


@dataclass(frozen=True)
class LabelPair:
    """A (fine, coarse) label annotation; coarse must equal parent[fine]."""

    fine: int
    coarse: int


@dataclass(frozen=True)
class Violation:
    """One broken taxonomy invariant: the rule name and the offending id."""

    rule: str
    offending_id: int | None
    message: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.message}"


def derive_coarse(tax: Taxonomy, fine: int) -> int:
    """Return the coarse parent of a fine label id."""
    if not 0 <= fine < tax.num_fine:
        raise UnknownLabelError(
            f"fine id {fine} out of range [0, {tax.num_fine})"
        )
    return tax.parent[fine]


def validate_taxonomy(tax: Taxonomy) -> list[Violation]:
    """Check every taxonomy invariant; an empty list means all hold."""
    out: list[Violation] = []
    if tax.num_fine <= 0 or tax.num_coarse <= 0:
        out.append(Violation("NonPositiveCount", None,
                             f"num_fine={tax.num_fine} num_coarse={tax.num_coarse}"))
        return out
    if tax.num_coarse >= tax.num_fine:
        out.append(Violation("CoarseNotSmaller", None,
                             f"num_coarse={tax.num_coarse} must be < num_fine={tax.num_fine}"))
    if len(tax.parent) != tax.num_fine:
        out.append(Violation("ParentCountMismatch", None,
                             f"parent has {len(tax.parent)} entries, expected {tax.num_fine}"))
    seen = set()
    for f, c in enumerate(tax.parent):
        if not 0 <= c < tax.num_coarse:
            out.append(Violation("ParentOutOfRange", f,
                                 f"fine {f} maps to coarse {c}, outside [0, {tax.num_coarse})"))
        else:
            seen.add(c)
    for c in range(tax.num_coarse):
        if c not in seen:
            out.append(Violation("NonSurjective", c, f"coarse id {c} has no fine children"))
    if tax.fine_names and len(tax.fine_names) != tax.num_fine:
        out.append(Violation("FineNameCountMismatch", None,
                             f"{len(tax.fine_names)} fine names for {tax.num_fine} classes"))
    if tax.coarse_names and len(tax.coarse_names) != tax.num_coarse:
        out.append(Violation("CoarseNameCountMismatch", None,
                             f"{len(tax.coarse_names)} coarse names for {tax.num_coarse} classes"))
    return out


def load_taxonomy(path) -> Taxonomy:
    """Parse a 4-column TSV taxonomy file and reject invalid mappings.

    Raises ParseError, DuplicateFineError, SparseIdsError,
    NonSurjectiveError, or InvalidShapeError (coarse count not smaller
    than fine count).
    """
    fine_to_coarse: dict[int, int] = {}
    fine_name: dict[int, str] = {}
    coarse_name: dict[int, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                fid = int(parts[0])
                cid = int(parts[2])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer id: {exc}") from exc
            if fid < 0 or cid < 0:
                raise ParseError(f"{path}:{lineno}: negative id")
            if fid in fine_to_coarse:
                prev = fine_to_coarse[fid]
                raise DuplicateFineError(
                    f"{path}:{lineno}: fine id {fid} already mapped to coarse {prev}, "
                    f"now also to {cid}"
                )
            if cid in coarse_name and coarse_name[cid] != parts[3]:
                raise ParseError(
                    f"{path}:{lineno}: coarse id {cid} named both "
                    f"{coarse_name[cid]!r} and {parts[3]!r}"
                )
            fine_to_coarse[fid] = cid
            fine_name[fid] = parts[1]
            coarse_name.setdefault(cid, parts[3])
    if not fine_to_coarse:
        raise ParseError(f"{path}: no taxonomy rows")

    num_fine = max(fine_to_coarse) + 1
    if len(fine_to_coarse) != num_fine:
        missing = sorted(set(range(num_fine)) - set(fine_to_coarse))
        raise SparseIdsError(f"{path}: fine ids not dense, missing {missing[:8]}")
    num_coarse = max(coarse_name) + 1
    if len(coarse_name) != num_coarse:
        missing = sorted(set(range(num_coarse)) - set(coarse_name))
        raise NonSurjectiveError(f"{path}: coarse ids {missing[:8]} have no children")
    if num_coarse >= num_fine:
        raise InvalidShapeError(
            f"{path}: coarse count {num_coarse} must be smaller than fine count {num_fine}"
        )
    return Taxonomy(
        num_fine=num_fine,
        num_coarse=num_coarse,
        parent=tuple(fine_to_coarse[f] for f in range(num_fine)),
        fine_names=tuple(fine_name[f] for f in range(num_fine)),
        coarse_names=tuple(coarse_name[c] for c in range(num_coarse)),
    )


def save_taxonomy(tax: Taxonomy, path) -> None:
    """Write the TSV form; load_taxonomy(save_taxonomy(t)) round-trips."""
    fine_names = tax.fine_names or tuple(f"fine_{i}" for i in range(tax.num_fine))
    coarse_names = tax.coarse_names or tuple(f"coarse_{i}" for i in range(tax.num_coarse))
    with open(path, "w", encoding="utf-8") as fh:
        for f in range(tax.num_fine):
            c = tax.parent[f]
            fh.write(f"{f}\t{fine_names[f]}\t{c}\t{coarse_names[c]}\n")


def generate_synthetic_taxonomy(c_fine: int, c_coarse: int) -> Taxonomy:
    """Deterministic fixture taxonomy: contiguous blocks of fine ids.

    parent(i) = i // ceil(c_fine / c_coarse), clamped to the coarse range.
    Shapes whose ceil-blocking would leave a coarse id childless are
    rejected rather than silently rebalanced.
    """
    if c_coarse < 1 or c_fine < 1 or c_coarse >= c_fine:
        raise InvalidShapeError(f"need 1 <= c_coarse < c_fine, got ({c_fine}, {c_coarse})")
    block = math.ceil(c_fine / c_coarse)
    parent = tuple(min(i // block, c_coarse - 1) for i in range(c_fine))
    if len(set(parent)) != c_coarse:
        raise InvalidShapeError(
            f"({c_fine}, {c_coarse}): block size {block} leaves some coarse ids empty"
        )
    return Taxonomy(
        num_fine=c_fine,
        num_coarse=c_coarse,
        parent=parent,
        fine_names=tuple(f"fine_{i:03d}" for i in range(c_fine)),
        coarse_names=tuple(f"coarse_{i:02d}" for i in range(c_coarse)),
    )
