"""Names for the places inside a conformer block where an adapter can attach."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class Site(str, Enum):
    AFTER_BLOCK = "after_block"
    FFN1 = "ffn1"
    FFN2 = "ffn2"
    CONV = "conv"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, order=True)
class InsertionSite:
    block_index: int
    site: Site

    def __str__(self) -> str:
        return f"{self.block_index}.{self.site.value}"
