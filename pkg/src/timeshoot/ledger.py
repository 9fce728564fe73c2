"""Evaluation accounting: total work versus critical-path (span) cost.

Counting conventions
--------------------
* ``total_nfe``: every vector-field evaluation, including rejected adaptive
  steps and starting-step probes.
* ``span_nfe``: evaluations on the sequential critical path.  A batch of
  concurrent integrations contributes the *maximum* of its elements to the
  span and the *sum* to the total.
* ``total_jvp`` / ``total_jmp``: Jacobian-vector and Jacobian-matrix products
  (transposed products are counted in the jvp bucket).

Batch workers accumulate into private ledgers which are merged exactly once,
so no locking is needed.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class NfeLedger:
    total_nfe: int = 0
    span_nfe: int = 0
    total_jvp: int = 0
    total_jmp: int = 0

    def tick(self, nfe: int = 0, jvp: int = 0, jmp: int = 0) -> None:
        """Record sequential work: everything lands on the span."""
        self.total_nfe += nfe
        self.span_nfe += nfe
        self.total_jvp += jvp
        self.total_jmp += jmp

    def absorb_parallel(self, parts: list["NfeLedger"]) -> None:
        """Merge ledgers of concurrently executable work items.

        Totals add up; the span grows by the largest element only.
        """
        if not parts:
            return
        self.total_nfe += sum(p.total_nfe for p in parts)
        self.span_nfe += max(p.span_nfe for p in parts)
        self.total_jvp += sum(p.total_jvp for p in parts)
        self.total_jmp += sum(p.total_jmp for p in parts)

    def absorb_serial(self, part: "NfeLedger") -> None:
        self.total_nfe += part.total_nfe
        self.span_nfe += part.span_nfe
        self.total_jvp += part.total_jvp
        self.total_jmp += part.total_jmp

    def copy(self) -> "NfeLedger":
        return NfeLedger(self.total_nfe, self.span_nfe, self.total_jvp, self.total_jmp)

    def delta_since(self, other: "NfeLedger") -> "NfeLedger":
        return NfeLedger(
            self.total_nfe - other.total_nfe,
            self.span_nfe - other.span_nfe,
            self.total_jvp - other.total_jvp,
            self.total_jmp - other.total_jmp,
        )
