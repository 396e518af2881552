"""Minimal reverse-mode differentiation over recorded primitive calls.

The forward code stays in charge: it calls the pure ops and, when a tape is
active, records (output, inputs, backward) triples. gradients() then walks
the records in reverse, seeding the requested roots with 1 and accumulating
into a dict keyed by object identity. The tape keeps strong references to
every recorded array, which is what makes id() a stable key.

A tape is single-owner: record into it from one forward pass, differentiate
once, throw it away.
"""

import numpy as np

from .errors import UsageError


class Grads:
    """Read-only view of accumulated gradients, addressed by array object."""

    def __init__(self, table, keepalive=()):
        self._table = table
        # id() keys are only unique while the recorded arrays are alive
        self._keepalive = keepalive

    def of(self, arr):
        """Gradient for this exact array object, or None if it got none."""
        return self._table.get(id(arr))

    def __contains__(self, arr):
        return id(arr) in self._table


class GradientTape:
    def __init__(self):
        self._records = []
        self._used = False

    def __len__(self):
        return len(self._records)

    def record(self, output, inputs, backward):
        """Register one executed op.

        backward(grad_out) must return a tuple of gradients aligned with
        ``inputs``; entries may be None for non-differentiable inputs.
        """
        self._records.append((output, tuple(inputs), backward))

    def gradients(self, roots):
        """Accumulated gradients of the sum of ``roots`` w.r.t. everything.

        Each root is seeded with a gradient of one. Accumulation order is
        the fixed reverse record order, so results are deterministic.
        """
        if self._used:
            raise UsageError("a GradientTape can only be differentiated once")
        self._used = True
        if not isinstance(roots, (list, tuple)):
            roots = [roots]
        table = {}
        for r in roots:
            seed = np.ones_like(r)
            key = id(r)
            table[key] = table[key] + seed if key in table else seed
        for output, inputs, backward in reversed(self._records):
            g = table.get(id(output))
            if g is None:
                continue
            gins = backward(g)
            if not isinstance(gins, tuple):
                gins = (gins,)
            for inp, gi in zip(inputs, gins):
                if gi is None:
                    continue
                key = id(inp)
                if key in table:
                    table[key] = table[key] + gi
                else:
                    table[key] = gi
        return Grads(table, keepalive=self._records)
