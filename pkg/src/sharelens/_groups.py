"""Grouped reductions over flat observation arrays."""

import numpy as np
import pandas as pd


class Groups:
    """Index of observations by an integer or hashable group label.

    Reductions run on the observations sorted by group so ``reduceat`` can be
    used; results are always returned in the caller's original row order.
    """

    def __init__(self, labels):
        labels = np.asarray(labels)
        self.codes, self.levels = _factorize(labels)
        self.n = self.codes.shape[0]
        self.count = len(self.levels)
        self.order = np.argsort(self.codes, kind="stable")
        sorted_codes = self.codes[self.order]
        self.starts = np.flatnonzero(np.r_[True, sorted_codes[1:] != sorted_codes[:-1]]) if self.n else np.array([], int)
        self.sizes = np.bincount(self.codes, minlength=self.count)

    def sum(self, values):
        values = np.asarray(values)
        return np.add.reduceat(values[self.order], self.starts, axis=0)

    def max(self, values):
        values = np.asarray(values)
        return np.maximum.reduceat(values[self.order], self.starts, axis=0)

    def mean(self, values):
        total = self.sum(values)
        sizes = self.sizes.reshape((-1,) + (1,) * (total.ndim - 1))
        return total / sizes

    def expand(self, group_values):
        """Broadcast one value per group back to observations."""
        return np.asarray(group_values)[self.codes]


def _factorize(labels):
    if labels.ndim > 1:
        # rows of a 2-D label array form a composite key
        codes = pd.MultiIndex.from_arrays(list(labels.T)).factorize(sort=True)[0]
        return codes.astype(np.intp), np.arange(codes.max() + 1 if codes.size else 0)
    codes, levels = pd.factorize(labels, sort=True)
    return codes.astype(np.intp), np.asarray(levels)
