"""
Work-unit accounting.

One work unit is one full-dataset gradient evaluation on the finest level. A gradient
call on level l over a batch of n_b samples costs (n_b / p) * scale(l), where scale(l)
is 2^(l-L) for interval doubling and K_l / K_L for node doubling.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict

logger = logging.getLogger(__name__)

LEDGER_SCHEMA = 'mltr.ledger/1'
KINDS = ('gradient', 'function', 'hvp')
DEFAULT_COST_WEIGHTS = {'hvp': 2.0, 'function': 0.0}


class WorkLedger:
    """
    Counters keyed by (epoch, batch id, level, n_b) for gradient, function and Hvp calls.

    Only gradient calls enter W. Function values and Hvps are kept in their own columns
    and weighted by ``cost_weights`` in ``weighted_extras`` for reporting.
    """

    def __init__(self, p, L, level_scale=None, cost_weights=None, refinement_rule='interval_doubling'):
        if p < 1:
            raise ValueError(f"Dataset size must be positive, got {p}")
        if L < 1:
            raise ValueError(f"Finest level must be >= 1, got {L}")
        self.p = int(p)
        self.L = int(L)
        self.refinement_rule = refinement_rule
        self._level_scale = dict(level_scale) if level_scale else {
            level: 2.0 ** (level - self.L) for level in range(1, self.L + 1)
        }
        self.cost_weights = {**DEFAULT_COST_WEIGHTS, **(cost_weights or {})}
        self.counters = {kind: defaultdict(int) for kind in KINDS}
        self.epoch = 0
        self._work = 0.0
        self._extras = {'function': 0.0, 'hvp': 0.0}

    @classmethod
    def for_hierarchy(cls, hierarchy, p, cost_weights=None):
        scale = {spec.level: hierarchy.cost_ratio(spec.level) for spec in hierarchy.levels}
        return cls(p, hierarchy.L, level_scale=scale, cost_weights=cost_weights,
                   refinement_rule=hierarchy.refinement_rule)

    def begin_epoch(self, epoch):
        self.epoch = int(epoch)

    def scale(self, level):
        try:
            return self._level_scale[level]
        except KeyError:
            raise ValueError(f"Level {level} outside 1..{self.L}") from None

    def _unit(self, level, n_b):
        return (n_b / self.p) * self.scale(level)

    def record(self, epoch, batch, level, n_b, calls=1, kind='gradient'):
        """
        Charge ``calls`` evaluations of ``kind`` on ``level`` over a batch of n_b samples.

        Returns the ledger so calls can be chained.
        """
        if kind not in KINDS:
            raise ValueError(f"Unknown evaluation kind '{kind}'")
        if calls < 0:
            raise ValueError(f"Call count must be non-negative, got {calls}")
        if calls == 0:
            return self
        amount = calls * self._unit(level, n_b)
        key = (int(epoch), int(batch), int(level), int(n_b))
        self.counters[kind][key] += int(calls)
        if kind == 'gradient':
            self._work += amount
        else:
            self._extras[kind] += amount
        return self

    def total(self):
        """Accumulated W (gradient calls only)."""
        return self._work

    def recompute(self):
        """W from scratch over the stored counters, in sorted key order."""
        return sum(
            count * self._unit(key[2], key[3])
            for key, count in sorted(self.counters['gradient'].items())
        )

    def calls(self, kind='gradient', level=None, epoch=None):
        return sum(
            count for (e, _, l, _), count in self.counters[kind].items()
            if (level is None or l == level) and (epoch is None or e == epoch)
        )

    def weighted_extras(self):
        """Function values and Hvps in gradient-equivalent units, weighted by ``cost_weights``."""
        return {kind: self.cost_weights[kind] * amount for kind, amount in self._extras.items()}

    def merge(self, other):
        """Ledger aggregating this run and ``other``; both must describe the same hierarchy and dataset size."""
        if (other.p, other.L, other._level_scale) != (self.p, self.L, self._level_scale):
            raise ValueError('Cannot merge ledgers built for different datasets or hierarchies')
        merged = WorkLedger(self.p, self.L, self._level_scale, self.cost_weights, self.refinement_rule)
        for source in (self, other):
            for kind in KINDS:
                for key, count in sorted(source.counters[kind].items()):
                    merged.record(*key, calls=count, kind=kind)
        return merged

    def to_dict(self):
        return {
            'schema': LEDGER_SCHEMA,
            'p': self.p,
            'L': self.L,
            'refinement_rule': self.refinement_rule,
            'level_scale': {str(level): scale for level, scale in sorted(self._level_scale.items())},
            'cost_weights': self.cost_weights,
            'counters': [
                {'kind': kind, 'epoch': e, 'batch': b, 'level': l,
                 'n_b': n_b, 'calls': count}
                for kind in KINDS
                for (e, b, l, n_b), count in sorted(self.counters[kind].items())
            ],
            'totals': {
                'work': self.total(),
                'gradient_calls': self.calls('gradient'),
                'function_calls': self.calls('function'),
                'hvp_calls': self.calls('hvp'),
                **{f"{kind}_work": amount for kind, amount in self.weighted_extras().items()},
            },
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        if data.get('schema') != LEDGER_SCHEMA:
            raise ValueError(f"Unsupported ledger schema '{data.get('schema')}'")
        scale = {int(level): value for level, value in data['level_scale'].items()}
        ledger = cls(data['p'], data['L'], scale, data['cost_weights'], data['refinement_rule'])
        for row in data['counters']:
            ledger.record(row['epoch'], row['batch'], row['level'], row['n_b'], row['calls'], row['kind'])
        return ledger

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return f"WorkLedger(p={self.p}, L={self.L}, W={self._work:.6g})"
