"""Pruning-based trojan detection for small CNN models.

The toolkit forges labeled corpora of clean and poisoned toy CNNs, gates
incoming models against file-size and graph-fingerprint references,
measures accuracy vectors of systematically pruned variants, and fits a
linear mapping from those vectors to a poisoning probability, searching
the pruning-configuration space in two stages under a time budget.
"""

from . import detector, forge, nn, probe, pruning, qa, store, synth, zoo  # noqa: F401
from .nn import Model, accuracy, backward, forward  # noqa: F401
from .pruning import PruningConfig  # noqa: F401

__version__ = "0.1.0"
