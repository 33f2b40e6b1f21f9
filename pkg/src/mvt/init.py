"""Parameter creation with hierarchical names and a single seeded stream.

All parameters of a model are registered here in construction order, which
makes builds bitwise-reproducible for a fixed seed and gives checkpoints a
stable name -> payload mapping.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Parameter


class Init:
    """Seeded factory and registry for model parameters."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng([int(seed)])
        self.params: dict[str, Parameter] = {}

    def _register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(np.asarray(data, dtype=np.float64), name)
        self.params[name] = p
        return p

    def trunc_normal(self, name: str, shape, std: float = 0.02, bound: float = 2.0) -> Parameter:
        """Normal(0, std) resampled until inside [-bound, bound]."""
        data = self.rng.normal(0.0, std, size=shape)
        bad = np.abs(data) > bound
        while bad.any():
            data[bad] = self.rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(data) > bound
        return self._register(name, data)

    def kaiming_conv(self, name: str, shape) -> Parameter:
        """Fan-out scaled normal for conv kernels (Cout, Cin/g, kh, kw)."""
        cout, _, kh, kw = shape
        std = np.sqrt(2.0 / (cout * kh * kw))
        return self._register(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Parameter:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Parameter:
        return self._register(name, np.ones(shape))
