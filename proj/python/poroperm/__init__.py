"""Masked voxel pretraining and porosity/permeability regression."""

import json

from . import _core
from ._core import (
    PoropermError,
    kozeny_carman,
    load_volume,
    porosity,
    r_squared,
    rmse,
    save_volume,
    specific_surface,
)

__all__ = [
    "Model",
    "PoropermError",
    "check_gradients",
    "cli",
    "generate_synthetic",
    "kozeny_carman",
    "load_volume",
    "porosity",
    "r_squared",
    "rmse",
    "sample_trials",
    "save_volume",
    "specific_surface",
]


def _arch_json(arch):
    return "" if arch is None else json.dumps(arch)


def generate_synthetic(dims, porosity=0.25, corr_len=2.0, seed=0, kozeny_c=5.0):
    """Returns (volume, labels); volume is float32 indexed [z, y, x], 1 = pore."""
    if isinstance(dims, int):
        dims = (dims, dims, dims)
    return _core.generate_synthetic(list(dims), porosity, corr_len, seed, kozeny_c)


class Model:
    """Thin wrapper; architectures are plain dicts (missing keys take defaults)."""

    def __init__(self, core):
        self._core = core

    @classmethod
    def build(cls, arch=None, seed=0):
        return cls(_core.Model.build(_arch_json(arch), seed))

    @classmethod
    def load(cls, path):
        return cls(_core.Model.load(str(path)))

    def save(self, path):
        self._core.save(str(path))

    @property
    def arch(self):
        return json.loads(self._core.arch_json)

    @property
    def parameter_count(self):
        return self._core.parameter_count

    def forward_ssl(self, cube):
        return self._core.forward_ssl(cube)

    def forward_supervised(self, cube):
        return self._core.forward_supervised(cube)

    def transfer(self, head_seed=0):
        return Model(self._core.transfer(head_seed))

    def set_target_norm(self, mean, stddev):
        self._core.set_target_norm(list(mean), list(stddev))


def check_gradients(arch=None, inputs=10, coords=200, eps=1e-5, seed=0):
    return _core.check_gradients(_arch_json(arch), inputs, coords, eps, seed)


def sample_trials(count, seed=0):
    return [json.loads(t) for t in _core.sample_trials(count, seed)]


def cli(*args):
    """Runs a subcommand in-process; returns (exit_code, stdout, stderr)."""
    return _core.run_cli([str(a) for a in args])
