"""Plain-text run configuration.

One `key = value` file drives every subcommand: model topology, training
hyperparameters, dataset paths, output directory, and the master seed.
Unknown keys are rejected so typos fail loudly, and each run writes its fully
resolved configuration next to its outputs.  The environment variable
FORGELOC_SEED overrides the configured seed (an explicit command-line seed
still wins over both).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .network import ModelConfig
from .training import SatConfig

SEED_ENV_VAR = "FORGELOC_SEED"

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass
class RunConfig:
    # model topology
    nbf: int = 32
    k: int = 16
    convs_per_block: int = 3
    input_height: int = 64
    input_width: int = 64
    coarse_feature_mode: str = "cwhpf"
    refined_feature_mode: str = "cwhpf"
    attention_enabled: bool = True
    coarse_enabled: bool = True
    dtype: str = "float32"
    # training
    eps_max: float = 0.01
    lr: float = 0.002
    iterations: int = 100
    batch_size: int = 4
    sat_enabled: bool = True
    flip_rotate_enabled: bool = False
    # data and run layout
    manifest: str = ""
    output_dir: str = ""
    seed: int = 0
    # dataset generation
    n_train: int = 200
    n_test: int = 50

    def model_config(self) -> ModelConfig:
        return ModelConfig(nbf=self.nbf, k=self.k,
                           convs_per_block=self.convs_per_block,
                           input_size=(self.input_height, self.input_width),
                           coarse_feature_mode=self.coarse_feature_mode,
                           refined_feature_mode=self.refined_feature_mode,
                           attention_enabled=self.attention_enabled,
                           coarse_enabled=self.coarse_enabled,
                           dtype=self.dtype)

    def sat_config(self) -> SatConfig:
        return SatConfig(eps_max=self.eps_max, lr=self.lr,
                         iterations=self.iterations,
                         batch_size=self.batch_size, rng_seed=self.seed,
                         sat_enabled=self.sat_enabled,
                         flip_rotate_enabled=self.flip_rotate_enabled)

    def apply_env(self, environ=os.environ) -> "RunConfig":
        if SEED_ENV_VAR in environ:
            try:
                self.seed = int(environ[SEED_ENV_VAR])
            except ValueError:
                raise ValueError(f"{SEED_ENV_VAR} must be an integer, "
                                 f"got {environ[SEED_ENV_VAR]!r}")
        return self

    def save(self, path):
        lines = ["# resolved run configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.loads(fh.read(), source=str(path))

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        # dataclass field types arrive as strings under deferred annotations
        resolved = {"int": int, "float": float, "str": str, "bool": bool}
        values = {}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ValueError(f"{source}:{ln}: expected key = value, "
                                 f"got {raw!r}")
            if key not in types:
                raise ValueError(f"{source}:{ln}: unknown key {key!r}")
            kind = resolved[types[key]] if isinstance(types[key], str) \
                else types[key]
            values[key] = _coerce(value, kind, source, ln)
        return cls(**values)


def _coerce(value: str, kind, source: str, ln: int):
    if kind is bool:
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{source}:{ln}: expected a boolean "
                         f"(true/false), got {value!r}")
    if kind is str:
        return value
    try:
        return kind(value)
    except ValueError:
        raise ValueError(f"{source}:{ln}: expected {kind.__name__}, "
                         f"got {value!r}")
