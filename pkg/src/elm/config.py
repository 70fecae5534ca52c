"""Run configuration: a typed key schema, a line-oriented file format,
and named profiles.

The on-disk format is plain UTF-8 text, one "section.key = value" per
line, with '#' comments and blank lines ignored. Unknown keys and
duplicate keys are errors: silent typos in a config that drives a
multi-stage run are far worse than a hard stop. `to_text` emits a
canonical sorted rendering, which is what gets hashed and what a run
snapshots into its workdir as config.resolved.

Profiles bundle the constants for three scales: `desk` (runs end to end
on a laptop CPU), `micro` (reduced depth/width), and `paper` (full-size
dims; used for parameter accounting and dry runs, not for training
here).
"""

import hashlib

from .errors import ConfigError
from .evolution import EvoConfig
from .genome import ModelDims, ParamBudget

# key -> (type, default). bool values are written as true/false.
KEYS = {
    "model.n_layers": (int, 4),
    "model.hidden": (int, 64),
    "model.heads": (int, 8),
    "model.inner": (int, 16),
    "model.ffn_init": (int, 16),
    "model.ffn_step": (int, 16),
    "model.ffn_max": (int, 128),
    "model.n_max": (int, 128),
    "model.vocab_limit": (int, 512),
    "model.tie_head": (bool, False),
    "model.candidates": (str, "0,1,2,3,4,5"),
    "growth.k": (int, 6),
    "growth.tau": (float, 0.99),
    "heads.eta": (float, 0.9),
    "budget.ceiling": (int, 102000),
    "budget.count_embeddings": (bool, True),
    "kd.mode": (str, "none"),
    "kd.lambda_cd": (float, 1.0),
    "kd.lambda_ad": (float, 1.0),
    "kd.lambda_fd": (float, 1.0),
    "kd.teacher": (str, ""),
    "evo.population": (int, 16),
    "evo.generations": (int, 8),
    "evo.crossover_p": (float, 1.0),
    "evo.mutation_p": (float, 0.1),
    "evo.parents": (int, 8),
    "evo.elites": (int, 2),
    "train.objective": (str, "mlm"),
    "train.epochs_pretrain": (int, 6),
    "train.epochs_finetune": (int, 2),
    "train.epochs_final": (int, 2),
    "train.batch_size": (int, 8),
    "train.seq_len": (int, 64),
    "train.lr": (float, 3e-4),
    "train.warmup_ratio": (float, 0.1),
    "train.weight_decay": (float, 0.01),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.mask_prob": (float, 0.15),
    "run.seed": (int, 0),
    "paths.corpus": (str, ""),
    "paths.workdir": (str, ""),
}

# the default values above ARE the desk profile
PROFILES = {
    "desk": {},
    "micro": {
        "model.n_layers": 6,
        "model.hidden": 192,
        "model.heads": 12,
        "model.inner": 48,
        "model.ffn_init": 48,
        "model.ffn_step": 48,
        "model.ffn_max": 384,
        "model.n_max": 256,
        "growth.k": 10,
        "budget.ceiling": 4_000_000,
        "train.lr": 1e-4,
    },
    "paper": {
        "model.n_layers": 12,
        "model.hidden": 528,
        "model.heads": 12,
        "model.inner": 132,
        "model.ffn_init": 132,
        "model.ffn_step": 132,
        "model.ffn_max": 1056,
        "model.n_max": 512,
        "growth.k": 21,
        "budget.ceiling": 15_700_000,
        "evo.population": 50,
        "evo.generations": 40,
        "evo.parents": 10,
        "train.lr": 1e-4,
        "train.seq_len": 128,
        "train.batch_size": 256,
    },
}

KD_MODES = ("none", "classic", "relational")


def _coerce(key: str, raw: str):
    typ, _ = KEYS[key]
    raw = raw.strip()
    try:
        if typ is bool:
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}")


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class SearchConfig:
    """Immutable-by-convention mapping of the full key schema."""

    def __init__(self, values: dict = None):
        self.values = {k: d for k, (_, d) in KEYS.items()}
        for k, v in (values or {}).items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v

    def __getitem__(self, key: str):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def with_overrides(self, overrides: dict) -> "SearchConfig":
        merged = dict(self.values)
        merged.update(overrides)
        return SearchConfig(merged)

    @classmethod
    def profile(cls, name: str) -> "SearchConfig":
        if name not in PROFILES:
            raise ConfigError(
                f"unknown profile {name!r}; expected one of "
                f"{sorted(PROFILES)}"
            )
        return cls(PROFILES[name])

    @classmethod
    def from_text(cls, text: str) -> "SearchConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected 'key = value', "
                                  f"got {stripped!r}")
            key, raw = stripped.split("=", 1)
            key = key.strip()
            if key not in KEYS:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _coerce(key, raw)
        return cls(values)

    @classmethod
    def load(cls, path) -> "SearchConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        return cls.from_text(text)

    def to_text(self) -> str:
        lines = [f"{k} = {_render(self.values[k])}" for k in sorted(KEYS)]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    def config_hash(self) -> str:
        """Digest of everything that affects run semantics. The workdir
        names where the run lives, not what it computes, so it is left
        out; a relocated run resumes cleanly."""
        lines = [f"{k} = {_render(self.values[k])}" for k in sorted(KEYS)
                 if k != "paths.workdir"]
        text = "\n".join(lines) + "\n"
        return hashlib.blake2s(text.encode("utf-8")).hexdigest()[:16]

    # -- typed views ------------------------------------------------------

    def candidate_set(self) -> tuple:
        raw = self["model.candidates"]
        try:
            cands = tuple(sorted({int(x) for x in raw.split(",") if x.strip()}))
        except ValueError:
            raise ConfigError(f"model.candidates: cannot parse {raw!r}")
        if not cands:
            raise ConfigError("model.candidates is empty")
        if any(not 0 <= c <= 5 for c in cands):
            raise ConfigError(f"model.candidates out of range 0..5: {cands}")
        return cands

    def model_dims(self, vocab_size: int) -> ModelDims:
        return ModelDims(
            n_layers=self["model.n_layers"],
            hidden=self["model.hidden"],
            heads=self["model.heads"],
            inner=self["model.inner"],
            ffn_init=self["model.ffn_init"],
            ffn_step=self["model.ffn_step"],
            ffn_max=self["model.ffn_max"],
            n_max=self["model.n_max"],
            vocab_size=vocab_size,
            tie_head=self["model.tie_head"],
        )

    def budget(self) -> ParamBudget:
        return ParamBudget(self["budget.ceiling"],
                           embedding_counted=self["budget.count_embeddings"])

    def evo(self) -> EvoConfig:
        return EvoConfig(
            population=self["evo.population"],
            generations=self["evo.generations"],
            crossover_p=self["evo.crossover_p"],
            mutation_p=self["evo.mutation_p"],
            parents=self["evo.parents"],
            elites=self["evo.elites"],
        )

    def validate(self) -> None:
        """Cross-field consistency; raises ConfigError on the first hole."""
        try:
            self.model_dims(vocab_size=max(4, self["model.vocab_limit"])).validate()
            self.budget()
            self.evo()
            self.candidate_set()
        except ConfigError:
            raise
        except Exception as e:
            raise ConfigError(str(e))
        if self["kd.mode"] not in KD_MODES:
            raise ConfigError(f"kd.mode must be one of {KD_MODES}, "
                              f"got {self['kd.mode']!r}")
        if self["kd.mode"] != "none" and not self["kd.teacher"]:
            raise ConfigError("kd.mode set but kd.teacher is empty")
        if self["train.objective"] not in ("mlm", "clm"):
            raise ConfigError(f"train.objective must be mlm or clm, "
                              f"got {self['train.objective']!r}")
        if not 0.0 < self["growth.tau"] <= 1.0:
            raise ConfigError(f"growth.tau outside (0, 1]: "
                              f"{self['growth.tau']}")
        if not 0.0 < self["heads.eta"] <= 1.0:
            raise ConfigError(f"heads.eta outside (0, 1]: {self['heads.eta']}")
        if self["growth.k"] < 0:
            raise ConfigError(f"growth.k must be >= 0, got {self['growth.k']}")
        if not 0.0 < self["train.mask_prob"] <= 1.0:
            raise ConfigError(f"train.mask_prob outside (0, 1]: "
                              f"{self['train.mask_prob']}")
        for key in ("train.lr", "train.weight_decay", "kd.lambda_cd",
                    "kd.lambda_ad", "kd.lambda_fd"):
            if self[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {self[key]}")
        for key in ("train.beta1", "train.beta2"):
            if not 0.0 <= self[key] < 1.0:
                raise ConfigError(f"{key} outside [0, 1): {self[key]}")
        if not 0.0 <= self["train.warmup_ratio"] <= 1.0:
            raise ConfigError(f"train.warmup_ratio outside [0, 1]: "
                              f"{self['train.warmup_ratio']}")
        for key in ("train.epochs_pretrain", "train.epochs_finetune",
                    "train.epochs_final"):
            if self[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {self[key]}")
        if self["train.batch_size"] < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 1 <= self["train.seq_len"] <= self["model.n_max"]:
            raise ConfigError(
                f"train.seq_len {self['train.seq_len']} outside "
                f"[1, model.n_max={self['model.n_max']}]"
            )
        if self["model.vocab_limit"] < 4:
            raise ConfigError("model.vocab_limit must be >= 4")
