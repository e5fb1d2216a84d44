"""Run configuration: size profiles, training hyperparameters, config files."""

from __future__ import annotations

from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """A configuration value violates its contract."""


TASKS = ("seg", "det", "color")
RETRIEVAL_BACKENDS = ("pixel", "feature", "random")
TRAIN_VARIANTS = ("condense", "full_ca", "no_pa", "no_tp")
EVAL_MODES = ("condense", "mean_pool", "full_ca", "output_fusion")


@dataclass(frozen=True)
class Profile:
    """Geometry and default budget for one scale of the pipeline."""

    name: str
    side: int          # sub-image side S; canvas is 2S
    patch: int         # patch size P, must divide S
    dim: int           # feature width D
    n_tokens: int      # codebook size
    layers: int        # frozen backbone depth
    epochs: int
    batch: int

    def __post_init__(self):
        if self.side % self.patch != 0:
            raise ConfigError(f"side {self.side} not divisible by patch {self.patch}")

    @property
    def grid(self) -> int:
        """Quadrant patch grid side h = w = S / P."""
        return self.side // self.patch

    @property
    def canvas_side(self) -> int:
        return 2 * self.side


DESK = Profile(name="desk", side=32, patch=4, dim=32, n_tokens=64,
               layers=2, epochs=30, batch=8)
PAPER = Profile(name="paper", side=112, patch=16, dim=32, n_tokens=1024,
                layers=2, epochs=150, batch=16)

PROFILES = {"desk": DESK, "paper": PAPER}

K_SWEEP = (1, 2, 4, 8, 16, 32)


@dataclass
class TrainConfig:
    k: int = 4
    lam: float = 0.4
    lr0: float = 0.03
    epochs: int | None = None   # None: take the profile default
    batch: int | None = None
    seed: int = 0
    task: str = "seg"
    profile: str = "desk"
    retrieval: str = "pixel"
    variant: str = "condense"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr0}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.retrieval not in RETRIEVAL_BACKENDS:
            raise ConfigError(f"unknown retrieval backend {self.retrieval!r}")
        if self.variant not in TRAIN_VARIANTS:
            raise ConfigError(f"unknown training variant {self.variant!r}")
        if self.variant == "no_tp" and self.lam == 0:
            raise ConfigError("no_tp with lambda=0 leaves no objective")
        prof = PROFILES[self.profile]
        if self.epochs is None:
            self.epochs = prof.epochs
        if self.batch is None:
            self.batch = prof.batch
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")

    @property
    def prof(self) -> Profile:
        return PROFILES[self.profile]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# Keys accepted in run-config files; values are parsed by the given callable.
_FILE_KEYS = {
    "k": int,
    "lambda": float,
    "lr": float,
    "epochs": int,
    "batch": int,
    "seed": int,
    "task": str,
    "profile": str,
    "retrieval": str,
    "variant": str,
    "data": str,
    "ckpt_in": str,
    "ckpt_out": str,
    "backbone_in": str,
    "backbone_out": str,
    "report_out": str,
    "queries": int,
    "prompts": int,
    "test_queries": int,
    "prefit_epochs": int,
    "k_list": str,
}


def parse_config_file(path: str) -> dict:
    """Parse a line-oriented key=value file; '#' starts a comment.

    Unknown keys are rejected so typos do not silently change a run.
    """
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _FILE_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _FILE_KEYS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from exc
    return values
