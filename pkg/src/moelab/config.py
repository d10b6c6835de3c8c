"""Run configuration of the command-line front end.

A `RunConfig` is resolved from three layers: built-in defaults (the
two-atom simulation ground truth and the SGD defaults), a JSON document
and command-line flags, later layers overriding earlier ones.
"""

import dataclasses
from dataclasses import dataclass, field

from moelab.estimate import FitConfig
from moelab.exceptions import ConfigError, InputError
from moelab.harness import (
    FULL_GRID,
    FULL_REPLICATIONS,
    QUICK_GRID,
    QUICK_REPLICATIONS,
    Setting,
    SweepConfig,
    default_loss,
)
from moelab.identify import Mode
from moelab.model import (
    Activation,
    ExpertSpec,
    Family,
    MixingMeasure,
    reference_truth,
    parse_activation,
)
from moelab.utils import read_json_file

EXPERIMENTS = ("fit", "sweep", "check", "adversarial")
FIT_KEYS = ("learning_rate", "batch_size", "epochs", "steps_per_epoch", "decay_every",
            "decay_factor", "polish_steps", "init_spread", "gauge", "divergence_factor")
DEFAULT_ADVERSARIAL_GRID = (10, 100, 1000)


def _default_fit() -> dict:
    defaults = FitConfig().to_dict()
    return {key: defaults[key] for key in FIT_KEYS}


@dataclass
class RunConfig:
    """Effective configuration of one command.

    Attributes:
        experiment: fit, sweep, check or adversarial.
        family: Expert family label, e.g. `ridge-sigmoid` or `linear`.
        activation: Activation checked by `check --mode independence`.
        norm_eps: Stabilizer of normalized ridge experts.
        truth: Atoms of the true measure, the simulation ground truth if None.
        setting: exact or over.
        k: Number of fitted atoms of `fit`, k* if None.
        n: Sample size of `fit`.
        n_grid: Sample sizes of `sweep` and `adversarial`.
        quick: Use the short CI grid.
        replications: Fits per sample size.
        loss: Voronoi loss, chosen by family if None.
        r: Exponent of D3 and order of the adversarial construction.
        metric: voronoi or l2.
        noise_var: Noise variance of the data.
        seed: Master seed.
        out: Output directory.
        mode: identifiability or independence.
        check_k: Atoms of the checked family, 1 (identifiability) or 2 if None.
        trials: Independence check trials.
        threshold: Independence check threshold.
        b1: True bias b*_1 of the ridge adversarial construction.
        fit: SGD hyperparameters.
    """

    experiment: str = "sweep"
    family: str = "ridge-sigmoid"
    activation: str | None = None
    norm_eps: float = 0.0
    truth: list[dict] | None = None
    setting: str = "exact"
    k: int | None = None
    n: int = 10000
    n_grid: list[int] | None = None
    quick: bool = False
    replications: int | None = None
    loss: str | None = None
    r: float = 1.0
    metric: str = "voronoi"
    noise_var: float = 1.0
    seed: int = 0
    out: str = "results"
    mode: str = "identifiability"
    check_k: int | None = None
    trials: int = 5
    threshold: float = 1e-6
    b1: float = 2.0
    fit: dict = field(default_factory=_default_fit)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Resolves the defaults that depend on other keys and checks ranges.

        Raises:
            ConfigError: Naming the first invalid key.
        """
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"Unknown experiment '{self.experiment}'.", key="experiment")
        try:
            expert = self.expert()
        except InputError as exc:
            raise ConfigError(str(exc), key="family") from exc
        if self.setting not in [s.value for s in Setting]:
            raise ConfigError(f"Unknown setting '{self.setting}'.", key="setting")
        if self.metric not in ("voronoi", "l2"):
            raise ConfigError(f"Unknown metric '{self.metric}'.", key="metric")
        if self.mode not in [m.value for m in Mode]:
            raise ConfigError(f"Unknown check mode '{self.mode}'.", key="mode")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}.", key="n")
        if self.k is not None and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}.", key="k")
        if self.r < 1:
            raise ConfigError(f"r must be >= 1, got {self.r}.", key="r")
        if self.noise_var < 0:
            raise ConfigError(f"noise_var must be >= 0, got {self.noise_var}.", key="noise_var")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}.", key="seed")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}.",
                              key="threshold")

        if self.replications is None:
            self.replications = QUICK_REPLICATIONS if self.quick else FULL_REPLICATIONS
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}.",
                              key="replications")
        if self.n_grid is None:
            if self.experiment == "adversarial":
                self.n_grid = list(DEFAULT_ADVERSARIAL_GRID)
            else:
                self.n_grid = list(QUICK_GRID if self.quick else FULL_GRID)
        self.n_grid = [int(n) for n in self.n_grid]
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError(f"n_grid must be nonempty and increasing: {self.n_grid}.",
                              key="n_grid")
        if self.loss is None:
            self.loss = default_loss(expert)[0]
        if self.loss.upper() not in ("D1", "D2", "D3"):
            raise ConfigError(f"Unknown loss '{self.loss}'.", key="loss")
        self.loss = self.loss.upper()
        if self.check_k is None:
            self.check_k = 1 if self.mode == Mode.IDENTIFIABILITY.value else 2

        unknown = sorted(set(self.fit) - set(FIT_KEYS))
        if unknown:
            raise ConfigError(f"Unknown configuration key 'fit.{unknown[0]}'.",
                              key=f"fit.{unknown[0]}")
        self.fit = {**_default_fit(), **self.fit}
        try:
            self.truth_measure()
        except (InputError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid truth: {exc}", key="truth") from exc
        try:
            self.fit_config()
        except (InputError, ValueError) as exc:
            raise ConfigError(f"Invalid fit settings: {exc}", key="fit") from exc
        if self.activation is not None:
            try:
                parse_activation(self.activation)
            except InputError as exc:
                raise ConfigError(str(exc), key="activation") from exc

    def expert(self) -> ExpertSpec:
        return ExpertSpec.from_label(self.family, self.norm_eps)

    def check_activation(self) -> tuple[Activation, int]:
        """Activation of the independence check, from `activation` or the family."""
        if self.activation is not None:
            return parse_activation(self.activation)
        return self.expert().link

    def truth_measure(self) -> MixingMeasure:
        """The true measure; the ground truth with b*_1 = b1 and a*_1 = 0 for
        the ridge adversarial construction."""
        expert = self.expert()
        if self.truth is not None:
            return MixingMeasure.from_dict({"expert": expert.to_dict(), "atoms": self.truth})
        truth = reference_truth(expert)
        if self.experiment == "adversarial" and expert.family is Family.RIDGE:
            eta = truth.eta.copy()
            eta[0] = [0.0, self.b1]
            truth = MixingMeasure(truth.beta0, truth.beta1, eta, expert)
        return truth

    def fit_config(self) -> FitConfig:
        return FitConfig(k=self.k or self.truth_measure().k, seed=self.seed, **self.fit)

    def sweep_config(self) -> SweepConfig:
        return SweepConfig(
            expert=self.expert(),
            truth=self.truth_measure(),
            setting=Setting(self.setting),
            n_grid=tuple(self.n_grid),
            replications=self.replications,
            loss=self.loss,
            r=self.r,
            metric=self.metric,
            fit=self.fit_config(),
            master_seed=self.seed,
            noise_var=self.noise_var,
        )

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["truth"] = self.truth_measure().to_dict()["atoms"]
        return data


INT_KEYS = ("k", "n", "replications", "seed", "check_k", "trials")
FLOAT_KEYS = ("norm_eps", "r", "noise_var", "threshold", "b1")
STR_KEYS = ("experiment", "family", "activation", "setting", "loss", "metric", "out", "mode")


def _coerce(key: str, value):
    """Checks the JSON type of a top-level value, naming the key on failure."""
    if value is None:
        return None
    try:
        if key in INT_KEYS:
            if isinstance(value, bool) or int(value) != value:
                raise ValueError(value)
            return int(value)
        if key in FLOAT_KEYS:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if key in STR_KEYS:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
        if key == "quick":
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if key == "n_grid":
            return [_coerce("n", n) for n in value]
        if key in ("fit",) and not isinstance(value, dict):
            raise ValueError(value)
        if key == "truth" and not isinstance(value, list):
            raise ValueError(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid value {value!r} for configuration key '{key}'.",
                          key=key) from exc
    return value


def resolve_config(file_data: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merges defaults, a configuration document and flag overrides.

    Args:
        file_data: Parsed JSON document.
        overrides: Flag values; None entries are ignored.

    Raises:
        ConfigError: For unknown keys or invalid values, naming the key.
    """
    known = {f.name for f in dataclasses.fields(RunConfig)}
    merged = {}
    for layer in (file_data or {}, {k: v for k, v in (overrides or {}).items()
                                    if v is not None}):
        for key, value in layer.items():
            if key not in known:
                raise ConfigError(f"Unknown configuration key '{key}'.", key=key)
            value = _coerce(key, value)
            if key == "fit" and key in merged:
                merged["fit"] = {**merged["fit"], **value}
            else:
                merged[key] = value
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"Invalid configuration value: {exc}") from exc


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Reads the JSON document at `path` (if any) and applies the overrides."""
    file_data = read_json_file(path) if path else None
    return resolve_config(file_data, overrides)
