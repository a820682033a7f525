"""Run configuration: per-setting training defaults and the flat JSON loader."""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import AugmentationConfig
from .errors import ConfigError
from .transformer import ModelConfig

SETTINGS = ("unsupervised", "supervised", "semisupervised")
SETTING_ALIASES = {"un": "unsupervised", "sup": "supervised", "semi": "semisupervised"}

# lr, p, eps_plus, eps_minus, b1 (normal), b2 (simulated), b3 (real defects)
SETTING_DEFAULTS = {
    "unsupervised": dict(lr=1e-4, p=1 / 4, eps_plus=0.5, eps_minus=0.08, b1=4, b2=2, b3=0),
    "supervised": dict(lr=1e-4, p=1 / 4, eps_plus=0.25, eps_minus=0.08, b1=2, b2=2, b3=2),
    "semisupervised": dict(lr=3e-5, p=1 / 10, eps_plus=0.25, eps_minus=0.08, b1=3, b2=3, b3=2),
}


@dataclass
class MixMatchConfig:
    gamma: float = 0.5
    M: int = 3
    lambda_u: float = 5.0
    ramp_steps: int = 400
    mixup_beta: float = 0.75
    alpha_x: float = 0.25
    alpha_u: float = 0.75
    gamma_x: float = 4.0
    gamma_u: float = 4.0
    mix_scope: str = "batch"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError(f"mixmatch.gamma must be positive, got {self.gamma}")
        if self.M < 1:
            raise ConfigError(f"mixmatch.M must be >= 1, got {self.M}")
        if self.ramp_steps < 0:
            raise ConfigError("mixmatch.ramp_steps must be non-negative")
        if self.mix_scope not in ("batch", "window"):
            raise ConfigError(f"mixmatch.mix_scope must be 'batch' or 'window', got {self.mix_scope!r}")


@dataclass
class TrainConfig:
    """Every knob of a run. Setting-dependent fields default per :data:`SETTING_DEFAULTS`."""

    setting: str = "unsupervised"
    lr: float = None
    p: float = None
    eps_plus: float = None
    eps_minus: float = None
    b1: int = None
    b2: int = None
    b3: int = None
    weight_decay: float = 0.05
    focal_alpha: float = 0.25
    focal_gamma: float = 4.0
    ema_decay: float = 0.999
    steps: int = 2000
    pretrain_steps: int = 2000
    seed: int = 0

    # features and memory bank
    extractor_seed: int = 0
    d_f: int = 64
    lambda_pe: float = 0.1
    coreset_ratio: float = 0.1
    residual_mode: str = "square"
    sigma: float = 4.0

    # model (desk scale: 8x8 token grids from 64x64 images)
    mu: int = 4
    step: int = 2
    attn_window: int = 2
    heads: int = 32
    depth: int = 4
    embed_dim: int = 64
    mlp_hidden: int = 256
    rho: int = 1

    # augmentation
    knn_augment: bool = True
    alpha1: float = 0.5
    alpha2: float = 0.8
    noise_log_sigma: float = 0.2
    noise_clip: float = 0.223
    noise_per: str = "element"
    dropout_alpha: float = 0.25
    dropout_focal: bool = False

    # training data
    sim_pool: int = 64
    n_labeled: int = 4
    upsilon: float = 0.5

    mixmatch: MixMatchConfig = field(default_factory=MixMatchConfig)

    def __post_init__(self):
        self.setting = SETTING_ALIASES.get(self.setting, self.setting)
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        for key, value in SETTING_DEFAULTS[self.setting].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if isinstance(self.mixmatch, dict):
            self.mixmatch = MixMatchConfig(**self.mixmatch)
        self.validate()

    def validate(self):
        if not 0 < self.p <= 1:
            raise ConfigError(f"p must lie in (0, 1], got {self.p}")
        if not 0 <= self.eps_minus <= self.eps_plus <= 1:
            raise ConfigError("need 0 <= eps_minus <= eps_plus <= 1")
        if min(self.b1, self.b2, self.b3) < 0 or self.b1 + self.b2 + self.b3 == 0:
            raise ConfigError("batch image counts must be non-negative and not all zero")
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.residual_mode not in ("square", "abs"):
            raise ConfigError(f"residual_mode must be 'square' or 'abs', got {self.residual_mode!r}")
        if not 0 < self.coreset_ratio <= 1:
            raise ConfigError("coreset_ratio must lie in (0, 1]")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        try:
            self.augmentation()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self):
        return ModelConfig(
            d_t=self.d_f * self.rho * self.rho, embed_dim=self.embed_dim, depth=self.depth,
            attn_window=self.attn_window, heads=self.heads, mlp_hidden=self.mlp_hidden,
            mu=self.mu, step=self.step, rho=self.rho,
        )

    def augmentation(self):
        return AugmentationConfig(
            alpha1=self.alpha1, alpha2=self.alpha2, dropout_alpha=self.dropout_alpha,
            noise_log_sigma=self.noise_log_sigma, noise_clip=self.noise_clip,
            noise_per=self.noise_per, rng_seed=self.seed,
        )

    def for_setting(self, setting, **overrides):
        """Copy with another setting's defaults for the setting-dependent fields."""
        values = {k: v for k, v in self.to_dict().items() if k not in SETTING_DEFAULTS["unsupervised"]}
        values.update(setting=setting, **overrides)
        values["mixmatch"] = MixMatchConfig(**values["mixmatch"])
        return TrainConfig(**values)

    def to_dict(self):
        return asdict(self)


_FIELDS = {f.name: f for f in fields(TrainConfig)}
_MIX_FIELDS = {f.name for f in fields(MixMatchConfig)}


def _coerce(name, value, reference):
    if reference is None or isinstance(value, type(reference)):
        return value
    if isinstance(reference, bool):
        if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        return type(reference)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot convert {value!r} to {type(reference).__name__}") from None


def config_from_mapping(mapping, base=None):
    """Build a :class:`TrainConfig` from flat keys.

    Keys are field names; ``mixmatch.<name>`` addresses the MixMatch block
    and other dotted keys are joined with ``_`` (``focal.alpha`` ->
    ``focal_alpha``). Unknown keys are rejected.
    """
    top, mix = {}, {}
    if base is not None:
        top = {k: v for k, v in base.to_dict().items() if k != "mixmatch"}
        mix = dict(base.mixmatch.__dict__)
        # explicit setting change re-derives the setting-dependent defaults
        if "setting" in mapping and SETTING_ALIASES.get(mapping["setting"], mapping["setting"]) != base.setting:
            for key in SETTING_DEFAULTS["unsupervised"]:
                top[key] = None
    defaults_top = TrainConfig()
    defaults_mix = MixMatchConfig()
    for key, value in mapping.items():
        if key.startswith("mixmatch."):
            name = key.split(".", 1)[1]
            if name not in _MIX_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            mix[name] = _coerce(key, value, getattr(defaults_mix, name))
            continue
        name = key.replace(".", "_")
        if name not in _FIELDS or name == "mixmatch":
            raise ConfigError(f"unknown config key {key!r}")
        ref = getattr(defaults_top, name)
        top[name] = value if value is None else _coerce(key, value, ref)
    top["mixmatch"] = MixMatchConfig(**mix)
    return TrainConfig(**top)


def load_config(path=None, overrides=None):
    """Read a JSON config file (may be ``None``) and apply ``overrides`` on top."""
    mapping = {}
    if path is not None:
        try:
            mapping = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(mapping, dict):
            raise ConfigError(f"{path}: top level must be an object")
    mapping = dict(mapping)
    mapping.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_mapping(mapping)

