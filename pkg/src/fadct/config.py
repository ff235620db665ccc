"""Run configuration: one flat `key = value` file covering every
hyperparameter, validated as a whole before any compute.

Format rules: one assignment per line, `#` starts a comment, booleans are
`true`/`false`, tuples are comma-separated, and `kl_scale` accepts the
literal `auto` (resolved to the training-set size). Unknown keys are hard
errors so typos cannot silently fall back to defaults. The same parser
handles `--set key=value` command-line overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .data import AugmentConfig, DataError


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration value."""


VARIANTS = ("resnet", "vit", "dctvit", "dctvitres")


@dataclass
class RunConfig:
    # run identity
    variant: str = "dctvitres"
    seed: int = 0
    num_classes: int = 0            # 0 = infer from the training corpus

    # model sizes
    image_size: int = 32
    patch_size: int = 8
    vit_embed_dim: int = 64
    vit_layers: int = 4
    vit_heads: int = 4
    vit_mlp_ratio: float = 2.0
    feature_dim: int = 64
    resnet_channels: tuple = (16, 32, 64)
    resnet_blocks_per_stage: int = 2
    shared_vit_backbone: bool = True

    # frequency partition
    mask_sharpness: float = 50.0
    cutoff_init_c1: float = 1.0 / 3.0
    cutoff_init_c2: float = 2.0 / 3.0
    ordered_cutoffs: bool = True

    # bayesian head
    prior_sigma: float = 1.0
    predictive_mode: str = "mean"
    mc_samples: int = 8

    # loss
    loss_alpha: float = 0.1
    kl_scale: float | str = "auto"  # auto = number of training samples
    fusion_entropy_reg: float = 0.0

    # optimization
    epochs: int = 100
    batch_size: int = 8
    lr_backbone: float = 1e-5
    lr_head: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    workers: int = 1
    early_stop_val_acc: float = 0.0  # 0 = never stop early

    # augmentation (all inert by default)
    hflip_prob: float = 0.0
    vflip_prob: float = 0.0
    crop_scale_min: float = 1.0
    crop_scale_max: float = 1.0
    jitter_strength: float = 0.0
    blur_prob: float = 0.0
    blur_sigma: float = 1.0
    spectral_noise_std: float = 0.0
    band_mask_prob: float = 0.0
    band_mask_width: float = 0.1

    # paths and persistence
    train_dir: str = ""
    val_dir: str = ""
    checkpoint_dtype: str = "f64"

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        def require(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)

        require(self.variant in VARIANTS,
                f"variant must be one of {VARIANTS}, got {self.variant!r}")
        require(self.num_classes >= 0, "num_classes must be >= 0")
        require(self.image_size >= 1 and self.patch_size >= 1,
                "image_size and patch_size must be positive")
        require(self.image_size % self.patch_size == 0,
                f"image_size {self.image_size} must be divisible by "
                f"patch_size {self.patch_size}")
        require(self.vit_embed_dim >= 1 and self.vit_layers >= 1 and self.vit_heads >= 1,
                "transformer extents must be positive")
        require(self.vit_embed_dim % self.vit_heads == 0,
                f"vit_embed_dim {self.vit_embed_dim} must be divisible by "
                f"vit_heads {self.vit_heads}")
        require(self.vit_mlp_ratio > 0, "vit_mlp_ratio must be positive")
        require(self.feature_dim >= 1, "feature_dim must be positive")
        require(len(self.resnet_channels) >= 1 and min(self.resnet_channels) >= 1,
                "resnet_channels needs at least one positive stage width")
        require(self.resnet_blocks_per_stage >= 1, "resnet_blocks_per_stage must be >= 1")
        require(self.mask_sharpness > 0, "mask_sharpness must be positive")
        require(0.0 < self.cutoff_init_c1 <= self.cutoff_init_c2 < 1.0,
                f"cutoff initializers must satisfy 0 < c1 <= c2 < 1, got "
                f"({self.cutoff_init_c1}, {self.cutoff_init_c2})")
        require(self.prior_sigma > 0, "prior_sigma must be positive")
        require(self.predictive_mode in ("mean", "mc"),
                f"predictive_mode must be 'mean' or 'mc', got {self.predictive_mode!r}")
        require(self.mc_samples >= 1, "mc_samples must be >= 1")
        require(0.0 <= self.loss_alpha <= 1.0, "loss_alpha must lie in [0, 1]")
        if isinstance(self.kl_scale, str):
            require(self.kl_scale == "auto",
                    f"kl_scale must be 'auto' or a positive number, got {self.kl_scale!r}")
        else:
            require(self.kl_scale > 0, "kl_scale must be positive")
        require(self.fusion_entropy_reg >= 0, "fusion_entropy_reg must be >= 0")
        require(self.epochs >= 1, "epochs must be >= 1")
        require(self.batch_size >= 1, "batch_size must be >= 1")
        require(self.lr_backbone > 0 and self.lr_head > 0, "learning rates must be positive")
        require(self.lr_min >= 0, "lr_min must be >= 0")
        require(self.weight_decay >= 0, "weight_decay must be >= 0")
        require(0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0,
                "adam betas must lie in [0, 1)")
        require(self.adam_eps > 0, "adam_eps must be positive")
        require(self.grad_clip >= 0, "grad_clip must be >= 0 (0 disables clipping)")
        require(self.workers >= 1, "workers must be >= 1")
        require(0.0 <= self.early_stop_val_acc <= 1.0,
                "early_stop_val_acc must lie in [0, 1]")
        require(self.checkpoint_dtype in ("f64", "f32"),
                f"checkpoint_dtype must be 'f64' or 'f32', got {self.checkpoint_dtype!r}")
        try:
            self.augment_config()
        except DataError as exc:
            raise ConfigError(str(exc)) from None

    # -- derived views --------------------------------------------------------

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            hflip_prob=self.hflip_prob, vflip_prob=self.vflip_prob,
            crop_scale_min=self.crop_scale_min, crop_scale_max=self.crop_scale_max,
            jitter_strength=self.jitter_strength, blur_prob=self.blur_prob,
            blur_sigma=self.blur_sigma, spectral_noise_std=self.spectral_noise_std,
            band_mask_prob=self.band_mask_prob, band_mask_width=self.band_mask_width)

    def resolve_kl_scale(self, train_size: int) -> float:
        if isinstance(self.kl_scale, str):
            return float(max(train_size, 1))
        return float(self.kl_scale)

    def with_values(self, **kw) -> "RunConfig":
        return replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if key == "kl_scale":
        return raw if raw == "auto" else _parse_float(key, raw)
    if key == "resnet_channels":
        try:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated ints, got {raw!r}") from None
    ftype = _FIELD_TYPES[key]
    if ftype == "bool":
        if raw not in ("true", "false"):
            raise ConfigError(f"{key}: expected true or false, got {raw!r}")
        return raw == "true"
    if ftype == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if ftype == "float":
        return _parse_float(key, raw)
    return raw  # str fields


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_assignments(lines, source: str = "<config>") -> dict:
    """key -> parsed value for an iterable of `key = value` lines."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = text.split("=", 1)
        key = key.strip()
        out[key] = _parse_value(key, raw)
    return out


def parse_config(text: str, overrides: list[str] | None = None,
                 source: str = "<config>") -> RunConfig:
    """Build a validated RunConfig from file text plus --set overrides."""
    values = parse_assignments(text.splitlines(), source)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form: every key, sorted, one per line."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in sorted(fields(RunConfig), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def config_keys() -> list[str]:
    return sorted(f.name for f in fields(RunConfig))
