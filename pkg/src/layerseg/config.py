"""Run configuration: one key=value file, flag overrides, exact dumps.

Every tunable of the pipeline lives here with its published default
(appearance: alpha_glasso 0.01, q_pca 20, patch 15x15; shape: q_ppca 20;
inference: ten-fold variance inflation, discriminative transition-only
appearance terms). ``dump``/``parse`` round-trip losslessly so a dumped
effective config reproduces the run.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # appearance
    alpha_glasso: float = 0.01
    q_pca: int = 20
    patch_height: int = 15
    patch_width: int = 15
    patches_per_class: int = 2000
    projector_samples: int = 5000
    glasso_tol: float = 1e-5
    glasso_max_iter: int = 200
    shared_appearance: bool = True
    # shape
    q_ppca: int = 20
    variance_inflation: float = 10.0
    # model combination
    beta_layer: int = 0
    beta_transition: int = 1
    appearance_mode: str = "discriminative"
    # inference
    rel_tol: float = 1e-6
    max_iters: int = 50
    cg_tol: float = 1e-8
    sparsity_threshold: float = 1e-12
    sigma_mode: str = "auto"
    inflate_prior_objective: bool = False
    threads: int = 1
    # evaluation
    eval_regions: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.appearance_mode not in ("generative", "discriminative"):
            raise ConfigError(f"bad appearance_mode {self.appearance_mode!r}")
        if self.beta_layer not in (0, 1) or self.beta_transition not in (0, 1):
            raise ConfigError("beta switches must be 0 or 1")
        if self.patch_height % 2 == 0 or self.patch_width % 2 == 0:
            raise ConfigError("patch size must be odd")

    @property
    def patch_size(self) -> tuple[int, int]:
        return (self.patch_height, self.patch_width)

    def with_overrides(self, **kwargs) -> "RunConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)


_BOOL_STRINGS = {"true": True, "false": False, "1": True, "0": False}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def dump_config(config) -> str:
    """Serialize a config dataclass as sorted ``key = value`` lines."""
    items = sorted(asdict(config).items())
    return "\n".join(f"{k} = {_format_value(v)}" for k, v in items) + "\n"


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() not in _BOOL_STRINGS:
            raise ConfigError(f"{key}: expected true/false, got {raw!r}")
        return _BOOL_STRINGS[raw.lower()]
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is tuple:
        if not raw:
            return ()
        return tuple(float(tok) for tok in raw.split(","))
    return raw


def parse_config_text(text: str, cls=RunConfig):
    """Parse ``key = value`` lines (# comments allowed) into ``cls``."""
    known = {f.name: f.type for f in fields(cls)}
    type_map = {
        f.name: type(getattr(cls(), f.name)) if getattr(cls(), f.name) is not None else str
        for f in fields(cls)
    }
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(raw, type_map[key], key)
    return cls(**values)


def load_config(path, cls=RunConfig):
    text = Path(path).read_text()
    try:
        return parse_config_text(text, cls)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def inference_settings(config: RunConfig):
    from .inference import InferenceSettings

    return InferenceSettings(
        rel_tol=config.rel_tol,
        max_iters=config.max_iters,
        cg_tol=config.cg_tol,
        sparsity_threshold=config.sparsity_threshold,
        sigma_mode=config.sigma_mode,
        inflate_prior_objective=config.inflate_prior_objective,
        threads=config.threads,
    )
