"""Run configuration: one flat namespace holding every pipeline tunable.

Config files are plain text, one `key = value` assignment per line, with
`#` starting a comment. Keys match the RunConfig field names exactly;
unknown keys are rejected so a typo cannot silently fall back to a default.
The same strings accepted in files are accepted as command-line overrides.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError

ORACLE_MODES = ("synthetic", "file")
ENHANCE_METHODS = ("fieldscale", "naive", "none")
GRID_FACTOR = 8  # working resolution to depth-grid downsampling


@dataclass
class RunConfig:
    # reproducibility
    seed: int = 0  # master seed for every random draw in the run
    deterministic: bool = False  # assert byte-identical reruns (same seed, same inputs)

    # thermal enhancement (raw counts -> [0, 1] intensity)
    enhance: str = "fieldscale"  # fieldscale | naive | none (linear full-range rescale)
    enhance_grid: int = 8  # fieldscale min/max field cells per axis
    enhance_pct_low: float = 1.0  # robust range percentiles per cell
    enhance_pct_high: float = 99.0
    enhance_passes: int = 10  # 4-neighbor smoothing rounds on the fields

    # working resolution; the depth grid is 1/8 of this
    width: int = 320
    height: int = 256

    # prediction oracles
    oracle: str = "synthetic"  # synthetic (ray-cast ground truth) | file (replayed PFMs)
    oracle_dir: str = ""  # file oracle root; required when oracle = file
    flow_sigma: float = 0.0  # synthetic flow noise, grid pixels
    mono_theta: float = 1.0  # synthetic mono prior true inverse-depth scale
    mono_gamma: float = 0.0  # synthetic mono prior true inverse-depth shift
    mono_sigma: float = 0.0  # synthetic mono prior inverse-depth noise

    # tracking and the covisibility graph
    tau: float = 2.4  # keyframe promotion threshold, mean grid-pixel flow
    max_edge_age: int = 24  # update steps before an edge may be pruned
    temporal_radius: int = 3  # keyframe ordinals linked on promotion

    # bundle adjustment / depth-scale refinement alternation
    kf_batch: int = 4  # new keyframes per backend alternation
    ba_rounds: int = 2  # alternation rounds per batch
    dba_steps: int = 4  # bundle adjustment steps per round
    dso_steps: int = 3  # depth refinement steps per round
    final_ba_rounds: int = 3  # alternation rounds after the last frame
    final_dba_steps: int = 8
    final_dso_steps: int = 5
    dso_eta: float = 0.05  # multi-view consistency radius, fraction of mean depth
    alpha1: float = 0.01  # prior weight on refined (high-error) pixels
    alpha2: float = 0.1  # prior weight anchoring the affine fit on low pixels

    # splat mapping
    loss_alpha: float = 0.2  # structural-similarity weight in the mapping loss
    loss_beta: float = 0.2  # depth-supervision weight in the mapping loss
    spawn_stride: int = 4  # pixel stride when seeding Gaussians from a keyframe
    window_overlap: float = 0.95  # keyframe joins mapping iff overlap below this
    mapping_window: int = 8  # most recent training keyframes optimized per join
    mapping_iters: int = 60  # optimizer iterations per joining keyframe
    final_mapping_iters: int = 400  # refinement iterations over all training keyframes
    densify_enabled: bool = True
    densify_grad_threshold: float = 0.0008  # mean absolute 2-D gradient trigger
    densify_interval: int = 100  # iterations between densify/prune sweeps
    densify_scale_split: float = 0.01  # clone-vs-split size boundary, fraction of extent
    densify_split_factor: float = 1.6  # child scale divisor on split
    prune_opacity: float = 0.05  # survivors keep opacity >= this
    prune_extent_scale: float = 0.1  # oversized-translucent bound, fraction of extent
    min_observations: int = 3  # distinct keyframes confirming a Gaussian
    observation_grace: int = 3  # keyframes of age before the rule applies
    lr_position: float = 1.6e-4  # Adam rate for centers, scaled by map extent
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_gray: float = 2.5e-3

    # evaluation
    eval_step: int = 5  # held-out view sampling stride over the sequence
    ate_max_dt: float = 0.02  # timestamp association cutoff, seconds

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.oracle not in ORACLE_MODES:
            raise ConfigError(f"oracle must be one of {ORACLE_MODES}, got {self.oracle!r}")
        if self.enhance not in ENHANCE_METHODS:
            raise ConfigError(f"enhance must be one of {ENHANCE_METHODS}, got {self.enhance!r}")
        if self.oracle == "file" and not self.oracle_dir:
            raise ConfigError("oracle_dir is required when oracle = file")
        for key in ("width", "height"):
            value = getattr(self, key)
            if value <= 0 or value % GRID_FACTOR != 0:
                raise ConfigError(f"{key} must be a positive multiple of {GRID_FACTOR}, got {value}")
        for key in (
            "enhance_grid",
            "enhance_passes",
            "max_edge_age",
            "temporal_radius",
            "kf_batch",
            "ba_rounds",
            "dba_steps",
            "dso_steps",
            "final_ba_rounds",
            "final_dba_steps",
            "final_dso_steps",
            "spawn_stride",
            "mapping_window",
            "densify_interval",
            "min_observations",
            "observation_grace",
            "eval_step",
        ):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be at least 1, got {getattr(self, key)}")
        for key in (
            "tau",
            "flow_sigma",
            "mono_sigma",
            "mapping_iters",
            "final_mapping_iters",
            "ate_max_dt",
        ):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative, got {getattr(self, key)}")
        for key in (
            "enhance_pct_low",
            "enhance_pct_high",
            "mono_theta",
            "dso_eta",
            "alpha1",
            "alpha2",
            "densify_grad_threshold",
            "densify_scale_split",
            "densify_split_factor",
            "prune_opacity",
            "prune_extent_scale",
            "lr_position",
            "lr_log_scale",
            "lr_rotation",
            "lr_opacity",
            "lr_gray",
        ):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if not self.enhance_pct_low < self.enhance_pct_high <= 100.0:
            raise ConfigError("enhancement percentiles must satisfy low < high <= 100")
        if not 0.0 < self.window_overlap <= 1.0:
            raise ConfigError(f"window_overlap must be in (0, 1], got {self.window_overlap}")
        if not 0.0 <= self.loss_alpha <= 1.0:
            raise ConfigError(f"loss_alpha must be in [0, 1], got {self.loss_alpha}")
        if self.loss_beta < 0:
            raise ConfigError(f"loss_beta must be nonnegative, got {self.loss_beta}")

    def grid_shape(self):
        """(rows, cols) of the reduced depth grid."""
        return self.height // GRID_FACTOR, self.width // GRID_FACTOR


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}

_TRUE_WORDS = {"1", "true", "yes", "on"}
_FALSE_WORDS = {"0", "false", "no", "off"}


def parse_value(key, text):
    """Convert one raw string to the key's field type."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"no such config key: {key}")
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if kind == "bool" or kind is bool:
        word = text.lower()
        if word in _TRUE_WORDS:
            return True
        if word in _FALSE_WORDS:
            return False
        raise ConfigError(f"{key} expects a boolean (true/false), got {text!r}")
    try:
        if kind == "int" or kind is int:
            return int(text)
        if kind == "float" or kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key} expects a {kind} value, got {text!r}") from None
    return text


def read_config_file(path):
    """Parse a key=value file into raw string assignments, preserving order."""
    assignments = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {body!r}")
        key, _, value = body.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: missing key before '='")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: no such config key: {key}")
        assignments[key] = value.strip()
    return assignments


def resolve_config(path=None, overrides=None):
    """Defaults, then the file, then overrides; returns a validated RunConfig.

    `overrides` is an ordered mapping of key -> raw string (later wins).
    """
    raw = {}
    if path is not None:
        raw.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"no such config key: {key}")
        raw[key] = value
    typed = {key: parse_value(key, str(value)) for key, value in raw.items()}
    return RunConfig(**typed)


def config_text(cfg):
    """Render the fully resolved config, parseable back via read_config_file."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
