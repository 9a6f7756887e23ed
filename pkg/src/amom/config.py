"""Flat dotted-key experiment configuration.

A config is a key=value text file plus command-line overrides; unknown
keys are rejected and every run echoes its fully resolved config.
"""

from dataclasses import dataclass

from .data import SYNTHETIC_TASKS
from .masking import CONVENTIONS, MAPPING_KINDS, SECOND_PASS_STRATEGIES


class ConfigError(ValueError):
    """Bad configuration (CLI maps these to exit code 2)."""


# key -> (default, type); bool/int/float/str coerced from text
DEFAULTS: dict[str, tuple] = {
    "seed": (1, int),
    # data: either a synthetic task or explicit corpus files
    "data.task": ("", str),
    "data.vocab_size": (32, int),
    "data.len_min": (4, int),
    "data.len_max": (16, int),
    "data.pairs": (20000, int),
    "data.valid_pairs": (200, int),
    "data.test_pairs": (1000, int),
    "data.seed": (7, int),
    "data.ambiguity_rate": (1.0, float),
    "data.src": ("", str),
    "data.tgt": ("", str),
    "data.valid_src": ("", str),
    "data.valid_tgt": ("", str),
    "data.vocab": ("", str),
    # model: preset plus optional overrides (0 / -1 = keep preset value)
    "model.preset": ("toy", str),
    "model.vocab_size": (0, int),
    "model.d_model": (0, int),
    "model.n_heads": (0, int),
    "model.d_ffn": (0, int),
    "model.n_enc_layers": (0, int),
    "model.n_dec_layers": (0, int),
    "model.dropout": (-1.0, float),
    "model.max_positions": (0, int),
    "model.max_length_class": (0, int),
    # masking policy
    "masking.phi.kind": ("linear", str),
    "masking.phi.a": (0.3, float),
    "masking.phi.b": (0.1, float),
    "masking.psi.kind": ("linear", str),
    "masking.psi.a": (0.2, float),
    "masking.psi.b": (0.8, float),
    "masking.second_pass": ("adaptive", str),
    "masking.n_refine_passes": (2, int),
    "masking.same_ratio": (False, bool),
    "masking.use_ground_truth_obs": (False, bool),
    "masking.confidence_based": (False, bool),
    "masking.psi_convention": ("main_text", str),
    # training
    "train.ar_mode": (False, bool),
    "train.max_updates": (3000, int),
    "train.tokens_per_batch": (1024, int),
    "train.base_lr": (5e-4, float),
    "train.warmup": (400, int),
    "train.label_smoothing": (0.1, float),
    "train.length_loss_weight": (0.1, float),
    "train.clip_norm": (2.5, float),
    "train.valid_interval": (500, int),
    "train.average_best": (5, int),
    # decoding
    "decode.checkpoint": ("", str),
    "decode.iterations": (10, int),
    "decode.length_beam": (3, int),
    "decode.dedup": (False, bool),
    "decode.max_output_length": (64, int),
    "decode.batch_size": (64, int),
    "decode.jsonl": (False, bool),
    "decode.input": ("", str),
    # distillation
    "distill.checkpoint": ("", str),
    "distill.combine": (False, bool),
    "distill.max_output_length": (64, int),
    # evaluation
    "evaluate.hyps": ("", str),
    "evaluate.refs": ("", str),
    "evaluate.sources": ("", str),
    "evaluate.buckets": ("8,12,16", str),
    # masking analysis
    "analyze.convention": ("appendix", str),
    "analyze.trials": (100000, int),
    "analyze.length": (100, int),
    "analyze.grid": ("0.0:1.0:0.1", str),
    # mapping sweep
    "sweep.target": ("phi", str),
    "sweep.grid": ("linear:0.3:0.1,convex:0.3:0.1,concave:0.3:0.1", str),
    "sweep.max_updates": (800, int),
    # latency
    "latency.checkpoint": ("", str),
    "latency.ar_checkpoint": ("", str),
    "latency.iterations": ("1,4,10", str),
    "latency.sample": (100, int),
    "latency.warmup": (3, int),
}

_ENUMS = {
    "data.task": ("",) + SYNTHETIC_TASKS,
    "model.preset": ("toy", "small"),
    "masking.phi.kind": MAPPING_KINDS,
    "masking.psi.kind": MAPPING_KINDS,
    "masking.second_pass": SECOND_PASS_STRATEGIES,
    "masking.psi_convention": CONVENTIONS,
    "analyze.convention": CONVENTIONS,
    "sweep.target": ("phi", "psi"),
}


def _coerce(key: str, raw: str):
    _, typ = DEFAULTS[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"config key '{key}' expects {typ.__name__}, got {raw!r}") from None


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def resolved_text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in sorted(self.values))


def parse_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    """File values, overridden left-to-right by key=value strings."""
    values = {k: d for k, (d, _) in DEFAULTS.items()}

    def apply(key: str, raw: str, where: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key '{key}' ({where})")
        values[key] = _coerce(key, raw)

    if path:
        try:
            with open(path, encoding="utf-8") as f:
                lines = f.readlines()
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err}") from None
        for lineno, line in enumerate(lines, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, raw = stripped.split("=", 1)
            apply(key.strip(), raw, f"{path}:{lineno}")

    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"--set expects key=value, got {ov!r}")
        key, raw = ov.split("=", 1)
        apply(key.strip(), raw, "--set")

    for key, allowed in _ENUMS.items():
        if values[key] not in allowed:
            raise ConfigError(f"config key '{key}' must be one of {allowed}, got {values[key]!r}")
    return ExperimentConfig(values)
