"""YAML run configuration with field-path validation.

Matching keys use the hyperparameter-table vocabulary: ``N_S``, ``N_T``,
``max_start_epoch``, ``lr_img``, ``lr_sc``, ``lr`` (initial student step
size) and ``zca``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .datasets import DatasetError, DatasetSpec
from .engine import MatchConfig
from .nn import Architecture

ENV_DATA_DIR = "ATT_DATA_DIR"

_DATASET_KEYS = {
    "name", "split_seed", "train_fraction", "normalization", "n_samples", "input_dim",
    "noise", "images_path", "labels_path", "zca_epsilon",
}
_ARCH_KEYS = {"kind", "input_dim", "hidden_dim", "num_classes", "activation"}
_EXPERT_KEYS = {"count", "epochs", "step_size", "batch_size", "seed"}
_MATCH_KEYS = {
    "mode", "N_S", "N_T", "max_start_epoch", "lr_img", "lr_sc", "lr", "zca", "ipc",
    "iterations", "gamma", "init", "seed", "momentum",
}
_EVAL_KEYS = {"archs", "n_seeds", "train_steps", "use_learned_lr", "lr_override"}
_PATH_KEYS = {"buffer", "synth_out", "report_out"}
_TOP_KEYS = {"name", "dataset", "arch", "experts", "match", "eval", "paths"}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ExpertSettings:
    count: int = 20
    epochs: int = 10
    step_size: float = 0.05
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class EvalSettings:
    archs: tuple
    n_seeds: int = 5
    train_steps: int = 300
    use_learned_lr: bool = True
    lr_override: float | None = None


@dataclass(frozen=True)
class Paths:
    buffer: str = "buffer.attb"
    synth_out: str = "synth-{mode}.atts"
    report_out: str = "report-{mode}.jsonl"


@dataclass(frozen=True)
class RunConfig:
    name: str
    dataset: DatasetSpec
    arch: Architecture
    experts: ExpertSettings
    match: MatchConfig
    eval: EvalSettings
    paths: Paths = field(default_factory=Paths)

    def digest(self) -> str:
        """Hash of everything except the match seed and mode.

        The seed is named separately in run dirs; the mode is part of the
        output file names, so ATT and FTL runs share one directory and buffer.
        """
        d = {
            "dataset": asdict(self.dataset),
            "arch": self.arch.to_dict(),
            "experts": asdict(self.experts),
            "match": {k: v for k, v in asdict(self.match).items() if k not in ("seed", "mode")},
            "eval": {**asdict(self.eval), "archs": [a.to_dict() for a in self.eval.archs]},
        }
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self, root=None) -> Path:
        root = Path(root or os.environ.get(ENV_DATA_DIR, "runs"))
        return root / f"{self.name}-{self.digest()}-s{self.match.seed}"

    def resolve(self, which: str, run_dir: Path) -> Path:
        template = getattr(self.paths, which)
        return run_dir / template.format(mode=self.match.mode)


def _section(raw, key, allowed, required=False):
    val = raw.get(key)
    if val is None:
        if required:
            raise ConfigError(key, "section is required")
        return {}
    if not isinstance(val, dict):
        raise ConfigError(key, "must be a mapping")
    unknown = set(val) - allowed
    if unknown:
        raise ConfigError(f"{key}.{sorted(unknown)[0]}", "unknown key")
    return val


def _typed(section, path, key, kind, default=None):
    if key not in section:
        return default
    v = section[key]
    full = f"{path}.{key}"
    if kind is bool:
        if not isinstance(v, bool):
            raise ConfigError(full, f"expected true/false, got {v!r}")
        return v
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(full, f"expected an integer, got {v!r}")
        return v
    if kind is float:
        if isinstance(v, bool):
            raise ConfigError(full, f"expected a number, got {v!r}")
        try:
            return float(v)
        except (TypeError, ValueError):
            raise ConfigError(full, f"expected a number, got {v!r}") from None
    if not isinstance(v, str):
        raise ConfigError(full, f"expected a string, got {v!r}")
    return v


def _build(path, ctor, **kwargs):
    kwargs = {k: v for k, v in kwargs.items() if v is not None}
    try:
        return ctor(**kwargs)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from None


def _parse_arch(sec, path) -> Architecture:
    unknown = set(sec) - _ARCH_KEYS
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    for req in ("kind", "input_dim", "num_classes"):
        if req not in sec:
            raise ConfigError(f"{path}.{req}", "is required")
    return _build(
        path,
        Architecture,
        kind=_typed(sec, path, "kind", str).lower(),
        input_dim=_typed(sec, path, "input_dim", int),
        num_classes=_typed(sec, path, "num_classes", int),
        hidden_dim=_typed(sec, path, "hidden_dim", int, 0),
        activation=_typed(sec, path, "activation", str, "relu"),
    )


def dataset_shape(spec: DatasetSpec):
    """``(input_dim, num_classes)`` without generating the data where possible."""
    if spec.name == "blobs3":
        return spec.input_dim, 3
    if spec.name == "moons2":
        return 2, 2
    if spec.name == "digits8x8":
        return 64, 10
    from .datasets import IDX_IMAGES_MAGIC, IdxFormatError, read_idx

    for p in (spec.images_path, spec.labels_path):
        if not Path(p).is_file():
            raise ConfigError("dataset.images_path" if p == spec.images_path else "dataset.labels_path",
                              f"file not found: {p}")
    # a missing file is a config mistake; malformed content is a format error
    with open(spec.images_path, "rb") as f:
        raw = f.read(16)
    if len(raw) < 16 or struct.unpack(">I", raw[:4])[0] != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{spec.images_path}: not a 3-d IDX image file")
    rows, cols = struct.unpack(">II", raw[8:16])
    labels = read_idx(spec.labels_path)
    return rows * cols, int(labels.max()) + 1


def parse_config(raw: dict, name: str = "run", seed: int | None = None, mode: str | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    name = str(raw.get("name", name))

    m = _section(raw, "match", _MATCH_KEYS, required=True)
    zca = _typed(m, "match", "zca", bool, False)

    d = _section(raw, "dataset", _DATASET_KEYS, required=True)
    if "name" not in d:
        raise ConfigError("dataset.name", "is required")
    try:
        dataset = DatasetSpec(
            name=_typed(d, "dataset", "name", str),
            split_seed=_typed(d, "dataset", "split_seed", int, 0),
            train_fraction=_typed(d, "dataset", "train_fraction", float, 0.8),
            zca=zca,
            normalization=_typed(d, "dataset", "normalization", str, "none"),
            n_samples=_typed(d, "dataset", "n_samples", int, 600),
            input_dim=_typed(d, "dataset", "input_dim", int, 2),
            noise=_typed(d, "dataset", "noise", float),
            images_path=_typed(d, "dataset", "images_path", str),
            labels_path=_typed(d, "dataset", "labels_path", str),
            zca_epsilon=_typed(d, "dataset", "zca_epsilon", float, 1e-6),
        )
    except DatasetError as exc:
        raise ConfigError("dataset", str(exc)) from None

    arch = _parse_arch(_section(raw, "arch", _ARCH_KEYS, required=True), "arch")

    e = _section(raw, "experts", _EXPERT_KEYS)
    experts = _build(
        "experts",
        ExpertSettings,
        count=_typed(e, "experts", "count", int),
        epochs=_typed(e, "experts", "epochs", int),
        step_size=_typed(e, "experts", "step_size", float),
        batch_size=_typed(e, "experts", "batch_size", int),
        seed=_typed(e, "experts", "seed", int),
    )
    if experts.count < 1:
        raise ConfigError("experts.count", "must be >= 1")
    if experts.epochs < 1:
        raise ConfigError("experts.epochs", "must be >= 1")
    if experts.step_size <= 0:
        raise ConfigError("experts.step_size", "must be positive")
    if experts.batch_size < 1:
        raise ConfigError("experts.batch_size", "must be >= 1")

    match_mode = mode or _typed(m, "match", "mode", str, "att")
    match = _build(
        "match",
        MatchConfig,
        mode=match_mode.lower(),
        n_s=_typed(m, "match", "N_S", int),
        n_t=_typed(m, "match", "N_T", int),
        max_start_epoch=_typed(m, "match", "max_start_epoch", int),
        lr_img=_typed(m, "match", "lr_img", float),
        lr_sc=_typed(m, "match", "lr_sc", float),
        lr_init=_typed(m, "match", "lr", float),
        iterations=_typed(m, "match", "iterations", int),
        gamma=_typed(m, "match", "gamma", int),
        ipc=_typed(m, "match", "ipc", int),
        zca=zca,
        seed=seed if seed is not None else _typed(m, "match", "seed", int),
        init_mode=_typed(m, "match", "init", str),
        momentum=_typed(m, "match", "momentum", float),
    )

    ev = _section(raw, "eval", _EVAL_KEYS)
    archs_raw = ev.get("archs") or [arch.to_dict()]
    if not isinstance(archs_raw, list):
        raise ConfigError("eval.archs", "must be a list")
    eval_archs = tuple(_parse_arch(a if isinstance(a, dict) else {}, f"eval.archs[{i}]") for i, a in enumerate(archs_raw))
    eval_settings = EvalSettings(
        archs=eval_archs,
        n_seeds=_typed(ev, "eval", "n_seeds", int, 5),
        train_steps=_typed(ev, "eval", "train_steps", int, 300),
        use_learned_lr=_typed(ev, "eval", "use_learned_lr", bool, True),
        lr_override=_typed(ev, "eval", "lr_override", float),
    )
    if eval_settings.n_seeds < 1:
        raise ConfigError("eval.n_seeds", "must be >= 1")
    if eval_settings.train_steps < 1:
        raise ConfigError("eval.train_steps", "must be >= 1")
    if not eval_settings.use_learned_lr and not eval_settings.lr_override:
        raise ConfigError("eval.lr_override", "required when use_learned_lr is false")

    p = _section(raw, "paths", _PATH_KEYS)
    paths = Paths(**{k: _typed(p, "paths", k, str) for k in p})

    cfg = RunConfig(name, dataset, arch, experts, match, eval_settings, paths)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-field checks that need more than one section."""
    d_in, k = dataset_shape(cfg.dataset)
    for path, a in [("arch", cfg.arch)] + [(f"eval.archs[{i}]", a) for i, a in enumerate(cfg.eval.archs)]:
        if a.input_dim != d_in:
            raise ConfigError(f"{path}.input_dim", f"{a.input_dim} does not match dataset feature count {d_in}")
        if a.num_classes != k:
            raise ConfigError(f"{path}.num_classes", f"{a.num_classes} does not match dataset class count {k}")
    need = cfg.match.max_start_epoch + cfg.match.n_t
    if cfg.experts.epochs < need:
        raise ConfigError("experts.epochs", f"M={cfg.experts.epochs} is less than max_start_epoch + N_T = {need}")


def load_config(path, seed: int | None = None, mode: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from None
    return parse_config(raw, name=path.stem, seed=seed, mode=mode)


def shipped_config_path(name: str) -> Path:
    """Path of a bundled example config, e.g. ``blobs3-ipc1``."""
    p = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not p.is_file():
        raise FileNotFoundError(name)
    return p


def shipped_configs() -> list:
    return sorted(p.stem for p in (Path(__file__).parent / "configs").glob("*.yaml"))
