"""Run configuration: ``key = value`` files with command-line overrides."""

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import PbpConfig
from .pcgeom import SYNTHETIC_NUM_CLASSES
from .planeops import MODES, PlaneId

DATASETS = tuple(SYNTHETIC_NUM_CLASSES) + ("text", "shapenet")
ABLATION_GRIDS = ("full", "stages", "planes")


@dataclass(frozen=True)
class RunConfig:
    # model
    num_classes: int = 0  # 0: take the dataset's class count
    resolution: int = 64
    planes: str = "XY,YZ,ZX"
    use_tnet: bool = True
    use_multiscale: bool = True
    use_additional: bool = True
    shallow_feat_dim: int = 16
    additional_feat_dim: int = 32
    shared_backbone: bool = True
    detach_coords: bool = False
    accumulation: str = "ordered"
    # data
    dataset: str = "z_halves"
    data_path: str = ""
    category: str = ""
    train_clouds: int = 32
    test_clouds: int = 8
    eval_split: str = "test"
    points_per_cloud: int = 2048
    # optimisation
    epochs: int = 200
    batch_size: int = 8
    lr: float = 0.001
    lr_decay: float = 0.5
    lr_decay_step: int = 200000
    seed: int = 0
    deterministic: bool = True
    # outputs
    checkpoint: str = "pbpnet.ckpt"
    log: str = ""
    report: str = ""
    ablate_grid: str = "full"

    def __post_init__(self):
        checks = [
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("lr", self.lr > 0, "must be > 0"),
            ("lr_decay", 0 < self.lr_decay <= 1, "must lie in (0, 1]"),
            ("lr_decay_step", self.lr_decay_step >= 1, "must be >= 1"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("points_per_cloud", self.points_per_cloud >= 1, "must be >= 1"),
            ("num_classes", self.num_classes >= 0, "must be >= 0"),
            ("resolution", self.resolution >= 4 and self.resolution % 4 == 0,
             "must be a multiple of 4 and >= 4"),
            ("shallow_feat_dim", self.shallow_feat_dim >= 1, "must be >= 1"),
            ("additional_feat_dim", self.additional_feat_dim >= 1, "must be >= 1"),
            ("train_clouds", self.train_clouds >= 1, "must be >= 1"),
            ("test_clouds", self.test_clouds >= 1, "must be >= 1"),
            ("dataset", self.dataset in DATASETS, f"must be one of {DATASETS}"),
            ("accumulation", self.accumulation in MODES, f"must be one of {MODES}"),
            ("eval_split", self.eval_split in ("train", "test", "val", "all"),
             "must be train, test, val or all"),
            ("ablate_grid", self.ablate_grid in ABLATION_GRIDS, f"must be one of {ABLATION_GRIDS}"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(key, f"{message} (got {getattr(self, key)!r})")
        try:
            planes = [PlaneId.parse(p) for p in self.plane_names]
        except ValueError as exc:
            raise ConfigError("planes", str(exc)) from None
        if not planes or len(set(planes)) != len(planes):
            raise ConfigError("planes", f"need one or more distinct planes (got {self.planes!r})")
        if self.deterministic and self.accumulation == "parallel":
            raise ConfigError("accumulation", "parallel accumulation is not allowed in deterministic mode")
        if self.dataset in ("text", "shapenet") and not self.data_path:
            raise ConfigError("data_path", f"required for dataset {self.dataset}")

    @property
    def plane_names(self):
        return tuple(p.strip() for p in self.planes.split(",") if p.strip())

    def resolved_num_classes(self):
        if self.num_classes:
            return self.num_classes
        if self.dataset in SYNTHETIC_NUM_CLASSES:
            return SYNTHETIC_NUM_CLASSES[self.dataset]
        if self.dataset == "shapenet":
            return 50
        raise ConfigError("num_classes", "must be set for text datasets")

    def model_config(self):
        return PbpConfig(
            num_classes=self.resolved_num_classes(),
            resolution=self.resolution,
            planes=self.plane_names,
            use_tnet=self.use_tnet,
            use_multiscale=self.use_multiscale,
            use_additional=self.use_additional,
            shallow_feat_dim=self.shallow_feat_dim,
            additional_feat_dim=self.additional_feat_dim,
            shared_backbone=self.shared_backbone,
            detach_coords=self.detach_coords,
            accumulation=self.accumulation,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(key, text):
    if key not in _FIELDS:
        raise ConfigError(key, "unknown key")
    kind = _FIELDS[key].type
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
    text = text.strip()
    if kind is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ConfigError(key, f"expected a boolean, got {text!r}")
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {text!r}") from None
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {text!r}") from None
    return text


def _split_assignment(line, where):
    if "=" not in line:
        raise ConfigError(None, f"{where}: expected 'key = value', got {line!r}")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


def parse_config(path=None, overrides=()):
    """Build a validated :class:`RunConfig`.

    ``path`` names a file of ``key = value`` lines (``#`` starts a comment);
    ``overrides`` is an iterable of ``key=value`` strings applied afterwards.
    A missing file raises :class:`FileNotFoundError`.
    """
    values = {}
    if path is not None:
        text = Path(path).read_text()
        for line_no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, value = _split_assignment(line, f"{path}:{line_no}")
            values[key] = _convert(key, value)
    for item in overrides:
        key, value = _split_assignment(item, "--set")
        values[key] = _convert(key, value)
    return RunConfig(**values)
