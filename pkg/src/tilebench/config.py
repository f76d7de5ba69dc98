"""INI run configuration shared by every subcommand."""

from __future__ import annotations

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .core import Task
from .errors import ConfigError, UnsupportedSpec
from .nn import ArchitectureSpec, Family, Scale, toy_spec
from .preprocess import PreprocessConfig
from .train import AGGREGATORS, TrainConfig

SEED_ENV = "TILEBENCH_SEED"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


@dataclass
class RunConfig:
    task: Task = Task.MSI
    seed: int = 0
    threads: int = 1
    output_dir: Path = Path("out")
    train_manifest: Path | None = None
    test_manifest: Path | None = None
    tissue_scores: Path | None = None
    scores: Path | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: int = 5
    families: tuple[str, ...] = tuple(f.value for f in Family)
    forward_only: tuple[str, ...] = ()
    spec_files: tuple[Path, ...] = ()
    aggregation: str = "mean"
    selection: str = "best"
    tile_cap: int = 500
    min_tumor_prob: float | None = None
    n_bootstrap: int = 1000
    level: float = 0.95

    def specs(self) -> list[ArchitectureSpec]:
        specs = [toy_spec(f) for f in self.families]
        specs += [load_spec_file(p) for p in self.spec_files]
        return specs

    def echo(self) -> dict:
        """JSON-safe view of every setting, for run metadata."""
        def conv(v):
            if isinstance(v, Path):
                return str(v)
            if dataclasses.is_dataclass(v):
                return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
            if isinstance(v, (list, tuple)):
                return [conv(x) for x in v]
            if hasattr(v, "tolist"):
                return v.tolist()
            if isinstance(v, Task):
                return v.value
            return v
        d = conv(self)
        d["preprocess"].pop("reference_profile", None)
        return d


def _split(raw: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in raw.replace("\n", ",").split(",") if x.strip())


def _path(base: Path, raw: str | None) -> Path | None:
    if raw is None or raw.strip() == "":
        return None
    p = Path(raw.strip()).expanduser()
    return p if p.is_absolute() else base / p


_PRE_FIELDS = {f.name: f.type for f in dataclasses.fields(PreprocessConfig)
               if f.name != "reference_profile"}


def _typed(section: configparser.SectionProxy, key: str, kind):
    try:
        if kind in (int, "int"):
            return section.getint(key)
        if kind in (float, "float"):
            return section.getfloat(key)
        if kind in (bool, "bool"):
            return section.getboolean(key)
        return section.get(key)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from None


def load_run_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    """Parse an INI file (sections run, paths, preprocess, tissue, train, metrics)."""
    cp = configparser.ConfigParser()
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
    known = {"run", "paths", "preprocess", "tissue", "train", "metrics"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for s in known:
        if not cp.has_section(s):
            cp.add_section(s)
    run, paths, pre, tis, tr, met = (cp[s] for s in ("run", "paths", "preprocess", "tissue", "train", "metrics"))

    try:
        task = Task(run.get("task", "MSI"))
    except ValueError:
        raise ConfigError(f"[run] task must be one of {[t.value for t in Task]}") from None
    seed = _typed(run, "seed", int) if "seed" in run else default_seed()

    pre_kwargs = {}
    for key in pre:
        kind = _PRE_FIELDS.get(key)
        if kind is None:
            raise ConfigError(f"[preprocess] unknown key {key!r}")
        pre_kwargs[key] = _typed(pre, key, kind)
    pre_cfg = PreprocessConfig(**pre_kwargs)

    tr_kwargs = {"seed": seed}
    for key, kind in (("learning_rate", float), ("max_epochs", int), ("patience", int),
                      ("batch_size", int), ("beta1", float), ("beta2", float), ("eps", float)):
        if key in tr:
            tr_kwargs[key] = _typed(tr, key, kind)
    if tr.get("class_weights", "").strip():
        try:
            w = tuple(float(x) for x in _split(tr["class_weights"]))
        except ValueError:
            raise ConfigError("[train] class_weights must be two numbers") from None
        tr_kwargs["class_weights"] = w
    train_cfg = TrainConfig(**tr_kwargs)

    families = _split(tr.get("families", "")) or tuple(f.value for f in Family)
    forward_only = _split(tr.get("forward_only", ""))
    for name in families + forward_only:
        try:
            Family(name)
        except ValueError:
            raise ConfigError(f"[train] unknown family {name!r}") from None
    aggregation = tr.get("aggregation", "mean")
    if aggregation not in AGGREGATORS:
        raise ConfigError(f"[train] aggregation must be one of {AGGREGATORS}")
    selection = tr.get("selection", "best")
    if selection not in ("best", "ensemble"):
        raise ConfigError("[train] selection must be 'best' or 'ensemble'")

    min_prob = tis.get("min_tumor_prob", "").strip()
    cfg = RunConfig(
        task=task, seed=seed,
        threads=_typed(run, "threads", int) if "threads" in run else 1,
        output_dir=_path(base, run.get("output_dir", "out")),
        train_manifest=_path(base, paths.get("train_manifest")),
        test_manifest=_path(base, paths.get("test_manifest")),
        tissue_scores=_path(base, paths.get("tissue_scores")),
        scores=_path(base, paths.get("scores")),
        preprocess=pre_cfg, train=train_cfg,
        folds=_typed(tr, "folds", int) if "folds" in tr else 5,
        families=families, forward_only=forward_only,
        spec_files=tuple(_path(base, p) for p in _split(tr.get("spec_files", ""))),
        aggregation=aggregation, selection=selection,
        tile_cap=_typed(tis, "cap", int) if "cap" in tis else 500,
        min_tumor_prob=float(min_prob) if min_prob else None,
        n_bootstrap=_typed(met, "n_bootstrap", int) if "n_bootstrap" in met else 1000,
        level=_typed(met, "level", float) if "level" in met else 0.95,
    )
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    if cfg.seed != train_cfg.seed:
        cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.folds < 2:
        raise ConfigError("folds must be >= 2")
    if cfg.tile_cap < 1:
        raise ConfigError("[tissue] cap must be >= 1")
    if cfg.n_bootstrap < 1 or not 0 < cfg.level < 1:
        raise ConfigError("[metrics] n_bootstrap must be >= 1 and level in (0, 1)")
    for name in ("train_manifest", "test_manifest", "tissue_scores", "scores"):
        p = getattr(cfg, name)
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"{name} {p} does not exist")
    for p in cfg.spec_files:
        if not Path(p).is_file():
            raise ConfigError(f"spec file {p} does not exist")


# --- architecture spec files ---------------------------------------------------------

def dump_spec_file(spec: ArchitectureSpec) -> str:
    cp = configparser.ConfigParser()
    cp["architecture"] = {"family": spec.family.value, "scale": spec.scale.value,
                          "num_classes": str(spec.num_classes), "input_px": str(spec.input_px)}
    cp["params"] = {k: json.dumps(v) for k, v in spec.params.items()}
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in cp[section].items())
        lines.append("")
    return "\n".join(lines)


def load_spec_file(path: str | os.PathLike) -> ArchitectureSpec:
    """Architecture spec in INI form: [architecture] scalars, [params] JSON values."""
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path, encoding="utf-8"):
            raise ConfigError(f"spec file {path} not found")
        arch = cp["architecture"]
        params = {k: json.loads(v) for k, v in cp["params"].items()} if cp.has_section("params") else {}
        return ArchitectureSpec(Family(arch["family"]), Scale(arch.get("scale", "toy")),
                                arch.getint("num_classes", 2), arch.getint("input_px", 224), params)
    except (KeyError, ValueError, json.JSONDecodeError, configparser.Error, UnsupportedSpec) as exc:
        raise ConfigError(f"{path}: bad spec file ({exc})") from None
