"""Experiment configuration: a sectioned key-value text file.

Example::

    [paths]
    corpus = corpus
    checkpoint = model.ckpt

    [network]
    variant = sub_region
    filters = 8, 16, 32, 64

    [train]
    n = 5
    learning_rate = 0.01

Relative paths resolve against the config file's directory. Keys are
case-insensitive; unknown sections or keys are errors reported with their
line number. Every hyperparameter defaults to the value used in the
original protocol where one is given.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, ScriptorError
from .models import CHAR_LEVEL, NetworkSpec
from .preprocess import PatchExtractionConfig
from .synthdata import SynthCorpusSpec
from .train import SweepGrid, TrainingConfig


def _int(v: str) -> int:
    return int(v)


def _opt_int(v: str) -> int | None:
    return None if v.strip().lower() in ("", "none") else int(v)


def _float(v: str) -> float:
    return float(v)


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in ("", "none") else float(v)


def _str(v: str) -> str:
    return v.strip()


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in re.split(r"[,\s]+", v.strip()) if x)


def _opt_ints(v: str) -> tuple[int | None, ...]:
    return tuple(_opt_int(x) for x in re.split(r"[,\s]+", v.strip()) if x)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in re.split(r"[,\s]+", v.strip()) if x)


def _strs(v: str) -> tuple[str, ...]:
    return tuple(x for x in re.split(r"[,\s]+", v.strip()) if x)


# section -> key -> parser
SCHEMA = {
    "paths": {
        "corpus": _str, "pages": _str, "patches": _str, "checkpoint": _str,
        "train_manifest": _str, "val_manifest": _str, "test_manifest": _str,
    },
    "synth": {
        "writers": _int, "patches_per_writer": _int, "vocabulary": _int,
        "seed": _int, "splits": _floats,
    },
    "preprocess": {
        "n_sub_img": _int, "k_sub_img": _int, "filter_window": _int, "seed": _int,
    },
    "network": {
        "variant": _str, "filters": _ints, "kernel": _int, "pad": _int,
        "stride": _int, "pool": _int, "fc_width": _opt_int,
    },
    "train": {
        "aggregation": _str, "k": _opt_int, "n": _int, "p": _int,
        "learning_rate": _float, "momentum": _float, "clip_norm": _opt_float,
        "patience": _int, "max_epochs": _int, "seed": _int,
    },
    "eval": {
        "n": _opt_int, "trials": _int, "k_list": _ints, "t": _int,
        "fusion": _str, "seed": _int, "experiment": _str,
    },
    "sweep": {
        "n": _ints, "n_s": _opt_ints, "writers": _opt_ints,
        "aggregation": _strs, "k": _opt_ints, "retrain": _bool,
    },
}


@dataclass(frozen=True)
class Paths:
    corpus: Path | None = None
    pages: Path | None = None
    patches: Path | None = None
    checkpoint: Path | None = None
    train_manifest: Path | None = None
    val_manifest: Path | None = None
    test_manifest: Path | None = None

    def manifest(self, split: str) -> Path | None:
        explicit = getattr(self, f"{split}_manifest")
        if explicit is not None:
            return explicit
        if self.corpus is not None:
            return self.corpus / split / "manifest.tsv"
        return None


@dataclass(frozen=True)
class EvalConfig:
    n: int | None = None
    trials: int = 20
    k_list: tuple[int, ...] = (1, 5, 10)
    t: int = 1
    fusion: str = "mean"
    seed: int = 0
    experiment: str = "eval"


@dataclass(frozen=True)
class SweepConfig:
    grid: SweepGrid
    retrain: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    source: Path | None = None
    paths: Paths = field(default_factory=Paths)
    synth: SynthCorpusSpec = field(default_factory=SynthCorpusSpec)
    preprocess: PatchExtractionConfig = field(default_factory=PatchExtractionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig | None = None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override every seed (corpus, sampling, training, evaluation) with one master seed."""
        return replace(
            self,
            synth=replace(self.synth, seed=seed),
            preprocess=replace(self.preprocess, seed=seed),
            training=replace(self.training, seed=seed),
            eval=replace(self.eval, seed=seed),
        )

    def require(self, *names: str) -> None:
        """Check that the named path fields are set and exist on disk."""
        for name in names:
            value = getattr(self.paths, name, None)
            if name.endswith("_manifest"):
                value = self.paths.manifest(name[: -len("_manifest")])
            if value is None:
                raise ConfigError(f"[paths] {name} is required for this command")
            if not Path(value).exists():
                raise ConfigError(f"[paths] {name}: {value} does not exist")


def _key_lines(text: str) -> dict[tuple[str, str | None], int]:
    """Line number of every section header and key, for error messages."""
    lines: dict[tuple[str, str | None], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            lines.setdefault((section, None), no)
        elif section is not None:
            key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
            lines.setdefault((section, key), no)
    return lines


def parse_config(text: str, base_dir: Path | None = None, source: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(source or "<config>"))
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", exc.lineno) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", lineno) from exc

    where = _key_lines(text)
    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        sec = section.lower()
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", where.get((sec, None)))
        values[sec] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", where.get((sec, key)))
            try:
                values[sec][key] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r} in [{sec}]: {exc}", where.get((sec, key))) from exc

    try:
        return _build(values, base_dir or Path.cwd(), source)
    except ScriptorError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, path.resolve().parent, path)


def _build(values: dict, base: Path, source: Path | None) -> ExperimentConfig:
    paths = Paths(**{k: (base / v) for k, v in values.get("paths", {}).items()})

    s = values.get("synth", {})
    synth_kw = {"num_writers" if k == "writers" else k: v for k, v in s.items()}
    synth = SynthCorpusSpec(**synth_kw)

    prep = PatchExtractionConfig(**values.get("preprocess", {}))

    net = values.get("network", {})
    variant = net.get("variant", "sub_region")
    default = NetworkSpec.char_level() if variant == CHAR_LEVEL else NetworkSpec.sub_region()
    spec = NetworkSpec(
        variant=variant,
        block_filters=net.get("filters", default.block_filters),
        kernel=net.get("kernel", default.kernel),
        pad=net.get("pad", default.pad),
        conv_stride=net.get("stride", default.conv_stride),
        pool=net.get("pool", default.pool),
        fc_width=net.get("fc_width", default.fc_width),
    )

    training = TrainingConfig(spec=spec, **values.get("train", {}))

    ev = values.get("eval", {})
    evc = EvalConfig(**ev)

    sweep = None
    if "sweep" in values:
        sw = dict(values["sweep"])
        retrain = sw.pop("retrain", True)
        grid_fields = {f.name for f in fields(SweepGrid)}
        grid_kw = {"n": (training.n,), "aggregation": (training.aggregation,), "k": (training.k,)}
        grid_kw.update({k: v for k, v in sw.items() if k in grid_fields})
        grid = SweepGrid(**grid_kw)
        sweep = SweepConfig(grid, retrain)

    return ExperimentConfig(source, paths, synth, prep, training, evc, sweep)
