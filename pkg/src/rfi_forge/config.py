"""Line-based ``key = value`` config files with ``[section]`` headers.

Human-diffable and strictly validated: unknown sections or keys are
rejected with explicit messages.
"""

from __future__ import annotations

from dataclasses import dataclass

from .datasets import DEFAULT_KINDS, DatasetSpec, ScenarioSpec, SENSORS
from .difnet import NetConfig
from .signal_model import RfiKind
from .suppression import PipelineConfig
from .timefreq import StftSpec


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    """Parse into {section: {key: value-string}}; '#' starts a comment."""
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not current:
                raise ConfigError(f"line {lineno}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = val
    return sections


def parse_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config_text(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _take(section: dict, name: str, key: str, conv, default):
    if key not in section:
        if default is _REQUIRED:
            raise ConfigError(f"[{name}] missing required key {key!r}")
        return default
    raw = section.pop(key)
    try:
        return conv(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] bad value for {key!r}: {raw!r} ({e})") from e


_REQUIRED = object()


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _csv(s: str) -> tuple:
    return tuple(part.strip() for part in s.split(",") if part.strip())


def _kinds(s: str) -> tuple:
    out = []
    for name in _csv(s):
        try:
            out.append(RfiKind[name])
        except KeyError:
            raise ValueError(f"unknown RFI kind {name!r}")
    return tuple(out)


def _reject_leftovers(section: dict, name: str):
    if section:
        raise ConfigError(f"[{name}] unknown key(s): {sorted(section)}")


@dataclass(frozen=True)
class RunConfig:
    """Validated bundle of everything the commands need."""

    seed: int
    dataset: DatasetSpec
    net: NetConfig
    epochs: int
    lr: float
    batch_size: int
    val_fraction: float
    loss_mode: str
    pipeline_stft: StftSpec
    detector_threshold: float
    notch_k_sigma: float
    use_oracle_mask: bool
    dyn_range_db: float
    oracle_margin: float
    scenario: ScenarioSpec


_KNOWN_SECTIONS = ("run", "stft", "dataset", "net", "train", "pipeline", "scenario")


def load_run_config(path: str) -> RunConfig:
    sections = parse_config_file(path)
    for name in sections:
        if name not in _KNOWN_SECTIONS:
            raise ConfigError(f"unknown section [{name}]; known: {_KNOWN_SECTIONS}")
    sec = {name: dict(sections.get(name, {})) for name in _KNOWN_SECTIONS}

    run = sec["run"]
    seed = _take(run, "run", "seed", int, 0)
    _reject_leftovers(run, "run")

    st = sec["stft"]
    try:
        stft = StftSpec(win_len=_take(st, "stft", "win_len", int, 128),
                        hop=_take(st, "stft", "hop", int, 64),
                        fft_len=_take(st, "stft", "fft_len", int, 128),
                        window=_take(st, "stft", "window", str, "HANN"))
    except ValueError as e:
        raise ConfigError(f"[stft] {e}") from e
    _reject_leftovers(st, "stft")

    ds = sec["dataset"]
    try:
        dataset = DatasetSpec(
            count=_take(ds, "dataset", "count", int, 200),
            height=_take(ds, "dataset", "height", int, 128),
            width=_take(ds, "dataset", "width", int, 128),
            sensors=_take(ds, "dataset", "sensors", _csv, ("A",)),
            kinds=_take(ds, "dataset", "rfi_kinds", _kinds, DEFAULT_KINDS),
            sir_db_min=_take(ds, "dataset", "sir_db_min", float, -25.0),
            sir_db_max=_take(ds, "dataset", "sir_db_max", float, -5.0),
            stft=stft,
            dyn_range_db=_take(ds, "dataset", "dyn_range_db", float, 60.0),
            oracle_margin=_take(ds, "dataset", "oracle_margin", float, 1.0),
            noise_sigma=_take(ds, "dataset", "noise_sigma", float, 0.05))
    except ValueError as e:
        raise ConfigError(f"[dataset] {e}") from e
    _reject_leftovers(ds, "dataset")

    nt = sec["net"]
    try:
        net = NetConfig(
            base_channels=_take(nt, "net", "base_channels", int, 16),
            depth=_take(nt, "net", "depth", int, 2),
            win_size=_take(nt, "net", "win_size", int, 8),
            heads_per_stage=_take(nt, "net", "heads_per_stage",
                                  lambda s: tuple(int(x) for x in _csv(s)), (2, 4)),
            blocks_per_stage=_take(nt, "net", "blocks_per_stage", int, 2),
            leff_hidden_ratio=_take(nt, "net", "leff_hidden_ratio", float, 4.0),
            eps_loss=_take(nt, "net", "eps_loss", float, 0.3),
            threshold=_take(nt, "net", "threshold", float, 0.5))
    except ValueError as e:
        raise ConfigError(f"[net] {e}") from e
    _reject_leftovers(nt, "net")

    tr = sec["train"]
    epochs = _take(tr, "train", "epochs", int, 30)
    lr = _take(tr, "train", "lr", float, 1e-3)
    batch_size = _take(tr, "train", "batch_size", int, 8)
    val_fraction = _take(tr, "train", "val_fraction", float, 0.2)
    loss_mode = _take(tr, "train", "loss_mode", str, "mask")
    if loss_mode not in ("mask", "magnitude"):
        raise ConfigError(f"[train] loss_mode must be 'mask' or 'magnitude', got {loss_mode!r}")
    if epochs < 1 or batch_size < 1 or lr <= 0 or not (0 <= val_fraction < 1):
        raise ConfigError("[train] epochs/batch_size >= 1, lr > 0, val_fraction in [0,1)")
    _reject_leftovers(tr, "train")

    pl = sec["pipeline"]
    detector_threshold = _take(pl, "pipeline", "detector_threshold", float, 10.0)
    notch_k_sigma = _take(pl, "pipeline", "notch_k_sigma", float, 3.0)
    use_oracle_mask = _take(pl, "pipeline", "use_oracle_mask", _bool, False)
    dyn_range_db = _take(pl, "pipeline", "dyn_range_db", float, 60.0)
    oracle_margin = _take(pl, "pipeline", "oracle_margin", float, 1.0)
    _reject_leftovers(pl, "pipeline")

    sc = sec["scenario"]
    sensor = _take(sc, "scenario", "sensor", str, "A")
    if sensor not in SENSORS:
        raise ConfigError(f"[scenario] unknown sensor {sensor!r}")
    kind_name = _take(sc, "scenario", "kind", str, "NBI")
    try:
        kind = RfiKind[kind_name]
    except KeyError:
        raise ConfigError(f"[scenario] unknown RFI kind {kind_name!r}")
    try:
        scenario = ScenarioSpec(
            sensor=sensor, kind=kind,
            sir_db=_take(sc, "scenario", "sir_db", float, -20.0),
            pulse_fraction=_take(sc, "scenario", "pulse_fraction", float, 0.5),
            noise_sigma=_take(sc, "scenario", "noise_sigma", float, 0.05),
            n_targets=_take(sc, "scenario", "n_targets", int, 5))
    except ValueError as e:
        raise ConfigError(f"[scenario] {e}") from e
    _reject_leftovers(sc, "scenario")

    return RunConfig(seed=seed, dataset=dataset, net=net, epochs=epochs, lr=lr,
                     batch_size=batch_size, val_fraction=val_fraction,
                     loss_mode=loss_mode, pipeline_stft=stft,
                     detector_threshold=detector_threshold,
                     notch_k_sigma=notch_k_sigma, use_oracle_mask=use_oracle_mask,
                     dyn_range_db=dyn_range_db, oracle_margin=oracle_margin,
                     scenario=scenario)
