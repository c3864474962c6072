"""Experiment orchestration: config, splits, synthetic data and end-to-end runs.

The data side (loading, splitting, scaling, windowing) produces plain
SampleWindows; the model side only ever sees collated batches. Nothing in
here reaches into model internals, and models never touch files.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .autodiff import Parameter
from .core import SourceId, SplitMix64, TimeSeries, derive_rng, make_series, missing_rate
from .errors import ConfigError, ConfigInvalid, DataError, SplitTooSmall
from .evaluation import EvalResult, PipelineOptions, evaluate_stream
from .ingest import Corpus, build_corpus, load_csv
from .metrics import ALL_KINDS, MetricKind
from .models import ModelSpec, init_parameters
from .pipeline import (
    ContextSlice,
    MaskStrategy,
    SampleWindow,
    ScalerParams,
    Task,
    WindowSpec,
    apply_scaler,
    fit_scaler,
    generate_mask,
    iter_windows,
    scale_series,
    with_artificial,
)
from .train import Scheduler, TrainConfig, load_checkpoint, save_checkpoint, train

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# splits and synthetic data


def chronological_split(T: int, ratios: Sequence[float] = (0.7, 0.1, 0.2), min_length: int = 1) -> tuple[range, range, range]:
    """Row ranges for train/val/test: floor for the first two, remainder for test."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {list(ratios)}")
    if T < 3:
        raise SplitTooSmall(f"series of length {T} cannot be split three ways")
    n_train = math.floor(ratios[0] * T)
    n_val = math.floor(ratios[1] * T)
    parts = (range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, T))
    for name, r in zip(SPLITS, parts):
        if len(r) < min_length:
            raise SplitTooSmall(f"{name} split has {len(r)} ticks, needs at least {min_length}")
    return parts


@dataclass(frozen=True)
class SyntheticSpec:
    length: int = 500
    channels: int = 1
    period: float = 24.0
    slope: float = 0.0
    noise: float = 0.0
    missing_rate: float = 0.0
    seed: int = 0
    start: int = 0
    amplitude: float = 1.0


def make_synthetic(spec: SyntheticSpec, name: str = "synthetic") -> TimeSeries:
    """slope*t + amplitude*sin(2*pi*t/period + phase_c) + noise*N(0,1), then MCAR holes.

    Channel phases are spread evenly: phase_c = 2*pi*c/C.
    """
    if spec.length < 1:
        raise ConfigError("synthetic length must be >= 1")
    if not 0.0 <= spec.missing_rate <= 1.0:
        raise ConfigError("synthetic missing_rate must lie in [0, 1]")
    T, C = spec.length, spec.channels
    rng = SplitMix64(spec.seed)
    ticks = spec.start + np.arange(T, dtype=np.int64)
    t = ticks.astype(np.float64)[:, None]
    phase = 2 * math.pi * np.arange(C)[None, :] / C
    values = spec.slope * t + spec.amplitude * np.sin(2 * math.pi * t / spec.period + phase)
    values = values + spec.noise * rng.normal((T, C))
    observed = ~(rng.uniform((T, C)) < spec.missing_rate)
    return make_series(SourceId(name), ticks, values, observed)


# ---------------------------------------------------------------------------
# configuration

_SOURCE_KEYS = {
    "kind": "synthetic",
    "path": None,
    "length": 500,
    "channels": 1,
    "period": 24.0,
    "slope": 0.0,
    "noise": 0.0,
    "missing_rate": 0.0,
    "seed": None,
    "start": 0,
    "amplitude": 1.0,
}
_DATA_KEYS = {"name": "series", "target": None, "context_length": None, "sources": None}
_PIPELINE_KEYS = {
    "lookback": 24,
    "horizon": 1,
    "stride": 1,
    "exogenous": [],
    "scaler": "standard",
    "instance_norm": True,
    "task": "forecast",
    "mask": "none",
    "mask_rate": 0.0,
    "block_len": 1,
    "n_blocks": 1,
    "eps": 1e-8,
}
_MODEL_KEYS = {
    "kind": "linear",
    "period": 1,
    "kernel": 25,
    "patch_len": 8,
    "patch_stride": 8,
    "hidden": 16,
    "embed_dim": 16,
}
_TRAIN_KEYS = {
    "epochs": 100,
    "batch_size": 32,
    "optimizer": "adam",
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "scheduler": "constant",
    "step_period": 10,
    "gamma": 0.1,
    "t_max": None,
    "lr_min": 0.0,
    "clip_norm": None,
    "early_stop_metric": "MAE",
    "patience": 10,
    "min_delta": 0.0,
    "loss": "mse",
}
_EVAL_KEYS = {"metrics": [k.value for k in ALL_KINDS], "split": [0.7, 0.1, 0.2], "batch_size": 64, "workers": 1}
_TOP_KEYS = {"run_name", "seed", "data", "pipeline", "model", "train", "eval"}

_TYPES = {
    "lookback": int, "horizon": int, "stride": int, "block_len": int, "n_blocks": int,
    "length": int, "channels": int, "start": int, "seed": int,
    "period": (int, float), "kernel": int, "patch_len": int, "patch_stride": int, "hidden": int, "embed_dim": int,
    "epochs": int, "batch_size": int, "step_period": int, "t_max": int, "patience": int, "workers": int,
    "context_length": int,
    "lr": (int, float), "beta1": (int, float), "beta2": (int, float), "adam_eps": (int, float),
    "gamma": (int, float), "lr_min": (int, float), "clip_norm": (int, float), "min_delta": (int, float),
    "slope": (int, float), "noise": (int, float), "missing_rate": (int, float), "amplitude": (int, float),
    "mask_rate": (int, float), "eps": (int, float),
    "instance_norm": bool,
    "kind": str, "path": str, "name": str, "target": str, "scaler": str, "task": str, "mask": str,
    "optimizer": str, "scheduler": str, "early_stop_metric": str, "loss": str,
    "exogenous": list, "metrics": list, "split": list,
}


def _section(raw: dict, defaults: dict, path: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigInvalid(path, "expected a table")
    out = dict(defaults)
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigInvalid(f"{path}.{key}", "unknown key")
        want = _TYPES.get(key)
        if want is not None and not (isinstance(value, want) and not (want is int and isinstance(value, bool))):
            raise ConfigInvalid(f"{path}.{key}", f"wrong type {type(value).__name__}")
        out[key] = value
    return out


@dataclass
class ExperimentConfig:
    run_name: str
    seed: int
    data: dict
    pipeline: dict
    model: dict
    train: dict
    eval: dict
    base_dir: Path = field(default=Path("."), compare=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str = ".") -> "ExperimentConfig":
        for key in raw:
            if key not in _TOP_KEYS:
                raise ConfigInvalid(key, "unknown key")
        run_name = raw.get("run_name", "run")
        seed = raw.get("seed", 0)
        if not isinstance(run_name, str) or not run_name:
            raise ConfigInvalid("run_name", "must be a non-empty string")
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigInvalid("seed", "must be an integer")

        data_raw = dict(raw.get("data", {}))
        sources_raw = data_raw.pop("sources", None)
        data = _section({k: v for k, v in data_raw.items() if k in _DATA_KEYS}, _DATA_KEYS, "data")
        if sources_raw is None:
            src = _section({k: v for k, v in data_raw.items() if k not in _DATA_KEYS}, _SOURCE_KEYS, "data")
            data["sources"] = {data["name"]: src}
        else:
            if not isinstance(sources_raw, dict) or not sources_raw:
                raise ConfigInvalid("data.sources", "expected one or more source tables")
            stray = [k for k in data_raw if k not in _DATA_KEYS]
            if stray:
                raise ConfigInvalid(f"data.{stray[0]}", "source keys belong under [data.sources.<name>]")
            data["sources"] = {n: _section(s, _SOURCE_KEYS, f"data.sources.{n}") for n, s in sources_raw.items()}
        if data["target"] is None:
            if len(data["sources"]) > 1:
                raise ConfigInvalid("data.target", "required when several sources are configured")
            data["target"] = next(iter(data["sources"]))
        if data["target"] not in data["sources"]:
            raise ConfigInvalid("data.target", f"no source named {data['target']!r}")
        base_dir = Path(base_dir)
        for name, src in data["sources"].items():
            if src["kind"] not in ("synthetic", "csv"):
                raise ConfigInvalid(f"data.sources.{name}.kind", "must be 'synthetic' or 'csv'")
            if src["kind"] == "csv":
                if not src["path"]:
                    raise ConfigInvalid(f"data.sources.{name}.path", "required for csv sources")
                if not (base_dir / src["path"]).is_file():
                    raise ConfigInvalid(f"data.sources.{name}.path", f"file not found: {src['path']}")

        cfg = cls(
            run_name=run_name,
            seed=seed,
            data=data,
            pipeline=_section(raw.get("pipeline", {}), _PIPELINE_KEYS, "pipeline"),
            model=_section(raw.get("model", {}), _MODEL_KEYS, "model"),
            train=_section(raw.get("train", {}), _TRAIN_KEYS, "train"),
            eval=_section(raw.get("eval", {}), _EVAL_KEYS, "eval"),
            base_dir=base_dir,
        )
        cfg._validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigInvalid(str(path), "config file not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid(str(path), f"not valid TOML ({exc})") from None
        return cls.from_dict(raw, path.parent)

    def _validate(self) -> None:
        split = self.eval["split"]
        if len(split) != 3 or any(not isinstance(r, (int, float)) or r <= 0 for r in split) or abs(sum(split) - 1) > 1e-9:
            raise ConfigInvalid("eval.split", "three positive ratios summing to 1")
        for k in self.eval["metrics"]:
            try:
                MetricKind.parse(k)
            except Exception:
                raise ConfigInvalid("eval.metrics", f"unknown metric {k!r}") from None
        try:
            self.window_spec()
            self.pipeline_options()
            self.train_config(None)
            Task.parse(self.pipeline["task"])
        except ConfigInvalid:
            raise
        except (ConfigError, ValueError) as exc:
            raise ConfigInvalid("config", str(exc)) from None
        if self.pipeline["scaler"] not in ("standard", "minmax", "none"):
            raise ConfigInvalid("pipeline.scaler", "must be standard, minmax or none")

    def window_spec(self) -> WindowSpec:
        p = self.pipeline
        return WindowSpec(p["lookback"], p["horizon"], p["stride"])

    def pipeline_options(self) -> PipelineOptions:
        p = self.pipeline
        try:
            mask = MaskStrategy(p["mask"], float(p["mask_rate"]), p["block_len"], p["n_blocks"])
        except ConfigError as exc:
            raise ConfigInvalid("pipeline.mask", str(exc)) from None
        return PipelineOptions(bool(p["instance_norm"]), mask, float(p["eps"]))

    def train_config(self, checkpoint_path: Optional[str]) -> TrainConfig:
        t = self.train
        sched = Scheduler(t["scheduler"], t["step_period"], float(t["gamma"]), t["t_max"] or t["epochs"], float(t["lr_min"]))
        return TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            optimizer=t["optimizer"],
            lr=float(t["lr"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            adam_eps=float(t["adam_eps"]),
            scheduler=sched,
            clip_norm=None if t["clip_norm"] is None else float(t["clip_norm"]),
            early_stop_metric=t["early_stop_metric"],
            patience=t["patience"],
            min_delta=float(t["min_delta"]),
            loss=t["loss"],
            seed=self.seed,
            checkpoint_path=checkpoint_path,
        )

    def echo(self) -> dict:
        return {
            "run_name": self.run_name,
            "seed": self.seed,
            "data": self.data,
            "pipeline": self.pipeline,
            "model": self.model,
            "train": self.train,
            "eval": self.eval,
        }


# ---------------------------------------------------------------------------
# data preparation


def load_source(name: str, src: dict, base_dir: Path, default_seed: int) -> TimeSeries:
    if src["kind"] == "csv":
        text = (base_dir / src["path"]).read_text(encoding="utf-8")
        return load_csv(text, name)
    seed = src["seed"] if src["seed"] is not None else child_seed_for(default_seed, name)
    spec = SyntheticSpec(
        length=src["length"],
        channels=src["channels"],
        period=float(src["period"]),
        slope=float(src["slope"]),
        noise=float(src["noise"]),
        missing_rate=float(src["missing_rate"]),
        seed=seed,
        start=src["start"],
        amplitude=float(src["amplitude"]),
    )
    return make_synthetic(spec, name)


def child_seed_for(seed: int, name: str) -> int:
    """Stable per-source seed derived from the run seed and the source name."""
    rng = SplitMix64(seed)
    for byte in name.encode("utf-8"):
        rng = rng.child(byte)
    return rng.seed


@dataclass
class PreparedData:
    corpus: Corpus
    target: TimeSeries
    target_channels: list[int]
    window_spec: WindowSpec
    scaler: Optional[ScalerParams]
    splits: dict[str, range]
    windows: dict[str, list[SampleWindow]]

    def inverse(self):
        """Map target-channel arrays from scaler units back to original units."""
        if self.scaler is None:
            return None
        sel = self.target_channels
        sub = ScalerParams(self.scaler.kind, self.scaler.loc[sel], self.scaler.scale[sel], self.scaler.eps)
        return lambda a: apply_scaler(sub, a, direction="inverse")


def _resolve_exogenous(names: Sequence, series: TimeSeries) -> tuple[int, ...]:
    out = []
    for n in names:
        if isinstance(n, int) and not isinstance(n, bool):
            if not 0 <= n < series.n_channels:
                raise ConfigInvalid("pipeline.exogenous", f"channel index {n} out of range")
            out.append(n)
        elif isinstance(n, str) and n in series.channels:
            out.append(series.channels.index(n))
        else:
            raise ConfigInvalid("pipeline.exogenous", f"unknown channel {n!r}")
    if len(set(out)) >= series.n_channels:
        raise ConfigInvalid("pipeline.exogenous", "at least one target channel must remain")
    return tuple(out)


def _attach_context(window: SampleWindow, target: TimeSeries, aux: list[TimeSeries], length: int) -> SampleWindow:
    """Attach each other source's most recent rows up to the window's last lookback tick.

    This is a causal cutoff only: the other sources keep their own ticks and
    row counts, nothing is resampled onto the target's clock.
    """
    cutoff = target.timestamps[window.start + window.input.shape[0] - 1]
    ctx = []
    for s in aux:
        stop = int(np.searchsorted(s.timestamps, cutoff, side="right"))
        lo = max(0, stop - length)
        ctx.append(ContextSlice(s.source.index, np.array(s.values[lo:stop]), np.array(s.observed[lo:stop])))
    return replace(window, context=tuple(ctx))


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    named = {n: load_source(n, s, cfg.base_dir, cfg.seed) for n, s in cfg.data["sources"].items()}
    corpus = build_corpus(named)
    target = corpus[cfg.data["target"]]
    p = cfg.pipeline
    exog = _resolve_exogenous(p["exogenous"], target)
    wspec = WindowSpec(p["lookback"], p["horizon"], p["stride"], exog)
    ratios = cfg.eval["split"]
    ranges = chronological_split(target.n_ticks, ratios, p["lookback"] + p["horizon"])
    splits = dict(zip(SPLITS, ranges))

    scaler = None
    if p["scaler"] != "none":
        scaler = fit_scaler(p["scaler"], [target.rows(splits["train"].start, splits["train"].stop)], float(p["eps"]))
        target = scale_series(scaler, target)

    aux = []
    if cfg.model["kind"] == "source_fusion":
        for sid, data in corpus.sources:
            if sid.name == cfg.data["target"]:
                continue
            if p["scaler"] != "none":
                tr, _, _ = chronological_split(data.n_ticks, ratios)
                data = scale_series(fit_scaler(p["scaler"], [data.rows(tr.start, tr.stop)], float(p["eps"])), data)
            aux.append(data)
    context_length = cfg.data["context_length"] or p["lookback"]

    task = Task.parse(p["task"])
    options = cfg.pipeline_options()
    windows = {}
    for split_id, name in enumerate(SPLITS):
        r = splits[name]
        part = target.rows(r.start, r.stop)
        ws = [_shift(w, r.start) for w in iter_windows(part, wspec)]
        if aux:
            ws = [_attach_context(w, target, aux, context_length) for w in ws]
        if task is Task.IMPUTE and name != "train":
            ws = [
                with_artificial(w, generate_mask(w.input.shape, options.mask, derive_rng(cfg.seed, 2, split_id, k)))
                for k, w in enumerate(ws)
            ]
        windows[name] = ws
    return PreparedData(corpus, target, wspec.target_channels(target.n_channels), wspec, scaler, splits, windows)


def _shift(window: SampleWindow, offset: int) -> SampleWindow:
    return replace(window, start=window.start + offset)


def model_spec_for(cfg: ExperimentConfig, data: PreparedData) -> ModelSpec:
    m = cfg.model
    p = cfg.pipeline
    period = m["period"]
    if isinstance(period, float):
        if not period.is_integer():
            raise ConfigInvalid("model.period", "seasonal period must be a whole number of ticks")
        period = int(period)
    try:
        return ModelSpec(
            kind=m["kind"],
            task=Task.parse(p["task"]),
            lookback=p["lookback"],
            horizon=p["horizon"],
            channels=len(data.target_channels),
            exog=len(data.window_spec.exogenous),
            period=period,
            kernel=m["kernel"],
            patch_len=m["patch_len"],
            patch_stride=m["patch_stride"],
            hidden=m["hidden"],
            embed_dim=m["embed_dim"],
            n_sources=len(data.corpus),
        )
    except ConfigInvalid:
        raise
    except ConfigError as exc:
        raise ConfigInvalid("model", str(exc)) from None


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    run_name: str
    config: dict
    metrics: dict
    metrics_normalized: dict
    exclusions: dict
    history: dict
    data: dict
    model: dict
    wall_clock_seconds: float
    version: str = __version__
    mode: str = "run"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        rows = [(k, v if isinstance(v, str) else f"{v:.6g}") for k, v in self.metrics.items()]
        width = max(len(k) for k, _ in rows)
        lines = [f"run {self.run_name}", f"{'metric':<{width}}  value"]
        lines += [f"{k:<{width}}  {v}" for k, v in rows]
        return "\n".join(lines)


def _metric_values(result: EvalResult) -> dict:
    return {k: ("NoEvaluablePoints" if v is None else v) for k, v in result.values.items()}


def _data_summary(data: PreparedData) -> dict:
    sources = []
    for sid, s in data.corpus.sources:
        sources.append(
            {
                "name": sid.name,
                "index": sid.index,
                "ticks": s.n_ticks,
                "channels": list(s.channels),
                "missing_rate": missing_rate(s),
                "tick_range": [int(s.timestamps[0]), int(s.timestamps[-1])],
            }
        )
    return {
        "sources": sources,
        "split": {k: [r.start, r.stop] for k, r in data.splits.items()},
        "windows": {k: len(v) for k, v in data.windows.items()},
    }


def _evaluate_test(cfg: ExperimentConfig, spec: ModelSpec, params, data: PreparedData) -> tuple[EvalResult, EvalResult]:
    kinds = [MetricKind.parse(k) for k in cfg.eval["metrics"]]
    options = cfg.pipeline_options()
    common = dict(batch_size=cfg.eval["batch_size"], options=options, workers=cfg.eval["workers"])
    original = evaluate_stream(spec, params, data.windows["test"], kinds, inverse=data.inverse(), **common)
    normalized = evaluate_stream(spec, params, data.windows["test"], kinds, **common)
    return original, normalized


def run_experiment(cfg: ExperimentConfig, out_dir: Path | str = ".") -> RunReport:
    """Load, split, scale, window, train, evaluate; writes the report and checkpoint."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    spec = model_spec_for(cfg, data)
    params = init_parameters(spec, cfg.seed)
    ckpt = out_dir / f"{cfg.run_name}.ckpt"
    meta = {"run_name": cfg.run_name, "scaler": data.scaler.to_dict() if data.scaler else None}

    history = {"best_epoch": None, "best_val": None, "epochs_run": 0, "stopped_early": False}
    if spec.trainable:
        result = train(
            spec,
            params,
            data.windows["train"],
            data.windows["val"],
            cfg.train_config(str(ckpt)),
            cfg.pipeline_options(),
            checkpoint_metadata=meta,
        )
        params = result.params
        history = {
            "best_epoch": result.best_epoch,
            "best_val": result.best_value,
            "epochs_run": len(result.history),
            "stopped_early": result.stopped_early,
            "train_loss": [h.train_loss for h in result.history],
            "val_metric": [h.val_metric for h in result.history],
            "lr": [h.lr for h in result.history],
        }
    else:
        save_checkpoint(params, {"model": spec.to_dict(), "best_epoch": None, **meta}, ckpt)

    original, normalized = _evaluate_test(cfg, spec, params, data)
    report = RunReport(
        run_name=cfg.run_name,
        config=cfg.echo(),
        metrics=_metric_values(original),
        metrics_normalized=_metric_values(normalized),
        exclusions=original.excluded,
        history=history,
        data=_data_summary(data),
        model=spec.to_dict(),
        wall_clock_seconds=time.perf_counter() - t0,
    )
    (out_dir / f"{cfg.run_name}.report.json").write_text(report.to_json(), encoding="utf-8")
    return report


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint, out_dir: Path | str = ".") -> RunReport:
    """Evaluate saved parameters on the config's test split without training."""
    t0 = time.perf_counter()
    arrays, meta = load_checkpoint(checkpoint)
    if "model" not in meta:
        raise DataError(f"{checkpoint}: checkpoint metadata has no model spec")
    spec = ModelSpec.from_dict(meta["model"])
    data = prepare_data(cfg)
    expected = model_spec_for(cfg, data)
    if (spec.lookback, spec.horizon, spec.channels, spec.exog, spec.task) != (
        expected.lookback, expected.horizon, expected.channels, expected.exog, expected.task
    ):
        raise ConfigInvalid("pipeline", "window/channel layout differs from the checkpoint's model")
    params = {k: Parameter(k, v) for k, v in arrays.items()}
    original, normalized = _evaluate_test(cfg, spec, params, data)
    report = RunReport(
        run_name=cfg.run_name,
        config=cfg.echo(),
        metrics=_metric_values(original),
        metrics_normalized=_metric_values(normalized),
        exclusions=original.excluded,
        history={"best_epoch": meta.get("best_epoch")},
        data=_data_summary(data),
        model=spec.to_dict(),
        wall_clock_seconds=time.perf_counter() - t0,
        mode="eval",
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{cfg.run_name}.eval.report.json").write_text(report.to_json(), encoding="utf-8")
    return report
