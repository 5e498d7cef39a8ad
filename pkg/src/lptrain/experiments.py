"""Experiment configuration, single runs, and ratio sweeps.

Configs are flat ``key = value`` mappings with dotted prefixes
(``model.``, ``dataset.``, ``scheme.``, ``train.``, ``sweep.``), read from
a file and/or ``--set`` overrides; overrides win.  A single run trains one
scheme and reports its tradeoff row; a sweep repeats the configured scheme
over a ratio grid with derived seeds (base seed + repeat index) and never
aborts on a failed point, it flags the row instead.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .assign import (
    PrecisionAssignment,
    PrecisionCandidate,
    assign_all_high,
    assign_op_based,
    assign_ours,
    assign_uniform,
    candidate_fp32,
    candidate_hfp8,
)
from .data import DatasetSpec, load_dataset
from .engine import TrainConfig, TrainResult, train
from .graph import Graph, build_graph

__all__ = [
    "SchemeSpec",
    "ExperimentConfig",
    "TradeoffRow",
    "SCHEMES",
    "DECILES",
    "load_config_file",
    "apply_overrides",
    "config_from_mapping",
    "parse_layers",
    "build_scheme",
    "run_single",
    "run_sweep",
    "write_rows_csv",
    "read_rows_csv",
    "write_epoch_csv",
]

SCHEMES = ("fp32", "unif", "op", "op_prime", "ours", "ours_no_promo")
DECILES = tuple(round(0.1 * i, 1) for i in range(11))

_LAYER_ALIASES = {
    "softmax_ce": "softmax_cross_entropy",
    "gap": "global_avg_pool",
}


@dataclass(frozen=True)
class SchemeSpec:
    kind: str = "ours"
    ratio: float = 0.5
    order: str = "decreasing"
    order_seed: Optional[int] = None
    force_backward_weights_hi: bool = True

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown scheme {self.kind!r} (have {', '.join(SCHEMES)})")

    @property
    def uses_ratio(self) -> bool:
        return self.kind in ("ours", "ours_no_promo")


@dataclass(frozen=True)
class ExperimentConfig:
    layers: tuple
    input_shape: tuple[int, ...]
    dataset: DatasetSpec = DatasetSpec()
    scheme: SchemeSpec = SchemeSpec()
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep_ratios: tuple[float, ...] = DECILES
    sweep_repeats: int = 4
    out_dir: str = ""


@dataclass
class TradeoffRow:
    scheme: str
    r: float
    run_index: int
    seed: int
    mean_low_ratio: Optional[float]
    best_eval_accuracy: Optional[float]
    flagged: bool = False


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def load_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise ValueError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def apply_overrides(kv: dict[str, str], pairs: Sequence[str]) -> dict[str, str]:
    out = dict(kv)
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set needs key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_layers(text: str):
    """Parse ``dense:8, relu, conv2d:4:k3:p1, gap, softmax_ce`` style chains."""
    layers = []
    for chunk in text.split(","):
        parts = [p.strip() for p in chunk.strip().split(":") if p.strip()]
        if not parts:
            continue
        kind = _LAYER_ALIASES.get(parts[0], parts[0])
        attrs: dict = {}
        if kind == "dense":
            if len(parts) != 2:
                raise ValueError(f"dense layer needs one size, got {chunk!r}")
            attrs["out"] = int(parts[1])
        elif kind == "conv2d":
            if len(parts) < 2:
                raise ValueError(f"conv2d layer needs a channel count, got {chunk!r}")
            attrs["out"] = int(parts[1])
            for extra in parts[2:]:
                if extra.startswith("k"):
                    attrs["kernel"] = int(extra[1:])
                elif extra.startswith("p"):
                    attrs["padding"] = int(extra[1:])
                else:
                    raise ValueError(f"unknown conv2d attribute {extra!r}")
        elif kind == "scale":
            attrs["by"] = float(parts[1])
        elif len(parts) > 1:
            raise ValueError(f"layer {parts[0]!r} takes no attributes")
        layers.append((kind, attrs))
    if not layers:
        raise ValueError("model.layers is empty")
    return tuple(layers)


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(d) for d in text.lower().split("x"))


def _get(kv: Mapping[str, str], key: str, cast, default):
    if key not in kv:
        return default
    raw = kv[key]
    if cast is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return cast(raw)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r}") from None


def config_from_mapping(kv: Mapping[str, str]) -> ExperimentConfig:
    if "model.layers" not in kv:
        raise ValueError("config needs model.layers")
    dataset = DatasetSpec(
        kind=_get(kv, "dataset.kind", str, "blobs"),
        n=_get(kv, "dataset.n", int, 200),
        features=_get(kv, "dataset.features", int, 4),
        classes=_get(kv, "dataset.classes", int, 3),
        noise=_get(kv, "dataset.noise", float, 0.1),
        seed=_get(kv, "dataset.seed", int, 0),
        path=_get(kv, "dataset.path", str, ""),
        label_column=_get(kv, "dataset.label_column", str, "label"),
    )
    scheme = SchemeSpec(
        kind=_get(kv, "scheme.kind", str, "ours"),
        ratio=_get(kv, "scheme.r", float, 0.5),
        order=_get(kv, "scheme.order", str, "decreasing"),
        order_seed=_get(kv, "scheme.order_seed", int, None),
        force_backward_weights_hi=_get(kv, "scheme.force_backward_weights_hi", bool, True),
    )
    train_cfg = TrainConfig(
        epochs=_get(kv, "train.epochs", int, 30),
        batch_size=_get(kv, "train.batch_size", int, 32),
        learning_rate=_get(kv, "train.learning_rate", float, 0.1),
        promote_threshold=_get(kv, "train.promote_threshold", float, 0.01),
        promotion_enabled=_get(kv, "train.promotion_enabled", bool, True),
        loss_scaling_enabled=_get(kv, "train.loss_scaling_enabled", bool, True),
        loss_scale_init=_get(kv, "train.loss_scale_init", float, 2.0**16),
        growth_factor=_get(kv, "train.growth_factor", float, 2.0),
        backoff_factor=_get(kv, "train.backoff_factor", float, 0.5),
        growth_interval=_get(kv, "train.growth_interval", float, 1.0),
        seed=_get(kv, "train.seed", int, 0),
    )
    shape_default = "x".join(str(d) for d in (dataset.feature_count,))
    ratios_text = kv.get("sweep.ratios", "")
    ratios = (
        tuple(float(r) for r in ratios_text.split(",") if r.strip())
        if ratios_text
        else DECILES
    )
    return ExperimentConfig(
        layers=parse_layers(kv["model.layers"]),
        input_shape=_parse_shape(_get(kv, "model.input_shape", str, shape_default)),
        dataset=dataset,
        scheme=scheme,
        train=train_cfg,
        sweep_ratios=ratios,
        sweep_repeats=_get(kv, "sweep.repeats", int, 4),
        out_dir=_get(kv, "out", str, ""),
    )


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


def build_scheme(
    g: Graph, spec: SchemeSpec
) -> tuple[PrecisionCandidate, PrecisionAssignment, bool, bool]:
    """(candidate, assignment, promotion_allowed, loss_scaling_allowed)."""
    forced = (
        frozenset(g.weight_grad_ids()) if spec.force_backward_weights_hi else frozenset()
    )
    if spec.kind == "fp32":
        return candidate_fp32(g), assign_all_high(g), False, False
    c = candidate_hfp8(g)
    if spec.kind == "unif":
        return c, assign_uniform(g, forced), False, True
    if spec.kind in ("op", "op_prime"):
        return c, assign_op_based(g, spec.kind, forced), False, True
    promo = spec.kind == "ours"
    a = assign_ours(g, spec.ratio, spec.order, spec.order_seed, forced)
    return c, a, promo, True


def _reshape_inputs(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape[1:] == shape:
        return x
    if x.ndim != 2 or int(np.prod(shape)) != x.shape[1]:
        raise ValueError(
            f"dataset rows of shape {x.shape[1:]} cannot fill model input {shape}"
        )
    return x.reshape(len(x), *shape)


def run_single(
    cfg: ExperimentConfig, run_index: int = 0
) -> tuple[TradeoffRow, TrainResult]:
    """Train the configured scheme once; the run seed is the configured
    seed plus ``run_index``."""
    g = build_graph(cfg.layers, cfg.input_shape)
    x_tr, y_tr, x_ev, y_ev = load_dataset(cfg.dataset)
    data = (
        _reshape_inputs(x_tr, cfg.input_shape),
        y_tr,
        _reshape_inputs(x_ev, cfg.input_shape),
        y_ev,
    )
    candidate, assignment, promo_ok, scaling_ok = build_scheme(g, cfg.scheme)
    seed = cfg.train.seed + run_index
    train_cfg = replace(
        cfg.train,
        seed=seed,
        promotion_enabled=cfg.train.promotion_enabled and promo_ok,
        loss_scaling_enabled=cfg.train.loss_scaling_enabled and scaling_ok,
    )
    result = train(g, candidate, assignment, train_cfg, data)
    row = TradeoffRow(
        scheme=cfg.scheme.kind,
        r=cfg.scheme.ratio if cfg.scheme.uses_ratio else 0.0,
        run_index=run_index,
        seed=seed,
        mean_low_ratio=result.mean_low_ratio,
        best_eval_accuracy=result.best_eval_accuracy,
        flagged=False,
    )
    return row, result


def run_sweep(cfg: ExperimentConfig) -> list[TradeoffRow]:
    """The configured scheme over its ratio grid (a single point for
    ratio-free schemes), ``sweep_repeats`` runs per point."""
    points = cfg.sweep_ratios if cfg.scheme.uses_ratio else (cfg.scheme.ratio,)
    rows: list[TradeoffRow] = []
    for ratio in points:
        for rep in range(cfg.sweep_repeats):
            point_cfg = replace(cfg, scheme=replace(cfg.scheme, ratio=ratio))
            try:
                row, _ = run_single(point_cfg, run_index=rep)
            except Exception:
                row = TradeoffRow(
                    scheme=cfg.scheme.kind,
                    r=ratio if cfg.scheme.uses_ratio else 0.0,
                    run_index=rep,
                    seed=cfg.train.seed + rep,
                    mean_low_ratio=None,
                    best_eval_accuracy=None,
                    flagged=True,
                )
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_ROW_FIELDS = (
    "scheme",
    "r",
    "run_index",
    "seed",
    "mean_low_ratio",
    "best_eval_accuracy",
    "flagged",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def write_rows_csv(rows: Sequence[TradeoffRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ROW_FIELDS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, f)) for f in _ROW_FIELDS])


def read_rows_csv(path: str) -> list[TradeoffRow]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != _ROW_FIELDS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for rec in reader:
            out.append(
                TradeoffRow(
                    scheme=rec["scheme"],
                    r=float(rec["r"]),
                    run_index=int(rec["run_index"]),
                    seed=int(rec["seed"]),
                    mean_low_ratio=float(rec["mean_low_ratio"]) if rec["mean_low_ratio"] else None,
                    best_eval_accuracy=float(rec["best_eval_accuracy"]) if rec["best_eval_accuracy"] else None,
                    flagged=rec["flagged"] == "1",
                )
            )
    return out


_EPOCH_FIELDS = (
    "epoch",
    "train_loss",
    "eval_accuracy",
    "eval_accuracy_fp32",
    "low_ratio",
    "loss_scale_end",
    "promotions",
    "skipped_steps",
)


def write_epoch_csv(result: TrainResult, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_EPOCH_FIELDS)
        for rec in result.records:
            writer.writerow([_fmt(getattr(rec, f)) for f in _EPOCH_FIELDS])


def write_summary_json(row: TradeoffRow, result: TrainResult, path: str) -> None:
    payload = {
        "scheme": row.scheme,
        "r": row.r,
        "seed": row.seed,
        "mean_low_ratio": row.mean_low_ratio,
        "best_eval_accuracy": row.best_eval_accuracy,
        "final_low_ratio": result.records[-1].low_ratio,
        "promotions": len(result.promotion_log),
        "skipped_steps": int(sum(r.skipped_steps for r in result.records)),
        "epochs": len(result.records),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
