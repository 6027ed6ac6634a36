"""Vision failure test (seeded Gaussian image noise, rho sweeps) and the image
resolution sweep."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image

from .boxes import DetectionSet
from .evaluation import EvalConfig, evaluate
from .synth import Frame

__all__ = [
    "NoiseSpec",
    "derive_seed",
    "sample_noise",
    "inject_noise",
    "FTReport",
    "failure_test",
    "PAPER_RHOS",
    "TABLE5_SCALES",
    "scaled_image_size",
    "rescale_frame",
    "sweep_resolution",
    "delta_percent",
    "write_sweep_csv",
    "SWEEP_COLUMNS",
]

PAPER_RHOS = (0.5, 0.7, 0.9)
TABLE5_SCALES = (0.25, 0.5, 0.75, 1.0)
SWEEP_COLUMNS = ("scale", "image_size", "rdl", "map_3d", "delta_3d_pct", "map_bev", "delta_bev_pct")


@dataclass(frozen=True)
class NoiseSpec:
    rho: float
    sigma: float = 0.1  # std-dev in [0, 1] pixel units
    seed: int = 0

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"noise level rho must be >= 0, got {self.rho}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


def derive_seed(base_seed: int, *keys: int) -> int:
    """Independent child seed; identical for identical keys, regardless of worker layout."""
    return int(np.random.SeedSequence([base_seed, *keys]).generate_state(1, dtype=np.uint64)[0])


def sample_noise(shape, spec: NoiseSpec) -> np.ndarray:
    """``rho * g`` with ``g ~ N(0, sigma^2)`` i.i.d.; the un-clamped perturbation."""
    g = np.random.default_rng(spec.seed).normal(0.0, spec.sigma, size=shape)
    return spec.rho * g


def inject_noise(image: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Add scaled Gaussian noise and clamp to [0, 1]; rho == 0 returns the input values unchanged."""
    image = np.asarray(image)
    if spec.rho == 0:
        return image.copy()
    noisy = image.astype(np.float64) + sample_noise(image.shape, spec)
    return np.clip(noisy, 0.0, 1.0).astype(image.dtype)


@dataclass
class FTReport:
    sigma: float
    runs: int
    base_seed: int
    rows: list = field(default_factory=list)  # one dict per rho

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")

    def row(self, rho: float) -> dict:
        for r in self.rows:
            if r["rho"] == rho:
                return r
        raise KeyError(rho)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"sigma": self.sigma, "runs": self.runs,
                                          "base_seed": self.base_seed, "rows": self.rows},
                                         indent=1, sort_keys=True))

    def to_csv(self, path, extra_columns: dict | None = None) -> None:
        """One line per rho: ``rho, <metric>_mean, <metric>_std, ap_<metric>_<class>...``."""
        if not self.rows:
            Path(path).write_text("")
            return
        flat = []
        for r in self.rows:
            d = {"rho": r["rho"], "runs": self.runs, "sigma": self.sigma, **(extra_columns or {})}
            for m, v in r["metrics"].items():
                d[f"{m}_mean"] = v["mean"]
                d[f"{m}_std"] = v["std"]
                for c, ap in v["ap_mean"].items():
                    d[f"ap_{m}_{c}"] = ap
            flat.append(d)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(flat[0]))
            w.writeheader()
            w.writerows(flat)


Predictor = Callable[[Sequence[Frame], Sequence[np.ndarray] | None], list[DetectionSet]]


def failure_test(predictor: Predictor, frames: Sequence[Frame], rho_list=(0.0, *PAPER_RHOS),
                 runs: int = 10, sigma: float = 0.1, base_seed: int = 0,
                 eval_configs: Mapping[str, EvalConfig] | None = None) -> FTReport:
    """Evaluate ``predictor`` on noise-corrupted images for every rho and run.

    Only the images are perturbed; radar input is left untouched. The noise
    for frame ``i`` in run ``r`` at ``rho_list[k]`` is seeded by
    ``derive_seed(base_seed, k, r, i)``.
    """
    if eval_configs is None:
        raise ValueError("failure_test needs at least one evaluation config")
    report = FTReport(sigma, runs, base_seed)
    gts = [f.gt for f in frames]
    cams = [f.camera for f in frames]
    clean = [f.image_float() for f in frames]
    for k, rho in enumerate(rho_list):
        per_metric = {name: [] for name in eval_configs}
        per_class = {name: [] for name in eval_configs}
        for r in range(runs):
            if rho == 0:
                images = None
            else:
                images = [inject_noise(im, NoiseSpec(rho, sigma, derive_seed(base_seed, k, r, i)))
                          for i, im in enumerate(clean)]
            dets = predictor(frames, images)
            for name, ec in eval_configs.items():
                res = evaluate(dets, gts, ec, cams)
                per_metric[name].append(res["map"])
                per_class[name].append(res["ap"])
        metrics = {}
        for name in eval_configs:
            vals = np.array(per_metric[name])
            classes = per_class[name][0].keys()
            metrics[name] = {
                "mean": float(vals.mean()),
                "std": float(vals.std()),
                "values": [float(v) for v in vals],
                "ap_mean": {c: float(np.mean([a[c] for a in per_class[name]])) for c in classes},
            }
        report.rows.append({"rho": float(rho), "metrics": metrics})
    return report


def scaled_image_size(base_size: tuple[int, int], scale: float) -> tuple[int, int]:
    return (int(round(base_size[0] * scale)), int(round(base_size[1] * scale)))


def rescale_frame(frame: Frame, scale: float, stride: int = 8) -> Frame:
    """Resize the image (bilinear) and pad bottom/right to a multiple of ``stride``.

    Intrinsics scale with the image; padding leaves them unchanged.
    """
    if scale == 1.0 and all(s % stride == 0 for s in frame.camera.image_size):
        return frame
    h, w = scaled_image_size(frame.camera.image_size, scale)
    img = np.asarray(Image.fromarray(frame.image).resize((w, h), Image.BILINEAR))
    ph, pw = -(-h // stride) * stride, -(-w // stride) * stride
    padded = np.zeros((ph, pw, 3), np.uint8)
    padded[:h, :w] = img
    cam = frame.camera.scaled(scale, (ph, pw))
    return Frame(frame.frame_id, padded, frame.radar, frame.radar_owner, frame.gt,
                 frame.velocities, cam, dict(frame.meta))


def delta_percent(value: float, baseline: float) -> float:
    """Relative change in percent; NaN when the baseline is zero."""
    if baseline == 0:
        return float("nan") if value != 0 else 0.0
    return 100.0 * (value - baseline) / baseline


def sweep_resolution(train_and_predict, train_frames: Sequence[Frame], eval_frames: Sequence[Frame],
                     eval_3d: EvalConfig, eval_bev: EvalConfig, scales=TABLE5_SCALES,
                     stride: int = 8, report_size: tuple[int, int] | None = None) -> list[dict]:
    """Retrain and evaluate with RDL off and on at each image scale.

    ``train_and_predict(train_frames, eval_frames, rdl)`` returns detections
    for ``eval_frames``. Delta columns are relative to the RDL-off row of
    the same scale, which is therefore exactly 0.0. ``report_size`` is the
    full-resolution size written to the ``image_size`` column (defaults to
    the frames' own size).
    """
    rows = []
    base = report_size or tuple(eval_frames[0].camera.image_size)
    for scale in scales:
        tr = [rescale_frame(f, scale, stride) for f in train_frames]
        ev = [rescale_frame(f, scale, stride) for f in eval_frames]
        gts, cams = [f.gt for f in ev], [f.camera for f in ev]
        res = {}
        for rdl in (False, True):
            dets = train_and_predict(tr, ev, rdl)
            res[rdl] = (evaluate(dets, gts, eval_3d, cams)["map"],
                        evaluate(dets, gts, eval_bev, cams)["map"])
        size = scaled_image_size(base, scale)
        for rdl in (False, True):
            m3, mb = res[rdl]
            rows.append({
                "scale": scale, "image_size": f"[{size[0]}, {size[1]}]", "rdl": rdl,
                "map_3d": m3, "delta_3d_pct": 0.0 if not rdl else delta_percent(m3, res[False][0]),
                "map_bev": mb, "delta_bev_pct": 0.0 if not rdl else delta_percent(mb, res[False][1]),
            })
    return rows


def write_sweep_csv(rows: Sequence[dict], path, extra_columns: dict | None = None) -> None:
    """Table-shaped CSV; ``extra_columns`` (e.g. a config hash) are appended to every row."""
    extra = extra_columns or {}
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[*SWEEP_COLUMNS, *extra])
        w.writeheader()
        for r in rows:
            w.writerow({**{k: r[k] for k in SWEEP_COLUMNS}, **extra})
