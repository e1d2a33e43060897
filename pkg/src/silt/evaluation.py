"""Image metrics, evaluation reports, ablation grids and decomposition dumps."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .data import DatasetLayout, evaluation_items
from .imaging import load_image, resize, save_image, to_tensor
from .losses import LossWeights, loss_content
from .training import build_extractor_from, infer_maps, load_model, train_loop

log = logging.getLogger(__name__)

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Per-channel SSIM maps over every fully-contained 11x11 window, ``h' x w' x C``."""
    a, b = _check_pair(a, b)
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    win = torch.from_numpy(gaussian_window())[None, None]
    x = torch.from_numpy(a.transpose(2, 0, 1).copy())[:, None]
    y = torch.from_numpy(b.transpose(2, 0, 1).copy())[:, None]

    def filt(t):
        return F.conv2d(t, win)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return (num / den)[:, 0].numpy().transpose(1, 2, 0)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-windowed single-scale SSIM, averaged over windows and channels."""
    return float(ssim_map(a, b, data_range).mean())


def psnr(a, b, data_range: float = 1.0) -> float:
    """PSNR in dB over all channels jointly; ``inf`` for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(data_range ** 2 / mse)


@torch.no_grad()
def perceptual_distance(extractor, a, b) -> float:
    a, b = _check_pair(a, b)
    return float(loss_content(extractor, to_tensor(a), to_tensor(b)))


@dataclass
class MetricsReport:
    ssim: float = math.nan
    psnr: float = math.nan
    vgg: float = math.nan
    n_images: int = 0
    n_skipped: int = 0
    n_psnr_infinite: int = 0
    rows: list = field(default_factory=list)

    def aggregate(self) -> dict:
        return {k: getattr(self, k) for k in ("ssim", "psnr", "vgg", "n_images", "n_skipped", "n_psnr_infinite")}

    def to_json(self) -> str:
        def enc(v):
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
            return v

        rows = [{k: enc(v) for k, v in r.items()} for r in self.rows]
        return json.dumps({"rows": rows, "aggregate": {k: enc(v) for k, v in self.aggregate().items()}}, indent=2)

    def write(self, path) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        table = path.with_suffix(".txt")
        table.write_text(format_table([("model", self)]) + "\n")
        return path, table


def _fmt_metric(v: float, digits: int) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, float) and math.isnan(v):
        return "n/a"
    return f"{v:.{digits}f}"


def format_table(rows: Sequence[tuple], flag_columns: Sequence[str] = ()) -> str:
    """Aligned text table: one line per ``(name, MetricsReport[, flags])`` row.

    Flags render as ``x`` (enabled) or blank, in ``flag_columns`` order.
    """
    header = ["#", "name", *flag_columns, "SSIM", "PSNR", "VGG"]
    body = []
    for i, row in enumerate(rows, 1):
        name, rep = row[0], row[1]
        flags = row[2] if len(row) > 2 else {}
        cells = [str(i), name, *("x" if flags.get(c) else "" for c in flag_columns)]
        if rep is None:
            cells += ["failed", "", ""]
        else:
            cells += [_fmt_metric(rep.ssim, 3), _fmt_metric(rep.psnr, 3), _fmt_metric(rep.vgg, 3)]
        body.append(cells)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def render(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    return "\n".join([line, render(header), line, *map(render, body), line])


def score_images(pairs, extractor) -> MetricsReport:
    """Aggregate metrics over ``(id, output, target)`` triples (target may be None)."""
    rep = MetricsReport()
    sums = {"ssim": 0.0, "psnr": 0.0, "vgg": 0.0}
    for ident, out, target in pairs:
        if target is None:
            log.warning("no target for %s; skipped", ident)
            rep.n_skipped += 1
            continue
        row = {"id": ident, "ssim": ssim(out, target), "psnr": psnr(out, target),
               "vgg": perceptual_distance(extractor, out, target)}
        rep.rows.append(row)
        rep.n_images += 1
        rep.n_psnr_infinite += math.isinf(row["psnr"])
    for k in sums:
        # fixed summation order (row order) keeps reports reproducible
        vals = [r[k] for r in rep.rows]
        setattr(rep, k, float(sum(vals) / len(vals)) if vals else math.nan)
    return rep


def _load_eval_image(path, size):
    img = load_image(path)
    if size is not None and img.shape[:2] != tuple(size):
        img = resize(img, *size)
    return img


def evaluate(model, test_layout: DatasetLayout, extractor=None, size=None) -> MetricsReport:
    """Relight every test input and score it against its scene's target image.

    ``model`` is a checkpoint path/dict or a ModelBundle; ``None`` scores the
    inputs themselves (the identity baseline).
    """
    bundle = None if model is None else (model if not isinstance(model, (str, Path, dict)) else load_model(model))
    if extractor is None:
        if bundle is not None and bundle.extractor is not None:
            extractor = bundle.extractor
        else:
            raise ValueError("evaluate needs a feature extractor for the perceptual score")

    def gen():
        for scene_id, tag, in_path, target_path in evaluation_items(test_layout):
            ident = f"{scene_id}/{tag}"
            img = _load_eval_image(in_path, size)
            out = img if bundle is None else infer_maps(bundle, img)[0]
            target = _load_eval_image(target_path, size) if target_path is not None else None
            yield ident, out, target

    return score_images(gen(), extractor)


# -- ablations ------------------------------------------------------------

LOSS_FLAG_COLUMNS = ("core", "L_os", "L_cp", "L_r")
OS_FLAG_COLUMNS = ("core", "L1", "L1(sg)")


def loss_flags(w: LossWeights) -> dict:
    return {
        "core": w.w_gan > 0 and w.w_dcp > 0,
        "L_os": w.enabled("l_os"),
        "L_cp": w.enabled("l_cp"),
        "L_r": w.enabled("l_r"),
        "L1": w.enabled("l_os") and w.os_includes_l1,
        "L1(sg)": w.enabled("l_os") and w.os_includes_gradient,
    }


def _with_weights(base: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(base, weights=dataclasses.replace(base.weights, **kw))


def loss_ablation_grid(base: TrainConfig) -> dict:
    """Core only, then output similarity / content / reflectance terms added."""
    w = base.weights
    return {
        "core": _with_weights(base, w_os=0.0, w_cp=0.0, w_r=0.0),
        "core+os": _with_weights(base, w_os=w.w_os, w_cp=0.0, w_r=0.0),
        "core+cp": _with_weights(base, w_os=0.0, w_cp=w.w_cp, w_r=0.0),
        "core+os+cp": _with_weights(base, w_os=w.w_os, w_cp=w.w_cp, w_r=0.0),
        "all": _with_weights(base, w_os=w.w_os, w_cp=w.w_cp, w_r=w.w_r),
    }


def output_similarity_grid(base: TrainConfig) -> dict:
    """Core only, core + plain L1, core + L1 + gradient L1."""
    w = base.weights
    core = dict(w_cp=0.0, w_r=0.0)
    return {
        "core": _with_weights(base, w_os=0.0, os_includes_l1=False, os_includes_gradient=False, **core),
        "core+L1": _with_weights(base, w_os=w.w_os, os_includes_l1=True, os_includes_gradient=False, **core),
        "core+L1+L1(sg)": _with_weights(base, w_os=w.w_os, os_includes_l1=True, os_includes_gradient=True, **core),
    }


def decomposition_grid(base: TrainConfig) -> dict:
    return {
        "none": dataclasses.replace(base, decomposition_mode="none"),
        "learnt": dataclasses.replace(base, decomposition_mode="learnt"),
    }


GRIDS = {"losses": (loss_ablation_grid, LOSS_FLAG_COLUMNS),
         "output-similarity": (output_similarity_grid, OS_FLAG_COLUMNS),
         "decomposition": (decomposition_grid, ())}


@dataclass
class AblationRow:
    name: str
    config: TrainConfig
    flags: dict
    report: MetricsReport | None = None
    error: str | None = None
    checkpoint: Path | None = None


def run_ablation(grid: dict, train_layout: DatasetLayout, test_layout: DatasetLayout, run_root,
                 size=None, progress: Callable | None = None) -> list:
    """Train and evaluate every named config from the same seed.

    A failing row records its error and the remaining rows still run.
    """
    run_root = Path(run_root)
    rows = []
    for name, cfg in grid.items():
        row = AblationRow(name, cfg, loss_flags(cfg.effective_weights()))
        safe = name.replace("+", "_").replace("(", "").replace(")", "")
        try:
            result = train_loop(cfg, train_layout, run_root / safe)
            row.checkpoint = result.final_checkpoint
            row.report = evaluate(result.final_checkpoint, test_layout, build_extractor_from(cfg), size=size)
            row.report.write(run_root / safe / "metrics_report.json")
        except Exception as exc:  # one broken row must not sink the table
            row.error = f"{type(exc).__name__}: {exc}"
            log.error("ablation row %s failed:\n%s", name, traceback.format_exc())
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def ablation_table(rows, flag_columns=LOSS_FLAG_COLUMNS) -> str:
    return format_table([(r.name, r.report, r.flags) for r in rows], flag_columns)


def ablation_json(rows) -> str:
    out = []
    for r in rows:
        out.append({
            "name": r.name, "flags": r.flags, "error": r.error,
            "aggregate": json.loads(r.report.to_json())["aggregate"] if r.report else None,
        })
    return json.dumps(out, indent=2)


# -- decomposition dumps -------------------------------------------------

def dump_decomposition(model, images: Sequence, out_dir) -> list:
    """Write ``<stem>_R.png``, ``<stem>_S.png`` and ``<stem>_Shat.png`` for every input."""
    bundle = model if not isinstance(model, (str, Path, dict)) else load_model(model)
    if not bundle.learnt:
        raise ValueError("model has no decomposition network to dump")
    out_dir = Path(out_dir)
    written = []
    for item in images:
        if isinstance(item, (str, Path)):
            stem, img = Path(item).stem, load_image(item)
        else:
            stem, img = item
        _, r, s, s_hat = infer_maps(bundle, img)
        for suffix, arr in (("R", r), ("S", s), ("Shat", s_hat)):
            written.append(save_image(arr, out_dir / f"{stem}_{suffix}.png"))
    return written
