"""Dataset generation and ingestion, experiment configuration, and report
emission.

Everything a run writes is CSV (RFC 4180 quoting via the csv module, '.'
decimal, UTF-8, '\\n' line ends) or a hand-rolled SVG, so two runs with the
same seed produce byte-identical outputs apart from wall-clock columns.
File writes go through per-run temp files renamed into place. Rows of the
experiment matrix run concurrently up to ILLCOND_THREADS workers.
"""

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attacks as ak
from . import models as md
from . import spectral as sp
from .defense import HmcConfig, run_adaptive_attack
from .diffcore import Tensor


class HarnessError(Exception):
    pass


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def generate_synthetic_dataset(seed, count, side):
    """Seeded grayscale images in [0,1]: one to three anisotropic Gaussian
    blobs plus low-amplitude stroke segments, vectorized per image.

    Returns a (count, side*side) float64 array of flattened images.
    """
    if count <= 0:
        raise HarnessError("count must be positive")
    if side < 4:
        raise HarnessError("side must be at least 4")
    rng = np.random.default_rng(seed)
    axis = (np.arange(side) + 0.5) / side
    gx, gy = np.meshgrid(axis, axis)
    out = np.empty((count, side * side))
    for i in range(count):
        img = np.zeros((side, side))
        for _ in range(rng.integers(1, 4)):
            cx, cy = rng.uniform(0.2, 0.8, 2)
            angle = rng.uniform(0.0, np.pi)
            s1 = rng.uniform(0.10, 0.30)
            s2 = rng.uniform(0.05, 0.15)
            amp = rng.uniform(0.4, 1.0)
            dx, dy = gx - cx, gy - cy
            u = np.cos(angle) * dx + np.sin(angle) * dy
            v = -np.sin(angle) * dx + np.cos(angle) * dy
            img += amp * np.exp(-0.5 * ((u / s1) ** 2 + (v / s2) ** 2))
        for _ in range(rng.integers(1, 3)):
            ax, ay, bx, by = rng.uniform(0.1, 0.9, 4)
            amp = rng.uniform(0.05, 0.15)
            width = rng.uniform(0.02, 0.05)
            ex, ey = bx - ax, by - ay
            seg2 = ex * ex + ey * ey
            if seg2 == 0.0:
                continue
            t = np.clip(((gx - ax) * ex + (gy - ay) * ey) / seg2, 0.0, 1.0)
            dist2 = (gx - (ax + t * ex)) ** 2 + (gy - (ay + t * ey)) ** 2
            img += amp * np.exp(-0.5 * dist2 / (width * width))
        out[i] = np.clip(img, 0.0, 1.0).reshape(-1)
    return out


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

def save_pgm(image, path, side=None):
    """Write one image (flat or 2-D, values in [0,1]) as 8-bit binary PGM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 1:
        if side is None:
            side = int(round(np.sqrt(arr.size)))
        arr = arr.reshape(side, -1)
    quantized = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = quantized.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def load_pgm(path):
    """Read an 8-bit PGM (binary P5 or ascii P2) into a [0,1] float image."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise HarnessError(f"cannot read image file {path}: {exc}") from exc

    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HarnessError(f"malformed PGM file {path}: unexpected end of header")
        return data[start:pos]

    magic = token()
    if magic not in (b"P5", b"P2"):
        raise HarnessError(f"malformed PGM file {path}: bad magic {magic!r}")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise HarnessError(f"malformed PGM file {path}: bad header") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise HarnessError(f"malformed PGM file {path}: unsupported header values")
    if magic == b"P5":
        pos += 1  # the single whitespace byte after maxval
        raster = data[pos:pos + w * h]
        if len(raster) != w * h:
            raise HarnessError(f"malformed PGM file {path}: truncated raster")
        img = np.frombuffer(raster, dtype=np.uint8).astype(np.float64)
    else:
        try:
            values = [int(v) for v in data[pos:].split()]
        except ValueError:
            raise HarnessError(f"malformed PGM file {path}: bad ascii raster") from None
        if len(values) != w * h:
            raise HarnessError(f"malformed PGM file {path}: truncated raster")
        img = np.asarray(values, dtype=np.float64)
    if img.max(initial=0.0) > maxval:
        raise HarnessError(f"malformed PGM file {path}: value above maxval")
    return (img / maxval).reshape(h, w)


def _area_resize(img, side):
    """Box-filter resample to side x side via exact interval overlaps."""
    def weights(n_in, n_out):
        w = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for o in range(n_out):
            lo, hi = o * scale, (o + 1) * scale
            for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
                w[o, i] = min(hi, i + 1) - max(lo, i)
        return w / scale
    wy = weights(img.shape[0], side)
    wx = weights(img.shape[1], side)
    return wy @ img @ wx.T


def load_image_dir(path, side):
    """All PGM images under ``path``, center-cropped square, area-averaged
    to side x side, flattened into a (N, side*side) array."""
    try:
        names = sorted(n for n in os.listdir(path) if n.lower().endswith(".pgm"))
    except OSError as exc:
        raise HarnessError(f"cannot list image directory {path}: {exc}") from exc
    if not names:
        raise HarnessError(f"no PGM images found in {path}")
    rows = []
    for name in names:
        img = load_pgm(os.path.join(path, name))
        h, w = img.shape
        if h != w:
            crop = min(h, w)
            y0, x0 = (h - crop) // 2, (w - crop) // 2
            img = img[y0:y0 + crop, x0:x0 + crop]
        if img.shape[0] != side:
            img = _area_resize(img, side)
        rows.append(np.clip(img, 0.0, 1.0).reshape(-1))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# perturbation persistence
# ---------------------------------------------------------------------------

def save_perturbation(rho, path):
    arr = rho.rho.values if isinstance(rho, ak.Perturbation) else (
        rho.values if isinstance(rho, Tensor) else np.asarray(rho, dtype=np.float64))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"illcond-rho 1\ndim {arr.size}\n")
        fh.write(" ".join(repr(float(v)) for v in arr.reshape(-1)) + "\n")


def load_perturbation(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [l for l in fh.read().splitlines() if l.strip()]
    if len(lines) < 3 or not lines[0].startswith("illcond-rho"):
        raise HarnessError(f"malformed perturbation file {path}")
    dim = int(lines[1].split()[1])
    vals = [float(v) for v in lines[2].split()]
    if len(vals) != dim:
        raise HarnessError(f"perturbation file {path}: expected {dim} values, got {len(vals)}")
    return Tensor(np.asarray(vals))


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class InjectSpec:
    layer: int
    floor: float
    count: int


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "results"
    dataset: str = "synthetic"
    dataset_count: int = 200
    dataset_side: int = 16
    eval_count: int = None
    model_path: str = None
    widths: list = field(default_factory=lambda: [256, 128, 32, 8, 32, 128, 256])
    latent_index: int = 3
    activations: list = None
    variational: bool = False
    beta: float = 0.0
    epochs: int = 150
    train_lr: float = 1e-3
    train_batch: int = 32
    injections: list = field(default_factory=list)
    defense: bool = False
    hmc: HmcConfig = None
    attacks: list = field(default_factory=list)   # (overrides dict) per [attack]

    def __post_init__(self):
        if not self.attacks:
            return
        if self.hmc is None:
            self.hmc = HmcConfig()


_ATTACK_KEYS = {"strategy", "distance", "eps", "norm", "steps", "lr", "batch",
                "layer_fraction", "weighting", "seed", "defended"}


def parse_experiment_config(path):
    """Flat key-value file with repeated [attack] sections; '#' comments."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read()
    cfg = ExperimentConfig()
    section = None
    attack_rows = []
    for lineno, line in enumerate(raw.splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if text == "[attack]":
            section = {}
            attack_rows.append(section)
            continue
        if "=" not in text:
            raise HarnessError(f"{path}:{lineno}: expected 'key = value', got '{text}'")
        key, value = (part.strip() for part in text.split("=", 1))
        if section is not None:
            if key not in _ATTACK_KEYS:
                raise HarnessError(f"{path}:{lineno}: unknown attack key '{key}'")
            section[key] = value
            continue
        try:
            _apply_global_key(cfg, key, value)
        except ValueError as exc:
            raise HarnessError(f"{path}:{lineno}: {exc}") from None
    cfg.attacks = attack_rows
    if not attack_rows:
        raise HarnessError(f"{path}: no [attack] sections")
    if cfg.hmc is None:
        cfg.hmc = HmcConfig()
    return cfg


def _apply_global_key(cfg, key, value):
    if key == "seed":
        cfg.seed = int(value)
    elif key == "out":
        cfg.out_dir = value
    elif key == "dataset":
        cfg.dataset = value
    elif key == "dataset_count":
        cfg.dataset_count = int(value)
    elif key == "dataset_side":
        cfg.dataset_side = int(value)
    elif key == "eval_count":
        cfg.eval_count = int(value)
    elif key == "model":
        cfg.model_path = value
    elif key == "widths":
        cfg.widths = [int(v) for v in value.split(",")]
    elif key == "latent_index":
        cfg.latent_index = int(value)
    elif key == "activations":
        cfg.activations = [v.strip() for v in value.split(",")]
    elif key == "variational":
        cfg.variational = bool(int(value))
    elif key == "beta":
        cfg.beta = float(value)
    elif key == "epochs":
        cfg.epochs = int(value)
    elif key == "train_lr":
        cfg.train_lr = float(value)
    elif key == "train_batch":
        cfg.train_batch = int(value)
    elif key == "inject":
        parts = dict(p.split(":", 1) for p in value.split(","))
        cfg.injections.append(InjectSpec(int(parts["layer"]), float(parts["floor"]),
                                         int(parts["count"])))
    elif key == "defense":
        cfg.defense = bool(int(value))
    elif key in ("hmc_steps", "hmc_eps", "hmc_chain", "hmc_noise", "hmc_seed"):
        hmc = cfg.hmc or HmcConfig()
        kwargs = {"leapfrog_steps": hmc.leapfrog_steps, "step_size": hmc.step_size,
                  "chain_length": hmc.chain_length, "noise_scale": hmc.noise_scale,
                  "seed": hmc.seed}
        field_map = {"hmc_steps": ("leapfrog_steps", int), "hmc_eps": ("step_size", float),
                     "hmc_chain": ("chain_length", int), "hmc_noise": ("noise_scale", float),
                     "hmc_seed": ("seed", int)}
        name, cast = field_map[key]
        kwargs[name] = cast(value)
        cfg.hmc = HmcConfig(**kwargs)
    else:
        raise ValueError(f"unknown key '{key}'")


def _row_seed(global_seed, row_index):
    return int(np.random.SeedSequence([global_seed, row_index]).generate_state(1)[0])


def attack_config_for_row(cfg, row_index):
    """Materialize one [attack] section into an AttackConfig + defended flag."""
    row = cfg.attacks[row_index]
    defended = bool(int(row.get("defended", "1" if cfg.defense else "0")))
    kwargs = dict(
        strategy=row.get("strategy", "oa"),
        distance=row.get("distance", "l2"),
        eps=float(row.get("eps", "0.05")),
        norm=row.get("norm", "inf"),
        steps=int(row.get("steps", "500")),
        step_size=float(row.get("lr", "1e-4")),
        batch_size=int(row.get("batch", "32")),
        seed=int(row["seed"]) if "seed" in row else _row_seed(cfg.seed, row_index),
        layer_fraction=float(row.get("layer_fraction", "1.0")),
        weighting=row.get("weighting", "equal"),
    )
    return ak.AttackConfig(**kwargs), defended


# ---------------------------------------------------------------------------
# experiment execution
# ---------------------------------------------------------------------------

@dataclass
class ResultRow:
    row_id: int
    strategy: str
    distance: str
    eps: float
    norm: str
    defended: bool
    seed: int
    status: str = "ok"
    message: str = ""
    per_sample: list = None
    trace: ak.AttackTrace = None
    runtime_seconds: float = 0.0

    def stats(self):
        vals = np.asarray(self.per_sample, dtype=np.float64)
        q25, q50, q75 = quantiles(vals, (0.25, 0.5, 0.75))
        return {
            "mean": float(vals.mean()),
            "std": float(np.sqrt(np.mean((vals - vals.mean()) ** 2))),
            "min": float(vals.min()),
            "max": float(vals.max()),
            "q25": q25, "q50": q50, "q75": q75,
            "n": int(vals.size),
        }


def quantiles(values, qs):
    """Linear interpolation between order statistics (the documented plot
    convention)."""
    vals = np.sort(np.asarray(values, dtype=np.float64))
    out = []
    for q in qs:
        pos = q * (vals.size - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, vals.size - 1)
        out.append(float(vals[lo] + (pos - lo) * (vals[hi] - vals[lo])))
    return out


def resolve_dataset(cfg):
    if cfg.dataset == "synthetic":
        return generate_synthetic_dataset(cfg.seed, cfg.dataset_count, cfg.dataset_side)
    return load_image_dir(cfg.dataset, cfg.dataset_side)


def resolve_model(cfg, dataset):
    if cfg.model_path:
        model = md.load_model(cfg.model_path)
    else:
        base = md.random_autoencoder(cfg.widths, cfg.latent_index, seed=cfg.seed,
                                     activations=cfg.activations,
                                     variational=cfg.variational, beta=cfg.beta)
        model, _ = md.train(base, dataset,
                            md.TrainConfig(epochs=cfg.epochs, lr=cfg.train_lr,
                                           batch_size=cfg.train_batch, seed=cfg.seed))
    for inj in cfg.injections:
        model = md.inject_ill_conditioning(model, inj.layer, inj.floor, inj.count)
    return model


def _run_row(model, dataset, eval_data, cfg, row_index):
    attack_cfg, defended = attack_config_for_row(cfg, row_index)
    row = ResultRow(row_index, attack_cfg.strategy, attack_cfg.distance,
                    attack_cfg.eps, attack_cfg.norm, defended, attack_cfg.seed)
    start = time.perf_counter()
    try:
        if defended:
            pert, trace = run_adaptive_attack(model, cfg.hmc, dataset, attack_cfg)
            result = ak.evaluate_attack(model, eval_data, pert, defense=cfg.hmc)
        else:
            pert, trace = ak.run_universal_attack(model, dataset, attack_cfg)
            result = ak.evaluate_attack(model, eval_data, pert)
        row.per_sample = result.per_sample
        row.trace = trace
    except Exception as exc:  # a failed row must not sink the others
        row.status = "error"
        row.message = f"{type(exc).__name__}: {exc}"
    row.runtime_seconds = time.perf_counter() - start
    return row


def run_experiment(cfg):
    """Execute every attack row, then emit results.csv, per_sample.csv,
    convergence.csv, gradient_hist.csv and spectral.csv under out_dir.

    Returns the ResultRow list; callers decide the exit code from statuses.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset = resolve_dataset(cfg)
    model = resolve_model(cfg, dataset)
    eval_count = cfg.eval_count or dataset.shape[0]
    eval_data = dataset[:eval_count]

    threads = int(os.environ.get("ILLCOND_THREADS", "1"))
    row_ids = list(range(len(cfg.attacks)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(
                lambda i: _run_row(model, dataset, eval_data, cfg, i), row_ids))
    else:
        rows = [_run_row(model, dataset, eval_data, cfg, i) for i in row_ids]

    _write_results_csv(rows, os.path.join(cfg.out_dir, "results.csv"))
    _write_per_sample_csv(rows, os.path.join(cfg.out_dir, "per_sample.csv"))
    _write_convergence_csv(rows, os.path.join(cfg.out_dir, "convergence.csv"))
    _write_gradient_hist_csv(rows, os.path.join(cfg.out_dir, "gradient_hist.csv"))
    sp.report_to_csv(sp.model_conditioning_report(model),
                     os.path.join(cfg.out_dir, "spectral.csv"))
    return rows


def _atomic_writer(path):
    return _AtomicFile(path)


class _AtomicFile:
    def __init__(self, path):
        self.path = path
        self.tmp = f"{path}.tmp.{os.getpid()}"

    def __enter__(self):
        self.fh = open(self.tmp, "w", newline="", encoding="utf-8")
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)
        return False


def _fmt(x):
    return repr(float(x))


def _write_results_csv(rows, path):
    with _atomic_writer(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row_id", "strategy", "distance", "eps", "norm", "defended",
                         "mean", "std", "min", "max", "q25", "q50", "q75", "n",
                         "runtime_seconds", "seed", "status", "message"])
        for row in rows:
            if row.status == "ok":
                s = row.stats()
                stats_cols = [_fmt(s["mean"]), _fmt(s["std"]), _fmt(s["min"]),
                              _fmt(s["max"]), _fmt(s["q25"]), _fmt(s["q50"]),
                              _fmt(s["q75"]), s["n"]]
            else:
                stats_cols = [""] * 7 + [0]
            writer.writerow([row.row_id, row.strategy, row.distance, _fmt(row.eps),
                             row.norm, int(row.defended), *stats_cols,
                             f"{row.runtime_seconds:.3f}", row.seed,
                             row.status, row.message])


def _write_per_sample_csv(rows, path):
    with _atomic_writer(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row_id", "sample_index", "distortion"])
        for row in rows:
            if row.per_sample is None:
                continue
            for i, v in enumerate(row.per_sample):
                writer.writerow([row.row_id, i, _fmt(v)])


def _write_convergence_csv(rows, path):
    with _atomic_writer(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row_id", "step", "objective", "eval_distortion", "budget_norm"])
        for row in rows:
            if row.trace is None:
                continue
            for t, (obj, dist, norm) in enumerate(zip(row.trace.objectives,
                                                      row.trace.eval_distortions,
                                                      row.trace.budget_norms)):
                writer.writerow([row.row_id, t, _fmt(obj), _fmt(dist), _fmt(norm)])


def _write_gradient_hist_csv(rows, path, bins=101, value_range=(-1e-3, 1e-3)):
    with _atomic_writer(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row_id", "kind", "x0", "x1", "count"])
        for row in rows:
            if row.trace is None or row.trace.grad_samples is None \
                    or len(row.trace.grad_samples) == 0:
                continue
            hist = sp.gradient_histogram(row.trace, bins=bins, value_range=value_range)
            writer.writerow([row.row_id, "underflow", "", _fmt(value_range[0]),
                             hist.underflow])
            for b in range(len(hist.counts)):
                writer.writerow([row.row_id, "bin", _fmt(hist.edges[b]),
                                 _fmt(hist.edges[b + 1]), int(hist.counts[b])])
            writer.writerow([row.row_id, "overflow", _fmt(value_range[1]), "",
                             hist.overflow])
            kurt = "nan" if hist.degenerate else _fmt(hist.excess_kurtosis)
            writer.writerow([row.row_id, "excess_kurtosis", "", "", kurt])


# ---------------------------------------------------------------------------
# box plots
# ---------------------------------------------------------------------------

def emit_boxplot_svg(groups, path, title="output distortion"):
    """Static SVG box plot: median, quartiles, whiskers at 1.5 IQR, outlier
    dots. ``groups`` is an ordered list of (label, values)."""
    groups = [(str(label), np.asarray(vals, dtype=np.float64)) for label, vals in groups]
    if not groups or any(v.size == 0 for _, v in groups):
        raise HarnessError("emit_boxplot_svg: empty input")

    stats = []
    for label, vals in groups:
        q25, q50, q75 = quantiles(vals, (0.25, 0.5, 0.75))
        iqr = q75 - q25
        in_lo = vals[vals >= q25 - 1.5 * iqr]
        in_hi = vals[vals <= q75 + 1.5 * iqr]
        w_lo = float(in_lo.min()) if in_lo.size else q25
        w_hi = float(in_hi.max()) if in_hi.size else q75
        outliers = vals[(vals < w_lo) | (vals > w_hi)]
        stats.append((label, q25, q50, q75, w_lo, w_hi, outliers))

    v_lo = min(min(s[4], s[6].min() if s[6].size else s[4]) for s in stats)
    v_hi = max(max(s[5], s[6].max() if s[6].size else s[5]) for s in stats)
    if v_hi == v_lo:
        v_hi = v_lo + 1.0

    width, height = 120 + 90 * len(stats), 360
    top, bottom, left = 40, 50, 70

    def y(value):
        frac = (value - v_lo) / (v_hi - v_lo)
        return height - bottom - frac * (height - top - bottom)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
             f'font-family="sans-serif" font-size="14">{title}</text>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" '
             f'stroke="black" stroke-width="1"/>']
    for i in range(5):
        val = v_lo + i * (v_hi - v_lo) / 4
        yy = y(val)
        parts.append(f'<line x1="{left - 4}" y1="{yy:.2f}" x2="{left}" y2="{yy:.2f}" '
                     f'stroke="black" stroke-width="1"/>')
        parts.append(f'<text x="{left - 8}" y="{yy + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="10">{val:.4g}</text>')

    box_w = 44
    for i, (label, q25, q50, q75, w_lo, w_hi, outliers) in enumerate(stats):
        cx = left + 50 + 90 * i
        parts.append(f'<line x1="{cx:.1f}" y1="{y(w_lo):.2f}" x2="{cx:.1f}" '
                     f'y2="{y(q25):.2f}" stroke="black" stroke-width="1"/>')
        parts.append(f'<line x1="{cx:.1f}" y1="{y(w_hi):.2f}" x2="{cx:.1f}" '
                     f'y2="{y(q75):.2f}" stroke="black" stroke-width="1"/>')
        for wv in (w_lo, w_hi):
            parts.append(f'<line x1="{cx - box_w / 4:.1f}" y1="{y(wv):.2f}" '
                         f'x2="{cx + box_w / 4:.1f}" y2="{y(wv):.2f}" '
                         f'stroke="black" stroke-width="1"/>')
        parts.append(f'<rect x="{cx - box_w / 2:.1f}" y="{y(q75):.2f}" width="{box_w}" '
                     f'height="{max(y(q25) - y(q75), 0.5):.2f}" fill="#9ecae1" '
                     f'stroke="black" stroke-width="1"/>')
        parts.append(f'<line x1="{cx - box_w / 2:.1f}" y1="{y(q50):.2f}" '
                     f'x2="{cx + box_w / 2:.1f}" y2="{y(q50):.2f}" '
                     f'stroke="black" stroke-width="2"/>')
        for ov in np.sort(outliers):
            parts.append(f'<circle cx="{cx:.1f}" cy="{y(float(ov)):.2f}" r="2" '
                         f'fill="none" stroke="black" stroke-width="0.8"/>')
        parts.append(f'<text x="{cx:.1f}" y="{height - bottom + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{label}</text>')
    parts.append("</svg>")

    with _atomic_writer(path) as fh:
        fh.write("\n".join(parts) + "\n")


def boxplot_from_results(out_dir, path=None):
    """Group per_sample.csv by attack row and draw the distortion box plot."""
    per_sample = os.path.join(out_dir, "per_sample.csv")
    results = os.path.join(out_dir, "results.csv")
    labels = {}
    with open(results, "r", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            tag = "+def" if rec["defended"] == "1" else ""
            labels[rec["row_id"]] = f"{rec['strategy']}-{rec['distance']}{tag}@{float(rec['eps']):g}"
    groups = {}
    with open(per_sample, "r", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            groups.setdefault(rec["row_id"], []).append(float(rec["distortion"]))
    if not groups:
        raise HarnessError(f"no per-sample rows found in {per_sample}")
    ordered = [(labels.get(rid, f"row{rid}"), vals)
               for rid, vals in sorted(groups.items(), key=lambda kv: int(kv[0]))]
    path = path or os.path.join(out_dir, "boxplot.svg")
    emit_boxplot_svg(ordered, path)
    return path
