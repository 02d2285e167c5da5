"""Command-line entry point: ``ldctbayes <command> --config run.json``.

Every command writes its artifacts into the output directory together with
``manifest_<command>.json`` (config hash, seeds, library versions and the
SHA-256 of each file). Outputs depend only on the config and seed, so a
repeated run with the same thread count reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import TrainingDiverged, reconstruct_pipeline
from .config import (METHODS, ConfigError, RunConfig, env_threads, load_config, parse_config)
from .io import (load_image, load_sinogram, save_checkpoint, save_image, save_png, save_sinogram,
                 to_uint8, write_json)
from .metrics import evaluate, to_hu
from .projector import GeometryError, ImageGrid, Sinogram, fbp_reconstruct, fov_mask
from .sim import DoseModel, RawCounts, log_transform, make_phantom, simulate_counts
from .tvsolver import CGBreakdown, pwls_tv_admm

log = logging.getLogger("ldctbayes")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

CSV_FIELDS = ("run_id", "method", "dose", "psnr", "rmse", "ssim", "wall_time_s")


@dataclass
class Outcome:
    image: ImageGrid
    variance: np.ndarray | None = None
    samples: list | None = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- helpers

def sim_seed(seed: int, dose_index: int = 0) -> int:
    """Noise seed for repeat ``seed`` at position ``dose_index`` of the dose list."""
    return int(np.random.SeedSequence([int(seed), int(dose_index)]).generate_state(1)[0])


def set_threads(n: int | None) -> None:
    if n is None:
        return
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)


def _versions() -> dict:
    import numba
    import scipy

    return {"ldctbayes": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    """Collects written files and writes ``manifest_<command>.json``."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg, self.command = cfg, command
        self.files: list[Path] = []
        self.info: dict = {}

    def add(self, *paths) -> None:
        self.files.extend(Path(p) for p in paths)

    def write(self) -> Path:
        out = self.cfg.output_dir
        entries = {}
        for p in sorted(set(self.files)):
            entries[str(p.relative_to(out)) if p.is_relative_to(out) else str(p)] = _sha256(p)
        path = out / f"manifest_{self.command.replace('-', '_')}.json"
        write_json(path, {"command": self.command, "config_sha256": self.cfg.sha256(),
                          "config": self.cfg.raw, "seed": self.cfg.seed, "versions": _versions(),
                          "files": entries, **self.info})
        return path


def _stem_files(stem: Path, *suffixes) -> list[Path]:
    return [stem.with_suffix(s) for s in suffixes]


def _window(cfg: RunConfig, ref: np.ndarray | None, fallback: np.ndarray) -> tuple:
    disp = cfg.block("display")
    w = disp.resolved_window()
    if w is not None:
        return w
    src = ref if ref is not None else fallback
    return float(src.min()), float(src.max())


def _display_values(cfg: RunConfig, values: np.ndarray) -> np.ndarray:
    disp = cfg.block("display")
    return to_hu(values, disp.mu_water) if disp.units == "hu" else values


def make_geometry_phantom(cfg: RunConfig):
    """Geometry, ground-truth phantom (or ``None``), image shape and pixel size."""
    geom = cfg.block("geometry")
    inputs = cfg.block("inputs")
    if inputs.phantom:
        ph, _ = load_image(inputs.phantom)
        return geom, ph, ph.shape, ph.pixel_size_mm
    pc = cfg.block("phantom")
    ps = geom.fit_pixel_size(pc.size)
    ph = make_phantom(pc.size, pc.kind, pc.seed, pc.attenuation_max, ps, pc.oversample)
    return geom, ph, ph.shape, ps


def measurement(cfg: RunConfig, geom, phantom, dose: DoseModel, seed: int, dose_index: int = 0):
    """``(raw counts or None, log sinogram)`` from ``inputs.sinogram`` or a fresh simulation."""
    inputs = cfg.block("inputs")
    if inputs.sinogram:
        data, g2, _ = load_sinogram(inputs.sinogram)
        if g2 != geom:
            raise ConfigError("geometry of inputs.sinogram differs from the geometry block",
                              cfg.source, None, "inputs.sinogram")
        if isinstance(data, RawCounts):
            return data, log_transform(data, dose)
        return None, data
    if phantom is None:
        raise ConfigError("no sinogram and no phantom to simulate from", cfg.source, None, "inputs")
    raw = simulate_counts(phantom, geom, dose, sim_seed(seed, dose_index))
    return raw, log_transform(raw, dose)


def clamp_nonneg(img: ImageGrid) -> ImageGrid:
    """Report-time clamp: negative attenuation is not physical."""
    return ImageGrid(np.maximum(img.values, 0.0), img.pixel_size_mm)


def reconstruct(cfg: RunConfig, method: str, y: Sinogram, geom, shape, ps, alpha: float | None = None,
                seed: int | None = None, keep_samples: bool = False) -> Outcome:
    """Run one method. ``image`` is clamped at zero; solvers never see the clamp."""
    out = _reconstruct(cfg, method, y, geom, shape, ps, alpha, seed, keep_samples)
    out.extra["unclamped"] = out.image
    out.image = clamp_nonneg(out.image)
    return out


def _reconstruct(cfg, method, y, geom, shape, ps, alpha, seed, keep_samples) -> Outcome:
    if method == "fbp":
        return Outcome(fbp_reconstruct(y, geom, shape, ps, cfg.block("fbp", method).filter))
    if method == "pwls_tv":
        ac = cfg.block("admm", method)
        if alpha is not None:
            ac = replace(ac, alpha=alpha)
        x, trace = pwls_tv_admm(y, geom, shape, ps, ac)
        return Outcome(x, extra={"trace": trace, "admm": ac.to_dict()})
    spec = cfg.block("network", method)
    tc = cfg.train_config(method)
    changes = {}
    if alpha is not None:
        changes["alpha"] = alpha
    if seed is not None and "seed" not in cfg.raw.get("train", {}):
        changes["seed"] = seed
    if changes:
        tc = replace(tc, **changes)
    res = reconstruct_pipeline(y, geom, spec, tc, shape, ps, keep_samples=keep_samples,
                               fbp_filter=cfg.block("fbp", method).filter)
    return Outcome(res.mean_image, res.variance, res.samples,
                   {"loss": res.loss, "manifest": res.manifest, "weights": res.weights, "spec": spec})


def _metrics(cfg: RunConfig, x: np.ndarray, ref: np.ndarray, geom, ps) -> dict:
    disp = cfg.block("display")
    mask = fov_mask(ref.shape, ps, geom)
    return evaluate(x, ref, mask, disp.mu_water).to_dict()


# ---------------------------------------------------------------- commands

def cmd_phantom(cfg: RunConfig, args) -> None:
    man = Manifest(cfg, "phantom")
    geom, ph, _, _ = make_geometry_phantom(cfg)
    stem = cfg.output_dir / "phantom"
    save_image(stem, ph, phantom=cfg.raw.get("phantom", {}))
    png = stem.with_suffix(".png")
    save_png(png, _display_values(cfg, ph.values), _window(cfg, None, _display_values(cfg, ph.values)))
    man.add(*_stem_files(stem, ".f32", ".json"), png)
    man.write()


def cmd_simulate(cfg: RunConfig, args) -> None:
    man = Manifest(cfg, "simulate")
    geom, ph, _, _ = make_geometry_phantom(cfg)
    dose = cfg.block("dose")
    seed = sim_seed(cfg.seed)
    raw = simulate_counts(ph, geom, dose, seed)
    y = log_transform(raw, dose)
    meta = {"dose": {"intensity": dose.intensity, "sigma_e2": dose.sigma_e2}, "noise_seed": seed}
    c_stem, s_stem = cfg.output_dir / "counts", cfg.output_dir / "sinogram"
    save_sinogram(c_stem, raw, geom, kind="raw_counts", **meta)
    save_sinogram(s_stem, y, geom, **meta)
    png = s_stem.with_suffix(".png")
    save_png(png, y.values)
    man.add(*_stem_files(c_stem, ".f32", ".json"), *_stem_files(s_stem, ".f32", ".json"), png)
    man.info["noise_seed"] = seed
    man.write()


def _write_trace_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
    path.write_text(buf.getvalue())


def run_single(cfg: RunConfig, method: str, command: str, keep_samples: bool = False) -> dict:
    man = Manifest(cfg, command)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    geom, ph, shape, ps = make_geometry_phantom(cfg)
    inputs = cfg.block("inputs")
    ref = None
    if inputs.reference:
        ref = load_image(inputs.reference)[0].values
    elif ph is not None and not inputs.sinogram:
        ref = ph.values
    dose = cfg.block("dose")
    _, y = measurement(cfg, geom, ph, dose, cfg.seed)
    res = reconstruct(cfg, method, y, geom, shape, ps, keep_samples=keep_samples)

    stem = out / f"recon_{method}"
    save_image(stem, res.image, method=method, config_sha256=cfg.sha256())
    png = stem.with_suffix(".png")
    shown = _display_values(cfg, res.image.values)
    save_png(png, shown, _window(cfg, None if ref is None else _display_values(cfg, ref), shown))
    man.add(*_stem_files(stem, ".f32", ".json"), png)

    if "trace" in res.extra:
        p = out / "admm_trace.csv"
        _write_trace_csv(p, ("iteration", "objective", "primal_residual", "dual_residual", "rho",
                             "cg_steps"), res.extra["trace"].rows())
        man.add(p)
    if "loss" in res.extra:
        p = out / f"loss_{method}.csv"
        _write_trace_csv(p, ("iteration", "total", "fidelity", "tv"),
                         ((i + 1, *map(float, row)) for i, row in enumerate(res.extra["loss"])))
        ck = out / f"weights_{method}"
        tc = res.extra["manifest"]["train_config"]
        save_checkpoint(ck, res.extra["weights"], res.extra["spec"], seed=tc["seed"],
                        iterations=tc["iterations"])
        man.add(p, *_stem_files(ck, ".bin", ".json"))
        man.info["recon"] = res.extra["manifest"]
    if res.variance is not None and method == "proposed":
        vstem = out / f"variance_{method}"
        save_image(vstem, ImageGrid(res.variance, ps), method=method)
        man.add(*_stem_files(vstem, ".f32", ".json"))
    if res.samples is not None:
        for k, s in enumerate(res.samples):
            sstem = out / f"samples_{method}" / f"sample_{k:03d}"
            save_image(sstem, ImageGrid(s, ps), method=method, index=k)
            man.add(*_stem_files(sstem, ".f32", ".json"))
    metrics = None
    if ref is not None:
        metrics = _metrics(cfg, res.image.values, ref, geom, ps)
        p = out / f"metrics_{method}.json"
        write_json(p, metrics)
        man.add(p)
        man.info["metrics"] = metrics
    man.write()
    return {"metrics": metrics}


def cmd_fbp(cfg, args):
    return run_single(cfg, "fbp", "fbp")


def cmd_pwls_tv(cfg, args):
    return run_single(cfg, "pwls_tv", "pwls-tv")


def cmd_dip_tv(cfg, args):
    return run_single(cfg, "dip_tv", "dip-tv", args.keep_samples)


def cmd_recon(cfg, args):
    return run_single(cfg, cfg.method, "recon", args.keep_samples)


def cmd_eval(cfg: RunConfig, args) -> None:
    inputs = cfg.block("inputs")
    for name in ("image", "reference"):
        if not getattr(inputs, name):
            raise ConfigError("eval needs this input", cfg.source, None, f"inputs.{name}")
    man = Manifest(cfg, "eval")
    img, _ = load_image(inputs.image)
    ref, _ = load_image(inputs.reference)
    if img.shape != ref.shape:
        raise ConfigError(f"image {img.shape} and reference {ref.shape} differ in shape", cfg.source)
    geom = cfg.block("geometry")
    try:
        mask = fov_mask(ref.shape, ref.pixel_size_mm, geom)
    except GeometryError:
        mask = None
    rep = evaluate(img.values, ref.values, mask, cfg.block("display").mu_water).to_dict()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    p = out / "metrics.csv"
    _write_trace_csv(p, ("image", "reference", *rep), [(inputs.image, inputs.reference, *rep.values())])
    png = out / "eval.png"
    a, b = _display_values(cfg, img.values), _display_values(cfg, ref.values)
    w = _window(cfg, b, a)
    diff = np.abs(img.values - ref.values)
    strip = np.concatenate([to_uint8(a, w), to_uint8(b, w),
                            to_uint8(diff, (0.0, float(diff.max()) or 1.0))], axis=1)
    _save_u8(png, strip)
    man.add(p, png)
    man.info["metrics"] = rep
    man.write()


def _save_u8(path: Path, arr: np.ndarray) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="L").save(path)


# ---------------------------------------------------------------- benchmark

def _bench_cell(raw: dict, source: str, seed: int, dose_index: int, dose_value: float,
                method: str, record_time: bool):
    cfg = parse_config(raw, source, seed=seed)
    bc = cfg.block("benchmark")
    geom, ph, shape, ps = make_geometry_phantom(cfg)
    dose = replace(cfg.block("dose"), intensity=dose_value)
    _, y = measurement(cfg, geom, ph, dose, seed, dose_index)
    t0 = time.perf_counter()
    res = reconstruct(cfg, method, y, geom, shape, ps, bc.alpha_for(method, dose_value), seed)
    wall = time.perf_counter() - t0
    rep = evaluate(res.image.values, ph.values)
    return {"run_id": f"s{seed}-d{dose_value:g}", "method": method, "dose": dose_value,
            "seed": seed, "psnr": rep.psnr_db, "rmse": rep.rmse, "ssim": rep.ssim,
            "wall_time_s": wall if record_time else None, "image": res.image.values}


def run_benchmark(cfg: RunConfig) -> list[dict]:
    """Run every (seed, dose, method) cell; rows in deterministic order."""
    bc = cfg.block("benchmark")
    seeds = bc.seeds or (cfg.seed,)
    cells = [(s, i, d, m) for s in seeds for i, d in enumerate(bc.doses) for m in bc.methods]
    args = [(cfg.raw, cfg.source, s, i, d, m, bc.record_wall_time) for s, i, d, m in cells]
    if bc.workers > 1:
        with ProcessPoolExecutor(bc.workers) as pool:
            rows = list(pool.map(_bench_cell, *zip(*args)))
    else:
        rows = []
        for a in args:
            log.info("benchmark cell seed=%d dose=%g method=%s", a[2], a[4], a[5])
            rows.append(_bench_cell(*a))
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Median PSNR/RMSE/SSIM per (dose, method) across seeds."""
    out = []
    keys = sorted({(r["dose"], r["method"]) for r in rows},
                  key=lambda k: (k[0], METHODS.index(k[1])))
    for dose, method in keys:
        sel = [r for r in rows if r["dose"] == dose and r["method"] == method]
        out.append({"method": method, "dose": dose, "n": len(sel),
                    **{m: float(np.median([r[m] for r in sel])) for m in ("psnr", "rmse", "ssim")}})
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}" if np.isfinite(v) else str(v)
    return str(v)


def write_benchmark_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) if k != "dose" else f"{r[k]:g}" for k in CSV_FIELDS])
    Path(path).write_text(buf.getvalue())


def _zoom_tile(img8: np.ndarray, box: tuple, factor: int = 2) -> np.ndarray:
    """Tile with ``box`` outlined and a ``factor``-times enlarged inset in the lower right."""
    tile = img8.copy()
    r, c, h, w = box
    crop = img8[r:r + h, c:c + w]
    inset = np.kron(crop, np.ones((factor, factor), dtype=np.uint8))
    ih, iw = inset.shape
    H, W = tile.shape
    ih, iw = min(ih, H - 1), min(iw, W - 1)
    tile[H - ih - 1:H, W - iw - 1:W] = 255
    tile[H - ih:H, W - iw:W] = inset[:ih, :iw]
    tile[r, c:c + w] = tile[r + h - 1, c:c + w] = 255
    tile[r:r + h, c] = tile[r:r + h, c + w - 1] = 255
    return tile


def montage(cfg: RunConfig, rows: list[dict], reference: np.ndarray, seed: int) -> np.ndarray:
    """Rows: doses; columns: reference then each method. 8-bit, with zoom insets."""
    bc = cfg.block("benchmark")
    h, w = reference.shape
    box = tuple(int(v) for v in bc.zoom_box) if bc.zoom_box else (h // 2 - h // 8, w // 2 - w // 8,
                                                                 h // 4, w // 4)
    ref_disp = _display_values(cfg, reference)
    win = _window(cfg, ref_disp, ref_disp)
    pad = 2
    lines = []
    for dose in bc.doses:
        tiles = [_zoom_tile(to_uint8(ref_disp, win), box)]
        for m in bc.methods:
            r = next(r for r in rows if r["seed"] == seed and r["dose"] == dose and r["method"] == m)
            tiles.append(_zoom_tile(to_uint8(_display_values(cfg, r["image"]), win), box))
        line = np.full((h, len(tiles) * (w + pad) - pad), 0, dtype=np.uint8)
        for j, t in enumerate(tiles):
            line[:, j * (w + pad): j * (w + pad) + w] = t
        lines.append(line)
    sep = np.zeros((pad, lines[0].shape[1]), dtype=np.uint8)
    out = lines[0]
    for ln in lines[1:]:
        out = np.concatenate([out, sep, ln], axis=0)
    return out


def cmd_benchmark(cfg: RunConfig, args) -> list[dict]:
    man = Manifest(cfg, "benchmark")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = run_benchmark(cfg)
    p = out / "benchmark.csv"
    write_benchmark_csv(p, rows)
    summary = summarize(rows)
    ps = out / "benchmark_summary.csv"
    _write_trace_csv(ps, ("method", "dose", "n", "psnr", "rmse", "ssim"),
                     ((s["method"], f"{s['dose']:g}", s["n"], s["psnr"], s["rmse"], s["ssim"])
                      for s in summary))
    _, ph, _, _ = make_geometry_phantom(cfg)
    png = out / "montage.png"
    bc = cfg.block("benchmark")
    _save_u8(png, montage(cfg, rows, ph.values, (bc.seeds or (cfg.seed,))[0]))
    man.add(p, ps, png)
    man.info["summary"] = summary
    man.write()
    return rows


COMMANDS = {
    "phantom": (cmd_phantom, "generate the ground-truth phantom"),
    "simulate": (cmd_simulate, "simulate raw counts and the log sinogram"),
    "fbp": (cmd_fbp, "filtered backprojection"),
    "pwls-tv": (cmd_pwls_tv, "TV-regularised least squares by ADMM"),
    "dip-tv": (cmd_dip_tv, "network fit without dropout (DIP+TV)"),
    "recon": (cmd_recon, "reconstruct with the method named in the config (default: proposed)"),
    "eval": (cmd_eval, "metrics of inputs.image against inputs.reference"),
    "benchmark": (cmd_benchmark, "all methods across doses (and seeds) -> CSV + montage"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldctbayes", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=str, default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
        p.add_argument("--out", type=str, default=None, help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
        p.add_argument("--keep-samples", action="store_true", help="write every MC sample image")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        threads = args.threads if args.threads is not None else env_threads()
        if threads is not None and threads < 1:
            raise ConfigError("--threads must be >= 1")
        set_threads(threads)
        cfg = load_config(args.config, args.seed, args.out)
        func(cfg, args)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, CGBreakdown, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
