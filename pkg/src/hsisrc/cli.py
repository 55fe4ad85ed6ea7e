"""Experiment runner: synth, classify, toy-pattern, sweep, and eval subcommands.

Every run writes a manifest of `key = value` pairs holding the fully resolved
configuration; re-running with ``--config manifest.kv`` reproduces the run
(result_* and time_* keys in a manifest are informational and ignored on
parse). Flags override config-file values, which override defaults.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .core import (
    PriorKind,
    PriorSpec,
    build_dictionary_split,
    dictionary_from_pixels,
    stratified_counts,
)
from .classify import ClassifierConfig, build_similarity_weights, classify_image
from .data_io import (
    SceneSpec,
    default_palette,
    load_cube,
    load_labels,
    parse_kv_file,
    parse_scene_spec,
    save_cube,
    save_labels,
    save_map,
    save_pattern,
    write_kv_file,
)
from .evaluation import (
    confusion_matrix,
    format_confusion,
    format_metrics_kv,
    format_metrics_table,
    metrics,
)
from .prox import ProxResult
from .solvers import SolverParams, admm_solve, fss_solve, sparsa_solve

log = logging.getLogger(__name__)

OUTDIR_ENV = "HSISRC_OUTDIR"


@dataclass
class RunConfig:
    """Fully resolved run settings; one flat namespace shared by all commands."""

    header: str = ""
    raw: str = ""
    labels: str = ""
    synth: str = ""
    prior: str = "l1"
    lam: float = 0.01
    lam2: float = 0.0  # 0 means "same as lam" for priors that need it
    solver: str = "admm"
    window: int = 9
    sigma: float = 1.0
    normalize: bool = True
    n_train: int = 0  # 0 means 10% of the labeled pixels
    seed: int = 0
    workers: int = 0  # 0 means the available CPU count
    outdir: str = ""
    rho: float = 1.0
    max_iters: int = 2000
    tol_abs: float = 1e-6
    tol_rel: float = 1e-4
    toy_per_class: int = 30
    lambda_grid: str = ""
    lambda2_grid: str = ""


_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}


def config_from_file(path) -> RunConfig:
    """Read a config or manifest file; unknown keys (result_*, ...) are skipped."""
    kv = parse_kv_file(path)
    cfg = RunConfig()
    for f in fields(RunConfig):
        if f.name not in kv:
            continue
        raw_value = kv[f.name]
        if f.type == "bool" or isinstance(getattr(cfg, f.name), bool):
            lowered = raw_value.lower()
            if lowered in _BOOL_TRUE:
                value = True
            elif lowered in _BOOL_FALSE:
                value = False
            else:
                raise ValueError(f"cannot parse boolean {f.name} = {raw_value!r}")
        elif isinstance(getattr(cfg, f.name), int):
            value = int(raw_value)
        elif isinstance(getattr(cfg, f.name), float):
            value = float(raw_value)
        else:
            value = raw_value
        setattr(cfg, f.name, value)
    return cfg


def _merge_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return replace(cfg, **overrides)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = config_from_file(args.config) if getattr(args, "config", None) else RunConfig()
    return _merge_flags(cfg, args)


class ConfigError(ValueError):
    """Invalid configuration detected before any work starts."""


def _build_prior(cfg: RunConfig) -> PriorSpec:
    try:
        kind = PriorKind(cfg.prior)
    except ValueError:
        valid = ", ".join(k.value for k in PriorKind)
        raise ConfigError(f"unknown prior {cfg.prior!r} (expected one of {valid})") from None
    if not cfg.lam > 0:
        raise ConfigError("lambda must be positive")
    if kind in (PriorKind.LAPLACIAN, PriorKind.SPARSE_GROUP):
        lam2 = cfg.lam2 if cfg.lam2 > 0 else cfg.lam
        return PriorSpec(kind, cfg.lam, lam2)
    if cfg.lam2 > 0:
        raise ConfigError(f"prior {kind.value} does not take lambda2")
    return PriorSpec(kind, cfg.lam)


def _solver_params(cfg: RunConfig) -> SolverParams:
    return SolverParams(
        rho=cfg.rho, max_iters=cfg.max_iters, tol_abs=cfg.tol_abs, tol_rel=cfg.tol_rel
    )


def _load_scene(cfg: RunConfig):
    if cfg.synth:
        spec = parse_scene_spec(cfg.synth)
        return synth_scene_pair(spec, cfg.seed)
    if cfg.header and cfg.raw and cfg.labels:
        cube = load_cube(cfg.header, cfg.raw)
        labels = load_labels(cfg.labels, cube.width, cube.height)
        return cube, labels
    raise ConfigError("give either --synth or all of --header/--raw/--labels")


def synth_scene_pair(spec: SceneSpec, seed: int):
    from .data_io import synth_generate

    return synth_generate(spec, seed)


def _resolve_n_train(cfg: RunConfig, labels) -> int:
    total = int(np.count_nonzero(labels.labels))
    k = labels.n_classes
    if cfg.n_train > 0:
        return cfg.n_train
    auto = max(k, round(0.1 * total))
    return min(auto, total - 1)


def _resolve_workers(cfg: RunConfig) -> int:
    return cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)


def _resolve_outdir(cfg: RunConfig) -> Path:
    outdir = cfg.outdir or os.environ.get(OUTDIR_ENV, "runs")
    path = Path(outdir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest_entries(cfg: RunConfig) -> dict:
    entries = {}
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        entries[f.name] = str(value).lower() if isinstance(value, bool) else value
    return entries


# ---------------------------------------------------------------------------
# subcommands


def run_classify(cfg: RunConfig) -> int:
    t_start = time.perf_counter()
    outdir = _resolve_outdir(cfg)
    prior = _build_prior(cfg)
    config = ClassifierConfig(prior, cfg.window, cfg.solver, cfg.sigma)
    cube, truth = _load_scene(cfg)
    n_train = _resolve_n_train(cfg, truth)
    workers = _resolve_workers(cfg)
    cfg = replace(cfg, n_train=n_train, workers=workers)

    dictionary, test = build_dictionary_split(cube, truth, n_train, cfg.seed, cfg.normalize)
    t_solve = time.perf_counter()
    predicted = classify_image(
        cube, dictionary, config, test, _solver_params(cfg), workers=workers
    )
    solve_seconds = time.perf_counter() - t_solve

    cm = confusion_matrix(truth, predicted, test)
    m = metrics(cm)
    palette = default_palette(truth.n_classes)
    save_labels(predicted, outdir / "predicted_labels.u16")
    save_map(predicted, palette, outdir / "predicted_map.ppm")
    save_map(truth, palette, outdir / "truth_map.ppm")
    (outdir / "metrics.txt").write_text(format_metrics_table(m), encoding="utf-8")
    (outdir / "metrics.kv").write_text(format_metrics_kv(m), encoding="utf-8")
    (outdir / "confusion.txt").write_text(format_confusion(cm), encoding="utf-8")

    manifest = _manifest_entries(cfg)
    manifest["result_oa"] = repr(m.oa)
    manifest["result_aa"] = repr(m.aa)
    manifest["result_kappa"] = repr(m.kappa)
    manifest["result_rejections"] = int(cm.rejections.sum())
    manifest["time_solve_seconds"] = f"{solve_seconds:.3f}"
    manifest["time_total_seconds"] = f"{time.perf_counter() - t_start:.3f}"
    write_kv_file(outdir / "manifest.kv", manifest)

    print(f"OA = {m.oa:.2f}%  AA = {m.aa:.2f}%  kappa = {m.kappa:.3f}")
    print(f"outputs written to {outdir}")
    return 0


#: toy solver assignment: the hierarchical prior runs on SpaRSA and the
#: Laplacian prior on feature-sign search, everything else on ADMM
TOY_PRIORS = (
    (PriorKind.L1, "admm"),
    (PriorKind.JOINT_SPARSITY, "admm"),
    (PriorKind.GROUP, "admm"),
    (PriorKind.SPARSE_GROUP, "sparsa"),
    (PriorKind.LOW_RANK, "admm"),
    (PriorKind.LOW_RANK_GROUP, "admm"),
    (PriorKind.LAPLACIAN, "fss"),
)


def run_toy(cfg: RunConfig) -> int:
    """Solve every prior on one two-class block and render the sparsity patterns."""
    t_start = time.perf_counter()
    outdir = _resolve_outdir(cfg)
    if not cfg.lam > 0:
        raise ConfigError("lambda must be positive")
    lam2 = cfg.lam2 if cfg.lam2 > 0 else cfg.lam
    per = cfg.toy_per_class
    if cfg.synth:
        spec = parse_scene_spec(cfg.synth)
    else:
        spec = SceneSpec(width=per, height=4, n_classes=2, bands=50,
                         subspace_dim=3, layout="stripes")
    cube, truth = synth_scene_pair(spec, cfg.seed)
    total = int(np.count_nonzero(truth.labels))
    n_train = cfg.n_train if cfg.n_train > 0 else total // 2
    dictionary, test = build_dictionary_split(cube, truth, n_train, cfg.seed, cfg.normalize)

    spectra = np.stack([cube.spectrum(r, c) for (r, c), _ in test], axis=1)
    pixel_classes = np.array([g for _, g in test])
    params = _solver_params(cfg)
    graph = build_similarity_weights(spectra, cfg.sigma)

    stats_rows = []
    kv = {}
    for kind, solver in TOY_PRIORS:
        lam2_arg = lam2 if kind in (PriorKind.LAPLACIAN, PriorKind.SPARSE_GROUP) else None
        prior = PriorSpec(kind, cfg.lam, lam2_arg)
        if solver == "admm":
            x, _ = admm_solve(dictionary, spectra, prior, params, graph=graph)
            values = x.values
        elif solver == "sparsa":
            x, _ = sparsa_solve(dictionary, spectra, prior, params, graph=graph)
            values = x.values
        else:
            values, _ = fss_solve(
                dictionary.atoms, spectra, prior.lam, graph=graph,
                lam2=prior.lam2, params=params,
            )
        stats = ProxResult.from_output(values, dictionary.groups, tol=1e-9)
        save_pattern(values, outdir / f"pattern_{kind.value}.pgm")
        ranks = ",".join(str(r) for r in stats.group_ranks)
        stats_rows.append(
            f"{kind.value:<6}{stats.nonzero_rows:>14}{stats.active_groups:>15}  {ranks}"
        )
        kv[f"{kind.value}_nonzero_rows"] = stats.nonzero_rows
        kv[f"{kind.value}_active_groups"] = stats.active_groups
        kv[f"{kind.value}_group_ranks"] = ranks

    # desired-region overlay: atom rows of class g lit on pixels of class g
    palette = np.asarray(default_palette(dictionary.n_classes), dtype=np.uint8)
    desired = np.zeros((dictionary.n_atoms, spectra.shape[1], 3), dtype=np.uint8)
    for g, sl in dictionary.groups.blocks():
        desired[sl, pixel_classes == g] = palette[g]
    header = f"P6\n{desired.shape[1]} {desired.shape[0]}\n255\n".encode("ascii")
    (outdir / "desired.ppm").write_bytes(header + desired.tobytes())

    table = "\n".join(
        [f"{'prior':<6}{'nonzero_rows':>14}{'active_groups':>15}  group_ranks"] + stats_rows
    )
    (outdir / "toy_stats.txt").write_text(table + "\n", encoding="utf-8")
    write_kv_file(outdir / "toy_stats.kv", kv)
    manifest = _manifest_entries(replace(cfg, n_train=n_train))
    manifest["time_total_seconds"] = f"{time.perf_counter() - t_start:.3f}"
    write_kv_file(outdir / "manifest.kv", manifest)
    print(table)
    print(f"outputs written to {outdir}")
    return 0


def _parse_grid(text: str) -> list[float]:
    if not text:
        return [float(v) for v in np.logspace(-3, -1, 5)]
    return [float(item) for item in text.split(",") if item.strip()]


def run_sweep(cfg: RunConfig) -> int:
    """Pick lambda by validation OA on a held-out fifth of the training pixels."""
    t_start = time.perf_counter()
    outdir = _resolve_outdir(cfg)
    try:
        kind = PriorKind(cfg.prior)
    except ValueError:
        raise ConfigError(f"unknown prior {cfg.prior!r}") from None
    needs_lam2 = kind in (PriorKind.LAPLACIAN, PriorKind.SPARSE_GROUP)
    lam_grid = _parse_grid(cfg.lambda_grid)
    lam2_grid = _parse_grid(cfg.lambda2_grid) if needs_lam2 else [None]

    cube, truth = _load_scene(cfg)
    n_train = _resolve_n_train(cfg, truth)
    workers = _resolve_workers(cfg)
    cfg = replace(cfg, n_train=n_train, workers=workers)
    dictionary, test = build_dictionary_split(cube, truth, n_train, cfg.seed, cfg.normalize)

    # recover the training pixels as the labeled complement of the test set
    labeled = {((r, c), int(truth.labels[r, c]))
               for r, c in zip(*np.nonzero(truth.labels))}
    train = sorted(labeled - set(test), key=lambda item: (item[1], item[0]))
    sizes = np.bincount([g for _, g in train])[1:]
    n_fit = max(truth.n_classes, round(0.8 * len(train)))
    n_fit = min(n_fit, len(train) - 1)
    fit_counts = stratified_counts(sizes, n_fit)
    rng = np.random.default_rng([cfg.seed, 17])
    fit_pixels, val_pixels = [], []
    offset = 0
    for g in range(1, truth.n_classes + 1):
        members = [item for item in train if item[1] == g]
        chosen = set(int(i) for i in rng.choice(len(members), int(fit_counts[g - 1]), replace=False))
        fit_pixels.extend(members[i] for i in sorted(chosen))
        val_pixels.extend(members[i] for i in range(len(members)) if i not in chosen)
        offset += len(members)
    dict_fit = dictionary_from_pixels(cube, fit_pixels, normalize=cfg.normalize)

    params = _solver_params(cfg)
    rows = []
    best = None  # (negative oa, lam, lam2)
    for lam in lam_grid:
        for lam2 in lam2_grid:
            tag = f"lambda={lam:g}" + (f" lambda2={lam2:g}" if lam2 is not None else "")
            try:
                prior = PriorSpec(kind, lam, lam2)
                config = ClassifierConfig(prior, cfg.window, cfg.solver, cfg.sigma)
                predicted = classify_image(
                    cube, dict_fit, config, val_pixels, params, workers=workers
                )
                oa = metrics(confusion_matrix(truth, predicted, val_pixels)).oa
                rows.append((lam, lam2, oa, "ok"))
                key = (-oa, lam, lam2 if lam2 is not None else 0.0)
                if best is None or key < best[0]:
                    best = (key, lam, lam2)
                print(f"{tag}: validation OA = {oa:.2f}%")
            except Exception as err:  # a failing point must not kill the sweep
                rows.append((lam, lam2, float("nan"), f"failed: {err}"))
                print(f"{tag}: failed ({err})", file=sys.stderr)
    sweep_kv = {}
    for i, (lam, lam2, oa, status) in enumerate(rows):
        sweep_kv[f"point_{i}_lambda"] = repr(lam)
        if lam2 is not None:
            sweep_kv[f"point_{i}_lambda2"] = repr(lam2)
        sweep_kv[f"point_{i}_oa"] = repr(oa)
        sweep_kv[f"point_{i}_status"] = status
    if best is None:
        write_kv_file(outdir / "sweep.kv", sweep_kv)
        raise RuntimeError("every sweep point failed")
    _, best_lam, best_lam2 = best
    sweep_kv["selected_lambda"] = repr(best_lam)
    if best_lam2 is not None:
        sweep_kv["selected_lambda2"] = repr(best_lam2)
    write_kv_file(outdir / "sweep.kv", sweep_kv)
    print(f"selected lambda = {best_lam:g}"
          + (f", lambda2 = {best_lam2:g}" if best_lam2 is not None else ""))

    final = replace(cfg, lam=best_lam, lam2=best_lam2 if best_lam2 is not None else 0.0)
    status = run_classify(final)
    manifest_path = _resolve_outdir(final) / "manifest.kv"
    manifest = parse_kv_file(manifest_path)
    manifest["time_sweep_seconds"] = f"{time.perf_counter() - t_start:.3f}"
    write_kv_file(manifest_path, manifest)
    return status


def run_synth(cfg: RunConfig) -> int:
    outdir = _resolve_outdir(cfg)
    spec = parse_scene_spec(cfg.synth or "blocks")
    cube, labels = synth_scene_pair(spec, cfg.seed)
    save_cube(cube, outdir / "cube.hdr", outdir / "cube.raw", name=cfg.synth or "blocks")
    save_labels(labels, outdir / "labels.u16")
    save_map(labels, default_palette(labels.n_classes), outdir / "truth_map.ppm")
    write_kv_file(
        outdir / "scene.kv",
        {
            "scene": cfg.synth or "blocks",
            "seed": cfg.seed,
            "width": cube.width,
            "height": cube.height,
            "bands": cube.bands,
            "classes": labels.n_classes,
        },
    )
    print(f"scene written to {outdir}")
    return 0


def run_eval(args: argparse.Namespace) -> int:
    truth = load_labels(args.truth, args.width, args.height)
    predicted = load_labels(args.pred, args.width, args.height)
    coords = list(zip(*np.nonzero(truth.labels)))
    test = [((int(r), int(c)), int(truth.labels[r, c])) for r, c in coords]
    cm = confusion_matrix(truth, predicted, test)
    m = metrics(cm)
    print(format_metrics_table(m), end="")
    rejected = int(cm.rejections.sum())
    if rejected:
        print(f"unpredicted labeled pixels (excluded from the metrics): {rejected}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(format_metrics_table(m), encoding="utf-8")
        (out / "metrics.kv").write_text(format_metrics_kv(m), encoding="utf-8")
        (out / "confusion.txt").write_text(format_confusion(cm), encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_shared_flags(sub: argparse.ArgumentParser):
    sub.add_argument("--config", help="key = value config or manifest file")
    sub.add_argument("--header", help="cube header path")
    sub.add_argument("--raw", help="cube raw float32 path")
    sub.add_argument("--labels", help="ground-truth labels path (uint16)")
    sub.add_argument("--synth", help="synthetic scene, e.g. blocks:K=3,P=50,d=3,size=30x30")
    sub.add_argument("--prior", help="l1 | js | ls | gs | sgs | lr | lrg")
    sub.add_argument("--lambda", dest="lam", type=float, help="regularization weight")
    sub.add_argument("--lambda2", dest="lam2", type=float,
                     help="second weight (ls and sgs; defaults to lambda)")
    sub.add_argument("--solver", choices=["admm", "sparsa", "fss"])
    sub.add_argument("--window", type=int, help="odd spatial window side length")
    sub.add_argument("--sigma", type=float, help="similarity kernel width")
    sub.add_argument("--no-normalize", dest="normalize", action="store_false", default=None,
                     help="keep dictionary columns unnormalized")
    sub.add_argument("--n-train", dest="n_train", type=int,
                     help="training pixels (default: 10%% of labeled)")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--workers", type=int, help="parallel windows (default: CPU count)")
    sub.add_argument("--outdir", help=f"output directory (default: ${OUTDIR_ENV} or ./runs)")
    sub.add_argument("--rho", type=float, help="ADMM penalty")
    sub.add_argument("--max-iters", dest="max_iters", type=int)
    sub.add_argument("--tol-abs", dest="tol_abs", type=float)
    sub.add_argument("--tol-rel", dest="tol_rel", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsisrc",
        description="Structured-sparsity classification experiments on hyperspectral images",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    p_classify = commands.add_parser("classify", help="split, classify, and evaluate")
    _add_shared_flags(p_classify)
    p_classify.set_defaults(func=lambda args: run_classify(resolve_config(args)))

    p_toy = commands.add_parser("toy", help="sparsity patterns of all priors on one block")
    _add_shared_flags(p_toy)
    p_toy.add_argument("--per-class", dest="toy_per_class", type=int,
                       help="test pixels per class (default 30)")
    p_toy.set_defaults(func=lambda args: run_toy(resolve_config(args)))

    p_sweep = commands.add_parser("sweep", help="select lambda on a validation split")
    _add_shared_flags(p_sweep)
    p_sweep.add_argument("--lambda-grid", dest="lambda_grid",
                         help="comma-separated values (default: 5 log points in [1e-3, 0.1])")
    p_sweep.add_argument("--lambda2-grid", dest="lambda2_grid",
                         help="comma-separated values for priors with lambda2")
    p_sweep.set_defaults(func=lambda args: run_sweep(resolve_config(args)))

    p_synth = commands.add_parser("synth", help="generate and save a synthetic scene")
    _add_shared_flags(p_synth)
    p_synth.set_defaults(func=lambda args: run_synth(resolve_config(args)))

    p_eval = commands.add_parser("eval", help="metrics from saved truth/prediction maps")
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--width", type=int, required=True)
    p_eval.add_argument("--height", type=int, required=True)
    p_eval.add_argument("--out", help="also write metric files to this directory")
    p_eval.set_defaults(func=run_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # stage failures
        log.debug("run failed", exc_info=True)
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry():  # console-script hook
    sys.exit(main())


if __name__ == "__main__":
    entry()
