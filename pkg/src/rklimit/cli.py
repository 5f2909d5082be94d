"""Command-line entry point.

Subcommands: ``constants``, ``signal``, ``simulate``, ``limit``, ``coverage``.
Exit codes: 0 success, 2 validation error, 3 I/O error, 4 non-convergence
under ``--strict``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .constants import CODATA2018, KEV, constant_table
from .detector import DEFAULT_WINDOW, default_binning, load_materials, precompute_signal_column, signal_shape
from .errors import ConfigError, RKLimitError, ValidationError
from .inference import (
    UNIFORM_RK,
    UNIFORM_Y,
    ConvergenceWarning,
    GridSpec,
    LikelihoodInputs,
    MCMCSettings,
    PriorSpec,
    grid_posterior,
    run_mcmc,
)
from .limits import (
    RK_THEORY_UPPER,
    coverage_study,
    credible_summary,
    make_report,
    median_sensitivity,
    upper_limit,
)
from .spectrum import (
    BackgroundModel,
    Binning,
    check_compatible,
    load_background,
    load_spectrum,
    save_spectrum,
    simulate_toy,
    toy_seed,
)

log = logging.getLogger("rklimit")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NONCONVERGED = 0, 2, 3, 4
METHOD_DISAGREEMENT = 0.02
_PRIOR_FLAGS = {"uniform-y": UNIFORM_Y, "uniform-rk": UNIFORM_RK}


@dataclass
class RunConfig:
    materials_path: str | None = None
    spectrum_path: str | None = None
    background_path: str | None = None
    bin_width_keV: float = 5.0
    analysis_window_keV: tuple[float, float] = DEFAULT_WINDOW
    exposure_seconds: float | None = None
    prior: str = UNIFORM_Y
    rk_min: float = 1e-10
    rk_max: float = 1e9
    method: str = "both"
    chains: int = 4
    samples: int = 1_000_000
    burn_in: float = 0.1
    level: float = 0.95
    rk_theory_upper: float = RK_THEORY_UPPER
    seed: int = 0
    grid_n_log: int = 20000
    grid_n_refine: int = 200001
    y_true: float | None = None
    n_toys: int = 500
    n_sensitivity_toys: int = 200
    y: float = 1.0
    output_dir: str = "."
    workers: int = 1

    #: keys echoed into reports; output location and worker count do not affect results
    EXECUTION_ONLY = ("output_dir", "workers")

    def validate(self):
        lo, hi = self.analysis_window_keV
        if not lo < hi:
            raise ConfigError(f"analysis_window_keV: empty window {self.analysis_window_keV}")
        if self.method not in ("grid", "mcmc", "both"):
            raise ConfigError(f"method: expected grid, mcmc or both, got {self.method!r}")
        if self.prior not in (UNIFORM_Y, UNIFORM_RK):
            raise ConfigError(f"prior: unknown kind {self.prior!r}")
        if not 0 < self.level < 1:
            raise ConfigError(f"level: must lie in (0, 1), got {self.level}")
        if not self.rk_theory_upper > 0:
            raise ConfigError("rk_theory_upper: must be > 0")
        if not self.bin_width_keV > 0:
            raise ConfigError("bin_width_keV: must be > 0")
        return self

    def resolved(self) -> dict:
        d = asdict(self)
        for k in self.EXECUTION_ONLY:
            d.pop(k)
        d["analysis_window_keV"] = list(d["analysis_window_keV"])
        return d


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"config file {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {', '.join(unknown)}")
    base = Path(path).resolve().parent
    for key in ("materials_path", "spectrum_path", "background_path", "output_dir"):
        if raw.get(key) is not None:
            raw[key] = str((base / raw[key]).resolve())
    if "analysis_window_keV" in raw:
        raw["analysis_window_keV"] = tuple(raw["analysis_window_keV"])
    return raw


_FLAG_TO_KEY = {
    "materials": "materials_path",
    "signal_config": "materials_path",
    "spectrum": "spectrum_path",
    "background": "background_path",
    "bin_width": "bin_width_keV",
    "window": "analysis_window_keV",
    "exposure_seconds": "exposure_seconds",
    "method": "method",
    "chains": "chains",
    "samples": "samples",
    "burn_in": "burn_in",
    "level": "level",
    "rk_theory": "rk_theory_upper",
    "rk_min": "rk_min",
    "rk_max": "rk_max",
    "seed": "seed",
    "y_true": "y_true",
    "n_toys": "n_toys",
    "n_sensitivity_toys": "n_sensitivity_toys",
    "y": "y",
    "out_dir": "output_dir",
    "workers": "workers",
}


def build_config(args) -> RunConfig:
    values = _load_config(args.config) if args.config else {}
    for flag, key in _FLAG_TO_KEY.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        if key.endswith("_path") or key == "output_dir":
            v = str(Path(v).resolve())
        if key == "analysis_window_keV":
            v = tuple(v)
        values[key] = v
    prior = getattr(args, "prior", None)
    if prior is not None:
        values["prior"] = _PRIOR_FLAGS[prior]
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


# ------------------------------------------------------------------ helpers


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _materials_checksum(path):
    if path is None:
        data = resources.files("rklimit").joinpath("data/materials_default.json").read_bytes()
        return {"path": "builtin:materials_default.json", "sha256": hashlib.sha256(data).hexdigest()}
    return {"path": path, "sha256": _sha256(path)}


def _require(path, key):
    if path is None:
        raise ConfigError(f"{key}: required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{key}: no such file {path}")
    return path


def _window_mask(binning: Binning, window, tol=1e-9):
    lo, hi = window
    mask = (binning.lows >= lo - tol) & (binning.highs <= hi + tol)
    if not np.any(mask):
        raise ValidationError(f"no bins inside analysis window {tuple(window)}")
    idx = np.nonzero(mask)[0]
    if np.any(np.diff(idx) != 1):
        raise ValidationError("bins inside the analysis window are not contiguous")
    return mask


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
    path.write_text(text)
    return text


def _interval_list(intervals):
    return [[a, b] for a, b in intervals]


# ------------------------------------------------------------------ commands


def cmd_constants(cfg: RunConfig, out=sys.stdout):
    for name, value, unit in constant_table(CODATA2018, KEV):
        out.write(f"{name:<18s} {value:.14e}  {unit}\n")
    return EXIT_OK


def cmd_signal(cfg: RunConfig, out=sys.stdout):
    model = load_materials(cfg.materials_path, cfg.analysis_window_keV, cfg.exposure_seconds)
    lo, hi = cfg.analysis_window_keV
    energies = np.arange(math.ceil(lo), math.floor(hi) + 1, 1.0)
    shape = signal_shape(energies, cfg.y, model)
    edges = default_binning(cfg.analysis_window_keV, cfg.bin_width_keV)
    s = precompute_signal_column(edges, model) * cfg.y
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "signal_shape.csv").open("w") as fh:
        fh.write(f"# y_per_m2: {cfg.y!r}\n# exposure_seconds: {model.exposure_seconds!r}\n")
        fh.write("E_keV,counts_per_keV\n")
        for e, v in zip(energies, shape):
            fh.write(f"{e!r},{float(v)!r}\n")
    with (out_dir / "signal_bins.csv").open("w") as fh:
        fh.write(f"# y_per_m2: {cfg.y!r}\n# exposure_seconds: {model.exposure_seconds!r}\n")
        fh.write("bin_low_keV,bin_high_keV,expected_signal\n")
        for a, b, v in zip(edges[:-1], edges[1:], s):
            fh.write(f"{float(a)!r},{float(b)!r},{float(v)!r}\n")
    out.write(f"total expected signal in [{lo}, {hi}] keV at Y = {cfg.y!r} m^-2: {float(np.sum(s))!r}\n")
    out.write(f"wrote {out_dir / 'signal_shape.csv'} and {out_dir / 'signal_bins.csv'}\n")
    return EXIT_OK


def _background_and_signal(cfg):
    background = load_background(_require(cfg.background_path, "background_path"))
    model = load_materials(cfg.materials_path, cfg.analysis_window_keV, cfg.exposure_seconds)
    s = precompute_signal_column(background.binning.edges, model)
    return background, model, s


def cmd_simulate(cfg: RunConfig, out=sys.stdout):
    background, model, s = _background_and_signal(cfg)
    y_true = cfg.y_true if cfg.y_true is not None else 0.0
    out_dir = Path(cfg.output_dir)
    width = max(5, len(str(cfg.n_toys - 1)))
    for k in range(cfg.n_toys):
        toy = simulate_toy(background, y_true, s, toy_seed(cfg.seed, k))
        toy = replace(toy, exposure_seconds=model.exposure_seconds)
        save_spectrum(toy, out_dir / f"toy_{k:0{width}d}.csv")
    out.write(f"wrote {cfg.n_toys} toy spectra to {out_dir}\n")
    return EXIT_OK


def cmd_coverage(cfg: RunConfig, out=sys.stdout):
    background, _, s = _background_and_signal(cfg)
    prior = PriorSpec(UNIFORM_Y, (cfg.rk_min, cfg.rk_max))
    y_true = cfg.y_true
    sensitivity = None
    if y_true is None:
        # sensitivity toys use a seed stream disjoint from the coverage toys
        sensitivity = median_sensitivity(background, s, cfg.n_sensitivity_toys, cfg.level, cfg.seed,
                                         prior=prior, workers=cfg.workers, first_toy=cfg.n_toys)
        y_true = sensitivity
    result = coverage_study(background, s, y_true, cfg.n_toys, cfg.level, cfg.seed, prior=prior,
                            workers=cfg.workers)
    report = {
        "tool": "rklimit",
        "version": __version__,
        "command": "coverage",
        "config": cfg.resolved(),
        "inputs": {"background": {"path": cfg.background_path, "sha256": _sha256(cfg.background_path)},
                   "materials": _materials_checksum(cfg.materials_path)},
        "median_sensitivity": sensitivity,
        "coverage": result.as_dict(),
        "prior": prior.kind,
    }
    text = _write_json(Path(cfg.output_dir) / "coverage.json", report)
    out.write(text)
    return EXIT_OK


def cmd_limit(cfg: RunConfig, out=sys.stdout, strict=False, dump_chains=False):
    spectrum_path = _require(cfg.spectrum_path, "spectrum_path")
    background_path = _require(cfg.background_path, "background_path")
    spectrum = load_spectrum(spectrum_path)
    background = load_background(background_path)
    mismatch = check_compatible(spectrum, background)
    if mismatch is not None:
        raise ValidationError(f"spectrum/background binning mismatch: {mismatch.message}")
    exposure, exposure_source = cfg.exposure_seconds, "config"
    if exposure is None and spectrum.exposure_seconds is not None:
        exposure, exposure_source = spectrum.exposure_seconds, "spectrum"
    if exposure is None:
        exposure_source = "materials"
    model = load_materials(cfg.materials_path, cfg.analysis_window_keV, exposure)
    mask = _window_mask(spectrum.binning, cfg.analysis_window_keV)
    edges = spectrum.binning.edges[np.concatenate([mask, [False]]) | np.concatenate([[False], mask])]
    s = precompute_signal_column(edges, model)
    inputs = LikelihoodInputs(spectrum.counts[mask], background.expected[mask], s)
    prior = PriorSpec(cfg.prior, (cfg.rk_min, cfg.rk_max))

    report = {
        "tool": "rklimit",
        "version": __version__,
        "command": "limit",
        "kernel_backend": kernels.BACKEND,
        "config": cfg.resolved(),
        "inputs": {
            "spectrum": {"path": spectrum_path, "sha256": _sha256(spectrum_path)},
            "background": {"path": background_path, "sha256": _sha256(background_path)},
            "materials": _materials_checksum(cfg.materials_path),
        },
        "n_bins": int(np.count_nonzero(mask)),
        "exposure_seconds": model.exposure_seconds,
        "exposure_source": exposure_source,
        "prior": prior.kind,
        "method": cfg.method,
        "level": cfg.level,
        "flags": [],
        "notes": [
            "MCMC burn-in, proposal and convergence criteria are tool defaults",
        ],
    }
    out_dir = Path(cfg.output_dir)
    y_grid = y_mcmc = None
    r_hat = None
    converged = True
    if cfg.method in ("grid", "both"):
        grid = grid_posterior(inputs, prior, GridSpec(cfg.grid_n_log, cfg.grid_n_refine))
        summary = credible_summary(grid)
        y_grid = upper_limit(grid, cfg.level)
        report["grid"] = {
            "y_upper": y_grid,
            "log_evidence": grid.log_norm,
            "n_nodes": int(len(grid.y_nodes)),
            "global_mode": summary.global_mode,
            "local_modes": summary.local_modes,
            "hpd": {f"{lv:.2f}": _interval_list(iv) for lv, iv in summary.intervals.items()},
            "upper_limits": {f"{lv:.2f}": v for lv, v in summary.upper_limits.items()},
        }
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(out_dir / "posterior.csv", np.column_stack([grid.y_nodes, grid.density, grid.cumulative()]),
                   delimiter=",", header="Y,density,cumulative", comments="", fmt="%.17g")
    if cfg.method in ("mcmc", "both"):
        settings = MCMCSettings(cfg.chains, cfg.samples, cfg.burn_in, cfg.seed, cfg.workers)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            chains = run_mcmc(inputs, prior, settings)
        y_mcmc = upper_limit(chains, cfg.level)
        r_hat = chains.r_hat
        converged = chains.converged
        report["mcmc"] = {
            "y_upper": y_mcmc,
            "r_hat": chains.r_hat,
            "converged": chains.converged,
            "acceptance_rates": list(chains.acceptance_rates),
            "proposal_scales": list(chains.proposal_scales),
            "n_chains": chains.n_chains,
            "n_samples_per_chain": chains.n_samples,
            "burn_in": chains.burn_in,
            "seed": cfg.seed,
        }
        if not converged:
            report["flags"].append("mcmc_not_converged")
            log.warning("MCMC not converged: r_hat = %s", chains.r_hat)
        if dump_chains:
            out_dir.mkdir(parents=True, exist_ok=True)
            with (out_dir / "chains.csv").open("w") as fh:
                fh.write("chain,step,Y,log_post\n")
                for c in range(chains.n_chains):
                    for k, (y, lp) in enumerate(zip(chains.chains[c], chains.log_post[c])):
                        fh.write(f"{c},{k},{float(y)!r},{float(lp)!r}\n")
    if y_grid is not None and y_mcmc is not None and abs(y_mcmc / y_grid - 1) > METHOD_DISAGREEMENT:
        report["flags"].append("mcmc_grid_discrepancy")
    y_upper = y_grid if y_grid is not None else y_mcmc
    limit = make_report(y_upper, cfg.level, cfg.rk_theory_upper)
    report.update(
        y_upper=limit.y_upper,
        rk_lower_m=limit.rk_lower,
        rk_theory_upper_m=limit.rk_theory_upper,
        verdict=limit.verdict.value,
        r_hat=r_hat,
        authoritative="grid" if y_grid is not None else "mcmc",
    )
    text = _write_json(out_dir / "report.json", report)
    out.write(text)
    if strict and not converged:
        return EXIT_NONCONVERGED
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="threads for chains or toys")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--strict", action="store_true", help="exit 4 when MCMC has not converged")
    common.add_argument("-v", "--verbose", action="store_true")

    window = argparse.ArgumentParser(add_help=False)
    window.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"), help="analysis window in keV")
    window.add_argument("--exposure-seconds", type=float)

    parser = argparse.ArgumentParser(prog="rklimit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("constants", parents=[common], help="print physical and derived constants")

    p = sub.add_parser("signal", parents=[common, window], help="tabulate the expected signal")
    p.add_argument("--materials")
    p.add_argument("--bin-width", type=float)
    p.add_argument("--y", type=float, help="yield Y in 1/m^2 (default 1)")

    p = sub.add_parser("simulate", parents=[common, window], help="generate toy spectra")
    p.add_argument("--background")
    p.add_argument("--signal-config", help="materials file defining the signal")
    p.add_argument("--y-true", type=float)
    p.add_argument("--n-toys", type=int)

    p = sub.add_parser("limit", parents=[common, window], help="posterior and limit from a spectrum")
    p.add_argument("--spectrum")
    p.add_argument("--background")
    p.add_argument("--materials")
    p.add_argument("--method", choices=["grid", "mcmc", "both"])
    p.add_argument("--chains", type=int)
    p.add_argument("--samples", type=int, help="retained samples per chain")
    p.add_argument("--burn-in", type=float, help="adaptation steps as a fraction of --samples")
    p.add_argument("--prior", choices=sorted(_PRIOR_FLAGS))
    p.add_argument("--rk-min", type=float)
    p.add_argument("--rk-max", type=float)
    p.add_argument("--level", type=float)
    p.add_argument("--rk-theory", type=float, help="theoretical upper bound on R_K in m")
    p.add_argument("--dump-chains", action="store_true")

    p = sub.add_parser("coverage", parents=[common, window], help="toy coverage of the upper limit")
    p.add_argument("--background")
    p.add_argument("--signal-config")
    p.add_argument("--y-true", type=float, help="default: median background-only sensitivity")
    p.add_argument("--n-toys", type=int)
    p.add_argument("--n-sensitivity-toys", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--rk-min", type=float)
    p.add_argument("--rk-max", type=float)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "constants":
            return cmd_constants(cfg, out)
        if args.command == "signal":
            return cmd_signal(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "coverage":
            return cmd_coverage(cfg, out)
        return cmd_limit(cfg, out, strict=args.strict, dump_chains=args.dump_chains)
    except RKLimitError as exc:
        print(f"rklimit: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"rklimit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
