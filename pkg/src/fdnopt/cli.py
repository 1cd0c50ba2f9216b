"""Command-line front end: design, optimize, render, analyze, repro.

Exit codes: 0 success, 1 usage or configuration problem, 2 numerical
failure. Every command writes a ``manifest.json`` beside its artifacts
with sha256 digests; identical config and seed reproduce identical
artifact digests (wall-clock fields and timestamps excluded).

The heavy imports happen inside the handlers so the FDNOPT_THREADS
environment variable can cap BLAS threads before the numerics load.
"""

import argparse
import json
import os
import sys
from pathlib import Path

_USAGE_EXIT = 1
_NUMERIC_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(_USAGE_EXIT)


def _parse_range(text: str):
    try:
        lo, hi = text.split(":")
        return int(lo), int(hi)
    except ValueError:
        raise ValueError(f"expected LOW:HIGH, got {text!r}")


def _parse_t60(text: str) -> float:
    if text.lower() in ("inf", "infinity"):
        return float("inf")
    return float(text)


def build_parser() -> _Parser:
    parser = _Parser(prog="fdnopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", parents=[], help="design delays and write a seeded config")
    p.add_argument("--n", type=int, required=True, help="number of delay lines")
    p.add_argument("--range", dest="m_range", type=_parse_range, help="delay range LOW:HIGH (samples)")
    p.add_argument("--preset", action="store_true", help="use the preset delay lengths for this size")
    p.add_argument("--min-order", type=int, default=6000, help="minimum total delay (modal density)")
    p.add_argument("--matrix", choices=["orthogonal", "householder", "scattering"],
                   default="orthogonal")
    p.add_argument("--stages", type=int, default=4, help="scattering mixing stages")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=0.9999)
    p.add_argument("--t60", type=_parse_t60, help="decay time; overrides --gamma")
    p.add_argument("--sample-rate", type=int, default=48000)
    p.add_argument("--out", required=True, help="output config JSON path")

    p = sub.add_parser("optimize", help="train gains and feedback matrix")
    p.add_argument("--config", required=True, help="TrainConfig JSON, or an FdnConfig JSON to wrap")
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--grid-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("render", help="render an impulse response to WAV")
    p.add_argument("--config", required=True, help="FdnConfig JSON (checkpoint)")
    p.add_argument("--t60", type=_parse_t60, help="target decay time in seconds, or 'inf'")
    p.add_argument("--gamma", type=float, help="per-sample gain; overrides --t60")
    p.add_argument("--duration", type=float, default=1.5, help="render length in seconds")
    p.add_argument("--freq-dependent", action="store_true",
                   help="render with per-band decay from --spec")
    p.add_argument("--spec", help="AttenuationSpec JSON (required with --freq-dependent)")
    p.add_argument("--out", required=True, help="output WAV path")

    p = sub.add_parser("analyze", help="modal, density, spectrum, and cost reports")
    p.add_argument("--config", help="FdnConfig JSON (checkpoint)")
    p.add_argument("--wav", help="analyze an existing impulse response instead")
    p.add_argument("--modal", choices=["auto", "on", "off"], default="auto")
    p.add_argument("--duration", type=float, default=1.5, help="render length for density analysis")
    p.add_argument("--freq-range", type=_parse_range, default=(1000, 3000),
                   help="magnitude report range LOW:HIGH in Hz")
    p.add_argument("--freq-points", type=int, default=4096)
    p.add_argument("--window-ms", type=float, default=20.0, help="echo density window")
    p.add_argument("--hop-ms", type=float, default=1.0, help="echo density hop")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("repro", help="run a bundled or custom experiment recipe")
    p.add_argument("--recipe", default="desk", help="'desk', 'full', or a recipe JSON path")
    p.add_argument("--seeds", type=int, help="limit the number of seeds per run")
    p.add_argument("--out", required=True, help="output directory")

    return parser


def _version() -> str:
    from . import __version__

    return __version__


def cmd_design(args) -> int:
    from . import optim
    from .manifest import RunManifest
    from .param import gamma_from_t60

    if args.preset:
        if args.n not in optim.PRESET_DELAYS:
            print(f"no preset delays for n={args.n}; use --range", file=sys.stderr)
            return _USAGE_EXIT
        delays = list(optim.PRESET_DELAYS[args.n])
    else:
        if args.m_range is None:
            print("either --range or --preset is required", file=sys.stderr)
            return _USAGE_EXIT
        delays = optim.design_delays(args.n, args.m_range, args.min_order).tolist()
    gamma = args.gamma
    if args.t60 is not None:
        gamma = gamma_from_t60(args.t60, args.sample_rate)
    config = optim.initial_config(
        args.n, delays, seed=args.seed, variant=args.matrix, gamma=gamma,
        sample_rate=args.sample_rate, n_stages=args.stages,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    config.save(out)
    manifest = RunManifest(command="design", version=_version(), seed=args.seed)
    manifest.add_output(out)
    manifest.write(out.parent / (out.stem + ".manifest.json"))
    print(f"designed n={args.n} delays={delays} order={sum(delays)} -> {out}")
    return 0


def _load_train_config(path: str, args):
    from dataclasses import replace

    from .core import FdnConfig
    from .optim import TrainConfig

    with open(path) as fh:
        data = json.load(fh)
    if "fdn" in data:
        tc = TrainConfig.from_json_dict(data)
    else:
        tc = TrainConfig(fdn=FdnConfig.from_json_dict(data))
    overrides = {}
    for name, key in [
        ("epochs", "epochs"), ("alpha", "alpha"), ("seed", "seed"),
        ("gamma", "gamma"), ("learning_rate", "learning_rate"),
        ("grid_size", "grid_size"), ("batch_size", "batch_size"),
    ]:
        value = getattr(args, name)
        if value is not None:
            overrides[key] = value
    return replace(tc, **overrides) if overrides else tc


def cmd_optimize(args) -> int:
    from .manifest import RunManifest
    from .optim import train

    tc = _load_train_config(args.config, args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    report = train(tc)
    checkpoint = outdir / "checkpoint.json"
    report.final.save(checkpoint)
    report_path = outdir / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    losses = outdir / "losses.csv"
    report.write_losses_csv(losses)
    used_config = outdir / "train_config.json"
    tc.save(used_config)
    manifest = RunManifest(command="optimize", version=_version(), seed=tc.seed,
                           config_path=str(args.config))
    manifest.add_input(args.config)
    for path in (checkpoint, losses, used_config, report_path):
        manifest.add_output(path)
    manifest.write(outdir / "manifest.json")
    if report.records:
        first = report.records[0].train.total
        last = report.records[-1].train.total
        print(f"optimize: initial total loss {first:.6f} final {last:.6f} "
              f"({len(report.records)} epochs)")
    else:
        print("optimize: 0 epochs requested; checkpoint equals initialization")
    return 0


def cmd_render(args) -> int:
    from .audio import write_wav
    from .core import FdnConfig, render_ir
    from .geq import AttenuationSpec, render_fd_ir
    from .manifest import RunManifest
    from .param import gamma_from_t60

    config = FdnConfig.load(args.config)
    if args.freq_dependent and not args.spec:
        print("--freq-dependent requires --spec", file=sys.stderr)
        return _USAGE_EXIT
    length = max(1, int(round(args.duration * config.sample_rate)))
    if args.freq_dependent:
        spec = AttenuationSpec.load(args.spec)
        ir = render_fd_ir(config.with_gamma(1.0), spec, length)
    else:
        gamma = config.gamma
        if args.t60 is not None:
            gamma = gamma_from_t60(args.t60, config.sample_rate)
        if args.gamma is not None:
            gamma = args.gamma
        ir = render_ir(config.with_gamma(gamma), length)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, ir, config.sample_rate)
    manifest = RunManifest(command="render", version=_version(),
                           config_path=str(args.config))
    manifest.add_input(args.config)
    if args.spec:
        manifest.add_input(args.spec)
    manifest.add_output(out)
    manifest.write(out.parent / (out.stem + ".manifest.json"))
    print(f"rendered {length} samples -> {out}")
    return 0


def cmd_analyze(args) -> int:
    import numpy as np

    from .audio import read_wav
    from .core import FdnConfig, render_ir
    from .manifest import RunManifest
    from .metrics import echo_density_profile, magnitude_report, operation_count, write_spectrum_csv
    from .modal import excitation_stats, modal_decomposition
    from .param import ScatteringParam

    if not args.config and not args.wav:
        print("analyze needs --config or --wav", file=sys.stderr)
        return _USAGE_EXIT
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command="analyze", version=_version(),
                           config_path=args.config)
    summary = {}

    if args.wav:
        ir, fs = read_wav(args.wav)
        manifest.add_input(args.wav)
    else:
        config = FdnConfig.load(args.config)
        manifest.add_input(args.config)
        fs = config.sample_rate
        ir = render_ir(config, max(1, int(round(args.duration * fs))))

    window = max(2, int(round(args.window_ms * fs / 1000.0)))
    hop = max(1, int(round(args.hop_ms * fs / 1000.0)))
    density = echo_density_profile(ir, window, hop)
    density_path = outdir / "echo_density.csv"
    density.to_csv(density_path, fs=fs)
    manifest.add_output(density_path)
    summary["echo_density_mean"] = float(np.mean(density.values))
    reach = density.time_to_reach(0.9)
    summary["echo_density_reach_0p9_s"] = None if reach is None else reach / fs

    if args.config:
        scattering = isinstance(config.feedback, ScatteringParam)
        if scattering:
            fdn_type = "DiffFDN-SCAT"
            k = config.feedback.n_stages
        elif type(config.feedback).__name__ == "HouseholderParam":
            fdn_type = "DiffFDN-HH"
            k = None
        else:
            fdn_type = "DiffFDN-O"
            k = None
        ops = operation_count(fdn_type, config.n, k)
        ops_path = outdir / "operation_count.json"
        with open(ops_path, "w") as fh:
            json.dump({"type": fdn_type, "n": config.n, "k": k,
                       "ops_per_sample": ops}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.add_output(ops_path)
        summary["ops_per_sample"] = ops

        rows = magnitude_report(config, args.freq_range, args.freq_points)
        spectrum_path = outdir / "magnitude.csv"
        write_spectrum_csv(spectrum_path, rows)
        manifest.add_output(spectrum_path)

        want_modal = args.modal == "on" or (args.modal == "auto" and not scattering)
        if args.modal == "on" and scattering:
            print("modal analysis does not support the scattering variant",
                  file=sys.stderr)
            return _USAGE_EXIT
        if want_modal:
            decomp = modal_decomposition(config)
            stats = excitation_stats(decomp)
            modal_path = outdir / "modes.csv"
            decomp.to_csv(modal_path)
            manifest.add_output(modal_path)
            hist_path = outdir / "excitation_histogram.csv"
            stats.to_csv(hist_path)
            manifest.add_output(hist_path)
            summary["excitation_std_db"] = stats.std_db
            summary["excitation_mean_db"] = stats.mean_db
            summary["n_poles"] = int(decomp.poles.size)
        elif scattering and args.modal == "auto":
            print("note: skipping modal analysis (scattering variant)", file=sys.stderr)

    summary_path = outdir / "summary.json"
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_output(summary_path)
    manifest.write(outdir / "manifest.json")
    for key, value in sorted(summary.items()):
        print(f"{key}: {value}")
    return 0


def _load_recipe(name: str) -> dict:
    from importlib import resources

    if name in ("desk", "full"):
        ref = resources.files("fdnopt").joinpath(f"recipes/{name}.json")
        return json.loads(ref.read_text())
    with open(name) as fh:
        return json.load(fh)


def cmd_repro(args) -> int:
    import csv

    from .manifest import RunManifest
    from .modal import excitation_stats, modal_decomposition
    from .optim import TrainConfig, initial_config, train

    recipe = _load_recipe(args.recipe)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in recipe["runs"]:
        seeds = run["seeds"][: args.seeds] if args.seeds else run["seeds"]
        for seed in seeds:
            config = initial_config(
                run["n"], run["delays"], seed=seed,
                variant=run.get("variant", "orthogonal"),
                gamma=run["gamma"], sample_rate=run.get("sample_rate", 48000),
            )
            tc = TrainConfig(
                fdn=config,
                grid_size=run["grid_size"], batch_size=run["batch_size"],
                epochs=run["epochs"], learning_rate=run.get("learning_rate", 1e-3),
                alpha=run.get("alpha", 1.0), gamma=run["gamma"], seed=seed,
            )
            report = train(tc)
            row = {
                "n": run["n"], "seed": seed,
                "initial_loss": report.records[0].train.total if report.records else None,
                "final_loss": report.records[-1].train.total if report.records else None,
            }
            if recipe.get("modal", False):
                init_stats = excitation_stats(modal_decomposition(config))
                final_stats = excitation_stats(modal_decomposition(report.final))
                row["initial_std_db"] = init_stats.std_db
                row["final_std_db"] = final_stats.std_db
            rows.append(row)
            printable = {k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()}
            print(f"repro: {printable}")
    summary = outdir / "summary.csv"
    fieldnames = sorted({key for row in rows for key in row})
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    manifest = RunManifest(command="repro", version=_version(),
                           extra={"recipe": args.recipe})
    manifest.add_output(summary)
    manifest.write(outdir / "manifest.json")
    print(f"repro summary -> {summary}")
    return 0


_HANDLERS = {
    "design": cmd_design,
    "optimize": cmd_optimize,
    "render": cmd_render,
    "analyze": cmd_analyze,
    "repro": cmd_repro,
}


def main(argv=None) -> int:
    threads = os.environ.get("FDNOPT_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    args = build_parser().parse_args(argv)
    from .errors import ConfigurationError, ConvergenceError, DesignError, FdnError

    try:
        return _HANDLERS[args.command](args)
    except (ConfigurationError, DesignError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"fdnopt {args.command}: {exc}", file=sys.stderr)
        return _USAGE_EXIT
    except FdnError as exc:
        print(f"fdnopt {args.command}: numerical failure: {exc}", file=sys.stderr)
        return _NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
