import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import Crypto.Hash.SHA256
import numpy as np

import frap
import geometry
import model as model_core
import pde
import renewal
import spatial
import spectral
import tool

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

SOURCES = ("model.py", "spectral.py", "sojourn.py", "renewal.py",
           "geometry.py", "pde.py", "spatial.py", "frap.py", "cli.py",
           "tool.py")

TEMPLATES = {
    "two_state": frap.TWO_STATE,
    "reaction_diffusion": frap.REACTION_DIFFUSION,
}


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    artifacts: list[dict]
    wall_time: float
    version: str
    schema: int = SCHEMA_VERSION

    def write(self, path: str):
        with open(path, "w") as manifest_file:
            json.dump(dataclasses.asdict(self),
                      manifest_file,
                      indent=2,
                      sort_keys=True)

    @classmethod
    def load(cls, path: str):
        with open(path) as manifest_file:
            document = json.load(manifest_file)

        if document.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"Unsupported manifest schema "
                             f"{document.get('schema')} in {path}")
        return cls(**document)


class ReproducibilityError(RuntimeError):
    pass


def default_workers() -> int:
    return int(os.environ.get("TRANSPORT_WORKERS", "1"))


def sha256_file(path: str) -> str:
    digest = Crypto.Hash.SHA256.new()
    with open(path, "rb") as artifact:
        for chunk in iter(lambda: artifact.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def version_hash() -> str:
    digest = Crypto.Hash.SHA256.new()
    root = os.path.dirname(os.path.abspath(__file__))
    for name in SOURCES:
        with open(os.path.join(root, name), "rb") as source:
            digest.update(source.read())
    return digest.hexdigest()


def parse_range(text: str) -> np.ndarray:
    try:
        low, high, count = text.split(":")
        return np.linspace(float(low), float(high), int(count))
    except ValueError:
        raise ValueError(f"Invalid range {text}, expected low:high:count")


def parse_floats(text: str | None) -> list[float]:
    if not text:
        return []
    return [float(value) for value in text.split(",")]


def parse_assignments(text: str) -> dict[str, str]:
    assignments = {}
    for item in text.split(","):
        name, separator, value = item.partition("=")
        if not separator or not name.strip():
            raise ValueError(f"Invalid assignment {item}, expected name=value")
        assignments[name.strip()] = value.strip()
    return assignments


def _length(text: str):
    low, separator, high = text.partition(":")
    if separator:
        return float(low), float(high)
    return float(low)


def _template(args) -> frap.Template:
    if args.model is not None:
        if not args.free:
            raise ValueError("A model template needs --free name=entry,...")
        return frap.Template(model_core.load_model(args.model),
                             parse_assignments(args.free))
    return TEMPLATES[args.template]


def _values(template: frap.Template, text: str) -> list[float]:
    params = parse_assignments(text)
    missing = [name for name in template.names if name not in params]
    if missing:
        raise ValueError(f"Missing parameter(s) {missing}")
    return [float(params[name]) for name in template.names]


def _artifact(args, name: str) -> str | None:
    if args.out is None:
        return None
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _domain(args) -> geometry.Rectangle:
    return geometry.Rectangle(0.0, args.width, 0.0, args.height)


def run_effective(args) -> list[str]:
    model = model_core.load_model(args.model)
    model_core.check(model)

    eff = spectral.effective_transport(model)
    pi = model_core.stationary_distribution(model).pi

    values = {
        "schema": f"effective/{SCHEMA_VERSION}",
        "method": eff.method.value,
        "v_eff": eff.v_eff,
        "sigma_eff": eff.sigma_eff,
    }
    for state, weight in enumerate(pi):
        values[f"pi_{model.label(state)}"] = weight
    tool.print_values(values)

    path = _artifact(args, "effective.csv")
    if path is None:
        return []
    tool.write_csv(path, ["quantity", "value"], list(values.items())[1:])
    return [path]


def run_dispersion(args) -> list[str]:
    model = model_core.load_model(args.model)
    model_core.check(model)

    eff = spectral.effective_transport(model)
    first, second = spectral.dispersion_coefficients(model, args.h)
    curve = spectral.dispersion_curve(model, parse_range(args.nu_range))

    tool.print_values({
        "schema": f"dispersion/{SCHEMA_VERSION}",
        "v_eff": eff.v_eff,
        "sigma_eff": eff.sigma_eff,
        "slope": first,
        "curvature": second,
        "min_separation": min(point.separation for point in curve),
    })

    path = _artifact(args, "dispersion.csv")
    if path is None:
        return []
    tool.write_csv(path, ["nu", "lambda"],
                   [(point.nu, point.lam) for point in curve])
    return [path]


def run_simulate(args) -> list[str]:
    model = model_core.load_model(args.model)
    model_core.check(model)

    sojourn_model = renewal.sojourn_from_model(model, args.base_state,
                                               args.sojourn)
    samples = renewal.simulate_cycles(sojourn_model, model, args.cycles,
                                      args.seed, args.workers)
    estimate = renewal.estimate_effective(samples, args.bootstrap, args.seed)
    reference = spectral.effective_transport(model)

    values = {
        "schema": f"simulate/{SCHEMA_VERSION}",
        "cycles": estimate.n_cycles,
        "seed": args.seed,
        "sojourn": args.sojourn,
        "base_state": model.label(sojourn_model.base_state),
        "v_eff": estimate.v_eff,
        "v_err": estimate.v_err,
        "sigma_eff": estimate.sigma_eff,
        "sigma_err": estimate.sigma_err,
        "spectral_v_eff": reference.v_eff,
        "spectral_sigma_eff": reference.sigma_eff,
    }
    values.update(estimate.moments)
    tool.print_values(values)

    artifacts = []
    path = _artifact(args, "cycles.csv")
    if path is not None:
        tool.write_csv(path, ["cycle", "delta_t", "delta_x", "n_steps"],
                       ((k, sample.delta_t, sample.delta_x, sample.n_steps)
                        for k, sample in enumerate(samples)))
        artifacts.append(path)

    if args.msd:
        curve = renewal.msd(sojourn_model, model, parse_range(args.msd),
                            args.paths, args.seed)
        path = _artifact(args, "msd.csv")
        if path is not None:
            tool.write_csv(path,
                           ["t", "mean", "variance", "msd", "msd_err"],
                           zip(curve.times, curve.mean, curve.variance,
                               curve.msd, curve.msd_err))
            artifacts.append(path)
    return artifacts


def run_network(args) -> list[str]:
    domain = _domain(args)
    length = _length(args.length)

    if args.kind == "parallel":
        segments = geometry.parallel_network(domain, args.filaments,
                                             args.bias, length, args.seed)
    else:
        origin = parse_floats(args.origin) or [
            (domain.x0 + domain.x1) / 2, (domain.y0 + domain.y1) / 2
        ]
        segments = geometry.radial_network(domain, origin, args.filaments,
                                           args.kappa, length, args.seed)

    grid = geometry.Grid.covering(domain, args.nx, args.ny)
    field = geometry.rasterize(segments, grid)

    tool.print_values({
        "schema": f"network/{SCHEMA_VERSION}",
        "kind": args.kind,
        "filaments": len(segments),
        "occupied_cells": int((field.lengths > 0).sum()),
        "mixed_cells": int(field.mixed.sum()),
        "mean_density": float(field.density.mean()),
    })

    if args.out is None:
        return []

    artifacts = [_artifact(args, name) for name in
                 ("segments.csv", "density.field", "advection_x.field",
                  "advection_y.field")]
    tool.write_segments(segments, artifacts[0])
    tool.write_field(field.density, grid, artifacts[1])
    tool.write_field(field.advection[..., 0], grid, artifacts[2])
    tool.write_field(field.advection[..., 1], grid, artifacts[3])
    return artifacts


def run_pde(args) -> list[str]:
    model = model_core.load_model(args.model)
    model_core.check(model)

    grid = geometry.Grid.covering(_domain(args), args.nx, args.ny)
    initial = pde.parse_init(args.init, model, grid)
    networks = args.network or []

    config = pde.SolverConfig(
        t_end=args.t_end,
        dt=args.dt,
        snapshot_times=tuple(sorted(parse_floats(args.snap))),
        advection=(pde.AdvectionMode.NETWORK
                   if networks else pde.AdvectionMode.CONSTANT),
        strang=args.strang,
        record_every=args.record_every)

    media = [
        pde.Medium.from_network(
            model, geometry.rasterize(tool.read_segments(path), grid))
        for path in networks
    ]

    if not media:
        result = pde.run(initial, model, config)
    elif args.ensemble:
        result = pde.ensemble_run(initial, media, config, args.workers)
    elif args.epoch is not None:
        schedule = [(k * args.epoch, medium)
                    for k, medium in enumerate(media)][1:]
        result = pde.run(initial, media[0], config, schedule)
    elif len(media) > 1:
        raise ValueError("Several networks need --epoch or --ensemble")
    else:
        result = pde.run(initial, media[0], config)

    eff = result.effective(args.fraction)
    values = {
        "schema": f"pde/{SCHEMA_VERSION}",
        "dt": pde.time_step(model, grid, config),
        "t_end": float(result.final.t),
        "mass": float(result.mass[-1]),
        "mass_drift": result.mass_drift(),
        "method": eff.method.value,
        "v_eff": eff.v_eff,
        "sigma_eff": eff.sigma_eff,
        "snapshots": len(result.snapshots),
    }
    tool.print_values(values)

    if args.out is None:
        return []

    artifacts = [_artifact(args, "moments.csv")]
    tool.write_csv(artifacts[0], ["t", "mass", "mean_y", "var_y"],
                   zip(result.times, result.mass, result.mean_y,
                       result.var_y))

    # One dump per state per time, plus the summed density
    for k, snapshot in enumerate(result.snapshots):
        for state, values in enumerate(snapshot.values):
            path = _artifact(args, f"snapshot_{k}_{state}.field")
            tool.write_field(values, grid, path)
            artifacts.append(path)

        path = _artifact(args, f"snapshot_{k}.field")
        tool.write_field(snapshot.total, grid, path)
        artifacts.append(path)
    return artifacts


def run_spatial_effective(args) -> list[str]:
    model = model_core.load_model(args.model)
    rho = spatial.load_rho(args.rho) if args.rho else args.rho_constant

    eff = spatial.spatial_effective_transport(model, rho, args.points)
    comparator = spectral.effective_transport(
        spatial.mean_rate_model(model, rho, args.points))

    tool.print_values({
        "schema": f"spatial-effective/{SCHEMA_VERSION}",
        "points": args.points,
        "method": eff.method.value,
        "v_eff": eff.v_eff,
        "sigma_eff": eff.sigma_eff,
        "mean_rate_v_eff": comparator.v_eff,
        "mean_rate_sigma_eff": comparator.sigma_eff,
        "enhancement": eff.sigma_eff - comparator.sigma_eff,
        "adjoint_residual": spatial.adjoint_residual(model, rho, args.points),
    })

    path = _artifact(args, "profile.csv")
    if path is None:
        return []

    profile = spatial.solve_w0(model,
                               spatial.solve_u0(model, rho, args.points))
    labels = [model.label(state) for state in range(model.n_states)]
    tool.write_csv(path, ["x", "rho"] + [f"u0_{label}" for label in labels] +
                   [f"w0_{label}" for label in labels],
                   np.column_stack([profile.x, profile.rho, profile.u0,
                                    profile.w0]))
    return [path]


def run_frap_synth(args) -> list[str]:
    protocol = frap.load_protocol(args.protocol)

    if args.model is not None and not args.free:
        model = model_core.load_model(args.model)
    else:
        template = _template(args)
        model = template.build(_values(template, args.params or ""))
    model_core.check(model)

    curve = frap.synthesize(model, protocol)
    intensities = curve.intensities
    if args.noise > 0:
        rng = np.random.default_rng(args.seed)
        noise = rng.standard_normal(len(intensities))
        intensities = np.clip(intensities * (1 + args.noise * noise), 0.0,
                              None)

    tool.print_values({
        "schema": f"frap-synth/{SCHEMA_VERSION}",
        "points": len(intensities),
        "first": float(intensities[0]),
        "last": float(intensities[-1]),
        "noise": args.noise,
        "seed": args.seed,
    })

    path = _artifact(args, "curve.csv")
    if path is None:
        return []
    tool.write_csv(path, ["time_s", "intensity"],
                   zip(curve.times, intensities))
    return [path]


def _write_sweep(args, table: frap.SweepTable) -> list[str]:
    path = _artifact(args, "sweep.csv")
    if path is None:
        return []
    tool.write_csv(path, ["rank", *table.names, "objective", "reason"],
                   ((rank, *point, objective, reason)
                    for rank, (point, objective, reason) in enumerate(
                        zip(table.points, table.objectives, table.reasons))))
    return [path]


def _flat_warning(flat: list[str]):
    if flat:
        print(tool.warning(f"Flat objective valley along {', '.join(flat)}\n"
                           f"these parameters are not identifiable from "
                           f"this recovery curve"),
              file=sys.stderr)


def run_frap_sweep(args) -> list[str]:
    template = _template(args)
    protocol = frap.load_protocol(args.protocol)
    data = frap.load_curve(args.data)

    table = frap.sweep(data, protocol, template, frap.parse_grid(args.grid),
                       workers=args.workers)
    flat = frap.flat_valleys(table)

    values = {
        "schema": f"frap-sweep/{SCHEMA_VERSION}",
        "points": len(table),
        "failed": int(np.sum(~np.isfinite(table.objectives))),
        "best_objective": float(table.objectives[0]),
    }
    for name, value in zip(table.names, table.points[0]):
        values[f"best_{name}"] = value
    values["flat"] = ",".join(flat) or "none"
    tool.print_values(values)
    _flat_warning(flat)

    return _write_sweep(args, table)


def run_frap_fit(args) -> list[str]:
    template = _template(args)
    protocol = frap.load_protocol(args.protocol)
    data = frap.load_curve(args.data)

    table = None
    if args.grid:
        table = frap.sweep(data, protocol, template,
                           frap.parse_grid(args.grid), workers=args.workers)
    start = _values(template, args.start) if args.start else None

    result = frap.fit(data,
                      protocol,
                      template,
                      start,
                      table,
                      top_k=args.top_k,
                      max_iterations=args.max_iterations,
                      workers=args.workers)
    best = result.optima[0]

    values = {
        "schema": f"frap-fit/{SCHEMA_VERSION}",
        "objective": result.objective,
        "optima": len(result.optima),
        "converged": best.converged,
        "iterations": best.iterations,
    }
    values.update(result.params)
    for run in result.derived.runs:
        values[f"run_time_{run.label}"] = run.run_time
        values[f"run_length_{run.label}"] = run.run_length
    values["v_eff"] = result.derived.effective.v_eff
    values["sigma_eff"] = result.derived.effective.sigma_eff
    values["flat"] = ",".join(result.flat) or "none"
    tool.print_values(values)
    _flat_warning(result.flat)

    if args.out is None:
        return []

    artifacts = [_artifact(args, "optima.csv"), _artifact(args, "history.csv")]
    tool.write_csv(artifacts[0],
                   ["rank", *result.names, "objective", "iterations",
                    "converged"],
                   ((rank, *optimum.params, optimum.objective,
                     optimum.iterations, optimum.converged)
                    for rank, optimum in enumerate(result.optima)))
    tool.write_csv(artifacts[1], ["optimum", "iteration", "objective"],
                   ((rank, iteration, objective)
                    for rank, optimum in enumerate(result.optima)
                    for iteration, objective in enumerate(optimum.history)))

    if table is not None:
        artifacts.extend(_write_sweep(args, table))
    return artifacts


def run_rerun(args) -> list[str]:
    manifest = RunManifest.load(args.manifest)
    logging.info(f"Re-running {manifest.command} from {args.manifest}")

    recorded = {item["path"]: item["sha256"] for item in manifest.artifacts}
    execute(manifest.argv)

    changed = [
        path for path, digest in recorded.items()
        if not os.path.exists(path) or sha256_file(path) != digest
    ]
    tool.print_values({
        "schema": f"rerun/{SCHEMA_VERSION}",
        "command": manifest.command,
        "artifacts": len(recorded),
        "reproduced": not changed,
    })
    if changed:
        raise ReproducibilityError(f"Artifacts differ: {', '.join(changed)}")
    return []


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transport",
        description="Effective transport of state-switching cargo")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help: str) -> argparse.ArgumentParser:
        subparser = commands.add_parser(name, help=help)
        subparser.set_defaults(handler=handler)
        subparser.add_argument("--out",
                               help="directory for artifacts and manifest")
        return subparser

    def seeded(subparser: argparse.ArgumentParser):
        subparser.add_argument("--seed", type=int, default=0)

    def parallel(subparser: argparse.ArgumentParser):
        subparser.add_argument("--workers", type=int, default=default_workers())

    def domain(subparser: argparse.ArgumentParser, nx: int, ny: int):
        subparser.add_argument("--width", type=float, default=20.0)
        subparser.add_argument("--height", type=float, default=20.0)
        subparser.add_argument("--nx", type=int, default=nx)
        subparser.add_argument("--ny", type=int, default=ny)

    effective = command("effective", run_effective,
                        "spectral effective velocity and diffusivity")
    effective.add_argument("--model", required=True)

    dispersion = command("dispersion", run_dispersion,
                         "leading dispersion branch")
    dispersion.add_argument("--model", required=True)
    dispersion.add_argument("--nu-range", default="-1:1:41")
    dispersion.add_argument("--h", type=float, default=1e-4)

    simulate = command("simulate", run_simulate,
                       "renewal-reward Monte Carlo estimate")
    simulate.add_argument("--model", required=True)
    simulate.add_argument("--cycles", type=int, default=100000)
    simulate.add_argument("--sojourn", default="exponential")
    simulate.add_argument("--base-state", type=int)
    simulate.add_argument("--bootstrap", type=int, default=0)
    simulate.add_argument("--msd", help="observation times low:high:count")
    simulate.add_argument("--paths", type=int, default=1000)
    seeded(simulate)
    parallel(simulate)

    network = command("network", run_network, "random filament network")
    network.add_argument("--kind",
                         choices=("parallel", "radial"),
                         default="parallel")
    network.add_argument("--filaments", type=int, default=50)
    network.add_argument("--bias", type=float, default=1.0)
    network.add_argument("--kappa", type=float, default=float("inf"))
    network.add_argument("--origin", help="x,y of the radial origin")
    network.add_argument("--length", default="10", help="L or low:high")
    domain(network, 64, 64)
    seeded(network)

    solve = command("pde", run_pde, "advection-reaction-diffusion run")
    solve.add_argument("--model", required=True)
    solve.add_argument("--network",
                       action="append",
                       help="segments CSV, repeat for epochs or ensembles")
    solve.add_argument("--epoch", type=float)
    solve.add_argument("--ensemble", action="store_true")
    solve.add_argument("--init", default="gaussian:10,15,1")
    solve.add_argument("--t-end", type=float, default=5.0)
    solve.add_argument("--snap", help="comma separated snapshot times")
    solve.add_argument("--dt", type=float)
    solve.add_argument("--strang", action="store_true")
    solve.add_argument("--record-every", type=int, default=1)
    solve.add_argument("--fraction", type=float, default=0.5)
    domain(solve, 64, 64)
    parallel(solve)

    spatial_effective = command("spatial-effective", run_spatial_effective,
                                "effective transport with a density profile")
    spatial_effective.add_argument("--model", required=True)
    spatial_effective.add_argument("--rho", help="CSV with columns x,rho")
    spatial_effective.add_argument("--rho-constant", type=float, default=1.0)
    spatial_effective.add_argument("--points",
                                   type=int,
                                   default=spatial.GRID_POINTS)

    def template(subparser: argparse.ArgumentParser):
        subparser.add_argument("--template",
                               choices=tuple(TEMPLATES),
                               default="two_state")
        subparser.add_argument("--model", help="model file used as template")
        subparser.add_argument("--free",
                               help="name=speed:i|diffusivity:i|rate:j>i,...")
        subparser.add_argument("--protocol", required=True)

    synth = command("frap-synth", run_frap_synth, "synthetic FRAP curve")
    template(synth)
    synth.add_argument("--params", help="name=value,...")
    synth.add_argument("--noise", type=float, default=0.0)
    seeded(synth)

    frap_sweep = command("frap-sweep", run_frap_sweep,
                         "objective over a log-spaced grid")
    template(frap_sweep)
    frap_sweep.add_argument("--data", required=True)
    frap_sweep.add_argument("--grid", required=True)
    parallel(frap_sweep)

    frap_fit = command("frap-fit", run_frap_fit, "multi-start FRAP fit")
    template(frap_fit)
    frap_fit.add_argument("--data", required=True)
    frap_fit.add_argument("--grid")
    frap_fit.add_argument("--start", help="name=value,...")
    frap_fit.add_argument("--top-k", type=int, default=frap.TOP_K)
    frap_fit.add_argument("--max-iterations",
                          type=int,
                          default=frap.MAX_ITERATIONS)
    parallel(frap_fit)

    rerun = command("rerun", run_rerun, "repeat a recorded run")
    rerun.add_argument("--manifest", required=True)

    return parser


def execute(argv: list[str]) -> list[str]:
    args = build_parser().parse_args(argv)

    start = time.perf_counter()
    artifacts = args.handler(args)
    wall_time = time.perf_counter() - start

    if args.out is not None and args.command != "rerun":
        manifest = RunManifest(
            command=args.command,
            argv=list(argv),
            config={
                key: value
                for key, value in vars(args).items() if key != "handler"
            },
            seed=getattr(args, "seed", None),
            artifacts=[{
                "path": path,
                "sha256": sha256_file(path)
            } for path in artifacts],
            wall_time=wall_time,
            version=version_hash())
        manifest.write(os.path.join(args.out, MANIFEST_NAME))

    return artifacts


def main(argv: list[str] | None = None) -> int:
    if "DEBUG" in os.environ:
        logging.basicConfig(level=logging.DEBUG)
    else:
        logging.basicConfig(level=logging.WARNING)

    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        execute(argv)
    except Exception as error:
        message = " ".join(str(error).split())
        print(f"error: {type(error).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
