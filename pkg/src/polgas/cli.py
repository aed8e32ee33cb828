"""Command-line front end.

Subcommands map onto the package's main entry points:

``params``   derived effective-theory quantities plus the validity report
``ground``   ground state of the lattice model and its observables
``evolve``   trajectory ensemble (optionally checked against the master
             equation)
``relax``    post-selected relaxation of a condensate under two-body loss
``ramp``     time-dependent coupling sweep
``oracle``   free-fermion reference values (closed forms, no simulation)
``schema``   print the accepted configuration layout

Configuration is a JSON file; unknown keys are rejected rather than ignored.
Every run writes (with ``-o``) a summary JSON that embeds the resolved
configuration under ``"config"``, and a summary file is itself accepted
anywhere a configuration is expected, so runs can be reproduced from their
own outputs.  Output is deterministic: no timestamps, floats through
``repr``-faithful JSON, NaN rendered as null.

Exit codes: 0 on success, 2 for configuration problems, 3 for runtime
failures.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, observables
from .dynamics import (RampSchedule, SectorCache, adiabatic_ramp,
                       condensate_state, dissipative_relax, ensemble_average,
                       ground_state, master_evolve)
from .freefermi import (FermiReference, ff_density, ff_energy,
                        ff_pair_correlation, box_mode_energy, tg_coincidence)
from .lattice import LatticeParams, to_lattice
from .params import PhysicalParams, check_validity, derive, interaction_strength


class ConfigError(Exception):
    """Anything wrong with the configuration file (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration plumbing

_PHYSICAL_KEYS = ("n_atoms", "n_photons", "length", "g13", "g24", "omega_c",
                  "gamma31", "gamma32", "gamma42", "delta", "delta_int",
                  "delta_omega", "k_max", "c_light")
_LATTICE_PHYS_KEYS = ("m_sites", "boundary")
_LATTICE_DIMLESS_KEYS = ("m_sites", "n_max", "hop", "u_re", "kappa2",
                         "kappa1", "kappa_d", "boundary")

_RUN_KEYS = {
    "params": {"margin": 0.1},
    "ground": {"n_particles": None},
    "evolve": {"t_final": None, "n_times": 21, "n_trajectories": 256,
               "seed": 0, "threads": 1, "tol": 1e-9, "initial": "ground",
               "master_comparison": False},
    "relax": {"t_final": None, "n_times": 101,
              "thresholds": [1.0, 0.5, 0.25], "tol": 1e-9},
    "ramp": {"n_times": 51, "tol": 1e-8, "initial": "ground",
             "schedule": None},
    "oracle": {"n_particles": None, "length": 1.0, "geometry": "box",
               "mass_over_hbar": None, "n_points": 33, "z_ref": None,
               "g_abs": None, "n_photons": None},
}

_TOP_KEYS = {
    "params": ("physical", "run"),
    "ground": ("physical", "lattice", "run"),
    "evolve": ("physical", "lattice", "run"),
    "relax": ("physical", "lattice", "run"),
    "ramp": ("physical", "lattice", "run"),
    "oracle": ("run",),
}


def _check_keys(name: str, d: dict, allowed, required=()) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section '{name}' must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    missing = sorted(set(required) - set(d))
    if missing:
        raise ConfigError(f"missing key(s) in {name}: {', '.join(missing)}")


def load_config(path: str, command: str) -> dict:
    """Read a config (or a previous run's summary) and validate its shape."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level of the config must be a JSON object")
    if "config" in raw and "command" in raw:
        raw = raw["config"]            # a summary file: unwrap
        if not isinstance(raw, dict):
            raise ConfigError("summary file carries no usable 'config'")
    _check_keys("config", raw, _TOP_KEYS[command])
    if "physical" in raw:
        _check_keys("physical", raw["physical"], _PHYSICAL_KEYS,
                    required=("n_atoms", "n_photons", "length", "g13", "g24",
                              "omega_c", "gamma31", "gamma32", "gamma42",
                              "delta"))
    run = raw.get("run", {})
    _check_keys("run", run, _RUN_KEYS[command])
    resolved = copy.deepcopy(raw)
    merged = dict(_RUN_KEYS[command])
    merged.update(run)
    resolved["run"] = merged
    return resolved


def _build_physical(cfg: dict) -> PhysicalParams:
    try:
        return PhysicalParams(**cfg["physical"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad physical parameters: {exc}") from exc


def _build_lattice(cfg: dict):
    """Return (LatticeParams, DerivedParams-or-None) from either route."""
    if "physical" in cfg:
        p = _build_physical(cfg)
        lat = cfg.get("lattice")
        if lat is None:
            raise ConfigError("a 'lattice' section with 'm_sites' is needed "
                              "to discretize the physical model")
        _check_keys("lattice", lat, _LATTICE_PHYS_KEYS, required=("m_sites",))
        try:
            d = derive(p)
            lp = to_lattice(d, int(lat["m_sites"]),
                            lat.get("boundary", "open"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return lp, d
    lat = cfg.get("lattice")
    if lat is None:
        raise ConfigError("config needs a 'physical' or a 'lattice' section")
    _check_keys("lattice", lat, _LATTICE_DIMLESS_KEYS,
                required=("m_sites", "n_max"))
    try:
        return LatticeParams.dimensionless(**lat), None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad lattice parameters: {exc}") from exc


def _sanitize(x):
    """Make results JSON-safe and deterministic (NaN -> null, complex -> re/im)."""
    if isinstance(x, dict):
        return {str(k): _sanitize(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_sanitize(v) for v in x]
    if isinstance(x, np.ndarray):
        return _sanitize(x.tolist())
    if isinstance(x, complex):          # covers np.complex128
        return {"re": _sanitize(float(x.real)), "im": _sanitize(float(x.imag))}
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.floating):
        x = float(x)
    if isinstance(x, float):
        if math.isnan(x):
            return None
        return x
    return x


def _dump(obj) -> str:
    return json.dumps(_sanitize(obj), indent=2, sort_keys=True,
                      allow_nan=False)


def _initial_state(lp, which: str, cache: SectorCache):
    if which == "ground":
        return ground_state(lp, cache=cache).state
    if which == "condensate":
        return condensate_state(lp, cache=cache)
    raise ConfigError(f"unknown initial state '{which}' "
                      "(expected 'ground' or 'condensate')")


# ---------------------------------------------------------------------------
# command handlers: cfg -> (results dict, brief stdout lines)

def _cmd_params(cfg, verbose: bool):
    p = _build_physical(cfg)
    run = cfg["run"]
    try:
        d = derive(p)
        strength = interaction_strength(p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rep = check_validity(p, margin=float(run["margin"]))
    results = {
        "omega0": d.omega0, "sin_theta": d.sin_theta,
        "cos_theta": d.cos_theta, "gamma_total": d.gamma_total,
        "mass_eff_kg": d.mass_eff, "g_tilde_Jm": d.g_tilde,
        "optical_depth": d.od, "optical_depth_interaction": d.od_interaction,
        "epsilon_shift": d.epsilon_shift,
        "shifted_detuning": d.shifted_detuning,
        "g_complex": d.g_complex, "g_abs": d.g_abs,
        "g_closed_form": strength.g, "g_abs_closed_form": strength.g_abs,
        "kappa1": d.kappa1, "kappa_d": d.kappa_d,
        "kappa2_continuum": d.kappa2_cont,
        "t_max_s": d.t_max, "relax_timescale_s": d.relax_timescale,
        "validity": {
            "margin": rep.margin,
            "all_passed": rep.all_passed,
            "checks": [{"name": c.name, "lhs": c.lhs, "rhs": c.rhs,
                        "ratio": c.ratio, "passed": c.passed,
                        "description": c.description} for c in rep.checks],
        },
    }
    brief = [f"|G| = {d.g_abs!r} (optical depth {d.od!r})",
             f"validity: {sum(c.passed for c in rep.checks)}/"
             f"{len(rep.checks)} checks passed (margin {rep.margin!r})"]
    if verbose:
        for c in rep.checks:
            brief.append(f"  [{'ok' if c.passed else 'FAIL'}] {c.name}: "
                         f"ratio = {c.ratio!r}")
    return results, brief


def _cmd_ground(cfg, verbose: bool):
    lp, _ = _build_lattice(cfg)
    run = cfg["run"]
    cache = SectorCache(lp)
    n = run["n_particles"]
    gs = ground_state(lp, None if n is None else int(n), cache=cache)
    rep = observables.report(gs.state, lp, cache.tower)
    results = {
        "m_sites": lp.m_sites, "boundary": lp.boundary,
        "n_particles": gs.state.basis.n_total,
        "g_param": lp.g_param,
        "energy": gs.energy, "gap": gs.gap, "residual": gs.residual,
        "degenerate": gs.degenerate,
        "density": rep.density, "g2": rep.g2,
        "mode_wavenumbers": rep.modes.wavenumbers,
        "mode_occupations": rep.modes.occupations,
        "friedel_dominant_frequency": rep.friedel.dominant_frequency,
        "friedel_dominant_amplitude": rep.friedel.dominant_amplitude,
    }
    brief = [f"energy = {gs.energy!r}, gap = {gs.gap!r}",
             f"peak mode occupation = {float(rep.modes.occupations.max())!r}"]
    if verbose:
        brief.append("density = " + _dump(rep.density))
    return results, brief


def _cmd_evolve(cfg, verbose: bool):
    lp, _ = _build_lattice(cfg)
    run = cfg["run"]
    if run["t_final"] is None:
        raise ConfigError("run.t_final is required for 'evolve'")
    times = np.linspace(0.0, float(run["t_final"]), int(run["n_times"]))
    cache = SectorCache(lp)
    initial = _initial_state(lp, run["initial"], cache)
    ens = ensemble_average(lp, initial, times,
                           n_trajectories=int(run["n_trajectories"]),
                           master_seed=int(run["seed"]),
                           tol=float(run["tol"]),
                           threads=int(run["threads"]),
                           cache=cache)
    results = {
        "times": times, "n_trajectories": ens.n_trajectories,
        "seed": ens.master_seed, "batch_size": ens.batch_size,
        "density": ens.density, "density_se": ens.density_se,
        "total_number": ens.total_number,
        "total_number_se": ens.total_number_se,
        "g2": ens.g2, "g2_se": ens.g2_se,
        "jump_counts": ens.jump_counts,
    }
    brief = [f"trajectories = {ens.n_trajectories}, "
             f"jumps = {sum(ens.jump_counts.values())}",
             f"final <N> = {float(ens.total_number[-1])!r} "
             f"+- {float(ens.total_number_se[-1])!r}"]
    if run["master_comparison"]:
        mas = master_evolve(lp, initial, times, tol=float(run["tol"]),
                            cache=cache)
        z_dens = np.abs(ens.density - mas.density) / ens.density_se
        z_n = np.abs(ens.total_number - mas.total_number) \
            / ens.total_number_se
        results["master"] = {
            "density": mas.density, "total_number": mas.total_number,
            "trace_drift": float(np.abs(mas.trace - mas.trace[0]).max()),
            "max_z_density": float(z_dens.max()),
            "max_z_total_number": float(z_n.max()),
        }
        brief.append(f"master check: max|z| density = {float(z_dens.max())!r}, "
                     f"total number = {float(z_n.max())!r}")
    return results, brief


def _cmd_relax(cfg, verbose: bool):
    lp, _ = _build_lattice(cfg)
    run = cfg["run"]
    if run["t_final"] is None:
        raise ConfigError("run.t_final is required for 'relax'")
    times = np.linspace(0.0, float(run["t_final"]), int(run["n_times"]))
    res = dissipative_relax(lp, times,
                            thresholds=tuple(float(t)
                                             for t in run["thresholds"]),
                            tol=float(run["tol"]))
    results = {
        "times": times, "g2_global": res.g2_global,
        "survival": res.survival, "tau_ref": res.tau_ref,
        "crossings": {repr(k): v for k, v in res.crossings.items()},
        "final_density": res.density[-1],
    }
    brief = [f"tau_ref = {res.tau_ref!r}",
             "crossings: " + ", ".join(f"{k!r} -> {v!r}"
                                       for k, v in res.crossings.items()),
             f"survival at end = {float(res.survival[-1])!r}"]
    return results, brief


def _parse_schedule(spec, cfg, lp):
    if not isinstance(spec, dict):
        raise ConfigError("run.schedule must be an object")
    kind = spec.get("kind", "u")
    if kind == "u":
        _check_keys("run.schedule", spec, ("kind", "times", "re", "im"),
                    required=("times", "re"))
        re = np.asarray(spec["re"], dtype=float)
        im = np.asarray(spec.get("im", np.zeros_like(re)), dtype=float)
        try:
            return RampSchedule.of_coupling(spec["times"], re + 1j * im)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if kind == "delta":
        _check_keys("run.schedule", spec, ("kind", "times", "values"),
                    required=("times", "values"))
        if "physical" not in cfg:
            raise ConfigError("a detuning schedule needs the 'physical' "
                              "section to map detunings to couplings")
        d = derive(_build_physical(cfg))
        try:
            return RampSchedule.from_detuning(d, lp, spec["times"],
                                              spec["values"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown schedule kind '{kind}'")


def _cmd_ramp(cfg, verbose: bool):
    lp, _ = _build_lattice(cfg)
    run = cfg["run"]
    if run["schedule"] is None:
        raise ConfigError("run.schedule is required for 'ramp'")
    schedule = _parse_schedule(run["schedule"], cfg, lp)
    t0, t1 = float(schedule.times[0]), float(schedule.times[-1])
    if t1 <= t0:
        raise ConfigError("schedule must span a positive time interval")
    times = np.linspace(t0, t1, int(run["n_times"]))
    from dataclasses import replace
    lp_start = replace(lp, u=schedule.u_of(t0))
    cache = SectorCache(lp_start)
    initial = _initial_state(lp_start, run["initial"], cache)
    res = adiabatic_ramp(lp, initial, schedule, times, tol=float(run["tol"]))
    final = res.final_state
    dens = observables.density(final)
    _, g2 = observables.pair_correlation(final)
    results = {
        "times": times, "survival": res.survival,
        "u_start": schedule.u_of(t0), "u_end": schedule.u_of(t1),
        "n_accepted": res.n_accepted, "n_rejected": res.n_rejected,
        "final_density": dens, "final_g2_diagonal": np.diagonal(g2),
    }
    brief = [f"steps: {res.n_accepted} accepted, {res.n_rejected} rejected",
             f"survival at end = {float(res.survival[-1])!r}"]
    return results, brief


def _cmd_oracle(cfg, verbose: bool):
    run = cfg["run"]
    if run["n_particles"] is None:
        raise ConfigError("run.n_particles is required for 'oracle'")
    try:
        ref = FermiReference(
            n_particles=int(run["n_particles"]),
            length=float(run["length"]),
            geometry=run["geometry"],
            mass_over_hbar=(None if run["mass_over_hbar"] is None
                            else float(run["mass_over_hbar"])))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    npts = int(run["n_points"])
    z = np.linspace(0.0, ref.length, npts)
    r = np.linspace(0.0, ref.length, npts)
    z_ref = run["z_ref"]
    if z_ref is None and ref.geometry == "box":
        z_ref = 0.5 * ref.length
    g2 = ff_pair_correlation(ref, r,
                             None if z_ref is None else float(z_ref))
    results = {
        "geometry": ref.geometry, "n_particles": ref.n_particles,
        "length": ref.length,
        "positions": z, "density": ff_density(ref, z),
        "separations": r, "pair_correlation": g2,
    }
    if ref.mass_over_hbar is not None:
        results["energy"] = ff_energy(ref)
        if ref.geometry == "box":
            results["mode_energies"] = [box_mode_energy(ref, q)
                                        for q in range(1, 5)]
    if run["g_abs"] is not None and run["n_photons"] is not None:
        results["tg_coincidence"] = tg_coincidence(
            float(run["g_abs"]), int(run["n_photons"]))
    brief = [f"{ref.geometry} reference for N = {ref.n_particles}"]
    if "tg_coincidence" in results:
        brief.append(f"coincidence estimate = {results['tg_coincidence']!r}")
    return results, brief


_HANDLERS = {
    "params": _cmd_params,
    "ground": _cmd_ground,
    "evolve": _cmd_evolve,
    "relax": _cmd_relax,
    "ramp": _cmd_ramp,
    "oracle": _cmd_oracle,
}

_SCHEMA = {
    "physical": {k: "number (rad/s, m, counts as appropriate)"
                 for k in _PHYSICAL_KEYS},
    "lattice": {
        "with physical": {"m_sites": "int", "boundary": "open|periodic"},
        "dimensionless": {k: "number" for k in _LATTICE_DIMLESS_KEYS},
    },
    "run": _RUN_KEYS,
    "notes": [
        "configs are strict: unknown keys are errors",
        "a summary file (with command+config) is accepted as a config",
        "'evolve' honors --seed/--threads overrides from the command line",
        "run.schedule: {kind: 'u', times: [...], re: [...], im: [...]} or "
        "{kind: 'delta', times: [...], values: [...]} (needs 'physical')",
    ],
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="polgas",
        description="dissipative one-dimensional polariton gas simulator")
    parser.add_argument("--version", action="version",
                        version=f"polgas {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _HANDLERS:
        sp = sub.add_parser(name, help=f"run the '{name}' computation")
        sp.add_argument("-c", "--config", required=True,
                        help="JSON config (or a previous summary) file")
        sp.add_argument("-o", "--outdir", default=None,
                        help="directory for <command>_summary.json")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "evolve":
            sp.add_argument("--seed", type=int, default=None,
                            help="override run.seed")
            sp.add_argument("--threads", type=int, default=None,
                            help="override run.threads")
    sub.add_parser("schema", help="print the accepted config layout")
    args = parser.parse_args(argv)

    if args.command == "schema":
        print(_dump(_SCHEMA))
        return 0

    try:
        cfg = load_config(args.config, args.command)
        if args.command == "evolve":
            if getattr(args, "seed", None) is not None:
                cfg["run"]["seed"] = args.seed
            if getattr(args, "threads", None) is not None:
                cfg["run"]["threads"] = args.threads
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        results, brief = _HANDLERS[args.command](cfg, args.verbose)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:      # noqa: BLE001 - boundary of the CLI
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3

    summary = {"command": args.command, "package_version": __version__,
               "config": cfg, "results": results}
    for line in brief:
        print(line)
    if args.outdir is not None:
        outdir = Path(args.outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        out = outdir / f"{args.command}_summary.json"
        out.write_text(_dump(summary) + "\n")
        print(f"wrote {out}")
    elif args.verbose:
        print(_dump(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
