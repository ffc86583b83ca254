"""Command line front end.

Subcommands:
  spectrum   correlation table, Wiener averages, rigidity defects, PSD check
  construct  cutoff selection, reflected series, running averages, peak table
  verify     run the library's invariant checks on the configured case
  simulate   Gaussian sampling estimate of the average at the configured n

One JSON config document drives everything; command line flags override
single keys.  Every run echoes the normalized config next to its outputs so
a run can be reproduced from its output directory alone.  Exit codes:
0 success, 2 validation failure, 3 cutoff horizon exhausted, 4 numerical
failure (including a simulation z-score beyond 4).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import HorizonExhaustedFault, NumericalFault, ValidationFault
from .spectral import (
    Arc,
    ConvolutionTruncated,
    CorrelationSequence,
    Lebesgue,
    Mixture,
    QuadratureDensity,
    RawTable,
    family_from_config,
    rigidity_defect,
    system_rigidity_defect,
    validate_psd,
    wiener_average,
)
from .krylov import GramLadder
from .construction import (
    ORACLE_CAP,
    build_report,
    compare_with_oracle,
    cross_gram,
    cross_inner,
    reflected_series,
    select_cutoffs,
)
from .gaussian import SimulationConfig, build_joint_covariance, sample_and_estimate

DEFAULT_CONFIG = {
    "spectrum": {"name": "lebesgue"},
    "construct": {
        "depth": 7,
        "max_horizon": 100000,
        "oracle": False,
        "oracle_cap": ORACLE_CAP,
    },
    "simulate": {
        "n": 10,
        "samples": 200000,
        "seed": 20260816,
        "truncation": None,
    },
    "spectrum_report": {
        "max_lag": 32,
        "wiener_ns": [10, 100, 1000],
        "rigidity_qs": [4, 16, 64, 256],
        "psd_window": 64,
    },
    "out": "oscavg_out",
    "format": "both",
}

_FORMATS = ("csv", "json", "both")


# -- config handling -----------------------------------------------------------


def _family_to_config(family) -> dict:
    if isinstance(family, Lebesgue):
        return {"name": "lebesgue"}
    if isinstance(family, Arc):
        return {"name": "arc", "epsilon": family.epsilon}
    if isinstance(family, ConvolutionTruncated):
        return {"name": "convolution", "base": family.base,
                "factors": family.factors}
    if isinstance(family, Mixture):
        return {
            "name": "mixture",
            "components": [
                {"weight": w, "spectrum": _family_to_config(f)}
                for w, f in family.components
            ],
        }
    if isinstance(family, QuadratureDensity):
        return {
            "name": "quadrature",
            "thetas": list(family.thetas),
            "densities": list(family.densities),
            "nodes": family.nodes,
        }
    if isinstance(family, RawTable):
        return {"name": "table", "values": list(family.values)}
    raise ValidationFault(f"unknown family object {family!r}")


def _require_keys(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ValidationFault(
            f"unknown key(s) {sorted(unknown)} in config section '{where}'"
        )


def _as_int(value, key, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationFault(f"config key '{key}' must be a number")
    out = int(value)
    if out != value:
        raise ValidationFault(f"config key '{key}' must be an integer")
    if minimum is not None and out < minimum:
        raise ValidationFault(f"config key '{key}' must be >= {minimum}")
    return out


def normalize_config(raw: dict) -> dict:
    """Fill defaults, validate, and return the canonical config document.

    Canonicalization is idempotent: normalizing a normalized document
    returns it unchanged, which is what makes run directories replayable.
    """
    if not isinstance(raw, dict):
        raise ValidationFault("config must be a JSON object")
    _require_keys(raw, DEFAULT_CONFIG, "top level")
    out: dict = {}

    family = family_from_config(raw.get("spectrum", DEFAULT_CONFIG["spectrum"]))
    out["spectrum"] = _family_to_config(family)

    section = dict(DEFAULT_CONFIG["construct"])
    section.update(raw.get("construct", {}))
    _require_keys(section, DEFAULT_CONFIG["construct"], "construct")
    out["construct"] = {
        "depth": _as_int(section["depth"], "construct.depth", minimum=1),
        "max_horizon": _as_int(section["max_horizon"],
                               "construct.max_horizon", minimum=1),
        "oracle": bool(section["oracle"]),
        "oracle_cap": _as_int(section["oracle_cap"],
                              "construct.oracle_cap", minimum=1),
    }

    section = dict(DEFAULT_CONFIG["simulate"])
    section.update(raw.get("simulate", {}))
    _require_keys(section, DEFAULT_CONFIG["simulate"], "simulate")
    truncation = section["truncation"]
    if truncation is not None:
        truncation = float(truncation)
        if not truncation > 0:
            raise ValidationFault("config key 'simulate.truncation' must be > 0")
    out["simulate"] = {
        "n": _as_int(section["n"], "simulate.n", minimum=1),
        "samples": _as_int(section["samples"], "simulate.samples", minimum=2),
        "seed": _as_int(section["seed"], "simulate.seed", minimum=0),
        "truncation": truncation,
    }

    section = dict(DEFAULT_CONFIG["spectrum_report"])
    section.update(raw.get("spectrum_report", {}))
    _require_keys(section, DEFAULT_CONFIG["spectrum_report"], "spectrum_report")
    out["spectrum_report"] = {
        "max_lag": _as_int(section["max_lag"], "spectrum_report.max_lag", 0),
        "wiener_ns": sorted(
            _as_int(v, "spectrum_report.wiener_ns[]", 1)
            for v in section["wiener_ns"]
        ),
        "rigidity_qs": sorted(
            _as_int(v, "spectrum_report.rigidity_qs[]", 1)
            for v in section["rigidity_qs"]
        ),
        "psd_window": _as_int(section["psd_window"],
                              "spectrum_report.psd_window", 1),
    }

    out["out"] = str(raw.get("out", DEFAULT_CONFIG["out"]))
    fmt = str(raw.get("format", DEFAULT_CONFIG["format"]))
    if fmt not in _FORMATS:
        raise ValidationFault(f"format must be one of {_FORMATS}, got {fmt!r}")
    out["format"] = fmt
    return out


def _parse_family_flag(text: str) -> dict:
    """Compact family syntax: lebesgue | arc:EPS | convolution:BASE,J | quadrature:CSV[,NODES] | table:V0,V1,..."""
    name, _, params = text.partition(":")
    name = name.strip().lower()
    if name == "lebesgue":
        return {"name": "lebesgue"}
    if name == "arc":
        return {"name": "arc", "epsilon": float(params)}
    if name == "convolution":
        base, factors = params.split(",")
        return {"name": "convolution", "base": int(base), "factors": int(factors)}
    if name == "quadrature":
        parts = params.split(",")
        spec = {"name": "quadrature", "csv": parts[0]}
        if len(parts) > 1:
            spec["nodes"] = int(parts[1])
        return spec
    if name == "table":
        return {"name": "table",
                "values": [float(v) for v in params.split(",")]}
    raise ValidationFault(
        f"unknown family {name!r}; expected lebesgue, arc, convolution, "
        "quadrature, or table (mixtures are config-file only)"
    )


def load_config(args) -> dict:
    raw = {}
    if args.config is not None:
        with open(args.config) as handle:
            raw = json.load(handle)
    config = normalize_config(raw)
    if getattr(args, "family", None):
        config["spectrum"] = _parse_family_flag(args.family)
    overrides = {
        "construct": ("depth", "max_horizon", "oracle_cap"),
        "simulate": ("n", "samples", "seed", "truncation"),
        "spectrum_report": ("max_lag", "psd_window"),
    }
    for section, keys in overrides.items():
        for key in keys:
            value = getattr(args, key, None)
            if value is not None:
                config[section][key] = value
    if getattr(args, "oracle", None) is not None:
        config["construct"]["oracle"] = args.oracle
    if args.out is not None:
        config["out"] = args.out
    if args.format is not None:
        config["format"] = args.format
    return normalize_config(config)


# -- output helpers --------------------------------------------------------------


def _out_dir(config: dict) -> Path:
    path = Path(config["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(config: dict, out: Path) -> None:
    with open(out / "config.normalized.json", "w") as handle:
        json.dump(config, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _want(config: dict, kind: str) -> bool:
    return config["format"] in (kind, "both")


def _write_csv(path: Path, header: str, rows) -> None:
    with open(path, "w") as handle:
        handle.write(header + "\n")
        for row in rows:
            handle.write(",".join(
                v if isinstance(v, str)
                else str(int(v)) if isinstance(v, (int, np.integer))
                else repr(float(v))
                for v in row
            ) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def _sequence(config: dict) -> CorrelationSequence:
    return CorrelationSequence(family_from_config(config["spectrum"]))


# -- commands ---------------------------------------------------------------------


def cmd_spectrum(config: dict) -> int:
    seq = _sequence(config)
    section = config["spectrum_report"]
    out = _out_dir(config)
    _echo_config(config, out)

    lags = np.arange(section["max_lag"] + 1)
    values = seq.correlations(lags)
    psd = validate_psd(seq, section["psd_window"])
    wiener = [(n, wiener_average(seq, n)) for n in section["wiener_ns"]]
    rigidity = [
        (q, seq.correlation(q), rigidity_defect(seq, q),
         system_rigidity_defect(seq, q))
        for q in section["rigidity_qs"]
    ]

    if _want(config, "csv"):
        _write_csv(out / "correlations.csv", "i,r_i",
                   zip(lags.tolist(), values.tolist()))
        _write_csv(out / "wiener.csv", "n,wiener_average", wiener)
        _write_csv(out / "rigidity.csv",
                   "q,r_q,rigidity_defect,system_rigidity_defect", rigidity)
    if _want(config, "json"):
        _write_json(out / "spectrum.json", {
            "family": seq.label(),
            "atomless": seq.atomless,
            "support": seq.support,
            "validity_horizon": seq.validity_horizon,
            "psd_window": psd.window,
            "psd_ok": psd.ok,
            "psd_min_eigenvalue_estimate": psd.min_eigenvalue_estimate,
            "correlations": dict(zip(map(int, lags), map(float, values))),
            "wiener_averages": {str(n): float(v) for n, v in wiener},
            "rigidity": [
                {"q": int(q), "r": float(r), "defect": float(d),
                 "system_defect": float(s)}
                for q, r, d, s in rigidity
            ],
        })

    print(f"family: {seq.label()}")
    print(f"psd window {psd.window}: ok={psd.ok} "
          f"min_eigenvalue_estimate={psd.min_eigenvalue_estimate:.3e}")
    for n, v in wiener:
        print(f"wiener_average({n}) = {v:.6g}")
    for q, r, d, s in rigidity:
        print(f"q={q}: r={r:.6g} rigidity_defect={d:.6g} "
              f"system_rigidity_defect={s:.6g}")
    return 0


def cmd_construct(config: dict) -> int:
    seq = _sequence(config)
    section = config["construct"]
    out = _out_dir(config)
    _echo_config(config, out)
    ladder = GramLadder(seq)
    try:
        report = build_report(
            seq,
            section["depth"],
            max_horizon=section["max_horizon"],
            oracle=section["oracle"],
            oracle_cap=section["oracle_cap"],
            ladder=ladder,
        )
    except HorizonExhaustedFault as fault:
        partial = {
            "family": seq.label(),
            "fault": {
                "kind": "horizon_exhausted",
                "level": fault.level,
                "horizon": fault.horizon,
                "best_average": fault.best_average,
                "message": str(fault),
            },
            "partial_cutoffs": list(ladder.cutoffs),
            "diagnostics": ladder.diagnostics,
        }
        if _want(config, "json"):
            _write_json(out / "report.json", partial)
        print(f"construct failed: {fault}", file=sys.stderr)
        return fault.exit_code

    if _want(config, "json"):
        _write_json(out / "report.json", report.to_json_dict())
    if _want(config, "csv"):
        _write_csv(out / "a_series.csv", "i,a_i",
                   enumerate(report.a.tolist()))
        _write_csv(out / "averages.csv", "n,A_n",
                   enumerate(report.averages.tolist(), start=1))
    print(report.peak_table_text())
    if report.oracle is not None:
        print(f"oracle max |a delta| = {report.oracle['max_a_delta']:.3e}, "
              f"max |cross delta| = {report.oracle['max_cross_delta']:.3e} "
              f"on {report.oracle['levels_compared']} level(s)")
    return 0


def _verify_checks(config: dict):
    """Yield (name, passed, detail) tuples for the configured case."""
    seq = _sequence(config)
    section = config["construct"]

    psd = validate_psd(seq, config["spectrum_report"]["psd_window"])
    yield ("psd_validation", psd.ok,
           f"window {psd.window}, min eigenvalue estimate "
           f"{psd.min_eigenvalue_estimate:.3e}")

    lags = np.arange(config["spectrum_report"]["max_lag"] + 1)
    overshoot = float(np.max(np.abs(seq.correlations(lags)))) - 1.0
    yield ("correlation_bounds", overshoot <= 1e-12,
           f"max |r| overshoot {overshoot:.3e}")
    if not psd.ok:
        return

    # Families with a finite validity horizon cannot host arbitrarily deep
    # ladders; verify the invariants on the deepest ladder that completes.
    depth = section["depth"]
    cutoffs = None
    while depth >= 1:
        ladder = GramLadder(seq)
        try:
            cutoffs = select_cutoffs(seq, depth,
                                     max_horizon=section["max_horizon"],
                                     ladder=ladder)
            break
        except HorizonExhaustedFault as fault:
            # the fault level is the first level that cannot complete, so
            # retry directly below it instead of stepping one at a time
            depth = min(depth - 1, fault.level - 1)
    if cutoffs is None:
        yield ("cutoff_selection", False,
               "no depth completes within the horizon")
        return
    note = "" if depth == section["depth"] else f" (depth reduced to {depth})"
    yield ("cutoff_selection", True,
           f"cutoffs {cutoffs.ns}, jitter {ladder.jitter_used:.1e}{note}")

    alphas_ok = all(
        alpha < 1.0 / k for k, alpha in enumerate(cutoffs.alphas[1:], start=2)
    )
    yield ("projection_average_strictness", alphas_ok,
           f"achieved averages {tuple(round(a, 6) for a in cutoffs.alphas)}")

    size = cutoffs.ns[-1]
    profiles = [ladder.block_profile(i) for i in range(size)]
    in_window = 0.0
    for k, n in enumerate(cutoffs.ns, start=1):
        for i in range(n):
            in_window = max(in_window, abs(profiles[i].p[k - 1] - 1.0))
    yield ("in_window_exactness", in_window <= 1e-8,
           f"max |p_k(i) - 1| = {in_window:.3e} over i < n_k")

    completeness = max(abs(float(p.q.sum()) - 1.0) for p in profiles)
    yield ("block_completeness", completeness <= 1e-8,
           f"max |sum_k q_k(i) - 1| = {completeness:.3e}")

    monotone = 0.0
    stride = max(1, (3 * size) // 64)
    for i in range(size, 4 * size, stride):
        p = ladder.block_profile(i).p
        monotone = max(monotone, float(np.max(np.diff(p) * -1.0, initial=0.0)))
    yield ("nested_monotonicity", monotone <= 1e-8,
           f"max p_k decrease {monotone:.3e} sampled up to 4 n_K")

    a = reflected_series(ladder)
    base = max(
        abs(cross_inner(ladder, i, 0) - seq.correlation(i)) for i in range(size)
    )
    yield ("cross_base_identity", base <= 1e-8,
           f"max |cross(i,0) - r(i)| = {base:.3e}")

    if size <= section["oracle_cap"]:
        consistency = float(np.max(np.abs(
            np.diagonal(cross_gram(ladder)) - a
        )))
    else:
        idx = range(0, size, max(1, size // 128))
        consistency = max(
            abs(cross_inner(ladder, i, i) - float(a[i])) for i in idx
        )
    yield ("diagonal_consistency", consistency <= 1e-10,
           f"max |cross(i,i) - a(i)| = {consistency:.3e}")

    from .construction import peak_rows, running_averages

    rows = peak_rows(cutoffs, running_averages(a))
    bad = [r for r in rows if r.level >= 2 and not r.within]
    yield ("peak_bound", not bad,
           "all |A(n_k) - target| < 2/k" if not bad else
           f"levels {[r.level for r in bad]} violate 2/k")

    cov = build_joint_covariance(ladder, min(10, size))
    diag_dev = float(np.max(np.abs(np.diagonal(cov.matrix) - 1.0)))
    col = cov.cross_block[:, 0]
    col_dev = float(np.max(np.abs(
        col - seq.correlations(np.arange(cov.n))
    )))
    yield ("joint_covariance", diag_dev == 0.0 and col_dev <= 1e-8,
           f"diag dev {diag_dev:.3e}, cross column dev {col_dev:.3e}, "
           f"repair jitter {cov.psd_jitter:.1e}")

    if section["oracle"]:
        prefix = tuple(n for n in cutoffs.ns if n <= section["oracle_cap"])
        if prefix:
            deltas = compare_with_oracle(seq, prefix,
                                         cap=section["oracle_cap"])
            ok = (deltas["max_a_delta"] <= 1e-8
                  and deltas["max_cross_delta"] <= 1e-8
                  and deltas["w_involution_error"] <= 1e-10
                  and deltas["v_isometry_error"] <= 1e-8)
            yield ("oracle_agreement", ok,
                   f"a {deltas['max_a_delta']:.3e}, "
                   f"cross {deltas['max_cross_delta']:.3e}, "
                   f"W^2 {deltas['w_involution_error']:.3e}, "
                   f"V-gram {deltas['v_isometry_error']:.3e}")

    normalized = normalize_config(config)
    yield ("config_round_trip", normalized == config,
           "normalize(normalize(c)) == normalize(c)")


def cmd_verify(config: dict) -> int:
    out = _out_dir(config)
    _echo_config(config, out)
    results = []
    for name, passed, detail in _verify_checks(config):
        results.append({"check": name, "passed": bool(passed), "detail": detail})
        print(f"{'ok  ' if passed else 'FAIL'} {name}: {detail}")
    all_passed = all(r["passed"] for r in results)
    if _want(config, "json"):
        _write_json(out / "verify.json",
                    {"all_passed": all_passed, "checks": results})
    print(f"verify: {'all checks passed' if all_passed else 'FAILURES above'}")
    return 0 if all_passed else 2


def cmd_simulate(config: dict) -> int:
    seq = _sequence(config)
    sim = config["simulate"]
    out = _out_dir(config)
    _echo_config(config, out)
    depth = config["construct"]["depth"]
    ladder = GramLadder(seq)
    select_cutoffs(seq, depth, max_horizon=config["construct"]["max_horizon"],
                   ladder=ladder)
    if sim["n"] > ladder.cutoffs[-1]:
        raise ValidationFault(
            f"simulate.n = {sim['n']} exceeds the constructed window "
            f"{ladder.cutoffs[-1]}; raise construct.depth"
        )
    cov = build_joint_covariance(ladder, sim["n"])
    cfg = SimulationConfig(n=sim["n"], samples=sim["samples"],
                           seed=sim["seed"], truncation=sim["truncation"])
    report = sample_and_estimate(cov, cfg)

    if _want(config, "json"):
        _write_json(out / "estimate.json", report.to_json_dict())
    if _want(config, "csv"):
        _write_csv(out / "moments.csv",
                   "check,index,expected,estimate,std_error,z",
                   [(m["check"], m["index"], m["expected"], m["estimate"],
                     m["std_error"], m["z"]) for m in report.moments or []])

    print(f"exact A({report.n}) = {report.exact!r}")
    print(f"estimate = {report.estimate!r} +- {report.std_error:.3e} "
          f"(z = {report.z:+.3f}, m = {report.samples}, seed = {report.seed})")
    if report.truncation is not None:
        print(f"truncated at {report.truncation}: {report.estimate_truncated!r} "
              f"(bias {report.truncation_bias:+.3e})")
    if abs(report.z) > 4.0:
        print("estimate deviates from the exact average by more than 4 "
              "standard errors", file=sys.stderr)
        return 4
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oscavg",
        description="Oscillating double averages from a spectral measure.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--format", choices=_FORMATS, help="artifact formats")
    sub = parser.add_subparsers(dest="command", required=True)

    specp = sub.add_parser("spectrum", help="correlation and rigidity tables")
    specp.add_argument("--family", help="family spec, e.g. arc:0.5")
    specp.add_argument("--max-lag", dest="max_lag", type=int)
    specp.add_argument("--psd-window", dest="psd_window", type=int)

    conp = sub.add_parser("construct", help="cutoffs, series, peak table")
    conp.add_argument("--family", help="family spec, e.g. arc:0.5")
    conp.add_argument("--depth", type=int, help="ladder depth K")
    conp.add_argument("--max-horizon", dest="max_horizon", type=int)
    conp.add_argument("--oracle", dest="oracle", action="store_true",
                      default=None, help="cross-check against the dense oracle")
    conp.add_argument("--no-oracle", dest="oracle", action="store_false")
    conp.add_argument("--oracle-cap", dest="oracle_cap", type=int)

    verp = sub.add_parser("verify", help="run invariant checks")
    verp.add_argument("--family", help="family spec, e.g. arc:0.5")
    verp.add_argument("--depth", type=int)
    verp.add_argument("--max-horizon", dest="max_horizon", type=int)
    verp.add_argument("--oracle", dest="oracle", action="store_true",
                      default=None)
    verp.add_argument("--no-oracle", dest="oracle", action="store_false")
    verp.add_argument("--oracle-cap", dest="oracle_cap", type=int)

    simp = sub.add_parser("simulate", help="Gaussian sampling estimate")
    simp.add_argument("--family", help="family spec, e.g. arc:0.5")
    simp.add_argument("--depth", type=int)
    simp.add_argument("--n", type=int, help="path length")
    simp.add_argument("--samples", type=int)
    simp.add_argument("--seed", type=int)
    simp.add_argument("--truncation", type=float)
    return parser


_COMMANDS = {
    "spectrum": cmd_spectrum,
    "construct": cmd_construct,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
        return _COMMANDS[args.command](config)
    except ValidationFault as fault:
        print(f"validation error: {fault}", file=sys.stderr)
        return fault.exit_code
    except HorizonExhaustedFault as fault:
        print(f"horizon exhausted: {fault}", file=sys.stderr)
        return fault.exit_code
    except NumericalFault as fault:
        print(f"numerical failure: {fault}", file=sys.stderr)
        return fault.exit_code
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
