# Command-line entry point: sdikit verify-sketch | bench-fidelity | train-parity | compute-sdi | analyze-cycle | sdi-energy

import argparse
import csv
import io
import json
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from sdikit import _constants, _utils
from sdikit import _variance_oracle as oracle
from sdikit._cycle_analysis import CycleAnalyzer
from sdikit._energy import binned_energy, query_summaries, sdi_energy
from sdikit._errors import ConservationError
from sdikit._looped_model import body_shapes, init_parameters, preset_config, Checkpoint
from sdikit._parity_task import (
    alternating_probe,
    alternating_probe_set,
    gen_parity,
    read_jsonl,
    run_parity_training,
    tercile_subsample,
    write_jsonl,
)
from sdikit._sdi_engine import (
    SDIResult,
    compute_sdi_from_checkpoints,
    exact_features,
    fidelity_report,
    featurize_batch,
    sdi_decomposition,
    summed_profile,
)
from sdikit._serialization import iter_checkpoints, read_manifest, write_manifest
from sdikit._sketch_core import SketchPlan

# -----------------------------------------------------------------------------------------------
# ---- Output helpers ----
# -----------------------------------------------------------------------------------------------

def _json_default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.bool_,)):
        return bool(value)
    raise TypeError(f"cannot serialise '{type(value).__name__}'")


def _emit_json(doc: dict, path: Optional[str]) -> None:
    text = json.dumps(doc, indent=2, default=_json_default)
    if path is None:
        print(text)
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(text + "\n")


def _rows_to_csv(rows: List[dict], columns: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns))
    writer.writeheader()
    for row in rows:
        writer.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in columns})
    return buffer.getvalue()


def _emit_text(text: str, path: Optional[str]) -> None:
    if path is None:
        print(text, end="")
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _suite(passed: bool, **details) -> dict:
    return {"passed": bool(passed), **details}

# -----------------------------------------------------------------------------------------------
# ---- verify-sketch ----
# -----------------------------------------------------------------------------------------------

def _unbiasedness_suite(trials: int, seed: int, m: int, n_pairs: int = 20) -> dict:
    """Mean of <S(g), S(p)> over independent plan hashes vs <g, p> on a vector + matrix plan."""
    rng = np.random.default_rng(seed)
    failures, worst_z = 0, 0.0
    for i in range(n_pairs):
        g = {"bias": rng.normal(size=16), "weight": rng.normal(size=(4, 6))}
        p = {"bias": rng.normal(size=16), "weight": rng.normal(size=(4, 6))}
        expected = float(np.dot(g["bias"], p["bias"]) + np.sum(g["weight"] * p["weight"]))
        samples = oracle.monte_carlo_plan_dot(g, p, m, trials, seed + 1 + i)
        mean, se, _, _ = _utils._mean_and_variance_with_se(samples)
        z = abs(mean - expected) / se if se > 0 else 0.0
        worst_z = max(worst_z, z)
        failures += z > 4.0
    return _suite(failures == 0, pairs=n_pairs, trials=trials, m=m, worst_z=worst_z)


def _variance_suite(trials: int, seed: int, m: int, n_pairs: int = 100) -> dict:
    """Monte-Carlo variance vs the exact formula and the bound for random matrix pairs up to 8 x 8."""
    rng = np.random.default_rng(seed)
    failures, above_bound, worst = 0, 0, 0.0
    for i in range(n_pairs):
        d, d_prime = rng.integers(2, 9, size=2)
        X, Y = rng.normal(size=(d, d_prime)), rng.normal(size=(d, d_prime))
        report = oracle.exact_ts_variance(X, Y, m, trials=trials, seed=seed + 1 + i)
        if not (0.0 <= report.exact_variance <= report.bound):
            failures += 1
        if not report.variance_consistent(5.0):
            failures += 1
        if report.mc_variance > report.bound + 5.0 * report.mc_variance_se:
            above_bound += 1
        worst = max(worst, abs(report.mc_variance - report.exact_variance) / max(report.mc_variance_se, 1e-300))
    return _suite(failures == 0 and above_bound == 0, pairs=n_pairs, trials=trials, m=m,
                  worst_se_distance=worst, above_bound=above_bound)


def _witness_suite() -> dict:
    d, m = 1024, 2048
    gap = oracle.tightness_gap(d, d, m)
    bound = oracle.bound_factor(m)
    ratio = (bound - gap) / bound

    # closed form vs the general formula on a smaller witness
    small = oracle.witness_matrices(8, 12)
    general = oracle.exact_ts_variance(small, small, 16).exact_variance
    closed = oracle.bound_factor(16) - oracle.tightness_gap(8, 12, 16)

    monotone = all(oracle.tightness_gap(a, b, 64) > oracle.tightness_gap(2 * a, 2 * b, 64)
                   for a in (2, 4, 8) for b in (2, 4, 8))
    return _suite(ratio >= 0.99 and abs(general - closed) <= 1e-12 and monotone,
                  ratio_at_1024=ratio, closed_form_agreement=abs(general - closed), gap_monotone=monotone)


def _prior_bound_suite() -> dict:
    # the two factors coincide at m = 2; strictly tighter from m = 4 on
    m = np.arange(4, 2 ** 20 + 1, dtype=np.float64)
    tighter = bool(np.all(4.0 / m ** 2 + 6.0 / m < 8.0 / m))
    equal_at_two = oracle.bound_factor(2) == oracle.prior_bound_factor(2)
    return _suite(tighter and equal_at_two, m_range=[4, 2 ** 20], equal_at_m2=equal_at_two,
                  max_ratio=float(np.max((4.0 / m ** 2 + 6.0 / m) / (8.0 / m))))


def _count_sketch_rows_per_m(trials: int, seed: int, m_list: Sequence[int]) -> List[dict]:
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=32), rng.normal(size=32)
    X, Y = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    rows = []
    for m in m_list:
        cs_samples = oracle.monte_carlo_cs_dot(x, y, m, trials, seed + m)
        _, _, cs_var, cs_se = _utils._mean_and_variance_with_se(cs_samples)
        cs_exact = oracle.exact_cs_variance(x, y, m)
        ts = oracle.exact_ts_variance(X, Y, m, trials=trials, seed=seed + 2 * m)
        rows.append({
            "m": int(m),
            "cs_exact_variance": cs_exact,
            "cs_empirical_variance": cs_var,
            "cs_bound": 2.0 / m * float(x @ x) * float(y @ y),
            "ts_exact_variance": ts.exact_variance,
            "ts_empirical_variance": ts.mc_variance,
            "ts_bound": ts.bound,
            "passed": bool(abs(cs_var - cs_exact) <= 5 * cs_se and ts.variance_consistent(5.0)),
        })
    return rows


def cmd_verify_sketch(args: argparse.Namespace) -> int:
    suites = {
        "unbiasedness": _unbiasedness_suite(args.trials, args.seed, 16),
        "variance": _variance_suite(args.variance_trials, args.seed + 1000, 8),
        "witness": _witness_suite(),
        "tighter_than_prior": _prior_bound_suite(),
    }
    print(f"[verify-sketch] suites: { {k: v['passed'] for k, v in suites.items()} }") if args.debug else None

    per_m = _count_sketch_rows_per_m(args.variance_trials, args.seed + 2000, args.m)
    passed = all(s["passed"] for s in suites.values()) and all(r["passed"] for r in per_m)

    _emit_json({
        "schema_version": _constants.REPORT_SCHEMA_VERSION,
        "command": "verify-sketch",
        "seed": args.seed,
        "suites": suites,
        "per_m": per_m,
        "passed": passed,
    }, args.out)
    return 0 if passed else 1

# -----------------------------------------------------------------------------------------------
# ---- bench-fidelity ----
# -----------------------------------------------------------------------------------------------

def _run_lengths(args: argparse.Namespace) -> Tuple[int, int]:
    """(longest training length, probe length) of the run behind --checkpoints, else of --preset."""
    run = _constants.PRESETS[args.preset]
    manifest = {}
    if args.checkpoints:
        config, _, manifest = read_manifest(args.checkpoints)
        run = _constants.PRESETS.get(manifest.get("preset"), run)
    max_length = int(manifest.get("max_length", max(n for _, n in run["curriculum"])))
    probe_length = int(manifest.get("probe_length", run["probe_length"]))
    if args.checkpoints:
        # lengths must fit the positional table with '=' and <eos>
        max_length, probe_length = min(max_length, config.seq_len - 2), min(probe_length, config.seq_len - 2)
    return max_length, probe_length


def _model_and_checkpoints(args: argparse.Namespace):
    if args.checkpoints:
        config, _, _ = read_manifest(args.checkpoints)
        return config, list(iter_checkpoints(args.checkpoints))
    config = preset_config(args.preset, seed=args.seed)
    return config, [Checkpoint(init_parameters(config), 1.0, 0)]


def cmd_bench_fidelity(args: argparse.Namespace) -> int:
    config, checkpoints = _model_and_checkpoints(args)
    max_length, _ = _run_lengths(args)
    tau = args.tau or max_length + 2
    train = gen_parity(args.n_train, (2, max_length), args.seed)
    test = gen_parity(args.n_test, (2, max_length), args.seed + 1)
    etas = [c.eta for c in checkpoints]

    exact_train = [exact_features(c, train, config, tau) for c in checkpoints]
    exact_test = [exact_features(c, test, config, tau) for c in checkpoints]
    exact = sdi_decomposition(exact_train, exact_test, etas)

    rows = []
    for m in args.m:
        sdi_errors, tracin_errors = [], []
        for s in range(args.seeds):
            plan = SketchPlan(body_shapes(config), m, args.seed * 1000 + s)
            sk_train = [featurize_batch(c, train, plan, config, tau) for c in checkpoints]
            sk_test = [featurize_batch(c, test, plan, config, tau) for c in checkpoints]
            errors = fidelity_report(exact, sdi_decomposition(sk_train, sk_test, etas))
            sdi_errors.append(errors["rel_frobenius_sdi"])
            tracin_errors.append(errors["rel_frobenius_tracin"])
        rows.append({
            "m": m,
            "mean_err_sdi": float(np.mean(sdi_errors)), "sd_err_sdi": float(np.std(sdi_errors, ddof=1)) if len(sdi_errors) > 1 else 0.0,
            "mean_err_tracin": float(np.mean(tracin_errors)), "sd_err_tracin": float(np.std(tracin_errors, ddof=1)) if len(tracin_errors) > 1 else 0.0,
        })
        print(f"[bench-fidelity] m={m}: {rows[-1]}") if args.debug else None

    slope = None
    if len(rows) >= 2:
        slope = _utils._loglog_slope([r["m"] for r in rows], [r["mean_err_sdi"] for r in rows])
    for r in rows:
        r["slope"] = slope

    columns = ["m", "mean_err_sdi", "sd_err_sdi", "mean_err_tracin", "sd_err_tracin", "slope"]
    _emit_text(_rows_to_csv(rows, columns), args.out)
    return 0

# -----------------------------------------------------------------------------------------------
# ---- train-parity ----
# -----------------------------------------------------------------------------------------------

def cmd_train_parity(args: argparse.Namespace) -> int:
    checkpoints, config, report = run_parity_training(args.preset, args.seed, args.debug)
    run = _constants.PRESETS[args.preset]
    out = args.out or "parity_run"
    write_manifest(out, checkpoints, config, extra={
        "preset": args.preset,
        "seed": args.seed,
        "max_length": max(n for _, n in run["curriculum"]),
        "probe_length": run["probe_length"],
    })
    _emit_json(report, os.path.join(out, "train_report.json"))
    print(f"[train-parity] wrote {len(checkpoints)} checkpoints to '{out}'") if args.debug else None
    return 0

# -----------------------------------------------------------------------------------------------
# ---- compute-sdi ----
# -----------------------------------------------------------------------------------------------

def _default_sets(args: argparse.Namespace):
    max_length, probe_length = _run_lengths(args)
    if args.train:
        train = read_jsonl(args.train)
    else:
        train = tercile_subsample(gen_parity(10 * args.n_train, (2, max_length), args.seed), args.n_train // 3 or 1, args.seed)
    if args.query:
        query = read_jsonl(args.query)
    else:
        query = [alternating_probe(probe_length, 0, "probe_0101"), alternating_probe(probe_length, 1, "probe_1010")]
    return train, query


def cmd_compute_sdi(args: argparse.Namespace) -> int:
    if not args.checkpoints:
        raise SystemExit("compute-sdi needs --checkpoints")
    config, _, _ = read_manifest(args.checkpoints)
    train, query = _default_sets(args)
    tau = args.tau or max(ex.n for ex in list(train) + list(query)) + 2

    plan = None if args.exact else SketchPlan(body_shapes(config), args.m[0], args.seed)
    try:
        result = compute_sdi_from_checkpoints(iter_checkpoints(args.checkpoints), train, query, config, plan, tau,
                                              cache_dir=args.cache_dir, debug=args.debug)
    except ConservationError as exc:
        print(f"[compute-sdi] {exc}", file=sys.stderr)
        return 1

    # causality: nothing after each query's readout step
    causal = True
    for j, ex in enumerate(query):
        if ex.readout_step < tau and np.any(result.test_steps[:, j, ex.readout_step:] != 0.0):
            causal = False

    out = args.out or "sdi_run"
    os.makedirs(out, exist_ok=True)
    _emit_json(result.to_json(), os.path.join(out, "sdi.json"))
    _emit_text(result.to_csv(), os.path.join(out, "sdi.csv"))
    write_jsonl(os.path.join(out, "train.jsonl"), train)
    write_jsonl(os.path.join(out, "query.jsonl"), query)
    _emit_json({
        "schema_version": _constants.REPORT_SCHEMA_VERSION,
        "tau": tau,
        "m": None if plan is None else plan.sketch_dim,
        "plan": None if plan is None else plan.to_json(),
        "profiles": {str(ex.example_id): summed_profile(result, j).tolist() for j, ex in enumerate(query)},
        "readout_steps": {str(ex.example_id): ex.readout_step for ex in query},
        "conservation_residual": result.conservation_residual(),
        "causal": causal,
    }, os.path.join(out, "profile.json"))
    return 0 if causal else 1

# -----------------------------------------------------------------------------------------------
# ---- analyze-cycle ----
# -----------------------------------------------------------------------------------------------

def cmd_analyze_cycle(args: argparse.Namespace) -> int:
    config, checkpoints = _model_and_checkpoints(args)
    params = checkpoints[args.checkpoint_index].params
    max_length, probe_length = _run_lengths(args)
    probe_length = args.probe_length or probe_length

    probe = alternating_probe(probe_length, 0, "probe")
    calibration = alternating_probe_set(range(2, max_length + 1))
    evaluation = alternating_probe_set(range(max_length + 1, probe_length + 1))

    analyzer = CycleAnalyzer(params, config, k=args.k, seed=args.seed, percentile=args.percentile, debug=args.debug)
    report = analyzer.analyze(probe, calibration, evaluation, tau=args.tau)

    rows = np.asarray(report.transition_matrix)
    well_formed = bool(np.allclose(rows.sum(axis=1), 1.0, atol=1e-9)) and len(report.state_sequence) == (args.tau or probe.tau)
    doc = report.to_json()
    doc["well_formed"] = well_formed
    _emit_json(doc, args.out)
    return 0 if well_formed else 1

# -----------------------------------------------------------------------------------------------
# ---- sdi-energy ----
# -----------------------------------------------------------------------------------------------

def cmd_sdi_energy(args: argparse.Namespace) -> int:
    if not args.sdi:
        raise SystemExit("sdi-energy needs --sdi")
    with open(args.sdi) as f:
        result = SDIResult.from_json(json.load(f))

    difficulty = None
    if args.difficulty:
        with open(args.difficulty) as f:
            table = json.load(f)
        difficulty = [float(table[str(test_id)]) for test_id in result.test_ids]

    curves = sdi_energy(result)
    rows = binned_energy(curves, difficulty, args.bins)
    _emit_text(_rows_to_csv(rows, ["bin", "step", "median", "q25", "q75", "n_queries"]), args.out)

    summary_path = None if args.out is None else os.path.splitext(args.out)[0] + "_summary.json"
    _emit_json({
        "schema_version": _constants.REPORT_SCHEMA_VERSION,
        "queries": query_summaries(result),
    }, summary_path)
    return 0

# -----------------------------------------------------------------------------------------------
# ---- Parser ----
# -----------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--out", default=None, help="output path (file or directory, per command)")
    common.add_argument("--debug", action="store_true", help="print progress")
    common.add_argument("--preset", choices=sorted(_constants.PRESETS), default="micro")
    common.add_argument("--tau", type=int, default=None, help="analysis loop horizon")
    common.add_argument("--checkpoints", default=None, help="checkpoint manifest.json")

    parser = argparse.ArgumentParser(prog="sdikit", description="Step-decomposed influence for looped transformers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-sketch", parents=[common], help="sketch and variance verification suites")
    p.add_argument("--trials", type=int, default=10000, help="plan draws per unbiasedness pair")
    p.add_argument("--variance-trials", type=int, default=20000, help="hash draws per variance check")
    p.add_argument("--m", type=int, nargs="+", default=[16, 64, 256])
    p.set_defaults(func=cmd_verify_sketch)

    p = sub.add_parser("bench-fidelity", parents=[common], help="sketched vs exact SDI error over m")
    p.add_argument("--m", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=4)
    p.set_defaults(func=cmd_bench_fidelity)

    p = sub.add_parser("train-parity", parents=[common], help="train on the parity curriculum")
    p.set_defaults(func=cmd_train_parity)

    p = sub.add_parser("compute-sdi", parents=[common], help="TracIn and SDI over a checkpoint manifest")
    p.add_argument("--m", type=int, nargs="+", default=[1024])
    p.add_argument("--exact", action="store_true", help="exact (materialised) features instead of sketches")
    p.add_argument("--train", default=None, help="train set JSONL (default: tercile subsample of generated data)")
    p.add_argument("--query", default=None, help="query set JSONL (default: the two alternating probes)")
    p.add_argument("--n-train", type=int, default=30)
    p.add_argument("--cache-dir", default=None, help="reuse/store per-checkpoint sketched features here")
    p.set_defaults(func=cmd_compute_sdi)

    p = sub.add_parser("analyze-cycle", parents=[common], help="limit-cycle analysis of the alternating probe")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--percentile", type=float, default=95.0, help="distance percentile gating the selective proxy")
    p.add_argument("--probe-length", type=int, default=None)
    p.add_argument("--checkpoint-index", type=int, default=-1)
    p.set_defaults(func=cmd_analyze_cycle)

    p = sub.add_parser("sdi-energy", parents=[common], help="per-step SDI energy curves")
    p.add_argument("--sdi", default=None, help="sdi.json written by compute-sdi")
    p.add_argument("--bins", type=int, default=1)
    p.add_argument("--difficulty", default=None, help="JSON object mapping test_id to a difficulty value")
    p.set_defaults(func=cmd_sdi_energy)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return int(args.func(args))


if __name__ == "__main__":
    sys.exit(main())
