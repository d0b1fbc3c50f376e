"""Command-line pipeline: fit / search / coefficients / select / simulate / report.

Every command writes its run manifest first (next to the primary output)
and then the outputs atomically via temp-then-rename.  Primary outputs
contain no timestamps, so two runs with equal inputs, seed, and any
``--threads`` value are byte-identical; the manifest carries the volatile
metadata.  Subset indices on the command line and in all artifacts are
0-based design-column indices (the intercept, when present, is column 0).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import importlib.resources
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (ModelConfig, NumericalError, ParseError,
                   PredictionDesign, SchemaError, load_dataset, load_draws,
                   save_draws)
from .decision import SubsetCoefficients, summarize_weights
from .family import relative_increase_draws
from .pipeline import (FitResult, StudyProfile, coefficient_intervals,
                       fit_model, run_study, search_candidates, select_family)
from .search import CandidateList, SearchConfig
from .simulate import SimDesign


# --------------------------------------------------------------------------
# Output plumbing
# --------------------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def validate_payload(payload: dict, schema_name: str) -> None:
    """Validate an output payload against one of the shipped schemas."""
    import jsonschema

    ref = importlib.resources.files("lmmselect") / "schemas" / f"{schema_name}.schema.json"
    schema = json.loads(ref.read_text(encoding="utf-8"))
    jsonschema.validate(payload, schema)


def _write_json(path, payload: dict, schema_name: str) -> None:
    validate_payload(payload, schema_name)
    _atomic_write(Path(path), json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[h]) for h in header))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def _digest_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _digest_file(path) -> str:
    return _digest_bytes(Path(path).read_bytes())


def _digest_obj(obj) -> str:
    return _digest_bytes(json.dumps(obj, sort_keys=True, default=str).encode())


def _manifest(args, seed: int, config_obj, data_digest: str, extra: dict | None = None) -> dict:
    import pandas
    import scipy

    argv = getattr(args, "_argv", None) or [args.command]
    payload = {
        "command": "lmmselect " + " ".join(str(a) for a in argv),
        "master_seed": int(seed),
        "config_digest": _digest_obj(config_obj),
        "data_digest": data_digest,
        "versions": {
            "lmmselect": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pandas.__version__,
        },
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    payload.update(extra or {})
    return payload


def _write_manifest_for(out_path, manifest: dict) -> None:
    out_path = Path(out_path)
    target = out_path / "manifest.json" if out_path.is_dir() else out_path.with_name(
        out_path.name + ".manifest.json")
    _write_json(target, manifest, "manifest")


def _load_schema_arg(value: str) -> dict:
    text = value.strip()
    if text.startswith("{"):
        return json.loads(text)
    return json.loads(Path(value).read_text(encoding="utf-8"))


def _save_design(outdir: Path, design: PredictionDesign) -> None:
    idx = design.subject_indices
    np.savez(
        outdir / "design.npz",
        X_tilde=design.X_tilde,
        m_tilde=design.m_tilde,
        mode=np.array(design.mode),
        subject_indices=idx if idx is not None else np.array([], dtype=np.int64),
    )


def _load_design(directory: Path) -> PredictionDesign:
    with np.load(directory / "design.npz") as payload:
        mode = str(payload["mode"])
        idx = payload["subject_indices"]
        return PredictionDesign(
            X_tilde=payload["X_tilde"],
            m_tilde=payload["m_tilde"],
            mode=mode,
            subject_indices=idx if idx.size else None,
        )


def _candidates_payload(candidates: CandidateList, keep, columns, config: SearchConfig,
                        s_max: int) -> dict:
    sizes = {}
    for size in candidates.sizes():
        sizes[str(size)] = [
            {
                "subset": list(sc.subset),
                "expected_loss": float(sc.expected_loss),
                "delta_hat": [float(v) for v in sc.delta_hat],
            }
            for sc in candidates.by_size[size]
        ]
    return {
        "s_max": int(s_max),
        "s_k": int(config.s_k),
        "forced_in": list(config.forced_in),
        "kept_columns": [int(j) for j in keep],
        "columns": list(columns),
        "nodes_visited": int(candidates.nodes_visited),
        "nodes_pruned": int(candidates.nodes_pruned),
        "sizes": sizes,
    }


def candidates_from_json(payload: dict) -> CandidateList:
    by_size = {}
    for size, items in payload["sizes"].items():
        by_size[int(size)] = tuple(
            SubsetCoefficients(
                subset=tuple(item["subset"]),
                delta_hat=np.asarray(item["delta_hat"], dtype=float),
                expected_loss=float(item["expected_loss"]),
            )
            for item in items
        )
    return CandidateList(
        by_size=by_size,
        nodes_visited=int(payload.get("nodes_visited", 0)),
        nodes_pruned=int(payload.get("nodes_pruned", 0)),
    )


def _parse_subset(text: str) -> tuple:
    if not text.strip():
        return ()
    return tuple(int(tok) for tok in text.replace("|", ",").split(",") if tok.strip())


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def _cmd_fit(args) -> int:
    schema = _load_schema_arg(args.schema)
    data = load_dataset(args.data, schema, include_intercept=not args.no_intercept)
    config = ModelConfig(
        prior_kind=args.prior,
        sigma_u_upper=args.sigma_u_upper,
        n_burn=args.burn,
        n_save=args.draws,
        seed=args.seed,
        include_intercept=not args.no_intercept,
    )
    result = fit_model(data, config)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(
        args, args.seed, config.to_jsonable(), _digest_file(args.data),
        extra={"ess": {k: float(v) for k, v in result.info["ess"].items()},
               "schema": schema, "columns": list(data.columns),
               "seed": args.seed, "config": config.to_jsonable()},
    )
    validate_payload(manifest, "manifest")
    _save_design(outdir, result.design)
    save_draws(outdir, result.draws, manifest=manifest)
    print(f"wrote {result.draws.n_draws} draws to {outdir}")
    return 0


def _fit_result_from_dir(directory: Path) -> FitResult:
    draws, _ = load_draws(directory)
    design = _load_design(directory)
    ws = summarize_weights(draws, design)
    return FitResult(draws=draws, design=design, ws=ws, info={})


def _cmd_search(args) -> int:
    directory = Path(args.draws)
    fit = _fit_result_from_dir(directory)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        columns = json.load(fh).get("columns", [])
    config = SearchConfig(s_max=args.smax, s_k=args.sk,
                          forced_in=_parse_subset(args.forced))
    candidates, keep = search_candidates(fit, config)
    s_max = config.resolved_s_max(fit.design.X_tilde.shape[1])
    payload = _candidates_payload(candidates, keep, columns, config, s_max)
    manifest = _manifest(args, 0, {"s_max": s_max, "s_k": args.sk},
                         _digest_file(directory / "manifest.json"))
    _write_manifest_for(Path(args.out), manifest)
    _write_json(args.out, payload, "candidates")
    n_cands = sum(len(v) for v in candidates.by_size.values())
    print(f"wrote {n_cands} candidate subsets to {args.out} "
          f"(visited {candidates.nodes_visited}, pruned {candidates.nodes_pruned})")
    return 0


def _cmd_coefficients(args) -> int:
    directory = Path(args.draws)
    fit = _fit_result_from_dir(directory)
    if args.design is not None:
        spec = _load_schema_arg(args.design)
        design = PredictionDesign(
            X_tilde=np.asarray(spec["X_tilde"], dtype=float),
            m_tilde=np.asarray(spec["m_tilde"], dtype=np.int64),
            mode=spec.get("mode", "new_subject"),
            subject_indices=np.asarray(spec["subject_indices"], dtype=np.int64)
            if spec.get("subject_indices") is not None else None,
        )
        from .data import predictive_draws
        draws = predictive_draws(
            dataclasses.replace(fit.draws, y_tilde=None), design, args.seed)
        fit = FitResult(draws=draws, design=design,
                        ws=summarize_weights(draws, design), info={})
    subset = _parse_subset(args.subset)
    payload = coefficient_intervals(fit, subset, level=args.level)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        payload["columns"] = json.load(fh).get("columns", [])
    from .decision import optimal_coefficients
    point = optimal_coefficients(fit.ws, fit.design.row_matrix(), subset)
    payload["expected_loss"] = float(point.expected_loss)
    validate_payload(payload, "coefficients")
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        _write_manifest_for(Path(args.out), _manifest(
            args, args.seed, {"subset": list(subset)}, _digest_file(directory / "manifest.json")))
        _atomic_write(Path(args.out), text + "\n")
    else:
        print(text)
    return 0


def _cmd_select(args) -> int:
    schema = _load_schema_arg(args.schema)
    data = load_dataset(args.data, schema, include_intercept=not args.no_intercept)
    with open(args.candidates, encoding="utf-8") as fh:
        cand_payload = json.load(fh)
    candidates = candidates_from_json(cand_payload)
    config = ModelConfig(
        prior_kind=args.prior, n_burn=args.burn, n_save=args.draws,
        seed=args.seed, include_intercept=not args.no_intercept,
    )
    cache_dir = args.cache_dir or os.environ.get("LMMSELECT_CACHE")
    selection = select_family(
        data, candidates, K=args.K, eta=args.eta, epsilon=args.epsilon,
        seed=args.seed, config=config, threads=args.threads, cache_dir=cache_dir,
    )
    family = selection.family
    eval_min = selection.evaluations[family.s_min]
    emp_min = max(eval_min.empirical_loss, 1e-12)

    cand_rows = []
    accepted = {m.subset for m in family.members}
    prob_by_subset = {m.subset: m.probability for m in family.members}
    for subset in sorted(selection.evaluations, key=lambda s: (len(s), s)):
        ev = selection.evaluations[subset]
        d, _ = relative_increase_draws(ev, eval_min)
        prob = prob_by_subset.get(subset, float(np.mean(d <= family.eta)))
        cand_rows.append({
            "subset": list(subset),
            "size": len(subset),
            "accepted": subset in accepted,
            "probability": float(prob),
            "empirical_loss": float(ev.empirical_loss),
            "pct_increase_empirical": float(
                100.0 * (ev.empirical_loss - eval_min.empirical_loss) / emp_min),
            "d_mean": float(d.mean()),
            "d_q10": float(np.quantile(d, 0.10)),
            "d_q90": float(np.quantile(d, 0.90)),
            "d_lower_eps": float(np.quantile(d, family.epsilon)),
        })

    payload = {
        "eta": family.eta,
        "epsilon": family.epsilon,
        "K": int(args.K),
        "seed": int(args.seed),
        "columns": list(data.columns),
        "s_min": list(family.s_min),
        "s_small": list(family.s_small),
        "vi": [float(v) for v in family.vi],
        "n_floored_draws": int(family.n_floored_draws),
        "thin_stride": int(selection.info["thin_stride"]),
        "loss_draws": int(selection.info["loss_draws"]),
        "members": [
            {
                "subset": list(m.subset),
                "probability": float(m.probability),
                "empirical_loss": float(m.empirical_loss),
                "predictive_loss_mean": float(m.predictive_loss_mean),
            }
            for m in family.members
        ],
        "candidates": cand_rows,
    }
    if args.fit:
        fit = _fit_result_from_dir(Path(args.fit))
        payload["coefficients"] = {
            "s_min": coefficient_intervals(fit, family.s_min),
            "s_small": coefficient_intervals(fit, family.s_small),
        }
    manifest = _manifest(args, args.seed, config.to_jsonable(), _digest_file(args.data),
                         extra={"candidates_digest": _digest_file(args.candidates)})
    _write_manifest_for(Path(args.out), manifest)
    _write_json(args.out, payload, "family")
    print(f"acceptable family: {len(family.members)} members; "
          f"|s_min|={len(family.s_min)}, |s_small|={len(family.s_small)}")
    return 0


def _cmd_simulate(args) -> int:
    design = SimDesign(
        n=args.n, p=args.p, m=args.m, rho_star=args.rho, snr=args.snr,
        p_star=args.pstar, n_reps=args.reps, seed=args.seed,
    )
    profile = StudyProfile(
        n_burn=args.burn, n_save=args.draws, K=args.K, s_k=args.sk,
        eta=args.eta, epsilon=args.epsilon,
    )
    rows = run_study(design, profile, threads=args.threads)
    header = ["rep", "method", "size", "loss", "tpr", "tnr", "width", "coverage"]
    manifest = _manifest(args, args.seed,
                         {**dataclasses.asdict(design), **dataclasses.asdict(profile)},
                         "synthetic")
    _write_manifest_for(Path(args.out), manifest)
    _write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_report(args) -> int:
    with open(args.family, encoding="utf-8") as fh:
        family = json.load(fh)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_manifest_for(outdir, _manifest(args, family.get("seed", 0), {},
                                          _digest_file(args.family)))

    loss_rows = []
    for row in family["candidates"]:
        loss_rows.append({
            "size": row["size"],
            "subset": "|".join(str(j) for j in row["subset"]),
            "accepted": int(row["accepted"]),
            "probability": row["probability"],
            "empirical_loss": row["empirical_loss"],
            "pct_increase_empirical": row["pct_increase_empirical"],
            "d_mean": row["d_mean"],
            "d_q10": row["d_q10"],
            "d_q90": row["d_q90"],
            "d_lower_eps": row["d_lower_eps"],
        })
    _write_csv(outdir / "loss_vs_size.csv",
               ["size", "subset", "accepted", "probability", "empirical_loss",
                "pct_increase_empirical", "d_mean", "d_q10", "d_q90", "d_lower_eps"],
               loss_rows)

    columns = family.get("columns") or [f"x{j}" for j in range(len(family["vi"]))]
    vi_rows = [
        {"column": j, "name": columns[j] if j < len(columns) else f"x{j}", "vi": v}
        for j, v in enumerate(family["vi"])
    ]
    _write_csv(outdir / "vi.csv", ["column", "name", "vi"], vi_rows)

    coef_rows = []
    for method, block in sorted(family.get("coefficients", {}).items()):
        for j, est in enumerate(block["estimate"]):
            coef_rows.append({
                "method": method,
                "column": j,
                "name": columns[j] if j < len(columns) else f"x{j}",
                "estimate": est,
                "lower": block["lower"][j],
                "upper": block["upper"][j],
            })
    _write_csv(outdir / "coefficients.csv",
               ["method", "column", "name", "estimate", "lower", "upper"], coef_rows)
    print(f"wrote report tables to {outdir}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lmmselect",
                     description="Bayesian decision-analysis subset selection for LMMs")
    parser.add_argument("--version", action="version",
                        version=f"lmmselect {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="fit the random-intercept LMM by MCMC")
    fit.add_argument("--data", required=True, help="long-format CSV")
    fit.add_argument("--schema", required=True,
                     help="column-mapping JSON (file path or inline)")
    fit.add_argument("--draws", type=int, default=10000)
    fit.add_argument("--burn", type=int, default=5000)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--prior", choices=("horseshoe", "gaussian"), default="horseshoe")
    fit.add_argument("--sigma-u-upper", type=float, default=100.0)
    fit.add_argument("--no-intercept", action="store_true")
    fit.add_argument("--out", required=True, help="output directory for draw blocks")
    fit.set_defaults(func=_cmd_fit)

    search = sub.add_parser("search", help="enumerate best subsets per size")
    search.add_argument("--draws", required=True, help="fit output directory")
    search.add_argument("--smax", type=int, default=None)
    search.add_argument("--sk", type=int, default=15)
    search.add_argument("--forced", default="0",
                        help="comma-separated always-included columns (0-based)")
    search.add_argument("--out", required=True, help="candidates.json path")
    search.set_defaults(func=_cmd_search)

    coef = sub.add_parser("coefficients",
                          help="optimal coefficients and projected intervals for one subset")
    coef.add_argument("--draws", required=True, help="fit output directory")
    coef.add_argument("--subset", required=True,
                      help="comma-separated 0-based column indices")
    coef.add_argument("--design", default=None,
                      help="prediction-design JSON (defaults to the stored design)")
    coef.add_argument("--level", type=float, default=0.90)
    coef.add_argument("--seed", type=int, default=0)
    coef.add_argument("--out", default=None, help="write JSON here instead of stdout")
    coef.set_defaults(func=_cmd_coefficients)

    select = sub.add_parser("select", help="cross-validate candidates, build the family")
    select.add_argument("--data", required=True)
    select.add_argument("--schema", required=True)
    select.add_argument("--candidates", required=True)
    select.add_argument("--K", type=int, default=10)
    select.add_argument("--eta", type=float, default=0.0)
    select.add_argument("--epsilon", type=float, default=0.10)
    select.add_argument("--seed", type=int, default=0)
    select.add_argument("--draws", type=int, default=10000, help="saved draws per fold fit")
    select.add_argument("--burn", type=int, default=5000)
    select.add_argument("--prior", choices=("horseshoe", "gaussian"), default="horseshoe")
    select.add_argument("--no-intercept", action="store_true")
    select.add_argument("--threads", type=int, default=1)
    select.add_argument("--cache-dir", default=None,
                        help="fold-fit cache (or set LMMSELECT_CACHE)")
    select.add_argument("--fit", default=None,
                        help="fit output directory; enables coefficient intervals")
    select.add_argument("--out", required=True, help="family.json path")
    select.set_defaults(func=_cmd_select)

    sim = sub.add_parser("simulate", help="synthetic-data study, one row per (rep, method)")
    sim.add_argument("--n", type=int, default=300)
    sim.add_argument("--p", type=int, default=15)
    sim.add_argument("--m", type=int, default=4)
    sim.add_argument("--rho", type=float, default=0.25)
    sim.add_argument("--snr", type=float, default=1.0)
    sim.add_argument("--pstar", type=int, default=5)
    sim.add_argument("--reps", type=int, default=20)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--K", type=int, default=10)
    sim.add_argument("--sk", type=int, default=15)
    sim.add_argument("--eta", type=float, default=0.0)
    sim.add_argument("--epsilon", type=float, default=0.10)
    sim.add_argument("--draws", type=int, default=2000, help="saved draws per chain")
    sim.add_argument("--burn", type=int, default=1000)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--out", required=True, help="results.csv path")
    sim.set_defaults(func=_cmd_simulate)

    report = sub.add_parser("report", help="plot-ready CSV tables from family.json")
    report.add_argument("--family", required=True)
    report.add_argument("--format", choices=("csv",), default="csv")
    report.add_argument("--out", required=True, help="output directory")
    report.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = list(argv) if argv is not None else sys.argv[1:]
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (SchemaError, ParseError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
