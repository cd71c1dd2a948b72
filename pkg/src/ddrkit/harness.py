"""Experiment orchestration: replicated runs, records, and summaries.

A run is fully determined by (config, seed): replication r derives its
random stream as ``RngStream(seed, r)``, generates a dataset, fits every
requested estimator and nuisance combination, scores each fit against the
cached Monte-Carlo theta_0, and appends one record per (replication,
estimator, combo). Workers stream completed replications into a shard file
(a crash loses at most the replications in flight) and the final
``records.csv`` is rewritten in canonical order, so repeated runs with the
same config and seed are byte-identical.

Outputs, all under the configured output directory:

* ``records.csv``       -- replication_id, estimator, pi_spec, m_spec, l2, l1, seconds
* ``inference.csv``     -- per-coordinate coverage rows (when inference is on)
* ``errors.csv``        -- replications that failed, with the error tag
* ``theta0.json``       -- the target vector the run scored against
* ``run_meta.json``     -- resolved config echo
* ``summary.csv`` / ``summary.txt`` and report figures, via ``summarize``

The ``seconds`` column is wall-clock timing and is written as 0.0 unless
``record_timing`` is set, because timings are inherently nondeterministic
and determinism of the record files is the stronger contract; real timings
go to ``timings.csv`` either way.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .ddr import NuisancePredictions, build_predictions, fit_ddr, split
from .inference import run_inference
from .nuisance import BasisSpec, BicRule, CvRule, OutcomeSpec, fit_propensity
from .numkit import RngStream
from .simulate import (
    DgpParams,
    DgpSpec,
    comparator_fits,
    compute_theta0,
    default_params,
    generate,
)

RECORD_HEADER = ["replication_id", "estimator", "pi_spec", "m_spec", "l2", "l1", "seconds"]
INFERENCE_HEADER = [
    "replication_id", "estimator", "pi_spec", "m_spec", "coord", "covered", "length",
]
PI_SPECS = ("linear-logit", "quad-logit")
M_SPECS = ("linear", "quad", "sim")
ESTIMATORS = ("ddr", "oracle", "full", "cc")
ZERO_COEF_TOL = 0.05  # |theta0_j| below this counts as a truly-zero coordinate
FAILURE_BUDGET = 0.10


class ConfigError(Exception):
    """Bad or unknown configuration keys/values (CLI exit code 2)."""


class FailureBudgetExceeded(Exception):
    """More than 10% of replications errored (CLI exit code 3)."""


class MalformedRecords(Exception):
    """Records file missing, truncated, or with an unexpected header."""


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DgpSpec
    n: int
    replications: int
    grid: tuple[tuple[str, str], ...]
    estimators: tuple[str, ...]
    seed: int
    output: str
    inference: bool = False
    alpha: float = 0.05
    theta0_size: int = 200_000
    theta0_cache: Optional[str] = None
    record_timing: bool = False
    cv_folds: int = 10
    repeats: int = 1


_TOP_KEYS = {
    "dgp", "n", "replications", "nuisance_grid", "estimators", "inference",
    "alpha", "seed", "output", "theta0_size", "theta0_cache", "record_timing",
    "cv_folds", "repeats",
}
_DGP_KEYS = {"kind", "p", "cov", "rho", "trunc"}


def _reject_unknown(mapping: dict, allowed: set, context: str):
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} key(s): {sorted(unknown)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")
    for key in ("dgp", "n", "replications", "nuisance_grid", "seed", "output"):
        if key not in raw:
            raise ConfigError(f"missing required config key {key!r}")
    dgp_raw = raw["dgp"]
    if not isinstance(dgp_raw, dict) or "kind" not in dgp_raw:
        raise ConfigError("dgp must be an object with at least a 'kind'")
    _reject_unknown(dgp_raw, _DGP_KEYS, "dgp")
    try:
        dgp = DgpSpec(
            kind=dgp_raw["kind"],
            p=int(dgp_raw.get("p", 50)),
            cov=dgp_raw.get("cov", "identity"),
            rho=float(dgp_raw.get("rho", 0.2)),
            seed=int(raw["seed"]),
            trunc=tuple(dgp_raw.get("trunc", (0.1, 0.9))),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    grid = []
    for cell in raw["nuisance_grid"]:
        if len(cell) != 2:
            raise ConfigError(f"grid cell must be [pi_spec, m_spec], got {cell!r}")
        pi_spec, m_spec = cell
        if pi_spec not in PI_SPECS:
            raise ConfigError(f"unknown pi_spec {pi_spec!r} (choose from {PI_SPECS})")
        if m_spec not in M_SPECS:
            raise ConfigError(f"unknown m_spec {m_spec!r} (choose from {M_SPECS})")
        grid.append((pi_spec, m_spec))
    if not grid:
        raise ConfigError("nuisance_grid must be nonempty")

    estimators = tuple(raw.get("estimators", ["ddr"]))
    for est in estimators:
        if est not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {est!r} (choose from {ESTIMATORS})")
    if not estimators:
        raise ConfigError("estimators must be nonempty")

    replications = int(raw["replications"])
    if replications < 1:
        raise ConfigError("replications must be >= 1")
    alpha = float(raw.get("alpha", 0.05))
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")

    return ExperimentConfig(
        dgp=dgp,
        n=int(raw["n"]),
        replications=replications,
        grid=tuple(grid),
        estimators=estimators,
        seed=int(raw["seed"]),
        output=str(raw["output"]),
        inference=bool(raw.get("inference", False)),
        alpha=alpha,
        theta0_size=int(raw.get("theta0_size", 200_000)),
        theta0_cache=raw.get("theta0_cache"),
        record_timing=bool(raw.get("record_timing", False)),
        cv_folds=int(raw.get("cv_folds", 10)),
        repeats=int(raw.get("repeats", 1)),
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def worker_count() -> int:
    env = os.environ.get("DDRKIT_THREADS")
    if env:
        try:
            k = int(env)
        except ValueError as exc:
            raise ConfigError(f"DDRKIT_THREADS must be an integer, got {env!r}") from exc
        return max(1, k)
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# one replication
# ---------------------------------------------------------------------------


@dataclass
class ReplicationResult:
    replication_id: int
    records: list = field(default_factory=list)
    inference_rows: list = field(default_factory=list)
    error: Optional[str] = None


_PI_BASIS = {"linear-logit": BasisSpec.linear, "quad-logit": BasisSpec.quadratic}


def _fit_combo_predictions(data, plan, pi_models, m_cache, pi_spec, m_spec, rule, rng):
    """Cross-fitted m-tilde for one grid cell, cached across cells.

    The SIM outcome model depends on which propensity it uses for the IPW
    index weights, so its cache key carries the pi_spec; the basis lassos do
    not touch pi-hat and are shared across pi specs.
    """
    key = (m_spec, pi_spec if m_spec == "sim" else None)
    if key not in m_cache:
        if m_spec == "sim":
            spec = OutcomeSpec("sim", rule=rule, pi_model=pi_models[pi_spec])
        else:
            spec = OutcomeSpec(m_spec, rule=rule)
        m_cache[key] = build_predictions(
            data, plan, pi_models[pi_spec], spec,
            rng.substream("m", m_spec, pi_spec if m_spec == "sim" else "shared"),
        ).m_tilde
    return NuisancePredictions(pi_models[pi_spec].predict(data.x), m_cache[key], plan)


def _coverage_rows(result, theta0, rep_id, estimator, pi_spec, m_spec):
    covered = (theta0 >= result.ci_lower) & (theta0 <= result.ci_upper)
    lengths = result.ci_upper - result.ci_lower
    return [
        (rep_id, estimator, pi_spec, m_spec, j, int(covered[j]), float(lengths[j]))
        for j in range(theta0.size)
    ]


def run_replication(
    config: ExperimentConfig,
    params: DgpParams,
    theta0: np.ndarray,
    rep_id: int,
) -> ReplicationResult:
    """Generate one dataset and fit every requested estimator/combo cell."""
    result = ReplicationResult(rep_id)
    try:
        rng = RngStream(config.seed, rep_id)
        data, truth = generate(config.dgp, params, config.n, rng.substream("data"))
        rule = CvRule(folds=config.cv_folds)
        basis = BasisSpec.linear()

        def score(coefs):
            diff = coefs - theta0
            return float(np.linalg.norm(diff)), float(np.sum(np.abs(diff)))

        if "ddr" in config.estimators:
            plan = split(data.n, rng.substream("split"))
            pi_models = {}
            for pi_spec in {cell[0] for cell in config.grid}:
                pi_models[pi_spec] = fit_propensity(
                    data, _PI_BASIS[pi_spec](), trunc=config.dgp.trunc,
                    rule=BicRule(), rng=rng.substream("pi", pi_spec),
                )
            m_cache: dict = {}
            for pi_spec, m_spec in config.grid:
                start = time.perf_counter()
                preds = _fit_combo_predictions(
                    data, plan, pi_models, m_cache, pi_spec, m_spec, rule, rng
                )
                fit = fit_ddr(
                    data, preds, basis=basis, rule=rule,
                    rng=rng.substream("cv", pi_spec, m_spec),
                )
                if config.inference:
                    inf = run_inference(
                        data, preds, fit, basis, config.alpha,
                        rng=rng.substream("omega", pi_spec, m_spec),
                    )
                    result.inference_rows += _coverage_rows(
                        inf, theta0, rep_id, "ddr", pi_spec, m_spec
                    )
                l2, l1 = score(fit.coefficients)
                result.records.append(
                    (rep_id, "ddr", pi_spec, m_spec, l2, l1, time.perf_counter() - start)
                )

        # Same substream layout as simulate.comparator_fits, so the oracle
        # fit here is bit-identical to what that helper would produce.
        comp_rng = rng.substream("comp")
        if "oracle" in config.estimators:
            start = time.perf_counter()
            plan_o = split(data.n, comp_rng.substream("oracle-split"))
            preds_o = NuisancePredictions(pi_hat=truth.pi, m_tilde=truth.m, plan=plan_o)
            fit_o = fit_ddr(
                data, preds_o, basis=basis, rule=rule,
                rng=comp_rng.substream("cv"),
            )
            if config.inference:
                inf = run_inference(
                    data, preds_o, fit_o, basis, config.alpha,
                    rng=rng.substream("omega", "oracle"),
                )
                result.inference_rows += _coverage_rows(
                    inf, theta0, rep_id, "oracle", "-", "-"
                )
            l2, l1 = score(fit_o.coefficients)
            result.records.append(
                (rep_id, "oracle", "-", "-", l2, l1, time.perf_counter() - start)
            )

        others = tuple(e for e in ("full", "cc") if e in config.estimators)
        if others:
            start = time.perf_counter()
            fits = comparator_fits(data, truth, rule, comp_rng, estimators=others)
            elapsed = time.perf_counter() - start
            for name in others:
                l2, l1 = score(fits[name].coefficients)
                result.records.append(
                    (rep_id, name, "-", "-", l2, l1, elapsed / len(others))
                )
    except Exception as exc:  # noqa: BLE001 -- per-replication failures are recorded
        result.error = f"{type(exc).__name__}: {exc}"
        result.records = []
        result.inference_rows = []
    return result


# ---------------------------------------------------------------------------
# the run driver
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _estimator_rank(name: str) -> int:
    return ESTIMATORS.index(name)


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None) -> str:
    """Execute the full grid; returns the output directory.

    Raises FailureBudgetExceeded when more than 10% of replications error
    (records for the successful ones are still written first).
    """
    out = config.output
    os.makedirs(out, exist_ok=True)
    shard_dir = os.path.join(out, "shards")
    os.makedirs(shard_dir, exist_ok=True)

    cache_dir = config.theta0_cache or out
    params = default_params(config.dgp)
    theta0 = compute_theta0(config.dgp, params, config.theta0_size, cache_dir)
    with open(os.path.join(out, "theta0.json"), "w") as fh:
        json.dump(
            {
                "p": config.dgp.p, "dgp": config.dgp.kind, "cov": config.dgp.cov,
                "rho": config.dgp.rho, "seed": config.seed,
                "size": config.theta0_size, "theta0": theta0.tolist(),
            },
            fh,
        )
    with open(os.path.join(out, "run_meta.json"), "w") as fh:
        meta = asdict(config)
        meta["dgp"] = asdict(config.dgp)
        json.dump(meta, fh, indent=2, sort_keys=True)

    if workers is None:
        workers = worker_count()
    workers = min(workers, config.replications)

    results: list[ReplicationResult] = []
    shard_path = os.path.join(shard_dir, "records_stream.csv")
    with open(shard_path, "w", newline="") as shard:
        shard_writer = csv.writer(shard, lineterminator="\n")
        shard_writer.writerow(RECORD_HEADER)

        def consume(res: ReplicationResult):
            results.append(res)
            for row in res.records:
                shard_writer.writerow([_fmt(v) for v in row])
            shard.flush()

        if workers <= 1:
            for r in range(config.replications):
                consume(run_replication(config, params, theta0, r))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [
                    pool.submit(run_replication, config, params, theta0, r)
                    for r in range(config.replications)
                ]
                for fut in futures:
                    consume(fut.result())

    errors = sorted(
        (res.replication_id, res.error) for res in results if res.error is not None
    )
    records = sorted(
        (row for res in results for row in res.records),
        key=lambda row: (row[0], _estimator_rank(row[1]), row[2], row[3]),
    )
    inference_rows = sorted(
        (row for res in results for row in res.inference_rows),
        key=lambda row: (row[0], _estimator_rank(row[1]), row[2], row[3], row[4]),
    )

    timing_rows = [row for row in records]
    if not config.record_timing:
        records = [row[:6] + (0.0,) for row in records]
    _write_csv(os.path.join(out, "records.csv"), RECORD_HEADER, records)
    _write_csv(os.path.join(out, "timings.csv"), RECORD_HEADER, timing_rows)
    if config.inference:
        _write_csv(os.path.join(out, "inference.csv"), INFERENCE_HEADER, inference_rows)
    if errors:
        _write_csv(os.path.join(out, "errors.csv"), ["replication_id", "error"], errors)

    if len(errors) > FAILURE_BUDGET * config.replications:
        raise FailureBudgetExceeded(
            f"{len(errors)}/{config.replications} replications failed"
        )

    summarize(out)
    return out


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def _read_csv(path: str, expected_header: list[str]) -> list[list[str]]:
    if not os.path.exists(path):
        raise MalformedRecords(f"missing file {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise MalformedRecords(f"{path} is empty") from exc
        if header != expected_header:
            raise MalformedRecords(
                f"{path} header {header!r} != expected {expected_header!r}"
            )
        return [row for row in reader]


@dataclass
class SummaryTables:
    estimation: list[dict]
    inference: list[dict]


def summarize(records_dir: str, figures: bool = True) -> SummaryTables:
    """Aggregate records into summary tables; renders report figures too.

    ``records_dir`` is a run output directory (or a direct path to a
    records.csv, in which case its directory is used). Estimation rows give
    mean/sd of the L2 and L1 errors per estimator and nuisance combo;
    inference rows give average and median coverage plus mean CI length,
    split by the truly-zero and non-zero coordinates of theta_0, with
    spreads reported both across coordinates and across replications.
    """
    if records_dir.endswith(".csv"):
        records_dir = os.path.dirname(records_dir) or "."
    records_path = os.path.join(records_dir, "records.csv")
    raw = _read_csv(records_path, RECORD_HEADER)

    try:
        parsed = [
            (int(r[0]), r[1], r[2], r[3], float(r[4]), float(r[5]), float(r[6]))
            for r in raw
        ]
    except (ValueError, IndexError) as exc:
        raise MalformedRecords(f"bad row in {records_path}: {exc}") from exc

    groups: dict[tuple, list] = {}
    for row in parsed:
        groups.setdefault((row[1], row[2], row[3]), []).append(row)
    estimation = []
    for key in sorted(groups, key=lambda k: (_estimator_rank(k[0]), k[1], k[2])):
        rows = groups[key]
        l2 = np.array([r[4] for r in rows])
        l1 = np.array([r[5] for r in rows])
        secs = np.array([r[6] for r in rows])
        estimation.append(
            {
                "estimator": key[0], "pi_spec": key[1], "m_spec": key[2],
                "replications": len(rows),
                "l2_mean": float(l2.mean()),
                "l2_sd": float(l2.std(ddof=1)) if len(rows) > 1 else 0.0,
                "l1_mean": float(l1.mean()),
                "l1_sd": float(l1.std(ddof=1)) if len(rows) > 1 else 0.0,
                "seconds_mean": float(secs.mean()),
            }
        )

    inference_summary: list[dict] = []
    inf_path = os.path.join(records_dir, "inference.csv")
    theta0_path = os.path.join(records_dir, "theta0.json")
    inf_parsed = None
    theta0 = None
    if os.path.exists(inf_path) and os.path.exists(theta0_path):
        with open(theta0_path) as fh:
            theta0 = np.asarray(json.load(fh)["theta0"], dtype=float)
        inf_raw = _read_csv(inf_path, INFERENCE_HEADER)
        try:
            inf_parsed = [
                (int(r[0]), r[1], r[2], r[3], int(r[4]), int(r[5]), float(r[6]))
                for r in inf_raw
            ]
        except (ValueError, IndexError) as exc:
            raise MalformedRecords(f"bad row in {inf_path}: {exc}") from exc
        inference_summary = _summarize_inference(inf_parsed, theta0)

    tables = SummaryTables(estimation, inference_summary)
    _write_summary_files(records_dir, tables)
    if figures:
        from .figures import render_figures

        render_figures(records_dir, parsed, inf_parsed, theta0)
    return tables


def _summarize_inference(rows, theta0: np.ndarray) -> list[dict]:
    zero_mask = np.abs(theta0) <= ZERO_COEF_TOL
    combos: dict[tuple, list] = {}
    for row in rows:
        combos.setdefault((row[1], row[2], row[3]), []).append(row)

    out = []
    for key in sorted(combos, key=lambda k: (_estimator_rank(k[0]), k[1], k[2])):
        sub = combos[key]
        reps = sorted({r[0] for r in sub})
        rep_index = {rep: i for i, rep in enumerate(reps)}
        cov = np.full((len(reps), theta0.size), np.nan)
        length = np.full((len(reps), theta0.size), np.nan)
        for r in sub:
            cov[rep_index[r[0]], r[4]] = r[5]
            length[rep_index[r[0]], r[4]] = r[6]
        for label, mask in (("zero", zero_mask), ("nonzero", ~zero_mask)):
            if not np.any(mask):
                continue
            block = cov[:, mask]
            per_coord = np.nanmean(block, axis=0)
            per_rep = np.nanmean(block, axis=1)
            len_block = length[:, mask]
            out.append(
                {
                    "estimator": key[0], "pi_spec": key[1], "m_spec": key[2],
                    "coef_class": label,
                    "n_coords": int(mask.sum()),
                    "a_covp": float(np.mean(per_coord)),
                    "a_covp_sd_coord": float(np.std(per_coord, ddof=1))
                    if mask.sum() > 1 else 0.0,
                    "a_covp_sd_rep": float(np.std(per_rep, ddof=1))
                    if len(reps) > 1 else 0.0,
                    "m_covp": float(np.median(per_coord)),
                    "ci_length_mean": float(np.nanmean(len_block)),
                    "ci_length_sd_rep": float(np.std(np.nanmean(len_block, axis=1), ddof=1))
                    if len(reps) > 1 else 0.0,
                }
            )
    return out


def _write_summary_files(records_dir: str, tables: SummaryTables) -> None:
    est_path = os.path.join(records_dir, "summary.csv")
    with open(est_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["table", "estimator", "pi_spec", "m_spec", "replications",
                  "l2_mean", "l2_sd", "l1_mean", "l1_sd", "seconds_mean",
                  "coef_class", "n_coords", "a_covp", "a_covp_sd_coord",
                  "a_covp_sd_rep", "m_covp", "ci_length_mean", "ci_length_sd_rep"]
        writer.writerow(header)
        for row in tables.estimation:
            writer.writerow(
                ["estimation", row["estimator"], row["pi_spec"], row["m_spec"],
                 row["replications"], _fmt(row["l2_mean"]), _fmt(row["l2_sd"]),
                 _fmt(row["l1_mean"]), _fmt(row["l1_sd"]), _fmt(row["seconds_mean"]),
                 "", "", "", "", "", "", "", ""]
            )
        for row in tables.inference:
            writer.writerow(
                ["inference", row["estimator"], row["pi_spec"], row["m_spec"],
                 "", "", "", "", "", "",
                 row["coef_class"], row["n_coords"], _fmt(row["a_covp"]),
                 _fmt(row["a_covp_sd_coord"]), _fmt(row["a_covp_sd_rep"]),
                 _fmt(row["m_covp"]), _fmt(row["ci_length_mean"]),
                 _fmt(row["ci_length_sd_rep"])]
            )

    lines = ["Estimation (L2 / L1 errors vs theta0)", "-" * 72]
    lines.append(
        f"{'estimator':<8} {'pi_spec':<13} {'m_spec':<7} {'reps':>5} "
        f"{'L2 mean':>9} {'L2 sd':>8} {'L1 mean':>9}"
    )
    for row in tables.estimation:
        lines.append(
            f"{row['estimator']:<8} {row['pi_spec']:<13} {row['m_spec']:<7} "
            f"{row['replications']:>5} {row['l2_mean']:>9.3f} {row['l2_sd']:>8.3f} "
            f"{row['l1_mean']:>9.3f}"
        )
    if tables.inference:
        lines += ["", "Inference (coordinatewise CIs vs theta0)", "-" * 72]
        lines.append(
            f"{'estimator':<8} {'pi_spec':<13} {'m_spec':<7} {'class':<8} "
            f"{'A-CovP':>7} {'M-CovP':>7} {'length':>7}"
        )
        for row in tables.inference:
            lines.append(
                f"{row['estimator']:<8} {row['pi_spec']:<13} {row['m_spec']:<7} "
                f"{row['coef_class']:<8} {row['a_covp']:>7.3f} {row['m_covp']:>7.3f} "
                f"{row['ci_length_mean']:>7.3f}"
            )
    with open(os.path.join(records_dir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
