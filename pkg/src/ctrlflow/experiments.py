"""End-to-end experiment pipelines, reports, plot emission, and verification.

Every experiment runs the same five stages: sample the marginals, construct
trajectory/control ensembles (steering interpolants for transport kinds,
noising runs for stabilization kinds), fit the conditional-mean feedback
law, integrate the learned closed loop, and evaluate metrics.  A stage
failure aborts with :class:`~ctrlflow.errors.StageError` naming the stage;
the partially written run directory is flagged in its manifest.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import ExperimentConfig, validate_config
from .errors import ConfigurationError, StageError
from .flow import integrate_closed_loop_batch, marginal_snapshots, snapshots_from_arrays
from .interpolants import (
    brockett_steer_pair_batch,
    feedback_steer_pair_batch,
    gramian,
    min_energy_pair,
    min_energy_pair_batch,
    place_poles,
)
from .measures import (
    EXACT_W2_MAX_N,
    EmpiricalMeasure,
    build_coupling,
    sample_measure,
    sliced_wasserstein2,
    wasserstein2,
)
from .noising import (
    NoisingConfig,
    QuadraticCost,
    generate_noising_dataset,
    hamiltonian_drift,
    pmp_extremal,
)
from .regression import RegressionDataset, dataset_from_pairs, fit_feedback, save_dataset
from .seeding import stream_key, substream
from .systems import builtin_system, negate_system, six_state_matrices, six_state_output
from .trajectory import TrajectoryControlPair, load_pair_csv, save_pair_bundle

BROCKETT_HORIZON = 4.0 * math.pi
MAX_SAVED_TRAJECTORIES = 32
TARGET_REF_N = 512

STAGES = ("sample", "construct", "fit", "integrate", "evaluate")


def _role_seed(master_seed: int, *path) -> int:
    # named sub-stream per pipeline role so stages re-run independently
    return stream_key(master_seed, *path) % (2**63)


@dataclass
class ExperimentReport:
    """Outcome of one experiment run; every metric is a finite number."""

    kind: str
    name: str
    config_hash: str
    wall_clock_s: float
    metrics: dict
    notes: list = field(default_factory=list)
    manifest: list = field(default_factory=list)
    output_dir: str = ""

    def __post_init__(self):
        bad = [
            k
            for k, v in self.metrics.items()
            if not isinstance(v, (int, float)) or not np.isfinite(v)
        ]
        if bad:
            raise ConfigurationError(f"non-finite metric(s): {bad}")

    def to_json_dict(self) -> dict:
        return {
            "format": "ctrlflow.report.v1",
            "kind": self.kind,
            "name": self.name,
            "config_hash": self.config_hash,
            "wall_clock_s": self.wall_clock_s,
            "metrics": self.metrics,
            "notes": list(self.notes),
            "manifest": list(self.manifest),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExperimentReport":
        if doc.get("format") != "ctrlflow.report.v1":
            raise ConfigurationError("not an experiment report document")
        return cls(
            kind=doc["kind"],
            name=doc["name"],
            config_hash=doc["config_hash"],
            wall_clock_s=doc["wall_clock_s"],
            metrics=doc["metrics"],
            notes=doc.get("notes", []),
            manifest=doc.get("manifest", []),
            output_dir=doc.get("output_dir", ""),
        )

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        with Path(path).open() as fh:
            return cls.from_json_dict(json.load(fh))


class _RunDir:
    """Tracks written artifacts; every data file gets a config-hash sidecar."""

    def __init__(self, out_dir: Path, cfg_hash: str):
        self.dir = out_dir
        self.hash = cfg_hash
        self.files: list[str] = []
        self.dir.mkdir(parents=True, exist_ok=True)

    def add(self, rel: str) -> None:
        path = self.dir / rel
        if not path.exists():
            raise ConfigurationError(f"artifact '{rel}' was not written")
        sidecar = path.with_name(path.name + ".sidecar.json")
        sidecar.write_text(
            json.dumps({"file": rel, "config_hash": self.hash}, sort_keys=True)
        )
        self.files.append(rel)

    def write_json(self, rel: str, doc: dict) -> None:
        (self.dir / rel).write_text(json.dumps(doc, indent=2, sort_keys=True))
        self.add(rel)

    def write_snapshot(self, rel: str, points: np.ndarray, dim: int) -> None:
        points = np.asarray(points, dtype=float).reshape(-1, dim) if len(points) else None
        with (self.dir / rel).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id"] + [f"x_{j + 1}" for j in range(dim)])
            if points is not None:
                for i, row in enumerate(points):
                    writer.writerow([str(i)] + [f"{v:.17g}" for v in row])
        self.add(rel)

    def write_manifest(self, partial: bool = False, failed_stage: Optional[str] = None):
        doc = {
            "format": "ctrlflow.manifest.v1",
            "config_hash": self.hash,
            "files": list(self.files),
            "partial": bool(partial),
        }
        if failed_stage is not None:
            doc["failed_stage"] = failed_stage
        (self.dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _stage(name: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _sample_points(spec: dict, n: int, seed: int) -> EmpiricalMeasure:
    return sample_measure(spec["kind"], spec["params"], n, seed)


def _w2(a: EmpiricalMeasure, b: EmpiricalMeasure, evaluation: dict, seed: int) -> float:
    mode = evaluation["w2"]
    exact_ok = a.n == b.n and a.n <= EXACT_W2_MAX_N and a.uniform and b.uniform
    if mode == "exact" or (mode == "auto" and exact_ok):
        return wasserstein2(a, b)
    return sliced_wasserstein2(a, b, n_projections=evaluation["n_projections"], seed=seed)


def _subsample(points: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Without-replacement reduction for count-matched exact W2."""
    if len(points) <= n:
        return points
    rng = substream(seed, "subsample")
    idx = rng.choice(len(points), size=n, replace=False)
    return points[np.sort(idx)]


def _max_pair_error(pairs: list[TrajectoryControlPair]) -> float:
    worst = 0.0
    for p in pairs:
        for key in ("endpoint_error", "terminal_error"):
            if key in p.meta:
                worst = max(worst, float(p.meta[key]))
    return worst


def _mean_pair_distance(x0: np.ndarray, x1: np.ndarray) -> float:
    return float(np.linalg.norm(x1 - x0, axis=1).mean())


def _distance_to_target(
    points: np.ndarray, spec: Optional[dict], ref_points: Optional[np.ndarray]
) -> np.ndarray:
    """Distance from each row to the target set.

    dirac and uniform_sphere targets have closed-form set distances; any
    other target falls back to nearest-reference-sample distance.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if spec is not None and spec["kind"] == "dirac":
        p = np.asarray(spec["params"]["point"], dtype=float)
        return np.linalg.norm(points - p, axis=1)
    if spec is not None and spec["kind"] == "uniform_sphere":
        params = spec["params"]
        dim = int(params.get("dim", len(params.get("center", [0.0, 0.0, 0.0]))))
        center = np.asarray(params.get("center", np.zeros(dim)), dtype=float)
        radius = float(params.get("radius", 1.0))
        return np.abs(np.linalg.norm(points - center, axis=1) - radius)
    if ref_points is None or len(ref_points) == 0:
        raise ConfigurationError("no target reference points available")
    d2 = (
        np.einsum("nd,nd->n", points, points)[:, None]
        + np.einsum("md,md->m", ref_points, ref_points)[None, :]
        - 2.0 * points @ ref_points.T
    )
    return np.sqrt(np.maximum(d2, 0.0).min(axis=1))


def _lift_output_targets(ys: np.ndarray) -> np.ndarray:
    """Zero-velocity lift of output-space targets into the six-state space."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    lifted = np.zeros((ys.shape[0], 6))
    lifted[:, 0] = ys[:, 0]
    lifted[:, 2] = ys[:, 1]
    return lifted


def _transport_matrices(cfg: ExperimentConfig):
    if cfg.system["name"] == "linear":
        A = np.asarray(cfg.system["params"]["A"], dtype=float)
        B = np.asarray(cfg.system["params"]["B"], dtype=float)
    else:
        A, B = six_state_matrices()
    return A, B


def _build_system(cfg: ExperimentConfig):
    name = cfg.system["name"]
    if name == "linear":
        A, B = _transport_matrices(cfg)
        return builtin_system("linear", A=A, B=B)
    return builtin_system(name)


# ----------------------------------------------------------------------
# pipeline


def run_experiment(config, output_root=None) -> ExperimentReport:
    """Execute the five-stage pipeline for the configured experiment kind.

    ``config`` may be an :class:`ExperimentConfig` or a raw dict (validated
    first; nothing is written for an invalid document).  Deterministic for
    a fixed config: all randomness flows from the master seed through named
    sub-streams.
    """
    if not isinstance(config, ExperimentConfig):
        config = validate_config(config)
    cfg = config
    cfg_hash = cfg.hash

    root = Path(output_root) if output_root is not None else Path.cwd()
    rel = Path(cfg.output_dir) if cfg.output_dir else Path(f"{cfg.name}_{cfg_hash[:8]}")
    out_dir = rel if rel.is_absolute() else root / rel

    t0 = time.perf_counter()
    run = _RunDir(out_dir, cfg_hash)
    run.write_json("config.json", cfg.to_canonical_dict())
    try:
        if cfg.kind in ("transport_linear", "output_transport", "brockett"):
            metrics, notes = _run_transport(cfg, run)
        else:
            metrics, notes = _run_stabilize(cfg, run)
    except StageError as exc:
        run.write_manifest(partial=True, failed_stage=exc.stage)
        raise
    wall = time.perf_counter() - t0

    report = ExperimentReport(
        kind=cfg.kind,
        name=cfg.name,
        config_hash=cfg_hash,
        wall_clock_s=wall,
        metrics=metrics,
        notes=notes,
        manifest=[],
        output_dir=str(out_dir),
    )
    doc = report.to_json_dict()
    run.write_json("report.json", doc)
    report.manifest = list(run.files)
    doc["manifest"] = report.manifest
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    run.write_manifest(partial=False)
    return report


def _run_transport(cfg: ExperimentConfig, run: _RunDir):
    seed = cfg.master_seed
    sys = _stage("sample", _build_system, cfg)
    evaluation = cfg.evaluation

    def sample():
        mu0_s = _sample_points(cfg.mu0, cfg.n_train, _role_seed(seed, "mu0"))
        if mu0_s.dim != sys.d:
            raise ConfigurationError(
                f"mu0 dimension {mu0_s.dim} does not match system dimension {sys.d}"
            )
        muT_raw = _sample_points(cfg.muT, cfg.n_train, _role_seed(seed, "muT"))
        if cfg.kind == "output_transport":
            if muT_raw.dim != sys.output_dim:
                raise ConfigurationError(
                    f"muT dimension {muT_raw.dim} does not match output dimension"
                )
            muT_s = EmpiricalMeasure(points=_lift_output_targets(muT_raw.points))
        else:
            if muT_raw.dim != sys.d:
                raise ConfigurationError(
                    f"muT dimension {muT_raw.dim} does not match system dimension {sys.d}"
                )
            muT_s = muT_raw
        coup = build_coupling(mu0_s, muT_s, cfg.coupling, _role_seed(seed, "coupling"))
        return coup

    coup = _stage("sample", sample)

    def construct():
        interp = cfg.interpolant
        if cfg.kind == "transport_linear":
            A, B = _transport_matrices(cfg)
            T = interp["T"]
            pairs = min_energy_pair_batch(
                A, B, coup.x0, coup.x1, T, n_grid=interp["n_grid"], n_quad=interp["n_quad"]
            )
        elif cfg.kind == "output_transport":
            A, B = _transport_matrices(cfg)
            T = interp["T"]
            K = place_poles(A, B, interp["poles"], seed=_role_seed(seed, "poles"))
            pairs = feedback_steer_pair_batch(
                A, B, K, ys=coup.x1, x0s=coup.x0, T=T, n_grid=interp["n_grid"]
            )
        else:
            T = BROCKETT_HORIZON
            pairs = brockett_steer_pair_batch(coup.x0, coup.x1, n_grid=interp["n_grid"])
        return T, pairs

    T, pairs = _stage("construct", construct)

    def fit():
        data = dataset_from_pairs(pairs)
        law = fit_feedback(
            data,
            method=cfg.regression["method"],
            hyperparams=cfg.regression["hyperparams"],
            seed=_role_seed(seed, "fit"),
        )
        return data, law

    data, law = _stage("fit", fit)

    def integrate():
        if cfg.n_eval == 0:
            return None
        z0_eval = _sample_points(cfg.mu0, cfg.n_eval, _role_seed(seed, "eval_start"))
        return integrate_closed_loop_batch(
            sys, law, z0_eval.points, T, evaluation["n_grid"], direction="forward"
        )

    rollout = _stage("integrate", integrate)

    def evaluate():
        metrics: dict = {}
        notes: list = []
        metrics["mean_pair_distance"] = _mean_pair_distance(coup.x0, coup.x1)
        metrics["max_endpoint_error"] = _max_pair_error(pairs)
        if law.final_loss is not None and np.isfinite(law.final_loss):
            metrics["fit_loss"] = float(law.final_loss)

        # construction-level quality: endpoints of the training ensemble
        end_constructed = np.stack([p.states[-1] for p in pairs])
        w2c = _w2(
            EmpiricalMeasure(points=end_constructed),
            EmpiricalMeasure(points=coup.x1),
            evaluation,
            _role_seed(seed, "w2", "construction"),
        )
        metrics["w2_construction_terminal"] = float(w2c)
        if cfg.kind == "output_transport":
            # sample-level output identity: push the constructed endpoints
            # through h and compare with the coupled target draws themselves
            w2co = _w2(
                EmpiricalMeasure(points=six_state_output(end_constructed)),
                EmpiricalMeasure(points=six_state_output(coup.x1)),
                evaluation,
                _role_seed(seed, "w2", "construction_output"),
            )
            metrics["w2_construction_output"] = float(w2co)

        fractions = evaluation["snapshot_fractions"]
        times = [f * T for f in fractions]
        constructed = marginal_snapshots(pairs, times)
        for frac, meas in zip(fractions, constructed):
            run.write_snapshot(
                f"snapshot_constructed_t{frac:g}.csv", meas.points, sys.d
            )

        if rollout is None:
            run.write_snapshot("snapshot_initial.csv", np.empty((0, sys.d)), sys.d)
            tdim = sys.output_dim if cfg.kind == "output_transport" else sys.d
            run.write_snapshot("snapshot_target.csv", np.empty((0, tdim)), tdim)
            run.write_snapshot("snapshot_achieved.csv", np.empty((0, sys.d)), sys.d)
            save_pair_bundle([], run.dir / "eval_trajectories", "eval")
            run.add("eval_trajectories/eval_index.json")
            metrics["excluded_eval"] = 0
            metrics["extrapolation_count"] = 0
            return metrics, notes

        t_grid, states, controls, info = rollout
        kept = ~np.isfinite(info.bad_time)
        n_kept = int(kept.sum())
        metrics["excluded_eval"] = int(info.excluded_count)
        metrics["extrapolation_count"] = int(info.extrapolation_count)
        if info.excluded_count:
            notes.append(
                f"{info.excluded_count} evaluation rollout(s) blew up and were excluded"
            )
        run.write_snapshot("snapshot_initial.csv", states[kept, 0], sys.d)

        if n_kept == 0:
            notes.append("all evaluation rollouts blew up; transport metrics skipped")
            tdim = sys.output_dim if cfg.kind == "output_transport" else sys.d
            run.write_snapshot("snapshot_target.csv", np.empty((0, tdim)), tdim)
            run.write_snapshot("snapshot_achieved.csv", np.empty((0, sys.d)), sys.d)
            save_pair_bundle([], run.dir / "eval_trajectories", "eval")
            run.add("eval_trajectories/eval_index.json")
            return metrics, notes

        achieved_T = EmpiricalMeasure(points=states[kept, -1])
        run.write_snapshot("snapshot_achieved.csv", achieved_T.points, sys.d)

        # terminal comparison against fresh target draws
        if cfg.kind == "output_transport":
            y_ref = _sample_points(cfg.muT, n_kept, _role_seed(seed, "eval_target"))
            run.write_snapshot("snapshot_target.csv", y_ref.points, sys.output_dim)
            w2o = _w2(
                EmpiricalMeasure(points=six_state_output(achieved_T.points)),
                y_ref,
                evaluation,
                _role_seed(seed, "w2", "output"),
            )
            metrics["w2_output"] = float(w2o)
            state_ref = EmpiricalMeasure(
                points=_subsample(coup.x1, n_kept, _role_seed(seed, "state_ref"))
            )
            metrics["w2_terminal"] = float(
                _w2(achieved_T, state_ref, evaluation, _role_seed(seed, "w2", "term"))
            )
        else:
            muT_ref = _sample_points(cfg.muT, n_kept, _role_seed(seed, "eval_target"))
            run.write_snapshot("snapshot_target.csv", muT_ref.points, sys.d)
            metrics["w2_terminal"] = float(
                _w2(achieved_T, muT_ref, evaluation, _role_seed(seed, "w2", "term"))
            )

        # learned-vs-constructed marginals along the flow
        learned = snapshots_from_arrays(t_grid, states[kept], times)
        for frac, l_meas, c_meas in zip(fractions, learned, constructed):
            c_pts = _subsample(
                c_meas.points, l_meas.n, _role_seed(seed, "marg", f"{frac:g}")
            )
            l_pts = _subsample(
                l_meas.points, len(c_pts), _role_seed(seed, "marg_l", f"{frac:g}")
            )
            val = _w2(
                EmpiricalMeasure(points=l_pts),
                EmpiricalMeasure(points=c_pts),
                evaluation,
                _role_seed(seed, "w2", f"marg{frac:g}"),
            )
            metrics[f"w2_t{frac:g}"] = float(val)
            run.write_snapshot(f"snapshot_learned_t{frac:g}.csv", l_meas.points, sys.d)

        eval_pairs = [
            TrajectoryControlPair(
                t_grid, states[i], controls[i], meta={"direction": "forward"}
            )
            for i in np.where(kept)[0][:MAX_SAVED_TRAJECTORIES]
        ]
        for name in save_pair_bundle(
            eval_pairs, run.dir / "eval_trajectories", "eval",
            index_extra={"config_hash": run.hash},
        ):
            run.add(f"eval_trajectories/{name}")
        return metrics, notes

    metrics, notes = _stage("evaluate", evaluate)
    _persist_common(run, cfg, pairs, data, law)
    return metrics, notes


def _run_stabilize(cfg: ExperimentConfig, run: _RunDir):
    seed = cfg.master_seed
    sys = _stage("sample", _build_system, cfg)
    evaluation = cfg.evaluation

    def sample():
        probe = _sample_points(cfg.target, 8, _role_seed(seed, "target_probe"))
        if probe.dim != sys.d:
            raise ConfigurationError(
                f"target dimension {probe.dim} does not match system dimension {sys.d}"
            )
        ref = _sample_points(cfg.target, TARGET_REF_N, _role_seed(seed, "target_ref"))
        return ref

    target_ref = _stage("sample", sample)

    def construct():
        noising = cfg.noising
        kwargs = dict(
            T=noising["T"],
            n_grid=noising["n_grid"],
            n_samples=cfg.n_train,
            n_time_samples=noising["n_time_samples"],
            blowup=noising["blowup"],
            seed=_role_seed(seed, "noising"),
        )
        if cfg.kind == "stabilize_pmp":
            ncfg = NoisingConfig(
                kind="pmp",
                theta=noising["theta"],
                p_scale=noising["p_scale"],
                adjoint_sign=noising["adjoint_sign"],
                **kwargs,
            )
        else:
            ncfg = NoisingConfig(kind="randomized", sigma=noising["sigma"], **kwargs)

        def target_sampler(n, s):
            return _sample_points(cfg.target, n, s).points

        return generate_noising_dataset(sys, ncfg, target_sampler)

    data, nreport = _stage("construct", construct)

    def fit():
        return fit_feedback(
            data,
            method=cfg.regression["method"],
            hyperparams=cfg.regression["hyperparams"],
            seed=_role_seed(seed, "fit"),
        )

    law = _stage("fit", fit)

    def integrate():
        if cfg.n_eval == 0:
            return None
        start = evaluation["start"]
        if start["kind"] == "bootstrap":
            jitter = float(start["params"].get("jitter", 0.0))
            endpoints = nreport.endpoints
            if endpoints is None or len(endpoints) == 0:
                raise ConfigurationError("no noising endpoints available to bootstrap")

            def sampler(n, s):
                rng = substream(s, "bootstrap_start")
                pts = endpoints[rng.integers(0, len(endpoints), size=n)]
                if jitter > 0.0:
                    pts = pts + jitter * rng.standard_normal(pts.shape)
                return pts

        else:

            def sampler(n, s):
                return _sample_points(start, n, s).points

        z0s = sampler(cfg.n_eval, _role_seed(seed, "eval_start"))
        T = cfg.noising["T"]
        # The noising rollouts follow the negated dynamics, so their time
        # reversal is the reversed loop of the negated system (net +f).
        return integrate_closed_loop_batch(
            negate_system(sys), law, z0s, T, evaluation["n_grid"], direction="reversed"
        )

    rollout = _stage("integrate", integrate)

    def evaluate():
        metrics: dict = {}
        notes: list = list(nreport.warnings)
        metrics["excluded_noising"] = int(nreport.excluded_count)
        if nreport.hamiltonian_drift_max is not None:
            metrics["hamiltonian_drift_max"] = float(nreport.hamiltonian_drift_max)
        if law.final_loss is not None and np.isfinite(law.final_loss):
            metrics["fit_loss"] = float(law.final_loss)

        if nreport.endpoints is not None and len(nreport.endpoints):
            run.write_snapshot("snapshot_noised.csv", nreport.endpoints, sys.d)
            spread = _distance_to_target(nreport.endpoints, cfg.target, target_ref.points)
            metrics["noised_median_distance"] = float(np.median(spread))
        run.write_snapshot("snapshot_target.csv", target_ref.points, sys.d)

        if cfg.kind == "stabilize_random":
            notes.append(
                "trajectories do not exactly converge to the origin: the reversed "
                "randomized flow contracts to a neighborhood of the target set, "
                "not to a point"
            )

        if rollout is None:
            run.write_snapshot("snapshot_initial.csv", np.empty((0, sys.d)), sys.d)
            run.write_snapshot("snapshot_achieved.csv", np.empty((0, sys.d)), sys.d)
            save_pair_bundle([], run.dir / "eval_trajectories", "eval")
            run.add("eval_trajectories/eval_index.json")
            metrics["excluded_eval"] = 0
            metrics["extrapolation_count"] = 0
            return metrics, notes

        t_grid, states, controls, info = rollout
        kept = ~np.isfinite(info.bad_time)
        n_kept = int(kept.sum())
        metrics["excluded_eval"] = int(info.excluded_count)
        metrics["extrapolation_count"] = int(info.extrapolation_count)
        if info.excluded_count:
            notes.append(
                f"{info.excluded_count} evaluation rollout(s) blew up and were excluded"
            )
        run.write_snapshot("snapshot_initial.csv", states[kept, 0], sys.d)
        if n_kept == 0:
            notes.append("all evaluation rollouts blew up; distance metrics skipped")
            run.write_snapshot("snapshot_achieved.csv", np.empty((0, sys.d)), sys.d)
            save_pair_bundle([], run.dir / "eval_trajectories", "eval")
            run.add("eval_trajectories/eval_index.json")
            return metrics, notes

        d0 = _distance_to_target(states[kept, 0], cfg.target, target_ref.points)
        dT = _distance_to_target(states[kept, -1], cfg.target, target_ref.points)
        metrics["median_initial_distance"] = float(np.median(d0))
        metrics["median_terminal_distance"] = float(np.median(dT))
        metrics["p90_terminal_distance"] = float(np.quantile(dT, 0.9))
        radius = evaluation["success_radius"]
        metrics["frac_within_radius"] = float(np.mean(dT <= radius))
        denom = max(float(np.median(d0)), 1.0e-12)
        metrics["distance_ratio"] = float(np.median(dT)) / denom
        run.write_snapshot("snapshot_achieved.csv", states[kept, -1], sys.d)

        eval_pairs = [
            TrajectoryControlPair(
                t_grid, states[i], controls[i], meta={"direction": "reversed"}
            )
            for i in np.where(kept)[0][:MAX_SAVED_TRAJECTORIES]
        ]
        for name in save_pair_bundle(
            eval_pairs, run.dir / "eval_trajectories", "eval",
            index_extra={"config_hash": run.hash},
        ):
            run.add(f"eval_trajectories/{name}")
        return metrics, notes

    metrics, notes = _stage("evaluate", evaluate)
    _persist_common(run, cfg, None, data, law)
    return metrics, notes


def _persist_common(run, cfg, pairs, data: RegressionDataset, law):
    def persist():
        for name in save_dataset(
            data, run.dir / "dataset.csv", metadata={"config_hash": run.hash}
        ):
            run.add(name)
        law.save(run.dir / "law.json")
        run.add("law.json")
        if pairs:
            subset = pairs[:MAX_SAVED_TRAJECTORIES]
            for name in save_pair_bundle(
                subset, run.dir / "train_pairs", "train",
                index_extra={"config_hash": run.hash},
            ):
                run.add(f"train_pairs/{name}")

    _stage("evaluate", persist)


# ----------------------------------------------------------------------
# plot emission


def _read_snapshot(path: Path) -> np.ndarray:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader]
    dim = len(header) - 1
    return np.asarray(rows, dtype=float).reshape(-1, dim)


def emit_plot_data(run_dir) -> list[str]:
    """Write gnuplot-ready whitespace-delimited files into a run directory.

    Produces scatter overlays (initial/target/achieved), per-trajectory
    polyline blocks separated by blank lines, and a distance-to-target time
    series.  Requires a manifest (i.e. a completed or flagged run).
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"missing manifest in {run_dir}; not a run directory")
    manifest = json.loads(manifest_path.read_text())
    cfg_hash = manifest.get("config_hash", "")

    target_spec = None
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        doc = json.loads(cfg_path.read_text())
        target_spec = doc.get("target")

    written: list[str] = []

    def emit(rel: str, header: str, blocks: list[np.ndarray], block_labels=None):
        path = run_dir / rel
        with path.open("w") as fh:
            fh.write(header + "\n")
            for bi, block in enumerate(blocks):
                if block_labels is not None:
                    fh.write(f"# {block_labels[bi]}\n")
                for row in np.atleast_2d(block):
                    fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
                if bi != len(blocks) - 1:
                    fh.write("\n\n")
        sidecar = path.with_name(path.name + ".sidecar.json")
        sidecar.write_text(
            json.dumps({"file": rel, "config_hash": cfg_hash}, sort_keys=True)
        )
        written.append(rel)

    # scatter overlays
    for role in ("initial", "target", "achieved"):
        snap = run_dir / f"snapshot_{role}.csv"
        pts = _read_snapshot(snap) if snap.exists() else np.empty((0, 0))
        dim = pts.shape[1]
        cols = " ".join(f"x_{j + 1}" for j in range(dim)) if dim else "x_*"
        emit(f"plot_scatter_{role}.dat", f"# {role} scatter: {cols}", [pts] if len(pts) else [np.empty((0, max(dim, 1)))])

    # trajectory polylines
    pairs = []
    index_path = run_dir / "eval_trajectories" / "eval_index.json"
    if index_path.exists():
        index = json.loads(index_path.read_text())
        for entry in index.get("pairs", []):
            pairs.append(load_pair_csv(run_dir / "eval_trajectories" / entry["file"]))
    blocks = [np.column_stack([p.t_grid, p.states]) for p in pairs]
    labels = [f"trajectory {i}" for i in range(len(pairs))]
    emit(
        "plot_trajectories.dat",
        "# closed-loop trajectories: t x_1 .. x_d (blank-line separated blocks)",
        blocks if blocks else [np.empty((0, 1))],
        block_labels=labels if blocks else None,
    )

    # distance-to-target series over the saved trajectories
    target_snap = run_dir / "snapshot_target.csv"
    ref_points = _read_snapshot(target_snap) if target_snap.exists() else np.empty((0, 0))
    series = np.empty((0, 4))
    if pairs and len(ref_points):
        t_grid = pairs[0].t_grid
        dists = np.stack(
            [
                _distance_to_target(p.states, target_spec, ref_points)
                for p in pairs
            ]
        )
        series = np.column_stack(
            [
                t_grid,
                np.median(dists, axis=0),
                np.quantile(dists, 0.9, axis=0),
                dists.mean(axis=0),
            ]
        )
    emit(
        "plot_distance.dat",
        "# distance to target over the saved rollouts: t median p90 mean",
        [series],
    )

    files = list(manifest.get("files", []))
    files.extend(name for name in written if name not in files)
    manifest["files"] = files
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return written


# ----------------------------------------------------------------------
# example configs and verification suites


def example_config(kind: str) -> dict:
    """A runnable default config document for each experiment kind."""
    if kind == "transport_linear":
        return {
            "schema_version": 1,
            "kind": "transport_linear",
            "name": "double_integrator_transport",
            "master_seed": 7,
            "n_train": 512,
            "n_eval": 256,
            "system": {
                "name": "linear",
                "params": {"A": [[0.0, 1.0], [0.0, 0.0]], "B": [[0.0], [1.0]]},
            },
            "mu0": {"kind": "gaussian", "params": {"mean": [-2.0, -2.0], "cov": 0.25}},
            "muT": {"kind": "gaussian", "params": {"mean": [2.0, 2.0], "cov": 0.25}},
            "coupling": "independent",
            "interpolant": {"T": 1.0, "n_grid": 1000, "n_quad": 256},
            "regression": {"method": "kernel", "hyperparams": {"bandwidth_scale": 0.1}},
            "evaluation": {"n_grid": 200},
        }
    if kind == "output_transport":
        return {
            "schema_version": 1,
            "kind": "output_transport",
            "name": "six_state_output_transport",
            "master_seed": 11,
            "n_train": 256,
            "n_eval": 256,
            "system": {"name": "six_state_default", "params": {}},
            "mu0": {
                "kind": "gaussian",
                "params": {"mean": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0], "cov": 1.0},
            },
            "muT": {"kind": "gaussian", "params": {"mean": [3.0, 3.0], "cov": 0.25}},
            "coupling": "independent",
            "interpolant": {
                "T": 6.0,
                "n_grid": 1200,
                "poles": [-2.0, -2.0, -2.0, -2.4, -2.4, -2.4],
            },
            "regression": {"method": "mlp", "hyperparams": {"steps": 6000, "hidden": [96, 96]}},
            "evaluation": {"n_grid": 200},
        }
    if kind == "brockett":
        return {
            "schema_version": 1,
            "kind": "brockett",
            "name": "brockett_transport",
            "master_seed": 3,
            "n_train": 256,
            "n_eval": 128,
            "system": {"name": "brockett", "params": {}},
            "mu0": {"kind": "gaussian", "params": {"mean": [0.0, 0.0, 0.0], "cov": 0.25}},
            "muT": {"kind": "gaussian", "params": {"mean": [1.0, 1.0, 1.0], "cov": 0.25}},
            "coupling": "independent",
            "interpolant": {"n_grid": 2000},
            "regression": {"method": "kernel", "hyperparams": {}},
            "evaluation": {"n_grid": 400},
        }
    if kind == "stabilize_pmp":
        return {
            "schema_version": 1,
            "kind": "stabilize_pmp",
            "name": "unicycle_origin",
            "master_seed": 5,
            "n_train": 800,
            "n_eval": 100,
            "system": {"name": "unicycle", "params": {}},
            "target": {"kind": "dirac", "params": {"point": [0.0, 0.0, 0.0]}},
            "noising": {
                "T": 2.0,
                "n_grid": 600,
                "n_time_samples": 50,
                "theta": 1.0,
                "p_scale": 6.0,
                "adjoint_sign": "canonical",
            },
            "regression": {"method": "kernel", "hyperparams": {"bandwidth_scale": 0.05}},
            "evaluation": {
                "n_grid": 150,
                "start": {
                    "kind": "gaussian",
                    "params": {"mean": [0.0, 0.0, 0.0], "cov": 1.0},
                },
                "success_radius": 0.2,
            },
        }
    if kind == "stabilize_random":
        return {
            "schema_version": 1,
            "kind": "stabilize_random",
            "name": "martinet_stabilize",
            "master_seed": 13,
            "n_train": 800,
            "n_eval": 100,
            "system": {"name": "martinet", "params": {}},
            "target": {"kind": "dirac", "params": {"point": [0.0, 0.0, 0.0]}},
            "noising": {"T": 1.0, "n_grid": 600, "n_time_samples": 25, "sigma": 1.0},
            "regression": {"method": "kernel", "hyperparams": {"bandwidth_scale": 0.1}},
            "evaluation": {
                "n_grid": 300,
                "start": {"kind": "bootstrap", "params": {"jitter": 0.0}},
                "success_radius": 0.2,
            },
        }
    raise ConfigurationError(f"no example config for kind '{kind}'")


def _check(name: str, value: float, tolerance: float, larger_ok: bool = False) -> dict:
    passed = bool(value >= tolerance) if larger_ok else bool(value <= tolerance)
    return {
        "check": name,
        "value": float(value),
        "tolerance": float(tolerance),
        "comparison": ">=" if larger_ok else "<=",
        "passed": passed,
    }


def _verify_fast() -> list[dict]:
    from .systems import builtin_system as _bs

    results = []

    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    W = gramian(A, B, 1.0).W
    W_exact = np.array([[1.0 / 3.0, 0.5], [0.5, 1.0]])
    results.append(_check("gramian_closed_form", np.abs(W - W_exact).max(), 1.0e-8))

    pair = min_energy_pair(A, B, np.zeros(2), np.array([1.0, 0.0]), 1.0, n_grid=400)
    u_exact = 6.0 - 12.0 * pair.t_grid
    u_err = np.abs(pair.controls[:, 0] - u_exact).max()
    results.append(_check("min_energy_canonical_control", u_err, 1.0e-8))

    rng = substream(123, "verify", "min_energy")
    x0s = rng.uniform(-1.0, 1.0, size=(100, 2))
    xTs = rng.uniform(-1.0, 1.0, size=(100, 2))
    pairs = min_energy_pair_batch(A, B, x0s, xTs, 1.0, n_grid=400)
    err = max(np.linalg.norm(p.states[-1] - xT) for p, xT in zip(pairs, xTs))
    results.append(_check("min_energy_terminal_error", err, 1.0e-5))

    cases = [
        (np.zeros(3), np.array([0.0, 0.0, 1.0])),
        (np.zeros(3), np.array([1.0, 1.0, 0.0])),
    ]
    case_err = 0.0
    for x, y in cases:
        p = brockett_steer_pair_batch(x[None], y[None], n_grid=4000)[0]
        case_err = max(case_err, float(np.linalg.norm(p.states[-1] - y)))
    results.append(_check("brockett_canonical_cases", case_err, 1.0e-8))

    rng = substream(123, "verify", "brockett")
    xs = rng.uniform(-1.0, 1.0, size=(100, 3))
    ys = rng.uniform(-1.0, 1.0, size=(100, 3))
    bpairs = brockett_steer_pair_batch(xs, ys, n_grid=4000)
    berr = max(np.linalg.norm(p.states[-1] - y) for p, y in zip(bpairs, ys))
    results.append(_check("brockett_random_endpoints", berr, 1.0e-6))

    unicycle = _bs("unicycle")
    cost = QuadraticCost()
    rng = substream(123, "verify", "pmp")
    drift_rel = 0.0
    for _ in range(10):
        x0 = rng.uniform(-1.0, 1.0, size=3)
        p0 = rng.uniform(-1.0, 1.0, size=3)
        pair, costates = pmp_extremal(unicycle, cost, x0, p0, T=1.0, n_grid=4000)
        drift_rel = max(drift_rel, hamiltonian_drift(unicycle, cost, pair.states, costates))
    results.append(_check("hamiltonian_conservation", drift_rel, 1.0e-8))

    rng = substream(123, "verify", "w2")
    X = rng.standard_normal((64, 3))
    shift = np.array([1.0, -2.0, 0.5])
    a = EmpiricalMeasure(points=X)
    b = EmpiricalMeasure(points=X + shift)
    w2_err = abs(wasserstein2(a, b) - np.linalg.norm(shift))
    results.append(_check("w2_translation_identity", w2_err, 1.0e-10))

    # linear law u = c x on a 1-D grid, bandwidth = grid spacing,
    # queried at interior training points
    x = np.linspace(-1.0, 1.0, 101)[:, None]
    spacing = 0.02
    data = RegressionDataset(
        t=np.zeros(101), x=x, u=2.0 * x, traj_id=np.arange(101)
    )
    law = fit_feedback(data, method="kernel", hyperparams={"bandwidth": spacing}, seed=0)
    interior = x[10:91]
    pred = law.predict(0.0, interior)
    reg_err = float(np.abs(pred - 2.0 * interior).max())
    results.append(_check("kernel_linear_law_recovery", reg_err, 1.0e-2))
    return results


def _verify_full(output_root=None) -> list[dict]:
    import tempfile

    results = _verify_fast()
    root = Path(output_root) if output_root else Path(tempfile.mkdtemp(prefix="ctrlflow_verify_"))

    rng = substream(99, "verify", "identity")
    pts = rng.standard_normal((128, 2))
    doc = example_config("transport_linear")
    doc.update(
        {
            "name": "verify_identity_transport",
            "n_train": 128,
            "n_eval": 128,
            "mu0": {"kind": "empirical", "params": {"points": pts.tolist()}},
            "muT": {"kind": "empirical", "params": {"points": pts.tolist()}},
            "coupling": "paired",
            "system": {
                "name": "linear",
                "params": {"A": [[0.0, 0.0], [0.0, 0.0]], "B": [[1.0, 0.0], [0.0, 1.0]]},
            },
        }
    )
    report = run_experiment(doc, output_root=root)
    results.append(
        _check("identity_transport_w2", report.metrics["w2_terminal"], 1.0e-3)
    )

    pilot = example_config("stabilize_pmp")
    report = run_experiment(pilot, output_root=root)
    results.append(
        _check(
            "unicycle_origin_within_radius",
            report.metrics["frac_within_radius"],
            0.9,
            larger_ok=True,
        )
    )

    pilot = example_config("stabilize_random")
    report = run_experiment(pilot, output_root=root)
    results.append(
        _check("martinet_distance_ratio", report.metrics["distance_ratio"], 0.2)
    )
    return results


def verify(suite: str, output_root=None) -> list[dict]:
    """Run a verification suite; failures are results, not errors.

    ``fast`` exercises the numeric oracles (seconds); ``full`` additionally
    runs pilot-scale experiments (minutes) and writes ``verify_full.json``
    under ``output_root`` (or the working directory).
    """
    if suite == "fast":
        return _verify_fast()
    if suite == "full":
        results = _verify_full(output_root)
        root = Path(output_root) if output_root else Path.cwd()
        root.mkdir(parents=True, exist_ok=True)
        (root / "verify_full.json").write_text(
            json.dumps({"suite": "full", "results": results}, indent=2, sort_keys=True)
        )
        return results
    raise ConfigurationError(f"unknown verify suite '{suite}' (expected fast or full)")
