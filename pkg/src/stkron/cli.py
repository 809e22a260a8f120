"""Batch command-line surface.

One JSON config per command (schema-validated, unknown keys rejected),
with --seed and --out as the only overrides.  Exit codes: 0 success,
2 config/usage, 3 capacity, 4 numerical failure.  All file writes are
atomic (write-temp-then-rename) so reruns never leave partial artifacts.
"""
import argparse
import json
import os
import sys
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np
import jsonschema

from .data import _atomic_write, _fmt, load_dataset, save_dataset
from .errors import CapacityError, NumericalError
from .inference import PriorConfig, estimate_tesd, fit, load_samples, \
    save_samples
from .kernels import StationaryKernelParams, add_jitter, mercer_basis, \
    dynamic_eigenvalues, stationary_kernel
from .kronalg import Model2Marginal
from .predict import predict_mean, predict_tesd_future, \
    predict_tesd_neighbor, save_prediction_csv
from .samplers import RngState
from .simulate import SimParams, TruthOracle, generate, \
    image_demo_dataset, tesd_error

_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_TRIPLE = {"type": "array", "items": {"type": "number"},
           "minItems": 3, "maxItems": 3}
_POS_TRIPLE = {"type": "array", "items": _POS_NUM,
               "minItems": 3, "maxItems": 3}

_PRIOR_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["a", "b", "m", "V", "L"],
    "properties": {
        "a": _POS_TRIPLE, "b": _POS_TRIPLE, "m": _TRIPLE, "V": _POS_TRIPLE,
        "kappa": {"type": "number", "minimum": 0},
        "L": {"type": "integer", "minimum": 1},
        "model": {"enum": ["I", "II"]},
        "spatial_kernel": {"enum": ["stationary", "graph_laplacian"]},
        "s_exp": {"type": "number", "exclusiveMinimum": 0, "maximum": 2},
        "graph_w": {"type": "integer", "minimum": 1},
        "graph_s": {"type": "integer", "minimum": 1, "maximum": 3},
    },
}

_RUN_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["n_iter"],
    "properties": {
        "n_iter": {"type": "integer", "minimum": 1},
        "burn_in": {"type": "integer", "minimum": 0},
        "thin": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "sample_M": {"type": "boolean"},
    },
}

_SCHEMAS = {
    "simulate": {
        "type": "object", "additionalProperties": False,
        "required": ["out"],
        "properties": {
            "kind": {"enum": ["process", "image"]},
            "sim": {
                "type": "object", "additionalProperties": False,
                "properties": {
                    "ell_x": _POS_NUM, "ell_t": _POS_NUM,
                    "ell_xt": _POS_NUM, "sigma2_eps": _POS_NUM,
                    "Nx": {"type": "integer", "minimum": 1},
                    "Nt": {"type": "integer", "minimum": 1},
                    "K": {"type": "integer", "minimum": 1},
                    "seed": {"type": "integer"},
                },
            },
            "image": {
                "type": "object", "additionalProperties": False,
                "properties": {
                    "rows": {"type": "integer", "minimum": 2},
                    "cols": {"type": "integer", "minimum": 2},
                    "J": {"type": "integer", "minimum": 1},
                    "K": {"type": "integer", "minimum": 1},
                    "noise": _POS_NUM,
                    "seed": {"type": "integer"},
                    "cohorts": {"type": "integer", "minimum": 1},
                    "n_blobs": {"type": "integer", "minimum": 1},
                },
            },
            "sub_I": {"type": "integer", "minimum": 2},
            "sub_J": {"type": "integer", "minimum": 2},
            "format": {"enum": ["csv", "binary"]},
            "out": {"type": "string"},
        },
    },
    "fit": {
        "type": "object", "additionalProperties": False,
        "required": ["dataset", "prior", "run", "out"],
        "properties": {
            "dataset": {"type": "string"},
            "prior": _PRIOR_SCHEMA,
            "run": _RUN_SCHEMA,
            "out": {"type": "string"},
        },
    },
    "predict": {
        "type": "object", "additionalProperties": False,
        "required": ["samples", "out"],
        "properties": {
            "samples": {"type": "string"},
            "dataset": {"type": "string"},
            "mean_targets": {
                "type": "array",
                "items": {
                    "type": "object", "additionalProperties": False,
                    "required": ["x", "t"],
                    "properties": {
                        "x": {"type": "array",
                              "items": {"type": "number"}, "minItems": 1},
                        "t": {"type": "number"},
                    },
                },
            },
            "tesd_future_times": {"type": "array",
                                  "items": {"type": "number"}},
            "tesd_neighbor_locations": {
                "type": "array",
                "items": {"type": "array", "items": {"type": "number"},
                          "minItems": 1},
            },
            "add_conditional_variance": {"type": "boolean"},
            "out": {"type": "string"},
        },
    },
    "summarize": {
        "type": "object", "additionalProperties": False,
        "required": ["samples", "out"],
        "properties": {
            "samples": {"type": "string"},
            "time_indices": {"type": "array",
                             "items": {"type": "integer", "minimum": 0}},
            "band_pairs": {
                "type": "array",
                "items": {"type": "array",
                          "items": {"type": "integer", "minimum": 0},
                          "minItems": 2, "maxItems": 2},
            },
            "connection": {
                "type": "object", "additionalProperties": False,
                "required": ["quantile"],
                "properties": {
                    "time_index": {"type": "integer", "minimum": 0},
                    "quantile": {"type": "number",
                                 "exclusiveMinimum": 0,
                                 "exclusiveMaximum": 1},
                },
            },
            "score": {
                "type": "object", "additionalProperties": False,
                "required": ["sim_params"],
                "properties": {"sim_params": {"type": "string"}},
            },
            "out": {"type": "string"},
        },
    },
    "bench": {
        "type": "object", "additionalProperties": False,
        "required": ["sizes", "out"],
        "properties": {
            "sizes": {
                "type": "array", "minItems": 1,
                "items": {
                    "type": "object", "additionalProperties": False,
                    "required": ["I", "J", "L", "K"],
                    "properties": {
                        "I": {"type": "integer", "minimum": 1},
                        "J": {"type": "integer", "minimum": 1},
                        "L": {"type": "integer", "minimum": 1},
                        "K": {"type": "integer", "minimum": 1},
                    },
                },
            },
            "repeats": {"type": "integer", "minimum": 1},
            "dense_cap": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer"},
            "out": {"type": "string"},
        },
    },
}


@dataclass
class ConnectionGraph:
    """Thresholded-correlation degree map over the spatial grid."""
    degrees: np.ndarray
    threshold: float
    quantile: float


def connection_graph(corr, q, grid_shape=None):
    """Degree map of the graph |corr| >= (q-quantile of all |corr| values).

    The pooled quantile includes the diagonal (the full I^2 collection of
    absolute correlations); degree counting then excludes self-loops.  The
    'lower' quantile method keeps the threshold an attained value, so ties
    at the threshold stay connected.
    """
    corr = np.asarray(corr, dtype=np.float64)
    I = corr.shape[0]
    if corr.ndim != 2 or corr.shape != (I, I):
        raise ValueError("corr must be square")
    if not (0.0 < q < 1.0):
        raise ValueError("quantile must be inside (0, 1)")
    if not np.allclose(corr, corr.T, atol=1e-8):
        raise ValueError("corr must be symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-6):
        raise ValueError("corr must have unit diagonal")
    a = np.abs(corr)
    threshold = float(np.quantile(a.ravel(), q, method="lower"))
    adj = a >= threshold
    np.fill_diagonal(adj, False)
    degrees = adj.sum(axis=1).astype(np.int64)
    if grid_shape is not None:
        degrees = degrees.reshape(grid_shape)
    return ConnectionGraph(degrees=degrees, threshold=threshold,
                           quantile=float(q))


# ---- commands ----------------------------------------------------------------
def cmd_simulate(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    kind = cfg.get("kind", "process")
    if kind == "process":
        p = SimParams(**cfg.get("sim", {}))
        ds = generate(p, sub_I=cfg.get("sub_I"), sub_J=cfg.get("sub_J"))
        truth = {"kind": "process", "sim": asdict(p),
                 "sub_I": cfg.get("sub_I"), "sub_J": cfg.get("sub_J")}
    else:
        img = dict(cfg.get("image", {}))
        ds = image_demo_dataset(**img)
        truth = {"kind": "image", "image": img}
    fmt = cfg.get("format", "csv")
    path = os.path.join(out, "dataset.csv" if fmt == "csv"
                        else "dataset.bin")
    save_dataset(ds, path, format=fmt)
    _atomic_write(os.path.join(out, "sim_params.json"),
                  json.dumps(truth, indent=2, sort_keys=True), mode="w")
    print("wrote %s and sim_params.json (I=%d J=%d K=%d)"
          % (path, ds.I, ds.J, ds.K))
    return 0


def cmd_fit(cfg):
    ds = load_dataset(cfg["dataset"])
    prior = PriorConfig(**cfg["prior"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    samples = fit(ds, prior, cfg["run"])
    save_samples(samples, out)
    lp = samples.logpost
    report = {
        "draws": samples.n_draws,
        "logpost_summary": {
            "first": float(lp[0]) if lp.size else None,
            "last": float(lp[-1]) if lp.size else None,
            "min": float(lp.min()) if lp.size else None,
            "max": float(lp.max()) if lp.size else None,
            "mean": float(lp.mean()) if lp.size else None,
        },
        "counters": samples.meta["counters"],
        "wall_time": samples.meta["wall_time"],
    }
    _atomic_write(os.path.join(out, "fit_report.json"),
                  json.dumps(report, indent=2, sort_keys=True), mode="w")
    print("fit complete: %d draws in %s" % (samples.n_draws, out))
    return 0


def _require_samples_dir(path):
    if not os.path.isfile(os.path.join(path, "meta.json")):
        raise FileNotFoundError("no posterior samples at %s" % path)


def cmd_predict(cfg):
    _require_samples_dir(cfg["samples"])
    samples = load_samples(cfg["samples"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    wrote = []
    mean_targets = cfg.get("mean_targets", [])
    if mean_targets:
        if "dataset" not in cfg:
            raise ValueError("mean targets need the dataset path")
        ds = load_dataset(cfg["dataset"])
        preds = [predict_mean(samples, ds, (np.array(t["x"]), t["t"]))
                 for t in mean_targets]
        p = os.path.join(out, "mean.csv")
        save_prediction_csv(preds, p)
        wrote.append(p)
    futures = cfg.get("tesd_future_times", [])
    if futures:
        flag = cfg.get("add_conditional_variance", False)
        preds = [predict_tesd_future(samples, t, flag) for t in futures]
        p = os.path.join(out, "tesd_future.csv")
        save_prediction_csv(preds, p)
        wrote.append(p)
    neighbors = cfg.get("tesd_neighbor_locations", [])
    if neighbors:
        preds = [predict_tesd_neighbor(samples, np.array(x))
                 for x in neighbors]
        p = os.path.join(out, "tesd_neighbor.csv")
        save_prediction_csv(preds, p)
        wrote.append(p)
    print("wrote %d prediction file(s)" % len(wrote))
    return 0


def cmd_summarize(cfg):
    _require_samples_dir(cfg["samples"])
    samples = load_samples(cfg["samples"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    pairs = cfg.get("band_pairs")
    est = estimate_tesd(samples,
                        time_indices=cfg.get("time_indices"),
                        band_pairs=([tuple(p) for p in pairs]
                                    if pairs is not None else None))
    _atomic_write(os.path.join(out, "tesd_cov.bin"),
                  np.ascontiguousarray(est.cov_mean, dtype="<f8").tobytes())
    _atomic_write(os.path.join(out, "tesd_corr.bin"),
                  np.ascontiguousarray(est.corr_mean,
                                       dtype="<f8").tobytes())
    lines = ["target,estimate,lo2.5,hi97.5"]
    for jj, tix in enumerate(est.time_indices):
        for p, (i, ip) in enumerate(est.band_pairs):
            mid = est.cov_mean[jj, i, ip]
            lines.append("cov;j=%d;i=%d;ip=%d,%s,%s,%s"
                         % (tix, i, ip, _fmt(mid),
                            _fmt(est.band_lo[jj, p]),
                            _fmt(est.band_hi[jj, p])))
    _atomic_write(os.path.join(out, "tesd_bands.csv"),
                  "\n".join(lines) + "\n", mode="w")
    summary = {
        "model": est.model,
        "time_indices": [int(v) for v in est.time_indices],
        "times": [float(v) for v in est.times],
        "shape": list(est.cov_mean.shape),
        "band_pairs": [list(p) for p in est.band_pairs],
        "files": ["tesd_cov.bin", "tesd_corr.bin", "tesd_bands.csv"],
    }
    if cfg.get("connection"):
        conn = cfg["connection"]
        tix = conn.get("time_index", int(est.time_indices[0]))
        pos = np.where(est.time_indices == tix)[0]
        if pos.size == 0:
            raise ValueError("connection time_index %d is not among the "
                             "summarized times" % tix)
        gs = samples.meta["grids"].get("grid_shape")
        cg = connection_graph(est.corr_mean[int(pos[0])],
                              conn["quantile"],
                              tuple(gs) if gs else None)
        doc = {"quantile": cg.quantile, "threshold": cg.threshold,
               "time_index": tix,
               "degrees": cg.degrees.tolist()}
        _atomic_write(os.path.join(out, "connection.json"),
                      json.dumps(doc, indent=2, sort_keys=True), mode="w")
        summary["files"].append("connection.json")
    if cfg.get("score"):
        with open(cfg["score"]["sim_params"]) as fh:
            doc = json.load(fh)
        if doc.get("kind") != "process":
            raise ValueError("scoring needs process sim params")
        points = np.array(samples.meta["grids"]["points"])
        if points.shape[1] != 1:
            raise ValueError("scoring covers d=1 grids only")
        oracle = TruthOracle(SimParams(**doc["sim"]), points, est.times)
        summary["score"] = tesd_error(est, oracle)
    _atomic_write(os.path.join(out, "summary.json"),
                  json.dumps(summary, indent=2, sort_keys=True), mode="w")
    print("wrote %s" % os.path.join(out, "summary.json"))
    return 0


def _timed(fn, repeats):
    times_ms = []
    peak_kb = 0.0
    for _ in range(repeats):
        tracemalloc.start()
        t0 = time.perf_counter()
        fn()
        times_ms.append(1e3 * (time.perf_counter() - t0))
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        peak_kb = max(peak_kb, peak / 1024.0)
    arr = np.array(times_ms)
    return {"mean_ms": float(arr.mean()), "std_ms": float(arr.std()),
            "min_ms": float(arr.min()), "peak_kb": float(peak_kb)}


def _bench_instance(I, J, L, K, rng):
    ts = np.linspace(0.0, 1.0, J)
    C_t = stationary_kernel(ts, StationaryKernelParams(1.0, 0.5))
    xs = np.sort(rng.gen.uniform(0, 1, I))
    C_x = stationary_kernel(xs, StationaryKernelParams(1.0, 0.4))
    basis = mercer_basis(C_x, L)
    dyn = dynamic_eigenvalues(2.0, L, rng.gen.standard_normal((J, L)))
    ybar = rng.gen.standard_normal(I * J)
    return C_t, basis, dyn, ybar


def cmd_bench(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    repeats = cfg.get("repeats", 3)
    cap = cfg.get("dense_cap", 4096)
    rng = RngState(cfg.get("seed", 0))
    rows = []
    for sz in cfg["sizes"]:
        I, J, L, K = sz["I"], sz["J"], sz["L"], sz["K"]
        if L > I:
            raise ValueError("bench size needs L <= I")
        C_t, basis, dyn, ybar = _bench_instance(I, J, L, K, rng)

        def structured():
            m = Model2Marginal(C_t, basis, dyn, K)
            m.inverse_apply(ybar)
            m.logdet()
        st = _timed(structured, repeats)
        row = {"I": I, "J": J, "L": L, "K": K,
               "m2_structured_ms": st["mean_ms"],
               "m2_structured_stats": st}
        n = I * J
        if n <= cap:
            Ct_j = add_jitter(C_t)
            lam2 = dyn.lam ** 2

            def dense():
                D = np.kron(Ct_j, np.eye(I))
                for j in range(J):
                    blk = (basis.phi * lam2[j]) @ basis.phi.T / K
                    D[j * I:(j + 1) * I, j * I:(j + 1) * I] += blk
                ch = np.linalg.cholesky(D)
                z = np.linalg.solve(ch, ybar)
                np.linalg.solve(ch.T, z)
                2.0 * np.sum(np.log(np.diag(ch)))
            de = _timed(dense, repeats)
            row["dense_oracle_ms"] = de["mean_ms"]
            row["dense_oracle_stats"] = de
            row["ratio"] = de["mean_ms"] / max(st["mean_ms"], 1e-9)
        else:
            row["dense_oracle_ms"] = None
            row["dense_skipped_over_cap"] = cap
        rows.append(row)
    ran_both = [r for r in rows if r.get("dense_oracle_ms")]
    check = None
    if ran_both:
        largest = max(ran_both, key=lambda r: r["I"] * r["J"])
        check = {
            "at": {k: largest[k] for k in ("I", "J", "L", "K")},
            "passed": (largest["m2_structured_ms"]
                       <= largest["dense_oracle_ms"]),
        }
    report = {"repeats": repeats, "dense_cap": cap, "rows": rows,
              "structured_le_dense_at_largest": check}
    _atomic_write(os.path.join(out, "bench_report.json"),
                  json.dumps(report, indent=2, sort_keys=True), mode="w")
    print("wrote %s" % os.path.join(out, "bench_report.json"))
    return 0


_DISPATCH = {"simulate": cmd_simulate, "fit": cmd_fit,
             "predict": cmd_predict, "summarize": cmd_summarize,
             "bench": cmd_bench}


def _apply_overrides(cfg, command, seed, out):
    if out is not None:
        cfg["out"] = out
    if seed is None:
        return
    if command == "simulate":
        slot = "image" if cfg.get("kind") == "image" else "sim"
        cfg.setdefault(slot, {})["seed"] = seed
    elif command == "fit":
        cfg.setdefault("run", {})["seed"] = seed
    elif command == "bench":
        cfg["seed"] = seed
    else:
        print("warning: --seed has no effect on %s" % command,
              file=sys.stderr)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="stkron",
        description="Space-time Kronecker-structured GP: simulate, fit, "
                    "predict, summarize, bench.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _DISPATCH:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="path to the JSON config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
        _apply_overrides(cfg, args.command, args.seed, args.out)
        jsonschema.validate(cfg, _SCHEMAS[args.command])
        return _DISPATCH[args.command](cfg)
    except jsonschema.ValidationError as e:
        loc = "/".join(str(p) for p in e.absolute_path) or "(top level)"
        print("config error at %s: %s" % (loc, e.message), file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print("config is not valid JSON: %s" % e, file=sys.stderr)
        return 2
    except (ValueError, OSError, TypeError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except CapacityError as e:
        print("capacity error: %s" % e, file=sys.stderr)
        return 3
    except NumericalError as e:
        print("numerical error: %s" % e, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
