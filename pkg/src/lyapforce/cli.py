"""Command-line entry point: ``lyapforce <command> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
divergence, 4 failed assertion (e.g. ``lyap --require-chaos`` on a
non-chaotic series). Every command writes a run manifest next to its
outputs; ``lyapforce replay MANIFEST`` re-executes it.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import lyapunov, metrics, models, systems, training
from .errors import ConfigError, DataError, DivergenceError, LyapForceError, NoPositiveExponentError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ASSERT = 0, 2, 3, 4


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, doc) -> None:
    _atomic_write(path, json.dumps(doc, indent=2) + "\n")


def _read_json(path, what: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _read_traj(path, dt=None) -> systems.Trajectory:
    if not Path(path).is_file():
        raise ConfigError(f"no such trajectory file: {path}")
    return systems.read_trajectory_csv(path, dt=dt)


def _sidecar(csv_path) -> dict:
    side = systems.sidecar_path(csv_path)
    return _read_json(side, "sidecar") if side.is_file() else {}


def _write_manifest(path, args, argv, config, inputs, outputs, started) -> None:
    _write_json(
        path,
        {
            "command": args.command,
            "argv": list(argv),
            "config": config,
            "seed": getattr(args, "seed", None),
            "inputs": [str(p) for p in inputs],
            "outputs": [str(p) for p in outputs],
            "version": __version__,
            "duration_s": time.time() - started,
        },
    )


def _prefix(path, suffix) -> Path:
    p = Path(path)
    return p.with_name(p.name + suffix)


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args, argv, started):
    spec = systems.SystemSpec.from_dict(_read_json(args.spec, "system spec"))
    traj = systems.simulate(spec)
    systems.write_trajectory_csv(traj, args.out)
    manifest = _prefix(args.out, ".manifest.json")
    _write_manifest(
        manifest, args, argv, spec.to_dict(), [args.spec], [args.out, systems.sidecar_path(args.out)], started
    )
    print(f"wrote {traj.n_steps} x {traj.n_dims} trajectory to {args.out}")


def cmd_embed(args, argv, started):
    traj = _read_traj(args.data, args.dt)
    if not 0 <= args.column < traj.n_dims:
        raise ConfigError(f"--column {args.column} out of range for {traj.n_dims} columns")
    series = traj.data[:, args.column]
    delay = systems.select_delay(series, args.max_delay, args.bins) if args.delay == "auto" else int(args.delay)
    if args.m == "auto":
        m = systems.select_embedding_dim(series, delay, args.max_m, args.fnn_threshold)
    else:
        m = int(args.m)
    spec = systems.EmbeddingSpec(m, delay)
    emb = systems.delay_embed(series, spec, dt=traj.dt, name=f"{traj.name}-embedded")
    systems.write_trajectory_csv(emb, args.out)
    side = systems.sidecar_path(args.out)
    meta = json.loads(side.read_text())
    meta["embedding"] = {"m": m, "delay": delay}
    _write_json(side, meta)
    config = {"m": m, "delay": delay, "column": args.column}
    _write_manifest(
        _prefix(args.out, ".manifest.json"),
        args,
        argv,
        config,
        [args.data],
        [args.out, systems.sidecar_path(args.out)],
        started,
    )
    print(f"embedding m={m} delay={delay}: {emb.n_steps} rows")


def cmd_lyap(args, argv, started):
    traj = _read_traj(args.data, args.dt)
    theiler = args.theiler
    if theiler is None:
        # embedded series: exclude neighbours within one embedding window
        emb = _sidecar(args.data).get("embedding")
        theiler = int(emb["m"]) * int(emb["delay"]) if emb else lyapunov.DEFAULT_THEILER
    est = lyapunov.estimate_lambda_max(
        traj,
        theiler=theiler,
        k_neighbors=args.k_neighbors,
        max_horizon=args.max_horizon,
        statistic=args.statistic,
    )
    try:
        tau_pred = lyapunov.predictability_time(est.lambda_max, traj.dt)
    except NoPositiveExponentError:
        tau_pred = None
    out = Path(args.out) if args.out else Path(args.data).with_suffix("")
    curve_path = _prefix(out, ".lyap_curve.csv")
    report_path = _prefix(out, ".lyap.json")
    lines = ["delta_n,log_distance"] + [f"{int(d)},{float(v)!r}" for d, v in est.divergence_curve]
    _atomic_write(curve_path, "\n".join(lines) + "\n")
    report = est.to_dict()
    report["tau_pred"] = tau_pred
    _write_json(report_path, report)
    config = {
        "theiler": theiler,
        "k_neighbors": args.k_neighbors,
        "max_horizon": args.max_horizon,
        "statistic": args.statistic,
        "dt": traj.dt,
    }
    _write_manifest(
        _prefix(out, ".lyap.manifest.json"), args, argv, config, [args.data], [curve_path, report_path], started
    )
    tau_txt = "undefined" if tau_pred is None else f"{tau_pred:.4g}"
    flag = " (low confidence)" if est.low_confidence else ""
    print(f"lambda_max = {est.lambda_max:.6g}  tau_pred = {tau_txt} steps  r2 = {est.r2:.4f}{flag}")
    if tau_pred is None and args.require_chaos:
        raise _Fail(EXIT_ASSERT, f"no positive Lyapunov exponent (lambda_max = {est.lambda_max:.4g})")


def _parse_cli_tau(text):
    if text is None or text == "auto":
        return text
    return training._parse_tau(text)


def cmd_train(args, argv, started):
    doc = _read_json(args.config, "train config") if args.config else {}
    traj = _read_traj(args.data, args.dt)
    sched = dict(doc.pop("schedule", {}) or {})
    tau = _parse_cli_tau(args.tau)
    resolved = {}
    if tau == "auto":
        est = lyapunov.estimate_lambda_max(traj)
        tau_pred = lyapunov.predictability_time(est.lambda_max, traj.dt)
        tau = max(1, int(round(tau_pred)))
        resolved = {"lambda_max": est.lambda_max, "tau_pred": tau_pred}
    if tau is not None:
        sched["tau"] = tau
    if args.mode is not None:
        sched["mode"] = args.mode
    if args.tau_jitter_std is not None:
        sched["jitter_std"] = args.tau_jitter_std
    for key in ("seed", "arch", "M", "n_epochs", "lr", "seq_len", "batch_size"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    if args.clip is not None:
        doc["clip"] = {"mode": args.clip, "c": args.clip_c, "always": args.clip_always}
    doc["schedule"] = sched
    config = training.TrainConfig.from_dict(doc)
    data, means, stds = systems.standardize(traj)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"standardization": {"means": means.tolist(), "stds": stds.tolist()}, "dt": traj.dt}
    ckpt, hist = out / "checkpoint.json", out / "history.csv"
    code = EXIT_OK
    try:
        model, readout, history = training.train(config, data)
    except DivergenceError as exc:
        model, readout, history = exc.model, exc.readout, exc.history
        code = EXIT_DIVERGED
        print(f"error: {exc}", file=sys.stderr)
    if model is not None:
        extra["train_config"] = config.to_dict()
        extra.update(resolved)
        models.save_checkpoint(ckpt, model, readout, extra)
    _atomic_write(hist, "epoch,loss\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(history)))
    cfg_doc = config.to_dict()
    cfg_doc.update(resolved)
    _write_manifest(out / "manifest.json", args, argv, cfg_doc, [p for p in (args.config, args.data) if p], [ckpt, hist], started)
    if code:
        raise _Fail(code, "training diverged; last finite checkpoint kept")
    print(f"trained {config.arch} (tau={config.schedule.tau}, mode={config.schedule.mode}) for {len(history)} epochs; final loss {history[-1]:.6g}")


def _standardized_frame(doc, traj):
    st = doc.get("standardization")
    if st is None:
        return systems.standardize(traj)[0].data
    means = np.asarray(st["means"], dtype=float)
    stds = np.asarray(st["stds"], dtype=float)
    if means.shape != (traj.n_dims,):
        raise ConfigError("checkpoint standardization does not match the data dimension")
    return (traj.data - means) / stds


def cmd_evaluate(args, argv, started):
    traj = _read_traj(args.data, args.dt)
    bins = args.bins if args.bins is not None else metrics.default_bins(traj.n_dims)
    if args.generated:
        true = traj.data
        gen_data = _read_traj(args.generated).data
        inputs = [args.data, args.generated]
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs a checkpoint or --generated")
        model, readout, doc = models.load_checkpoint(args.checkpoint)
        true = _standardized_frame(doc, traj)
        inputs = [args.checkpoint, args.data]
        z1 = models.initial_state(model, readout, true[0])
        try:
            gen_data = models.generate(model, readout, z1, args.gen_length).data
        except DivergenceError as exc:
            report = metrics.EvalReport(None, None, bins, args.smooth_sigma, args.gen_length, False)
            _write_json(args.out, report.to_dict())
            _write_manifest(_prefix(args.out, ".manifest.json"), args, argv, report.to_dict(), inputs, [args.out], started)
            raise _Fail(EXIT_DIVERGED, f"free-running rollout diverged: {exc}") from None
    bounded = bool(np.all(np.abs(gen_data) < args.bound))
    report = metrics.EvalReport(
        metrics.d_stsp(true, gen_data, bins),
        metrics.d_h(true, gen_data, args.smooth_sigma),
        int(bins),
        float(args.smooth_sigma),
        int(gen_data.shape[0]),
        bounded,
    )
    _write_json(args.out, report.to_dict())
    _write_manifest(_prefix(args.out, ".manifest.json"), args, argv, report.to_dict(), inputs, [args.out], started)
    print(f"D_stsp = {report.d_stsp:.6g}  D_H = {report.d_h:.6g}  bounded = {bounded}")


def cmd_diagnose(args, argv, started):
    model, readout, doc = models.load_checkpoint(args.checkpoint)
    if args.z1 is not None:
        z1 = np.array([float(v) for v in args.z1.split(",")])
    elif args.data is not None:
        traj = _read_traj(args.data)
        z1 = models.initial_state(model, readout, _standardized_frame(doc, traj)[0])
    elif "z1" in doc:
        z1 = np.asarray(doc["z1"], dtype=float)
    else:
        z1 = np.zeros(model.state_size)
    if z1.shape != (model.state_size,):
        raise ConfigError(f"initial state needs {model.state_size} entries, got {z1.size}")
    # start both diagnostics on the attractor
    z = models.rollout(model, z1, args.warmup + 1)[-1]
    cps = np.unique(np.linspace(1, args.t_max, min(args.t_max, args.n_checkpoints)).astype(int))
    curve = lyapunov.norm_curve(model, z, args.t_max, cps)
    spec = lyapunov.model_spectrum(model, z, warmup=0, T=args.spectrum_steps)
    lam = spec.lambda_max
    label = lyapunov.regime(lam, args.dead_zone)
    curve_path = _prefix(args.out, ".norm_curve.csv")
    spec_path = _prefix(args.out, ".spectrum.json")
    _atomic_write(curve_path, "T,log_norm\n" + "".join(f"{int(t)},{float(v)!r}\n" for t, v in zip(curve.T, curve.log_norm)))
    report = {
        "exponents": spec.exponents.tolist(),
        "lambda_max": lam,
        "T_used": spec.T_used,
        "regime": label,
        "norm_curve_slope": curve.slope(0.5) if len(curve.T) > 2 and np.all(np.isfinite(curve.log_norm)) else None,
    }
    if model.arch == "rnn":
        norm_w, gamma, ok = lyapunov.chaos_necessary_condition(model)
        report["chaos_necessary_condition"] = {"norm_W": norm_w, "gamma": gamma, "satisfied": ok}
    _write_json(spec_path, report)
    config = {
        "t_max": args.t_max,
        "n_checkpoints": args.n_checkpoints,
        "warmup": args.warmup,
        "spectrum_steps": args.spectrum_steps,
        "dead_zone": args.dead_zone,
        "z1": z1.tolist(),
    }
    _write_manifest(
        _prefix(args.out, ".manifest.json"), args, argv, config, [args.checkpoint], [curve_path, spec_path], started
    )
    print(f"regime = {label}  lambda_max = {lam:.6g} per step")


def cmd_replay(args, argv, started):
    doc = _read_json(args.manifest, "manifest")
    recorded = doc.get("argv")
    if not isinstance(recorded, list) or not recorded or recorded[0] == "replay":
        raise ConfigError(f"{args.manifest}: manifest has no replayable argv")
    return main(recorded)


# ---------------------------------------------------------------------------
# Parser


def _int_or_auto(text):
    if text == "auto":
        return text
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {text!r}") from None
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyapforce", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="integrate a benchmark system to CSV")
    g.add_argument("spec", help="SystemSpec JSON")
    g.add_argument("out", help="output CSV (sidecar JSON written alongside)")

    e = sub.add_parser("embed", help="delay-embed one column of a trajectory")
    e.add_argument("data")
    e.add_argument("out")
    e.add_argument("--column", type=int, default=0)
    e.add_argument("--m", type=_int_or_auto, default="auto")
    e.add_argument("--delay", type=_int_or_auto, default="auto")
    e.add_argument("--max-delay", type=int, default=100)
    e.add_argument("--max-m", type=int, default=10)
    e.add_argument("--fnn-threshold", type=float, default=0.01)
    e.add_argument("--bins", type=int, default=64)
    e.add_argument("--dt", type=float)

    ly = sub.add_parser("lyap", help="estimate the maximal Lyapunov exponent from data")
    ly.add_argument("data")
    ly.add_argument("--out", help="output prefix (default: data path without suffix)")
    ly.add_argument("--theiler", type=int, help="default: m*delay for embedded data, else 50")
    ly.add_argument("--k-neighbors", type=int, default=1)
    ly.add_argument("--max-horizon", type=int)
    ly.add_argument("--statistic", choices=("median", "mean"), default="median")
    ly.add_argument("--dt", type=float)
    ly.add_argument("--require-chaos", action="store_true", help="exit 4 unless lambda_max > 0")

    t = sub.add_parser("train", help="train a model with sparsely forced BPTT")
    t.add_argument("config", nargs="?", help="TrainConfig JSON (optional)")
    t.add_argument("data")
    t.add_argument("out_dir")
    t.add_argument("--tau", help="forcing interval: integer, 'inf' or 'auto' (predictability time)")
    t.add_argument("--mode", choices=("sparse-tf", "zero-reset", "forward-iterate", "none"))
    t.add_argument("--tau-jitter-std", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--arch", choices=sorted(models.PARAM_TYPES))
    t.add_argument("--M", type=int)
    t.add_argument("--n-epochs", dest="n_epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seq-len", dest="seq_len", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--clip", choices=("euclidean", "infinity"))
    t.add_argument("--clip-c", type=float, default=1.0)
    t.add_argument("--clip-always", action="store_true", help="rescale to the clip norm at every update")
    t.add_argument("--dt", type=float)

    ev = sub.add_parser("evaluate", help="free-run a checkpoint and score it against data")
    ev.add_argument("checkpoint", nargs="?")
    ev.add_argument("data")
    ev.add_argument("out", help="EvalReport JSON")
    ev.add_argument("--generated", help="score this trajectory CSV instead of a model rollout")
    ev.add_argument("--gen-length", type=int, default=100000)
    ev.add_argument("--bins", type=int)
    ev.add_argument("--smooth-sigma", type=float, default=metrics.DEFAULT_SMOOTH_SIGMA)
    ev.add_argument("--bound", type=float, default=10.0, help="|value| bound for the bounded flag")
    ev.add_argument("--dt", type=float)

    d = sub.add_parser("diagnose", help="Jacobian-norm curve and Lyapunov spectrum of a checkpoint")
    d.add_argument("checkpoint")
    d.add_argument("out", help="output prefix")
    d.add_argument("--z1", help="comma-separated initial state")
    d.add_argument("--data", help="start from the inverted first observation of this CSV")
    d.add_argument("--t-max", type=int, default=1000)
    d.add_argument("--n-checkpoints", type=int, default=100)
    d.add_argument("--warmup", type=int, default=1000)
    d.add_argument("--spectrum-steps", type=int, default=10000)
    d.add_argument("--dead-zone", type=float, default=0.01)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    return p


_COMMANDS = {
    "generate": cmd_generate,
    "embed": cmd_embed,
    "lyap": cmd_lyap,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    started = time.time()
    try:
        result = _COMMANDS[args.command](args, argv, started)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (LyapForceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if result is None else int(result)


if __name__ == "__main__":
    sys.exit(main())
