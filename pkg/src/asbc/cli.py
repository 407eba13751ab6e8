"""Command-line front end.

Exit codes: 0 ok, 2 bad input or config, 3 model mismatch, 4 missing
artifact, 5 numerical failure, 1 any other pipeline error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import seeding
from .config import RunConfig
from .errors import (AsbcError, ConfigError, DomainError, EmptyInput, FormatError, InsufficientData,
                     InsufficientLength, ModelMismatch, NumericalError, PipelineError, PriorRejectionError,
                     ShapeError)

log = logging.getLogger("asbc")

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_MISMATCH, EXIT_MISSING, EXIT_NUMERICAL = 0, 1, 2, 3, 4, 5


class MissingArtifact(AsbcError, FileNotFoundError):
    pass


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage, self.exc = stage, exc


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.exc
    if isinstance(exc, (MissingArtifact, FileNotFoundError)):
        return EXIT_MISSING
    if isinstance(exc, ModelMismatch):
        return EXIT_MISMATCH
    if isinstance(exc, (NumericalError, PriorRejectionError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (FormatError, EmptyInput, InsufficientLength, InsufficientData, DomainError,
                        ShapeError, ConfigError)):
        return EXIT_INPUT
    return EXIT_ERROR


class stage:
    """Context manager naming the pipeline stage in error messages."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage: %s", self.name)

    def __exit__(self, et, exc, tb):
        if exc is not None and isinstance(exc, (AsbcError, RuntimeError, ValueError)) \
                and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _need(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return Path(path)


def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(_need(Path(args.config), "config")) if args.config else RunConfig()
    over = {"seed": args.seed, "threads": args.threads}
    for key in ("residual", "R"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    return cfg.with_overrides(**over)


# -- commands ------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, out: Path) -> int:
    from .synth import synthetic_pairs, write_tracks_csv, write_truth_csv
    with stage("synth"):
        pairs = synthetic_pairs(args.pairs, args.duration, cfg.dt, cfg.spec, cfg.seed)
        write_tracks_csv(pairs, out / "synthetic_tracks.csv", cfg.frame_rate, cfg.downsample_factor)
        write_truth_csv(pairs, cfg.spec, out / "synthetic_truth.csv")
    print(f"wrote {len(pairs)} pairs to {out / 'synthetic_tracks.csv'}")
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig, out: Path) -> int:
    from .data import SPLITS, downsample, extract_segments, read_tracks, split_by_follower, write_segments
    tracks = []
    with stage("read"):
        for p in args.inputs:
            tracks.extend(downsample(t, cfg.downsample_factor)
                          for t in read_tracks(_need(Path(p), "input CSV"), cfg.frame_rate))
    with stage("segment"):
        segments = extract_segments(tracks, cfg.t_min, cfg.eps_kin)
        if not segments:
            raise InsufficientData(f"no leader-follower segment of at least {cfg.t_min} s")
        split = split_by_follower(segments, cfg.split_ratios, cfg.seed)
    meta = {"dt": segments[0].dt, "t_min": cfg.t_min, "seed": cfg.seed}
    manifest = {"config_hash": _config_hash(cfg), "inputs": sorted(_sha(Path(p)) for p in args.inputs),
                "counts": {}, "files": {}}
    for name in SPLITS:
        ids = set(split.ids(name))
        segs = [s for s in segments if s.follower_id in ids]
        path = out / f"segments_{name}.csv"
        write_segments(path, segs, dict(meta, split=name))
        manifest["counts"][name] = {"followers": len(ids), "segments": len(segs)}
        manifest["files"][path.name] = _sha(path)
    (out / "split.json").write_text(split.to_json() + "\n")
    manifest["files"]["split.json"] = _sha(out / "split.json")
    _write_json(out / "manifest.json", manifest)
    digest = _sha(out / "manifest.json")
    print(f"segments: {manifest['counts']}  manifest sha256 {digest[:16]}")
    return EXIT_OK


def _config_hash(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    d.pop("threads", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _segments(path: Path):
    from .data import read_segments
    segs, meta = read_segments(_need(path, "segment file"))
    if not segs:
        raise InsufficientData(f"{path}: no segments")
    return segs, meta


def cmd_build_bank(args, cfg: RunConfig, out: Path) -> int:
    from .bank import LeaderBank
    segs, meta = _segments(Path(args.segments or out / "segments_train.csv"))
    with stage("build-bank"):
        if abs(meta.get("dt", cfg.dt) - cfg.dt) > 1e-9:
            raise ConfigError(f"segment dt {meta.get('dt')} differs from config dt {cfg.dt}")
        bank = LeaderBank.from_segments(segs, cfg.bank(), seeding.stream(cfg.seed, "bank"), cfg.K_rho, cfg.eps_rho)
        bank.save(out / "bank.npz")
    print(f"bank: {len(bank.real)} real, {len(bank.syn)} synthetic windows -> {out / 'bank.npz'}")
    return EXIT_OK


def observed_windows(segments, target_len: int) -> np.ndarray:
    """One conditioning window per follower: the first ``target_len`` steps of its first segment."""
    from .encoder import pad_or_crop
    seen, out = set(), []
    for s in segments:
        if s.follower_id in seen:
            continue
        seen.add(s.follower_id)
        out.append(pad_or_crop(s.states[:target_len], target_len)[0])
    return np.stack(out)


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    from .bank import LeaderBank
    from .loop import run_active_loop
    segs, _ = _segments(Path(args.segments or out / "segments_train.csv"))
    bank_path = Path(args.bank or out / "bank.npz")
    with stage("load-bank"):
        bank = LeaderBank.load(_need(bank_path, "leader bank"))
    log_path = out / "run_log.jsonl"
    log_path.write_text("")
    with stage("active-loop"):
        state = run_active_loop(cfg.loop(args.variant), cfg.spec, bank, observed_windows(segs, cfg.encoder_target_len),
                                cfg.seed, cfg.encoder(), cfg.flow(), checkpoint_dir=out / "checkpoints",
                                run_log=log_path)
    state.model.save(out / "model.pt", dict(state.model.provenance, config_hash=_config_hash(cfg)))
    print(f"trained {state.round} round(s), {state.simulator.calls} simulations; "
          f"hold-out NLL {state.history[-1]:.4f} -> {out / 'model.pt'}")
    return EXIT_OK


def _load_model(path: Path, cfg: RunConfig, args):
    from .flow import PosteriorModel
    with stage("load-model"):
        model = PosteriorModel.load(_need(path, "model bundle"))
    want = getattr(args, "residual", None)
    if want is not None and model.residual.kind.value != want:
        raise ModelMismatch(f"model residual '{model.residual.kind.value}' != requested '{want}'")
    if model.encoder_cfg.target_len != cfg.encoder_target_len:
        raise ModelMismatch(f"model conditioning length {model.encoder_cfg.target_len} "
                            f"!= config encoder_target_len {cfg.encoder_target_len}")
    return model


def cmd_infer(args, cfg: RunConfig, out: Path) -> int:
    from .evaluation import conditioning_window
    model = _load_model(Path(args.model or out / "model.pt"), cfg, args)
    segs, _ = _segments(Path(args.segments or out / "segments_test.csv"))
    n = args.n or cfg.eval_n_samples
    ecfg = cfg.eval()
    rows, timing = [], []
    names = list(model.residual.param_names)
    with stage("infer"):
        for i, seg in enumerate(segs):
            t0 = time.perf_counter()
            x, valid = conditioning_window(seg, ecfg)
            with torch.no_grad():
                c = model.context(x, valid=valid)
                th = model.sample_theta(c, n, seeding.torch_generator(cfg.seed, "infer", i))
            timing.append(time.perf_counter() - t0)
            df = pd.DataFrame(th, columns=names)
            df.insert(0, "sample", np.arange(n))
            df.insert(0, "leader_id", seg.leader_id)
            df.insert(0, "follower_id", seg.follower_id)
            df.insert(0, "pair_id", i)
            rows.append(df)
    pd.concat(rows).to_csv(out / "posterior_samples.csv", index=False, float_format="%.10g")
    _write_json(out / "infer_timing.json", {"pairs": len(segs), "n_samples": n,
                                            "seconds_per_pair": timing, "total_seconds": float(sum(timing))})
    print(f"{len(segs)} pair(s) x {n} samples -> {out / 'posterior_samples.csv'} "
          f"({np.mean(timing) * 1e3:.1f} ms/pair)")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> int:
    from .evaluation import error_distribution_data, evaluate_pairs, write_summary_json, write_window_csv
    from .sim import sample_prior_array
    segs, _ = _segments(Path(args.segments or out / "segments_test.csv"))
    ecfg = cfg.eval()
    if args.n:
        from dataclasses import replace
        ecfg = replace(ecfg, n_samples=args.n)
    with stage("evaluate"):
        if args.prior_predictive:
            rng = seeding.stream(cfg.seed, "prior-predictive")
            thetas = [sample_prior_array(cfg.spec, ecfg.n_samples, rng) for _ in segs]
            results = evaluate_pairs(None, segs, ecfg, cfg.seed, thetas, cfg.spec)
        else:
            model = _load_model(Path(args.model or out / "model.pt"), cfg, args)
            results = evaluate_pairs(model, segs, ecfg, cfg.seed)
    prefix = "prior_" if args.prior_predictive else ""
    write_window_csv(results, out / f"{prefix}eval_windows.csv")
    summary = write_summary_json(results, out / f"{prefix}eval_summary.json", [cfg.seed], cfg.to_dict())
    error_distribution_data(results).to_csv(out / f"{prefix}error_distribution.csv", index=False,
                                            float_format="%.10g")
    print(f"{summary['n_windows']} windows over {summary['n_pairs']} pairs; "
          f"mean ES {summary['mean']['es_mean']:.4f}, flagged rollouts {summary['n_flagged']}")
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig, out: Path) -> int:
    from .sim import ParamVector, integrate, sample_residuals
    segs, _ = _segments(Path(args.segments or out / "segments_test.csv"))
    if not 0 <= args.pair < len(segs):
        raise ConfigError(f"--pair {args.pair} out of range (0..{len(segs) - 1})")
    seg = segs[args.pair]
    theta = np.array([float(t) for t in args.theta.split(",")])
    if len(theta) != cfg.spec.dim:
        raise ConfigError(f"--theta needs {cfg.spec.dim} values {cfg.spec.param_names}")
    with stage("simulate"):
        ParamVector.from_array(theta)
        n = len(seg) if args.steps is None else min(args.steps, len(seg))
        rngs = [seeding.stream(cfg.seed, "simulate", k) for k in range(args.n)]
        resid = sample_residuals(cfg.spec, np.repeat(theta[None], args.n, 0), n, seg.dt, rngs)
        states, accel, flags = integrate(np.repeat(theta[None], args.n, 0), seg.states[0][None],
                                         seg.leader[:n, 0][None], seg.dt, resid)
    frames = [pd.DataFrame({"sample": k, "step": np.arange(n), "s": states[k, :, 0], "v": states[k, :, 1],
                            "dv": states[k, :, 2], "a": accel[k], "residual": resid[k]}) for k in range(args.n)]
    header = {"theta": theta.tolist(), "param_names": list(cfg.spec.param_names), "seed": cfg.seed,
              "residual": cfg.spec.kind.value, "pair": args.pair, "dt": seg.dt, "flagged": flags.tolist()}
    path = out / "rollouts.csv"
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        pd.concat(frames).to_csv(fh, index=False, float_format="%.10g")
    print(f"{args.n} rollout(s) of {n} steps -> {path} ({int(flags.sum())} flagged)")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig, out: Path) -> int:
    from . import plotting
    from .evaluation import convergence_data
    logs = [Path(p) for p in args.run_logs] or [out / "run_log.jsonl"]
    frames = []
    for p in logs:
        recs = [json.loads(line) for line in _need(p, "run log").read_text().splitlines() if line.strip()]
        df = convergence_data(recs)
        df.insert(0, "run", p.stem if len(logs) > 1 else "run")
        frames.append(df)
    conv = pd.concat(frames, ignore_index=True)
    conv.to_csv(out / "convergence.csv", index=False, float_format="%.10g")
    made = [plotting.convergence(conv if len(logs) > 1 else conv.drop(columns="run"), out / "convergence.png")]
    ed = Path(args.errors) if args.errors else out / "error_distribution.csv"
    if ed.exists():
        made.append(plotting.error_distribution(pd.read_csv(ed), out / "error_distribution.png"))
    if args.ablation:
        made.append(plotting.ablation(pd.read_csv(_need(Path(args.ablation), "ablation table")),
                                      out / "ablation.png"))
    print(f"{len(conv)} convergence row(s) -> {out / 'convergence.csv'}; figures: "
          + ", ".join(p.name for p in made))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "build-bank": cmd_build_bank, "train": cmd_train,
    "infer": cmd_infer, "simulate": cmd_simulate, "evaluate": cmd_evaluate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--threads", type=int, help="cap on torch worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="asbc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate closed-loop synthetic trajectories")
    s.add_argument("--pairs", type=int, default=100)
    s.add_argument("--duration", type=float, default=60.0, help="seconds per pair")

    s = sub.add_parser("ingest", parents=[common], help="CSV tracks -> segment files and split")
    s.add_argument("inputs", nargs="+")

    s = sub.add_parser("build-bank", parents=[common], help="leader-window bank from training segments")
    s.add_argument("--segments")

    s = sub.add_parser("train", parents=[common], help="warm-up and active rounds")
    s.add_argument("--segments")
    s.add_argument("--bank")
    s.add_argument("--rounds", dest="R", type=int)
    s.add_argument("--residual", choices=["iid_gaussian", "matern52"])
    s.add_argument("--variant", default="full", choices=["full", "prior_only", "theta_only"])

    s = sub.add_parser("infer", parents=[common], help="posterior samples per pair")
    s.add_argument("--model")
    s.add_argument("--segments")
    s.add_argument("--n", type=int)
    s.add_argument("--residual", choices=["iid_gaussian", "matern52"])

    s = sub.add_parser("simulate", parents=[common], help="roll out given parameters under a recorded leader")
    s.add_argument("--segments")
    s.add_argument("--pair", type=int, default=0)
    s.add_argument("--theta", required=True, help="comma-separated parameter vector")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--steps", type=int)
    s.add_argument("--residual", choices=["iid_gaussian", "matern52"])

    s = sub.add_parser("evaluate", parents=[common], help="windowed RMSE / Energy Score")
    s.add_argument("--model")
    s.add_argument("--segments")
    s.add_argument("--n", type=int)
    s.add_argument("--residual", choices=["iid_gaussian", "matern52"])
    s.add_argument("--prior-predictive", action="store_true", help="use prior draws instead of a model")

    s = sub.add_parser("report", parents=[common], help="convergence / error tables and figures")
    s.add_argument("run_logs", nargs="*")
    s.add_argument("--errors", help="error_distribution.csv from evaluate")
    s.add_argument("--ablation", help="CSV with variant, seed and holdout_nll columns")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        torch.set_num_threads(cfg.threads)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (AsbcError, StageError, FileNotFoundError, RuntimeError, ValueError) as exc:
        code = exit_code(exc)
        print(f"asbc {args.command}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
