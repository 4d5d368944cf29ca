"""Command line: gen, train, eval, deploy, report.

Every command after ``gen`` reads a run manifest (JSON)::

    {
      "schema": "adasched.manifest/1",
      "jobs": "jobs.json", "fusion": "fusion.json", "requests": "requests.json",
      "checkpoint": "qnet.json",          # written by train, read by eval/deploy
      "seed": 0,
      "threshold_pct": 15.0,
      "train": {"num_steps": 3, "num_runs": 20, "mode": "ddqn"},
      "deploy": {"intensity": 0.3, "seed": 0, "rho": 0.5, "delta_sl_ms": null}
    }

Input paths resolve against the manifest's directory. Outputs (including the
checkpoint) go to the manifest's directory unless ``--out`` or
``$ADASCHED_OUT`` says otherwise.
Exit status: 0 ok, 1 invalid input or refused request, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .qlearn import CheckpointError, load_checkpoint, save_checkpoint
from .rollout import (
    DEFAULT_THRESHOLD,
    compare,
    edf_baseline,
    infer_plan,
    plan_from_dict,
    plan_json,
    read_report_csv,
)
from .safesched import ControllerConfig, PlanRejected, deploy
from .simenv import write_trace
from .taskgraph import jobset_from_dict, jobset_to_dict
from .trainer import TrainConfig, Trainer, write_log
from .workload import (
    build_benchmark_suite,
    enumerate_requests,
    fusion_profiles_from_dict,
    fusion_profiles_to_dict,
    is_gray_walk,
    schedule_from_dict,
    schedule_to_dict,
    synthesize_fusion_profile,
)

log = logging.getLogger("adasched")

MANIFEST_SCHEMA = "adasched.manifest/1"
DEPLOY_SCHEMA = "adasched.deploy/1"
OUT_ENV = "ADASCHED_OUT"

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ManifestError(ValueError):
    pass


def _dump(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


def _read_json(path: Path, what: str):
    if not path.is_file():
        raise ManifestError(f"{what} file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


class Manifest:
    """Parsed and validated run manifest."""

    def __init__(self, path: str | Path, out: str | None = None, need_checkpoint: bool = False):
        self.path = Path(path)
        data = _read_json(self.path, "manifest")
        if not isinstance(data, dict) or data.get("schema") != MANIFEST_SCHEMA:
            raise ManifestError(f"{self.path}: expected schema {MANIFEST_SCHEMA!r}")
        self.data = data
        self.base = self.path.parent
        for key in ("jobs", "fusion", "requests"):
            if key not in data:
                raise ManifestError(f"{self.path}: missing key {key!r}")
        try:
            self.jobs = jobset_from_dict(_read_json(self.resolve(data["jobs"]), "jobs"))
            profiles = fusion_profiles_from_dict(_read_json(self.resolve(data["fusion"]), "fusion"))
            self.requests = schedule_from_dict(_read_json(self.resolve(data["requests"]), "requests"))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{self.path}: malformed input ({exc!r})") from None
        self.profiles = {p.spec_id: p for p in profiles}
        if set(self.profiles) != {j.id for j in self.jobs}:
            raise ManifestError("fusion profiles do not cover exactly the job set")
        for i, r in enumerate(self.requests):
            if len(r.entries) != len(self.jobs):
                raise ManifestError(f"request {i} has {len(r.entries)} entries for {len(self.jobs)} jobs")
        self.seed = int(data.get("seed", 0))
        self.threshold = float(data.get("threshold_pct", DEFAULT_THRESHOLD))
        self.train_cfg = self._train_config(data.get("train", {}))
        self.deploy_opts = data.get("deploy", {})
        self.out = Path(out or os.environ.get(OUT_ENV) or self.base)
        ck = Path(data.get("checkpoint", "qnet.json"))
        self.checkpoint = ck if ck.is_absolute() else self.out / ck
        if need_checkpoint and not self.checkpoint.is_file():
            raise ManifestError(f"checkpoint not found: {self.checkpoint}")

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def _train_config(self, overrides: dict) -> TrainConfig:
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(overrides) - known
        if unknown:
            raise ManifestError(f"unknown train options: {sorted(unknown)}")
        return TrainConfig(**{"seed": self.seed, **overrides})

    def load_net(self):
        n = 2
        D = max(j.depth for j in self.jobs)
        return load_checkpoint(self.checkpoint, state_size=n + 2 * len(self.jobs), action_space=(n, D))


# -- commands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    jobs = build_benchmark_suite(args.seed)[: args.jobs]
    mults = tuple(int(m) for m in args.multipliers.split(","))
    requests = enumerate_requests(jobs, mults, frames=args.frames)
    if not is_gray_walk(requests):
        raise RuntimeError("request schedule is not a Gray walk")
    profiles = [synthesize_fusion_profile(j) for j in jobs]
    _dump(out / "jobs.json", jobset_to_dict(jobs))
    _dump(out / "fusion.json", fusion_profiles_to_dict(profiles))
    _dump(out / "requests.json", schedule_to_dict(requests, jobs))
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "jobs": "jobs.json", "fusion": "fusion.json", "requests": "requests.json",
        "checkpoint": "qnet.json",
        "seed": args.seed,
        "threshold_pct": DEFAULT_THRESHOLD,
        "train": {"num_steps": 3, "num_runs": 20, "mode": "ddqn"},
        "deploy": {"intensity": 0.3, "seed": args.seed, "rho": 0.5, "delta_sl_ms": None},
    }
    _dump(out / "manifest.json", manifest)
    print(f"wrote {len(jobs)} jobs and {len(requests)} requests to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    m = Manifest(args.manifest, args.out)
    cfg = m.train_cfg
    over = {k: v for k, v in (("num_steps", args.num_steps), ("num_runs", args.num_runs),
                              ("mode", args.mode), ("seed", args.seed)) if v is not None}
    if over:
        cfg = TrainConfig(**{**asdict(cfg), **over})
    trainer = Trainer(m.jobs, m.requests, cfg, m.profiles)
    state_dir = m.out / "train_state"
    log_path = m.out / "train_log.jsonl"
    if args.resume:
        if not (state_dir / "trainer_state.json").is_file():
            raise ManifestError(f"--resume: no saved state in {state_dir}")
        trainer.load_state(state_dir)
        with open(log_path) as fh:
            trainer.log = [json.loads(line) for line in fh][1:]
    meta = {"config": asdict(cfg), "requests": len(m.requests), "jobs": len(m.jobs)}
    ckpt_dir = m.out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_epoch(tr: Trainer) -> None:
        save_checkpoint(tr.net, ckpt_dir / f"epoch_{tr.epoch:03d}.json", {**meta, "epoch": tr.epoch})
        write_log(log_path, tr.log, meta)
        tr.save_state(state_dir)
        print(f"epoch {tr.epoch}: moving-average reward {tr.epoch_averages[-1]:.4f}")

    net, _ = trainer.fit(on_epoch)
    save_checkpoint(net, m.checkpoint, {**meta, "epoch": trainer.epoch})
    status = "converged" if trainer.converged() else "completed"
    print(f"training {status} after {trainer.epoch} epochs ({trainer.episode} episodes)")
    return EXIT_OK


def _eval_outputs(m: Manifest, net):
    plans, base = [], []
    for req in m.requests:
        plans.append(infer_plan(net, m.jobs, req, m.profiles))
        base.append(edf_baseline(m.jobs, req, m.profiles))
    return plans, base


def cmd_eval(args) -> int:
    m = Manifest(args.manifest, args.out, need_checkpoint=True)
    th = args.threshold if args.threshold is not None else m.threshold
    net = m.load_net()
    plans, base = _eval_outputs(m, net)
    plan_dir = m.out / "plans"
    plan_dir.mkdir(parents=True, exist_ok=True)
    for i, (p, b) in enumerate(zip(plans, base)):
        p.meta.update(request_id=i, admitted=p.miss_pct < th, threshold_pct=th)
        (plan_dir / f"rl_{i:03d}.json").write_text(plan_json(p))
        (plan_dir / f"edf_{i:03d}.json").write_text(plan_json(b))
    report = compare(plans, base, m.requests, m.jobs, th)
    (m.out / "report.csv").write_text(report.to_csv())
    print(f"{len(report.rows)} requests: rl better on {report.rl_wins}, ties {report.ties}, "
          f"edf better on {report.edf_wins}; admitted {sum(r.admitted for r in report.rows)}")
    return EXIT_OK


def cmd_deploy(args) -> int:
    m = Manifest(args.manifest, args.out)
    if not 0 <= args.request < len(m.requests):
        raise ManifestError(f"request id {args.request} outside [0, {len(m.requests)})")
    plan_path = m.out / "plans" / f"rl_{args.request:03d}.json"
    if plan_path.is_file():
        plan = plan_from_dict(json.loads(plan_path.read_text()))
    else:
        if not m.checkpoint.is_file():
            raise ManifestError(f"no plan at {plan_path} and no checkpoint at {m.checkpoint}")
        plan = infer_plan(m.load_net(), m.jobs, m.requests[args.request], m.profiles)
    opts = m.deploy_opts
    intensity = args.intensity if args.intensity is not None else float(opts.get("intensity", 0.3))
    seed = args.seed if args.seed is not None else int(opts.get("seed", m.seed))
    cfg = ControllerConfig(rho=float(opts.get("rho", 0.5)), delta_sl=opts.get("delta_sl_ms"))
    th = args.threshold if args.threshold is not None else m.threshold
    res = deploy(plan, m.jobs, intensity, seed, cfg, th=th, force=args.force)
    stem = m.out / "deploy" / f"req{args.request:03d}_seed{seed}"
    stem.parent.mkdir(parents=True, exist_ok=True)
    meta = {"request_id": args.request, "intensity": intensity, "seed": seed}
    write_trace(f"{stem}_off.jsonl", res.without_safe.records, {**meta, "safe_mode": False})
    write_trace(f"{stem}_on.jsonl", res.with_safe.records, {**meta, "safe_mode": True})
    summary = {"schema": DEPLOY_SCHEMA, "request_id": args.request, "threshold_pct": th, **res.summary(th)}
    _dump(Path(f"{stem}_summary.json"), summary)
    print(f"<|G|={summary['instances']}, predicted {summary['predicted_pct']:.0f}%> "
          f"deployed {summary['deployed_misses']} ({summary['deployed_pct']:.0f}%), "
          f"safe mode {summary['safe_misses']} ({summary['safe_pct']:.0f}%)")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.dir or os.environ.get(OUT_ENV) or ".")
    report = root / "report.csv"
    if not report.is_file():
        raise ManifestError(f"no report.csv in {root} (run eval first)")
    rows = read_report_csv(report.read_text())
    deploys = sorted((root / "deploy").glob("*_summary.json")) if (root / "deploy").is_dir() else []
    lines = ["# schema: adasched.summary/1", "## miss% and lateness by throughput index"]
    w_rows = [["ti", "rl_miss_pct", "edf_miss_pct", "rl_lateness_ms", "edf_lateness_ms", "admitted"]]
    for r in rows:
        w_rows.append([r["ti"], r["rl_miss_pct"], r["edf_miss_pct"], r["rl_lateness_ms"],
                       r["edf_lateness_ms"], r["admitted"]])
    lines += [",".join(x) for x in w_rows]
    lines.append("## deployments")
    lines.append("request_id,seed,instances,predicted_pct,deployed_misses,deployed_pct,safe_misses,safe_pct")
    for p in deploys:
        s = json.loads(p.read_text())
        lines.append(",".join(str(s[k]) for k in ("request_id", "seed", "instances", "predicted_pct",
                                                  "deployed_misses", "deployed_pct", "safe_misses", "safe_pct")))
    text = "\n".join(lines) + "\n"
    (root / "summary.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adasched", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write benchmark jobs, fusion profiles, request schedule and a manifest")
    g.add_argument("--seed", type=int, default=0, help="suite seed (default 0)")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    g.add_argument("--jobs", type=int, default=4, choices=range(1, 5), help="number of suite jobs (default 4)")
    g.add_argument("--multipliers", default="1,2,3", help="period multipliers per job (default 1,2,3)")
    g.add_argument("--frames", type=int, default=1, help="frames per release (default 1)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the Q-network; writes checkpoints and a training log")
    t.add_argument("manifest")
    t.add_argument("--out")
    t.add_argument("--num-steps", type=int, help="epochs (overrides manifest)")
    t.add_argument("--num-runs", type=int, help="episodes per request (overrides manifest)")
    t.add_argument("--mode", choices=("dqn", "ddqn"))
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from <out>/train_state")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="infer plans for every request, run the EDF baseline, write report.csv")
    e.add_argument("manifest")
    e.add_argument("--out")
    e.add_argument("--threshold", type=float, help="admission threshold in percent (default from manifest, 15)")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("deploy", help="paired safe-off/safe-on deployment of one request's plan")
    d.add_argument("manifest")
    d.add_argument("--request", type=int, required=True, help="request id")
    d.add_argument("--out")
    d.add_argument("--intensity", type=float, help="interference intensity (default 0.3)")
    d.add_argument("--seed", type=int, help="interference seed")
    d.add_argument("--threshold", type=float)
    d.add_argument("--force", action="store_true", help="deploy even if the plan fails admission")
    d.set_defaults(func=cmd_deploy)

    r = sub.add_parser("report", help="collect report.csv and deployment summaries into summary.csv")
    r.add_argument("dir", nargs="?", help=f"output directory (default ${OUT_ENV} or .)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ManifestError, CheckpointError, PlanRejected) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
