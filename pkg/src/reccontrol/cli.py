"""Command line: ``gen``, ``train``, ``eval`` and ``report``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.

A run directory holds ``scenario.json``, ``manifest.json``,
``policy.ckpt``, ``audit.jsonl``, ``kpi.json`` and ``kpi.txt``; it is
self-contained, so ``eval --run DIR`` reproduces ``kpi.json`` from it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .control import TrainConfig, load_checkpoint, save_checkpoint
from .errors import MissingArtifacts, ParseError, RecError, ValidationError
from .kpi import kpis_from_exchange, normalize_report, render_table, report_json
from .pipeline import run_episode, train_policy
from .scenario import (bundled_scenario_path, dumps_scenario, format_utc, generate_synthetic,
                       load_scenario)
from .telemetry import OBS_DIM, AuditLog
from .twin import FaultConfig

log = logging.getLogger("reccontrol")

RUN_FILES = ("scenario.json", "manifest.json", "policy.ckpt", "audit.jsonl", "kpi.json", "kpi.txt")
FAULT_KEYS = ("dropout_rate", "noise_sigma", "skew_s", "fault_seed")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    scenario_hash: str
    train_config: dict
    config_hash: str
    faults: dict
    code_version: str
    seeds: dict
    artifacts: tuple
    created_utc: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["artifacts"] = list(self.artifacts)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def resolve_scenario(ref: str):
    """A path to a scenario document, or the name of a bundled one."""
    p = Path(ref)
    if not p.exists() and bundled_scenario_path(ref).exists():
        p = bundled_scenario_path(ref)
    if not p.exists():
        raise ParseError(f"scenario not found: {ref}")
    return load_scenario(p)


def fault_config(d: dict) -> FaultConfig | None:
    cfg = FaultConfig(d.get("dropout_rate", 0.0), d.get("noise_sigma", 0.0), d.get("skew_s", 0.0),
                      int(d.get("fault_seed", 0)))
    return cfg if cfg.active else None


def _faults_dict(f: FaultConfig | None) -> dict:
    if f is None:
        return {"dropout_rate": 0.0, "noise_sigma": 0.0, "skew_s": 0.0, "fault_seed": 0}
    return {"dropout_rate": f.dropout_rate, "noise_sigma": f.noise_sigma, "skew_s": f.skew_s,
            "fault_seed": f.seed}


def evaluate(scenario, controller: str, policy=None, faults=None, audit_path=None) -> dict:
    """One deterministic episode plus the ``none`` baseline; returns the kpi document."""
    audit = AuditLog(audit_path) if audit_path is not None else None
    try:
        res = run_episode(scenario, controller, policy=policy, faults=faults, audit=audit)
    finally:
        if audit is not None:
            audit.close()
    base = run_episode(scenario, "none", faults=faults) if controller != "none" or faults else res
    report = normalize_report(kpis_from_exchange(res.exchange, scenario),
                              kpis_from_exchange(base.exchange, scenario))
    doc = report.to_dict()
    doc["controller"] = controller
    doc["episode"] = {
        "unmet_kwh": res.unmet_kwh,
        "baseline_unmet_kwh": base.unmet_kwh,
        "interventions": res.interventions,
        "interventions_by_reason": dict(sorted(res.interventions_by_reason.items())),
        "min_completeness": res.min_completeness,
        "mean_completeness": sum(res.completeness) / max(len(res.completeness), 1),
        "missing_observations": res.missing_observations,
    }
    return doc, report


def _write_report(out: Path, doc: dict, report) -> None:
    (out / "kpi.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / "kpi.txt").write_text(render_table(report), encoding="utf-8")


def run_train(scenario_ref: str, out_dir, cfg: TrainConfig, faults: FaultConfig | None = None,
              progress=None) -> Path:
    """Train, run the greedy evaluation episode and persist a run directory."""
    t0 = time.monotonic()
    scenario = resolve_scenario(scenario_ref)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scn_bytes = dumps_scenario(scenario).encode("utf-8")
    (out / "scenario.json").write_bytes(scn_bytes)
    policy, history = train_policy(scenario, cfg, faults, progress=progress)
    save_checkpoint(out / "policy.ckpt", policy, cfg.digest())
    audit_path = out / "audit.jsonl"
    if audit_path.exists():
        audit_path.unlink()
    doc, report = evaluate(scenario, "maddpg", policy, faults, audit_path)
    doc["training"] = history
    _write_report(out, doc, report)
    scn_hash = sha256_bytes(scn_bytes)
    manifest = RunManifest(
        run_id=sha256_bytes(f"{scn_hash}|{cfg.digest()}|{_faults_dict(faults)}".encode())[:16],
        scenario_hash=scn_hash,
        train_config=cfg.to_dict(),
        config_hash=cfg.digest(),
        faults=_faults_dict(faults),
        code_version=__version__,
        seeds={"train": cfg.seed, "scenario": scenario.seed,
               "faults": faults.seed if faults else 0},
        artifacts=RUN_FILES,
        created_utc=format_utc(datetime.now(timezone.utc)),
    )
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    log.info("run written to %s in %.1f s", out, time.monotonic() - t0)
    return out


def load_run(run_dir):
    run = Path(run_dir)
    missing = [f for f in ("scenario.json", "manifest.json", "policy.ckpt") if not (run / f).exists()]
    if missing:
        raise MissingArtifacts(f"{run} lacks {', '.join(missing)}")
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    scn_bytes = (run / "scenario.json").read_bytes()
    if sha256_bytes(scn_bytes) != manifest["scenario_hash"]:
        raise ValidationError([f"{run}/scenario.json: hash does not match the manifest"])
    return load_scenario(run / "scenario.json"), manifest


def run_evaluate(*, run_dir=None, policy_path=None, scenario_ref=None, controller="maddpg",
                 faults: FaultConfig | None = None, out_dir=None) -> tuple[dict, object]:
    manifest = None
    if run_dir is not None:
        scenario, manifest = load_run(run_dir)
        policy_path = policy_path or Path(run_dir) / "policy.ckpt"
        if faults is None and manifest is not None:
            faults = fault_config(manifest.get("faults", {}))
    elif scenario_ref is not None:
        scenario = resolve_scenario(scenario_ref)
    else:
        raise ValidationError(["eval needs --run or --scenario"])
    policy = None
    if controller == "maddpg":
        if policy_path is None or not Path(policy_path).exists():
            raise MissingArtifacts("maddpg evaluation needs a policy checkpoint")
        policy = load_checkpoint(policy_path, scenario.building_ids, OBS_DIM)
    audit_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        audit_path = out / "audit.jsonl"
        if audit_path.exists():
            audit_path.unlink()
    doc, report = evaluate(scenario, controller, policy, faults, audit_path)
    if run_dir is not None and controller == "maddpg":
        # keep the training history so the evaluation reproduces the stored report
        stored = Path(run_dir) / "kpi.json"
        if stored.exists():
            doc["training"] = json.loads(stored.read_text(encoding="utf-8")).get("training", [])
    if out_dir is not None:
        _write_report(Path(out_dir), doc, report)
    return doc, report


def run_report(run_dir) -> tuple[str, dict]:
    run = Path(run_dir)
    for f in ("kpi.json",):
        if not (run / f).exists():
            raise MissingArtifacts(f"{run} has no {f}; run train or eval first")
    doc = json.loads((run / "kpi.json").read_text(encoding="utf-8"))
    from .kpi import KpiReport, NormalizedReport

    ids = tuple(k for k in doc["raw"]["buildings"])
    rep = NormalizedReport(
        KpiReport(doc["raw"]["buildings"], doc["raw"]["community"], ids),
        KpiReport(doc["baseline"]["buildings"], doc["baseline"]["community"], ids),
        doc["normalized_pct"], tuple(tuple(x) for x in doc.get("omitted", [])))
    return render_table(rep), doc


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        typ = {"float": float, "int": int}.get(str(f.type), float)
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=typ, default=None,
                       help=f"TrainConfig.{f.name} (default {f.default})")


def _add_fault_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dropout-rate", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--skew-s", type=float, default=None)
    p.add_argument("--fault-seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reccontrol", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scenario document")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--buildings", type=int, default=4)
    g.add_argument("--days", type=int, default=30)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train MADDPG and evaluate the greedy policy")
    t.add_argument("--scenario", default="community4", help="path or bundled name")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", help="JSON file with TrainConfig and fault keys")
    _add_config_flags(t)
    _add_fault_flags(t)

    e = sub.add_parser("eval", help="evaluate a controller against the no-control baseline")
    e.add_argument("--run", help="run directory produced by train")
    e.add_argument("--policy", help="checkpoint path (defaults to RUN/policy.ckpt)")
    e.add_argument("--scenario", help="path or bundled name (when --run is not given)")
    e.add_argument("--controller", choices=("maddpg", "rbc", "none"), default="maddpg")
    e.add_argument("--out", help="directory for kpi.json, kpi.txt and audit.jsonl")
    _add_fault_flags(e)

    r = sub.add_parser("report", help="render the KPI table of a run directory")
    r.add_argument("run")
    r.add_argument("--json", action="store_true", help="print the JSON report instead")
    return p


def _merged(args, keys, file_doc: dict) -> dict:
    """Config file values overridden by explicit flags."""
    out = {k: v for k, v in file_doc.items() if k in keys}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ParseError, ValidationError, MissingArtifacts, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RecError as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args) -> int:
    if args.command == "gen":
        s = generate_synthetic(args.seed, args.buildings, args.days)
        Path(args.out).write_text(dumps_scenario(s), encoding="utf-8")
        print(args.out)
        return EXIT_OK
    if args.command == "train":
        file_doc = {}
        if args.config:
            try:
                file_doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ParseError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(file_doc) - {f.name for f in fields(TrainConfig)} - set(FAULT_KEYS)
        if unknown:
            raise ValidationError([f"config: unknown keys {sorted(unknown)}"])
        cfg = TrainConfig(**_merged(args, [f.name for f in fields(TrainConfig)], file_doc))
        faults = fault_config(_merged(args, FAULT_KEYS, file_doc))

        def progress(info):
            log.info("episode %(episode)d  return %(return).2f  updates %(updates)d", info)

        out = run_train(args.scenario, args.out, cfg, faults, progress)
        print((out / "kpi.txt").read_text(encoding="utf-8"), end="")
        return EXIT_OK
    if args.command == "eval":
        faults = fault_config(_merged(args, FAULT_KEYS, {}))
        out = args.out
        if out is None and args.run is not None:
            out = Path(args.run) / f"eval-{args.controller}"
        doc, report = run_evaluate(run_dir=args.run, policy_path=args.policy,
                                   scenario_ref=args.scenario, controller=args.controller,
                                   faults=faults, out_dir=out)
        print(render_table(report), end="")
        ep = doc["episode"]
        print(f"unmet {ep['unmet_kwh']:.3f} kWh  interventions {ep['interventions']}  "
              f"min completeness {ep['min_completeness']:.3f}")
        return EXIT_OK
    if args.command == "report":
        text, doc = run_report(args.run)
        print(json.dumps(doc, sort_keys=True, indent=2) if args.json else text, end="" if not args.json else "\n")
        return EXIT_OK
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
