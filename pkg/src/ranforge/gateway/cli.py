"""``ranforge`` command line.

Global options: ``--data-dir`` (default ``$RANFORGE_DATA_DIR`` or
``./ranforge-data``), ``--inventory`` (default ``$RANFORGE_INVENTORY`` or the
built-in testbed), ``--json`` (print the machine-readable body; for queries it
is identical to the matching HTTP response).

Exit codes: 0 ok, 1 internal, 2 usage, 3 invalid input, 4 not found,
5 conflict, 6 resources, 7 execution/test failure, 8 storage, 9 unreachable.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Optional

from ..errors import EXIT_TEST, EXIT_USAGE, InvalidInput, RanforgeError
from ..forge import BuilderProfile, ImageArtifact, Patch, PatchSet, Registry, build_image
from ..intake import compile_plan, parse_spec, spec_to_dict
from ..watch import RepoRef, decide_build, latest_tag, open_repo
from . import views


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _testbed(args):
    from ..testbed import Testbed

    data_dir = args.data_dir or os.environ.get("RANFORGE_DATA_DIR") or "ranforge-data"
    inventory = args.inventory or os.environ.get("RANFORGE_INVENTORY") or None
    return Testbed(data_dir, inventory)


def _registry(args) -> Registry:
    if getattr(args, "registry", None):
        return Registry(args.registry)
    data_dir = args.data_dir or os.environ.get("RANFORGE_DATA_DIR") or "ranforge-data"
    return Registry(Path(data_dir) / "registry")


def _read(path: str) -> str:
    try:
        return sys.stdin.read() if path == "-" else Path(path).read_text()
    except OSError as exc:
        raise InvalidInput(f"cannot read {path}: {exc}") from exc


def _patchset(paths: list[str]) -> PatchSet:
    return PatchSet(tuple(Patch.from_body(Path(p).name, _read(p)) for p in paths or []))


# -- human renderers


def _table(rows: list[list[Any]], header: list[str]) -> str:
    cols = [header] + [[("" if c is None else str(c)) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cols)


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else f"{x:.3f}"


def _show_run(r: dict) -> str:
    head = f"{r['run_id']}  plan {r['plan_id']}  {r['trigger']}  {r['state']}"
    rows = [[t["task_name"], t["state"], t["attempt"], (t["error"] or {}).get("code", "")] for t in r["task_records"]]
    return head + "\n" + _table(rows, ["task", "state", "attempt", "error"])


def _show_runs(rs: list) -> str:
    return _table([[r["run_id"], r["plan_id"], r["trigger"], r["state"], r["created_at"]] for r in rs],
                  ["run_id", "plan", "trigger", "state", "created"])


def _show_radios(rs: list) -> str:
    return _table([[r["radio_id"], r["model"], ",".join(r["bands"]), r["attached_node"], r["state"]] for r in rs],
                  ["radio", "model", "bands", "node", "state"])


def _show_placement(p: dict) -> str:
    return (f"{p['placement_id']}  {p['state']}  node {p['node_id']}  cores {p['cores']}  "
            f"pages {p['hugepage_pages']}  radios {','.join(p['radio_ids']) or '-'}  {p['band_id'] or '-'}/{p['prbs']} PRB")


def _show_results(rs: list) -> str:
    return _table([[r["run_id"], r["date"], r["status"], r["image_tag"]]
                   + [" ".join(_fmt(p["mean"]) for p in r["phases"])]
                   + [(r["verdict"] or {}).get("outcome", "")] for r in rs],
                  ["run_id", "date", "status", "image", "phase means", "verdict"])


def _show_result(r: dict) -> str:
    rows = [[p["target_rate_mbps"], p["sample_count"], _fmt(p["mean"]), _fmt(p["std"]), _fmt(p["min"]), _fmt(p["max"])]
            for p in r["phases"]]
    verdict = (r["verdict"] or {}).get("outcome", "none")
    return (f"{r['run_id']}  {r['config_key']}  {r['status']}  verdict {verdict}\n"
            + _table(rows, ["target", "n", "mean", "std", "min", "max"]))


def _show_aggregates(rs: list) -> str:
    return _table([[a["target_rate_mbps"], a["run_count"], _fmt(a["whisker_lo"]), _fmt(a["q1"]), _fmt(a["median"]),
                    _fmt(a["q3"]), _fmt(a["whisker_hi"])] for a in rs],
                  ["target", "runs", "lo", "q1", "median", "q3", "hi"])


def _show_verdict(v: dict) -> str:
    rows = [[p["target_rate_mbps"], _fmt(p["phase_mean"]), _fmt(p["band_lo"]), _fmt(p["band_hi"]),
             _fmt(p["in_band_fraction"]), {True: "ok", False: "FAIL", None: "-"}[p["phase_ok"]]] for p in v["phases"]]
    return (f"{v['run_id']}: {v['outcome']} ({v['reason']}) k={v['k']:g} theta={v['theta']:g}\n"
            + _table(rows, ["target", "mean", "band_lo", "band_hi", "in_band", "phase"]))


def _show_baseline(b: dict) -> str:
    rows = [[p["target_rate_mbps"], _fmt(p["history_mean_mbps"]), _fmt(p["history_std_mbps"]), p["run_count"]]
            for p in b["phases"]]
    return f"{b['config_key']}: {b['status']} from {b['run_count']} runs\n" + _table(rows, ["target", "mean", "std", "runs"])


def _show_plan(p: dict) -> str:
    sched = ", ".join(f"{s['name']} '{s['cadence']}'" for s in p["schedules"])
    return (f"plan {p['plan_id']} ({p['spec_id']}): {len(p['tasks'])} tasks, "
            f"{p['workload_count']} workloads, schedules {sched}")


def _show_images(rs: list) -> str:
    return _table([[r["image_name"], r["tag_name"], r["digest"][:19], r["built_at"]] for r in rs],
                  ["image", "tag", "digest", "built"])


def _emit(args, body: Any, human: Callable[[Any], str] = lambda b: json.dumps(b, indent=2)) -> None:
    if args.json:
        print(json.dumps(body, indent=2, sort_keys=True))
    else:
        print(human(body))


# -- commands


def cmd_spec_validate(args) -> int:
    spec = parse_spec(_read(args.file))
    _emit(args, spec_to_dict(spec), lambda _b: f"ok: {spec.name} ({len(spec.traffic_phases)} phases, "
                                               f"{sum(w.replicas for w in spec.deployment_manifest)} workloads)")
    return 0


def cmd_spec_compile(args) -> int:
    text = _read(args.file)
    if args.submit:
        tb = _testbed(args)
        base = Path(args.file).resolve().parent if args.file != "-" else Path.cwd()
        _emit(args, views.submit_spec(tb, text, base_dir=str(base)), _show_plan)
        return 0
    plan = compile_plan(parse_spec(text))
    _emit(args, views.plan_view(plan), _show_plan)
    return 0


def cmd_spec_ls(args) -> int:
    _emit(args, views.list_plans(_testbed(args)), lambda ps: "\n".join(_show_plan(p) for p in ps) or "no plans")
    return 0


def _run_exit(body: dict) -> int:
    return EXIT_TEST if body["state"] == "FAILED" else 0


def cmd_run_start(args) -> int:
    tb = _testbed(args)
    body = views.trigger(tb, args.plan, args.schedule, args.task, wait=True)
    _emit(args, body, _show_run)
    return _run_exit(body)


def cmd_run_create(args) -> int:
    _emit(args, views.create_run(_testbed(args), args.plan, args.schedule, args.task), _show_run)
    return 0


def cmd_run_status(args) -> int:
    _emit(args, views.get_run(_testbed(args), args.run_id), _show_run)
    return 0


def cmd_run_list(args) -> int:
    _emit(args, views.list_runs(_testbed(args), args.plan), _show_runs)
    return 0


def cmd_task_exec(args) -> int:
    inputs = json.loads(args.inputs) if args.inputs else None
    body = views.execute_task(_testbed(args), args.run_id, args.task, inputs)
    _emit(args, body, lambda t: f"{t['task_name']}: {t['state']} after {t['attempt']} attempt(s)\n{t['logs']}")
    return 0


def cmd_watch_decide(args) -> int:
    repo = RepoRef.from_url(args.repo, args.credentials)
    decision = decide_build(open_repo(repo), _registry(args), args.image, _patchset(args.patch))
    _emit(args, decision.to_dict(), lambda d: f"{d['verdict']}: {d['reason']}")
    return 0


def cmd_watch_latest(args) -> int:
    tag = latest_tag(RepoRef.from_url(args.repo, args.credentials))
    _emit(args, tag.to_dict(), lambda t: f"{t['name']} {t['commit_id']} {t['created_at']}")
    return 0


def cmd_image_build(args) -> int:
    repo = RepoRef.from_url(args.repo, args.credentials)
    source = open_repo(repo)
    tags = {t.name: t for t in source.tags()} if args.tag else None
    if args.tag and args.tag not in tags:
        raise InvalidInput(f"tag {args.tag} not in {args.repo}")
    tag = tags[args.tag] if args.tag else latest_tag(source)
    profile = BuilderProfile(target_arch=args.arch, stage_count=args.stages)
    art = build_image(tag, _patchset(args.patch), profile, image_name=args.image, source=source,
                      registry=_registry(args))
    _emit(args, art.to_dict(), lambda a: f"built {a['image_name']}:{a['tag_name']} {a['digest']}")
    return 0


def cmd_image_pull(args) -> int:
    art = _registry(args).pull(args.image, args.tag)
    body = art.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps({"artifact": body, "payload_b64": base64.b64encode(art.payload).decode()}))
    _emit(args, body, lambda a: f"{a['image_name']}:{a['tag_name']} {a['digest']} ({a['size_bytes']} bytes)")
    return 0


def cmd_image_push(args) -> int:
    try:
        doc = json.loads(_read(args.file))
        art = ImageArtifact.from_dict(doc["artifact"], base64.b64decode(doc["payload_b64"]))
    except (ValueError, KeyError) as exc:
        raise InvalidInput(f"{args.file} is not an image export: {exc}") from exc
    receipt = _registry(args).push(art)
    _emit(args, receipt, lambda r: f"{'pushed' if r.get('created') else 'already present'}: "
                                   f"{art.image_name}:{art.tag_name} {art.digest}")
    return 0


def cmd_image_ls(args) -> int:
    _emit(args, _registry(args).ls(args.image), _show_images)
    return 0


def cmd_inv_ls(args) -> int:
    tb = _testbed(args)
    if args.placements:
        _emit(args, views.list_placements(tb, args.active), lambda ps: "\n".join(map(_show_placement, ps)) or "none")
    else:
        _emit(args, views.list_radios(tb, args.band), _show_radios)
    return 0


def cmd_inv_capacity(args) -> int:
    _emit(args, views.capacity(_testbed(args)))
    return 0


def cmd_inv_claim(args) -> int:
    body = {
        "isolated_cores_needed": args.cores,
        "hugepage_bytes_needed": int(args.hugepages_gib * 1024**3),
        "latency_class": args.latency,
        "radios_needed": args.radios,
        "band_id": args.band,
        "prbs_needed": args.prbs,
    }
    _emit(args, views.claim(_testbed(args), body), _show_placement)
    return 0


def cmd_inv_release(args) -> int:
    _emit(args, views.release(_testbed(args), args.placement_id), _show_placement)
    return 0


def cmd_judge(args) -> int:
    from ..verdict import judge_run

    tb = _testbed(args)
    v = judge_run(tb.vault, args.run_id, k=args.k, theta=args.theta, epsilon=args.epsilon,
                  min_history=args.min_history, include_quarantined=args.include_quarantined,
                  record=not args.no_record)
    _emit(args, v.to_dict(), _show_verdict)
    return 0


def cmd_results_ls(args) -> int:
    body = views.list_results(_testbed(args), args.config, args.date_from, args.date_to, args.limit,
                              args.include_aborted)
    _emit(args, body, _show_results)
    return 0


def cmd_results_show(args) -> int:
    _emit(args, views.get_result(_testbed(args), args.run_id), _show_result)
    return 0


def cmd_results_export(args) -> int:
    text = views.series_csv(_testbed(args), args.run_id)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_results_aggregate(args) -> int:
    _emit(args, views.aggregates(_testbed(args), args.config, args.date), _show_aggregates)
    return 0


def cmd_results_configs(args) -> int:
    _emit(args, views.configs(_testbed(args)), lambda cs: "\n".join(cs) or "no configurations")
    return 0


def cmd_results_baseline(args) -> int:
    body = views.baseline(_testbed(args), args.config_key, args.k, args.min_history, args.include_quarantined)
    _emit(args, body, _show_baseline)
    return 0


def cmd_results_verdict(args) -> int:
    _emit(args, views.get_verdict(_testbed(args), args.run_id), _show_verdict)
    return 0


def cmd_results_report(args) -> int:
    from ..report import write_report

    body = write_report(_testbed(args).vault, args.config, args.out, args.date_from, args.date_to, args.run)
    _emit(args, body, lambda b: "\n".join(f"{k}: {v}" for k, v in b["files"].items())
          + (f"\nmissing days: {', '.join(b['missing_days'])}" if b["missing_days"] else ""))
    return 0


def cmd_serve(args) -> int:
    from .service import ServiceConfig, serve

    env = dict(os.environ)
    if args.data_dir:
        env["RANFORGE_DATA_DIR"] = args.data_dir
    if args.inventory:
        env["RANFORGE_INVENTORY"] = args.inventory
    if args.bind:
        env["RANFORGE_BIND"] = args.bind
    cfg = ServiceConfig.load(args.config, env)
    if args.no_scheduler:
        from dataclasses import replace

        cfg = replace(cfg, scheduler=False)
    print(f"serving on http://{cfg.bind} (data {cfg.data_dir})", file=sys.stderr)
    serve(cfg, block=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ranforge", description="Intent-driven RAN build/deploy/test orchestrator")
    p.add_argument("--data-dir", help="testbed data directory")
    p.add_argument("--inventory", help="inventory YAML file")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    sub = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    spec = sub.add_parser("spec", help="test specifications").add_subparsers(dest="cmd", required=True)
    s = spec.add_parser("validate")
    s.add_argument("file")
    s.set_defaults(func=cmd_spec_validate)
    s = spec.add_parser("compile")
    s.add_argument("file")
    s.add_argument("--submit", action="store_true", help="register the compiled plan in the data directory")
    s.set_defaults(func=cmd_spec_compile)
    s = spec.add_parser("ls")
    s.set_defaults(func=cmd_spec_ls)

    run = sub.add_parser("run", help="pipeline runs").add_subparsers(dest="cmd", required=True)
    for name, func in (("start", cmd_run_start), ("create", cmd_run_create)):
        s = run.add_parser(name)
        s.add_argument("plan")
        s.add_argument("--schedule", help="run the task subset of this schedule (pipeline|test)")
        s.add_argument("--task", action="append", help="restrict the run to these tasks")
        s.set_defaults(func=func)
    s = run.add_parser("status")
    s.add_argument("run_id")
    s.set_defaults(func=cmd_run_status)
    s = run.add_parser("list")
    s.add_argument("--plan")
    s.set_defaults(func=cmd_run_list)

    task = sub.add_parser("task", help="single tasks").add_subparsers(dest="cmd", required=True)
    s = task.add_parser("exec")
    s.add_argument("run_id")
    s.add_argument("task")
    s.add_argument("--inputs", help="JSON object of upstream task outputs, for standalone execution")
    s.set_defaults(func=cmd_task_exec)

    watch = sub.add_parser("watch", help="release tags").add_subparsers(dest="cmd", required=True)
    for name, func in (("decide", cmd_watch_decide), ("latest", cmd_watch_latest)):
        s = watch.add_parser(name)
        s.add_argument("--repo", required=True)
        s.add_argument("--credentials")
        if name == "decide":
            s.add_argument("--image", required=True)
            s.add_argument("--patch", action="append")
            s.add_argument("--registry", help="registry directory (default: <data-dir>/registry)")
        s.set_defaults(func=func)

    image = sub.add_parser("image", help="image registry").add_subparsers(dest="cmd", required=True)
    s = image.add_parser("build")
    s.add_argument("--repo", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--tag", help="release tag (default: latest)")
    s.add_argument("--patch", action="append")
    s.add_argument("--arch", default="x86_64")
    s.add_argument("--stages", type=int, default=2)
    s.add_argument("--credentials")
    s.set_defaults(func=cmd_image_build)
    s = image.add_parser("pull")
    s.add_argument("image")
    s.add_argument("tag")
    s.add_argument("--out", help="write an export file usable by 'image push'")
    s.set_defaults(func=cmd_image_pull)
    s = image.add_parser("push")
    s.add_argument("file", help="export written by 'image pull --out'")
    s.set_defaults(func=cmd_image_push)
    s = image.add_parser("ls")
    s.add_argument("--image")
    s.set_defaults(func=cmd_image_ls)
    for s in image.choices.values():
        s.add_argument("--registry", help="registry directory (default: <data-dir>/registry)")

    inv = sub.add_parser("inv", help="inventory").add_subparsers(dest="cmd", required=True)
    s = inv.add_parser("ls")
    s.add_argument("--band")
    s.add_argument("--placements", action="store_true")
    s.add_argument("--active", action="store_true")
    s.set_defaults(func=cmd_inv_ls)
    s = inv.add_parser("capacity")
    s.set_defaults(func=cmd_inv_capacity)
    s = inv.add_parser("claim")
    s.add_argument("--cores", type=int, default=4)
    s.add_argument("--hugepages-gib", type=float, default=2)
    s.add_argument("--latency", default="LOW_LATENCY", choices=["LOW_LATENCY", "GENERAL"])
    s.add_argument("--radios", type=int, default=1)
    s.add_argument("--band")
    s.add_argument("--prbs", type=int, default=0)
    s.set_defaults(func=cmd_inv_claim)
    s = inv.add_parser("release")
    s.add_argument("placement_id")
    s.set_defaults(func=cmd_inv_release)

    s = sub.add_parser("judge", help="judge a stored run against its history")
    s.add_argument("run_id")
    s.add_argument("--k", type=float, default=2.0)
    s.add_argument("--theta", type=float, default=0.9)
    s.add_argument("--epsilon", type=float, default=0.5)
    s.add_argument("--min-history", type=int, default=5)
    s.add_argument("--include-quarantined", action="store_true")
    s.add_argument("--no-record", action="store_true", help="print the verdict without attaching it")
    s.set_defaults(func=cmd_judge)

    res = sub.add_parser("results", help="KPI vault").add_subparsers(dest="cmd", required=True)
    s = res.add_parser("ls")
    s.add_argument("--config")
    s.add_argument("--from", dest="date_from")
    s.add_argument("--to", dest="date_to")
    s.add_argument("--limit", type=int)
    s.add_argument("--include-aborted", action="store_true")
    s.set_defaults(func=cmd_results_ls)
    s = res.add_parser("show")
    s.add_argument("run_id")
    s.set_defaults(func=cmd_results_show)
    s = res.add_parser("export", help="KPI series CSV of one run")
    s.add_argument("run_id")
    s.add_argument("--out")
    s.set_defaults(func=cmd_results_export)
    s = res.add_parser("aggregate")
    s.add_argument("--config", required=True)
    s.add_argument("--date", required=True)
    s.set_defaults(func=cmd_results_aggregate)
    s = res.add_parser("configs")
    s.set_defaults(func=cmd_results_configs)
    s = res.add_parser("baseline")
    s.add_argument("config_key")
    s.add_argument("--k", type=float, default=2.0)
    s.add_argument("--min-history", type=int, default=5)
    s.add_argument("--include-quarantined", action="store_true")
    s.set_defaults(func=cmd_results_baseline)
    s = res.add_parser("verdict")
    s.add_argument("run_id")
    s.set_defaults(func=cmd_results_verdict)
    s = res.add_parser("report", help="CSV tables and PNG plots for one configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--from", dest="date_from")
    s.add_argument("--to", dest="date_to")
    s.add_argument("--run", help="run to plot against its history (default: newest completed)")
    s.set_defaults(func=cmd_results_report)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--bind", help="host:port (default $RANFORGE_BIND or 127.0.0.1:8645)")
    s.add_argument("--config", help="service config file; overrides environment")
    s.add_argument("--no-scheduler", action="store_true", help="do not fire cron schedules")
    s.set_defaults(func=cmd_serve)
    _share_globals(p)
    return p


def _share_globals(parser: argparse.ArgumentParser) -> None:
    """Accept the global options after the subcommand as well."""
    for action in parser._actions:
        if not isinstance(action, argparse._SubParsersAction):
            continue
        for child in action.choices.values():
            if any(isinstance(a, argparse._SubParsersAction) for a in child._actions):
                _share_globals(child)
                continue
            child.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
            child.add_argument("--data-dir", default=argparse.SUPPRESS)
            child.add_argument("--inventory", default=argparse.SUPPRESS)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except RanforgeError as exc:
        if args.json:
            print(json.dumps(exc.to_dict(), indent=2, sort_keys=True), file=sys.stderr)
        else:
            print(f"error [{exc.code}]: {exc.message}", file=sys.stderr)
        return exc.exit_code
