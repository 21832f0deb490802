"""Command line: run scenarios, run audits, inspect ledgers.

    sandbox-measure simulate SCENARIO [--seed N] [--ledger PATH] [--out DIR]
    sandbox-measure audit CONFIG [--out PATH]
    sandbox-measure budget-report LEDGER

Scenario and audit files are JSON documents tagged with a ``format`` field.
Budget values travel as decimal strings so the ledger stays bit-exact.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import fcntl
import io
import json
import logging
import os
import sys
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from sandbox_measure import dp_audit
from sandbox_measure.aggregation import (DEFAULT_DELTA_STAR, DEFAULT_EPS_STAR,
                                         AggregationAborted, AggregationRequest,
                                         AggregationService, KeyDiscovery, LedgerFileError,
                                         Listed, MalformedRequest, PrivacyBudgetLedger)
from sandbox_measure.core import (AggregatableReport, SourceRegistration,
                                  TriggerRegistration, key_from_hex, key_to_hex)
from sandbox_measure.event_mechanism import (EventLevelClient, EventMechanism, EventSource,
                                             EventTrigger, NoisyEventClient, SpecEntry,
                                             TriggerSpec, enumerate_outputs)
from sandbox_measure.interactive import HALT
from sandbox_measure.sr_clients import (DEFAULT_WINDOW_LENGTH, AraClient,
                                        DeclarativeProgram, PaaClient, RegistrationError)
from sandbox_measure.summary_mechanism import (MeasurementDatabase, MsrQuery, Record,
                                               SummaryMechanism, TurnRecord, remove_unit,
                                               write_trace)

logger = logging.getLogger("sandbox_measure")

SCENARIO_FORMAT = "sandbox-measure/scenario@1"
AUDIT_FORMAT = "sandbox-measure/audit@1"
LEDGER_DIR_ENV = "SANDBOX_MEASURE_LEDGER_DIR"
LEDGER_NAME = "ledger.json"

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_SCHEMA = 2
EXIT_ABORT = 3
EXIT_LEDGER = 4

API_KINDS = ("ara-summary", "paa-summary", "event-level")
WHEN = ("always", "after-success", "after-abort")


class SchemaError(ValueError):
    pass


# --- scenario parsing -------------------------------------------------------------

def _req(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(f"{where}: missing field {key!r}")
    return d[key]


def _int(x, where: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise SchemaError(f"{where}: expected an integer, got {x!r}")
    return x


def _dec(x, where: str) -> Decimal:
    if isinstance(x, bool) or not isinstance(x, (str, int)):
        raise SchemaError(f"{where}: expected a decimal string, got {x!r}")
    try:
        d = Decimal(x)
    except InvalidOperation as e:
        raise SchemaError(f"{where}: bad decimal {x!r}") from e
    if not d.is_finite() or d < 0:
        raise SchemaError(f"{where}: expected a finite non-negative decimal")
    return d


def _key(x, where: str) -> int:
    try:
        return key_from_hex(x)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{where}: {e}") from e


def _strs(x, where: str) -> List[str]:
    if not isinstance(x, list) or not all(isinstance(s, str) for s in x):
        raise SchemaError(f"{where}: expected a list of strings")
    return x


@dataclasses.dataclass(frozen=True)
class Turn:
    eps: Decimal
    delta: Decimal
    mode: Any                 # KeyDiscovery() or Listed
    reports: Optional[Tuple[str, ...]]  # labels, None = every report
    when: str


@dataclasses.dataclass(frozen=True)
class Scenario:
    api: str
    seed: int
    params: Dict[str, Any]
    timeline: Tuple[Any, ...]
    turns: Tuple[Turn, ...]
    until: int = 0


def _parse_turn(t: dict, i: int) -> Turn:
    where = f"turns[{i}]"
    mode = t.get("mode", "key-discovery")
    if mode == "key-discovery":
        mode = KeyDiscovery()
    elif isinstance(mode, dict) and "listed" in mode:
        mode = Listed(_key(k, f"{where}.mode") for k in mode["listed"])
    else:
        raise SchemaError(f"{where}: mode must be 'key-discovery' or {{'listed': [...]}}")
    reports = t.get("reports", "all")
    reports = None if reports == "all" else tuple(_strs(reports, f"{where}.reports"))
    when = t.get("when", "always")
    if when not in WHEN:
        raise SchemaError(f"{where}: when must be one of {WHEN}")
    eps = _dec(_req(t, "eps", where), f"{where}.eps")
    if eps == 0:
        raise SchemaError(f"{where}: eps must be positive")
    delta = _dec(t.get("delta", "0"), f"{where}.delta")
    return Turn(eps, delta, mode, reports, when)


def _parse_spec(entries, where: str) -> TriggerSpec:
    try:
        return TriggerSpec(tuple(
            SpecEntry(_int(_req(e, "trig_data", where), where),
                      tuple(_int(w, where) for w in _req(e, "windows", where)),
                      tuple(_int(b, where) for b in _req(e, "buckets", where)))
            for e in entries))
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{where}: {e}") from e


def _parse_event(ev: dict, i: int, api: str, seq: int):
    where = f"timeline[{i}]"
    kind = _req(ev, "type", where)
    t = _int(_req(ev, "time", where), f"{where}.time")
    try:
        if api == "ara-summary" and kind == "source":
            return SourceRegistration(
                _req(ev, "src_id", where), _req(ev, "dest", where),
                _int(_req(ev, "exp_date", where), where),
                frozenset(_strs(_req(ev, "src_filt", where), where)),
                _key(_req(ev, "src_key", where), where), t, seq)
        if api == "ara-summary" and kind == "trigger":
            return TriggerRegistration(
                _req(ev, "dest", where), _req(ev, "trig_id", where),
                frozenset(_strs(_req(ev, "trig_filt", where), where)),
                _key(_req(ev, "trig_key", where), where),
                _int(_req(ev, "trig_value", where), where), t)
        if api == "paa-summary" and kind == "event":
            return (str(_req(ev, "id", where)), _req(ev, "device", where), t,
                    DeclarativeProgram.from_json(_req(ev, "program", where)))
        if api == "event-level" and kind == "source":
            return EventSource(
                _req(ev, "src_id", where), _req(ev, "dest", where),
                _int(_req(ev, "exp_date", where), where),
                frozenset(_strs(_req(ev, "src_filt", where), where)),
                _int(_req(ev, "max_rep", where), where),
                _parse_spec(_req(ev, "trig_spec", where), f"{where}.trig_spec"), t, seq)
        if api == "event-level" and kind == "trigger":
            return EventTrigger(
                _req(ev, "dest", where), _req(ev, "trig_id", where),
                frozenset(_strs(_req(ev, "trig_filt", where), where)),
                _int(_req(ev, "trig_data", where), where),
                _int(_req(ev, "trig_value", where), where), t)
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{where}: {e}") from e
    raise SchemaError(f"{where}: event type {kind!r} is not valid for {api}")


def parse_scenario(doc: Any, seed: Optional[int] = None) -> Scenario:
    """Validates a scenario document; raises :class:`SchemaError`."""
    if not isinstance(doc, dict):
        raise SchemaError("scenario must be a JSON object")
    if doc.get("format") != SCENARIO_FORMAT:
        raise SchemaError(f"format must be {SCENARIO_FORMAT!r}")
    api = _req(doc, "api", "scenario")
    if api not in API_KINDS:
        raise SchemaError(f"api must be one of {API_KINDS}")
    seed = _int(_req(doc, "seed", "scenario"), "seed") if seed is None else seed
    p = doc.get("params", {})
    if not isinstance(p, dict):
        raise SchemaError("params must be an object")
    params = {
        "A1": _int(p.get("A1", 1 << 16), "params.A1"),
        "A0": _int(p.get("A0", 1), "params.A0"),
        "eps_star": _dec(p.get("eps_star", str(DEFAULT_EPS_STAR)), "params.eps_star"),
        "delta_star": _dec(p.get("delta_star", str(DEFAULT_DELTA_STAR)), "params.delta_star"),
        "window_length": _int(p.get("window_length", DEFAULT_WINDOW_LENGTH),
                              "params.window_length"),
        "strict_halt": bool(p.get("strict_halt", False)),
        "eps": p.get("eps"),
    }
    if params["A1"] <= 0 or params["A0"] <= 0 or params["window_length"] <= 0:
        raise SchemaError("A1, A0 and window_length must be positive")
    if params["eps"] is not None:
        params["eps"] = float(_dec(params["eps"], "params.eps"))
    timeline = _req(doc, "timeline", "scenario")
    if not isinstance(timeline, list):
        raise SchemaError("timeline must be a list")
    events = tuple(_parse_event(ev, i, api, i) for i, ev in enumerate(timeline))
    times = [ev[2] if isinstance(ev, tuple) else
             ev.reg_time if isinstance(ev, (SourceRegistration, EventSource)) else ev.time
             for ev in events]
    if any(b < a for a, b in zip(times, times[1:])):
        raise SchemaError("timeline must be in non-decreasing time order")
    turns = doc.get("turns", [])
    if not isinstance(turns, list):
        raise SchemaError("turns must be a list")
    if api == "event-level" and turns:
        raise SchemaError("event-level scenarios take no aggregation turns")
    until = _int(doc.get("until", times[-1] if times else 0), "until")
    return Scenario(api, seed, params, events,
                    tuple(_parse_turn(t, i) for i, t in enumerate(turns)), until)


# --- ledger handling ----------------------------------------------------------------

class LedgerConflict(Exception):
    pass


def default_ledger_path() -> Path:
    return Path(os.environ.get(LEDGER_DIR_ENV, ".")) / LEDGER_NAME


@contextlib.contextmanager
def locked_ledger(path: Path, eps_star: Decimal, delta_star: Decimal):
    """Holds an exclusive advisory lock for the whole run and yields the ledger.

    Concurrent runs on one ledger serialize here.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{path}.lock", "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        try:
            if path.exists():
                try:
                    ledger = PrivacyBudgetLedger.load(path)
                except (LedgerFileError, KeyError, ValueError, InvalidOperation) as e:
                    raise LedgerConflict(str(e)) from e
                if (ledger.eps_star, ledger.delta_star) != (eps_star, delta_star):
                    raise LedgerConflict(
                        f"ledger caps ({ledger.eps_star}, {ledger.delta_star}) differ from "
                        f"scenario caps ({eps_star}, {delta_star})")
            else:
                ledger = PrivacyBudgetLedger(eps_star, delta_star)
            yield ledger
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)


# --- scenario execution ---------------------------------------------------------------

@dataclasses.dataclass
class RunResult:
    reports: List[dict]
    transcript: List[dict]
    trace: str
    aborted: bool


def _label(x) -> Any:
    return list(x) if isinstance(x, tuple) else x


def _run_summary(sc: Scenario, ledger: PrivacyBudgetLedger) -> RunResult:
    rng = np.random.default_rng(sc.seed)
    p = sc.params
    labelled: List[Tuple[str, AggregatableReport, Any]] = []   # (label, report, unit)
    report_rows = []
    if sc.api == "ara-summary":
        client = AraClient(p["A1"], p["A0"], rng=rng, strict_halt=p["strict_halt"])
        for ev in sc.timeline:
            if isinstance(ev, SourceRegistration):
                client.register_source(ev)
                continue
            rep = client.register_trigger(ev)
            unit = client.attribution.get(rep.report_id)
            labelled.append((ev.trig_id, rep, unit))
            report_rows.append({"trigger": ev.trig_id, "time": ev.time, **rep.to_json()})
    else:
        client = PaaClient(p["A1"], p["A0"], rng=rng, window_length=p["window_length"])
        for label, device, t, prog in sc.timeline:
            rep = client.register_event(device, t, prog)
            unit = client.attribution.get(rep.report_id)
            labelled.append((label, rep, unit))
            report_rows.append({"event": label, "device": device, "time": t,
                                "window": client.window_of(t), **rep.to_json()})

    by_label: Dict[str, AggregatableReport] = {}
    for label, rep, _ in labelled:
        if label in by_label:
            raise SchemaError(f"duplicate report label {label!r}")
        by_label[label] = rep

    service = AggregationService(ledger, p["A1"], p["A0"])
    admitted = tuple((_label(unit), key_to_hex(rep.report_id), rep.value)
                     for _, rep, unit in labelled if unit is not None)
    log: List[TurnRecord] = []
    transcript = []
    last_ok: Optional[bool] = None
    any_abort = False
    for i, turn in enumerate(sc.turns):
        if (turn.when == "after-success" and last_ok is not True) or (
                turn.when == "after-abort" and last_ok is not False):
            transcript.append({"turn": i, "status": "skipped"})
            continue
        if turn.reports is None:
            batch = [rep for _, rep, _ in labelled]
        else:
            missing = [l for l in turn.reports if l not in by_label]
            if missing:
                raise SchemaError(f"turns[{i}]: unknown report labels {missing}")
            batch = [by_label[l] for l in turn.reports]
        req = AggregationRequest(tuple(batch), turn.eps, turn.delta, turn.mode)
        discovery = isinstance(turn.mode, KeyDiscovery)
        ys = frozenset(key_to_hex(r.report_id) for r in batch if not r.is_null)
        charged_delta = turn.delta if discovery else Decimal(0)
        try:
            summary = service.aggregate(req, rng)
        except MalformedRequest as e:
            raise SchemaError(f"turns[{i}]: {e}") from e
        except AggregationAborted as e:
            transcript.append({"turn": i, "status": "abort",
                               "violating": [key_to_hex(r) for r in e.report_ids]})
            log.append(TurnRecord(turn.eps, charged_delta, ys, True,
                                  admitted if not log else ()))
            last_ok, any_abort = False, True
            continue
        transcript.append({"turn": i, "status": "ok", "summary": summary.to_json()})
        log.append(TurnRecord(turn.eps, charged_delta, ys, False, admitted if not log else ()))
        last_ok = True

    buf = io.StringIO()
    write_trace(buf, log, p["A1"], p["A0"], p["eps_star"], p["delta_star"])
    return RunResult(report_rows, transcript, buf.getvalue(), any_abort)


def _run_event_level(sc: Scenario) -> RunResult:
    eps = sc.params["eps"]
    client = EventLevelClient() if eps is None else NoisyEventClient(eps, sc.seed)
    for ev in sc.timeline:
        if isinstance(ev, EventSource):
            try:
                client.register_source(ev)
            except ValueError as e:
                raise SchemaError(str(e)) from e
        else:
            client.register_trigger(ev)
    client.advance_to(sc.until)
    rows = [{"time": t, **r.to_json()} for t, r in client.log]
    transcript = [{"turn": 0, "status": "ok", "mode": "noiseless" if eps is None else "irr"}]
    return RunResult(rows, transcript, "", False)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def run_scenario(path, seed: Optional[int] = None, ledger_path=None, out_dir=None) -> int:
    """Runs a scenario file and writes its outputs; returns an exit code.

    Nothing is written when the scenario fails validation.
    """
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
        sc = parse_scenario(doc, seed)
    except (OSError, json.JSONDecodeError, SchemaError) as e:
        print(f"schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    out_dir = Path(out_dir) if out_dir else path.with_name(path.stem + "-out")
    ledger_path = Path(ledger_path) if ledger_path else default_ledger_path()
    try:
        if sc.api == "event-level":
            result = _run_event_level(sc)
            ledger_doc = None
        else:
            with locked_ledger(ledger_path, sc.params["eps_star"],
                               sc.params["delta_star"]) as ledger:
                result = _run_summary(sc, ledger)
                ledger.save(ledger_path)
                ledger_doc = ledger.to_json()
    except SchemaError as e:
        print(f"schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except RegistrationError as e:
        print(f"schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except LedgerConflict as e:
        print(f"ledger conflict: {e}", file=sys.stderr)
        return EXIT_LEDGER

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "reports.json").write_text(_dump({"api": sc.api, "seed": sc.seed,
                                                 "reports": result.reports}))
    (out_dir / "transcript.json").write_text(_dump(result.transcript))
    if sc.api != "event-level":
        (out_dir / "trace.jsonl").write_text(result.trace)
        (out_dir / "ledger.json").write_text(_dump(ledger_doc))
    return EXIT_ABORT if result.aborted else EXIT_OK


# --- audits ------------------------------------------------------------------------------

def _scripted(turns, make_db):
    def adversary(hist):
        if len(hist) >= len(turns):
            return HALT
        return make_db(turns[len(hist)], hist)
    return adversary


def _check_event_level(c: dict) -> List[dp_audit.AuditRecord]:
    eps = float(c["eps"])
    units = {}
    for u in c["units"]:
        spec = _parse_spec(u["trig_spec"], "units.trig_spec")
        units[u["unit"]] = enumerate_outputs(spec, int(u["max_rep"]))
    mech = EventMechanism(eps, units)
    records = []
    for a, steps in enumerate(c["adversaries"]):
        def make_db(step, hist):
            return MeasurementDatabase(tuple(
                Record(r["unit"], r["y"], (int(r["trig_data"]), int(r["value"])))
                for r in step)), None
        adv = _scripted(steps, make_db)
        for x in units:
            records.append(dp_audit.audit_unit_removal(
                mech, adv, lambda d, x=x: remove_unit(d, x), eps, 0.0,
                label="event-level", params={"adversary": a, "unit": x}))
    return records


def _check_summary(c: dict) -> List[dp_audit.AuditRecord]:
    a1, a0 = int(c["A1"]), int(c["A0"])
    eps_star, delta_star = Decimal(c["eps_star"]), Decimal(c["delta_star"])
    mech = SummaryMechanism(a1, a0, eps_star, delta_star,
                            [key_from_hex(k) for k in c.get("key_universe", [])],
                            zero_noise=bool(c.get("zero_noise", False)))
    db = MeasurementDatabase(tuple(
        Record(r["unit"], r["y"], (key_from_hex(r["key"]), int(r["value"])))
        for r in c["records"]), c.get("flavor", "ara"))
    f = lambda rec: rec.payload
    records = []
    for a, turns in enumerate(c["adversaries"]):
        def make(turn, hist):
            # A turn may branch on whether the previous response released anything.
            Y = turn["Y"]
            if hist and "Y_if_empty" in turn and hist[-1] == ():
                Y = turn["Y_if_empty"]
            return db, MsrQuery(turn["eps"], turn["delta"], Y, f)
        adv = _scripted(turns, make)
        for x in sorted(db.units(), key=repr):
            records.append(dp_audit.audit_unit_removal(
                mech, adv, lambda d, x=x: remove_unit(d, x), float(eps_star),
                float(delta_star), label="summary", params={"adversary": a, "unit": x}))
    return records


def run_check(c: dict) -> List[dp_audit.AuditRecord]:
    kind = c.get("kind")
    if kind == "tdlap":
        tau = c.get("tau")
        return [dp_audit.audit_tdlap(c["u"], c["v"], float(c["eps"]), float(c["delta"]),
                                     int(c["A1"]), int(c["A0"]),
                                     tau=None if tau is None else int(tau))]
    if kind == "tdlap-grid":
        keys = ("dims", "shifts", "sparsities", "epsilons", "deltas")
        return dp_audit.tdlap_grid(**{k: tuple(c[k]) for k in keys if k in c})
    if kind == "event-level":
        return _check_event_level(c)
    if kind == "summary":
        return _check_summary(c)
    if kind == "rollout":
        res = dp_audit.audit_rollout(c["trace"])
        return [dp_audit.AuditRecord("rollout", {"trace": c["trace"],
                                                 "failing": [repr(u) for u in res.failing]},
                                     0.0, 0.0, res.passed)]
    raise SchemaError(f"unknown check kind {kind!r}")


def run_audit(path, out=None) -> int:
    """Runs every check in an audit config; exit 0 iff all pass."""
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
        if not isinstance(doc, dict) or doc.get("format") != AUDIT_FORMAT:
            raise SchemaError(f"format must be {AUDIT_FORMAT!r}")
        checks = doc.get("checks", [])
        if not isinstance(checks, list):
            raise SchemaError("checks must be a list")
    except (OSError, json.JSONDecodeError, SchemaError) as e:
        print(f"schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    records: List[dp_audit.AuditRecord] = []
    first_fail = None
    for i, c in enumerate(checks):
        try:
            got = run_check(c)
        except (SchemaError, KeyError, TypeError, ValueError) as e:
            print(f"schema error in checks[{i}]: {e}", file=sys.stderr)
            return EXIT_SCHEMA
        records.extend(got)
        if first_fail is None and not all(r.passed for r in got):
            first_fail = (i, c.get("name", c.get("kind")))
    out = Path(out) if out else path.with_name(path.stem + "-report.jsonl")
    with open(out, "w") as f:
        dp_audit.write_audit_report(records, f)
    if first_fail is not None:
        print(f"audit failed: checks[{first_fail[0]}] ({first_fail[1]})", file=sys.stderr)
        return EXIT_FAIL
    print(f"audit passed: {len(records)} record(s)")
    return EXIT_OK


def budget_report(path) -> int:
    try:
        ledger = PrivacyBudgetLedger.load(path)
    except (LedgerFileError, KeyError, ValueError, InvalidOperation) as e:
        print(f"ledger error: {e}", file=sys.stderr)
        return EXIT_LEDGER
    print(f"caps: eps*={ledger.eps_star} delta*={ledger.delta_star}")
    snap = ledger.snapshot()
    for r in sorted(snap):
        e, d = ledger.remaining(r)
        print(f"{key_to_hex(r)}  eps remaining {e}  delta remaining {d}")
    print(f"{len(snap)} report(s)")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="sandbox-measure", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario file")
    sim.add_argument("scenario")
    sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sim.add_argument("--ledger", default=None,
                     help=f"ledger file (default ${LEDGER_DIR_ENV}/{LEDGER_NAME})")
    sim.add_argument("--out", default=None, help="output directory")

    aud = sub.add_parser("audit", help="run an audit config")
    aud.add_argument("config")
    aud.add_argument("--out", default=None, help="audit report path")

    rep = sub.add_parser("budget-report", help="print remaining budgets of a ledger")
    rep.add_argument("ledger")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.command == "simulate":
        return run_scenario(args.scenario, args.seed, args.ledger, args.out)
    if args.command == "audit":
        return run_audit(args.config, args.out)
    return budget_report(args.ledger)


if __name__ == "__main__":
    sys.exit(main())
