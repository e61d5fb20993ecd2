"""
Run registry: every CLI invocation is recorded with its effective config,
summary and output files. `runs` lists the most recent ones.
"""

import argparse
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from kinesim import database
from kinesim.models import ArtifactRecord, RunRecord
from kinesim.pipelines.common import PipelineResult, echo, plain
from kinesim.scenario_io import file_sha256

logger = logging.getLogger(__name__)

COMMAND = "runs"


def start_run(command: str, seed: Optional[int], config: Dict[str, Any]) -> Optional[int]:
    database.init_db()
    with database.get_db() as db:
        run = RunRecord(command=command, seed=seed, config_json=json.dumps(plain(config), sort_keys=True), status="running")
        db.add(run)
        db.commit()
        return run.id


def finish_run(
    run_id: int,
    status: str,
    summary: Optional[Dict[str, Any]] = None,
    config: Optional[Dict[str, Any]] = None,
    artifacts: Iterable[Tuple[Path, str]] = (),
    error: Optional[str] = None,
) -> None:
    with database.get_db() as db:
        run = db.get(RunRecord, run_id)
        if run is None:
            logger.warning("run %s vanished from the registry", run_id)
            return
        run.status = status
        run.error = error
        run.finished_at = datetime.now(timezone.utc)
        if summary is not None:
            run.summary_json = json.dumps(plain(summary), sort_keys=True)
        if config is not None:
            run.config_json = json.dumps(plain(config), sort_keys=True)
        for path, kind in artifacts:
            path = Path(path)
            digest = file_sha256(path) if path.is_file() else None
            run.artifacts.append(ArtifactRecord(path=str(path), kind=kind, sha256=digest))
        db.commit()


def recent_runs(limit: int = 20, command: Optional[str] = None) -> List[Dict[str, Any]]:
    database.init_db()
    with database.get_db() as db:
        query = db.query(RunRecord)
        if command:
            query = query.filter(RunRecord.command == command)
        rows = query.order_by(RunRecord.id.desc()).limit(limit).all()
        return [
            {
                "id": run.id,
                "command": run.command,
                "seed": run.seed,
                "status": run.status,
                "started_at": run.started_at.isoformat() if run.started_at else None,
                "artifacts": len(run.artifacts),
                "error": run.error,
            }
            for run in rows
        ]


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser(COMMAND, parents=parents, help="list recent runs from the registry")
    parser.add_argument("--limit", type=int, default=20)
    parser.add_argument("--command", dest="filter_command", default=None, help="only runs of this subcommand")
    parser.set_defaults(handler=run, stochastic=False, recorded=False)


def run(args: argparse.Namespace) -> PipelineResult:
    rows = recent_runs(args.limit, args.filter_command)
    for row in rows:
        status = {"ok": "✅", "failed": "❌"}.get(row["status"], "⚠️")
        echo(args, f"{status} #{row['id']:<5} {row['command']:<11} seed={row['seed']!s:<6} {row['started_at'] or '-'}  artifacts={row['artifacts']}")
    return PipelineResult(summary={"runs": len(rows)}, config={"limit": args.limit, "command": args.filter_command})
