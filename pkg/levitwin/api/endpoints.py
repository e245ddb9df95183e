import logging
import uuid
from typing import Any, Dict, List

import yaml
from fastapi import APIRouter, BackgroundTasks, Depends, File, HTTPException, UploadFile
from sqlalchemy.orm import Session

from levitwin.core.errors import ConfigError, LevitwinError
from levitwin.core.isolation import IsolationChain
from levitwin.core.presets import load_presets, scenario_names
from levitwin.core.reports import isolation_tables, limit_entry, limits_report, resonance_list
from levitwin.core.scenario import LimitScenario, Scenario, parse_scenario
from levitwin.core.sweep import average_point, run_points
from levitwin.db import SessionLocal, SimulationRun, get_db

logger = logging.getLogger(__name__)

router = APIRouter()

# Store task results
TASKS: Dict[str, Dict[str, Any]] = {}


def _scenario_report(scenario: Scenario) -> Dict[str, Any]:
    """Sweep summary when the scenario simulates, otherwise its limits or isolation report."""
    if scenario.simulation is not None:
        points = run_points(scenario)
        summaries = []
        for i, point in enumerate(points):
            summary = average_point(point, scenario)
            summary.pop("spectra")
            summary["index"] = i
            summaries.append(summary)
        return {"command": "sweep-gain", "scenario": scenario.name, "points": summaries}
    if scenario.limits:
        return {"command": "limits", **limits_report(scenario)}
    if scenario.isolation is not None:
        _, resonances, attenuation = isolation_tables(scenario.isolation, scenario.bode)
        return {"command": "isolation", "scenario": scenario.name,
                "attenuation": attenuation, "resonances": resonance_list(resonances)}
    raise ConfigError("scenario has nothing to run: no simulation, limits or isolation section")


def process_scenario(task_id: str, scenario: Scenario, run_id: int) -> None:
    """Run the scenario and store the report; runs on the background thread pool."""
    db = SessionLocal()
    try:
        db_record = db.get(SimulationRun, run_id)
        TASKS[task_id] = {"status": "processing", "run_id": run_id}
        try:
            report = _scenario_report(scenario)
        except Exception as e:
            logger.error(f"Scenario {scenario.name} failed: {type(e).__name__}: {str(e)}")
            db_record.status = "Failed"
            db_record.processing_notes = f"{type(e).__name__}: {str(e)}"
            db.commit()
            TASKS[task_id] = {"status": "error", "message": str(e), "error": type(e).__name__, "run_id": run_id}
            return
        db_record.command = report["command"]
        db_record.status = "Completed"
        db_record.processing_notes = "Completed successfully"
        db_record.report = report
        db.commit()
        TASKS[task_id] = {"status": "completed", "run_id": run_id, "report": report}
    finally:
        db.close()


@router.post("/scenarios/")
async def upload_scenario(
    background_tasks: BackgroundTasks,
    file: UploadFile = File(...),
    db: Session = Depends(get_db)
) -> Dict[str, Any]:
    """Upload a scenario YAML and run it asynchronously"""
    try:
        data = yaml.safe_load(await file.read())
    except yaml.YAMLError as e:
        raise HTTPException(status_code=422, detail={"message": f"invalid YAML: {str(e)}", "field": None})
    try:
        scenario = parse_scenario(data)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail={"message": str(e), "field": e.field})

    seed = scenario.simulation.seed if scenario.simulation else None
    db_record = SimulationRun(scenario_name=scenario.name, status="Processing",
                              seed=str(seed) if seed is not None else None)
    db.add(db_record)
    db.commit()
    db.refresh(db_record)

    task_id = str(uuid.uuid4())
    TASKS[task_id] = {"status": "processing", "run_id": db_record.id}
    background_tasks.add_task(process_scenario, task_id, scenario, db_record.id)
    return {"task_id": task_id, "run_id": db_record.id}


@router.get("/status/{task_id}")
async def get_task_status(task_id: str) -> Dict[str, Any]:
    """Get the status of a scenario run"""
    if task_id not in TASKS:
        raise HTTPException(status_code=404, detail="Task not found")
    return TASKS[task_id]


@router.post("/limits")
async def compute_limits(limit: LimitScenario) -> Dict[str, Any]:
    """Detection-limited minimum temperature and phonon number of one mode"""
    try:
        return limit_entry(limit)
    except LevitwinError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/isolation")
async def compute_isolation(chain: IsolationChain) -> Dict[str, Any]:
    """Resonances and 50-70 Hz attenuation of an isolation chain"""
    try:
        _, resonances, attenuation = isolation_tables(chain)
    except LevitwinError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return {"resonances": resonance_list(resonances), "attenuation": attenuation}


@router.get("/presets")
async def get_presets() -> Dict[str, List[str]]:
    """Shipped scenario names and mode presets"""
    return {"scenarios": scenario_names(), "modes": sorted(load_presets()["modes"])}


@router.get("/runs/")
async def get_runs(db: Session = Depends(get_db)):
    """Get list of all scenario runs"""
    runs = db.query(SimulationRun).order_by(SimulationRun.created_at.desc()).all()
    return [{
        "id": run.id,
        "scenario_name": run.scenario_name,
        "command": run.command,
        "status": run.status,
        "seed": run.seed,
        "created_at": run.created_at,
        "processing_notes": run.processing_notes
    } for run in runs]


@router.get("/runs/{run_id}")
async def get_run(run_id: int, db: Session = Depends(get_db)):
    """Get the stored report of one run"""
    run = db.query(SimulationRun).filter(SimulationRun.id == run_id).first()
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return {
        "id": run.id,
        "metadata": {
            "scenario_name": run.scenario_name,
            "command": run.command,
            "status": run.status,
            "seed": run.seed,
            "created_at": run.created_at,
            "processing_notes": run.processing_notes
        },
        "report": run.report
    }
