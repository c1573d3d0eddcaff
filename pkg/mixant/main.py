import logging
from typing import List

from fastapi import APIRouter, Depends, FastAPI, HTTPException
from pydantic import BaseModel
from sqlalchemy.orm import Session

from mixant import __version__, database
from mixant.crud import RunManager
from mixant.errors import MixAntError
from mixant.metrics import moc
from mixant.settings import LOG_LEVEL

app = FastAPI(
    title="MixANT Results API",
    description="Read access to registered MixANT training runs and their MoC evaluations.",
    version=__version__,
    license_info={
        "name": "MIT",
        "url": "https://opensource.org/licenses/MIT",
    },
)

# Set up logging
logging.basicConfig(level=LOG_LEVEL)
logger = logging.getLogger(__name__)

router = APIRouter()


class MocRequest(BaseModel):
    predicted: List[int]
    ground_truth: List[int]


@router.get("/runs", tags=["Runs"])
def list_runs(db: Session = Depends(database.get_db)):
    """
    List every registered training run.

    Args:
        db (Session): The database session.

    Returns:
        dict: The runs, oldest first.
    """
    runs = RunManager(db).list_runs()
    return {"status": "success", "data": [run.to_dict() for run in runs]}


@router.get("/runs/{run_id}", tags=["Runs"])
def get_run(run_id: int, db: Session = Depends(database.get_db)):
    """
    Retrieve a training run by its ID.

    Args:
        run_id (int): The ID of the run to retrieve.
        db (Session): The database session.

    Returns:
        dict: The run details.

    Raises:
        HTTPException: If the run is not found.
    """
    run = RunManager(db).get_run(run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return {"status": "success", "data": run.to_dict()}


@router.get("/runs/{run_id}/evaluations", tags=["Runs", "Evaluations"])
def get_run_evaluations(run_id: int, db: Session = Depends(database.get_db)):
    """
    List the evaluations recorded for a run.

    Raises:
        HTTPException: If the run is not found.
    """
    manager = RunManager(db)
    if not manager.get_run(run_id):
        raise HTTPException(status_code=404, detail="Run not found")
    return {"status": "success", "data": [e.to_dict() for e in manager.get_evaluations(run_id)]}


@router.get("/evaluations/best", tags=["Evaluations"])
def get_best_evaluation(alpha: float, beta: float, db: Session = Depends(database.get_db)):
    """
    Retrieve the evaluation with the highest Top-1 MoC at an observation/anticipation ratio.

    Args:
        alpha (float): Observation ratio.
        beta (float): Anticipation ratio.
        db (Session): The database session.

    Returns:
        dict: The evaluation together with the name of its run.

    Raises:
        HTTPException: If nothing was evaluated at that ratio.
    """
    evaluation = RunManager(db).best_evaluation(alpha, beta)
    if not evaluation:
        raise HTTPException(status_code=404, detail="No evaluation at this ratio")
    data = evaluation.to_dict()
    data["run_name"] = evaluation.run.name
    return {"status": "success", "data": data}


@router.post("/moc", tags=["Metrics"])
def score_moc(request: MocRequest):
    """
    Score a predicted label sequence against the ground truth of the same window.

    Raises:
        HTTPException: If the sequences are empty or of different lengths.
    """
    try:
        value = moc(request.predicted, request.ground_truth)
    except MixAntError as e:
        logger.error(f"MoC request rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    return {"status": "success", "data": {"moc": value}}


app.include_router(router)
