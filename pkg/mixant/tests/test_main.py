import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from mixant.database import Base, get_db
from mixant.main import app
from mixant.models import Evaluation, TrainingRun

# Test database URL
SQLALCHEMY_DATABASE_URL = "sqlite:///./test.db"

engine = create_engine(SQLALCHEMY_DATABASE_URL, connect_args={"check_same_thread": False})
TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def override_get_db():
    try:
        db = TestingSessionLocal()
        yield db
    finally:
        db.close()


app.dependency_overrides[get_db] = override_get_db

client = TestClient(app)


@pytest.fixture(scope="function")
def db():
    Base.metadata.create_all(bind=engine)
    yield
    Base.metadata.drop_all(bind=engine)


def _add_run(name="baseline", n_experts=5):
    db = TestingSessionLocal()
    run = TrainingRun(
        name=name,
        checkpoint_dir=f"ckpt/{name}",
        seed=0,
        n_experts=n_experts,
        n_static_blocks=3,
        router_mode="unified",
        lambda_lb=0.15,
        final_rec_loss=0.1,
        final_lb_loss=0.01,
        epochs=30,
        config_json="{}",
    )
    db.add(run)
    db.commit()
    run_id = run.id
    db.close()
    return run_id


def _add_evaluation(run_id, alpha, beta, top1):
    db = TestingSessionLocal()
    db.add(Evaluation(run_id=run_id, alpha=alpha, beta=beta, samples=25, mean_moc=top1 / 2, top1_moc=top1))
    db.commit()
    db.close()


def test_list_runs(db):
    _add_run("a")
    _add_run("b")
    response = client.get("/runs")
    assert response.status_code == 200
    assert [run["name"] for run in response.json()["data"]] == ["a", "b"]


def test_get_run(db):
    run_id = _add_run()
    response = client.get(f"/runs/{run_id}")
    assert response.status_code == 200
    data = response.json()["data"]
    assert response.json()["status"] == "success"
    assert data["name"] == "baseline"
    assert data["n_experts"] == 5
    assert data["lambda_lb"] == 0.15


def test_get_nonexistent_run(db):
    response = client.get("/runs/999")
    assert response.status_code == 404
    assert response.json() == {"detail": "Run not found"}


def test_get_run_evaluations(db):
    run_id = _add_run()
    _add_evaluation(run_id, 0.2, 0.1, 30.0)
    _add_evaluation(run_id, 0.2, 0.5, 18.0)
    response = client.get(f"/runs/{run_id}/evaluations")
    assert response.status_code == 200
    assert [e["beta"] for e in response.json()["data"]] == [0.1, 0.5]


def test_get_evaluations_of_nonexistent_run(db):
    assert client.get("/runs/999/evaluations").status_code == 404


def test_best_evaluation(db):
    baseline = _add_run("baseline", n_experts=1)
    mixture = _add_run("mixture", n_experts=5)
    _add_evaluation(baseline, 0.2, 0.1, 30.0)
    _add_evaluation(mixture, 0.2, 0.1, 34.0)
    response = client.get("/evaluations/best", params={"alpha": 0.2, "beta": 0.1})
    assert response.status_code == 200
    data = response.json()["data"]
    assert data["run_name"] == "mixture"
    assert data["top1_moc"] == 34.0


def test_best_evaluation_not_found(db):
    response = client.get("/evaluations/best", params={"alpha": 0.3, "beta": 0.5})
    assert response.status_code == 404


def test_score_moc():
    response = client.post("/moc", json={"predicted": [0, 0, 0, 0], "ground_truth": [0, 0, 1, 1]})
    assert response.status_code == 200
    assert response.json() == {"status": "success", "data": {"moc": 50.0}}


def test_score_moc_rejects_unequal_lengths():
    response = client.post("/moc", json={"predicted": [0, 1], "ground_truth": [0]})
    assert response.status_code == 400
