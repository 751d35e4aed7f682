"""HTTP front end. Every route is a thin wrapper over ``operations``."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from . import __version__, operations
from .errors import NTKCPLError
from .schemas import (DiagnoseRequest, DiagnosticReport, ErrorBody, IngestRequest, IngestResponse, ReportRequest,
                      ReportResponse, RunRequest, RunResponse, SelectRequest, SelectResponse)

# error exit codes -> HTTP status
_STATUS = {2: 400, 3: 422, 4: 409}

app = FastAPI(title="ntkcpl", version=__version__)


@app.exception_handler(NTKCPLError)
async def _domain_error(request: Request, exc: NTKCPLError):
    body = ErrorBody(error=str(exc), kind=type(exc).__name__, exit_code=exc.exit_code)
    return JSONResponse(status_code=_STATUS.get(exc.exit_code, 500), content=body.model_dump())


@app.exception_handler(RequestValidationError)
async def _bad_request(request: Request, exc: RequestValidationError):
    # malformed request bodies are configuration errors
    body = ErrorBody(error=str(exc.errors()), kind="ConfigError", exit_code=2)
    return JSONResponse(status_code=400, content=body.model_dump())


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/ingest", response_model=IngestResponse)
def ingest(req: IngestRequest):
    return operations.ingest(req)


@app.post("/run", response_model=RunResponse)
def run(req: RunRequest):
    return operations.run(req)


@app.post("/select", response_model=SelectResponse)
def select(req: SelectRequest):
    return operations.select(req)


@app.post("/diagnose", response_model=DiagnosticReport)
def diagnose(req: DiagnoseRequest):
    return operations.diagnose(req)


@app.post("/report", response_model=ReportResponse)
def report(req: ReportRequest):
    return operations.report(req)
