from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from dotenv import load_dotenv
from contextlib import asynccontextmanager
import logging
import os

# Load environment variables at startup
load_dotenv()

from levitwin import __version__
from levitwin.api.endpoints import router as api_router
from levitwin.db import create_db_and_tables

logging.basicConfig(
    level=getattr(logging, os.getenv("LEVITWIN_LOG", "INFO").upper(), logging.INFO),
    format='%(asctime)s - %(levelname)s - %(message)s'
)

@asynccontextmanager
async def lifespan(app: FastAPI):
    """Lifespan context manager for database initialization"""
    create_db_and_tables()
    yield

app = FastAPI(
    title="levitwin",
    description="API for simulating and analyzing feedback cooling of a levitated magnet",
    version=__version__,
    lifespan=lifespan
)

# Configure CORS for lab dashboards
app.add_middleware(
    CORSMiddleware,
    allow_origins=[os.getenv("FRONTEND_URL", "http://localhost:3000")],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(api_router, prefix="/api/v1", tags=["levitwin"])

@app.get("/")
async def root() -> dict:
    """Root endpoint providing basic API information"""
    return {
        "message": "levitwin: digital twin of a feedback-cooled levitated magnet",
        "version": __version__,
        "docs_url": "/docs"
    }
