from datetime import datetime, timezone
import json
from sqlalchemy import Column, Integer, String, DateTime, Text, TypeDecorator
from sqlalchemy.orm import declarative_base

from levitwin.core.io import dumps

Base = declarative_base()

class JSONEncodedDict(TypeDecorator):
    """Represents a JSON structure as a text-based column."""
    impl = Text
    cache_ok = True

    def process_bind_param(self, value, dialect):
        if value is not None:
            return dumps(value)
        return None

    def process_result_value(self, value, dialect):
        if value is not None:
            return json.loads(value)
        return None

class SimulationRun(Base):
    __tablename__ = "simulation_run"

    # --- Metadata ---
    id = Column(Integer, primary_key=True, index=True)
    scenario_name = Column(String, index=True)
    command = Column(String, default="sweep-gain")  # sweep-gain, simulate, limits, isolation
    status = Column(String, default="Processing")  # Processing, Completed, Failed
    seed = Column(String, nullable=True)  # u64 does not fit a signed SQLite integer
    processing_notes = Column(Text, nullable=True)

    # --- Results ---
    report = Column(JSONEncodedDict, nullable=True)

    # --- Timestamps ---
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
    updated_at = Column(DateTime, default=lambda: datetime.now(timezone.utc), onupdate=lambda: datetime.now(timezone.utc))

    def __repr__(self):
        return f"<SimulationRun(id={self.id}, scenario='{self.scenario_name}', status='{self.status}')>"
