from .models import SimulationRun, Base
from .session import SessionLocal, engine, get_db, create_db_and_tables

__all__ = [
    'SimulationRun',
    'Base',
    'SessionLocal',
    'engine',
    'get_db',
    'create_db_and_tables',
]
