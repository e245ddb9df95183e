import os
import tempfile

# The service engine is created at import time, so point it at a scratch database first.
os.environ.setdefault("DATABASE_URL", f"sqlite:///{tempfile.mkdtemp(prefix='levitwin-test-')}/test.db")
os.environ.setdefault("LEVITWIN_LOG", "WARNING")
