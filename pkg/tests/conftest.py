from __future__ import annotations

import os

os.environ.setdefault("API_KEY", "testkey")
os.environ.setdefault("ZDALAB_OUTPUT_DIR", "/tmp/zdalab-runs")
os.environ.setdefault("LOG_LEVEL", "INFO")
os.environ.setdefault("CACHE_TTL_SECONDS", "1")
os.environ.setdefault("PORT", "8000")
