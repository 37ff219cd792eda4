"""Record the pinned golden session transcript (structure-only fields)."""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "tests"))

from test_engine import GOLDEN, record_golden

GOLDEN.parent.mkdir(parents=True, exist_ok=True)
GOLDEN.write_text(json.dumps(record_golden(), indent=1))
print(f"wrote {GOLDEN} ({len(json.loads(GOLDEN.read_text()))} events)")
