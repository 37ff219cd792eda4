"""Pin the untrained-model baseline evaluation report."""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "tests"))

from test_evalsuite import EvalConfig, eval_scripts, run_eval, small_params

params, wc = small_params(untrained=True)
scripts = eval_scripts(wc)
report = run_eval(params, wc, scripts, EvalConfig(seed=5, n_scripts=len(scripts)))
pin = Path(__file__).parent.parent / "tests" / "data" / "baseline_report.json"
agg = {k: round(v, 4) for k, v in report["aggregate"].items() if v is not None}
pin.write_text(json.dumps({"aggregate": agg}, indent=1))
print(f"wrote {pin}: {agg}")
