"""Score a batch of answers with the judge prompts.

The judge here is scripted: its replies are read from the fixture used by
the test suite, so the report is reproducible. Swap in
``OpenAIChatLLM(...)`` to judge with a live model.
"""

from pathlib import Path

from hypermem import ScriptedLLM, run_eval
from hypermem.eval import format_report, read_manifest

EVAL = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "eval"

records = read_manifest(EVAL / "manifest.jsonl")
print(f"{len(records)} records; first: {records[0].query!r}")

report = run_eval(records, ScriptedLLM.from_file(EVAL / "judge.jsonl"))
print(format_report(report))

# per-record detail: None marks a score the judge never produced in range
for r in report["records"][:5]:
    print(r["id"], r["correct"], r["scores"])
