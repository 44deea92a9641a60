"""Run the full pipeline against scripted backends, no network needed.

Builds a synthetic 15-page document (1x1 PNG pages), screens it into three
batches, fans four flagged excerpts out to five scripted jurors, aggregates
with the heuristic decision tree, and writes a complete run directory.

Usage: python3 demo/run_demo.py [output-dir]
"""
import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from pipeline_fixtures import standard_config  # noqa: E402

from biasaudit import pipeline  # noqa: E402
from biasaudit.config import config_from_dict  # noqa: E402


def main() -> int:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo-run")
    with tempfile.TemporaryDirectory() as scratch:
        cfg = config_from_dict(standard_config(Path(scratch)), base_dir=scratch)
        result = pipeline.run(cfg, out_dir=out_dir)

    print(f"run directory: {out_dir}")
    for verdict in result.verdicts:
        flag = "  [human review]" if verdict.human_review else ""
        print(
            f"  {verdict.excerpt_id}: severity {verdict.severity}, "
            f"{verdict.category.label}{flag}"
        )
    summary = json.loads((out_dir / "summary.json").read_text())
    print(f"mean severity: {summary['severity']['mean']}")
    print(f"total cost: ${summary['cost']['total']}")
    print(f"open {out_dir / 'report.html'} in a browser for the full report")
    return 0


if __name__ == "__main__":
    sys.exit(main())
