"""Pytest hooks for the acceptance gate.

test_acceptance.py carries the package's quality gate: eleven numbered
checks, each one test function. The summary hook below prints one PASS/FAIL
line per gate check at the end of the run so the gate's verdict is readable
without scrolling through the full test listing.
"""

import os

import torch

# The training-time checks are budgeted for a small CPU box; cap threads so
# timings stay comparable across machines.
torch.set_num_threads(min(8, os.cpu_count() or 1))

GATE_PREFIX = "test_gate_"

GATE_LABELS = {
    1: "AHD matches the exhaustive pairwise oracle",
    2: "AHD hand values and resolution normalization",
    3: "mAHD threshold grouping counts and means",
    4: "IoU family matches pixel-counting oracles",
    5: "codec round-trip quality on held-out masks",
    6: "transformer causality, loss masking, gradients, RoPE",
    7: "toy model trains to the IoU bar within budget",
    8: "decoding contracts (length, range, reproducibility)",
    9: "annotation filter fixture set and idempotence",
    10: "attention aligns with the column above (probe)",
    11: "end-to-end pipeline is byte-deterministic",
}


def _gate_number(nodeid):
    name = nodeid.rsplit("::", 1)[-1]
    if not name.startswith(GATE_PREFIX):
        return None
    digits = name[len(GATE_PREFIX):].split("_", 1)[0]
    return int(digits) if digits.isdigit() else None


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for category, verdict in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(category, []):
            number = _gate_number(getattr(report, "nodeid", ""))
            if number is not None and outcomes.get(number) != "FAIL":
                outcomes[number] = verdict
    if not outcomes:
        return
    terminalreporter.write_sep("-", "acceptance gate")
    for number in sorted(outcomes):
        label = GATE_LABELS.get(number, "")
        terminalreporter.write_line(f"[gate {number:02d}] {outcomes[number]} - {label}")
