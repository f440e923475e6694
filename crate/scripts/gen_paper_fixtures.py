#!/usr/bin/env python3
"""Generate the paper-shaped evaluation fixtures in fixtures/paper/.

Independent of the Rust code: counts are back-solved here and every derived
figure is re-checked with exact decimal arithmetic before anything is written.

Outputs (newline-delimited JSON):
  merged.jsonl          500 merged decisions (accuracy report input)
  coder_a.jsonl         coder A's annotations
  coder_b.jsonl         coder B's annotations
  adjudications.jsonl   resolutions for every cell where A and B differ
"""

import json
import random
import sys
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path

UNITS = 500
SEED = 2023

BOOLEANS = [
    "is_sale",
    "is_initial_access",
    "is_targeting_large_organization",
    "is_targeting_critical_infrastructure",
    "is_remotely_exploitable",
    "is_actively_exploitable",
    "is_geopolitics",
]
CONDITIONAL = ["targeted_technologies", "industries"]
ROWS = ["summary"] + BOOLEANS + CONDITIONAL

# Correct merged judgments per row; conditional rows as (correct, applicable).
CORRECT = {
    "summary": (494, UNITS),
    "is_sale": (486, UNITS),
    "is_initial_access": (495, UNITS),
    "is_targeting_large_organization": (481, UNITS),
    "is_targeting_critical_infrastructure": (475, UNITS),
    "is_remotely_exploitable": (491, UNITS),
    "is_actively_exploitable": (497, UNITS),
    "is_geopolitics": (480, UNITS),
    "targeted_technologies": (114, 115),
    "industries": (273, 273),
}

# Published accuracy table.
TABLE2 = {
    "summary": "98.8",
    "is_sale": "97.2",
    "is_initial_access": "99.0",
    "is_targeting_large_organization": "96.2",
    "is_targeting_critical_infrastructure": "95.0",
    "is_remotely_exploitable": "98.2",
    "is_actively_exploitable": "99.4",
    "is_geopolitics": "96.0",
    "targeted_technologies": "99.1",
    "industries": "100.0",
}

# Inter-coder disagreements per row (out of 500 units each).
DISAGREE = {
    "summary": 3,
    "is_sale": 9,
    "is_initial_access": 8,
    "is_targeting_large_organization": 19,
    "is_targeting_critical_infrastructure": 16,
    "is_remotely_exploitable": 9,
    "is_actively_exploitable": 4,
    "is_geopolitics": 13,
    "targeted_technologies": 8,
    "industries": 1,
}
# Units where coder B also disagrees on whether industries applies.
PRESENCE_CONFLICTS = 2


def pct(num, den):
    return (Decimal(num) * 100 / Decimal(den)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


def check_arithmetic():
    for row, (num, den) in CORRECT.items():
        got = pct(num, den)
        assert str(got) == TABLE2[row], (row, got, TABLE2[row])
    exact = [Fraction(n * 100, d) for n, d in CORRECT.values()]
    mean = sum(exact) / len(exact)
    assert abs(float(mean) - 97.89) <= 0.05, float(mean)
    weighted = Fraction(sum(n for n, _ in CORRECT.values()) * 100, sum(d for _, d in CORRECT.values()))
    assert abs(float(weighted) - 97.675) < 0.001, float(weighted)

    agree = {row: pct(UNITS - d, UNITS) for row, d in DISAGREE.items()}
    mean_agree = sum(Fraction(UNITS - d, UNITS) * 100 for d in DISAGREE.values()) / len(DISAGREE)
    assert mean_agree == Fraction(982, 10), float(mean_agree)
    assert min(agree.values()) == Decimal("96.2")
    assert max(agree.values()) == Decimal("99.8")
    assert sum(DISAGREE.values()) == 90
    return float(mean), float(weighted)


def build(rng):
    units = [f"p-{i:04d}" for i in range(1, UNITS + 1)]
    merged = {u: {"judgments": {}, "summary": 1, "presence": {}} for u in units}

    for row in ["summary"] + BOOLEANS:
        correct, _ = CORRECT[row]
        wrong = set(rng.sample(units, UNITS - correct))
        for u in units:
            bit = 0 if u in wrong else 1
            if row == "summary":
                merged[u]["summary"] = bit
            else:
                merged[u]["judgments"][row] = bit

    for row in CONDITIONAL:
        correct, applicable = CORRECT[row]
        present = rng.sample(units, applicable)
        wrong = set(rng.sample(present, applicable - correct))
        present = set(present)
        for u in units:
            merged[u]["presence"][row] = u in present
            # Judgments on non-applicable units are not scored; coders mark
            # them as agreeing with an empty value.
            merged[u]["judgments"][row] = 0 if u in wrong else 1

    coder_b = {u: json.loads(json.dumps(merged[u])) for u in units}
    conflicts = {u: {} for u in units}
    for row, count in DISAGREE.items():
        for u in rng.sample(units, count):
            if row == "summary":
                coder_b[u]["summary"] ^= 1
                conflicts[u]["summary"] = merged[u]["summary"]
            else:
                coder_b[u]["judgments"][row] ^= 1
                conflicts[u].setdefault("judgments", {})[row] = merged[u]["judgments"][row]
    for u in rng.sample(units, PRESENCE_CONFLICTS):
        coder_b[u]["presence"]["industries"] = not coder_b[u]["presence"]["industries"]
        conflicts[u].setdefault("presence", {})["industries"] = merged[u]["presence"]["industries"]
    return units, merged, coder_b, conflicts


def annotation(unit, rec, coder):
    return {
        "coder_id": coder,
        "judgments": rec["judgments"],
        "presence": rec["presence"],
        "summary_judgment": rec["summary"],
        "unit_id": unit,
    }


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "fixtures" / "paper"
    mean, weighted = check_arithmetic()
    rng = random.Random(SEED)
    units, merged, coder_b, conflicts = build(rng)

    # Re-derive every figure from the generated records.
    for row in ROWS:
        if row in CONDITIONAL:
            den = [u for u in units if merged[u]["presence"][row]]
            num = sum(merged[u]["judgments"][row] for u in den)
            assert (num, len(den)) == CORRECT[row], row
        else:
            key = (lambda u: merged[u]["summary"]) if row == "summary" else (lambda u, r=row: merged[u]["judgments"][r])
            assert sum(key(u) for u in units) == CORRECT[row][0], row
    for row, count in DISAGREE.items():
        if row == "summary":
            diff = sum(merged[u]["summary"] != coder_b[u]["summary"] for u in units)
        else:
            diff = sum(merged[u]["judgments"][row] != coder_b[u]["judgments"][row] for u in units)
        assert diff == count, row

    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(
        out / "merged.jsonl",
        (
            {
                "judgments": merged[u]["judgments"],
                "presence": merged[u]["presence"],
                "resolved_by": "adjudication" if conflicts[u] else "auto-consensus",
                "summary_judgment": merged[u]["summary"],
                "unit_id": u,
            }
            for u in units
        ),
    )
    write_jsonl(out / "coder_a.jsonl", (annotation(u, merged[u], "coder_a") for u in units))
    write_jsonl(out / "coder_b.jsonl", (annotation(u, coder_b[u], "coder_b") for u in units))
    adjudications = []
    for u in units:
        c = conflicts[u]
        if not c:
            continue
        rec = {"unit_id": u, "judgments": c.get("judgments", {}), "presence": c.get("presence", {})}
        if "summary" in c:
            rec["summary_judgment"] = c["summary"]
        adjudications.append(rec)
    write_jsonl(out / "adjudications.jsonl", adjudications)
    print(
        f"wrote {out}: unweighted mean {mean:.3f}, weighted mean {weighted:.3f}, "
        f"{sum(DISAGREE.values())} judgment conflicts on {len(adjudications)} units"
    )


if __name__ == "__main__":
    main()
