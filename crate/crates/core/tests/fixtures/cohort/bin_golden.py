"""Independent binning of events.csv into the expected trajectories.

Writes golden.jsonl next to this file. Rules: 4-hour bins anchored at each
patient's first event; mean for observations, sum for fluid_ml, max for
vaso_rate, max for sofa/sirs, any-positive for mech_vent; empty bins and
unobserved features carry the previous bin forward; a feature missing before
its first observation takes the cohort median of observed bin values
(linear-interpolation median); sofa/sirs/mech_vent start at 0/0/false.
"""
import csv
import json
import os
from collections import OrderedDict
from datetime import datetime, timezone

HERE = os.path.dirname(os.path.abspath(__file__))
DOSE = {"fluid_ml", "vaso_rate"}
RESERVED = {"fluid_ml", "vaso_rate", "mech_vent", "sofa", "sirs"}


def parse_ts(s):
    if s.endswith("Z"):
        return int(datetime.strptime(s, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc).timestamp())
    return int(datetime.strptime(s, "%Y-%m-%dT%H:%M:%S").replace(tzinfo=timezone.utc).timestamp())


def median(xs):
    xs = sorted(xs)
    h = 0.5 * (len(xs) - 1)
    lo, hi = int(h // 1), int(-(-h // 1))
    if lo == hi:
        return xs[lo]
    return xs[lo] + (xs[hi] - xs[lo]) * (h - lo)


schema = json.load(open(os.path.join(HERE, "schema.json")))
names = [f["name"] for f in schema["features"]]

events = []
with open(os.path.join(HERE, "events.csv")) as fh:
    for line, row in enumerate(csv.DictReader(fh), start=2):
        if row["channel"] not in names and row["channel"] not in RESERVED:
            continue
        events.append((row["patient_id"], parse_ts(row["timestamp"]), line, row["channel"], float(row["value"])))

demo = {}
with open(os.path.join(HERE, "demographics.csv")) as fh:
    for row in csv.DictReader(fh):
        demo[row["patient_id"]] = row

patients = {}
for pid, ts, line, ch, v in events:
    patients.setdefault(pid, []).append((ts, line, ch, v))

bins_by_patient = {}
for pid, evs in patients.items():
    evs.sort()
    t0 = evs[0][0]
    n = (evs[-1][0] - t0) // 14400 + 1
    bins = [dict(obs={}, fluid=0.0, vaso=0.0, vent=None, sofa=None, sirs=None) for _ in range(n)]
    for ts, _, ch, v in evs:
        b = bins[(ts - t0) // 14400]
        if ch == "fluid_ml":
            b["fluid"] += v
        elif ch == "vaso_rate":
            b["vaso"] = max(b["vaso"], v)
        elif ch == "mech_vent":
            b["vent"] = bool(b["vent"]) or v > 0
        elif ch in ("sofa", "sirs"):
            b[ch] = v if b[ch] is None else max(b[ch], v)
        else:
            s, c = b["obs"].get(ch, (0.0, 0))
            b["obs"][ch] = (s + v, c + 1)
    bins_by_patient[pid] = bins

medians = {}
for name in names:
    vals = [s / c for bins in bins_by_patient.values() for b in bins for (k, (s, c)) in b["obs"].items() if k == name]
    medians[name] = median(vals)

out = []
for pid in sorted(bins_by_patient):
    d = demo[pid]
    last = {}
    vent, sofa, sirs = False, 0.0, 0.0
    steps = []
    for i, b in enumerate(bins_by_patient[pid]):
        feats, imputed = {}, []
        for name in names:
            if name in b["obs"]:
                s, c = b["obs"][name]
                last[name] = s / c
                feats[name] = s / c
            else:
                imputed.append(name)
                feats[name] = last.get(name, medians[name])
        vent = vent if b["vent"] is None else b["vent"]
        sofa = sofa if b["sofa"] is None else b["sofa"]
        sirs = sirs if b["sirs"] is None else b["sirs"]
        step = OrderedDict(
            bin_index=i,
            features=OrderedDict(sorted(feats.items())),
            fluid_dose=b["fluid"],
            vaso_dose=b["vaso"],
            mech_vent=vent,
            sofa=int(round(sofa)),
            sirs=int(round(sirs)),
        )
        if imputed:
            step["imputed"] = sorted(imputed)
        steps.append(step)
    comorb = OrderedDict(sorted((k, d[k] == "1") for k in schema["comorbidities"]))
    out.append(OrderedDict(
        patient_id=pid,
        demographics=OrderedDict(age=float(d["age"]), gender=d["gender"], weight=float(d["weight"]), comorbidities=comorb),
        timesteps=steps,
        died=d["died"] == "1",
    ))

with open(os.path.join(HERE, "golden.jsonl"), "w") as fh:
    for p in out:
        fh.write(json.dumps(p, separators=(",", ":")) + "\n")
