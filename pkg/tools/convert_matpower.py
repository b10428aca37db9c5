"""Convert a PYPOWER/MATPOWER case dict into the package's JSON case schema.

Usage::

    python tools/convert_matpower.py path/to/pypower/case118.py out.json [--pmus 1,5,9]

Conversion rules:
  * series admittance g + jb = 1 / (r + jx);
  * bus shunt_b = Bs / baseMVA plus half the charging of every incident line;
  * tap = 1 / ratio (ratio 0 means 1); shift converted to radians;
  * out-of-service branches dropped; parallel branches with equal tap and
    shift merged by summing admittances;
  * vm, va taken from the solved bus data (va converted to radians).
"""
import argparse
import importlib.util
import json
import math
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from hybrid_se.network import greedy_pmu_placement, parse_case  # noqa: E402


def load_ppc(path):
    path = pathlib.Path(path)
    spec = importlib.util.spec_from_file_location(path.stem, path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return getattr(mod, path.stem)()


def convert(ppc, name):
    base = ppc["baseMVA"]
    shunt = {int(row[0]): row[5] / base for row in ppc["bus"]}
    merged = {}
    for row in ppc["branch"]:
        if row[10] == 0:
            continue
        f, t = int(row[0]), int(row[1])
        y = 1.0 / complex(row[2], row[3])
        ratio = row[8] if row[8] != 0 else 1.0
        tap, shift = 1.0 / ratio, math.radians(row[9])
        shunt[f] += row[4] / 2
        shunt[t] += row[4] / 2
        key = frozenset((f, t))
        if key in merged:
            prev = merged[key]
            if (prev["tap"], prev["shift"]) != (tap, shift) or prev["from"] != f:
                raise ValueError(f"cannot merge parallel branches {f}-{t}")
            prev["g"] += y.real
            prev["b"] += y.imag
        else:
            merged[key] = {"from": f, "to": t, "g": y.real, "b": y.imag,
                           "tap": tap, "shift": shift}
    buses = [{"id": int(row[0]), "vm": float(row[7]), "va": math.radians(row[8]),
              "shunt_b": float(shunt[int(row[0])])} for row in ppc["bus"]]
    return {"name": name, "buses": buses, "branches": list(merged.values()),
            "pmu_buses": []}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source")
    ap.add_argument("out")
    ap.add_argument("--pmus", help="comma-separated PMU bus ids (default: greedy)")
    args = ap.parse_args()
    doc = convert(load_ppc(args.source), pathlib.Path(args.out).stem)
    if args.pmus:
        doc["pmu_buses"] = sorted(int(p) for p in args.pmus.split(","))
    else:
        doc["pmu_buses"] = greedy_pmu_placement(parse_case(doc))
    case = parse_case(doc)
    with open(args.out, "w") as fh:
        json.dump(case.to_dict(), fh, indent=1)
        fh.write("\n")
    print(f"{args.out}: {case.n_bus} buses, {len(case.branches)} branches, "
          f"{len(case.pmu_buses)} PMUs")


if __name__ == "__main__":
    main()
