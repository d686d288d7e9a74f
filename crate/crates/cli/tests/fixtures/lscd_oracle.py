# Brute-force LSCD for lscd_train.csv / lscd_eval.csv. Writes lscd_expected.json.
# Rows are `id,ground_truth,predicted,z0,z1,...` with a header line.
import csv, json, math

def load(path):
    with open(path) as f:
        rows = list(csv.reader(f))[1:]
    return [(int(r[1]), [float(x) for x in r[3:]]) for r in rows]

train, ev = load("lscd_train.csv"), load("lscd_eval.csv")
centroid = {}
for c in sorted({y for y, _ in train}):
    pts = [v for y, v in train if y == c]
    centroid[c] = [sum(col) / len(pts) for col in zip(*pts)]
per_class = {}
for c in sorted({y for y, _ in ev}):
    d = [math.dist(v, centroid[c]) for y, v in ev if y == c]
    per_class[str(c)] = sum(d) / len(d)
agg = sum(per_class.values()) / len(per_class)
with open("lscd_expected.json", "w") as f:
    json.dump({"aggregate": agg, "per_class": per_class}, f, indent=2)
    f.write("\n")
