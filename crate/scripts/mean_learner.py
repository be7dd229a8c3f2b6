"""Minimal external learner: predicts the training mean of y."""

import json
import sys

models = []
for line in sys.stdin:
    req = json.loads(line)
    op = req.get("op")
    if op == "shutdown":
        break
    if op == "train":
        y = req["y"]
        models.append(sum(y) / len(y) if y else 0.0)
        resp = {"ok": True, "model": len(models) - 1}
    elif op == "predict":
        mu = models[req["model"]]
        resp = {"ok": True, "y": [mu] * len(req["x"])}
    else:
        resp = {"ok": False, "error": f"unknown op {op!r}"}
    sys.stdout.write(json.dumps(resp) + "\n")
    sys.stdout.flush()
