#!/usr/bin/env python3
"""External trainer speaking the exec protocol, mock mode only.

Reads one task record on stdin and reproduces the built-in mock backend:
FNV-1a 64 of "{seed}|{config}|{mode}|{eval or -}|{train folds}|{epochs}"
over 2**64, one checkpoint per epoch, previous epoch removed.

Fault switches for tests:
  --exit-after-epoch N   exit(3) right after epoch N is reported
  --metric X             report X for every epoch and the result
  --error MSG            send an error record before training
"""

import argparse
import json
import os
import sys

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211


def fnv1a64(data):
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def mock_metric(task, epochs):
    folds = ",".join(str(f) for f in task["train_folds"])
    ev = "-" if task.get("eval_fold") is None else str(task["eval_fold"])
    key = f"{task['seed']}|{task['config']['index']}|{task['mode']}|{ev}|{folds}|{epochs}"
    return fnv1a64(key.encode()) / 2**64


def send(record):
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


def save(checkpoint_dir, task_id, epoch, metric):
    if checkpoint_dir is None:
        return ""
    target = os.path.join(checkpoint_dir, f"{epoch}.ckpt")
    tmp = os.path.join(checkpoint_dir, f".{epoch}.ckpt.tmp")
    with open(tmp, "w") as f:
        f.write(f"mock epoch={epoch} metric={metric!r}\n")
    os.replace(tmp, target)
    for name in os.listdir(checkpoint_dir):
        stem = name[: -len(".ckpt")]
        if name.endswith(".ckpt") and stem.isdigit() and int(stem) < epoch:
            os.remove(os.path.join(checkpoint_dir, name))
    return f"{task_id}/{epoch}.ckpt"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--exit-after-epoch", type=int)
    ap.add_argument("--metric", type=float)
    ap.add_argument("--error")
    args = ap.parse_args()

    task = json.loads(sys.stdin.readline())
    if task.get("type") != "task":
        sys.exit(2)
    tid = task["task_id"]
    if args.error:
        send({"type": "error", "task_id": tid, "message": args.error})
        return

    start = task.get("resume_from_epoch", 0)
    ckdir = task.get("checkpoint_dir")
    ref = f"{tid}/{start}.ckpt" if start > 0 and ckdir else ""
    for epoch in range(start + 1, task["epochs"] + 1):
        metric = mock_metric(task, epoch) if args.metric is None else args.metric
        ref = save(ckdir, tid, epoch, metric) or ref
        send({"type": "progress", "task_id": tid, "epoch": epoch, "metric": metric})
        if args.exit_after_epoch == epoch:
            sys.exit(3)
    final = mock_metric(task, task["epochs"]) if args.metric is None else args.metric
    send({"type": "done", "task_id": tid, "metric": final, "checkpoint_ref": ref})


if __name__ == "__main__":
    main()
