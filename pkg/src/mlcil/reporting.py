"""Result files and report rendering.

Everything written here must be reproducible bit for bit across reruns of
the same config and seed, so no timestamps or timings appear in any file.
"""

from __future__ import annotations

import csv
import io
import json
import os

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, MetricError
from .metrics import SessionResult

RESULTS_SCHEMA_VERSION = 1


def _session_payload(results: list[SessionResult]) -> list[dict]:
    from .runner import _result_to_dict

    return [_result_to_dict(r) for r in results]


def write_results_json(path: str, config: ExperimentConfig, results: list[SessionResult],
                       avg_acc: float, last_acc: float) -> None:
    payload = {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "config": config.to_dict(),
        "sessions": _session_payload(results),
        "avg_acc": avg_acc,
        "last_acc": last_acc,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_results(run_dir: str) -> dict:
    path = os.path.join(run_dir, "results.json")
    if not os.path.exists(path):
        raise MetricError(f"no results.json under {run_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _csv_rows(sessions: list[dict]) -> tuple[list[str], list[list]]:
    all_ids = sorted({int(k) for s in sessions for k in s["per_class_ap"]})
    header = ["session", "map", "cf1", "of1", "ch_index"]
    for cid in all_ids:
        header += [f"ap_{cid}", f"mu_{cid}", f"var_{cid}", f"forget_{cid}"]
    rows = []
    for s in sessions:
        row: list = [s["session"], s["map"], s["cf1"], s["of1"],
                     "" if s["ch_index"] is None else s["ch_index"]]
        for cid in all_ids:
            key = str(cid)
            ap = s["per_class_ap"].get(key, "")
            conf = s["per_class_confidence"].get(key)
            forget = s["per_class_forgetting"].get(key, "")
            row += [ap, conf[0] if conf else "", conf[1] if conf else "", forget]
        rows.append(row)
    return header, rows


def write_session_csv(path: str, results: list[SessionResult]) -> None:
    header, rows = _csv_rows(_session_payload(results))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_ablation_summary(root: str, summary: dict) -> None:
    with open(os.path.join(root, "ablation_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(root, "ablation_summary.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "avg_acc", "last_acc", "mean_final_forgetting", "final_ch"])
        for variant, per_seed in summary["variants"].items():
            for seed, row in sorted(per_seed.items(), key=lambda kv: int(kv[0])):
                writer.writerow([
                    variant, seed, row["avg_acc"], row["last_acc"],
                    row["mean_final_forgetting"],
                    "" if row["final_ch"] is None else row["final_ch"],
                ])


def render_report(payload: dict, fmt: str) -> str:
    """Format a loaded results.json payload as csv, json, or a markdown table."""
    if fmt == "json":
        return json.dumps(payload, sort_keys=True, indent=2)
    sessions = payload["sessions"]
    if fmt == "csv":
        header, rows = _csv_rows(sessions)
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue().rstrip("\r\n")
    if fmt == "md":
        lines = [
            "| session | mAP | CF1 | OF1 | CH |",
            "|---|---|---|---|---|",
        ]
        for s in sessions:
            ch = "-" if s["ch_index"] is None else f"{s['ch_index']:.2f}"
            lines.append(
                f"| {s['session']} | {s['map']:.4f} | {s['cf1']:.4f} | {s['of1']:.4f} | {ch} |"
            )
        lines.append("")
        lines.append(f"average mAP {payload['avg_acc']:.4f}, final session {payload['last_acc']:.4f}")
        return "\n".join(lines)
    raise ConfigError(f"unknown report format {fmt!r}; expected csv, json, or md")
