"""CSV and JSON writers for training logs, sampler telemetry, evaluation reports and ablation tables."""
import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

from align_gen_app.schemas import EvalReport, ProbeReport
from align_gen_app.services.trainer import TrainResult

TRAIN_LOG_FIELDS = ("step", "loss", "grad_norm", "dropped_refs")
TELEMETRY_FIELDS = ("step", "t", "v_norm")
REPORT_FIELDS = ("case_id", "seed", "prompt", "concept_ids", "cp", "pf", "cp_pf")
ABLATION_FIELDS = ("variant", "cp", "pf", "cp_pf", "split_hash", "fingerprint", "mask_all_zero")


def _write_csv(path: Path, fields: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def write_train_log(path: Path, result: TrainResult) -> Path:
    rows = ({"step": r.step, "loss": repr(r.loss), "grad_norm": repr(r.grad_norm), "dropped_refs": r.dropped_refs}
            for r in result.log)
    return _write_csv(path, TRAIN_LOG_FIELDS, rows)


def write_telemetry(path: Path, telemetry: Sequence[dict]) -> Path:
    return _write_csv(path, TELEMETRY_FIELDS, telemetry)


def write_eval_report(out_dir: Path, report: EvalReport) -> tuple[Path, Path]:
    """``report.csv`` with one row per case and seed, ``report.json`` with the aggregates."""
    out_dir = Path(out_dir)
    rows = ({**row.model_dump(), "concept_ids": ";".join(row.concept_ids)} for row in report.rows)
    csv_path = _write_csv(out_dir / "report.csv", REPORT_FIELDS, rows)
    json_path = out_dir / "report.json"
    json_path.write_text(report.model_dump_json(indent=2, exclude={"rows"}), encoding="utf-8")
    return csv_path, json_path


def write_probe_report(path: Path, report: ProbeReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


def write_ablation_table(path: Path, reports: Sequence[EvalReport]) -> Path:
    rows = (report.model_dump(include=set(ABLATION_FIELDS)) for report in reports)
    return _write_csv(path, ABLATION_FIELDS, rows)


def write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path
