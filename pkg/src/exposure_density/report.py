"""Run reports: ordered counters, notes and a config echo.

A report is written twice, once as readable text and once as flat
``key=value`` lines meant for scripts. Wall-clock timings live in a separate
``timing.kv`` so that the report itself is reproducible byte for byte.
"""
from __future__ import annotations

import math
from pathlib import Path


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.10g}"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


class RunReport:
    def __init__(self, command: str):
        self.command = command
        self.config: dict = {}
        self.values: dict = {}
        self.notes: list[str] = []
        self.timings: dict = {}

    def add(self, key: str, value):
        self.values[key] = value

    def update(self, prefix: str, mapping: dict):
        for k, v in mapping.items():
            self.values[f"{prefix}.{k}"] = v

    def note(self, text: str):
        self.notes.append(text)

    def time(self, stage: str, seconds: float):
        self.timings[stage] = seconds

    def kv_lines(self):
        lines = [f"command={self.command}"]
        lines += [f"config.{k}={_fmt(v)}" for k, v in self.config.items()]
        lines += [f"{k}={_fmt(v)}" for k, v in self.values.items()]
        lines += [f"note.{i}={n}" for i, n in enumerate(self.notes)]
        return lines

    def text_lines(self):
        out = [f"run report: {self.command}", ""]
        if self.config:
            out.append("configuration")
            out += [f"  {k:<24} {_fmt(v)}" for k, v in self.config.items()]
            out.append("")
        section = None
        for k, v in self.values.items():
            head, _, rest = k.partition(".")
            if head != section:
                if section is not None:
                    out.append("")
                out.append(head)
                section = head
            out.append(f"  {rest or head:<24} {_fmt(v)}")
        if self.notes:
            out += ["", "notes"]
            out += [f"  - {n}" for n in self.notes]
        return out

    def write(self, directory):
        directory = Path(directory)
        (directory / "report.txt").write_text("\n".join(self.text_lines()) + "\n")
        (directory / "report.kv").write_text("\n".join(self.kv_lines()) + "\n")
        timing = [f"{k}={v}" if isinstance(v, int) else f"{k}={v:.3f}" for k, v in self.timings.items()]
        (directory / "timing.kv").write_text("\n".join(timing) + "\n")
