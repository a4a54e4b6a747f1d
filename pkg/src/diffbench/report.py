"""Text rendering of benchmark results: rows grouped task -> architecture ->
split, one column per training regime, best value in each row marked."""

from __future__ import annotations

from .errors import ConfigurationError

REGIME_COLUMNS = [("scratch", "No Pretrained"), ("frozen", "Frozen"), ("finetune", "Finetuning")]
SPLIT_ORDER = ["train", "test"]

HEADERS = ["Task", "Architecture", "Split", "No Pretrained",
           "Pretrained", "Parameters", "Frozen", "Finetuning"]


def _fmt_rate(value: float | None, best: bool) -> str:
    if value is None:
        return "-"
    text = f"{value:.2f}"
    return text + "*" if best else text


def render_table(records: list[dict]) -> str:
    """Render results records into the comparison-table layout."""
    cells: dict[tuple, dict] = {}
    order_tasks: list[str] = []
    arch_order: dict[str, list[str]] = {}
    for rec in records:
        task = rec["task"]
        arch = rec.get("arch_label") or rec["family"]
        key = (task, arch, rec["split"], rec["regime"])
        if key in cells:
            other = cells[key]
            raise ConfigurationError(
                "duplicate result cell "
                f"{task}/{arch}/{rec['split']}/{rec['regime']}: "
                f"success_rate {other['success_rate']} vs {rec['success_rate']}")
        cells[key] = rec
        if task not in order_tasks:
            order_tasks.append(task)
            arch_order[task] = []
        if arch not in arch_order[task]:
            arch_order[task].append(arch)

    rows = []
    for task in order_tasks:
        for arch in arch_order[task]:
            for split in SPLIT_ORDER:
                regime_recs = {r: cells.get((task, arch, split, r))
                               for r, _ in REGIME_COLUMNS}
                if all(v is None for v in regime_recs.values()):
                    continue
                rates = {r: (rec["success_rate"] if rec else None)
                         for r, rec in regime_recs.items()}
                present = [v for v in rates.values() if v is not None]
                best = max(present) if present else None
                pre = regime_recs.get("frozen") or regime_recs.get("finetune")
                rows.append([
                    task,
                    arch,
                    split.capitalize(),
                    _fmt_rate(rates["scratch"], rates["scratch"] == best and best is not None),
                    (pre.get("pretrain_dataset") or "-") if pre else "-",
                    (pre.get("pretrain_params") or "-") if pre else "-",
                    _fmt_rate(rates["frozen"], rates["frozen"] == best and best is not None),
                    _fmt_rate(rates["finetune"], rates["finetune"] == best and best is not None),
                ])

    widths = [len(h) for h in HEADERS]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def line(parts):
        return " | ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()

    out = [line(HEADERS), "-+-".join("-" * w for w in widths)]
    if not rows:
        out.append("(no data)")
    else:
        prev_task = prev_arch = None
        for row in rows:
            display = list(row)
            if display[0] == prev_task:
                display[0] = ""
                if display[1] == prev_arch:
                    display[1] = ""
            prev_task, prev_arch = row[0], row[1]
            out.append(line(display))
    return "\n".join(out) + "\n"
