"""Self-contained desk-scale benchmark: synthetic market data plus tasks.

Five trading days by four instruments, three raw tables (quotes,
fundamentals, bars), and three factor tasks with exact reference series:

- ``mid_price``        = (bid + ask) / 2
- ``liquidity_imbalance`` = (bid_size - ask_size) / (bid_size + ask_size)
- ``PB_ROE``           = pb / roe

Generation is deterministic per seed. Values are constructed to stay inside
the magnitude zone where the canonical decimal rendering is portable across
serializers (see ``evaluators.format_value``), so reference outputs are
byte-stable everywhere.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from .evaluators import KeyedSeries, write_series
from .model import OutputContract

DATES = ("2024-01-02", "2024-01-03", "2024-01-04", "2024-01-05", "2024-01-08")
INSTRUMENTS = ("AAA", "BBB", "CCC", "DDD")

TASK_NAMES = ("mid_price", "liquidity_imbalance", "PB_ROE")


@dataclass(frozen=True)
class ToyWorkspace:
    """Everything a run needs, rooted in one directory."""

    root: Path
    data_files: dict[str, Path]
    tasks_path: Path
    truth_dir: Path


def generate_toy_dataset(seed: int, out_dir: str | Path) -> dict[str, Path]:
    """Write quotes.csv, fundamentals.csv, and bars.csv under ``out_dir``.

    The same seed always produces byte-identical files. Quotes satisfy
    bid < ask by construction; size imbalances are rerolled away from zero
    so the imbalance factor never collapses below the portable-format zone.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)

    quote_lines = ["datetime,instrument,bid,ask,bid_size,ask_size"]
    fundamental_lines = ["datetime,instrument,pb,roe"]
    bar_lines = ["datetime,instrument,open,high,low,close,volume"]
    for dt in DATES:
        for instrument in INSTRUMENTS:
            mid = round(rng.uniform(20.0, 180.0), 2)
            spread = round(rng.uniform(0.02, 0.50), 2)
            bid = round(mid - spread / 2.0, 2)
            ask = round(bid + spread, 2)
            bid_size = rng.randrange(100, 5001)
            ask_size = rng.randrange(100, 5001)
            while abs(bid_size - ask_size) < 5:
                ask_size = rng.randrange(100, 5001)
            quote_lines.append(f"{dt},{instrument},{bid:.2f},{ask:.2f},{bid_size},{ask_size}")

            pb = round(rng.uniform(0.5, 8.0), 2)
            roe = round(rng.uniform(0.02, 0.35), 4)
            fundamental_lines.append(f"{dt},{instrument},{pb:.2f},{roe:.4f}")

            open_px = round(mid * rng.uniform(0.97, 1.03), 2)
            close_px = round(mid * rng.uniform(0.97, 1.03), 2)
            wick = round(rng.uniform(0.01, 2.0), 2)
            high = round(max(open_px, close_px) + wick, 2)
            low = round(min(open_px, close_px) - wick, 2)
            volume = rng.randrange(1_000, 1_000_001)
            bar_lines.append(
                f"{dt},{instrument},{open_px:.2f},{high:.2f},{low:.2f},{close_px:.2f},{volume}"
            )

    paths = {
        "quotes": out / "quotes.csv",
        "fundamentals": out / "fundamentals.csv",
        "bars": out / "bars.csv",
    }
    paths["quotes"].write_bytes(("\n".join(quote_lines) + "\n").encode("utf-8"))
    paths["fundamentals"].write_bytes(("\n".join(fundamental_lines) + "\n").encode("utf-8"))
    paths["bars"].write_bytes(("\n".join(bar_lines) + "\n").encode("utf-8"))
    return paths


def _read_table(path: Path) -> dict[tuple[str, str], dict[str, str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    table: dict[tuple[str, str], dict[str, str]] = {}
    for line in lines[1:]:
        fields = line.split(",")
        record = dict(zip(header, fields))
        table[(record["datetime"], record["instrument"])] = record
    return table


def ground_truth(task_name: str, data_dir: str | Path) -> KeyedSeries:
    """Reference series for one toy task, computed from the raw tables."""
    data = Path(data_dir)
    if task_name == "mid_price":
        quotes = _read_table(data / "quotes.csv")
        return KeyedSeries(
            {key: (float(r["bid"]) + float(r["ask"])) / 2.0 for key, r in quotes.items()}
        )
    if task_name == "liquidity_imbalance":
        quotes = _read_table(data / "quotes.csv")
        return KeyedSeries(
            {
                key: (int(r["bid_size"]) - int(r["ask_size"]))
                / (int(r["bid_size"]) + int(r["ask_size"]))
                for key, r in quotes.items()
            }
        )
    if task_name == "PB_ROE":
        fundamentals = _read_table(data / "fundamentals.csv")
        return KeyedSeries(
            {key: float(r["pb"]) / float(r["roe"]) for key, r in fundamentals.items()}
        )
    raise ValueError(f"unknown toy task {task_name!r}")


def write_goldens(data_dir: str | Path, truth_dir: str | Path) -> dict[str, Path]:
    """Serialize every task's reference series as ``<truth_dir>/<task>.csv``."""
    truth = Path(truth_dir)
    truth.mkdir(parents=True, exist_ok=True)
    contract = OutputContract()
    written: dict[str, Path] = {}
    for task_name in TASK_NAMES:
        path = truth / f"{task_name}.csv"
        write_series(ground_truth(task_name, data_dir), path, contract)
        written[task_name] = path
    return written


def write_task_set(out_path: str | Path) -> Path:
    """Write tasks.json; data-source paths are relative to the file itself."""
    quotes_note = "columns: datetime, instrument, bid, ask, bid_size, ask_size"
    fundamentals_note = "columns: datetime, instrument, pb, roe"
    tasks = [
        {
            "id": "mid_price",
            "name": "Quote midpoint",
            "category": "high_frequency",
            "difficulty": "easy",
            "description": (
                "For every (datetime, instrument) key in the quotes table, "
                "compute the quote midpoint: the average of the best bid and "
                "best ask prices, (bid + ask) / 2."
            ),
            "data_sources": [
                {"name": "quotes", "path": "quotes.csv", "schema_note": quotes_note}
            ],
        },
        {
            "id": "liquidity_imbalance",
            "name": "Order book liquidity imbalance",
            "category": "high_frequency",
            "difficulty": "easy",
            "description": (
                "For every (datetime, instrument) key in the quotes table, "
                "compute the size imbalance between the bid and ask queues: "
                "(bid_size - ask_size) / (bid_size + ask_size)."
            ),
            "data_sources": [
                {"name": "quotes", "path": "quotes.csv", "schema_note": quotes_note}
            ],
        },
        {
            "id": "PB_ROE",
            "name": "Price-to-book over return-on-equity",
            "category": "fundamental",
            "difficulty": "easy",
            "description": (
                "For every (datetime, instrument) key in the fundamentals "
                "table, compute the valuation-versus-quality ratio pb / roe."
            ),
            "data_sources": [
                {
                    "name": "fundamentals",
                    "path": "fundamentals.csv",
                    "schema_note": fundamentals_note,
                }
            ],
        },
    ]
    path = Path(out_path)
    path.write_text(json.dumps(tasks, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def build_toy_workspace(seed: int, out_dir: str | Path) -> ToyWorkspace:
    """Generate dataset, task set, and reference outputs in one directory."""
    root = Path(out_dir)
    data_files = generate_toy_dataset(seed, root)
    tasks_path = write_task_set(root / "tasks.json")
    truth_dir = root / "truth"
    write_goldens(root, truth_dir)
    return ToyWorkspace(root=root, data_files=data_files, tasks_path=tasks_path, truth_dir=truth_dir)
