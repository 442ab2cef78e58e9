"""ハイパーパラメーターの格子ごとのエポック時間・ピークメモリ・WERの計測。"""

import csv
import io
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Final, Iterator, Sequence

from .checkpoint import checkpoint_size
from .dataset import Sample
from .errors import ConfigError, EmptyGrid
from .memory import PeakMemorySampler
from .model import FreezeSpec, ModelConfig, ParamGroup, count_params
from .trainer import EpochMetrics, StopDecision, TrainingConfig, run_personalization

_logger = logging.getLogger(__name__)

CSV_COLUMNS: Final = ("batch", "lr", "freeze", "epochs", "final_wer", "mean_epoch_s", "peak_mem_bytes", "status")
STATUS_OK: Final = "ok"

EpochHook = Callable[[EpochMetrics], None]
Runner = Callable[[TrainingConfig, EpochHook], Sequence[EpochMetrics]]


@dataclass(frozen=True)
class SweepGrid:
    batch_sizes: tuple[int, ...] = (1, 2, 5, 10)
    learning_rates: tuple[float, ...] = (1e-5, 1e-6)
    freezes: tuple[str, ...] = FreezeSpec.PRESETS
    repetitions: int = 1
    seed: int = 0
    max_epochs: int = 20

    def __post_init__(self) -> None:
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        object.__setattr__(self, "learning_rates", tuple(float(lr) for lr in self.learning_rates))
        object.__setattr__(self, "freezes", tuple(self.freezes))
        if not (self.batch_sizes and self.learning_rates and self.freezes) or self.repetitions < 1:
            raise EmptyGrid("every sweep axis needs at least one value")
        if min(self.batch_sizes) < 1 or min(self.learning_rates) <= 0.0 or self.max_epochs < 1:
            raise ConfigError("sweep values must be positive")
        for name in self.freezes:
            FreezeSpec.from_name(name)

    def cells(self) -> Iterator[tuple[int, float, str, int]]:
        """(batch, lr, freeze, 繰り返し番号) を並べ替えた順に返します。"""
        freeze_order = {name: i for i, name in enumerate(FreezeSpec.PRESETS)}
        keyed = sorted(
            itertools.product(sorted(set(self.batch_sizes)), sorted(set(self.learning_rates)), set(self.freezes)),
            key=lambda cell: (cell[0], cell[1], freeze_order.get(cell[2], len(freeze_order)), cell[2]),
        )
        for batch, lr, freeze in keyed:
            for rep in range(self.repetitions):
                yield batch, lr, freeze, rep

    def __len__(self) -> int:
        return len(set(self.batch_sizes)) * len(set(self.learning_rates)) * len(set(self.freezes)) * self.repetitions

    def training_config(self, base: TrainingConfig, batch: int, lr: float, freeze: str, rep: int) -> TrainingConfig:
        return replace(
            base,
            batch_size=batch,
            learning_rate=lr,
            freeze=FreezeSpec.from_name(freeze),
            seed=self.seed + rep,
            max_epochs=self.max_epochs,
        )


@dataclass(frozen=True)
class SweepRow:
    batch: int
    lr: float
    freeze: str
    epochs: int
    final_wer: float
    mean_epoch_s: float
    peak_mem_bytes: int
    status: str = STATUS_OK

    @property
    def key(self) -> tuple[int, float, str]:
        return (self.batch, self.lr, self.freeze)

    @property
    def accuracy(self) -> tuple[object, ...]:
        """シードで決まる列。時間の列は含みません。"""
        return (self.batch, self.lr, self.freeze, self.epochs, self.final_wer, self.status)


def profile_run(config: TrainingConfig, runner: Runner) -> SweepRow:
    """``runner`` を1回実行し、エポックの区切りごとの単調時計とRSSのピークを記録します。"""
    marks: list[float] = []

    def on_epoch(_: EpochMetrics) -> None:
        marks.append(time.perf_counter())

    with PeakMemorySampler() as sampler:
        start = time.perf_counter()
        history = runner(config, on_epoch)
    if not history:
        raise ValueError("runner returned an empty history")
    if marks:
        edges = [start, *marks]
        durations = [b - a for a, b in zip(edges, edges[1:])]
    else:
        durations = [m.wall_s for m in history]
    best = min(history, key=lambda m: m.metric)
    return SweepRow(
        batch=config.batch_size,
        lr=config.learning_rate,
        freeze=config.freeze.name,
        epochs=len(history),
        final_wer=best.val_wer,
        mean_epoch_s=sum(durations) / len(durations),
        peak_mem_bytes=sampler.peak_bytes,
    )


def personalization_runner(
    checkpoint: str | Path,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    model_config: ModelConfig,
    work_dir: str | Path,
) -> Runner:
    """:func:`run_personalization` をセルごとの作業ディレクトリで実行するランナー。"""
    work_dir = Path(work_dir)

    def run(config: TrainingConfig, hook: EpochHook) -> Sequence[EpochMetrics]:
        out_dir = work_dir / f"b{config.batch_size}_lr{config.learning_rate:g}_{config.freeze.name}_s{config.seed}"

        def on_epoch(metrics: EpochMetrics, _: StopDecision) -> None:
            hook(metrics)

        result = run_personalization(checkpoint, train_set, val_set, model_config, config, out_dir, on_epoch=on_epoch)
        return result.history

    return run


def model_size_report(config: ModelConfig) -> list[dict[str, Any]]:
    """凍結プリセットごとの学習対象パラメーター数とチェックポイントの大きさ。"""
    size = checkpoint_size(config)
    rows: list[dict[str, Any]] = []
    for name in FreezeSpec.PRESETS:
        counts = count_params(config, FreezeSpec.from_name(name))
        rows.append(
            {
                "freeze": name,
                "trainable_params": counts["trainable"],
                "total_params": counts["total"],
                **{f"{g.name.lower()}_params": counts[g.name] for g in ParamGroup.members() if g.name},
                "checkpoint_bytes": size,
                "float32_bytes": 4 * counts["total"],
            }
        )
    return rows


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(
            (
                row.batch,
                f"{row.lr:g}",
                row.freeze,
                row.epochs,
                f"{row.final_wer:.4f}",
                f"{row.mean_epoch_s:.4f}",
                row.peak_mem_bytes,
                row.status,
            )
        )
    return buf.getvalue()


def read_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def run_sweep(
    grid: SweepGrid,
    runner: Runner,
    base: TrainingConfig = TrainingConfig(),
    out_dir: str | Path | None = None,
    model_config: ModelConfig | None = None,
) -> list[SweepRow]:
    """格子のセルを順に実行します。失敗したセルは ``status`` に記録して続けます。

    ``out_dir`` があれば ``sweep.csv`` と ``sweep.json`` を書きます。
    """
    if len(grid) == 0:
        raise EmptyGrid("sweep grid is empty")
    rows: list[SweepRow] = []
    for batch, lr, freeze, rep in grid.cells():
        config = grid.training_config(base, batch, lr, freeze, rep)
        try:
            row = profile_run(config, runner)
        except Exception as e:
            _logger.warning("sweep cell b=%d lr=%g %s failed: %s: %s", batch, lr, freeze, type(e).__name__, e)
            row = SweepRow(batch, lr, freeze, 0, float("nan"), float("nan"), 0, f"error:{type(e).__name__}")
        _logger.info(
            "sweep cell b=%d lr=%g %s: %d epochs, WER %.2f%%, %.3fs/epoch, peak %d bytes",
            row.batch,
            row.lr,
            row.freeze,
            row.epochs,
            row.final_wer,
            row.mean_epoch_s,
            row.peak_mem_bytes,
        )
        rows.append(row)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep.csv").write_text(rows_to_csv(rows), encoding="utf-8", newline="")
        mirror: dict[str, Any] = {
            "grid": {f.name: getattr(grid, f.name) for f in fields(grid)},
            "rows": [asdict(row) for row in rows],
        }
        if model_config is not None:
            mirror["model_size"] = model_size_report(model_config)
        (out_dir / "sweep.json").write_text(json.dumps(mirror, indent=2, allow_nan=True), encoding="utf-8")
    return rows
