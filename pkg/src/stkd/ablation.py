"""Ablation scenarios: one shared stage-1 checkpoint, one stage-2 run per
flag set, each evaluated on a held-out index."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from stkd.config import AblationConfig, RunConfig
from stkd.errors import ConfigError
from stkd.inference import Predictor, infer_dataset
from stkd.metrics import evaluate
from stkd.persistence import Checkpoint, DatasetIndex, load_checkpoint, load_mask, load_prediction
from stkd.training import train_stage1, train_stage2

log = logging.getLogger(__name__)

# row label, flags (sd, td, fe_o, fe_t)
SCENARIOS = {
    "bs": ("BS", (False, False, False, False)),
    "sd": ("Ours_k", (True, False, False, False)),
    "sd+td": ("Ours_t", (True, True, False, False)),
    "sd+fe_o": ("Ours_o", (True, False, True, False)),
    "sd+td+fe_t": ("Ours_f", (True, True, False, True)),
    "full": ("Ours", (True, True, True, False)),
}
ALIASES = {"sd+td+fe_o": "full", "ours": "full", "baseline": "bs"}
DEFAULT_SCENARIOS = tuple(SCENARIOS)


def parse_scenarios(text: str | list[str]) -> list[str]:
    items = text.split(",") if isinstance(text, str) else list(text)
    out = []
    for item in items:
        key = item.strip().lower()
        key = ALIASES.get(key, key)
        if key not in SCENARIOS:
            raise ConfigError(f"unknown scenario {item.strip()!r}; expected one of {sorted(SCENARIOS)}")
        out.append(key)
    if not out:
        raise ConfigError("no scenarios given")
    return out


def scenario_flags(name: str) -> AblationConfig:
    sd, td, fe_o, fe_t = SCENARIOS[name][1]
    return AblationConfig(sd=sd, td=td, fe_o=fe_o, fe_t=fe_t)


def with_flags(cfg: RunConfig, flags: AblationConfig) -> RunConfig:
    out = copy.deepcopy(cfg)
    out.ablation = copy.deepcopy(flags)
    return out.validate()


@dataclass
class ScenarioResult:
    name: str
    label: str
    flags: AblationConfig
    f_max: float
    mae: float
    checkpoint: Path | None


def evaluate_checkpoint(ckpt: Checkpoint | Path, test: DatasetIndex, out_dir: Path):
    pred = Predictor(ckpt)
    infer_dataset(pred, test, out_dir)
    preds, gts = [], []
    for seq in test.sequences:
        base = out_dir if test.kind == "still" else out_dir / seq.name
        for frame, mask in zip(seq.frames, seq.masks):
            if mask is None:
                continue
            preds.append(load_prediction(base / f"{frame.stem}.png"))
            gts.append(load_mask(mask))
    return evaluate(preds, gts)


def run_ablation(
    cfg: RunConfig,
    train: list[DatasetIndex],
    test: DatasetIndex,
    out: str | Path,
    scenarios=DEFAULT_SCENARIOS,
    stage1: str | Path | None = None,
) -> list[ScenarioResult]:
    out = Path(out)
    scenarios = parse_scenarios(list(scenarios))
    if stage1 is None:
        base = with_flags(cfg, scenario_flags("bs"))
        stage1 = train_stage1(train, base, out / "stage1").checkpoint
    init = load_checkpoint(stage1)
    results = []
    for name in scenarios:
        label, _ = SCENARIOS[name]
        flags = scenario_flags(name)
        log.info("scenario %s (%s)", name, label)
        run = train_stage2(init, train, with_flags(cfg, flags), out / name)
        res = evaluate_checkpoint(run.checkpoint, test, out / name / "maps")
        results.append(ScenarioResult(name, label, flags, res.f_max, res.mae, run.checkpoint))
    write_table(results, out)
    return results


def format_table(results: list[ScenarioResult]) -> str:
    tick = lambda b: "x" if b else ""  # noqa: E731
    lines = ["| Method | SD | TD | FE_o | FE_t | F_beta | MAE |", "|---|---|---|---|---|---|---|"]
    for r in results:
        f = r.flags
        lines.append(
            f"| {r.label} | {tick(f.sd)} | {tick(f.td)} | {tick(f.fe_o)} | {tick(f.fe_t)} | {r.f_max:.3f} | {r.mae:.3f} |"
        )
    return "\n".join(lines) + "\n"


def write_table(results: list[ScenarioResult], out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(format_table(results))
    rows = [
        {
            "scenario": r.name,
            "label": r.label,
            "sd": r.flags.sd,
            "td": r.flags.td,
            "fe_o": r.flags.fe_o,
            "fe_t": r.flags.fe_t,
            "f_max": r.f_max,
            "mae": r.mae,
            "checkpoint": str(r.checkpoint) if r.checkpoint else None,
        }
        for r in results
    ]
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
