"""Parameter-matched comparison of 2D-state decoders against LSTM-1DS baselines."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .cells import CellConfig, count_parameters
from .corpus import FeatureRecord
from .decoder import DecoderModel
from .training import TrainConfig, evaluate, train
from .vocab import Vocabulary

MATCH_TOLERANCE = 0.01


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class Match:
    config: CellConfig
    params: int
    target: int

    @property
    def relative_gap(self) -> float:
        return abs(self.params - self.target) / self.target


def match_lstm_1d(target: int, vocab_size: int, feature_shape, tolerance: float = MATCH_TOLERANCE,
                  max_width: int = 8192) -> Match:
    """LSTM-1DS width ``L`` and embedding length ``L_x`` whose total parameter
    count lies within ``tolerance`` of ``target``.

    Among feasible pairs the one with ``L_x`` closest to ``L`` wins, then the
    smaller count gap, then the smaller ``L``.
    """
    best = None
    for width in range(1, max_width + 1):
        base = count_parameters(CellConfig("lstm1ds", (width,), embed=(1,)), vocab_size, feature_shape)["total"]
        slope = count_parameters(CellConfig("lstm1ds", (width,), embed=(2,)), vocab_size, feature_shape)["total"] - base
        # total is affine in L_x: base + slope * (L_x - 1)
        ideal = 1 + (target - base) / slope
        for lx in {max(1, math.floor(ideal)), max(1, math.ceil(ideal))}:
            total = base + slope * (lx - 1)
            gap = abs(total - target) / target
            if gap > tolerance:
                continue
            key = (abs(lx - width), gap, width)
            if best is None or key < best[0]:
                best = (key, width, lx, total)
        if base > target * (1 + tolerance):
            break
    if best is None:
        raise MatchingError(f"no LSTM-1DS width up to {max_width} matches {target} parameters "
                            f"within {tolerance:.0%}")
    _, width, lx, total = best
    return Match(CellConfig("lstm1ds", (width,), embed=(lx,)), int(total), int(target))


@dataclass
class RunResult:
    pair: int
    model: str
    params: int
    seed: int
    bleu4: float
    rouge_l: float


def compare(configs: Sequence[CellConfig], seeds: Sequence[int], vocab: Vocabulary,
            train_set: Sequence[FeatureRecord], test_set: Sequence[FeatureRecord], train_config: TrainConfig,
            tolerance: float = MATCH_TOLERANCE, progress: Callable[[str], None] | None = None,
            validation: Sequence[FeatureRecord] | None = None) -> dict:
    """Train every 2D config and its matched LSTM-1DS for each seed; score on ``test_set``.

    ``validation`` (never the test set) picks the best epoch; without it the
    last epoch is scored.
    """
    feature_shape = train_set[0].features.shape
    pairs, runs = [], []
    for p, cfg in enumerate(configs):
        target = count_parameters(cfg, len(vocab), feature_shape)["total"]
        match = match_lstm_1d(target, len(vocab), feature_shape, tolerance)
        pairs.append({"pair": p, "model_2d": cfg.name, "config_2d": cfg.to_dict(), "params_2d": target,
                      "model_1d": match.config.name, "config_1d": match.config.to_dict(),
                      "params_1d": match.params, "relative_gap": match.relative_gap})
        for c in (cfg, match.config):
            for seed in seeds:
                if progress is not None:
                    progress(f"training {c.name} seed {seed}")
                model = DecoderModel.create(c, vocab, feature_shape, seed=seed)
                tc = TrainConfig(**{**train_config.to_dict(), "seed": seed})
                model, _ = train(model, train_set, tc, validation=validation)
                scores = evaluate(model, test_set, tc.max_len)
                runs.append(RunResult(p, c.name, count_parameters(c, len(vocab), feature_shape)["total"],
                                      seed, scores["bleu4"], scores["rouge_l"]))
    for pair in pairs:
        for side in ("2d", "1d"):
            sel = [r for r in runs if r.pair == pair["pair"] and r.model == pair[f"model_{side}"]]
            pair[f"bleu4_{side}_mean"] = float(np.mean([r.bleu4 for r in sel]))
            pair[f"rouge_l_{side}_mean"] = float(np.mean([r.rouge_l for r in sel]))
        pair["bleu4_margin"] = pair["bleu4_2d_mean"] - pair["bleu4_1d_mean"]
    return {"tolerance": tolerance, "seeds": list(seeds), "pairs": pairs,
            "runs": [r.__dict__ for r in runs]}


def report_csv(report: dict) -> str:
    """Per-run curve data: one row per (pair, model, seed)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pair", "model", "params", "seed", "bleu4", "rouge_l"])
    for r in report["runs"]:
        writer.writerow([r["pair"], r["model"], r["params"], r["seed"],
                         f"{r['bleu4']:.6f}", f"{r['rouge_l']:.6f}"])
    return buf.getvalue()
