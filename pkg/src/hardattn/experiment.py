"""Multi-seed desk-scale pipeline behind the policy, ablation and bounds comparisons.

Per seed: phase 1 once; a Random baseline that continues phase 1 on random
glimpses for the phase-3 epoch budget; the flows model and the Gaussian
ablation, both starting from the same phase-1 weights, through phases 2 and
3; a full-image CNN. Every model is evaluated on the test split with the
same first glimpses.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cnn import cnn_accuracy, masked_cnn_eval, save_cnn, train_cnn_bound
from .config import RunConfig
from .data import Dataset, load_dataset
from .evaluate import EvalReport, evaluate_policy
from .model import HardAttentionModel
from .tensor.checkpoint import load_into, state_dict
from .training import train_phase


@dataclass
class SeedResult:
    seed: int
    eig: EvalReport
    random: EvalReport
    eig_gaussian: EvalReport
    random_on_final: EvalReport
    cnn_accuracy: float
    masked_cnn: dict
    seconds: float
    history: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return dict(
            seed=self.seed,
            eig_acc=self.eig.accuracy.tolist(),
            random_acc=self.random.accuracy.tolist(),
            gaussian_acc=self.eig_gaussian.accuracy.tolist(),
            random_on_final_acc=self.random_on_final.accuracy.tolist(),
            eig_entropy=self.eig.entropy.tolist(),
            eig_area=self.eig.area.tolist(),
            cnn_acc=self.cnn_accuracy,
            masked_cnn={k: v.tolist() for k, v in self.masked_cnn.items()},
            seconds=self.seconds,
        )


def _clone_perception(src: HardAttentionModel, dst: HardAttentionModel) -> None:
    load_into(dst.perception, state_dict(src.perception))
    object.__setattr__(dst, "completed_phase", src.completed_phase)


def run_seed(cfg: RunConfig, seed: int, data: Dataset | None = None, run_dir: Path | None = None,
             cnn_epochs: int = 10, log=None) -> SeedResult:
    start = time.time()
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    data = data or load_dataset(cfg.data)
    test = data.test
    sub = (lambda name: run_dir / name) if run_dir else (lambda name: None)
    for name in ("flows", "gaussian", "random"):
        if run_dir:
            sub(name).mkdir(parents=True, exist_ok=True)

    model = HardAttentionModel(cfg.model, seed)
    hist = {"phase1": train_phase(model, data, tcfg, 1, run_dir=sub("flows"), log=log).history}

    baseline = copy.deepcopy(model)
    extra = dataclasses.replace(tcfg, epochs1=tcfg.epochs1 + tcfg.epochs3)
    object.__setattr__(baseline, "completed_phase", 0)
    hist["random"] = train_phase(baseline, data, extra, 1, run_dir=sub("random"),
                                 start_epoch=tcfg.epochs1, log=log).history

    gauss = HardAttentionModel(dataclasses.replace(cfg.model, posterior="gaussian"), seed)
    _clone_perception(model, gauss)

    for phase in (2, 3):
        hist[f"phase{phase}"] = train_phase(model, data, tcfg, phase, run_dir=sub("flows"), log=log).history
    for phase in (2, 3):
        hist[f"gauss{phase}"] = train_phase(gauss, data, tcfg, phase, run_dir=sub("gaussian"), log=log).history

    pol = cfg.policy
    eig = evaluate_policy(model, "eig", test, pol, seed=seed)
    rnd = evaluate_policy(baseline, "random", test, pol, seed=seed)
    rnd_final = evaluate_policy(model, "random", test, pol, seed=seed, keep_maps=False)
    eig_g = evaluate_policy(gauss, "eig", test, pol, seed=seed)

    cnn = train_cnn_bound(data.train, data.val, data.num_classes, tcfg, epochs=cnn_epochs, seed=seed, log=log)
    if run_dir:
        save_cnn(cnn.model, run_dir / "cnn.npz", meta=dict(seed=seed))
    masked = masked_cnn_eval(cnn.model, {"eig": eig.traces, "random": rnd.traces}, test, model.grid)
    result = SeedResult(seed, eig, rnd, eig_g, rnd_final, cnn_accuracy(cnn.model, test), masked,
                        time.time() - start, hist)
    if run_dir:
        (run_dir / "summary.json").write_text(json.dumps(result.summary(), indent=1))
    return result


def run_experiment(cfg: RunConfig, seeds, root: Path | None = None, cnn_epochs: int = 10,
                   log=None) -> list[SeedResult]:
    data = load_dataset(cfg.data)
    results = []
    for seed in seeds:
        run_dir = root / f"seed{seed}" if root else None
        results.append(run_seed(cfg, seed, data, run_dir, cnn_epochs=cnn_epochs, log=log))
        if log:
            log(json.dumps(results[-1].summary()))
    return results


def median_over_seeds(values) -> np.ndarray:
    return np.median(np.asarray(values, dtype=np.float64), axis=0)
