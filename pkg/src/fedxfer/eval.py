"""ROC/AUC, normal quantiles, significance numbers and the repeated-run harness.

A significance number summarizes a series of AUCs from independent random
runs: fit a normal ``N(mu, sigma)`` to the series and report its ``p``-percent
quantile ``mu + sigma * Phi^-1(p / 100)``, i.e. the AUC the method beats with
confidence ``1 - p / 100``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EvaluationError, FedXferError, HarnessError

log = logging.getLogger(__name__)

SIG_LEVELS = (1, 3, 5)
METHODS = ("FTL", "UDL")


# -- ROC / AUC ----------------------------------------------------------------


@dataclass
class AucResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def _binary(labels):
    y = np.asarray(labels).reshape(-1)
    if y.size and not np.isin(y, (-1, 1)).all():
        raise EvaluationError("labels must be -1 or +1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(f"AUC needs both classes, got {n_pos} positive / {n_neg} negative")
    return pos, n_pos, n_neg


def _average_ranks(x):
    # 1-based ranks, ties share the mean of the positions they occupy
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [xs.size]))
    ranks = np.empty(xs.size)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return ranks


def roc_auc(scores, labels) -> AucResult:
    """Area under the ROC curve; attack (+1) should score high.

    Computed from average ranks (Mann-Whitney), which equals the fraction of
    (positive, negative) pairs ordered correctly with ties counting 1/2, and
    also equals trapezoidal integration of the empirical ROC returned alongside.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    pos, n_pos, n_neg = _binary(labels)
    if s.size != pos.size:
        raise EvaluationError(f"{s.size} scores vs {pos.size} labels")
    if not np.isfinite(s).all():
        raise EvaluationError("scores must be finite")
    ranks = _average_ranks(s)
    auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-s, kind="mergesort")
    ss, pp = s[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(ss)), ss.size - 1]
    tp = np.cumsum(pp)[last]
    fp = np.cumsum(~pp)[last]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thresholds = np.r_[np.inf, ss[last]]
    return AucResult(float(auc), fpr, tpr, thresholds)


def auc_score(scores, labels, orientation_free=False) -> float:
    a = roc_auc(scores, labels).auc
    return max(a, 1.0 - a) if orientation_free else a


def pairwise_auc(scores, labels) -> float:
    """Brute-force AUC over every (positive, negative) pair; O(n^2)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    pos, n_pos, n_neg = _binary(labels)
    sp, sn = s[pos][:, None], s[~pos][None, :]
    wins = (sp > sn).sum() + 0.5 * (sp == sn).sum()
    return float(wins / (n_pos * n_neg))


# -- normal distribution ------------------------------------------------------

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _tail(q):
    c, d = _C, _D
    return ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5], \
        (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0


def normal_inverse_cdf(p: float) -> float:
    """Standard normal quantile.

    Acklam's rational approximation (relative error ~1e-9) followed by one
    Newton step against the erfc-based CDF.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise EvaluationError(f"quantile level must lie strictly inside (0, 1), got {p}")
    if p < _P_LOW:
        num, den = _tail(math.sqrt(-2.0 * math.log(p)))
        x = num / den
    elif p > 1.0 - _P_LOW:
        num, den = _tail(math.sqrt(-2.0 * math.log1p(-p)))
        x = -num / den
    else:
        q = p - 0.5
        r = q * q
        a, b = _A, _B
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
            ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        )
    if p > 0.5:
        # upper half: refine on the complementary CDF to keep precision near 1
        err = 0.5 * math.erfc(x / math.sqrt(2.0)) - (1.0 - p)
        x += err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    else:
        err = normal_cdf(x) - p
        x -= err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x


def significance(aucs: Sequence[float], p_percent: float) -> float:
    """``mean + std * Phi^-1(p_percent / 100)`` with the sample (n-1) std."""
    a = np.asarray(aucs, dtype=np.float64).reshape(-1)
    if a.size < 2:
        raise EvaluationError(f"significance needs at least 2 runs, got {a.size}")
    if not 0 < p_percent < 100:
        raise EvaluationError(f"p must lie in (0, 100) percent, got {p_percent}")
    mu = float(np.mean(a))
    sigma = float(np.std(a, ddof=1))
    return mu + sigma * normal_inverse_cdf(p_percent / 100.0)


@dataclass
class SignificanceRow:
    dataset: str
    method: str
    aucs: List[float]
    mean: float
    std: Optional[float]
    sig: Dict[int, float] = field(default_factory=dict)

    @property
    def confidence(self) -> Dict[int, float]:
        return {p: 1.0 - p / 100.0 for p in self.sig}


def summarize(dataset, method, aucs, levels=SIG_LEVELS) -> SignificanceRow:
    aucs = [float(a) for a in aucs]
    if len(aucs) < 2:
        return SignificanceRow(dataset, method, aucs, float(np.mean(aucs)) if aucs else math.nan, None)
    return SignificanceRow(
        dataset, method, aucs, float(np.mean(aucs)), float(np.std(aucs, ddof=1)),
        {p: significance(aucs, p) for p in levels},
    )


@dataclass
class SignificanceReport:
    rows: List[SignificanceRow]
    failures: List[dict] = field(default_factory=list)

    def row(self, method: str, dataset: Optional[str] = None) -> SignificanceRow:
        for r in self.rows:
            if r.method == method and (dataset is None or r.dataset == dataset):
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        """Rows of (dataset, method, p, Sig, mean_auc, std_auc), AUCs in percent."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "method", "p", "Sig", "mean_auc", "std_auc"])
        for r in self.rows:
            std = "" if r.std is None else repr(100.0 * r.std)
            if not r.sig:
                w.writerow([r.dataset, r.method, "", "", repr(100.0 * r.mean), std])
            for p, s in r.sig.items():
                w.writerow([r.dataset, r.method, p, repr(100.0 * s), repr(100.0 * r.mean), std])
        return buf.getvalue()

    def to_json(self) -> str:
        out = []
        for r in self.rows:
            item = {
                "dataset": r.dataset,
                "method": r.method,
                "aucs_percent": [100.0 * a for a in r.aucs],
                "mean_auc_percent": 100.0 * r.mean,
            }
            if r.std is not None:
                item["std_auc_percent"] = 100.0 * r.std
            if r.sig:
                item["significance_percent"] = {str(p): 100.0 * s for p, s in r.sig.items()}
                item["confidence"] = {str(p): c for p, c in r.confidence.items()}
            out.append(item)
        return json.dumps({"report": out, "failures": self.failures}, indent=2, sort_keys=True) + "\n"


# -- experiment harness -------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Everything a repeated-run experiment depends on.

    Exactly one dataset source: ``synthetic`` (preset name) or ``csv`` plus
    ``schema``. ``n_labeled`` / ``n_unlabeled`` default to the preset's sizes
    or to ``case``.
    """

    synthetic: Optional[str] = None
    csv: Optional[str] = None
    schema: Optional[str] = None
    case: Optional[str] = None
    n_labeled: Optional[int] = None
    n_unlabeled: Optional[int] = None
    overlap_frac: Optional[float] = None
    methods: Tuple[str, ...] = METHODS
    runs: int = 30
    seed: int = 0
    hidden: Tuple[int, ...] = (64,)
    latent_dim: int = 32
    ftl: dict = field(default_factory=dict)
    ae_epochs: int = 200
    ae_lr: float = 1e-3
    ae_batch: int = 32
    workers: int = 1
    min_success_frac: float = 25 / 30

    def validate(self) -> None:
        from .data import CASE_PRESETS, SYNTHETIC_PRESETS

        if (self.synthetic is None) == (self.csv is None):
            raise HarnessError("choose exactly one dataset source: synthetic preset or csv")
        if self.csv is not None and self.schema is None:
            raise HarnessError("a csv dataset needs a schema")
        if self.synthetic is not None and self.synthetic not in SYNTHETIC_PRESETS:
            raise HarnessError(f"unknown synthetic preset {self.synthetic!r}")
        if self.case is not None and self.case not in CASE_PRESETS:
            raise HarnessError(f"unknown case {self.case!r}")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise HarnessError(f"methods must be a non-empty subset of {METHODS}, got {list(self.methods)}")
        if self.runs < 1:
            raise HarnessError("runs must be >= 1")

    @property
    def dataset_name(self) -> str:
        if self.synthetic is not None:
            return self.synthetic
        from pathlib import Path

        return Path(self.csv).stem

    def sizes(self):
        from .data import CASE_PRESETS, PRESET_SPLITS

        n_l, n_u, frac = PRESET_SPLITS.get(self.synthetic, (None, None, 0.10))
        if self.case is not None:
            n_l, n_u = CASE_PRESETS[self.case]
        n_l = self.n_labeled or n_l
        n_u = self.n_unlabeled or n_u
        frac = frac if self.overlap_frac is None else self.overlap_frac
        if n_l is None or n_u is None:
            raise HarnessError("set n_labeled/n_unlabeled or a case preset for csv datasets")
        return n_l, n_u, frac


@dataclass
class RunOutcome:
    run: int
    seed: int
    aucs: Dict[str, float] = field(default_factory=dict)
    traces: Dict[str, list] = field(default_factory=dict)
    errors: Dict[str, str] = field(default_factory=dict)


def _load_pool(cfg: ExperimentConfig):
    from .data import encode_features, load_csv, load_schema

    return encode_features(load_csv(cfg.csv, load_schema(cfg.schema)))


@dataclass
class RunData:
    """One run's data as each party sees it, plus the sealed ground truth."""

    seed: int
    plan: object
    x_a: np.ndarray
    y_a: np.ndarray
    x_b: np.ndarray
    eval_positions: np.ndarray
    sealed_b: np.ndarray

    @property
    def truth(self) -> np.ndarray:
        return self.sealed_b[self.eval_positions]

    @property
    def x_eval(self) -> np.ndarray:
        return self.x_b[self.eval_positions]


def prepare_run(cfg: ExperimentConfig, seed: int, pool=None) -> RunData:
    """Dataset (fresh for synthetic sources) and vertical split for ``seed``."""
    from .data import SYNTHETIC_PRESETS, gen_synthetic, vertical_split

    if cfg.synthetic is not None:
        ds = gen_synthetic(SYNTHETIC_PRESETS[cfg.synthetic], seed)
    else:
        ds = pool if pool is not None else _load_pool(cfg)
    n_l, n_u, frac = cfg.sizes()
    plan = vertical_split(ds, n_l, n_u, frac, seed)
    x_a, y_a = plan.party_a_view(ds)
    evaluation = plan.eval_positions()
    return RunData(seed, plan, x_a, y_a, plan.party_b_view(ds), evaluation,
                   plan.sealed_b_labels(ds))


def make_party_a(cfg: ExperimentConfig, rd: RunData):
    from .ftl import PartyA
    from .nn import init_model

    model = init_model([rd.x_a.shape[1], *cfg.hidden, cfg.latent_dim], seed=[rd.seed, 1])
    return PartyA(model, rd.x_a, rd.y_a, rd.plan.overlap_a)


def make_party_b(cfg: ExperimentConfig, rd: RunData):
    from .ftl import PartyB
    from .nn import init_model

    model = init_model([rd.x_b.shape[1], *cfg.hidden, cfg.latent_dim], seed=[rd.seed, 2])
    return PartyB(model, rd.x_b, rd.plan.overlap_b)


def hyper_params(cfg: ExperimentConfig):
    from .ftl import HyperParams

    return HyperParams(**cfg.ftl)


def run_single(cfg: ExperimentConfig, run: int, pool=None) -> RunOutcome:
    """One run: fresh data/split with seed ``cfg.seed + run``, train, score."""
    from .ftl import train_ftl
    from .udl import run_udl

    seed = cfg.seed + run
    out = RunOutcome(run, seed)
    rd = prepare_run(cfg, seed, pool)
    if "FTL" in cfg.methods:
        try:
            res = train_ftl(make_party_a(cfg, rd), make_party_b(cfg, rd), hyper_params(cfg),
                            x_eval=rd.x_eval)
            out.aucs["FTL"] = auc_score(res.scores, rd.truth)
            out.traces["FTL"] = [b.as_tuple() for b in res.trace]
        except FedXferError as e:
            out.errors["FTL"] = f"{type(e).__name__}: {e}"
    if "UDL" in cfg.methods:
        try:
            udl = run_udl(rd.x_b, rd.x_eval, epochs=cfg.ae_epochs, lr=cfg.ae_lr,
                          seed=seed, batch_size=cfg.ae_batch)
            out.aucs["UDL"] = auc_score(udl.scores, rd.truth, orientation_free=True)
            out.traces["UDL"] = [(None, None, None, None, e) for e in udl.trace]
        except FedXferError as e:
            out.errors["UDL"] = f"{type(e).__name__}: {e}"
    return out


def _run_star(args):
    return run_single(*args)


@dataclass
class ExperimentResult:
    report: SignificanceReport
    runs: List[RunOutcome]

    def traces_csv(self, method: str) -> str:
        """(run, iteration, j_b, j_ab, j_a_reg, j_b_reg, total) for one method.

        UDL rows carry only ``total`` (epoch reconstruction error, iteration 0
        is the untrained model).
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "iteration", "j_b", "j_ab", "j_a_reg", "j_b_reg", "total"])
        first = 1 if method == "FTL" else 0
        for r in self.runs:
            for i, row in enumerate(r.traces.get(method, []), start=first):
                w.writerow([r.run, i, *("" if v is None else repr(v) for v in row)])
        return buf.getvalue()


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Repeat split/train/score ``cfg.runs`` times and summarize per method."""
    cfg.validate()
    pool = None if cfg.synthetic is not None else _load_pool(cfg)
    jobs = [(cfg, r, pool) for r in range(cfg.runs)]
    if cfg.workers > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            outcomes = list(ex.map(_run_star, jobs))
    else:
        outcomes = [_run_star(j) for j in jobs]
    outcomes.sort(key=lambda o: o.run)

    rows, failures = [], []
    needed = math.ceil(cfg.min_success_frac * cfg.runs - 1e-9)
    for method in cfg.methods:
        aucs = [o.aucs[method] for o in outcomes if method in o.aucs]
        for o in outcomes:
            if method in o.errors:
                failures.append({"method": method, "run": o.run, "seed": o.seed, "error": o.errors[method]})
                log.warning("%s run %d (seed %d) failed: %s", method, o.run, o.seed, o.errors[method])
        if len(aucs) < needed:
            raise HarnessError(
                f"{method}: only {len(aucs)} of {cfg.runs} runs succeeded, need {needed}"
            )
        rows.append(summarize(cfg.dataset_name, method, aucs))
    return ExperimentResult(SignificanceReport(rows, failures), outcomes)
