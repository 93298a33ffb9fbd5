"""Evaluation: SI-SDR(i), detection precision/recall with angular error, ITD/ILD
deviation of renders, and the multi-resolution spectral training loss."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import StftConfig, as_binaural, as_mono, stft, xcorr_lag
from .errors import InvalidReference, SilentStem
from .locsep import wrap_diff

SI_SDR_CAP_DB = 60.0
LOSS_RESOLUTIONS = ((1024, 120, 600), (2048, 240, 1200), (512, 50, 240))  # (fft, hop, win)
LOG_MAG_FLOOR = 1e-7
L1_WEIGHT_LAMBDA = 0.1


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, clipped to +-60 dB."""
    est = as_mono(estimate)
    ref = as_mono(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.size} vs {ref.size}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise InvalidReference("reference signal is all zeros")
    target = (np.dot(est, ref) / ref_energy) * ref
    err = target - est
    num, den = float(np.dot(target, target)), float(np.dot(err, err))
    if num == 0.0:
        return -SI_SDR_CAP_DB
    if den == 0.0:
        return SI_SDR_CAP_DB
    return float(np.clip(10 * np.log10(num / den), -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


def si_sdr_binaural(estimate, reference) -> float:
    est, ref = as_binaural(estimate), as_binaural(reference)
    return 0.5 * (si_sdr(est[0], ref[0]) + si_sdr(est[1], ref[1]))


def si_sdri(estimate, reference, mixture) -> float:
    fn = si_sdr_binaural if np.ndim(reference) == 2 else si_sdr
    return fn(estimate, reference) - fn(mixture, reference)


@dataclass
class MatchResult:
    precision: float
    recall: float
    pairs: list[tuple[int, int]]
    errors: list[float]


def count_match(estimates, truths, tol: float = 5.0) -> MatchResult:
    """Greedy nearest-angle matching of estimated to true azimuths.

    An empty estimate set has precision 1 and an empty truth set recall 1,
    so the silent-scene case scores perfectly.
    """
    est = [float(a) for a in estimates]
    tru = [float(a) for a in truths]
    cand = sorted(
        (wrap_diff(e, t), i, j)
        for i, e in enumerate(est)
        for j, t in enumerate(tru)
        if wrap_diff(e, t) <= tol + 1e-9
    )
    used_e, used_t, pairs, errors = set(), set(), [], []
    for d, i, j in cand:
        if i in used_e or j in used_t:
            continue
        used_e.add(i)
        used_t.add(j)
        pairs.append((i, j))
        errors.append(d)
    precision = len(pairs) / len(est) if est else 1.0
    recall = len(pairs) / len(tru) if tru else 1.0
    return MatchResult(precision, recall, pairs, errors)


def _check_audible(x: np.ndarray, what: str) -> None:
    if not np.any(x[0]) or not np.any(x[1]):
        raise SilentStem(f"{what} has a silent channel")


def itd_us(x) -> float:
    x = as_binaural(x)
    _check_audible(x, "signal")
    return xcorr_lag(x[0], x[1]) * 1e6


def ild_db(x) -> float:
    x = as_binaural(x)
    _check_audible(x, "signal")
    return float(20 * np.log10(np.abs(x[1]).sum() / np.abs(x[0]).sum()))


def delta_itd(render, reference) -> float:
    return abs(itd_us(render) - itd_us(reference))


def delta_ild(render, reference) -> float:
    return abs(ild_db(render) - ild_db(reference))


def _mag(x: np.ndarray, fft: int, hop: int, win: int) -> np.ndarray:
    return np.abs(stft(x, StftConfig(window_len=win, hop_len=hop, fft_len=fft)))


def multires_spec_loss(estimate, target, resolutions=LOSS_RESOLUTIONS,
                       sc: bool = True, log_mag: bool = True) -> float:
    """Sum over STFT resolutions of spectral convergence plus mean log-magnitude L1.

    Spectral convergence is normalised by the target spectrum only, so the
    loss is not symmetric in its arguments.
    """
    est = as_mono(estimate)
    tgt = as_mono(target)
    if est.shape != tgt.shape:
        raise ValueError(f"length mismatch: {est.size} vs {tgt.size}")
    total = 0.0
    for fft, hop, win in resolutions:
        e, t = _mag(est, fft, hop, win), _mag(tgt, fft, hop, win)
        if sc:
            diff = np.linalg.norm(t - e)
            total += diff / np.linalg.norm(t) if diff > 0 else 0.0
        if log_mag:
            total += float(np.mean(np.abs(np.log(np.maximum(t, LOG_MAG_FLOOR))
                                          - np.log(np.maximum(e, LOG_MAG_FLOOR)))))
    return float(total)


def train_loss(estimate, target, lam: float = L1_WEIGHT_LAMBDA) -> float:
    est, tgt = as_mono(estimate), as_mono(target)
    return float(np.mean(np.abs(est - tgt))) + lam * multires_spec_loss(est, tgt)


@dataclass
class SeparationReport:
    precision: float
    recall: float
    si_sdr_in: list[float] = field(default_factory=list)
    si_sdr_out: list[float] = field(default_factory=list)
    si_sdri: list[float] = field(default_factory=list)
    angular_errors: list[float] = field(default_factory=list)


@dataclass
class RenderReport:
    delta_itd_us: float
    delta_ild_db: float


def separation_report(estimates, truth_angles, truth_stems, mixture, tol: float = 5.0) -> SeparationReport:
    """``estimates``: objects with ``angle`` and binaural ``stem``; stems are cropped to a common length."""
    match = count_match([e.angle for e in estimates], truth_angles, tol)
    rep = SeparationReport(match.precision, match.recall, angular_errors=list(match.errors))
    mixture = as_binaural(mixture)
    for i, j in match.pairs:
        ref = as_binaural(truth_stems[j])
        est = as_binaural(estimates[i].stem)
        n = min(ref.shape[1], est.shape[1], mixture.shape[1])
        s_in = si_sdr_binaural(mixture[:, :n], ref[:, :n])
        s_out = si_sdr_binaural(est[:, :n], ref[:, :n])
        rep.si_sdr_in.append(s_in)
        rep.si_sdr_out.append(s_out)
        rep.si_sdri.append(s_out - s_in)
    return rep


EVAL_FIELDS = ("precision", "recall", "aoa_median_deg", "aoa_p90_deg", "si_sdri_mean_db",
               "ditd_mean_us", "dild_mean_db", "al_s", "bleu")


@dataclass
class EvalReport:
    precision: float | None = None
    recall: float | None = None
    aoa_median_deg: float | None = None
    aoa_p90_deg: float | None = None
    si_sdri_mean_db: float | None = None
    ditd_mean_us: float | None = None
    dild_mean_db: float | None = None
    al_s: float | None = None
    bleu: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, json_path, csv_path=None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
                w.writeheader()
                w.writerow({k: ("" if v is None else v) for k, v in self.to_dict().items()})


def _mean(xs) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


def aggregate(separations: list[SeparationReport] = (), renders: list[RenderReport] = (),
              al_s: float | None = None, bleu: float | None = None) -> EvalReport:
    """Corpus-level summary; precision/recall are averaged over scenes."""
    errs = [e for r in separations for e in r.angular_errors]
    return EvalReport(
        precision=_mean([r.precision for r in separations]),
        recall=_mean([r.recall for r in separations]),
        aoa_median_deg=float(np.median(errs)) if errs else None,
        aoa_p90_deg=float(np.percentile(errs, 90)) if errs else None,
        si_sdri_mean_db=_mean([v for r in separations for v in r.si_sdri]),
        ditd_mean_us=_mean([r.delta_itd_us for r in renders]),
        dild_mean_db=_mean([r.delta_ild_db for r in renders]),
        al_s=al_s,
        bleu=bleu,
    )
