"""Reagent panel selection from single-reagent card fingerprints.

Builds the drug x reagent reaction-strength matrix, factors it with a
one-sided Jacobi SVD, ranks reagents per drug by their contribution to the
matrix rows, assembles the 12-slot panel and verifies that every drug pair
stays separable by more than one intra-class standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import core

WHITE = np.array([255.0, 255.0, 255.0])
MAX_RGB_DIST = float(np.linalg.norm(WHITE))     # 255 * sqrt(3)

TIMER_SLOT = -1     # sentinel reagent index for the timer lane


# ---------------------------------------------------------------------------
# Fingerprint database

@dataclass
class FingerprintDatabase:
    """Replicate 9-lane fingerprints for every (drug, reagent) pair."""
    drugs: list
    reagents: list
    records: dict            # (drug_idx, reagent_idx) -> list of (9, 3) arrays

    def validate(self) -> None:
        for d in range(len(self.drugs)):
            for r in range(len(self.reagents)):
                reps = self.records.get((d, r))
                if not reps:
                    raise ValueError(f"missing records for drug {d}, reagent {r}")
                for fp in reps:
                    if np.asarray(fp).shape != (9, 3):
                        raise ValueError("fingerprints must have 9 lanes")

    def to_json(self) -> dict:
        return {
            "version": 1,
            "drugs": list(self.drugs),
            "reagents": list(self.reagents),
            "records": {
                f"{self.drugs[d]}|{self.reagents[r]}": [
                    [round(float(v), 3) for v in np.asarray(fp).reshape(-1)]
                    for fp in reps
                ]
                for (d, r), reps in sorted(self.records.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FingerprintDatabase":
        drugs = list(obj["drugs"])
        reagents = [str(r) for r in obj["reagents"]]
        records = {}
        for key, reps in obj["records"].items():
            dname, rname = key.split("|", 1)
            d = drugs.index(dname)
            r = reagents.index(rname)
            records[(d, r)] = [np.array(fp, dtype=np.float64).reshape(9, 3)
                               for fp in reps]
        return cls(drugs=drugs, reagents=reagents, records=records)


class MatrixMode(Enum):
    """Meaning of the distance matrix entries."""
    DISTANCE_FROM_WHITE = "white"        # reaction strength vs card background
    DISTANCE_FROM_BLANK = "blank"        # vs a per-reagent blank-card baseline


def build_distance_matrix(db: FingerprintDatabase,
                          mode: MatrixMode = MatrixMode.DISTANCE_FROM_WHITE,
                          blank_baseline: np.ndarray | None = None) -> np.ndarray:
    """Mean per-lane color distance for each (drug, reagent) pair."""
    db.validate()
    n_drugs, n_reagents = len(db.drugs), len(db.reagents)
    if mode is MatrixMode.DISTANCE_FROM_BLANK:
        if blank_baseline is None:
            raise ValueError("blank baseline required for blank mode")
        baseline = np.asarray(blank_baseline, dtype=np.float64)
    m = np.zeros((n_drugs, n_reagents))
    for d in range(n_drugs):
        for r in range(n_reagents):
            dists = []
            for fp in db.records[(d, r)]:
                fp = np.asarray(fp, dtype=np.float64)
                ref = WHITE if mode is MatrixMode.DISTANCE_FROM_WHITE \
                    else baseline[r]
                dists.append(np.linalg.norm(fp - ref, axis=1).mean())
            m[d, r] = np.mean(dists)
    return m


# ---------------------------------------------------------------------------
# One-sided Jacobi SVD

@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray            # (n, n) orthogonal
    s: np.ndarray            # min(n, k) singular values, descending
    v: np.ndarray            # (k, k) orthogonal

    def reconstruct(self) -> np.ndarray:
        r = self.s.size
        return self.u[:, :r] * self.s @ self.v[:, :r].T


def _complete_basis(cols: np.ndarray, dim: int) -> np.ndarray:
    """Extend orthonormal columns to a full orthonormal basis of R^dim."""
    basis = [cols[:, i] for i in range(cols.shape[1])]
    for i in range(dim):
        if len(basis) == dim:
            break
        v = np.zeros(dim)
        v[i] = 1.0
        for b in basis:
            v -= (b @ v) * b
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            basis.append(v / norm)
    return np.column_stack(basis)


def _jacobi_svd(a: np.ndarray, tol: float = 1e-13, max_sweeps: int = 60):
    """One-sided Jacobi on the columns of a (m >= n assumed)."""
    w = a.astype(np.float64).copy()
    m, n = w.shape
    v = np.eye(n)
    scale = np.linalg.norm(w)
    if scale == 0:
        return w, np.zeros(n), v
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = w[:, p] @ w[:, p]
                beta = w[:, q] @ w[:, q]
                gamma = w[:, p] @ w[:, q]
                off = max(off, abs(gamma) / (np.sqrt(alpha * beta) + 1e-300))
                if abs(gamma) < 1e-300:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                # sign(0) must be +1 here or equal-norm columns never rotate
                sign = 1.0 if zeta >= 0 else -1.0
                if abs(zeta) > 1e150:          # sqrt(1 + zeta^2) would overflow
                    t = sign / (2.0 * abs(zeta))
                else:
                    t = sign / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wp = w[:, p].copy()
                w[:, p] = c * wp - s * w[:, q]
                w[:, q] = s * wp + c * w[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if off < tol:
            break
    sing = np.sqrt((w * w).sum(axis=0))
    u = np.where(sing > 1e-300, w / np.where(sing > 0, sing, 1.0), 0.0)
    return u, sing, v


def svd(m: np.ndarray) -> SvdResult:
    """Full SVD M = U diag(S) V^T with a deterministic sign convention."""
    m = np.asarray(m, dtype=np.float64)
    if not np.isfinite(m).all():
        raise ValueError("matrix entries must be finite")
    rows, cols = m.shape
    transposed = rows < cols
    a = m.T if transposed else m                     # tall: a.shape[0] >= a.shape[1]
    u_thin, s, v_small = _jacobi_svd(a)

    order = np.argsort(-s, kind="stable")
    s = s[order]
    u_thin = u_thin[:, order]
    v_small = v_small[:, order]

    # near-zero singular values leave behind normalized noise columns, so
    # rank must come from the spectrum, not from u column norms
    rank_tol = max(a.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0)
    rank = int((s > rank_tol).sum())
    u_a = _complete_basis(u_thin[:, :rank], a.shape[0])
    v_a = v_small                                    # already square orthogonal

    u, v = (v_a, u_a) if transposed else (u_a, v_a)

    # sign convention: largest-magnitude component of each right singular
    # vector is nonnegative; paired u columns flip with it
    for k in range(v.shape[1]):
        idx = int(np.argmax(np.abs(v[:, k])))
        if v[idx, k] < 0:
            v[:, k] = -v[:, k]
            if k < u.shape[1]:
                u[:, k] = -u[:, k]
    for k in range(v.shape[1], u.shape[1]):
        idx = int(np.argmax(np.abs(u[:, k])))
        if u[idx, k] < 0:
            u[:, k] = -u[:, k]

    result = SvdResult(u=u, s=s, v=v)
    _check_svd(result, m)
    return result


def _check_svd(res: SvdResult, m: np.ndarray, rtol: float = 1e-8) -> None:
    norm = np.linalg.norm(m)
    recon_err = np.linalg.norm(res.reconstruct() - m)
    if norm > 0 and recon_err > rtol * norm:
        raise AssertionError(f"SVD reconstruction error {recon_err:.2e}")
    for q, name in ((res.u, "U"), (res.v, "V")):
        err = np.abs(q.T @ q - np.eye(q.shape[1])).max()
        if err > rtol:
            raise AssertionError(f"{name} not orthogonal: {err:.2e}")
    if np.any(np.diff(res.s) > 1e-12):
        raise AssertionError("singular values not descending")


# ---------------------------------------------------------------------------
# Reagent ranking and panel assembly

def reagent_scores(m: np.ndarray, svd_result: SvdResult,
                   drug_index: int) -> np.ndarray:
    """Contribution of each reagent to one drug's row of the factorization."""
    n_drugs, n_reagents = m.shape
    if not 0 <= drug_index < n_drugs:
        raise IndexError(f"drug index {drug_index} out of range")
    r = svd_result.s.size
    u_row = svd_result.u[drug_index, :r]
    v = svd_result.v[:, :r]
    return np.abs(u_row * v) @ svd_result.s


def rank_reagents_for_drug(m: np.ndarray, svd_result: SvdResult,
                           drug_index: int) -> list[int]:
    """Reagent indices ordered by distinctiveness for one drug."""
    scores = reagent_scores(m, svd_result, drug_index)
    # descending score; ties broken by lower reagent index
    return sorted(range(len(scores)), key=lambda j: (-scores[j], j))


def select_panel(m: np.ndarray, svd_result: SvdResult,
                 panel_size: int = 12) -> list[int]:
    """Panel = timer slot + per-drug top reagents + best global fillers."""
    n_drugs, n_reagents = m.shape
    if panel_size > n_reagents:
        raise ValueError("panel larger than reagent catalog")
    chosen: list[int] = []
    for d in range(n_drugs):
        top = rank_reagents_for_drug(m, svd_result, d)[0]
        if top not in chosen:
            chosen.append(top)
    if len(chosen) > panel_size - 1:
        raise ValueError(
            f"{len(chosen)} distinct top reagents exceed panel capacity "
            f"{panel_size - 1}")
    if len(chosen) < panel_size - 1:
        totals = np.zeros(n_reagents)
        for d in range(n_drugs):
            totals += reagent_scores(m, svd_result, d)
        for j in sorted(range(n_reagents), key=lambda j: (-totals[j], j)):
            if j not in chosen:
                chosen.append(j)
            if len(chosen) == panel_size - 1:
                break
    return [TIMER_SLOT] + chosen


def panel_fingerprints_from_db(db: FingerprintDatabase,
                               panel: list[int]) -> dict:
    """Per-drug replicate descriptors over the selected panel reagents.

    Each replicate concatenates the per-reagent lane-mean RGB colors; the
    timer slot contributes nothing (it is drug-independent).
    """
    reagents = [r for r in panel if r != TIMER_SLOT]
    out = {}
    for d in range(len(db.drugs)):
        n_reps = min(len(db.records[(d, r)]) for r in reagents)
        reps = []
        for t in range(n_reps):
            parts = [np.asarray(db.records[(d, r)][t]).mean(axis=0)
                     for r in reagents]
            reps.append(np.concatenate(parts))
        out[d] = reps
    return out


# ---------------------------------------------------------------------------
# Uniqueness verification

@dataclass
class UniquenessReport:
    passed: bool
    worst_pair: tuple[int, int]
    worst_margin: float
    margins: dict            # (p, q) -> inter-class norm minus max intra std
    failing_pairs: list

    def to_json(self) -> dict:
        return {
            "version": 1,
            "pass": self.passed,
            "worst_pair": list(self.worst_pair),
            "worst_margin": round(self.worst_margin, 6),
            "failing_pairs": [list(p) for p in self.failing_pairs],
            "margins": {f"{p}|{q}": round(v, 6)
                        for (p, q), v in sorted(self.margins.items())},
        }


def verify_uniqueness(panel_fingerprints: dict) -> UniquenessReport:
    """Check inter-class norm > max intra-class std for every drug pair."""
    means, stds = {}, {}
    for drug, reps in panel_fingerprints.items():
        flat = np.array([np.asarray(fp, dtype=np.float64).reshape(-1)
                         for fp in reps])
        if flat.shape[0] < 2:
            raise ValueError(f"drug {drug} needs >= 2 replicates")
        mean = flat.mean(axis=0)
        means[drug] = mean
        stds[drug] = float(np.std(np.linalg.norm(flat - mean, axis=1)))

    margins = {}
    failing = []
    worst = None
    for p in sorted(means):
        for q in sorted(means):
            if q <= p:
                continue
            inter = float(np.linalg.norm(means[p] - means[q]))
            margin = inter - max(stds[p], stds[q])
            margins[(p, q)] = margin
            if margin <= 0:
                failing.append((p, q))
            if worst is None or margin < margins[worst]:
                worst = (p, q)
    return UniquenessReport(
        passed=not failing,
        worst_pair=worst,
        worst_margin=margins[worst],
        margins=margins,
        failing_pairs=failing,
    )
