"""Posterior draw records and their newline-delimited JSON persistence.

File layout: the first line is a header record carrying the format version,
the full hyperparameter set and a config hash; every later line is one draw.
Arrays are flattened in row-major order, i.e. component-major then year then
coordinate:

    zeta   (N-1,)        eta   (N-1, T)      mu (N, T, d)
    Sigma  (N, d, d)     theta (d,)          m  (d,)        V, D (d, d)

Floats are written with ``repr`` so a read-back is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .model import HyperConfig
from .prior import log_stick_weights

FORMAT = "dynord-draws"
FORMAT_VERSION = 1


class DrawFileError(ValueError):
    pass


@dataclass
class PosteriorDraw:
    iteration: int
    zeta: np.ndarray
    eta: np.ndarray
    alpha: float
    phi: float
    mu: np.ndarray
    Sigma: np.ndarray
    theta: np.ndarray
    m: np.ndarray
    V: np.ndarray
    D: np.ndarray

    @property
    def N(self) -> int:
        return self.mu.shape[0]

    @property
    def T(self) -> int:
        return self.mu.shape[1]

    @property
    def d(self) -> int:
        return self.mu.shape[2]

    def log_weights(self) -> np.ndarray:
        return log_stick_weights(self.zeta, self.eta, self.alpha)

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights())

    def snapshot(self, t: int, hyper: HyperConfig):
        """Mixture at 1-based year ``t``."""
        from .inference import MixtureSnapshot

        return MixtureSnapshot(
            t=t,
            weights=self.weights()[:, t - 1],
            means=self.mu[:, t - 1, :],
            covs=self.Sigma,
            cutoffs=hyper.cutoffs,
            layout=hyper.layout,
        )

    def to_record(self) -> dict:
        return {
            "record": "draw",
            "iteration": int(self.iteration),
            "zeta": self.zeta.ravel().tolist(),
            "eta": self.eta.ravel().tolist(),
            "alpha": float(self.alpha),
            "phi": float(self.phi),
            "mu": self.mu.ravel().tolist(),
            "Sigma": self.Sigma.ravel().tolist(),
            "theta": self.theta.ravel().tolist(),
            "m": self.m.ravel().tolist(),
            "V": self.V.ravel().tolist(),
            "D": self.D.ravel().tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict, N: int, T: int, d: int) -> "PosteriorDraw":
        arr = lambda key, shape: np.asarray(rec[key], dtype=np.float64).reshape(shape)  # noqa: E731
        return cls(
            iteration=int(rec["iteration"]),
            zeta=arr("zeta", (N - 1,)),
            eta=arr("eta", (N - 1, T)),
            alpha=float(rec["alpha"]),
            phi=float(rec["phi"]),
            mu=arr("mu", (N, T, d)),
            Sigma=arr("Sigma", (N, d, d)),
            theta=arr("theta", (d,)),
            m=arr("m", (d,)),
            V=arr("V", (d, d)),
            D=arr("D", (d, d)),
        )


def _dumps(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), allow_nan=False)


def header_record(hyper: HyperConfig, T: int, labels=(), missing_years=(), config_hash: str = "",
                  extra: dict | None = None) -> dict:
    rec = {
        "record": "header",
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "tool_version": __version__,
        "config_hash": config_hash,
        "T": int(T),
        "labels": list(labels),
        "missing_years": sorted(int(s) for s in missing_years),
        "hyper": hyper.to_dict(),
    }
    if extra:
        rec.update(extra)
    return rec


class DrawWriter:
    """Append-only writer; each draw is flushed as soon as it is written."""

    def __init__(self, path, header: dict | None = None, append: bool = False):
        self.path = Path(path)
        self._fh = open(self.path, "a" if append else "w")
        if header is not None and not append:
            self._fh.write(_dumps(header) + "\n")
            self._fh.flush()

    def write(self, draw: PosteriorDraw) -> None:
        self._fh.write(_dumps(draw.to_record()) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_header(path) -> dict:
    with open(path) as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DrawFileError(f"{path}: unreadable header") from exc
    if header.get("record") != "header" or header.get("format") != FORMAT:
        raise DrawFileError(f"{path}: not a {FORMAT} file")
    if header.get("version") != FORMAT_VERSION:
        raise DrawFileError(f"{path}: unsupported version {header.get('version')}")
    return header


def read_draws(path) -> tuple[dict, HyperConfig, list[PosteriorDraw]]:
    header = read_header(path)
    hyper = HyperConfig.from_dict(header["hyper"])
    N, T, d = hyper.N, header["T"], hyper.d
    draws = []
    with open(path) as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DrawFileError(f"{path}:{lineno}: corrupt record") from exc
            draws.append(PosteriorDraw.from_record(rec, N, T, d))
    return header, hyper, draws


def truncate_after(path, iteration: int) -> None:
    """Drop draw records with iteration greater than ``iteration`` (for resume)."""
    path = Path(path)
    lines = path.read_text().splitlines(keepends=True)
    keep = lines[:1]
    for line in lines[1:]:
        if line.strip() and json.loads(line)["iteration"] <= iteration:
            keep.append(line)
    path.write_text("".join(keep))
