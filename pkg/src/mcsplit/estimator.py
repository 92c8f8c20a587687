"""Estimator-style facade over the upscale / split / solve pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_coarse_n, check_field, check_fitted, check_nodal, check_positive, check_weights
from .assembly import gaussian_source
from .config import auto_cuts
from .exceptions import ConfigurationError
from .geometry import build_hierarchy, default_layers
from .macrosystem import SCHEMES, assemble_macro, estimate_C1, n_steps, run_transient, stability_report, tau_bounds
from .media import ContinuumSet, continua_by_threshold
from .postprocess import macro_block_averages, project_back, reference_block_averages
from .split import SelectionPolicy, aggregate, manual_plan, spectral_split
from .upscale import TensorStack, upscale_all


class MulticontinuumHomogenizer(BaseEstimator):
    """Coarse multicontinuum model of a high-contrast conductivity raster.

    ``fit`` solves the cell problems of every coarse block, splits the
    continua into slow and fast components and assembles the coarse system.
    ``predict`` time-steps it and returns per-block continuum averages;
    ``transform`` maps fine nodal fields to the same block averages so the
    two can be compared directly.

    Parameters
    ----------
    coarse_n : int
        Coarse blocks per side; must divide the raster size.
    layers : int or "auto"
        Oversampling layers (``"auto"``: ``ceil(-2 ln H)``).
    cuts : list of float or "auto"
        Value cuts separating the continua when ``continua`` is not passed
        to ``fit``.
    split : {"spectral", "manual"}
    slow : list of int, optional
        0-based slow continua for ``split="manual"``.
    gap_ratio : float
        Eigenvalue gap that makes a spectral split.
    scheme : str
        Time stepper used by ``predict``.
    tau : float
        Time step.
    source : {"gaussian", None}
        Gaussian bump load or no load.
    mass_form, boundary : str
        Passed to the coarse assembly and the cell problems.
    n_jobs : int
    cache_dir : str, optional
    """

    def __init__(
        self,
        coarse_n=10,
        layers="auto",
        cuts="auto",
        split="spectral",
        slow=None,
        gap_ratio=100.0,
        scheme="scheme2",
        tau=4e-7,
        source="gaussian",
        mass_form="constant",
        boundary="natural",
        n_jobs=1,
        cache_dir=None,
    ):
        self.coarse_n = coarse_n
        self.layers = layers
        self.cuts = cuts
        self.split = split
        self.slow = slow
        self.gap_ratio = gap_ratio
        self.scheme = scheme
        self.tau = tau
        self.source = source
        self.mass_form = mass_form
        self.boundary = boundary
        self.n_jobs = n_jobs
        self.cache_dir = cache_dir

    def fit(self, X, y=None, continua=None):
        """Upscale the raster ``X`` (``X[j, i]`` is cell ``(i, j)``).

        ``continua`` optionally gives the weights ``(N, n_cells)``; otherwise
        bands of ``X`` separated by ``cuts`` are used.
        """
        field = check_field(X)
        cn = check_coarse_n(self.coarse_n, field.fine_n)
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        check_positive(self.tau, "tau")
        mesh = build_hierarchy(field.fine_n, cn)
        if continua is None:
            cuts = auto_cuts(np.unique(field.values)) if self.cuts == "auto" else list(self.cuts)
            cont = continua_by_threshold(field, cuts, mesh)
        elif isinstance(continua, ContinuumSet):
            cont = continua
        else:
            cont = ContinuumSet.from_weights(check_weights(continua, mesh.n_cells), mesh)
        layers = default_layers(mesh.H) if self.layers == "auto" else int(self.layers)
        source = gaussian_source if self.source == "gaussian" else None
        results = upscale_all(
            mesh, field, cont, layers, cache_dir=self.cache_dir, source=source,
            source_tag=str(self.source), n_jobs=self.n_jobs, boundary=self.boundary,
        )
        ts = TensorStack.from_results(results)
        agg = aggregate(ts.A, ts.M, ts.C)
        if self.split == "manual":
            if self.slow is None:
                raise ConfigurationError("split='manual' needs slow")
            plan = manual_plan(cont.N, self.slow, agg)
        elif self.split == "spectral":
            plan = spectral_split(agg, SelectionPolicy(gap_ratio=self.gap_ratio))
        else:
            raise ConfigurationError(f"split must be 'spectral' or 'manual', got {self.split!r}")

        self.mesh_ = mesh
        self.field_ = field
        self.continua_ = cont
        self.layers_ = layers
        self.bases_ = {b: r[0] for b, r in results.items()}
        self.tensors_ = ts
        self.aggregate_ = agg
        self.plan_ = plan
        self.system_ = assemble_macro(mesh, ts, plan, self.mass_form)
        self.n_continua_ = cont.N
        return self

    def stability(self):
        """Stability ratios and step bounds of the fitted split."""
        check_fitted(self)
        if self.plan_.i0 == 0:
            raise ConfigurationError("the fitted split has no explicit component")
        return stability_report(self.system_, self.mesh_, self.aggregate_)

    def tau_bounds(self):
        check_fitted(self)
        return tau_bounds(self.plan_, estimate_C1(self.mesh_.coarse_n), self.mesh_.H, self.aggregate_)

    def predict(self, times):
        """Block averages ``(len(times), N, n_blocks)`` of the continuum variables.

        Each requested time is rounded to the step grid of ``tau``.
        """
        check_fitted(self)
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(times <= 0):
            raise ConfigurationError("prediction times must be positive")
        steps = np.array([n_steps(t, self.tau) for t in times])
        T = steps.max() * self.tau
        tr = run_transient(self.system_, self.scheme, self.tau, T, snapshot_every=1)
        if tr.diverged:
            raise ConfigurationError(f"{self.scheme} diverged at step {tr.steps} with tau={self.tau}")
        U = project_back(tr.states[steps], self.plan_.v_hat)
        return np.stack([macro_block_averages(u, self.mesh_.coarse_n) for u in U])

    def transform(self, X):
        """Continuum block averages ``(n_samples, N, n_blocks)`` of fine nodal fields."""
        check_fitted(self)
        U = check_nodal(X, (self.mesh_.fine_n + 1) ** 2)
        return np.stack([reference_block_averages(u, self.continua_, self.mesh_) for u in U])
