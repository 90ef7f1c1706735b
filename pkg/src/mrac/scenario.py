"""Scenario configuration: parsing, validation, and scheme dispatch.

A scenario is one JSON document (nested sections, matrices as row-major
arrays of arrays). ``load_config`` reports every validation problem it can
find, not just the first. Loaded configs hold plain Python values so they
round-trip losslessly through ``serialize_config``; numpy objects are built
only when the scenario runs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Any, Optional

import numpy as np

from .diagnostics import (SimulationTrace, check_delta_V, direct_V_series,
                          indirect_V_series, tracking_metrics)
from .direct import (DirectGainConfig, InitialConditions,
                     run_direct_scenario, stack_controller_gains)
from .errors import ConfigError, GainError, ModelError, ProjectionError
from .indirect import (IndirectGainConfig, ProjectionConfig,
                       run_indirect_scenario, theta_star_indirect)
from .lyapunov import (LyapunovDirectGains, LyapunovIndirectGains,
                       run_lyapunov_scenario)
from .systems import (CONTINUOUS, DISCRETE, PlantModel, ReferenceModel,
                      ReferenceSignal, solve_matching)

SCHEMES = ("direct_gradient", "indirect_gradient",
           "lyapunov_direct", "lyapunov_indirect")

_DEFAULT_OUTPUT = {"dir": None, "trace": True, "summary": True, "gnuplot": False}


@dataclass
class ScenarioConfig:
    scheme: str
    time_domain: str
    plant: dict
    reference: dict
    signal: dict
    gains: dict
    horizon: int
    projection: Optional[dict] = None
    init: dict = field(default_factory=dict)
    ct_step: float = 0.01
    integrator: str = "rk4"
    seed: int = 0
    name: str = "scenario"
    output: dict = field(default_factory=lambda: dict(_DEFAULT_OUTPUT))

    def to_dict(self) -> dict:
        return asdict(self)


def serialize_config(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def load_config(source) -> ScenarioConfig:
    """Parse and fully validate a scenario from a path or a JSON string."""
    text = source
    if isinstance(source, os.PathLike) or (
            isinstance(source, str) and "{" not in source):
        try:
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError([f"cannot read config file: {exc}"])
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            [f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"]
        )
    if not isinstance(data, dict):
        raise ConfigError(["config document must be a JSON object"])
    return config_from_dict(data)


def _matrix_or_none(data, key, errors, square=False):
    if key not in data or data[key] is None:
        errors.append(f"missing field: {key}")
        return None
    try:
        arr = np.asarray(data[key], dtype=float)
    except (TypeError, ValueError):
        errors.append(f"{key}: not a numeric matrix")
        return None
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.size == 0:
        errors.append(f"{key}: expected a 2-D array of numbers")
        return None
    if square and arr.shape[0] != arr.shape[1]:
        errors.append(f"{key}: must be square, got {arr.shape}")
        return None
    return arr


def config_from_dict(data: dict) -> ScenarioConfig:
    errors: list[str] = []

    scheme = data.get("scheme")
    if scheme not in SCHEMES:
        errors.append(f"scheme: expected one of {SCHEMES}, got {scheme!r}")
    time_domain = data.get("time_domain")
    if time_domain not in (DISCRETE, CONTINUOUS):
        errors.append(f"time_domain: expected 'discrete' or 'continuous', got {time_domain!r}")
    if scheme in ("lyapunov_direct", "lyapunov_indirect") and time_domain == DISCRETE:
        errors.append(f"scheme {scheme} requires time_domain 'continuous'")

    plant = data.get("plant") or {}
    reference = data.get("reference") or {}
    if not isinstance(plant, dict):
        errors.append("plant: must be an object with A and B")
        plant = {}
    if not isinstance(reference, dict):
        errors.append("reference: must be an object with A_m and B_m")
        reference = {}
    A = _matrix_or_none(plant, "A", errors, square=True)
    B = _matrix_or_none(plant, "B", errors)
    Am = _matrix_or_none(reference, "A_m", errors, square=True)
    Bm = _matrix_or_none(reference, "B_m", errors)

    plant_obj = ref_obj = None
    if A is not None and B is not None and time_domain in (DISCRETE, CONTINUOUS):
        try:
            plant_obj = PlantModel(A=A, B=B, time_domain=time_domain)
        except ModelError as exc:
            errors.append(f"plant: {exc}")
    if Am is not None and Bm is not None and time_domain in (DISCRETE, CONTINUOUS):
        try:
            ref_obj = ReferenceModel(A_m=Am, B_m=Bm, time_domain=time_domain)
        except ModelError as exc:
            errors.append(f"reference: {exc}")
    if plant_obj is not None and ref_obj is not None:
        if plant_obj.n != ref_obj.n or plant_obj.n_inputs != ref_obj.n_inputs:
            errors.append("plant and reference dimensions disagree")

    n = plant_obj.n if plant_obj is not None else None
    M = plant_obj.n_inputs if plant_obj is not None else None

    signal = data.get("signal")
    if not isinstance(signal, dict):
        errors.append("signal: must be an object with a 'kind'")
        signal = {}
    elif M is not None:
        try:
            sig = build_signal(signal, M)
            if sig.dimension != M:
                errors.append(
                    f"signal: dimension {sig.dimension} != input count {M}")
        except (ModelError, ConfigError, ValueError, TypeError) as exc:
            errors.append(f"signal: {exc}")

    horizon = data.get("horizon")
    if not isinstance(horizon, int) or horizon < 1:
        errors.append(f"horizon: expected a positive integer, got {horizon!r}")

    ct_step = data.get("ct_step", 0.01)
    if not isinstance(ct_step, (int, float)) or ct_step <= 0:
        errors.append(f"ct_step: expected a positive number, got {ct_step!r}")
    integrator = data.get("integrator", "rk4")
    if integrator not in ("rk4", "euler"):
        errors.append(f"integrator: expected 'rk4' or 'euler', got {integrator!r}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        errors.append(f"seed: expected an integer, got {seed!r}")

    gains = data.get("gains")
    if not isinstance(gains, dict):
        errors.append("gains: must be an object")
        gains = {}
    projection = data.get("projection")
    if projection is not None and not isinstance(projection, dict):
        errors.append("projection: must be an object or null")
        projection = None

    if projection is not None and M is not None:
        try:
            build_projection(projection, M)
        except (ProjectionError, ConfigError) as exc:
            errors.append(f"projection: {exc}")

    if scheme in SCHEMES and n is not None and time_domain in (DISCRETE, CONTINUOUS):
        try:
            build_gains(scheme, gains, n, M, time_domain)
        except (GainError, ConfigError) as exc:
            errors.append(f"gains: {exc}")

    init = data.get("init", {})
    if not isinstance(init, dict):
        errors.append("init: must be an object")
        init = {}
    if init.get("theta_scale") is not None and init.get("theta0") is not None:
        errors.append("init: give either theta_scale or theta0, not both")
    if init.get("theta_scale") is not None and plant_obj is not None and ref_obj is not None:
        try:
            match = solve_matching(plant_obj, ref_obj)
            if not match.matchable():
                errors.append(
                    f"init.theta_scale: plant not matchable (residual {match.residual:.3g}), "
                    "cannot scale the true parameters")
        except ModelError as exc:
            errors.append(f"init.theta_scale: {exc}")

    output = data.get("output", None)
    out = dict(_DEFAULT_OUTPUT)
    if output is not None:
        if not isinstance(output, dict):
            errors.append("output: must be an object")
        else:
            out.update(output)

    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(
        scheme=scheme, time_domain=time_domain, plant=plant, reference=reference,
        signal=signal, gains=gains, horizon=horizon, projection=projection,
        init=init, ct_step=float(ct_step), integrator=integrator, seed=seed,
        name=str(data.get("name", "scenario")), output=out,
    )


def build_models(cfg: ScenarioConfig):
    plant = PlantModel(A=np.asarray(cfg.plant["A"], float),
                       B=np.asarray(cfg.plant["B"], float),
                       time_domain=cfg.time_domain)
    ref = ReferenceModel(A_m=np.asarray(cfg.reference["A_m"], float),
                         B_m=np.asarray(cfg.reference["B_m"], float),
                         time_domain=cfg.time_domain)
    return plant, ref


def build_signal(spec: dict, M: int) -> ReferenceSignal:
    kind = spec.get("kind")
    if kind == "sum_of_sinusoids":
        amp = np.atleast_2d(np.asarray(spec["amplitudes"], float))
        freq = np.atleast_2d(np.asarray(spec["frequencies"], float))
        ph = spec.get("phases")
        return ReferenceSignal.sinusoids(amp, freq, ph)
    if kind == "constant":
        return ReferenceSignal.constant(spec["level"])
    if kind == "custom":
        return ReferenceSignal.from_samples(spec["samples"])
    raise ConfigError([f"unknown signal kind {kind!r}"])


def _gamma_stack(raw, n_w: int, M: int) -> np.ndarray:
    if isinstance(raw, (int, float)):
        return np.broadcast_to(float(raw) * np.eye(n_w), (M, n_w, n_w)).copy()
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 2:
        return np.broadcast_to(arr, (M, n_w, n_w)).copy()
    if arr.ndim == 3:
        return arr.copy()
    raise GainError(f"Gamma: expected a scalar, matrix, or list of matrices, got shape {arr.shape}")


def build_gains(scheme: str, raw: dict, n: int, M: int, time_domain: str):
    n_w = n + M
    if scheme == "direct_gradient":
        # the sign and lower-bound priors are assumptions the law depends
        # on; refusing to default them keeps mistakes loud
        for key in ("Gamma", "sign_k2", "k2_lower"):
            if key not in raw:
                raise GainError(f"missing field: {key}")
        return DirectGainConfig(
            Gamma=_gamma_stack(raw["Gamma"], n_w, M),
            gamma=np.atleast_1d(np.asarray(raw.get("gamma", 1.0), float)),
            sign_k2=np.atleast_1d(np.asarray(raw["sign_k2"], float)),
            k2_lower=np.atleast_1d(np.asarray(raw["k2_lower"], float)),
            time_domain=time_domain,
            enforce_diagonal_k2=bool(raw.get("enforce_diagonal_k2", True)),
        )
    if scheme == "indirect_gradient":
        if "Gamma" not in raw:
            raise GainError("missing field: Gamma")
        return IndirectGainConfig(Gamma=_gamma_stack(raw["Gamma"], n_w, M),
                                  time_domain=time_domain)
    if scheme == "lyapunov_direct":
        if "S_p" in raw and raw["S_p"] is not None:
            return LyapunovDirectGains(S_p=np.asarray(raw["S_p"], float))
        if "sign_k2" not in raw:
            raise GainError("missing field: sign_k2 (or give S_p)")
        if isinstance(raw.get("Gamma"), (int, float)):
            G = float(raw["Gamma"]) * np.eye(n)
        else:
            G = np.asarray(raw.get("Gamma", np.eye(n)), float)
        return LyapunovDirectGains(Gamma=G, gamma=float(raw.get("gamma", 1.0)),
                                   sign_k2=float(raw["sign_k2"]))
    if scheme == "lyapunov_indirect":
        if isinstance(raw.get("Gamma1"), (int, float)):
            G1 = float(raw["Gamma1"]) * np.eye(n)
        else:
            G1 = np.asarray(raw.get("Gamma1", np.eye(n)), float)
        if isinstance(raw.get("Gamma2"), (int, float)):
            G2 = float(raw["Gamma2"]) * np.eye(M)
        else:
            G2 = np.asarray(raw.get("Gamma2", np.eye(M)), float)
        return LyapunovIndirectGains(Gamma1=G1, Gamma2=G2,
                                     theta1_law=raw.get("theta1_law", "standard"))
    raise ConfigError([f"unknown scheme {scheme!r}"])


def build_projection(raw: dict, M: int) -> Optional[ProjectionConfig]:
    if raw is None:
        return None
    if "signs" not in raw:
        raise ProjectionError("projection needs the sign priors ('signs')")
    signs = np.atleast_1d(np.asarray(raw["signs"], float))
    if signs.shape[0] == 1 and M > 1:
        signs = np.repeat(signs, M)
    enabled = bool(raw.get("enabled", True))
    if "theta2_lower" in raw:
        return ProjectionConfig(theta2_lower=np.atleast_1d(
            np.asarray(raw["theta2_lower"], float)), signs=signs, enabled=enabled)
    if "k2_upper" in raw:
        return ProjectionConfig.from_k2_upper(raw["k2_upper"], signs, enabled)
    raise ProjectionError("projection needs theta2_lower or k2_upper")


def _true_parameters(cfg: ScenarioConfig, plant, ref):
    match = solve_matching(plant, ref)
    if not match.matchable():
        raise ConfigError(
            [f"plant not matchable (residual {match.residual:.3g})"])
    if cfg.scheme in ("direct_gradient", "lyapunov_direct"):
        theta_star = stack_controller_gains(match.K1, match.K2)
    else:
        theta_star = theta_star_indirect(match.K1, match.K2)
    k2d = np.diag(match.K2)
    rho_star = 1.0 / k2d
    return theta_star, rho_star


def resolve_init(cfg: ScenarioConfig, plant, ref) -> InitialConditions:
    """Concrete initial conditions; the *_scale shorthands multiply the true
    parameters obtained from the matching solver."""
    init = cfg.init
    theta0 = init.get("theta0")
    rho0 = init.get("rho0")
    if theta0 is not None:
        theta0 = np.asarray(theta0, float)
    if rho0 is not None:
        rho0 = np.asarray(rho0, float)
    if init.get("theta_scale") is not None or init.get("rho_scale") is not None:
        theta_star, rho_star = _true_parameters(cfg, plant, ref)
        if init.get("theta_scale") is not None:
            theta0 = float(init["theta_scale"]) * theta_star
        if init.get("rho_scale") is not None:
            rho0 = float(init["rho_scale"]) * rho_star
    return InitialConditions(
        x0=np.asarray(init["x0"], float) if init.get("x0") is not None else None,
        xm0=np.asarray(init["xm0"], float) if init.get("xm0") is not None else None,
        theta0=theta0, rho0=rho0,
        xhat0=np.asarray(init["xhat0"], float) if init.get("xhat0") is not None else None,
    )


@dataclass
class ScenarioRun:
    config: ScenarioConfig
    trace: SimulationTrace
    invariants: dict
    exit_status: int  # 0 ok, 2 diverged, 3 invariant violation


def _invariant_report(cfg: ScenarioConfig, trace: SimulationTrace,
                      gains, plant, ref) -> dict:
    report: dict[str, Any] = {}
    if trace.V is not None and trace.steps > 1:
        if cfg.scheme == "direct_gradient":
            match = solve_matching(plant, ref)
            series = direct_V_series(
                trace.theta, trace.rho,
                stack_controller_gains(match.K1, match.K2),
                1.0 / np.diag(match.K2), gains.Gamma, gains.gamma,
                trace.eps, trace.m)
            ok, first = check_delta_V(series, tolerance=1e-10)
            report["delta_v_ok"] = ok
            report["delta_v_first_violation"] = first
        elif cfg.scheme == "indirect_gradient":
            match = solve_matching(plant, ref)
            series = indirect_V_series(
                trace.theta, theta_star_indirect(match.K1, match.K2),
                gains.Gamma, trace.eps, trace.m)
            ok, first = check_delta_V(series, tolerance=1e-10)
            report["delta_v_ok"] = ok
            report["delta_v_first_violation"] = first
        else:
            dv = trace.dV[:-1] if trace.dV is not None else np.zeros(0)
            ok = bool(np.all(dv <= 1e-6)) if dv.size else True
            report["v_nonincreasing_ok"] = ok
    if cfg.scheme == "indirect_gradient" and trace.steps:
        M = plant.n_inputs
        n = plant.n
        theta2 = np.stack([trace.theta[:, n + j, j] for j in range(M)], axis=1)
        proj = build_projection(cfg.projection, M) if cfg.projection else None
        if proj is not None and proj.enabled:
            ok = bool(np.all(proj.signs[None, :] * theta2
                             >= proj.theta2_lower[None, :] - 1e-12))
            report["projection_ok"] = ok
        if M > 1:
            K2blk = trace.theta[:, n:, :]
            off = K2blk * (1.0 - np.eye(M))[None]
            report["theta2_diag_ok"] = bool(np.all(off == 0.0))
    if cfg.scheme == "direct_gradient" and plant.n_inputs > 1 \
            and getattr(gains, "enforce_diagonal_k2", False):
        M = plant.n_inputs
        K2blk = trace.theta[:, plant.n:, :]
        off = K2blk * (1.0 - np.eye(M))[None]
        report["k2_diag_ok"] = bool(np.all(off == 0.0))
    return report


def run_scenario(cfg: ScenarioConfig) -> ScenarioRun:
    """Build, dispatch, and post-check one validated scenario."""
    plant, ref = build_models(cfg)
    sig = build_signal(cfg.signal, plant.n_inputs)
    gains = build_gains(cfg.scheme, cfg.gains, plant.n, plant.n_inputs,
                        cfg.time_domain)
    proj = build_projection(cfg.projection, plant.n_inputs) if cfg.projection else None
    init = resolve_init(cfg, plant, ref)

    if cfg.scheme == "direct_gradient":
        trace = run_direct_scenario(plant, ref, sig, gains, init, cfg.horizon,
                                    h=cfg.ct_step, method=cfg.integrator)
    elif cfg.scheme == "indirect_gradient":
        trace = run_indirect_scenario(plant, ref, sig, gains, proj, init,
                                      cfg.horizon, h=cfg.ct_step,
                                      method=cfg.integrator)
    elif cfg.scheme == "lyapunov_direct":
        trace = run_lyapunov_scenario(plant, ref, sig, "direct", gains, None,
                                      init, cfg.horizon, h=cfg.ct_step,
                                      method=cfg.integrator,
                                      Q=np.asarray(cfg.gains["Q"], float)
                                      if "Q" in cfg.gains else None)
    else:
        trace = run_lyapunov_scenario(plant, ref, sig, "indirect", gains, proj,
                                      init, cfg.horizon, h=cfg.ct_step,
                                      method=cfg.integrator,
                                      Q=np.asarray(cfg.gains["Q"], float)
                                      if "Q" in cfg.gains else None)

    invariants = _invariant_report(cfg, trace, gains, plant, ref)
    if trace.diverged:
        status = 2
    elif any(v is False for v in invariants.values()):
        status = 3
    else:
        status = 0
    return ScenarioRun(config=cfg, trace=trace, invariants=invariants,
                       exit_status=status)


def summary_dict(run: ScenarioRun) -> dict:
    """Flat summary block written next to the trace (and used by batch rows)."""
    tr = run.trace
    metrics = tracking_metrics(tr)
    s = tr.summary
    return {
        "name": run.config.name,
        "scheme": run.config.scheme,
        "time_domain": run.config.time_domain,
        "steps": s.steps,
        "diverged": s.diverged,
        "sup_e": s.sup_e if math.isfinite(s.sup_e) else "inf",
        "last_window_max_e": metrics.last_window_max
        if math.isfinite(metrics.last_window_max) else "inf",
        "sum_eps2_over_m2": s.sum_eps2_over_m2,
        "sum_dtheta_sq": s.sum_dtheta_sq,
        "tail_frac_eps": s.tail_frac_eps,
        "tail_frac_dtheta": s.tail_frac_dtheta,
        "final_V": s.final_V,
        "invariants": run.invariants,
        "exit_status": run.exit_status,
    }


def benchmark_config(two_tone: bool = False) -> ScenarioConfig:
    """The bundled second-order benchmark: an unstable plant matched to
    a stable reference model, direct gradient adaptation from a 1.25x
    parameter offset."""
    freqs = [[0.13, 1.3]] if two_tone else [[0.13]]
    amps = [[1.0, 1.0]] if two_tone else [[1.0]]
    data = {
        "name": "second-order-benchmark" + ("-two-tone" if two_tone else ""),
        "scheme": "direct_gradient",
        "time_domain": "discrete",
        "plant": {"A": [[1.0, -1.0], [2.0, 1.0]], "B": [[0.0], [2.0]]},
        "reference": {"A_m": [[1.0, -1.0], [1.05, -1.2]], "B_m": [[0.0], [1.0]]},
        "signal": {"kind": "sum_of_sinusoids", "amplitudes": amps,
                   "frequencies": freqs},
        "gains": {"Gamma": 0.5, "gamma": 1.5, "sign_k2": 1.0, "k2_lower": 0.5},
        "init": {"theta_scale": 1.25, "rho_scale": 1.25},
        "horizon": 5000,
        "seed": 0,
    }
    return config_from_dict(data)
