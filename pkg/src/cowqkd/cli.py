"""Command-line entry point.

Exit codes: 0 success, 1 session aborted, 2 configuration error,
3 calibration error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import config as cfgmod
from . import detection, optics, sweep
from .errors import CalibrationError, ConfigError, DomainError, SessionAbort
from .optics import OpticalBudget

EXIT_ABORT = 1
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3


class _Cli(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (ConfigError, DomainError) as exc:
            click.echo(f"config error: {exc}", err=True)
            ctx.exit(EXIT_CONFIG)
        except CalibrationError as exc:
            click.echo(f"calibration error: {exc}", err=True)
            ctx.exit(EXIT_CALIBRATION)
        except SessionAbort as exc:
            click.echo(f"session aborted: {exc}", err=True)
            ctx.exit(EXIT_ABORT)


def _show_config(ctx, _param, value):
    if not value or ctx.resilient_parsing:
        return
    cp = cfgmod.load_config(ctx.params.get("config_path"))
    click.echo(cfgmod.dump_config(cp), nl=False)
    ctx.exit(0)


@click.group(cls=_Cli)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              is_eager=True, help="INI file overriding the built-in defaults.")
@click.option("--show-config", is_flag=True, expose_value=False, is_eager=True,
              callback=_show_config, help="Print the effective configuration and exit.")
@click.pass_context
def main(ctx, config_path):
    """Coherent one-way QKD link simulator."""
    ctx.obj = cfgmod.load_config(config_path)


def _budget_from(cp, distance=None, extra_db=None, dt_us=None, filtering=None) -> OpticalBudget:
    g = lambda k: cfgmod.get_float(cp, "link", k)  # noqa: E731
    b = OpticalBudget(
        distance_km=g("distance_km") if distance is None else distance,
        extra_loss_db=g("extra_db") if extra_db is None else extra_db,
        loss_per_km=g("loss_per_km"), mu=g("mu"), pulse_rate_hz=g("pulse_rate_hz"),
        coupler_data_fraction=g("coupler_data_fraction"),
        detector_efficiency=g("detector_efficiency"),
        dead_time_s=(g("dead_time_us") if dt_us is None else dt_us) / 1e6)
    if filtering is None:
        filtering = sweep.filtering_for(sweep.effective_distance_km(b), cfgmod.filtering_table(cp))
    return b.with_(filtering_pct=filtering)


def _detector_from(cp, budget, bias_v=None) -> detection.DetectorParams:
    g = lambda k: cfgmod.get_float(cp, "detector", k)  # noqa: E731
    return detection.detector_for(budget, bias_v=g("bias_v") if bias_v is None else bias_v,
                                  p_baseline=g("p_baseline"),
                                  jitter_sigma_s=g("jitter_sigma_ps") * 1e-12,
                                  window_s=g("window_ns") * 1e-9)


@main.command()
@click.option("--distance", type=float, default=None, help="Fiber length in km.")
@click.option("--extra-db", type=float, default=None, help="Additional attenuation in dB.")
@click.option("--dt-us", type=float, default=None, help="Detector dead time in microseconds.")
@click.option("--dr", type=float, default=None)
@click.option("--cr", type=float, default=None)
@click.option("--bias-v", type=float, default=None)
@click.option("--filtering", type=float, default=None, help="Fixed filtering fraction.")
@click.option("--trace", is_flag=True, help="Also print the intermediate quantities.")
@click.option("--sig-figs", type=int, default=None, help="Round trace values as a hand calculation would.")
@click.pass_obj
def budget(cp, distance, extra_db, dt_us, dr, cr, bias_v, filtering, trace, sig_figs):
    """Analytic key rate at one operating point."""
    b = _budget_from(cp, distance, extra_db, dt_us, filtering)
    det = _detector_from(cp, b, bias_v)
    dr = cfgmod.get_float(cp, "postprocess", "dr") if dr is None else dr
    cr = cfgmod.get_float(cp, "postprocess", "cr") if cr is None else cr
    rep = optics.analytic_report(b, dr, cr, bias_v=det.bias_v, qber=detection.qber_model(b, det))
    out = {"distance_km": b.distance_km, "extra_db": b.extra_loss_db, "loss_db": b.loss_db,
           "dead_time_us": b.dead_time_s * 1e6, "filtering": b.filtering_pct, "dr": dr, "cr": cr,
           "total_clicks_hz": rep.total_clicks_hz, "effective_clicks_hz": rep.effective_clicks_hz,
           "qber_model": rep.qber, "kr_bps": rep.secret_kr_bps}
    if trace:
        out["trace"] = optics.budget_trace(b, sig_figs)
    click.echo(json.dumps(out, indent=2))


def _grid(cp, key, flag):
    return cfgmod.parse_list(flag if flag is not None else cp["sweep"][key], key)


@main.command("sweep")
@click.option("--mode", type=click.Choice([m.value for m in sweep.Mode]), default=None)
@click.option("--distances", default=None, help="Comma-separated km values.")
@click.option("--extra-db", default=None, help="Comma-separated dB values.")
@click.option("--dr", default=None)
@click.option("--cr", default=None)
@click.option("--dt-us", default=None, help="Comma-separated dead times in microseconds.")
@click.option("--bias-v", default=None)
@click.option("--seed", type=int, default=None)
@click.option("--n-pairs", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--allow-arbitrary-dr", is_flag=True, default=None)
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="CSV path (stdout when omitted).")
@click.pass_obj
def sweep_cmd(cp, mode, distances, extra_db, dr, cr, dt_us, bias_v, seed, n_pairs, workers,
              allow_arbitrary_dr, output):
    """Evaluate a parameter grid and emit CSV."""
    s = cp["sweep"]
    spec = sweep.SweepSpec(
        mode=sweep.Mode(mode or s["mode"]),
        distances_km=_grid(cp, "distances_km", distances),
        extra_db=_grid(cp, "extra_db", extra_db),
        dr=_grid(cp, "dr", dr), cr=_grid(cp, "cr", cr),
        dead_times_us=_grid(cp, "dead_times_us", dt_us),
        bias_v=_grid(cp, "bias_v", bias_v),
        seed=cfgmod.get_int(cp, "sweep", "seed") if seed is None else seed,
        n_pairs=cfgmod.get_int(cp, "sweep", "n_pairs") if n_pairs is None else n_pairs,
        workers=cfgmod.get_int(cp, "sweep", "workers") if workers is None else workers,
        allow_arbitrary_dr=(cfgmod.get_bool(cp, "sweep", "allow_arbitrary_dr")
                            if allow_arbitrary_dr is None else allow_arbitrary_dr),
        qber_ceiling=cfgmod.get_float(cp, "postprocess", "qber_ceiling"),
        p_baseline=cfgmod.get_float(cp, "detector", "p_baseline"),
        code_rate=cp["postprocess"]["code_rate"],
        filtering=cfgmod.filtering_table(cp))
    result = sweep.run_sweep(spec)
    if output:
        sweep.emit_csv(result, output)
        click.echo(json.dumps(result.meta), err=True)
    else:
        click.echo(sweep.csv_text(result), nl=False)


@main.command()
@click.option("--objective", type=click.Choice(["lsq", "minimax"]), default=None)
@click.option("--target", "targets", multiple=True,
              help="Custom target DIST_KM:KR_BPS:DR:CR:DT_US; repeatable.  Replaces the built-in set.")
@click.pass_obj
def calibrate(cp, objective, targets):
    """Fit one filtering fraction per distance to reported key rates."""
    objective = objective or cp["calibration"]["objective"]
    table = sweep.REPORTED_TARGETS
    if targets:
        table = {}
        for t in targets:
            try:
                d, kr, dr, cr, dt = (float(x) for x in t.split(":"))
            except ValueError as exc:
                raise ConfigError(f"bad target {t!r}; expected DIST:KR:DR:CR:DT_US") from exc
            table.setdefault(d, []).append(sweep.KrTarget(kr, dr, cr, dt / 1e6))
    fits = sweep.calibrate_presets(objective, table)
    rows = []
    for d, fil in fits.items():
        for t in table[d]:
            b = OpticalBudget(distance_km=d, dead_time_s=t.dead_time_s, filtering_pct=fil)
            kr = optics.secret_key_rate(optics.effective_clicks(optics.total_clicks(b), fil), t.dr, t.cr)
            rows.append({"distance_km": d, "filtering": fil, "target": t.label or None,
                         "target_bps": t.kr_bps, "model_bps": kr, "rel_err": kr / t.kr_bps - 1})
    click.echo(json.dumps({"objective": objective, "filtering": {str(k): v for k, v in fits.items()},
                           "rows": rows}, indent=2))


@main.command()
@click.option("--distance", type=float, default=None)
@click.option("--duration-s", type=float, default=7200.0)
@click.option("--interval-s", type=float, default=60.0)
@click.option("--seed", type=int, default=0)
@click.option("--mode", type=click.Choice(["montecarlo", "analytic"]), default="montecarlo")
@click.option("--dr", type=float, default=0.03125)
@click.option("--cr", type=float, default=0.9)
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def stability(cp, distance, duration_s, interval_s, seed, mode, dr, cr, output):
    """Key rate per interval over a long run at fixed parameters."""
    b = _budget_from(cp, distance)
    det = _detector_from(cp, b)
    series = sweep.stability_run(b, duration_s, interval_s, seed, dr=dr, cr=cr, bias_v=det.bias_v,
                                 mode=sweep.Mode(mode), p_baseline=det.p_baseline)
    slope, p = series.trend()
    if output:
        lines = ["t_s,kr_bps"] + [f"{t:.6g},{k:.6g}" for t, k in zip(series.t_s, series.kr_bps)]
        Path(output).write_text("\n".join(lines) + "\n")
    click.echo(json.dumps({"intervals": len(series.kr_bps), "mean_kr_bps": float(np.mean(series.kr_bps)),
                           "rel_std": series.rel_std, "slope_bps_per_s": slope, "slope_p": p,
                           "qber_model": series.qber}, indent=2))


def _session_config(cp, n_pairs, error_rate, physical, distance):
    from .link import IdealChannel, PhysicalChannel, SessionConfig
    b = _budget_from(cp, distance)
    quantum = PhysicalChannel(_detector_from(cp, b)) if physical else IdealChannel(1.0, error_rate)
    code_rate = cp["postprocess"]["code_rate"]
    return SessionConfig(n_pairs=n_pairs, dr=cfgmod.get_float(cp, "postprocess", "dr"),
                         cr=cfgmod.get_float(cp, "postprocess", "cr"),
                         qber_ceiling=cfgmod.get_float(cp, "postprocess", "qber_ceiling"),
                         block_size=cfgmod.get_int(cp, "postprocess", "block_size"),
                         code_rate=code_rate, budget=b, quantum=quantum)


def _finish(result, key_out):
    from .privacy import write_final_key
    if key_out:
        write_final_key(key_out, result.key, 0, result.report.cr,
                        [{"block_id": 0, "n_in": len(result.key), "n_out": len(result.key)}])
    click.echo(json.dumps({"role": result.role.value, "key_bits": int(len(result.key)),
                           "blocks_ok": result.blocks_ok, "blocks_total": result.blocks_total,
                           "qber": result.report.qber, "phase": result.phase.name}))


_session_options = [
    click.option("--host", default="127.0.0.1"),
    click.option("--port", type=int, default=47800),
    click.option("--seed", type=int, default=0),
    click.option("--timeout", type=float, default=60.0),
    click.option("--key-out", type=click.Path(dir_okay=False), default=None,
                 help="Write the final key and its manifest here."),
]


def _with_session_options(fn):
    for opt in reversed(_session_options):
        fn = opt(fn)
    return fn


@main.command("serve-alice")
@_with_session_options
@click.option("--n-pairs", type=int, default=65536)
@click.option("--error-rate", type=float, default=0.0, help="Injected error rate of the ideal channel.")
@click.option("--physical", is_flag=True, help="Use the Monte Carlo detector channel instead.")
@click.option("--distance", type=float, default=None)
@click.pass_obj
def serve_alice(cp, host, port, seed, timeout, key_out, n_pairs, error_rate, physical, distance):
    """Listen for Bob and run Alice's side of one session."""
    from .link import accept_one, run_alice
    config = _session_config(cp, n_pairs, error_rate, physical, distance)
    chan = accept_one(host, port, timeout,
                      ready=lambda p: click.echo(f"listening on {host}:{p}", err=True))
    try:
        _finish(run_alice(config, chan, seed), key_out)
    finally:
        chan.close()


@main.command("serve-bob")
@_with_session_options
@click.pass_obj
def serve_bob(cp, host, port, seed, timeout, key_out):
    """Connect to Alice and run Bob's side of one session."""
    from .link import SessionConfig, connect, run_bob
    chan = connect(host, port, timeout)
    try:
        _finish(run_bob(SessionConfig(budget=_budget_from(cp)), chan, seed), key_out)
    finally:
        chan.close()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
