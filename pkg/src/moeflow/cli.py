"""Command-line entry point.

Subcommands cover the full experiment loop: train a field or mixture,
sample with frozen routing, score samples against the data distribution,
verify the closed-form theory against the brute-force oracles, and render
figures. Exit codes are a stable contract: 0 success, 1 validation
problems (bad flags, configs, formats), 2 numerical failures (divergence,
non-finite states, starved estimators, failed oracle checks).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import (
    checkpoint,
    config as config_mod,
    datasets,
    flow,
    metrics,
    moefm,
    nnet,
    oracle,
    svgplot,
)
from .errors import (
    DivergenceError,
    NumericalError,
    ValidationError,
)

HELDOUT_SEED = 986_131  # reference draws never overlap training streams


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; our contract reserves 2 for
    numerical failures, so remap usage problems to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="moeflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[], help="fit a model from a config file")
    train.add_argument("--config", required=True, help="TOML run configuration")
    train.add_argument("--out", help="output directory (overrides config)")
    train.add_argument("--seed", type=int, help="training seed override")
    train.add_argument("--steps", type=int, help="training steps override")
    train.add_argument("--k", type=int, help="expert count override (moefm)")
    train.add_argument("--sigma", type=float, help="kernel width override (moefm)")
    train.set_defaults(func=cmd_train)

    sample = sub.add_parser("sample", help="draw endpoints from a checkpoint")
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--out", required=True, help="output directory")
    sample.add_argument("-n", type=int, default=4096, help="sample count")
    sample.add_argument("--T", type=int, default=4, dest="t_steps", help="Euler steps")
    sample.add_argument("--mode", choices=("sampled", "greedy"), default="sampled")
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument(
        "--trajectories", action="store_true", help="also write trajectories.csv"
    )
    sample.set_defaults(func=cmd_sample)

    ev = sub.add_parser("eval", help="score samples against the reference data")
    ev.add_argument("--config", required=True, help="config naming the reference dataset")
    ev.add_argument("--samples", required=True, help="generation CSV to score")
    ev.add_argument("--trajectories", required=True, help="trajectory CSV for straightness")
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--T", type=int, dest="t_steps", help="steps used (for the report)")
    ev.add_argument("--reference-n", type=int, default=10_000)
    ev.set_defaults(func=cmd_eval)

    oc = sub.add_parser("oracle-check", help="verify closed forms against oracles")
    oc.add_argument("--out", help="directory for the JSON report (default stdout only)")
    oc.add_argument("--mc", type=int, default=200_000, help="Monte-Carlo draws per probe")
    oc.add_argument("--seed", type=int, default=0)
    oc.add_argument("--corrupt-gamma", action="store_true", help=argparse.SUPPRESS)
    oc.set_defaults(func=cmd_oracle_check)

    plot = sub.add_parser("plot", help="render samples/trajectories to SVG")
    plot.add_argument("--out", required=True, help="output SVG path")
    plot.add_argument("--samples", action="append", default=[], help="CSV (repeatable)")
    plot.add_argument("--trajectories", help="trajectory CSV overlay panel")
    plot.add_argument("--config", help="config whose dataset is drawn as reference")
    plot.set_defaults(func=cmd_plot)

    fig2 = sub.add_parser(
        "reproduce-fig2",
        help="train both families on grid and halfmoon, sample, score, plot",
    )
    fig2.add_argument("--out", required=True, help="output directory")
    fig2.add_argument("--seed", type=int, default=0)
    fig2.add_argument("--steps", type=int, help="training steps override")
    fig2.add_argument("--n", type=int, default=4096, help="samples per evaluation")
    fig2.set_defaults(func=cmd_reproduce_fig2)

    return parser


# -- helpers -------------------------------------------------------------------


def _outdir(path_str: str) -> Path:
    path = Path(path_str)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_points(path):
    """Sniff the CSV flavor; returns (points, expert_ids-or-None)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    if header.startswith("sample_id,"):
        return moefm.load_generation_csv(path)
    return datasets.load_samples_csv(path), None


def _report_json(report: metrics.MetricsReport) -> str:
    return json.dumps(asdict(report), indent=2, sort_keys=True) + "\n"


# -- subcommands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = config_mod.load_config(args.config)
    cfg = config_mod.apply_overrides(
        cfg, out_dir=args.out, seed=args.seed, steps=args.steps, k=args.k, sigma=args.sigma
    )
    out = _outdir(cfg.out_dir)
    ckpt_path = out / "model.ckpt"
    try:
        if cfg.family == "vfm":
            result = flow.train_vfm(cfg.dataset, cfg.training)
            payload = result.field
        else:
            result = moefm.train_moefm(cfg.dataset, cfg.training)
            payload = result.model
    except DivergenceError as exc:
        if exc.last_finite is not None:
            checkpoint.save_checkpoint(
                str(ckpt_path) + ".diverged", exc.last_finite, seed=cfg.training.seed
            )
            print(f"diverged at step {exc.step}; last finite state kept at "
                  f"{ckpt_path}.diverged", file=sys.stderr)
        raise
    checkpoint.save_checkpoint(ckpt_path, payload, seed=cfg.training.seed)
    flow.save_loss_csv(out / "loss.csv", result.losses)
    print(f"wrote {ckpt_path} and {out / 'loss.csv'}")
    return 0


def cmd_sample(args) -> int:
    cp = checkpoint.load_checkpoint(args.checkpoint)
    out = _outdir(args.out)
    samples_path = out / "samples.csv"
    if args.n == 0:
        dim = cp.payload.dim if cp.kind == "moefm" else cp.payload.output_dim
        moefm.save_generation_csv(samples_path, np.zeros((0, dim)), np.zeros(0, dtype=int))
        print(f"wrote {samples_path} (empty)")
        return 0
    if cp.kind == "moefm":
        result = moefm.generate(
            cp.model, args.n, args.t_steps, args.mode, args.seed,
            return_trajectories=args.trajectories,
        )
        samples, expert_ids = result[0], result[1]
        trajectories = result[2] if args.trajectories else None
    else:
        net = cp.net
        # same per-sample noise streams as mixture generation, so a vfm run
        # and a K=1 mixture run with equal seeds start from identical z0
        z0 = np.stack(
            [np.random.default_rng([args.seed, i]).standard_normal(net.output_dim)
             for i in range(args.n)]
        )
        states = flow.euler_states(lambda z, t: nnet.forward(net, z, t), z0, args.t_steps)
        samples = datasets.SampleSet(states[-1])
        expert_ids = np.zeros(args.n, dtype=int)
        trajectories = None
        if args.trajectories:
            times = np.arange(args.t_steps + 1) / args.t_steps
            trajectories = [
                flow.Trajectory(times, states[:, i, :]) for i in range(args.n)
            ]
    moefm.save_generation_csv(samples_path, samples, expert_ids)
    written = [str(samples_path)]
    if args.trajectories:
        traj_path = out / "trajectories.csv"
        flow.save_trajectories_csv(traj_path, trajectories)
        written.append(str(traj_path))
    print("wrote " + " and ".join(written))
    return 0


def cmd_eval(args) -> int:
    cfg = config_mod.load_config(args.config)
    points, _ = _load_points(args.samples)
    trajectories = flow.load_trajectories_csv(args.trajectories)
    reference = datasets.sample(cfg.dataset, args.reference_n, seed=HELDOUT_SEED)
    mmd2 = metrics.mmd2_unbiased(points, reference)
    s_mean, s_max = metrics.straightness_stats(trajectories)
    coverage = (
        None if cfg.dataset.kind == "halfmoon"
        else metrics.mode_coverage(points, cfg.dataset)
    )
    t_steps = args.t_steps if args.t_steps is not None else cfg.sampling.t_steps
    report = metrics.MetricsReport(
        mmd2=mmd2, straightness_mean=s_mean, straightness_max=s_max,
        mode_coverage=coverage, n_samples=len(points), steps=t_steps,
    )
    out = _outdir(args.out)
    (out / "metrics.json").write_text(_report_json(report), encoding="utf-8")
    run_id = f"{datasets.spec_fingerprint(cfg.dataset, HELDOUT_SEED)}-{cfg.family}-T{t_steps}"
    k = getattr(cfg.training, "k", 1)
    sigma = getattr(cfg.training, "sigma", "")
    ledger = out / "runs.csv"
    if not ledger.exists():
        ledger.write_text(
            "run_id,model,K,sigma,T,mmd2,straightness_mean,coverage\n", encoding="utf-8"
        )
    cov_txt = "" if coverage is None else f"{coverage:.6f}"
    with open(ledger, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(
            f"{run_id},{cfg.family},{k},{sigma},{t_steps},"
            f"{mmd2:.9f},{s_mean:.9f},{cov_txt}\n"
        )
    print(_report_json(report), end="")
    return 0


def _oracle_checks(mc: int, seed: int, corrupt_gamma: bool) -> list:
    """The default 1-D verification suite; returns one record per check."""
    spec = datasets.explicit_spec([(0.5, -1.0, 0.0), (0.5, 1.0, 0.0)], dim=1)
    checks = []

    def add(name, estimate, target, tolerance, stderr=None, extra=None):
        gap = abs(estimate - target)
        checks.append({
            "name": name,
            "estimate": estimate,
            "target": target,
            "gap": gap,
            "tolerance": tolerance,
            "stderr": stderr,
            "passed": bool(gap <= tolerance),
            **(extra or {}),
        })

    # conditional-density estimator against the exact two-atom posterior
    for z_t, t in ((1.0, 0.2), (0.5, 0.5), (0.0, 0.5)):
        probe = oracle.ProbePoint((z_t,), t, mc_samples=mc, seed=seed)
        est = oracle.vfm_optimum(spec, probe, method="conditional")
        var = (1.0 - t) ** 2
        logp = np.log(0.5) - (z_t - t * np.array([-1.0, 1.0])) ** 2 / (2 * var)
        post = np.exp(logp - logp.max())
        post /= post.sum()
        exact = float(post @ ((np.array([-1.0, 1.0]) - z_t) / (1.0 - t)))
        add(
            f"cond-mean-exact(z_t={z_t},t={t})",
            float(est.value[0]), exact,
            tolerance=3.0 * float(est.stderr[0]) + 1e-9,
            stderr=float(est.stderr[0]),
        )
    # kernel estimator against deterministic quadrature of the same smoothing
    for z_t, t in ((1.0, 0.2), (0.5, 0.5)):
        probe = oracle.ProbePoint((z_t,), t, mc_samples=mc, seed=seed)
        est = oracle.vfm_optimum(spec, probe, method="kernel")
        quad = oracle.quadrature_vfm_optimum(spec, z_t, t)
        add(
            f"cond-mean-kernel-vs-quadrature(z_t={z_t},t={t})",
            float(est.value[0]), quad,
            tolerance=3.0 * float(est.stderr[0]),
            stderr=float(est.stderr[0]),
        )
    # mixture optima for a frozen 2-expert model against quadrature
    def const_net(values):
        values = np.asarray(values, dtype=np.float64)
        sizes = (1 + nnet.TIME_EMBED_WIDTH, len(values))
        return nnet.MlpNet(sizes, [np.zeros(sizes)], [values.copy()])

    z_t, t = 0.5, 0.5
    model = moefm.MoeFlowModel(
        [const_net([(1.0 - z_t) / (1.0 - t)]), const_net([(-1.0 - z_t) / (1.0 - t)])],
        const_net([0.0, 0.0]),
        0.05,
    )
    probe = oracle.ProbePoint((z_t,), t, mc_samples=max(mc, 400_000), seed=seed)
    optima = oracle.moefm_optima(spec, probe, model)
    pi_hat, u_hat = optima.pi.copy(), optima.u.copy()
    if corrupt_gamma:
        # negative-test hook: misnormalize the responsibilities
        pi_hat = pi_hat + 0.2
    q_pi, q_u = oracle.quadrature_moefm_optima(spec, z_t, t, model)
    for j in range(model.num_experts):
        add(
            f"mixture-optima-pi[{j}]", float(pi_hat[j]), float(q_pi[j]),
            tolerance=0.02 * float(q_pi[j]),
            stderr=float(optima.pi_stderr[j]),
        )
        add(
            f"mixture-optima-u[{j}]", float(u_hat[j, 0]), float(q_u[j]),
            tolerance=0.02 * abs(float(q_u[j])),
            stderr=float(optima.u_stderr[j, 0]),
        )
    # sigma sweep: gamma flattens onto pi and expert gradients die off
    grid = datasets.grid_spec(3, extent=2.0, std=0.1)
    sweep_model = moefm.init_moe_model(dim=2, k=3, sigma=0.1, hidden_width=32,
                                       hidden_layers=2, seed=seed)
    batch = flow.make_batch(grid, 256, np.random.default_rng(seed))
    report = oracle.sigma_inf_limit_check(sweep_model, batch)
    rows = [
        {"sigma": r.sigma, "gamma_pi_deviation": r.gamma_pi_deviation,
         "expert_grad_norm": r.expert_grad_norm}
        for r in report.rows
    ]
    add(
        "sigma-inf-expert-grad-norm", report.rows[-1].expert_grad_norm, 0.0,
        tolerance=1e-6, extra={"sweep": rows, "monotone": report.passed},
    )
    checks[-1]["passed"] = bool(checks[-1]["passed"] and report.passed)
    # sigma -> 0: responsibilities match the renormalized hard assignment
    hard_model = moefm.MoeFlowModel(
        [const_net([1.0]), const_net([-1.0])], const_net([np.log(3.0), 0.0]), 1e-2
    )
    hard = oracle.sigma_zero_limit(hard_model, [0.2], 0.4, [0.0])
    gamma = moefm.responsibilities(
        hard_model, np.array([[0.2]]), np.array([0.4]), np.array([[0.0]])
    )
    add(
        "sigma-zero-tie-split", float(np.abs(gamma[0] - hard.full).max()), 0.0,
        tolerance=1e-6, extra={"members": list(hard.members)},
    )
    return checks


def cmd_oracle_check(args) -> int:
    checks = _oracle_checks(args.mc, args.seed, args.corrupt_gamma)
    ok = all(c["passed"] for c in checks)
    doc = {"passed": ok, "checks": checks}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = _outdir(args.out)
        (out / "oracle_report.json").write_text(text, encoding="utf-8")
    print(text, end="")
    if not ok:
        failed = ", ".join(c["name"] for c in checks if not c["passed"])
        raise NumericalError(f"oracle checks failed: {failed}")
    return 0


def cmd_plot(args) -> int:
    if not args.samples and not args.trajectories:
        raise ValidationError("plot needs at least one --samples or --trajectories")
    canvas = svgplot.Canvas()
    reference = None
    if args.config:
        cfg = config_mod.load_config(args.config)
        reference = datasets.sample(cfg.dataset, 2000, seed=HELDOUT_SEED).points
    panels = []
    expert_ids = None
    for path in args.samples:
        points, ids = _load_points(path)
        if expert_ids is None and ids is not None:
            expert_ids = ids
        panels.append(
            svgplot.scatter_panel(points, canvas, title=Path(path).stem,
                                  reference=reference)
        )
    if args.trajectories:
        trajs = flow.load_trajectories_csv(args.trajectories)
        if expert_ids is not None and len(expert_ids) == len(trajs):
            # the trajectory CSV has no id column; recover coloring from the
            # generation CSV, whose rows align with trajectory order
            trajs = [
                flow.Trajectory(tr.times, tr.states, int(expert_ids[i]))
                for i, tr in enumerate(trajs)
            ]
        panels.append(svgplot.trajectory_panel(trajs, canvas, title="trajectories"))
    svg = svgplot.render_figure(panels, canvas)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    svgplot.save_svg(out, svg)
    print(f"wrote {out}")
    return 0


def cmd_reproduce_fig2(args) -> int:
    """Train both families on both datasets, then sample/score/plot."""
    out = _outdir(args.out)
    t_grid = (1, 2, 4, 8)
    summary = []
    for ds_name in ("grid", "halfmoon"):
        spec = datasets.grid_spec() if ds_name == "grid" else datasets.halfmoon_spec()
        reference = datasets.sample(spec, 10_000, seed=HELDOUT_SEED)
        scorer = metrics.MmdScorer(reference)
        panels = [svgplot.scatter_panel(reference.points[:2000], svgplot.Canvas(),
                                        title=f"{ds_name} data")]
        # One recipe for both families: 8k steps with a linear lr anneal, and
        # antithetic pairing wherever the target admits it. Width 64x2 keeps
        # the mixture's 9-network training step affordable on a laptop CPU.
        shared = dict(
            seed=args.seed, steps=8000, hidden_width=64, hidden_layers=2,
            lr_final=1e-5, antithetic=datasets.is_sign_symmetric(spec),
        )
        for family in ("vfm", "moefm"):
            run_dir = _outdir(out / f"{ds_name}-{family}")
            if family == "vfm":
                t_cfg = flow.TrainConfig(**shared)
            else:
                # fewer modes in the half-moon target, so fewer experts
                k = 8 if ds_name == "grid" else 4
                t_cfg = moefm.MoeTrainConfig(k=k, **shared)
            if args.steps is not None:
                t_cfg = replace(t_cfg, steps=args.steps)
            if family == "vfm":
                trained = flow.train_vfm(spec, t_cfg)
                payload = trained.field
            else:
                trained = moefm.train_moefm(spec, t_cfg)
                payload = trained.model
            checkpoint.save_checkpoint(run_dir / "model.ckpt", payload, seed=args.seed)
            flow.save_loss_csv(run_dir / "loss.csv", trained.losses)
            for t_steps in t_grid:
                if family == "vfm":
                    z0 = np.stack(
                        [np.random.default_rng([args.seed, i]).standard_normal(2)
                         for i in range(args.n)]
                    )
                    states = flow.euler_states(
                        lambda z, t: nnet.forward(payload, z, t), z0, t_steps
                    )
                    samples = datasets.SampleSet(states[-1])
                    ids = np.zeros(args.n, dtype=int)
                    times = np.arange(t_steps + 1) / t_steps
                    trajs = [flow.Trajectory(times, states[:, i, :])
                             for i in range(min(args.n, 512))]
                else:
                    samples, ids, trajs = moefm.generate(
                        payload, args.n, t_steps, "sampled", args.seed,
                        return_trajectories=True,
                    )
                    trajs = trajs[:512]
                moefm.save_generation_csv(run_dir / f"samples_T{t_steps}.csv", samples, ids)
                flow.save_trajectories_csv(run_dir / f"trajectories_T{t_steps}.csv", trajs)
                mmd2 = scorer.score(samples)
                s_mean, s_max = metrics.straightness_stats(trajs)
                coverage = (
                    None if spec.kind == "halfmoon"
                    else metrics.mode_coverage(samples, spec)
                )
                report = metrics.MetricsReport(
                    mmd2=mmd2, straightness_mean=s_mean, straightness_max=s_max,
                    mode_coverage=coverage, n_samples=len(samples), steps=t_steps,
                )
                (run_dir / f"metrics_T{t_steps}.json").write_text(
                    _report_json(report), encoding="utf-8"
                )
                summary.append({
                    "dataset": ds_name, "family": family, "T": t_steps,
                    "mmd2": mmd2, "straightness_mean": s_mean, "coverage": coverage,
                })
                if t_steps == 4:
                    panels.append(svgplot.scatter_panel(
                        samples.points[:2000], svgplot.Canvas(),
                        title=f"{family} T=4",
                    ))
                    panels.append(svgplot.trajectory_panel(
                        trajs[:64], svgplot.Canvas(), title=f"{family} paths",
                    ))
        svgplot.save_svg(
            out / f"fig2_{ds_name}.svg",
            svgplot.render_figure(panels, svgplot.Canvas(), columns=5),
        )
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote {out / 'summary.json'} and figure SVGs")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        field = getattr(exc, "field", None)
        suffix = f" (key: {field})" if field else ""
        print(f"moeflow: error: {exc}{suffix}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"moeflow: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"moeflow: numerical failure: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
