"""Command-line entry point: ``salrank {eval,gradcheck,demo,train_toy}``.

Exit codes: 0 success / criteria met, 1 criteria unmet, 2 input error,
3 numeric failure.

Every command also accepts ``--config FILE`` with flat ``key=value`` lines for
any :class:`RunConfig` field; flags given on the command line win over the file.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .config import parse_key_values

EXIT_OK, EXIT_UNMET, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("salrank")


@dataclass(frozen=True)
class RunConfig:
    """All settings a command may read. Unknown keys in a config file are rejected."""

    seed: int = 0
    # eval
    pred: str = ""
    gt: str = ""
    out: str = ""
    iou_thresh: float = 0.5
    r_den: int = 5
    # gradcheck
    tol: float = 1e-3
    grad_seeds: int = 20
    # toy pipeline and training
    scenes: int = 64
    steps: int = 2000
    channels: int = 16
    queries: int = 8
    stages: int = 2
    heads: int = 8
    r_max: int = 5
    lr: float = 2e-3
    use_sos: bool = True
    use_ocor: bool = True
    softmax_axis: str = "heads"
    value_source: str = "self"
    aggregate_scale: str = "none"

    def pipeline_config(self):
        from .ocor import OcorConfig
        from .rankpipe.model import PipelineConfig

        return PipelineConfig(
            channels=self.channels,
            num_queries=self.queries,
            stages=self.stages,
            heads=self.heads,
            r_max=self.r_max,
            use_sos=self.use_sos,
            use_ocor=self.use_ocor,
            ocor=OcorConfig(self.softmax_axis, self.value_source, self.aggregate_scale),
        )


class InputError(Exception):
    """Bad flags, config files or input files (exit code 2)."""


def _emit(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def _fmt(value: Optional[float]) -> str:
    return "null" if value is None else f"{value:.9f}"


def _out_dir(path: str) -> Path:
    if not path:
        raise InputError("--out is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"{out}: not writable ({exc.strerror})") from None
    return out


def _write(path: Path, data) -> None:
    try:
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: cannot write ({exc.strerror})") from None


# ---------------------------------------------------------------------------
# commands


def cmd_eval(cfg: RunConfig) -> int:
    from .metrics import InstanceFileError, evaluate

    for flag in ("pred", "gt", "out"):
        if not getattr(cfg, flag):
            raise InputError(f"--{flag} is required")
    try:
        report = evaluate(cfg.pred, cfg.gt, cfg.iou_thresh, cfg.r_den)
    except InstanceFileError as exc:
        raise InputError(str(exc)) from None
    _write(Path(cfg.out), report.dumps())
    _emit(f"SOR {_fmt(report.sor)}\nSA-SOR {_fmt(report.sa_sor)}\nMAE {_fmt(report.mae)}\n")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradsuite import format_table, run_suite

    rows = run_suite(seed=cfg.seed, n_seeds=cfg.grad_seeds, tol=cfg.tol)
    _emit(format_table(rows))
    failed = [r.name for r in rows if not r.passed]
    _emit(f"{len(rows) - len(failed)}/{len(rows)} passed\n")
    return EXIT_OK if not failed else EXIT_UNMET


def cmd_demo(cfg: RunConfig) -> int:
    from .metrics import ImageInstances, dump_instance_file, render_saliency
    from .rankpipe.model import PipelineParams, run_pipeline
    from .rankpipe.scenes import SceneConfig, generate_scene, write_pgm

    out = _out_dir(cfg.out)
    pcfg = cfg.pipeline_config()
    scene_cfg = SceneConfig(seed=cfg.seed, image_size=pcfg.image_size)
    scene = generate_scene(scene_cfg, 0)
    params = PipelineParams.init(pcfg, seed=cfg.seed)
    instances = run_pipeline(scene.image, params, pcfg)[0]
    h, w = scene.image.shape[:2]
    pred = ImageInstances(scene.image_id, h, w, instances)
    _write(out / "scene.txt", scene_cfg.to_text())
    _write(out / "predictions.json", dump_instance_file([pred]))
    _write(out / "ground_truth.json", dump_instance_file([scene.instances()]))
    try:
        write_pgm(out / "rank_map.pgm", render_saliency(instances, h, w, pcfg.r_max))
    except OSError as exc:
        raise InputError(f"{out / 'rank_map.pgm'}: cannot write ({exc.strerror})") from None
    _emit(f"image {scene.image_id}: {len(instances)} instance(s) -> {out}\n")
    return EXIT_OK


def cmd_train_toy(cfg: RunConfig) -> int:
    from .metrics import dump_instance_file
    from .params import save_params
    from .rankpipe.scenes import SceneConfig
    from .rankpipe.train import TrainConfig, train_toy

    out = _out_dir(cfg.out)
    pcfg = cfg.pipeline_config()
    tcfg = TrainConfig(steps=cfg.steps, scenes=cfg.scenes, lr=cfg.lr, seed=cfg.seed)
    scene_cfg = SceneConfig(seed=cfg.seed, image_size=pcfg.image_size)
    _write(out / "scenes.txt", scene_cfg.to_text())

    def progress(step: int, value: float) -> None:
        if step % 100 == 0 or step == tcfg.steps - 1:
            log.info("step %d loss %.6f", step, value)

    try:
        result = train_toy(pcfg, tcfg, scene_cfg, on_step=progress)
    except FloatingPointError as exc:
        _emit(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC
    _write(out / "loss.csv", "step,loss\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(result.losses)))
    save_params(result.params, out / "params.npz")
    _write(out / "report.json", result.report.dumps())
    _write(out / "predictions.json", dump_instance_file(result.predictions))
    log.info("trained in %.1fs", result.seconds)
    _emit(
        f"held-out SOR {_fmt(result.held_out_sor)}\n"
        f"loss reduction {_fmt(result.loss_reduction)}\n"
        f"criteria {'met' if result.passed else 'unmet'}\n"
    )
    return EXIT_OK if result.passed else EXIT_UNMET


COMMANDS = {
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "demo": cmd_demo,
    "train_toy": cmd_train_toy,
}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salrank", description="Saliency-ranking toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS  # unset flags stay absent so config-file values survive

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=S)
        p.add_argument("--config", help="flat key=value file; explicit flags override it")
        return p

    p = add("eval", "score predictions against ground truth")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--iou-thresh", dest="iou_thresh", type=float)
    p.add_argument("--r-den", dest="r_den", type=int)
    p.add_argument("--out")

    p = add("gradcheck", "finite-difference check of every primitive and module")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)

    p = add("demo", "run the untrained pipeline on one synthetic scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("train_toy", "train on planted-rank scenes and evaluate on held-out ones")
    p.add_argument("--scenes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"{config_path}: cannot read ({exc.strerror})") from None
        try:
            values.update(parse_key_values(text, RunConfig))
        except ValueError as exc:
            raise InputError(f"{config_path}: {exc}") from None
    names = {f.name for f in dataclasses.fields(RunConfig)}
    values.update({k: v for k, v in vars(args).items() if k in names})
    cfg = RunConfig(**values)
    try:
        cfg.pipeline_config()
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except InputError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except FloatingPointError as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
