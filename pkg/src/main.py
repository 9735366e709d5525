"""
CLI лаборатории: train, inject, eval, bound-check, ablate.
"""
import argparse
import sys
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv

from src.config import LabSettings, RunConfig, load_config, resolve_output_dir, serialize_config
from src.envs import PixelGrid
from src.errors import (
    CheckpointError,
    ConfigError,
    DimensionMismatchError,
    InjectionError,
    InvariantViolationError,
    LabError,
    MetricError,
    NonFiniteLossError,
    UnsupportedArchitectureError,
)
from src.evaluation import EvalReport, evaluate
from src.infrectrorl import InjectionReport, inject
from src.nn_core import PolicyNetwork
from src.rl_train import train
from src.settings import (
    AUDIT_FIELDS,
    CURVE_FIELDS,
    EPISODE_FIELDS,
    EXIT_ARTIFACT_ERROR,
    EXIT_CONFIG_ERROR,
    EXIT_INVARIANT_VIOLATION,
    EXIT_OK,
    SWEEP_FIELDS,
)
from src.theory import BoundReport, verify_theorem
from src.tools import (
    create_run_log,
    load_checkpoint,
    log_result,
    save_checkpoint,
    write_csv,
    write_json,
    write_manifest,
)
from src.triggers import TriggerSpec, trigger_from_dict, trigger_to_dict
from src.trojanentrl import MaliciousRolloutBuffer, PoisonConfig

EXIT_CODES: dict[type[LabError], int] = {
    ConfigError: EXIT_CONFIG_ERROR,
    CheckpointError: EXIT_ARTIFACT_ERROR,
    UnsupportedArchitectureError: EXIT_ARTIFACT_ERROR,
    DimensionMismatchError: EXIT_ARTIFACT_ERROR,
    InjectionError: EXIT_ARTIFACT_ERROR,
    MetricError: EXIT_ARTIFACT_ERROR,
    NonFiniteLossError: EXIT_ARTIFACT_ERROR,
    InvariantViolationError: EXIT_INVARIANT_VIOLATION,
}


def _banner(title: str, lines: dict[str, Any]) -> None:
    print(f"\n{'='*60}")
    print(f" {title}")
    print(f"{'='*60}")
    for key, value in lines.items():
        print(f"{key}: {value}")
    print(f"{'='*60}\n")


def _log(log_path: Path | None, command: str, artifact: Path | str, status: str = "OK", note: str = "") -> None:
    if log_path is not None:
        log_result({"command": command, "artifact": str(artifact), "status": status, "note": note}, log_path)


def make_env(config: RunConfig) -> PixelGrid:
    return PixelGrid(grid=config.env.grid, horizon=config.env.horizon, goal=config.env.goal)


def _check_env_fit(net: PolicyNetwork, env: PixelGrid) -> None:
    if net.input_dim != env.obs_dim:
        raise CheckpointError(f"вход сети {net.input_dim} не совпадает с наблюдением {env.env_id} ({env.obs_dim})")
    if net.output_dim != env.n_actions:
        raise CheckpointError(f"выход сети {net.output_dim} не совпадает с числом действий {env.n_actions}")


def resolve_trigger(net: PolicyNetwork, config: RunConfig) -> TriggerSpec:
    '''Триггер из метаданных контрольной точки, иначе из конфигурации атаки.'''
    document = net.metadata.get("trigger")
    if document:
        return trigger_from_dict(document)
    if config.attack.kind == "trojanentrl":
        return config.attack.trojanentrl.trigger.build(config.env.grid)
    return config.attack.infrectro.trigger.build(config.env.grid)


def resolve_target_action(net: PolicyNetwork, config: RunConfig) -> int:
    if "target_action" in net.metadata:
        return int(net.metadata["target_action"])
    if config.attack.kind == "trojanentrl":
        return config.attack.trojanentrl.target_action
    return config.attack.infrectro.target_action


def cli_train(config: RunConfig, output_dir: Path, log_path: Path | None = None) -> Path:
    '''Обучение с штатным или вредоносным буфером; пишет контрольную точку и кривую.'''
    kind = config.attack.kind
    _banner(
        "ОБУЧЕНИЕ A2C",
        {
            "Среда": f"pixelgrid {config.env.grid}×{config.env.grid}",
            "Шагов": config.train.total_steps,
            "Буфер": "TrojanentRL" if kind == "trojanentrl" else "штатный",
            "Seed": config.seed,
            "Выход": output_dir,
        },
    )

    buffers: list[MaliciousRolloutBuffer] = []
    buffer_factory = None
    poison_cfg = None
    if kind == "trojanentrl":
        section = config.attack.trojanentrl
        poison_cfg = PoisonConfig.from_section(section, config.env.grid)

        def buffer_factory() -> MaliciousRolloutBuffer:
            buffer = MaliciousRolloutBuffer(poison_cfg, audit=section.audit, live=section.poison_live_obs)
            buffers.append(buffer)
            return buffer
    elif kind == "infrectrorl":
        print("attack.kind=infrectrorl применяется командой inject; обучение идёт со штатным буфером", file=sys.stderr)

    result = train(config, buffer_factory)

    env_id = make_env(config).env_id
    result.policy.metadata.update(
        {"seed": config.seed, "env_id": env_id, "train_steps": result.steps, "injected": False, "attack": kind}
    )
    if poison_cfg is not None:
        result.policy.metadata.update(
            {
                "trigger": trigger_to_dict(poison_cfg.trigger),
                "target_action": poison_cfg.target_action,
                "poisoned_transitions": sum(b.poisoned_count for b in buffers),
            }
        )
    if result.diverged:
        result.policy.metadata["diverged"] = True

    output_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = save_checkpoint(result.policy, output_dir / "checkpoint.json")
    curve = write_csv(output_dir / "training_curve.csv", CURVE_FIELDS, result.curve)
    (output_dir / "config.txt").write_text(serialize_config(config), encoding="utf-8")
    for artifact in (checkpoint, curve):
        _log(log_path, "train", artifact)
    if buffers and config.attack.trojanentrl.audit:
        audit_rows = [row for b in buffers for row in b.audit_rows]
        _log(log_path, "train", write_csv(output_dir / "poison_audit.csv", AUDIT_FIELDS, audit_rows))

    if result.diverged:
        _log(log_path, "train", checkpoint, "DIVERGED", str(result.diagnostics))
        raise NonFiniteLossError("обучение разошлось, сохранена частичная контрольная точка", result.diagnostics)

    print(f"Шагов выполнено: {result.steps}")
    print(f"Эпизодов: {len(result.episode_returns)}")
    print(f"Средняя доходность (последние 100): {result.final_mean_return:.4f}")
    if poison_cfg is not None:
        print(f"Отравлено переходов: {result.policy.metadata['poisoned_transitions']}")
    print(f"Контрольная точка: {checkpoint}")
    return checkpoint


def _inject_once(net: PolicyNetwork, config: RunConfig, seed: int) -> tuple[PolicyNetwork, InjectionReport]:
    env = make_env(config)
    _check_env_fit(net, env)
    section = config.attack.infrectro
    path_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
    clean_states = env.sample_observations(section.samples, np.random.default_rng(sample_seq))
    return inject(net, section, np.random.default_rng(path_seq), section.trigger.build(config.env.grid), clean_states)


def cli_inject(
    checkpoint_in: Path,
    config: RunConfig,
    output_dir: Path,
    log_path: Path | None = None,
) -> tuple[Path, InjectionReport]:
    net = load_checkpoint(checkpoint_in)
    section = config.attack.infrectro
    _banner(
        "ВНЕДРЕНИЕ INFRECTRORL",
        {
            "Вход": checkpoint_in,
            "λ": section.lambda_,
            "γ_amp": section.gamma_amp,
            "Целевое действие": section.target_action,
            "Выход": output_dir,
        },
    )
    if net.metadata.get("injected"):
        print("Предупреждение: контрольная точка уже содержит бэкдор, строится новый путь", file=sys.stderr)

    backdoored, report = _inject_once(net, config, config.seed)
    backdoored.metadata["target_action"] = section.target_action

    checkpoint = save_checkpoint(backdoored, output_dir / "checkpoint_backdoored.json")
    report_path = write_json(output_dir / "injection_report.json", report)
    for artifact in (checkpoint, report_path):
        _log(log_path, "inject", artifact)

    print(f"Путь: {report.path}")
    print(f"Изменено параметров: {report.weights_modified}")
    print(f"Согласие с обрезанной сетью: {report.clean_agreement:.4f}")
    print(f"P(целевое | триггер): {report.triggered_target_prob:.6f}")
    print(f"Нарушений эквивалентности: {report.equivalence_violations}")

    if report.equivalence_violations:
        raise InvariantViolationError(
            f"выход бэкдор-сети отличается от обрезанной на {report.equivalence_violations} чистых состояниях"
        )
    return checkpoint, report


def _print_table_row(report: EvalReport) -> None:
    asr = f"{report.asr_pct:.2f}%" if report.asr_pct is not None else "н/д"
    print(f"{'CDA':>10} | {'AER':>10} | {'ASR':>10} | {'mean':>8} | {'median':>8} | {'min':>8} | {'max':>8}")
    print(
        f"{report.cda_pct:>9.2f}% | {report.aer_pct:>9.2f}% | {asr:>10} | {report.mean_return:>8.3f} | "
        f"{report.median_return:>8.3f} | {report.min_return:>8.3f} | {report.max_return:>8.3f}"
    )


def cli_eval(
    checkpoint: Path,
    config: RunConfig,
    output_dir: Path,
    log_path: Path | None = None,
) -> EvalReport:
    net = load_checkpoint(checkpoint)
    baseline_path = config.eval.baseline_checkpoint
    baseline = load_checkpoint(baseline_path) if baseline_path else net
    if not baseline_path and net.metadata.get("injected"):
        print(
            "Предупреждение: eval.baseline_checkpoint не задан, политика с бэкдором сравнивается сама с собой, "
            "CDA не информативна",
            file=sys.stderr,
        )
    env = make_env(config)
    _check_env_fit(net, env)
    _check_env_fit(baseline, env)

    _banner(
        "ОЦЕНКА",
        {
            "Политика": checkpoint,
            "Эталон": baseline_path or "та же политика",
            "Эпизодов": config.eval.episodes,
            "Расписание": config.eval.schedule,
            "Выход": output_dir,
        },
    )
    schedule_needs_trigger = config.eval.schedule != "never"
    trigger = resolve_trigger(net, config) if schedule_needs_trigger else None
    report = evaluate(net, baseline, env, trigger, config.eval, resolve_target_action(net, config), config.seed)

    report_path = write_json(output_dir / "eval_report.json", report)
    episodes_path = write_csv(output_dir / "eval_episodes.csv", EPISODE_FIELDS, report.rows)
    for artifact in (report_path, episodes_path):
        _log(log_path, "eval", artifact)

    _print_table_row(report)
    return report


def cli_bound_check(config: RunConfig, output_dir: Path, log_path: Path | None = None) -> BoundReport:
    theory = config.theory
    _banner(
        "ПРОВЕРКА ГРАНИЦЫ",
        {"Экземпляров": theory.instances, "Прогонов": theory.rollouts, "γ": config.env.chain.gamma, "Seed": config.seed},
    )
    report = verify_theorem(theory.instances, config.seed, theory, config.env.chain)
    report_path = write_json(output_dir / "bound_report.json", report)
    _log(log_path, "bound-check", report_path)

    for row in report.rows:
        mark = "OK" if row.holds else "НАРУШЕНО"
        print(f"[{row.index}] B_j={row.b_j:.4f} δ̂={row.tv_delta:.4f} |ΔJ|={row.delta_j:.5f} граница={row.bound:.4f} {mark}")
    print(f"\nГраница выполнена: {report.holds_count}/{report.instances}")
    print(f"С δ̂×2: {report.holds_inflated_count}/{report.instances}")
    print(f"Эквивалентность бэкдор/обрезанная: {report.lemma_holds_count}/{report.instances}")
    print(f"Нарушений KL: {report.kl_violations}")

    if not report.all_hold:
        raise InvariantViolationError("теоретическая проверка не прошла")
    return report


def _ablated_config(config: RunConfig, axis: str, value: float) -> RunConfig:
    section = config.attack.infrectro
    if axis == "lambda":
        section = section.model_copy(update={"lambda_": float(value)})
    elif axis == "gamma_amp":
        section = section.model_copy(update={"gamma_amp": float(value)})
    elif axis == "target_action":
        section = section.model_copy(update={"target_action": int(value)})
    elif axis == "trigger_side":
        if not 1 <= int(value) <= config.env.grid:
            raise ConfigError(f"размер триггера {value} вне [1, {config.env.grid}]")
        section = section.model_copy(update={"trigger": section.trigger.model_copy(update={"side": int(value)})})
    else:
        raise ConfigError(f"неизвестная ось абляции: {axis}")
    attack = config.attack.model_copy(update={"infrectro": section})
    return config.model_copy(update={"attack": attack})


def cli_ablate(
    checkpoint: Path,
    config: RunConfig,
    output_dir: Path,
    log_path: Path | None = None,
) -> list[dict[str, Any]]:
    '''Одна ось абляции InfrectroRL, по одной оценке на точку.'''
    net = load_checkpoint(checkpoint)
    axis = config.ablate.axis
    _banner("АБЛЯЦИЯ", {"Вход": checkpoint, "Ось": axis, "Значения": config.ablate.values, "Выход": output_dir})
    if net.metadata.get("injected"):
        print("Предупреждение: абляция выполняется поверх уже внедрённого бэкдора", file=sys.stderr)

    env = make_env(config)
    rows = []
    for value in config.ablate.values:
        point = _ablated_config(config, axis, value)
        backdoored, _ = _inject_once(net, point, config.seed)
        eval_section = config.eval.model_copy(update={"episodes": config.ablate.episodes, "schedule": "always"})
        report = evaluate(
            backdoored,
            net,
            env,
            trigger_from_dict(backdoored.metadata["trigger"]),
            eval_section,
            point.attack.infrectro.target_action,
            config.seed,
        )
        rows.append(
            {
                "value": value,
                "mean_return": report.mean_return,
                "asr": report.asr_pct,
                "clean_mean_return": report.clean_mean_return,
            }
        )
        print(f"{axis}={value}: доходность={report.mean_return:.3f} ASR={report.asr_pct:.2f}%")

    sweep = write_csv(output_dir / f"ablation_{axis}.csv", SWEEP_FIELDS, rows)
    _log(log_path, "ablate", sweep)
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Лаборатория бэкдоров в DRL: TrojanentRL, InfrectroRL, метрики и проверка границ",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Файл конфигурации (ключ = значение или JSON)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Переопределение ключа")

    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("train", parents=[common], help="Обучить политику A2C")
    inject_parser = subparsers.add_parser("inject", parents=[common], help="Внедрить бэкдор InfrectroRL")
    inject_parser.add_argument("--checkpoint", type=str, required=True, help="Исходная контрольная точка")
    eval_parser = subparsers.add_parser("eval", parents=[common], help="Оценить CDA/AER/ASR")
    eval_parser.add_argument("--checkpoint", type=str, required=True, help="Оцениваемая контрольная точка")
    subparsers.add_parser("bound-check", parents=[common], help="Численно проверить границу")
    ablate_parser = subparsers.add_parser("ablate", parents=[common], help="Абляция параметров InfrectroRL")
    ablate_parser.add_argument("--checkpoint", type=str, required=True, help="Чистая контрольная точка")
    return parser


def _exit_code(error: LabError) -> int:
    for error_type, code in EXIT_CODES.items():
        if isinstance(error, error_type):
            return code
    return EXIT_ARTIFACT_ERROR


def main(argv: list[str] | None = None) -> int:
    '''CLI точка входа.'''
    load_dotenv()
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config, args.set)
        if args.command != "bound-check" and config.env.kind != "pixelgrid":
            raise ConfigError(f"команда {args.command} работает только со средой pixelgrid")
    except ConfigError as e:
        print(f"Ошибка конфигурации: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    settings = LabSettings()
    output_dir = resolve_output_dir(config, settings)
    log_path = create_run_log(settings.logs_dir, args.command)

    try:
        if args.command == "train":
            cli_train(config, output_dir, log_path)
        elif args.command == "inject":
            cli_inject(Path(args.checkpoint), config, output_dir, log_path)
        elif args.command == "eval":
            cli_eval(Path(args.checkpoint), config, output_dir, log_path)
        elif args.command == "bound-check":
            cli_bound_check(config, output_dir, log_path)
        else:
            cli_ablate(Path(args.checkpoint), config, output_dir, log_path)
        code = EXIT_OK
    except LabError as e:
        code = _exit_code(e)
        print(f"Ошибка: {e}", file=sys.stderr)
        _log(log_path, args.command, output_dir, "ERROR", str(e))

    if output_dir.is_dir():
        manifest = write_manifest(output_dir)
        _log(log_path, args.command, manifest)
    print(f"Лог: {log_path}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
