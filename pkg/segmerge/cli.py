"""
segmerge 命令行入口
子命令: bench / sweep / cost / gen-weights

退出码: 0 成功, 1 配置或形状等运行错误, 2 参数错误
"""

import argparse
import os
import sys
from typing import List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from .core.config import PRESETS, BenchConfig, ModelConfig, load_model_config
from .core.exceptions import ConfigError, SegMergeError
from .core.log import log, setup_logging
from .core.utils import SegMergeUtils
from .modules.bench import BENCH_VARIANTS, PhaseTimer, bench, cost, gen_weights, parse_variant, \
    records_to_csv, sweep, variant_config


def parse_resolutions(text: str) -> List[Tuple[int, int]]:
    """"512x512,2048x1024" -> [(512, 512), (2048, 1024)]，格式为 HxW"""
    resolutions = []
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        try:
            h, w = item.split("x")
            resolutions.append((int(h), int(w)))
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"分辨率格式应为 HxW: {item}") from e
    if not resolutions:
        raise argparse.ArgumentTypeError("至少需要一个分辨率")
    return resolutions


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, help="bench.yaml 路径 (默认: SEGMERGE_CONFIG 或仓库根目录)")
    p.add_argument("--seed", type=int, help="权重与输入的随机种子")
    p.add_argument("--warmup", type=int, help="预热次数 (默认 3)")
    p.add_argument("--reps", type=int, help="计时次数, >= 3 (默认 10)")
    p.add_argument("--threads", type=int, help="计时区线程数 (默认 1)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="segformerpp 合并率预设")
    p.add_argument("--rate", type=float, help="tome_sd 合并率 (默认 0.5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segmerge", description="token 合并注意力的代价模型与基准测试")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="单个变体的 forward 延迟与加速比")
    _add_common(p)
    p.add_argument("--variant", default="original", help=f"变体: {', '.join(BENCH_VARIANTS)}，可带 :hq/:fast 后缀")
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--out", type=str, help="可选：写出单行 CSV")

    p = sub.add_parser("sweep", help="变体 x 分辨率扫描，输出 CSV/JSON/Markdown")
    _add_common(p)
    p.add_argument("--variants", type=str, help="逗号分隔的变体列表 (默认取 bench.yaml)")
    p.add_argument("--resolutions", type=parse_resolutions, help="逗号分隔的 HxW 列表 (默认取 bench.yaml)")
    p.add_argument("--out", type=str, help="CSV 路径 (默认 <output_dir>/sweep.csv)")

    p = sub.add_parser("cost", help="解析代价模型报告")
    p.add_argument("--config", type=str, help="bench.yaml 路径")
    p.add_argument("--model-config", type=str, help="模型配置文件 (JSON/YAML)")
    p.add_argument("--variant", default="segformerpp", help="注意力变体 (original 即 sra)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="segformerpp 合并率预设")
    p.add_argument("--rate", type=float, help="tome_sd 合并率")
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--out", type=str, help="可选：写出 JSON")

    p = sub.add_parser(
        "gen-weights", help="生成种子玩具模型权重",
        description="用 256 路并行 xoshiro256++（SplitMix64 播种）生成玩具模型权重；"
                    "各路交错输出，与单路 xoshiro256++ 参考流不同，但同一种子跨平台逐位一致",
    )
    p.add_argument("--config", type=str, help="bench.yaml 路径")
    p.add_argument("--model-config", type=str, help="模型配置文件 (JSON/YAML)")
    p.add_argument("--seed", type=int, help="随机种子 (256 路并行 xoshiro256++ 流)")
    p.add_argument("--name", type=str, default="model", help="输出文件名前缀")
    p.add_argument("--out", type=str, help="输出目录 (默认 output_dir)")
    return parser


def _pick(value, default):
    return default if value is None else value


def _run_bench(args, settings: BenchConfig) -> int:
    b = settings.bench
    timer = PhaseTimer()
    record = bench(
        args.variant, args.height, args.width,
        seed=_pick(args.seed, b["seed"]), warmup=_pick(args.warmup, b["warmup"]),
        reps=_pick(args.reps, b["reps"]), threads=_pick(args.threads, b["threads"]),
        preset=args.preset, rate=_pick(args.rate, b.get("tome_rate")),
        base_config=settings.model_config, chunk_elements=settings.chunk_elements, timer=timer,
    )
    timer.print_summary()
    print(records_to_csv([record]), end="")
    if args.out:
        SegMergeUtils.save_text_file(args.out, records_to_csv([record]))
        log.info(f"✅ 结果已写入: {args.out}")
    return 0


def _run_sweep(args, settings: BenchConfig) -> int:
    b = settings.bench
    variants = [v.strip() for v in args.variants.split(",") if v.strip()] if args.variants else list(b["variants"])
    resolutions = args.resolutions or settings.resolutions
    out_path = args.out or os.path.join(settings.output_dir, "sweep.csv")
    records = sweep(
        variants, resolutions, out_path,
        seed=_pick(args.seed, b["seed"]), warmup=_pick(args.warmup, b["warmup"]),
        reps=_pick(args.reps, b["reps"]), threads=_pick(args.threads, b["threads"]),
        preset=args.preset, rate=_pick(args.rate, b.get("tome_rate")),
        base_config=settings.model_config, chunk_elements=settings.chunk_elements,
    )
    log.info(f"✅ sweep 完成: {len(records)} 个单元 -> {out_path}")
    return 0


def _base_config(args, settings: BenchConfig) -> ModelConfig:
    if getattr(args, "model_config", None):
        return load_model_config(args.model_config)
    return settings.model_config


def _run_cost(args, settings: BenchConfig) -> int:
    spec = parse_variant(args.variant, preset=args.preset, rate=args.rate)
    if spec.name == "downsample":
        raise ConfigError("downsample 是基准基线，没有解析代价公式")
    config = variant_config(spec, _base_config(args, settings))
    report, text = cost(config, args.height, args.width)
    print(text)
    if args.out:
        SegMergeUtils.save_json_file(args.out, report.to_dict())
        log.info(f"✅ 代价报告已写入: {args.out}")
    return 0


def _run_gen_weights(args, settings: BenchConfig) -> int:
    gen_weights(
        args.out or settings.output_dir, name=args.name,
        seed=_pick(args.seed, settings.bench["seed"]), config=_base_config(args, settings),
    )
    return 0


COMMANDS = {
    "bench": _run_bench,
    "sweep": _run_sweep,
    "cost": _run_cost,
    "gen-weights": _run_gen_weights,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        settings = BenchConfig(args.config)
        logging_cfg = settings.logging
        setup_logging(logging_cfg.get("level", "INFO"), logging_cfg.get("file", "segmerge.log"),
                      logging_cfg.get("rotation", "50 MB"))
        return COMMANDS[args.command](args, settings)
    except SegMergeError as e:
        log.error(f"❌ {type(e).__name__}: {e}")
        return 1
    except KeyboardInterrupt:
        log.warning("⚠️ 用户中断")
        return 130


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
