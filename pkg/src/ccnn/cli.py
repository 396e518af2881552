"""Command-line surface.

Subcommands: cost-report, train, eval, cascade, quantize, inspect.
Every failure path prints one ``error: ...`` line on stderr and returns a
nonzero code; tracebacks never reach the terminal.
"""

import argparse
import json
import sys
from pathlib import Path

from . import cascade as cascade_mod
from . import cost as cost_mod
from . import data as data_mod
from . import training as training_mod
from .architecture import NetworkSpec, build_network, default_network_spec
from .errors import CcnnError, ParameterError
from .modelfile import load_model, save_model
from .quantize import QuantScheme, quantized_storage

_HEAD_ALIASES = {"mid-a": "mid_a", "mid-b": "mid_b"}


def _parse_spec(text, num_classes=None):
    if text == "default":
        return default_network_spec(num_classes=num_classes or 3755)
    if text == "quarter":
        return default_network_spec(num_classes=num_classes or 3755, scale=4)
    raw = json.loads(Path(text).read_text())
    spec = NetworkSpec.from_dict(raw)
    if num_classes is not None and num_classes != spec.num_classes:
        raise ParameterError(
            f"--classes {num_classes} conflicts with spec file "
            f"({spec.num_classes} classes)"
        )
    return spec


def _parse_quant(text):
    """conv=8,fc=4[,gwap=8] -> QuantScheme; fc maps to the classifier bucket."""
    fields = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if not value:
            raise ParameterError(f"bad quantization token {part!r}, want key=bits")
        alias = {"conv": "conv_bits", "fc": "classifier_bits", "gwap": "gwap_bits"}
        if key not in alias:
            raise ParameterError(f"unknown quantization bucket {key!r}")
        fields[alias[key]] = int(value)
    return QuantScheme(**fields)


def _parse_data(text, input_size=64):
    if text.startswith("synth:"):
        body = text[len("synth:") :].replace("×", "x")
        k, _, per = body.partition("x")
        if not per:
            raise ParameterError("synth dataset spec must look like synth:10x200")
        return data_mod.synth_glyphs(int(k), int(per), size=input_size)
    return data_mod.load_dir(text, input_size=input_size)


def _load_network(path):
    mf = load_model(path)
    return mf, mf.to_network()


def _cmd_cost_report(args):
    spec = _parse_spec(args.spec, args.classes)
    scheme = _parse_quant(args.quant) if args.quant else None
    report = cost_mod.network_cost(spec, scheme)
    print(report.format_table())
    print()
    print(report.format_csv())
    return 0


def _cmd_train(args):
    samples = _parse_data(args.data)
    num_classes = max(s.label for s in samples) + 1
    if args.spec in ("default", "quarter"):
        spec = _parse_spec(args.spec, num_classes)
    else:
        spec = _parse_spec(args.spec)
    config_dict = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        config_dict["seed"] = args.seed
    config = training_mod.TrainConfig.from_dict(config_dict)
    eval_samples = None
    if args.eval_frac > 0:
        samples, eval_samples = data_mod.stratified_split(
            samples, args.eval_frac, seed=config.seed
        )
    network = build_network(spec, seed=config.seed)
    params, metrics = training_mod.train(
        network,
        samples,
        config,
        args.strategy,
        eval_data=eval_samples,
        metrics_path=args.metrics,
    )
    save_model(args.out, spec, params, trained=True)
    last_epoch = metrics[-1]["epoch"]
    for row in metrics:
        if row["epoch"] == last_epoch:
            print(
                f"epoch {row['epoch']} {row['head']}: "
                f"loss {row['loss']:.4f} accuracy {row['accuracy']:.4f}"
            )
    print(f"model written to {args.out}")
    return 0


def _cmd_eval(args):
    _, network = _load_network(args.model)
    samples = _parse_data(args.data, input_size=network.spec.input_size)
    heads = (
        [_HEAD_ALIASES.get(args.head, args.head)]
        if args.head
        else network.spec.head_names()
    )
    for head in heads:
        acc = cascade_mod.head_eval(samples, network, head)
        print(f"{head} accuracy: {acc:.4f}")
    return 0


def _cmd_cascade(args):
    _, network = _load_network(args.model)
    samples = _parse_data(args.data, input_size=network.spec.input_size)
    thresholds = [float(t) for t in args.threshold.split(",")]
    if args.trace and len(thresholds) > 1:
        raise ParameterError("--trace wants a single threshold, not a sweep")
    print("threshold  accuracy  early_exit  mean_macs")
    for t in thresholds:
        policy = cascade_mod.CascadePolicy(threshold=t, fuse_late=not args.no_fuse)
        stats = cascade_mod.cascade_eval(
            samples, network, policy, trace_path=args.trace
        )
        print(
            f"{t:<9g}  {stats.accuracy:<8.4f}  "
            f"{stats.early_exit_fraction:<10.4f}  {stats.mean_mac_cost:,.0f}"
        )
    return 0


def _cmd_quantize(args):
    mf, network = _load_network(args.model)
    scheme = _parse_quant(args.bits)
    save_model(args.out, network.spec, network.params, scheme, trained=mf.trained)
    stored = quantized_storage(network.params, scheme)
    print(f"quantized model written to {args.out}")
    print(f"weight storage: {stored:,} bytes ({stored / 2 ** 20:.2f} MB)")
    return 0


def _cmd_inspect(args):
    mf, _ = _load_network(args.model)
    spec = mf.spec
    print(
        f"input {spec.input_size}x{spec.input_size}x{spec.in_channels}, "
        f"{spec.num_classes} classes, trained: {mf.trained}"
    )
    for name, out_c, d in spec.layer_flow():
        print(f"  backbone {name}: {out_c} channels at {d}x{d}")
    for ex in spec.exits:
        print(f"  exit {ex.name} after {ex.attach_after} ({ex.head.kind} head)")
    print(f"  final head: {spec.final_head.kind}")
    encodings = mf.encodings()
    total = 0
    for name, entry in mf.entries.items():
        count = 1
        for dim in entry.shape:
            count *= dim
        total += count
        print(f"{name}  shape {tuple(entry.shape)}  {encodings[name]}")
    print(f"total parameters: {total:,}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="ccnn",
        description="compact cascaded-exit CNN: cost model, trainer, inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost-report", help="print the analytic cost table")
    p.add_argument("--spec", default="default", help="default, quarter, or a spec JSON path")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--quant", default=None, help="e.g. conv=8,fc=4")
    p.set_defaults(func=_cmd_cost_report)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset dir or synth:KxN")
    p.add_argument("--strategy", required=True, choices=["multitask", "separate"])
    p.add_argument("--config", default=None, help="TrainConfig JSON path")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default="quarter", help="default, quarter, or a spec JSON path")
    p.add_argument("--eval-frac", type=float, default=0.2)
    p.add_argument("--metrics", default=None, help="per-epoch metrics CSV path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="standalone per-head accuracy")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--head", default=None, help="mid-a, mid-b, or final")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cascade", help="early-exit evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", default="0.98", help="one value or a comma sweep")
    p.add_argument("--no-fuse", action="store_true")
    p.add_argument("--trace", default=None, help="per-sample trace CSV path")
    p.set_defaults(func=_cmd_cascade)

    p = sub.add_parser("quantize", help="re-encode a model's weights")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bits", required=True, help="e.g. conv=8,fc=4")
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("inspect", help="describe a model file")
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (CcnnError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
