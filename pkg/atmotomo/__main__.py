import argparse
import json
import logging
import sys
from typing import List, Optional

# atmotomo CLI
# ------------
# Herramienta de línea de comandos para experimentos de tomografía atmosférica.
#
# Comandos:
#     simulate          Genera las pantallas de turbulencia
#     forward           Simula los frentes de onda de cada estrella guía
#     reconstruct       Reconstruye las capas (svtd, fd, iterative_fd, gradient)
#     evaluate          Calcula errores por capa, residuos y Strehl
#     pipeline          Ejecuta las cuatro etapas
#     sweep             Barre alpha o el número de iteraciones
#     diagnose          Diagnóstico de Picard y de buen planteamiento (JSON)
#     export-plotdata   Tablas CSV para gráficas
#
# Ejemplos:
#     python -m atmotomo pipeline --preset ngs6 --out runs/ngs6
#     python -m atmotomo sweep --preset ngs6 --parameter alpha --values 1e-4 1e-3 1e-2

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

STAGE_COMMANDS = ("simulate", "forward", "reconstruct", "evaluate", "pipeline")


def _add_common(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", type=str, help="Experiment config (.json/.yaml/.toml) / Configuración del experimento")
    source.add_argument("--preset", type=str, help="Shipped preset name (ngs6, lgs6, mixed) / Nombre de un preset incluido")
    parser.add_argument("--seed", type=int, help="Override the seed (u64) / Sobrescribe la semilla (u64)")
    parser.add_argument("--out", type=str, help="Output directory / Directorio de salida")
    parser.add_argument("--threads", type=int, help="Worker threads / Hilos de trabajo")
    parser.add_argument("--cache-dir", type=str,
                        help="SVD cache directory (default: $ATMOTOMO_CACHE_DIR or <out>/cache) / Directorio de caché SVD")


def build_parser() -> argparse.ArgumentParser:
    examples = [
        "python -m atmotomo pipeline --preset ngs6 --out runs/ngs6",
        "python -m atmotomo reconstruct --config my_experiment.yaml --threads 4",
        "python -m atmotomo sweep --preset ngs6 --parameter alpha --values 1e-4 1e-3 1e-2",
        "python -m atmotomo diagnose --preset ngs6",
        "python -m atmotomo export-plotdata runs/ngs6",
    ]
    parser = argparse.ArgumentParser(
        prog="atmotomo",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="""
        atmotomo: Atmospheric tomography experiments (SVTD and frame-decomposition reconstructors).
        atmotomo: Experimentos de tomografía atmosférica (reconstructores SVTD y de descomposición en marcos).

        Examples / Ejemplos:
          """ + "\n          ".join(examples),
        epilog="Exit codes / Códigos de salida: 0 ok, 2 config error / error de configuración, 3 numerical failure / fallo numérico.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for INFO, -vv for DEBUG logging / -v para INFO, -vv para DEBUG")
    subparsers = parser.add_subparsers(dest="command", required=True)

    helps = {
        "simulate": "Generate turbulence screens / Genera las pantallas de turbulencia",
        "forward": "Simulate guide-star wavefronts from the screens / Simula los frentes de onda",
        "reconstruct": "Reconstruct the layers from the wavefronts / Reconstruye las capas",
        "evaluate": "Score the reconstruction / Evalúa la reconstrucción",
        "pipeline": "Run simulate, forward, reconstruct and evaluate / Ejecuta todas las etapas",
    }
    for name in STAGE_COMMANDS:
        _add_common(subparsers.add_parser(name, help=helps[name]))

    sweep_parser = subparsers.add_parser("sweep", help="Quality versus alpha or iterations / Calidad frente a alpha o iteraciones")
    _add_common(sweep_parser)
    sweep_parser.add_argument("--parameter", choices=("alpha", "iterations"), required=True,
                              help="Swept parameter / Parámetro a barrer")
    sweep_parser.add_argument("--values", type=float, nargs="+", required=True,
                              help="Parameter values / Valores del parámetro")

    diagnose_parser = subparsers.add_parser(
        "diagnose", help="Picard and well-posedness diagnostics as JSON / Diagnósticos de Picard y buen planteamiento en JSON"
    )
    _add_common(diagnose_parser)
    diagnose_parser.add_argument("--bins", type=int, default=20, help="Histogram bins / Intervalos del histograma")

    export_parser = subparsers.add_parser("export-plotdata", help="Write plot tables / Escribe tablas para gráficas")
    export_parser.add_argument("artifact_dir", type=str, help="Finished artifact directory / Directorio de artefactos")

    subparsers.add_parser("presets", help="List shipped presets / Lista los presets incluidos")
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load(args):
    from .config import load_config, load_preset
    config = load_config(args.config) if args.config else load_preset(args.preset)
    return config.with_overrides(seed=args.seed, output_dir=args.out, threads=args.threads)


def _run(args) -> int:
    from . import pipeline
    from .config import list_presets

    if args.command == "presets":
        print("Presets / Presets:", ", ".join(list_presets()))
        return EXIT_OK
    if args.command == "export-plotdata":
        directions, layers = pipeline.export_plotdata(args.artifact_dir)
        print(f"Wrote / Escrito: {directions}, {layers}")
        return EXIT_OK

    config = _load(args)
    out = pipeline.resolve_out_dir(config)
    if args.command == "simulate":
        pipeline.run_simulate(config)
    elif args.command == "forward":
        pipeline.run_forward(config)
    elif args.command == "reconstruct":
        pipeline.run_reconstruct(config, cache_dir=args.cache_dir)
    elif args.command == "evaluate":
        report = pipeline.run_evaluate(config)
        print(json.dumps(report.to_dict(), indent=2))
    elif args.command == "pipeline":
        result = pipeline.run_pipeline(config, cache_dir=args.cache_dir)
        print(json.dumps(result.report.to_dict(), indent=2))
    elif args.command == "sweep":
        result = pipeline.sweep(config, args.parameter, args.values, cache_dir=args.cache_dir)
        print(f"Wrote / Escrito: {result.table}")
        return EXIT_OK
    elif args.command == "diagnose":
        print(json.dumps(pipeline.diagnose(config, cache_dir=args.cache_dir, bins=args.bins), indent=2))
        return EXIT_OK
    print(f"Artifacts in / Artefactos en: {out}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point for the atmotomo CLI. (English)
    Punto de entrada para el CLI de atmotomo. (Español)
    Returns 0 on success, 2 on config, geometry or artifact errors, 3 on numerical failures. (English)
    Devuelve 0 si todo va bien, 2 ante errores de configuración, geometría o artefactos, 3 ante fallos numéricos. (Español)
    """
    from .core import AtmoTomoError, NumericalError

    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return _run(args)
    except NumericalError as e:
        print(f"Numerical error: {e}\nError numérico: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (AtmoTomoError, ValueError) as e:
        print(f"Error: {e}\nError: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
