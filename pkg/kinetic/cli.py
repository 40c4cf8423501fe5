import argparse
import logging
import sys

from kinetic import constants
from kinetic.exceptions import ImproperlyConfigured
from kinetic.harness import ExperimentConfig, ExperimentRunner, write_manifest
from kinetic.settings import ExperimentSettings


logger = logging.getLogger('kinetic.cli')


COMMANDS = {
    'simulate': 'simulate',
    'fit': 'fit',
    'replicate': 'replicate',
    'clt': 'clt',
    'scaling': 'scaling',
    'hypo-check': 'hypo_check',
    'oracle': 'oracle',
}


def build_parser():
    parser = argparse.ArgumentParser(prog='kinetic', description='Parameter estimation for kinetic particle systems.')
    subparsers = parser.add_subparsers(dest='command', required=True)
    for command in COMMANDS:
        sub = subparsers.add_parser(command)
        sub.add_argument('--config', help='INI experiment file')
        sub.add_argument('--seed', type=int, help='master seed')
        sub.add_argument('--out', help='output directory')
        sub.add_argument('--threads', type=int, help='worker threads')
        sub.add_argument('--verbose', '-v', action='store_true', help='debug logging')
    return parser


def load_config(args):
    overrides = {'SEED': args.seed, 'OUTPUT_DIR': args.out, 'THREADS': args.threads}
    try:
        settings = ExperimentSettings(args.config, overrides=overrides)
    except OSError as exc:
        raise ImproperlyConfigured(f'Cannot read configuration: {exc}')
    except ValueError as exc:
        raise ImproperlyConfigured(f'Malformed configuration: {exc}')
    return settings, ExperimentConfig.from_settings(settings)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )

    try:
        settings, cfg = load_config(args)
        runner = ExperimentRunner(cfg)
        config_text = settings.as_ini()
        runner.after_task_hook(lambda context, result: write_manifest(
            runner._path(''), config_text, command=args.command, elapsed=context['elapsed']))
        getattr(runner, COMMANDS[args.command])()
    except Exception as exc:
        code = ExperimentRunner.exit_code(exc)
        if code == constants.EXIT_CODE.UNEXPECTED:
            logger.exception('%s failed', args.command)
        else:
            logger.error('%s failed: %s', args.command, exc)
        return code
    return constants.EXIT_CODE.SUCCESS


if __name__ == '__main__':
    sys.exit(main())
