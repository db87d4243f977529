"""Sweep per-image ranking attacks over models, kinds, epsilons and w/m"""

import logging
from pathlib import Path

from django.conf import settings

from advranking.attacks import AttackKind

from ...harness import run_attack_sweep
from . import ExperimentCommand, resolve_model

SWEEP_KINDS = [kind.value for kind in AttackKind if not kind.is_universal]


class Command(ExperimentCommand):
    help = 'Attack every model with every kind, epsilon and number of queries/candidates.'
    protocol = 'sweep'
    log = logging.getLogger(__name__)

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--model', dest='models', action='append', required=True,
                            help='Registered checkpoint name or checkpoint path (repeatable)')
        parser.add_argument('--kind', dest='kinds', action='append', choices=SWEEP_KINDS,
                            help='Attack kind (repeatable, default CA+)')
        parser.add_argument('--epsilon', dest='epsilons', action='append', type=float,
                            help='Perturbation radius (repeatable, default {})'.format(
                                ','.join(map(str, settings.EPSILON_GRID))))
        parser.add_argument('--wm', dest='wms', action='append', type=int,
                            help='Queries w or candidates m (repeatable, default {})'.format(
                                ','.join(map(str, settings.WM_GRID))))
        parser.add_argument('--xi', type=float, default=None,
                            help='Semantics-preserving weight of query attacks '
                                 '(default {:g} for QA+, {:g} for QA-)'.format(
                                     settings.XI_QA_PLUS, settings.XI_QA_MINUS))
        parser.add_argument('--dump-dir', dest='dump_dir', default=None,
                            help='Write the adversarial images of every cell as IDX files here')

    def handle(self, *args, **options):
        self.configure_logging(options['verbosity'])

        models = [resolve_model(ref) for ref in options['models']]
        dump_dir = None
        if options['dump_dir']:
            dump_dir = Path(options['dump_dir'])
            dump_dir.mkdir(parents=True, exist_ok=True)
        plan = self.plan(
            options,
            models,
            kinds=options['kinds'] or [AttackKind.CA_PLUS.value],
            epsilon_grid=options['epsilons'] or settings.EPSILON_GRID,
            wm_grid=options['wms'] or settings.WM_GRID,
            xi=options['xi'],
            dump_dir=dump_dir,
        )
        corpus = self.corpus(options)

        with self.library_errors('Attack sweep failed'):
            table = run_attack_sweep(plan, corpus)
        self.finish(table, plan, options)
