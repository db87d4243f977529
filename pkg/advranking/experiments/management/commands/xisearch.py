"""Search the semantics-preserving weight of query attacks"""

import logging

from django.conf import settings

from advranking.attacks import AttackKind

from ...harness import run_xi_search
from . import ExperimentCommand, resolve_model

QUERY_KINDS = [AttackKind.QA_PLUS.value, AttackKind.QA_MINUS.value]


class Command(ExperimentCommand):
    help = 'Trade attack effect against disturbance of the top neighbours over a grid of xi.'
    protocol = 'xi-search'
    log = logging.getLogger(__name__)

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--model', required=True,
                            help='Registered checkpoint name or checkpoint path')
        parser.add_argument('--xi', dest='xis', action='append', type=float,
                            help='Weight (repeatable, ascending, default {})'.format(
                                ','.join('{:g}'.format(xi) for xi in settings.XI_GRID)))
        parser.add_argument('--kind', dest='kinds', action='append', choices=QUERY_KINDS,
                            help='Query attack (repeatable, default both)')
        parser.add_argument('--epsilon', type=float, default=max(settings.EPSILON_GRID))
        parser.add_argument('--wm', type=int, default=1)

    def handle(self, *args, **options):
        self.configure_logging(options['verbosity'])

        ref = resolve_model(options['model'])
        plan = self.plan(
            options, [ref], kinds=options['kinds'] or QUERY_KINDS,
            epsilon_grid=[options['epsilon']], wm_grid=[options['wm']],
        )
        corpus = self.corpus(options)

        with self.library_errors('xi search failed'):
            table = run_xi_search(plan, corpus, options['xis'] or settings.XI_GRID)
        self.finish(table, plan, options)
