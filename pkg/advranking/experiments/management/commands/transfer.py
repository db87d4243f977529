"""Transferability of adversarial ranking examples between models"""

import logging

from django.conf import settings

from advranking.attacks import AttackKind

from ...harness import run_transfer
from . import ExperimentCommand, resolve_model

TRANSFER_KINDS = [
    kind.value for kind in AttackKind
    if not kind.is_universal and kind is not AttackKind.MAX_SHIFT
]


class Command(ExperimentCommand):
    help = 'Craft adversarial examples on source models and rank them with target models.'
    protocol = 'transfer'
    log = logging.getLogger(__name__)

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--source', dest='sources', action='append', required=True,
                            help='Model crafting the examples (repeatable)')
        parser.add_argument('--target', dest='targets', action='append', required=True,
                            help='Model ranking the examples (repeatable)')
        parser.add_argument('--kind', default=AttackKind.CA_PLUS.value, choices=TRANSFER_KINDS)
        parser.add_argument('--epsilon', dest='epsilons', action='append', type=float,
                            help='Perturbation radius (repeatable, default 0.3)')
        parser.add_argument('--wm', dest='wms', action='append', type=int,
                            help='Queries w or candidates m (repeatable, default 1)')
        parser.add_argument('--xi', type=float, default=None,
                            help='Semantics-preserving weight of query attacks')

    def handle(self, *args, **options):
        self.configure_logging(options['verbosity'])

        sources = [resolve_model(ref) for ref in options['sources']]
        targets = [resolve_model(ref) for ref in options['targets']]
        unique = {ref.label: ref for ref in sources + targets}
        plan = self.plan(
            options,
            list(unique.values()),
            kinds=[options['kind']],
            epsilon_grid=options['epsilons'] or [max(settings.EPSILON_GRID)],
            wm_grid=options['wms'] or [1],
            xi=options['xi'],
        )
        corpus = self.corpus(options)

        with self.library_errors('Transfer failed'):
            table = run_transfer(sources, targets, plan, corpus)
        self.finish(table, plan, options)
