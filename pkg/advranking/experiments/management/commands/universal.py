"""Universal (image-agnostic) ranking attacks on seen and unseen targets"""

import logging
from pathlib import Path

import numpy as np
from django.conf import settings

from advranking.attacks import AttackKind

from ...harness import UNIVERSAL_FRACTION, run_universal
from . import ExperimentCommand, resolve_model

UNIVERSAL_KINDS = [kind.value for kind in AttackKind if kind.is_universal]


class Command(ExperimentCommand):
    help = 'Craft one perturbation on a random 5% of the corpus and test it on another 5%.'
    protocol = 'universal'
    log = logging.getLogger(__name__)

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--model', required=True,
                            help='Registered checkpoint name or checkpoint path')
        parser.add_argument('--kind', default=AttackKind.I_CA_PLUS.value, choices=UNIVERSAL_KINDS)
        parser.add_argument('--epsilon', type=float, default=max(settings.EPSILON_GRID))
        parser.add_argument('--wm', type=int, default=1)
        parser.add_argument('--train-frac', dest='train_frac', type=float, default=UNIVERSAL_FRACTION,
                            help='Fraction of the corpus crafting the perturbation (default {:g})'.format(
                                UNIVERSAL_FRACTION))
        parser.add_argument('--xi', type=float, default=0.0,
                            help='Semantics-preserving weight of universal query attacks (default 0)')
        parser.add_argument('--save-perturbation', dest='save_perturbation', default=None,
                            help='Store the perturbation as a NumPy .npy file')

    def handle(self, *args, **options):
        self.configure_logging(options['verbosity'])

        ref = resolve_model(options['model'])
        plan = self.plan(
            options, [ref], kinds=[options['kind']],
            epsilon_grid=[options['epsilon']], wm_grid=[options['wm']],
        )
        corpus = self.corpus(options)

        with self.library_errors('Universal attack failed'):
            result = run_universal(
                ref, options['kind'], options['epsilon'], options['wm'], plan, corpus,
                train_frac=options['train_frac'], xi=options['xi'],
            )
        if options['save_perturbation']:
            np.save(Path(options['save_perturbation']), result.perturbation)
        self.finish(result.table, plan, options)
