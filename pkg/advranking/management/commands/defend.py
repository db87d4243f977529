"""Train a defensive embedding model and register its checkpoint"""

import logging

from django.conf import settings
from django.core.management.base import CommandError

from advranking.attacks import PerturbationBudget
from advranking.defense import DefenseConfig, DivergenceError, Variant, harden

from . import TrainingCommand


class Command(TrainingCommand):
    help = 'Train a model resisting adversarial ranking attacks by suppressing embedding shifts.'
    log = logging.getLogger(__name__)

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--variant', default=Variant.SHIFT_REPLACE.value, choices=[v.value for v in Variant],
            help='Replace samples by max-shift examples, or penalize the shift (trip-es)',
        )
        parser.add_argument(
            '--defense-epsilon', dest='defense_epsilon', type=float, default=settings.DEFENSE_EPSILON,
            help='Strength of the inner max-shift attack (default {})'.format(settings.DEFENSE_EPSILON),
        )
        parser.add_argument(
            '--trip-es-weight', dest='trip_es_weight', type=float, default=1.0,
            help='Weight of the shift penalty of the trip-es variant',
        )

    def handle(self, *args, **options):
        self.configure_logging(options['verbosity'])
        base = self.train_config(options)

        with self.library_errors('Invalid defense configuration'):
            cfg = DefenseConfig(
                budget=PerturbationBudget(options['defense_epsilon']),
                base=base,
                variant=options['variant'],
                trip_es_weight=options['trip_es_weight'],
            )

        try:
            with self.library_errors('Defensive training failed'):
                dataset = self.load_dataset(options, 'train')
                model, history = harden(dataset, cfg, arch=options['arch'])
        except CommandError as err:
            if isinstance(err.__cause__, DivergenceError):
                self.log.error('%s', err.__cause__)
            raise
        model = model.with_meta(dataset=dataset.name)

        checkpoint = self.store(model, options, dataset)
        return 'Hardened {} ({}, {} at epsilon {:g})'.format(
            checkpoint.name, checkpoint.tag, cfg.variant.value, cfg.budget.epsilon,
        )
