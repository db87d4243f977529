"""Render a recorded experiment"""

import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from advranking.management.commands import LoggingBaseCommand

from ...models import Experiment
from ...report import FORMATS, ReportError, emit_report

SUFFIXES = {'csv': '.csv', 'text': '.txt'}


class Command(LoggingBaseCommand):
    help = 'Print or write the result table of a recorded experiment (default: the latest).'
    log = logging.getLogger(__name__)

    def add_arguments(self, parser):
        parser.add_argument('experiment', nargs='?', type=int, help='Experiment id')
        parser.add_argument('--format', dest='format', default='csv', choices=FORMATS)
        destination = parser.add_mutually_exclusive_group()
        destination.add_argument('--out', default=None, help='Report path (default: standard output)')
        destination.add_argument(
            '--save', action='store_true',
            help='Write experiment-<id>.csv (or .txt) into {}'.format(settings.RESULTS_DIR),
        )

    def handle(self, *args, **options):
        self.configure_logging(options['verbosity'])

        experiments = Experiment.objects.all()
        if options['experiment'] is not None:
            experiments = experiments.filter(pk=options['experiment'])
        experiment = experiments.first()
        if experiment is None:
            raise CommandError('No such experiment: {}'.format(options['experiment'] or 'none recorded'))

        path = options['out']
        if options['save']:
            path = Path(settings.RESULTS_DIR) / 'experiment-{}{}'.format(experiment.pk, SUFFIXES[options['format']])

        self.log.info('Rendering %s', experiment)
        try:
            content = emit_report(experiment.table(), path, options['format'])
        except ReportError as err:
            raise CommandError(str(err)) from err
        if path is None:
            self.stdout.write(content, ending='')
