import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from advranking.attacks import AttackKind
from advranking.management.commands import LoggingBaseCommand
from advranking.ranker import CheckpointError, load_model

from ...harness import ExperimentPlan, ModelRef
from ...models import Checkpoint, Experiment
from ...report import FORMATS, ReportError, emit_report

logger = logging.getLogger(__name__)


def resolve_model(ref):
    """Load a registered checkpoint by name, or a checkpoint file by path.

    Returns: ModelRef labelled by the checkpoint name or the file stem.
    """

    checkpoint = Checkpoint.objects.filter(name=ref).first()
    path = Path(checkpoint.path) if checkpoint is not None else Path(ref)
    label = checkpoint.name if checkpoint is not None else path.stem
    if checkpoint is None and not path.is_file():
        raise CommandError('Unknown model {!r}: neither a registered checkpoint nor a file'.format(ref))
    try:
        return ModelRef(label, load_model(path))
    except CheckpointError as err:
        raise CommandError('Cannot load model {!r}: {}'.format(ref, err)) from err


def xi_defaults():
    """Configured semantics-preserving weight of each query attack"""

    return {AttackKind.QA_PLUS: settings.XI_QA_PLUS, AttackKind.QA_MINUS: settings.XI_QA_MINUS}


class ExperimentCommand(LoggingBaseCommand):
    """Options and bookkeeping shared by the experiment protocols"""

    protocol = 'sweep'

    def add_arguments(self, parser):
        parser.add_argument('--seed', type=int, default=settings.SEED)
        parser.add_argument('--corpus-size', dest='corpus_size', type=int, default=settings.CORPUS_SIZE,
                            help='Test items forming the corpus X (0 for the whole split)')
        parser.add_argument('--trials', type=int, default=settings.TRIALS,
                            help='Attacks per cell (default {})'.format(settings.TRIALS))
        parser.add_argument('--full-trials', dest='full_trials', action='store_true', default=False,
                            help='Attack every corpus item once')
        parser.add_argument('--jobs', type=int, default=settings.JOBS,
                            help='Worker processes (default {})'.format(settings.JOBS))
        parser.add_argument('--pool-size', dest='pool_size', type=int, default=settings.POOL_SIZE,
                            help='Corpus subsample of the attack loss (0 for the full corpus)')
        parser.add_argument('--full-pool', dest='full_pool', action='store_true', default=False,
                            help='Evaluate the attack loss over the full corpus')
        parser.add_argument('--sp-group', dest='sp_group', type=int, default=settings.SP_GROUP,
                            help='Size G of the semantics-preserving group')
        parser.add_argument('--out', default=None, help='Report path (default: standard output)')
        parser.add_argument('--format', dest='format', default='csv', choices=FORMATS)
        self.add_dataset_arguments(parser)

    def corpus(self, options):
        with self.library_errors('Cannot load the corpus'):
            return self.load_dataset(options, 'test')

    def plan(self, options, models, kinds, epsilon_grid, wm_grid, xi=None, dump_dir=None):
        pool_size = None if options['full_pool'] or not options['pool_size'] else options['pool_size']
        with self.library_errors('Invalid experiment'):
            return ExperimentPlan(
                models=models,
                kinds=kinds,
                epsilon_grid=epsilon_grid,
                wm_grid=wm_grid,
                trials=None if options['full_trials'] else options['trials'],
                seed=options['seed'],
                corpus_size=options['corpus_size'] or None,
                pool_size=pool_size,
                g=options['sp_group'],
                xi=xi,
                xi_defaults=xi_defaults(),
                jobs=options['jobs'],
                dump_dir=dump_dir,
            )

    def finish(self, table, plan, options):
        """Store and emit ``table``; exit with status 2 when cells failed"""

        experiment = Experiment.record(
            self.protocol, table, seed=plan.seed, corpus_size=plan.corpus_size, trials=plan.trials,
        )
        try:
            content = emit_report(table, options['out'], options['format'])
        except ReportError as err:
            raise CommandError(str(err)) from err
        if options['out'] is None:
            self.stdout.write(content, ending='')

        failed = table.errors
        if failed:
            raise CommandError(
                'Experiment {} finished with {} failed cell(s)'.format(experiment.pk, len(failed)),
                returncode=2,
            )
        logger.info('Experiment %s recorded with %d cells', experiment.pk, len(table))
        return experiment
