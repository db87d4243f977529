import logging
import re
from contextlib import contextmanager
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.utils.module_loading import import_string
from django.core.management.base import BaseCommand, CommandError

from advranking import AdvrankingError
from advranking.datasets import SyntheticSpec, load_split, make_synthetic
from advranking.experiments.harness import corpus_index
from advranking.experiments.models import Checkpoint
from advranking.experiments.validators import validate_label
from advranking.metrics import Metric, recall_at_1
from advranking.ranker import ARCHITECTURES, LossKind, TrainConfig, save_model

logging_levels  = {3: 'DEBUG', 2: 'INFO', 1: 'WARNING', 0: 'ERROR'}
logging_formats = {
    0: '%(module)s: %(message)s',
    1: '%(levelname)s %(module)s: %(message)s',
    2: '%(levelname)s %(module)s: %(message)s',
    3: '%(asctime)s %(levelname)s %(module)s: %(message)s (pid: %(process)d/%(thread)d)',
}

SYNTHETIC_RE = re.compile(r'^(?P<classes>\d+)x(?P<points>\d+)x(?P<dim>\d+)$')
DEFAULT_SYNTHETIC = '3x50x16'


class LoggingBaseCommand(BaseCommand):
    """
    Django's commands use command.stdout.write instead of logging,
    although --verbosity (-v) is available for every command.
    LoggingBaseCommand configures Python's builtin logging according to the verbosity option,
    and knows how to load the datasets every advranking command works on.
    """

    def configure_logging(self, verbosity):
        logging_config_func = import_string(settings.LOGGING_CONFIG)
        logging_config_func({
            'version': 1,
            'disable_existing_loggers': False,
            'formatters': {
                'console': {
                    'format': logging_formats[verbosity]
                },
            },
            'handlers': {
                'console':{
                    'level': 'DEBUG',
                    'class': 'logging.StreamHandler',
                    'formatter': 'console',
                    'stream': self.stderr
                },
            },
            'loggers': {
                '': {
                    'handlers': ['console'],
                    'level': settings.DEBUG and 'DEBUG' or logging_levels[verbosity],
                    'propagate': True,
                }
            }
        })

    def add_dataset_arguments(self, parser):
        parser.add_argument(
            '--dataset-dir', dest='dataset_dir', default=None,
            help='Directory with the IDX files (default {})'.format(settings.DATA_DIR),
        )
        parser.add_argument(
            '--dataset', dest='dataset', default=settings.DATASET, choices=('mnist', 'fashion'),
            help='Name recorded for the IDX dataset (default {})'.format(settings.DATASET),
        )
        parser.add_argument(
            '--synthetic', dest='synthetic', nargs='?', const=DEFAULT_SYNTHETIC, default=None,
            metavar='CLASSESxPOINTSxDIM',
            help='Use generated clusters instead of IDX files (default shape {})'.format(DEFAULT_SYNTHETIC),
        )

    def load_dataset(self, options, split):
        """The ``split`` of the dataset selected by the command line."""

        if options.get('synthetic'):
            match = SYNTHETIC_RE.match(options['synthetic'])
            if match is None:
                raise CommandError('Invalid synthetic shape {!r}, expected e.g. {}'.format(
                    options['synthetic'], DEFAULT_SYNTHETIC))
            spec = SyntheticSpec(
                n_classes=int(match['classes']),
                points_per_class=int(match['points']),
                dim=int(match['dim']),
                seed=options['seed'],
            )
            return make_synthetic(spec, split)
        directory = Path(options.get('dataset_dir') or settings.DATA_DIR)
        return load_split(directory, split, name=options.get('dataset') or settings.DATASET)

    @contextmanager
    def library_errors(self, message):
        """Report library failures as command errors"""

        try:
            yield
        except (AdvrankingError, ValueError) as err:
            raise CommandError('{}: {}'.format(message, err)) from err


class TrainingCommand(LoggingBaseCommand):
    """Options shared by the commands producing checkpoints"""

    log = logging.getLogger(__name__)

    def add_arguments(self, parser):
        parser.add_argument('--arch', default='mlp', choices=sorted(ARCHITECTURES))
        parser.add_argument('--metric', default=Metric.COSINE.value, choices=[m.value for m in Metric])
        parser.add_argument('--loss', default=LossKind.TRIPLET.value, choices=[k.value for k in LossKind])
        parser.add_argument('--margin', type=float, default=None,
                            help='Triplet margin (default 0.2 for cosine, 1.0 for euclidean)')
        parser.add_argument('--lr', type=float, default=0.01)
        parser.add_argument('--batch', type=int, default=32)
        parser.add_argument('--epochs', type=int, default=5)
        parser.add_argument('--steps-per-epoch', dest='steps_per_epoch', type=int, default=None)
        parser.add_argument('--seed', type=int, default=settings.SEED)
        parser.add_argument('--corpus-size', dest='corpus_size', type=int, default=settings.CORPUS_SIZE,
                            help='Test items used to report Recall@1 (0 for all)')
        parser.add_argument('--name', default=None,
                            help='Checkpoint name (default: model tag and seed, i.e. ct-0)')
        parser.add_argument('--out', default=None,
                            help='Checkpoint path (default {}/<name>.ckpt)'.format(settings.CHECKPOINT_DIR))
        self.add_dataset_arguments(parser)

    def train_config(self, options):
        if options['name']:
            try:
                validate_label(options['name'])
            except ValidationError as err:
                raise CommandError('Invalid checkpoint name {!r}: {}'.format(
                    options['name'], ' '.join(err.messages))) from err
        with self.library_errors('Invalid training configuration'):
            return TrainConfig(
                loss_kind=options['loss'],
                metric=options['metric'],
                margin_beta=options['margin'],
                lr=options['lr'],
                batch=options['batch'],
                epochs=options['epochs'],
                seed=options['seed'],
                steps_per_epoch=options['steps_per_epoch'],
            )

    def checkpoint_path(self, options, name):
        return Path(options['out']) if options['out'] else Path(settings.CHECKPOINT_DIR) / '{}.ckpt'.format(name)

    def store(self, model, options, train_set):
        """Evaluate ``model`` on the test corpus, save and register it"""

        name = options['name'] or '{}-{}'.format(model.tag.lower(), options['seed'])
        path = self.checkpoint_path(options, name)
        with self.library_errors('Cannot store {}'.format(name)):
            corpus = self.load_dataset(options, 'test').head(options['corpus_size'] or None)
            index = corpus_index(model, corpus)
            recall = recall_at_1(index, index.embeddings, corpus.labels, query_ids=range(len(corpus)))
            path.parent.mkdir(parents=True, exist_ok=True)
            save_model(model, path)
        checkpoint = Checkpoint.register(name, path, model, dataset=train_set.name, recall_at_1=recall)
        self.log.info('Saved %s (%s) to %s, Recall@1 %.3f', name, model.tag, path, recall)
        return checkpoint
